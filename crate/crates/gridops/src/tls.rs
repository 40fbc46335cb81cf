//! TLS termination with optional client certificates, and the connection loop.

use std::future::Future;
use std::io::BufReader;
use std::path::Path;
use std::sync::Arc;
use std::time::Duration;

use axum::Router;
use gridops_core::registry::normalize_dn;
use hyper::body::Incoming;
use hyper::Request;
use hyper_util::rt::{TokioExecutor, TokioIo};
use hyper_util::server::conn::auto::Builder;
use hyper_util::server::graceful::GracefulShutdown;
use hyper_util::service::TowerToHyperService;
use tokio::net::TcpListener;
use tokio_rustls::rustls::crypto::ring;
use tokio_rustls::rustls::pki_types::{CertificateDer, PrivateKeyDer};
use tokio_rustls::rustls::server::WebPkiClientVerifier;
use tokio_rustls::rustls::{RootCertStore, ServerConfig};
use tokio_rustls::TlsAcceptor;
use tower::ServiceExt;
use x509_parser::prelude::{FromDer, X509Certificate};

use crate::auth::PeerDn;
use crate::error::SuiteError;

fn read_pem(path: &Path) -> Result<BufReader<std::fs::File>, SuiteError> {
    let f = std::fs::File::open(path).map_err(|e| SuiteError::Config(format!("{}: {e}", path.display())))?;
    Ok(BufReader::new(f))
}

fn load_certs(path: &Path) -> Result<Vec<CertificateDer<'static>>, SuiteError> {
    let certs: Result<Vec<_>, _> = rustls_pemfile::certs(&mut read_pem(path)?).collect();
    let certs = certs.map_err(|e| SuiteError::Config(format!("{}: {e}", path.display())))?;
    if certs.is_empty() {
        return Err(SuiteError::Config(format!("{}: no certificates", path.display())));
    }
    Ok(certs)
}

fn load_key(path: &Path) -> Result<PrivateKeyDer<'static>, SuiteError> {
    rustls_pemfile::private_key(&mut read_pem(path)?)
        .map_err(|e| SuiteError::Config(format!("{}: {e}", path.display())))?
        .ok_or_else(|| SuiteError::Config(format!("{}: no private key", path.display())))
}

/// Server configuration. With a client CA, certificates signed by it are
/// verified; clients without one are still admitted and treated as anonymous.
pub fn server_config(cert: &Path, key: &Path, client_ca: Option<&Path>) -> Result<ServerConfig, SuiteError> {
    let provider = Arc::new(ring::default_provider());
    let builder =
        ServerConfig::builder_with_provider(provider.clone()).with_safe_default_protocol_versions().map_err(|e| SuiteError::Config(e.to_string()))?;
    let builder = match client_ca {
        Some(ca) => {
            let mut roots = RootCertStore::empty();
            for c in load_certs(ca)? {
                roots.add(c).map_err(|e| SuiteError::Config(format!("{}: {e}", ca.display())))?;
            }
            let verifier = WebPkiClientVerifier::builder_with_provider(Arc::new(roots), provider)
                .allow_unauthenticated()
                .build()
                .map_err(|e| SuiteError::Config(e.to_string()))?;
            builder.with_client_cert_verifier(verifier)
        }
        None => builder.with_no_client_auth(),
    };
    let mut cfg = builder.with_single_cert(load_certs(cert)?, load_key(key)?).map_err(|e| SuiteError::Config(e.to_string()))?;
    cfg.alpn_protocols = vec![b"h2".to_vec(), b"http/1.1".to_vec()];
    Ok(cfg)
}

fn short_name(oid: &str) -> Option<&'static str> {
    Some(match oid {
        "2.5.4.3" => "CN",
        "2.5.4.6" => "C",
        "2.5.4.7" => "L",
        "2.5.4.8" => "ST",
        "2.5.4.10" => "O",
        "2.5.4.11" => "OU",
        "0.9.2342.19200300.100.1.25" => "DC",
        "0.9.2342.19200300.100.1.1" => "UID",
        "1.2.840.113549.1.9.1" => "emailAddress",
        _ => return None,
    })
}

fn escape_value(v: &str) -> String {
    let mut out = String::with_capacity(v.len());
    for c in v.chars() {
        if matches!(c, ',' | '+' | '"' | '\\' | '<' | '>' | ';' | '=') {
            out.push('\\');
        }
        out.push(c);
    }
    out
}

/// Subject DN of a DER certificate in normalized RFC 2253 form.
pub fn subject_dn(der: &[u8]) -> Option<String> {
    let (_, cert) = X509Certificate::from_der(der).ok()?;
    let mut rdns = Vec::new();
    for rdn in cert.subject().iter_rdn() {
        let avas: Vec<String> = rdn
            .iter()
            .map(|ava| {
                let oid = ava.attr_type().to_id_string();
                let ty = short_name(&oid).map(str::to_string).unwrap_or(oid);
                let value = ava.as_str().map(escape_value).unwrap_or_default();
                format!("{ty}={value}")
            })
            .collect();
        rdns.push(avas.join("+"));
    }
    rdns.reverse();
    Some(normalize_dn(&rdns.join(",")))
}

/// Accepts connections until `shutdown` resolves, then drains open ones.
///
/// Without an acceptor the listener speaks plain HTTP and callers can only be
/// identified through the trusted proxy header.
pub async fn serve(listener: TcpListener, acceptor: Option<TlsAcceptor>, app: Router, shutdown: impl Future<Output = ()>) {
    let graceful = GracefulShutdown::new();
    tokio::pin!(shutdown);
    loop {
        let (tcp, remote) = tokio::select! {
            accepted = listener.accept() => match accepted {
                Ok(c) => c,
                Err(e) => {
                    tracing::warn!("accept failed: {e}");
                    continue;
                }
            },
            _ = &mut shutdown => break,
        };
        let app = app.clone();
        let acceptor = acceptor.clone();
        let watcher = graceful.watcher();
        tokio::spawn(async move {
            let builder = Builder::new(TokioExecutor::new());
            match acceptor {
                Some(acceptor) => {
                    let tls = match acceptor.accept(tcp).await {
                        Ok(s) => s,
                        Err(e) => {
                            tracing::debug!("TLS handshake with {remote} failed: {e}");
                            return;
                        }
                    };
                    let peer = tls.get_ref().1.peer_certificates().and_then(|c| c.first()).and_then(|c| subject_dn(c)).map(PeerDn);
                    let svc = app.map_request(move |mut req: Request<Incoming>| {
                        if let Some(p) = &peer {
                            req.extensions_mut().insert(p.clone());
                        }
                        req
                    });
                    let conn = builder.serve_connection_with_upgrades(TokioIo::new(tls), TowerToHyperService::new(svc));
                    if let Err(e) = watcher.watch(conn.into_owned()).await {
                        tracing::debug!("connection from {remote}: {e}");
                    }
                }
                None => {
                    let conn = builder.serve_connection_with_upgrades(TokioIo::new(tcp), TowerToHyperService::new(app));
                    if let Err(e) = watcher.watch(conn.into_owned()).await {
                        tracing::debug!("connection from {remote}: {e}");
                    }
                }
            }
        });
    }
    drop(listener);
    if tokio::time::timeout(Duration::from_secs(10), graceful.shutdown()).await.is_err() {
        tracing::warn!("connections still open after 10 s; closing");
    }
}
