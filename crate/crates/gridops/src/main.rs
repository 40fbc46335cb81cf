use std::io;

use tracing_subscriber::EnvFilter;

fn main() {
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new("info")))
        .with_writer(io::stderr)
        .init();
    let (mut stdin, mut stdout, mut stderr) = (io::stdin().lock(), io::stdout().lock(), io::stderr());
    let code = gridops::cli::run(std::env::args_os(), gridops::cli::Io { stdin: &mut stdin, stdout: &mut stdout, stderr: &mut stderr });
    std::process::exit(code);
}
