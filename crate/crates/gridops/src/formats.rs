//! File and wire formats: JSON lines, the usage-table XML document and report CSV.

use std::collections::BTreeMap;

use chrono::{DateTime, NaiveDate, NaiveTime};
use gridops_core::accounting::{quantize, Dim, Metric, UsageCell, UsageTable};
use gridops_core::sla::AvailabilityReport;
use gridops_core::time::Timestamp;
use quick_xml::events::{BytesDecl, BytesEnd, BytesStart, Event};
use quick_xml::{Reader, Writer};
use serde::de::DeserializeOwned;

use crate::error::SuiteError;
use crate::suite::LineError;

/// Items of a JSON array, a single JSON object, or JSON lines.
///
/// Blank lines are skipped; each undecodable line becomes a [`LineError`].
pub fn parse_json_items<T: DeserializeOwned>(text: &str) -> Vec<Result<T, LineError>> {
    let trimmed = text.trim_start();
    if trimmed.starts_with('[') {
        return match serde_json::from_str::<Vec<serde_json::Value>>(trimmed) {
            Ok(values) => values.into_iter().enumerate().map(|(i, v)| serde_json::from_value(v).map_err(|e| invalid(i + 1, e))).collect(),
            Err(e) => vec![Err(invalid(1, e))],
        };
    }
    text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()).map(|(i, l)| serde_json::from_str(l).map_err(|e| invalid(i + 1, e))).collect()
}

fn invalid(line: usize, e: serde_json::Error) -> LineError {
    LineError { line, code: "INVALID_JSON".to_string(), message: e.to_string() }
}

/// RFC 3339 instant, or a calendar date meaning its midnight UTC.
pub fn parse_instant(s: &str) -> Result<Timestamp, SuiteError> {
    if let Ok(t) = DateTime::parse_from_rfc3339(s) {
        return Ok(t.to_utc());
    }
    NaiveDate::parse_from_str(s, "%Y-%m-%d")
        .map(|d| d.and_time(NaiveTime::MIN).and_utc())
        .map_err(|_| SuiteError::bad_request("INVALID_TIME", format!("{s:?} is neither RFC 3339 nor YYYY-MM-DD")))
}

pub const XML_ROOT: &str = "usage-table";

fn fixed3(v: f64) -> String {
    format!("{v:.3}")
}

/// Serializes a usage table; values carry exactly three fraction digits.
pub fn export_xml(table: &UsageTable) -> String {
    let mut w = Writer::new_with_indent(Vec::new(), b' ', 2);
    let write = |w: &mut Writer<Vec<u8>>, ev: Event<'_>| w.write_event(ev).expect("writing to memory");
    write(&mut w, Event::Decl(BytesDecl::new("1.0", Some("UTF-8"), None)));
    let mut root = BytesStart::new(XML_ROOT);
    root.push_attribute(("rows", table.rows_dim.as_str()));
    root.push_attribute(("cols", table.cols_dim.as_str()));
    root.push_attribute(("metric", table.metric.as_str()));
    write(&mut w, Event::Start(root));
    for c in &table.cells {
        let mut e = BytesStart::new("cell");
        e.push_attribute(("row", c.row.as_str()));
        e.push_attribute(("col", c.col.as_str()));
        e.push_attribute(("value", fixed3(c.value).as_str()));
        write(&mut w, Event::Empty(e));
    }
    for (row, v) in &table.row_totals {
        let mut e = BytesStart::new("row-total");
        e.push_attribute(("row", row.as_str()));
        e.push_attribute(("value", fixed3(*v).as_str()));
        write(&mut w, Event::Empty(e));
    }
    for (col, v) in &table.col_totals {
        let mut e = BytesStart::new("col-total");
        e.push_attribute(("col", col.as_str()));
        e.push_attribute(("value", fixed3(*v).as_str()));
        write(&mut w, Event::Empty(e));
    }
    let mut e = BytesStart::new("grand-total");
    e.push_attribute(("value", fixed3(table.grand_total).as_str()));
    write(&mut w, Event::Empty(e));
    write(&mut w, Event::End(BytesEnd::new(XML_ROOT)));
    let mut out = String::from_utf8(w.into_inner()).expect("utf-8 output");
    out.push('\n');
    out
}

fn xml_err(msg: impl std::fmt::Display) -> SuiteError {
    SuiteError::bad_request("INVALID_XML", msg.to_string())
}

fn attrs(e: &BytesStart<'_>) -> Result<BTreeMap<String, String>, SuiteError> {
    let mut out = BTreeMap::new();
    for a in e.attributes() {
        let a = a.map_err(xml_err)?;
        let key = String::from_utf8_lossy(a.key.as_ref()).into_owned();
        let value = a.unescape_value().map_err(xml_err)?.into_owned();
        out.insert(key, value);
    }
    Ok(out)
}

fn take(a: &mut BTreeMap<String, String>, key: &str, elem: &str) -> Result<String, SuiteError> {
    a.remove(key).ok_or_else(|| xml_err(format!("<{elem}> lacks {key}=")))
}

fn number(s: &str) -> Result<f64, SuiteError> {
    let v: f64 = s.parse().map_err(|_| xml_err(format!("bad value {s:?}")))?;
    if !v.is_finite() {
        return Err(xml_err(format!("bad value {s:?}")));
    }
    Ok(quantize(v))
}

/// Reads a document produced by [`export_xml`].
pub fn import_xml(text: &str) -> Result<UsageTable, SuiteError> {
    let mut reader = Reader::from_str(text);
    reader.config_mut().trim_text(true);
    let mut table: Option<UsageTable> = None;
    let mut closed = false;
    loop {
        let ev = reader.read_event().map_err(xml_err)?;
        match ev {
            Event::Eof => break,
            Event::Decl(_) | Event::Comment(_) | Event::DocType(_) | Event::PI(_) => {}
            Event::Start(e) | Event::Empty(e) => {
                let name = String::from_utf8_lossy(e.name().as_ref()).into_owned();
                let mut a = attrs(&e)?;
                if name == XML_ROOT {
                    if table.is_some() {
                        return Err(xml_err("nested usage-table"));
                    }
                    let dim = |s: String| s.parse::<Dim>().map_err(xml_err);
                    table = Some(UsageTable {
                        rows_dim: dim(take(&mut a, "rows", XML_ROOT)?)?,
                        cols_dim: dim(take(&mut a, "cols", XML_ROOT)?)?,
                        metric: take(&mut a, "metric", XML_ROOT)?.parse::<Metric>().map_err(xml_err)?,
                        cells: Vec::new(),
                        row_totals: BTreeMap::new(),
                        col_totals: BTreeMap::new(),
                        grand_total: 0.0,
                    });
                    continue;
                }
                let t = table.as_mut().ok_or_else(|| xml_err(format!("<{name}> outside usage-table")))?;
                match name.as_str() {
                    "cell" => t.cells.push(UsageCell {
                        row: take(&mut a, "row", "cell")?,
                        col: take(&mut a, "col", "cell")?,
                        value: number(&take(&mut a, "value", "cell")?)?,
                    }),
                    "row-total" => {
                        let row = take(&mut a, "row", "row-total")?;
                        t.row_totals.insert(row, number(&take(&mut a, "value", "row-total")?)?);
                    }
                    "col-total" => {
                        let col = take(&mut a, "col", "col-total")?;
                        t.col_totals.insert(col, number(&take(&mut a, "value", "col-total")?)?);
                    }
                    "grand-total" => t.grand_total = number(&take(&mut a, "value", "grand-total")?)?,
                    other => return Err(xml_err(format!("unexpected <{other}>"))),
                }
            }
            Event::End(e) => {
                if e.name().as_ref() == XML_ROOT.as_bytes() {
                    closed = true;
                }
            }
            Event::Text(t) => {
                if !t.iter().all(u8::is_ascii_whitespace) {
                    return Err(xml_err("unexpected text"));
                }
            }
            Event::CData(_) => return Err(xml_err("unexpected CDATA")),
        }
    }
    match table {
        Some(t) if closed => Ok(t),
        _ => Err(xml_err("missing usage-table")),
    }
}

/// One row per scope: `scope_kind,scope_id,scope_name,availability,weight,coverage`.
pub fn report_csv(report: &AvailabilityReport) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["scope_kind", "scope_id", "scope_name", "availability", "weight", "coverage"]).expect("in-memory csv");
    for f in report.rows() {
        w.write_record([
            f.kind.as_str().to_string(),
            f.scope.to_string(),
            f.name.clone(),
            format!("{:.6}", f.availability),
            f.weight.to_string(),
            format!("{:.6}", f.coverage),
        ])
        .expect("in-memory csv");
    }
    String::from_utf8(w.into_inner().expect("in-memory csv")).expect("utf-8 csv")
}
