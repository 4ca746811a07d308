use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evalsuite::EvalReport;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    Csv,
    Json,
}

impl std::str::FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(ReportFormat::Csv),
            "json" => Ok(ReportFormat::Json),
            _ => Err(Error::config(format!("unknown report format `{s}` (csv, json)"))),
        }
    }
}

/// A labelled evaluation, one row of an emitted report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReportRow {
    pub label: String,
    pub ue: f64,
    pub ut: f64,
    pub verbmem: f64,
    pub knowmem: f64,
    pub privleak: Option<f64>,
}

impl ReportRow {
    pub fn new(label: impl Into<String>, r: &EvalReport) -> Self {
        Self { label: label.into(), ue: r.ue, ut: r.ut, verbmem: r.verbmem, knowmem: r.knowmem, privleak: r.privleak }
    }
}

pub const REPORT_HEADER: [&str; 6] = ["label", "ue", "ut", "verbmem", "knowmem", "privleak"];

pub fn render_report(rows: &[ReportRow], format: ReportFormat) -> Result<Vec<u8>> {
    match format {
        ReportFormat::Json => Ok(serde_json::to_vec_pretty(rows)?),
        ReportFormat::Csv => {
            let mut w = csv::Writer::from_writer(Vec::new());
            w.write_record(REPORT_HEADER)?;
            for r in rows {
                w.write_record([
                    r.label.clone(),
                    r.ue.to_string(),
                    r.ut.to_string(),
                    r.verbmem.to_string(),
                    r.knowmem.to_string(),
                    r.privleak.map(|p| p.to_string()).unwrap_or_default(),
                ])?;
            }
            w.into_inner().map_err(|e| Error::Data(format!("csv flush: {e}")))
        }
    }
}

/// Writes `rows` to `path` atomically.
pub fn emit_report(rows: &[ReportRow], format: ReportFormat, path: &Path) -> Result<()> {
    super::write_atomic(path, &render_report(rows, format)?)
}

/// Reads a report written by [`emit_report`] in either format.
pub fn read_report(path: &Path, format: ReportFormat) -> Result<Vec<ReportRow>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    match format {
        ReportFormat::Json => Ok(serde_json::from_slice(&bytes)?),
        ReportFormat::Csv => {
            let mut r = csv::Reader::from_reader(bytes.as_slice());
            let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
            if header != REPORT_HEADER {
                return Err(Error::Data(format!("unexpected report header {header:?}")));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|_| Error::Data(format!("bad number `{s}` in report")));
            r.records()
                .map(|rec| {
                    let rec = rec?;
                    Ok(ReportRow {
                        label: rec[0].to_string(),
                        ue: num(&rec[1])?,
                        ut: num(&rec[2])?,
                        verbmem: num(&rec[3])?,
                        knowmem: num(&rec[4])?,
                        privleak: if rec[5].is_empty() { None } else { Some(num(&rec[5])?) },
                    })
                })
                .collect()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn empty_report_is_header_only() {
        let text = String::from_utf8(render_report(&[], ReportFormat::Csv).unwrap()).unwrap();
        assert_eq!(text, "label,ue,ut,verbmem,knowmem,privleak\n");
    }

    #[test]
    fn one_report_one_row() {
        let rep = EvalReport { ue: 75.0, ut: 90.5, verbmem: 3.25, knowmem: 20.0, privleak: None, auc: 0.5 };
        let text = String::from_utf8(render_report(&[ReportRow::new("a", &rep)], ReportFormat::Csv).unwrap()).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines, ["label,ue,ut,verbmem,knowmem,privleak", "a,75,90.5,3.25,20,"]);
    }

    proptest! {
        #[test]
        fn csv_and_json_agree(vals in proptest::collection::vec((0.0f64..100.0, 0.0f64..100.0, proptest::option::of(-100.0f64..100.0)), 0..8)) {
            let rows: Vec<ReportRow> = vals
                .iter()
                .enumerate()
                .map(|(i, &(a, b, p))| ReportRow { label: format!("run,{i}"), ue: a, ut: b, verbmem: a / 3.0, knowmem: b / 7.0, privleak: p })
                .collect();
            let dir = tempfile::tempdir().unwrap();
            let (c, j) = (dir.path().join("r.csv"), dir.path().join("r.json"));
            emit_report(&rows, ReportFormat::Csv, &c).unwrap();
            emit_report(&rows, ReportFormat::Json, &j).unwrap();
            let from_csv = read_report(&c, ReportFormat::Csv).unwrap();
            let from_json = read_report(&j, ReportFormat::Json).unwrap();
            prop_assert_eq!(&from_csv, &from_json);
            prop_assert_eq!(&from_csv, &rows);
        }
    }
}
