use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::metrics::{Aggregate, MetricsReport};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportFormat {
    TableText,
    Csv,
    Markdown,
}

impl FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "table_text" | "text" | "table" => Ok(Self::TableText),
            "csv" => Ok(Self::Csv),
            "markdown" | "md" => Ok(Self::Markdown),
            other => Err(Error::Config(format!("unknown report format `{other}`"))),
        }
    }
}

const HEADERS: [&str; 6] = ["scenario", "reps", "IA", "OR", "few-shot", "fidelity"];
const CSV_HEADERS: [&str; 10] = [
    "scenario",
    "repetitions",
    "inscope_mean",
    "inscope_std",
    "oos_recall_mean",
    "oos_recall_std",
    "few_shot_mean",
    "few_shot_std",
    "fidelity_mean",
    "fidelity_std",
];

fn cells(r: &MetricsReport) -> [String; 6] {
    let opt = |a: &Option<Aggregate>| a.map(|a| a.cell()).unwrap_or_else(|| "-".into());
    [
        r.scenario.clone(),
        r.repetitions.len().to_string(),
        r.inscope_accuracy.cell(),
        opt(&r.oos_recall),
        opt(&r.few_shot_accuracy),
        opt(&r.fidelity),
    ]
}

/// Renders reports in order. Text and markdown show percentages as
/// `mean (std)`; csv keeps raw fractions at full precision.
pub fn emit_report(reports: &[MetricsReport], format: ReportFormat) -> Result<String> {
    match format {
        ReportFormat::Csv => {
            let mut w = csv::Writer::from_writer(Vec::new());
            w.write_record(CSV_HEADERS).map_err(csv_error)?;
            for r in reports {
                let opt = |a: Option<Aggregate>, std: bool| {
                    a.map(|a| if std { a.std } else { a.mean }.to_string())
                        .unwrap_or_default()
                };
                w.write_record([
                    r.scenario.clone(),
                    r.repetitions.len().to_string(),
                    r.inscope_accuracy.mean.to_string(),
                    r.inscope_accuracy.std.to_string(),
                    opt(r.oos_recall, false),
                    opt(r.oos_recall, true),
                    opt(r.few_shot_accuracy, false),
                    opt(r.few_shot_accuracy, true),
                    opt(r.fidelity, false),
                    opt(r.fidelity, true),
                ])
                .map_err(csv_error)?;
            }
            let bytes = w.into_inner().map_err(|e| Error::Parse(e.to_string()))?;
            String::from_utf8(bytes).map_err(|e| Error::Parse(e.to_string()))
        }
        ReportFormat::Markdown => {
            let mut out = format!("| {} |\n", HEADERS.join(" | "));
            out.push_str(&format!("|{}\n", "---|".repeat(HEADERS.len())));
            for r in reports {
                out.push_str(&format!("| {} |\n", cells(r).join(" | ")));
            }
            Ok(out)
        }
        ReportFormat::TableText => {
            let rows: Vec<[String; 6]> = reports.iter().map(cells).collect();
            let widths: Vec<usize> = (0..HEADERS.len())
                .map(|c| {
                    rows.iter()
                        .map(|r| r[c].chars().count())
                        .chain([HEADERS[c].len()])
                        .max()
                        .unwrap_or(0)
                })
                .collect();
            let line = |values: Vec<&str>| {
                let padded: Vec<String> = values
                    .iter()
                    .zip(&widths)
                    .map(|(v, w)| format!("{v:<w$}"))
                    .collect();
                format!("{}\n", padded.join("  ").trim_end())
            };
            let mut out = line(HEADERS.to_vec());
            for r in &rows {
                out.push_str(&line(r.iter().map(String::as_str).collect()));
            }
            Ok(out)
        }
    }
}

fn csv_error(e: csv::Error) -> Error {
    Error::Parse(format!("csv: {e}"))
}

/// One parsed csv report row.
#[derive(Debug, Clone, PartialEq)]
pub struct CsvRow {
    pub scenario: String,
    pub repetitions: usize,
    pub inscope: Aggregate,
    pub oos_recall: Option<Aggregate>,
    pub few_shot: Option<Aggregate>,
    pub fidelity: Option<Aggregate>,
}

/// Reads back the output of [`emit_report`] in csv format.
pub fn parse_csv_report(text: &str) -> Result<Vec<CsvRow>> {
    let mut reader = csv::Reader::from_reader(text.as_bytes());
    let mut rows = Vec::new();
    for record in reader.records() {
        let r = record.map_err(csv_error)?;
        let num = |i: usize| -> Result<f64> {
            r.get(i)
                .unwrap_or_default()
                .parse()
                .map_err(|e| Error::Parse(format!("column {}: {e}", CSV_HEADERS[i])))
        };
        let opt = |i: usize| -> Result<Option<Aggregate>> {
            if r.get(i).unwrap_or_default().is_empty() {
                return Ok(None);
            }
            Ok(Some(Aggregate { mean: num(i)?, std: num(i + 1)? }))
        };
        rows.push(CsvRow {
            scenario: r.get(0).unwrap_or_default().to_string(),
            repetitions: r
                .get(1)
                .unwrap_or_default()
                .parse()
                .map_err(|e| Error::Parse(format!("repetitions: {e}")))?,
            inscope: Aggregate { mean: num(2)?, std: num(3)? },
            oos_recall: opt(4)?,
            few_shot: opt(6)?,
            fidelity: opt(8)?,
        });
    }
    Ok(rows)
}
