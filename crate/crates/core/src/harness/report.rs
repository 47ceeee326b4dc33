//! Experiment report assembly and emission (CSV, JSON, text table).

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const CSV_HEADER: &str =
    "defense,attack,A_b,A_a,R1,mean_snr,mean_l2,mean_queries,mean_loss_ce,mean_loss_margin";

/// Harmonic mean of benign and adversarial accuracy; 0 when both are 0.
pub fn compute_r1(a_b: f64, a_a: f64) -> Result<f64> {
    for v in [a_b, a_a] {
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::Param(format!("accuracy {v} outside [0,1]")));
        }
    }
    if a_b + a_a == 0.0 {
        return Ok(0.0);
    }
    Ok(2.0 * a_b * a_a / (a_b + a_a))
}

/// Infinite SNR (zero perturbation) serializes as the string "inf"; plain
/// JSON numbers cannot carry it.
mod snr_serde {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &Option<f64>, s: S) -> Result<S::Ok, S::Error> {
        match v {
            None => s.serialize_none(),
            Some(x) if x.is_infinite() => {
                s.serialize_some(if *x > 0.0 { "inf" } else { "-inf" })
            }
            Some(x) => s.serialize_some(x),
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<f64>, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Str(String),
        }
        match Option::<Raw>::deserialize(d)? {
            None => Ok(None),
            Some(Raw::Num(x)) => Ok(Some(x)),
            Some(Raw::Str(s)) => match s.as_str() {
                "inf" => Ok(Some(f64::INFINITY)),
                "-inf" => Ok(Some(f64::NEG_INFINITY)),
                other => Err(serde::de::Error::custom(format!("bad snr value `{other}`"))),
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub defense: String,
    pub attack: String,
    pub a_b: f64,
    pub a_a: Option<f64>,
    pub r1: Option<f64>,
    #[serde(with = "snr_serde", default)]
    pub mean_snr: Option<f64>,
    pub mean_l2: Option<f64>,
    pub mean_queries: Option<f64>,
    pub mean_loss_ce: Option<f64>,
    pub mean_loss_margin: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportMetadata {
    pub global_seed: u64,
    pub n_test_voices: usize,
    pub adaptive: bool,
    pub timestamp_unix: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub rows: Vec<ReportRow>,
    pub metadata: ReportMetadata,
}

/// Serialize one float cell: empty for absent, "inf" for infinite SNR,
/// fixed six decimals otherwise (keeps byte-identical reruns trivial).
fn cell(v: Option<f64>) -> String {
    match v {
        None => String::new(),
        Some(x) if x.is_nan() => String::new(),
        Some(x) if x.is_infinite() => if x > 0.0 { "inf" } else { "-inf" }.to_string(),
        Some(x) => format!("{x:.6}"),
    }
}

impl ExperimentReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(CSV_HEADER);
        out.push('\n');
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{}\n",
                r.defense,
                r.attack,
                cell(Some(r.a_b)),
                cell(r.a_a),
                cell(r.r1),
                cell(r.mean_snr),
                cell(r.mean_l2),
                cell(r.mean_queries),
                cell(r.mean_loss_ce),
                cell(r.mean_loss_margin),
            ));
        }
        out
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self)
            .map_err(|e| Error::Format(format!("report serialization: {e}")))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Format(format!("report parse: {e}")))
    }

    pub fn to_text_table(&self) -> String {
        let header: Vec<String> = CSV_HEADER.split(',').map(str::to_string).collect();
        let mut grid: Vec<Vec<String>> = vec![header];
        for r in &self.rows {
            grid.push(vec![
                r.defense.clone(),
                r.attack.clone(),
                cell(Some(r.a_b)),
                cell(r.a_a),
                cell(r.r1),
                cell(r.mean_snr),
                cell(r.mean_l2),
                cell(r.mean_queries),
                cell(r.mean_loss_ce),
                cell(r.mean_loss_margin),
            ]);
        }
        let cols = grid[0].len();
        let widths: Vec<usize> = (0..cols)
            .map(|c| grid.iter().map(|row| row[c].len()).max().unwrap_or(0))
            .collect();
        let mut out = String::new();
        for (i, row) in grid.iter().enumerate() {
            for (c, val) in row.iter().enumerate() {
                out.push_str(&format!("{val:>width$}", width = widths[c]));
                if c + 1 < cols {
                    out.push_str("  ");
                }
            }
            out.push('\n');
            if i == 0 {
                let total: usize = widths.iter().sum::<usize>() + 2 * (cols - 1);
                out.push_str(&"-".repeat(total));
                out.push('\n');
            }
        }
        out
    }

    pub fn emit(&self, format: ReportFormat, path: impl AsRef<Path>) -> Result<()> {
        let text = match format {
            ReportFormat::Csv => self.to_csv(),
            ReportFormat::Json => self.to_json()?,
            ReportFormat::Text => self.to_text_table(),
        };
        std::fs::write(path.as_ref(), text)?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    Json,
    Text,
}

impl std::str::FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(Self::Csv),
            "json" => Ok(Self::Json),
            "text" | "table" => Ok(Self::Text),
            other => Err(Error::Config(format!("unknown report format `{other}`"))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_report() -> ExperimentReport {
        ExperimentReport {
            rows: vec![
                ReportRow {
                    defense: "none".into(),
                    attack: "none".into(),
                    a_b: 0.975,
                    a_a: None,
                    r1: None,
                    mean_snr: None,
                    mean_l2: None,
                    mean_queries: None,
                    mean_loss_ce: None,
                    mean_loss_margin: None,
                },
                ReportRow {
                    defense: "MS(k=7)".into(),
                    attack: "PGD-10".into(),
                    a_b: 0.95,
                    a_a: Some(0.10),
                    r1: Some(compute_r1(0.95, 0.10).unwrap()),
                    mean_snr: Some(f64::INFINITY),
                    mean_l2: Some(0.123456789),
                    mean_queries: Some(10.0),
                    mean_loss_ce: Some(2.5),
                    mean_loss_margin: Some(-1.25),
                },
            ],
            metadata: ReportMetadata {
                global_seed: 42,
                n_test_voices: 40,
                adaptive: false,
                timestamp_unix: 0,
            },
        }
    }

    #[test]
    fn r1_examples() {
        assert!((compute_r1(0.9, 0.9).unwrap() - 0.9).abs() < 1e-12);
        assert_eq!(compute_r1(1.0, 0.0).unwrap(), 0.0);
        assert_eq!(compute_r1(0.0, 0.0).unwrap(), 0.0);
        let r1 = compute_r1(0.998, 0.0433).unwrap();
        assert!((r1 - 0.0830).abs() < 5e-5, "r1 {r1}");
        assert!(compute_r1(1.2, 0.0).is_err());
    }

    #[test]
    fn csv_header_is_exact_and_inf_serializes() {
        let report = sample_report();
        let csv = report.to_csv();
        let mut lines = csv.lines();
        assert_eq!(lines.next().unwrap(), CSV_HEADER);
        let none_row = lines.next().unwrap();
        assert_eq!(none_row, "none,none,0.975000,,,,,,,");
        let ms_row = lines.next().unwrap();
        assert!(ms_row.contains(",inf,"), "{ms_row}");
    }

    #[test]
    fn json_round_trip() {
        let report = sample_report();
        let json = report.to_json().unwrap();
        let back = ExperimentReport::from_json(&json).unwrap();
        assert_eq!(report, back);
    }

    #[test]
    fn text_table_is_aligned() {
        let text = sample_report().to_text_table();
        let lines: Vec<&str> = text.lines().collect();
        assert!(lines.len() >= 4);
        assert!(lines[0].contains("defense"));
        assert!(lines[1].starts_with('-'));
    }

    #[test]
    fn r1_recomputes_from_row_values() {
        let report = sample_report();
        let row = &report.rows[1];
        let expect = compute_r1(row.a_b, row.a_a.unwrap()).unwrap();
        assert!((row.r1.unwrap() - expect).abs() < 1e-9);
    }
}
