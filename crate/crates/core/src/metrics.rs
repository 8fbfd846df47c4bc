//! Per-round metrics records and their CSV form.
//!
//! The CSV rendering is locale-independent (decimal points, no separators)
//! and uses shortest round-trip float formatting, so a rerun with the same
//! resolved configuration reproduces the file byte for byte.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One completed round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    /// Round index t (1-based).
    pub t: u32,
    pub test_loss: f64,
    /// Absent for non-classification objectives.
    pub test_accuracy: Option<f64>,
    /// Size of the high-frequency subset.
    pub subset_size: usize,
    /// KL divergence of the subset's joint label distribution to the global
    /// one (nats); infinite when no subset was adopted.
    pub subset_kl: f64,
    /// Server transfer cost of the round, in parameter-transfer units.
    pub round_cost: u64,
    pub normalized_cost: f64,
    pub cumulative_normalized_cost: f64,
    /// Always zero in emitted artifacts; timing is reported on the console
    /// so that metrics files stay reproducible.
    pub wall_ms: u64,
}

pub const CSV_HEADER: &str = "t,test_loss,test_accuracy,subset_size,subset_kl,round_cost,\
normalized_cost,cumulative_normalized_cost,wall_ms";

fn fmt_f64(v: f64) -> String {
    if v.is_infinite() {
        if v > 0.0 { "inf".to_string() } else { "-inf".to_string() }
    } else {
        format!("{v}")
    }
}

fn parse_f64(s: &str) -> Result<f64> {
    match s {
        "inf" => Ok(f64::INFINITY),
        "-inf" => Ok(f64::NEG_INFINITY),
        other => other
            .parse()
            .map_err(|_| Error::parse(format!("bad float {other:?}"))),
    }
}

/// Render records as the documented CSV schema.
pub fn render_csv(records: &[MetricsRecord]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in records {
        let acc = r.test_accuracy.map(fmt_f64).unwrap_or_default();
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            r.t,
            fmt_f64(r.test_loss),
            acc,
            r.subset_size,
            fmt_f64(r.subset_kl),
            r.round_cost,
            fmt_f64(r.normalized_cost),
            fmt_f64(r.cumulative_normalized_cost),
            r.wall_ms,
        ));
    }
    out
}

/// Parse a metrics CSV produced by [`render_csv`].
pub fn parse_csv(text: &str) -> Result<Vec<MetricsRecord>> {
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| Error::parse("empty metrics CSV"))?;
    if header != CSV_HEADER {
        return Err(Error::parse(format!("unexpected header {header:?}")));
    }
    let mut records = Vec::new();
    for (lineno, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 9 {
            return Err(Error::parse(format!(
                "line {}: expected 9 fields, found {}",
                lineno + 2,
                fields.len()
            )));
        }
        let int = |s: &str| -> Result<u64> {
            s.parse().map_err(|_| Error::parse(format!("bad integer {s:?}")))
        };
        records.push(MetricsRecord {
            t: int(fields[0])? as u32,
            test_loss: parse_f64(fields[1])?,
            test_accuracy: if fields[2].is_empty() { None } else { Some(parse_f64(fields[2])?) },
            subset_size: int(fields[3])? as usize,
            subset_kl: parse_f64(fields[4])?,
            round_cost: int(fields[5])?,
            normalized_cost: parse_f64(fields[6])?,
            cumulative_normalized_cost: parse_f64(fields[7])?,
            wall_ms: int(fields[8])?,
        });
    }
    Ok(records)
}
