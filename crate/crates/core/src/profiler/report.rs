use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepProfile {
    pub seq_len: usize,
    pub batch_size: usize,
    pub tokens: usize,
    /// Median over timed trials.
    pub wall_time_s: f64,
    pub est_memory_values: u64,
    /// Every trial, in the order run.
    pub trial_times_s: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileRow {
    pub seq_len: usize,
    pub batch_size: usize,
    pub tokens: usize,
    pub wall_time_s: f64,
    pub time_ratio_pct: f64,
    pub est_memory_values: u64,
    pub memory_ratio_pct: f64,
    pub tokens_at_capacity: Option<usize>,
    pub tokens_ratio_pct: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileReport {
    pub rows: Vec<ProfileRow>,
}

/// Ratio columns normalized to the row with the longest `seq_len`.
///
/// `capacity` optionally pairs each profile with its tokens-at-capacity value.
pub fn report(profiles: &[StepProfile], capacity: Option<&[usize]>) -> Result<ProfileReport> {
    let anchor = profiles
        .iter()
        .enumerate()
        .max_by_key(|(_, p)| p.seq_len)
        .map(|(i, _)| i)
        .ok_or_else(|| Error::Contract("profile report needs at least one row".into()))?;
    if let Some(c) = capacity {
        if c.len() != profiles.len() {
            return Err(Error::Dimension {
                op: "profile report",
                lhs: vec![profiles.len()],
                rhs: vec![c.len()],
            });
        }
    }
    let a = &profiles[anchor];
    let rows = profiles
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let tokens_at_capacity = capacity.map(|c| c[i]);
            ProfileRow {
                seq_len: p.seq_len,
                batch_size: p.batch_size,
                tokens: p.tokens,
                wall_time_s: p.wall_time_s,
                time_ratio_pct: p.wall_time_s / a.wall_time_s * 100.0,
                est_memory_values: p.est_memory_values,
                memory_ratio_pct: p.est_memory_values as f64 / a.est_memory_values as f64 * 100.0,
                tokens_at_capacity,
                tokens_ratio_pct: capacity.map(|c| c[i] as f64 / c[anchor] as f64 * 100.0),
            }
        })
        .collect();
    Ok(ProfileReport { rows })
}

impl ProfileReport {
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        for r in &self.rows {
            out.serialize(r).map_err(|e| Error::Serde(e.to_string()))?;
        }
        out.flush().map_err(|e| Error::Serde(e.to_string()))
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv(f)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(seq_len: usize, t: f64, mem: u64) -> StepProfile {
        StepProfile {
            seq_len,
            batch_size: 1024 / seq_len,
            tokens: 1024,
            wall_time_s: t,
            est_memory_values: mem,
            trial_times_s: vec![t],
        }
    }

    #[test]
    fn linear_time_sweep_percentages() {
        // t = 0.1 + 0.001 * L  ->  0.132, 0.164, 0.228, 0.356 (anchor)
        let ps: Vec<_> = [32, 64, 128, 256].iter().map(|&l| row(l, 0.1 + 0.001 * l as f64, l as u64)).collect();
        let r = report(&ps, None).unwrap();
        let want = [13200.0 / 356.0, 16400.0 / 356.0, 22800.0 / 356.0, 100.0];
        for (row, w) in r.rows.iter().zip(want) {
            assert!((row.time_ratio_pct - w).abs() < 1e-9);
        }
        assert_eq!(r.rows[1].memory_ratio_pct, 25.0);
    }

    #[test]
    fn single_row_is_anchor() {
        let r = report(&[row(64, 0.5, 10)], Some(&[640])).unwrap();
        assert_eq!(r.rows[0].time_ratio_pct, 100.0);
        assert_eq!(r.rows[0].tokens_ratio_pct, Some(100.0));
    }

    #[test]
    fn empty_rejected() {
        assert!(report(&[], None).is_err());
    }

    #[test]
    fn csv_has_header_and_rows() {
        let r = report(&[row(32, 0.1, 5), row(64, 0.2, 10)], Some(&[96, 64])).unwrap();
        let mut buf = Vec::new();
        r.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(
            lines.next().unwrap(),
            "seq_len,batch_size,tokens,wall_time_s,time_ratio_pct,est_memory_values,memory_ratio_pct,tokens_at_capacity,tokens_ratio_pct"
        );
        assert_eq!(lines.count(), 2);
    }
}
