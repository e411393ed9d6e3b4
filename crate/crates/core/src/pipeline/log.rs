//! Per-step training log, written as CSV.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One optimizer step. Components a stage does not use are empty.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub step: usize,
    pub stage: u32,
    pub lr: f64,
    pub mel: f64,
    pub adv: f64,
    pub fm: f64,
    pub disc: f64,
    pub kl: Option<f64>,
    pub distill_frame: Option<f64>,
    pub distill_utt: Option<f64>,
    pub sup: Option<f64>,
    pub total: f64,
    pub grad_norm: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainingLog {
    pub rows: Vec<LogRow>,
}

impl TrainingLog {
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in &self.rows {
            w.serialize(r)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::invalid(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| Error::invalid(e.to_string()))
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut r = csv::Reader::from_reader(text.as_bytes());
        let rows = r.deserialize().collect::<std::result::Result<Vec<LogRow>, _>>()?;
        Ok(Self { rows })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()?).map_err(|e| Error::io(path, e))
    }

    /// Mean of `f` over a window of rows ending at `end` (exclusive).
    pub fn window_mean(&self, end: usize, width: usize, f: impl Fn(&LogRow) -> f64) -> Option<f64> {
        let end = end.min(self.rows.len());
        let start = end.checked_sub(width)?;
        if width == 0 {
            return None;
        }
        Some(self.rows[start..end].iter().map(f).sum::<f64>() / width as f64)
    }

    /// True when every recorded component is finite.
    pub fn all_finite(&self) -> bool {
        self.rows.iter().all(|r| {
            [r.lr, r.mel, r.adv, r.fm, r.disc, r.total, r.grad_norm]
                .into_iter()
                .chain([r.kl, r.distill_frame, r.distill_utt, r.sup].into_iter().flatten())
                .all(f64::is_finite)
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_round_trip_keeps_missing_columns_empty() {
        let row = LogRow {
            step: 0,
            stage: 3,
            lr: 1e-3,
            mel: 1.5,
            adv: 0.9,
            fm: 0.1,
            disc: 0.5,
            kl: Some(0.25),
            distill_frame: None,
            distill_utt: None,
            sup: Some(2.0),
            total: 80.0,
            grad_norm: 3.0,
        };
        let log = TrainingLog { rows: vec![row] };
        let text = log.to_csv().unwrap();
        assert!(text.starts_with("step,stage,lr,mel,adv,fm,disc,kl,distill_frame,distill_utt,sup,total,grad_norm\n"));
        assert!(text.contains(",0.25,,,2.0,"));
        assert_eq!(TrainingLog::from_csv(&text).unwrap(), log);
        assert_eq!(log.window_mean(1, 1, |r| r.mel), Some(1.5));
        assert_eq!(log.window_mean(1, 2, |r| r.mel), None);
    }
}
