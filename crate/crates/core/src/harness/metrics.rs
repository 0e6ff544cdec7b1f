//! PSNR and the metrics CSV.
//!
//! Columns, in order:
//! `config_hash,epoch,step,split,accuracy,psnr_db,psnr_is_subsampled,wall_seconds`.
//! `accuracy` is a fraction and empty when no classifier is attached;
//! `psnr_db` is `inf` for an exact reconstruction.

use std::path::Path;

use super::HarnessError;

pub const CSV_HEADER: [&str; 8] = ["config_hash", "epoch", "step", "split", "accuracy", "psnr_db", "psnr_is_subsampled", "wall_seconds"];

/// PSNR in dB for signals in `[0, 1]`; `+inf` when `mse == 0`.
pub fn psnr(mse: f64) -> f64 {
    if mse <= 0.0 {
        f64::INFINITY
    } else {
        -10.0 * mse.log10()
    }
}

pub fn format_psnr(db: f64) -> String {
    if db == f64::INFINITY {
        "inf".to_string()
    } else {
        db.to_string()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricRecord {
    pub config_hash: String,
    pub epoch: usize,
    pub step: usize,
    /// `train` or `val`.
    pub split: String,
    pub accuracy: Option<f64>,
    pub psnr_db: f64,
    pub psnr_is_subsampled: bool,
    pub wall_seconds: f64,
}

impl MetricRecord {
    fn fields(&self) -> [String; 8] {
        [
            self.config_hash.clone(),
            self.epoch.to_string(),
            self.step.to_string(),
            self.split.clone(),
            self.accuracy.map(|a| a.to_string()).unwrap_or_default(),
            format_psnr(self.psnr_db),
            self.psnr_is_subsampled.to_string(),
            self.wall_seconds.to_string(),
        ]
    }
}

fn csv_err(path: &Path, e: csv::Error) -> HarnessError {
    HarnessError::Csv { path: path.to_path_buf(), detail: e.to_string() }
}

pub fn write_metrics(path: &Path, records: &[MetricRecord]) -> Result<(), HarnessError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(CSV_HEADER).map_err(|e| csv_err(path, e))?;
    for r in records {
        w.write_record(r.fields()).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| HarnessError::io(path, e))
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricRecord>, HarnessError> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    let header = r.headers().map_err(|e| csv_err(path, e))?.clone();
    if header.iter().ne(CSV_HEADER) {
        return Err(HarnessError::Config(format!("{}: unexpected metrics header", path.display())));
    }
    let bad = |what: &str| HarnessError::Config(format!("{}: bad {what}", path.display()));
    let mut out = Vec::new();
    for row in r.records() {
        let row = row.map_err(|e| csv_err(path, e))?;
        let psnr_db = match &row[5] {
            "inf" => f64::INFINITY,
            s => s.parse().map_err(|_| bad("psnr_db"))?,
        };
        out.push(MetricRecord {
            config_hash: row[0].to_string(),
            epoch: row[1].parse().map_err(|_| bad("epoch"))?,
            step: row[2].parse().map_err(|_| bad("step"))?,
            split: row[3].to_string(),
            accuracy: if row[4].is_empty() { None } else { Some(row[4].parse().map_err(|_| bad("accuracy"))?) },
            psnr_db,
            psnr_is_subsampled: row[6].parse().map_err(|_| bad("psnr_is_subsampled"))?,
            wall_seconds: row[7].parse().map_err(|_| bad("wall_seconds"))?,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn psnr_values() {
        assert!((psnr(0.01) - 20.0).abs() < 1e-12);
        assert!((psnr(1.0)).abs() < 1e-12);
        assert_eq!(psnr(0.0), f64::INFINITY);
        assert_eq!(format_psnr(psnr(0.0)), "inf");
    }

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        let recs = vec![
            MetricRecord {
                config_hash: "abcd".into(),
                epoch: 0,
                step: 0,
                split: "val".into(),
                accuracy: Some(0.125),
                psnr_db: f64::INFINITY,
                psnr_is_subsampled: false,
                wall_seconds: 0.0,
            },
            MetricRecord {
                config_hash: "abcd".into(),
                epoch: 1,
                step: 30,
                split: "train".into(),
                accuracy: None,
                psnr_db: 21.5,
                psnr_is_subsampled: true,
                wall_seconds: 3.5,
            },
        ];
        write_metrics(&path, &recs).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("config_hash,epoch,step,split,accuracy,psnr_db,psnr_is_subsampled,wall_seconds\n"));
        assert!(text.contains(",inf,"));
        assert_eq!(read_metrics(&path).unwrap(), recs);
    }
}
