//! Evaluation, reconstruction and ablation commands.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;

use super::config::{DataConfig, DataFormat, RunConfig};
use super::metrics::{format_psnr, psnr, MetricRecord};
use super::state::TrainState;
use super::train::{load_data, split_data, train_on};
use super::HarnessError;
use crate::data::{load_cifar_bin, load_idx, load_image_file, write_png, Dataset, ImageSample};
use crate::metalearn::{fit_at_test, image_rng, subsample_pixels};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct EvalSummary {
    /// `None` without a classifier.
    pub accuracy: Option<f64>,
    /// Mean per-image PSNR.
    pub psnr_db: f64,
    pub psnr_is_subsampled: bool,
    pub count: usize,
}

/// Mean squared error between `pred` and `target` over the pixel rows `rows`
/// (all rows when `None`).
fn mse(pred: &Tensor<f32>, target: &Tensor<f32>, channels: usize, rows: Option<&[usize]>) -> f64 {
    let p = pred.data();
    let t = target.data();
    let sq = |r: usize| (0..channels).map(|c| (p[r * channels + c] as f64 - t[r * channels + c] as f64).powi(2)).sum::<f64>();
    let (sum, n) = match rows {
        Some(rows) => (rows.iter().map(|&r| sq(r)).sum::<f64>(), rows.len()),
        None => ((0..p.len() / channels).map(sq).sum::<f64>(), p.len() / channels),
    };
    sum / (n * channels) as f64
}

/// Fits every sample with `k_test` inner steps at pixel fraction `s_eval`,
/// then classifies the result. With `s_eval < 1` the PSNR is measured on a
/// fresh random pixel subset of the same fraction, so it only approximates
/// the full-image PSNR.
pub fn evaluate(state: &TrainState, data: &Dataset, k_test: usize, s_eval: f64, seed: u64) -> Result<EvalSummary, HarnessError> {
    let grid = state.grid();
    let channels = state.config.siren.out_dim;
    let theta = &state.learner.theta;
    let per_sample: Vec<(f64, Option<bool>)> = data
        .samples
        .par_iter()
        .enumerate()
        .map(|(i, s)| -> Result<_, HarnessError> {
            if (s.height, s.width, s.channels) != (state.height, state.width, channels) {
                return Err(HarnessError::Config(format!(
                    "sample {} is {}x{}x{}, model expects {}x{}x{channels}",
                    s.id, s.height, s.width, s.channels, state.height, state.width
                )));
            }
            let mut rng = image_rng(seed, i);
            let fit = fit_at_test(theta, &state.learner.alpha, &grid, &s.pixels, k_test, s_eval, &mut rng)?;
            let pred = fit.phi().predict(&grid.coords)?;
            let err = if s_eval < 1.0 {
                let rows = subsample_pixels(state.height, state.width, s_eval, &mut rng);
                mse(&pred, &s.pixels, channels, Some(&rows))
            } else {
                mse(&pred, &s.pixels, channels, None)
            };
            let correct = match &state.classifier {
                Some(c) => Some(c.model.predict(fit.phi(), theta)? == s.label),
                None => None,
            };
            Ok((psnr(err), correct))
        })
        .collect::<Result<_, _>>()?;
    let n = per_sample.len();
    let accuracy = state.classifier.as_ref().map(|_| per_sample.iter().filter(|(_, c)| *c == Some(true)).count() as f64 / n as f64);
    Ok(EvalSummary {
        accuracy,
        psnr_db: per_sample.iter().map(|(p, _)| p).sum::<f64>() / n as f64,
        psnr_is_subsampled: s_eval < 1.0,
        count: n,
    })
}

/// Picks the evaluation images under `dir`. A dedicated test split is used
/// when present; otherwise the held-out part of the training files per the
/// checkpoint's split settings.
fn eval_dataset(dir: &Path, cfg: &RunConfig, height: usize) -> Result<Dataset, HarnessError> {
    let held_out = |format: DataFormat| -> Result<Dataset, HarnessError> {
        let dc = DataConfig { format, path: dir.to_path_buf(), ..cfg.data.clone() };
        let data = load_data(&dc)?;
        Ok(split_data(&data, &dc).1)
    };
    if dir.join("t10k-images-idx3-ubyte").exists() {
        Ok(load_idx(&dir.join("t10k-images-idx3-ubyte"), &dir.join("t10k-labels-idx1-ubyte"))?)
    } else if dir.join("train-images-idx3-ubyte").exists() {
        held_out(DataFormat::Idx)
    } else if dir.join("test_batch.bin").exists() {
        Ok(load_cifar_bin(dir)?.test)
    } else if dir.join("data_batch_1.bin").exists() {
        held_out(DataFormat::Cifar)
    } else {
        let dc = DataConfig { format: DataFormat::Folder, path: dir.to_path_buf(), resize: height, limit: 0, ..cfg.data.clone() };
        let data = load_data(&dc)?;
        let samples = data.samples.into_iter().map(|s| to_channels(s, cfg.siren.out_dim)).collect::<Result<_, _>>()?;
        Ok(Dataset { samples, class_names: data.class_names })
    }
}

/// Loads a checkpoint and evaluates it on the data under `data_dir`.
/// `limit = 0` evaluates every image.
pub fn cmd_eval(ckpt: &Path, data_dir: &Path, k_test: usize, s_eval: f64, limit: usize) -> Result<MetricRecord, HarnessError> {
    let state = TrainState::load(ckpt)?;
    let data = eval_dataset(data_dir, &state.config, state.height)?;
    let data = if limit > 0 { data.take(limit) } else { data };
    if data.is_empty() {
        return Err(HarnessError::Config(format!("no evaluation images under {}", data_dir.display())));
    }
    let start = Instant::now();
    let s = evaluate(&state, &data, k_test, s_eval, state.config.seed)?;
    Ok(MetricRecord {
        config_hash: state.config.hash(),
        epoch: state.epoch,
        step: state.step,
        split: "eval".into(),
        accuracy: s.accuracy,
        psnr_db: s.psnr_db,
        psnr_is_subsampled: s.psnr_is_subsampled,
        wall_seconds: if state.config.deterministic { 0.0 } else { start.elapsed().as_secs_f64() },
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReconRow {
    pub image: String,
    pub step: usize,
    pub psnr_db: f64,
}

/// Converts decoded RGB to the model's channel count.
fn to_channels(s: ImageSample, channels: usize) -> Result<ImageSample, HarnessError> {
    match (s.channels, channels) {
        (a, b) if a == b => Ok(s),
        (3, 1) => {
            let gray = s.pixels.data().chunks_exact(3).map(|p| 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2]).collect();
            Ok(ImageSample::new(s.height, s.width, 1, gray, s.label, s.id))
        }
        (a, b) => Err(HarnessError::Config(format!("cannot convert {a}-channel image {} to {b} channels", s.id))),
    }
}

/// Decoded image after each of `k_test` inner steps (`k_test + 1` PNGs per
/// input, step 0 being θ itself) plus the per-step PSNR.
pub fn reconstruct(state: &TrainState, samples: &[ImageSample], k_test: usize, out_dir: &Path) -> Result<Vec<ReconRow>, HarnessError> {
    std::fs::create_dir_all(out_dir).map_err(|e| HarnessError::io(out_dir, e))?;
    let grid = state.grid();
    let channels = state.config.siren.out_dim;
    let mut rows = Vec::new();
    for (i, s) in samples.iter().enumerate() {
        let stem = Path::new(&s.id).file_stem().map(|f| f.to_string_lossy().into_owned()).unwrap_or_else(|| s.id.clone());
        let mut rng = image_rng(state.config.seed, i);
        let fit = fit_at_test(&state.learner.theta, &state.learner.alpha, &grid, &s.pixels, k_test, 1.0, &mut rng)?;
        for (step, params) in fit.params.iter().enumerate() {
            let pred = params.predict(&grid.coords)?;
            write_png(&out_dir.join(format!("{i:03}_{stem}_step{step:02}.png")), &pred, state.height, state.width)?;
            rows.push(ReconRow { image: s.id.clone(), step, psnr_db: psnr(mse(&pred, &s.pixels, channels, None)) });
        }
    }
    let path = out_dir.join("psnr.csv");
    let mut w = csv::Writer::from_path(&path).map_err(|e| HarnessError::Csv { path: path.clone(), detail: e.to_string() })?;
    let csv_err = |e: csv::Error| HarnessError::Csv { path: path.clone(), detail: e.to_string() };
    w.write_record(["image", "step", "psnr_db"]).map_err(csv_err)?;
    for r in &rows {
        w.write_record([r.image.clone(), r.step.to_string(), format_psnr(r.psnr_db)]).map_err(csv_err)?;
    }
    w.flush().map_err(|e| HarnessError::io(&path, e))?;
    Ok(rows)
}

pub fn cmd_reconstruct(ckpt: &Path, images: &[PathBuf], k_test: usize, out_dir: &Path) -> Result<Vec<ReconRow>, HarnessError> {
    let state = TrainState::load(ckpt)?;
    let channels = state.config.siren.out_dim;
    let samples = images
        .iter()
        .map(|p| {
            let resize = (state.height == state.width).then_some(state.height);
            let s = to_channels(load_image_file(p, resize)?, channels)?;
            if (s.height, s.width) != (state.height, state.width) {
                return Err(HarnessError::Config(format!(
                    "{} is {}x{}, model expects {}x{}",
                    p.display(),
                    s.height,
                    s.width,
                    state.height,
                    state.width
                )));
            }
            Ok(s)
        })
        .collect::<Result<Vec<_>, _>>()?;
    reconstruct(&state, &samples, k_test, out_dir)
}

/// Ablation axes and the config key each one sweeps.
pub const AXES: [(&str, &str); 9] = [
    ("w_task", "meta.w_cls"),
    ("k", "meta.k"),
    ("lambda", "tokens.lambda"),
    ("siren_depth", "siren.hidden_layers"),
    ("siren_width", "siren.width"),
    ("transformer_depth", "transformer.blocks"),
    ("shared_alpha", "meta.shared_alpha"),
    ("meta_sgd_lr", "meta.lr_alpha"),
    ("s", "meta.s"),
];

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub axis: String,
    pub value: String,
    pub accuracy: Option<f64>,
    pub psnr_db: f64,
    pub psnr_is_subsampled: bool,
    /// Measured, never asserted.
    pub wall_seconds: f64,
    /// |θ|
    pub siren_params: usize,
    /// Entries of the learning-rate schedule α.
    pub alpha_params: usize,
    /// ψ including β; 0 without a classifier.
    pub classifier_params: usize,
}

pub fn axis_key(axis: &str) -> Result<&'static str, HarnessError> {
    AXES.iter().find(|(a, _)| *a == axis).map(|(_, k)| *k).ok_or_else(|| HarnessError::UnknownAxis {
        axis: axis.to_string(),
        known: AXES.iter().map(|(a, _)| *a).collect::<Vec<_>>().join(", "),
    })
}

/// Loads data once and runs [`ablate_on`].
pub fn ablate(cfg: &RunConfig, axis: &str, values: &[String]) -> Result<Vec<AblationRow>, HarnessError> {
    axis_key(axis)?;
    let data = load_data(&cfg.data)?;
    let (tr, va) = split_data(&data, &cfg.data);
    ablate_on(cfg, axis, values, &tr, &va)
}

/// One training run per value with everything else (seed included) held
/// fixed. Runs go to `out_dir/<axis>=<value>`; the table is also written to
/// `out_dir/ablation_<axis>.csv`.
pub fn ablate_on(cfg: &RunConfig, axis: &str, values: &[String], train: &Dataset, val: &Dataset) -> Result<Vec<AblationRow>, HarnessError> {
    let key = axis_key(axis)?;
    let mut rows = Vec::new();
    for value in values {
        let mut run = cfg.clone();
        run.set(key, value)?;
        run.out_dir = cfg.out_dir.join(format!("{axis}={value}"));
        log::info!("ablation {axis} = {value}");
        let start = Instant::now();
        let out = train_on(&run, train, val)?;
        let wall = start.elapsed().as_secs_f64();
        let last = out.final_val().ok_or_else(|| HarnessError::Config("ablation needs a validation split".into()))?;
        rows.push(AblationRow {
            axis: axis.to_string(),
            value: value.clone(),
            accuracy: last.accuracy,
            psnr_db: last.psnr_db,
            psnr_is_subsampled: last.psnr_is_subsampled,
            wall_seconds: wall,
            siren_params: run.siren.param_count(),
            alpha_params: out.state.learner.alpha.tensor().len(),
            classifier_params: out.state.classifier.as_ref().map_or(0, |c| c.model.param_count()),
        });
    }
    let path = cfg.out_dir.join(format!("ablation_{axis}.csv"));
    std::fs::create_dir_all(&cfg.out_dir).map_err(|e| HarnessError::io(&cfg.out_dir, e))?;
    let mut w = csv::Writer::from_path(&path).map_err(|e| HarnessError::Csv { path: path.clone(), detail: e.to_string() })?;
    let csv_err = |e: csv::Error| HarnessError::Csv { path: path.clone(), detail: e.to_string() };
    w.write_record([
        "axis",
        "value",
        "accuracy",
        "psnr_db",
        "psnr_is_subsampled",
        "wall_seconds",
        "siren_params",
        "alpha_params",
        "classifier_params",
    ])
    .map_err(csv_err)?;
    for r in &rows {
        w.write_record([
            r.axis.clone(),
            r.value.clone(),
            r.accuracy.map(|a| a.to_string()).unwrap_or_default(),
            format_psnr(r.psnr_db),
            r.psnr_is_subsampled.to_string(),
            r.wall_seconds.to_string(),
            r.siren_params.to_string(),
            r.alpha_params.to_string(),
            r.classifier_params.to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush().map_err(|e| HarnessError::io(&path, e))?;
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mse_over_rows() {
        let p = Tensor::new(vec![3, 1], vec![0.0f32, 0.5, 1.0]).unwrap();
        let t = Tensor::new(vec![3, 1], vec![0.0f32, 0.0, 0.0]).unwrap();
        assert!((mse(&p, &t, 1, None) - 1.25 / 3.0).abs() < 1e-12);
        assert!((mse(&p, &t, 1, Some(&[2])) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn gray_conversion() {
        let s = ImageSample::new(1, 1, 3, vec![1.0, 1.0, 1.0], 0, "x".into());
        let g = to_channels(s, 1).unwrap();
        assert_eq!(g.channels, 1);
        assert!((g.pixels.data()[0] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn unknown_axis() {
        assert!(matches!(axis_key("depth"), Err(HarnessError::UnknownAxis { .. })));
        for (a, k) in AXES {
            assert_eq!(axis_key(a).unwrap(), k);
            RunConfig::default().set(k, "1").unwrap();
        }
    }
}
