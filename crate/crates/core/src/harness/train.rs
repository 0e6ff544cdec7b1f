//! Outer training loop.

use std::path::PathBuf;
use std::time::Instant;

use rand_chacha::ChaCha8Rng;

use super::commands::evaluate;
use super::config::{DataFormat, RunConfig};
use super::metrics::{psnr, write_metrics, MetricRecord};
use super::state::TrainState;
use super::HarnessError;
use crate::data::{augment, epoch_order, load_cifar_bin, load_idx, load_image_dir, train_val_split, Dataset, ImageDirOptions};
use crate::metalearn::image_rng;
use crate::tensor::Tensor;

/// Loads the training data named by `cfg.data`, truncated to `limit`.
pub fn load_data(cfg: &super::config::DataConfig) -> Result<Dataset, HarnessError> {
    let data = match cfg.format {
        DataFormat::Idx => load_idx(&cfg.path.join("train-images-idx3-ubyte"), &cfg.path.join("train-labels-idx1-ubyte"))?,
        DataFormat::Cifar => load_cifar_bin(&cfg.path)?.train,
        DataFormat::Folder => {
            let resize = (cfg.resize > 0).then_some(cfg.resize);
            let load = load_image_dir(&cfg.path, ImageDirOptions { resize, strict: false })?;
            for w in &load.warnings {
                log::warn!("{w}");
            }
            load.dataset
        }
    };
    Ok(if cfg.limit > 0 { data.take(cfg.limit) } else { data })
}

/// Train and validation subsets per `val_fraction` and `split_seed`.
pub fn split_data(data: &Dataset, cfg: &super::config::DataConfig) -> (Dataset, Dataset) {
    let (tr, va) = train_val_split(data.len(), cfg.val_fraction, cfg.split_seed);
    (data.subset(&tr), data.subset(&va))
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed for outer step `step` of a run seeded with `seed`.
pub fn step_seed(seed: u64, step: usize) -> u64 {
    splitmix(seed ^ splitmix(step as u64))
}

const AUGMENT_SALT: u64 = 0xA6;
const EVAL_SALT: u64 = 0xE7;

pub struct TrainOutcome {
    pub state: TrainState,
    pub records: Vec<MetricRecord>,
    pub metrics_path: PathBuf,
    pub final_checkpoint: PathBuf,
    pub best_checkpoint: PathBuf,
}

impl TrainOutcome {
    /// The last validation record.
    pub fn final_val(&self) -> Option<&MetricRecord> {
        self.records.iter().rev().find(|r| r.split == "val")
    }

    /// The validation record at epoch 0, before any update.
    pub fn initial_val(&self) -> Option<&MetricRecord> {
        self.records.iter().find(|r| r.split == "val")
    }
}

/// Loads data per the config and trains.
pub fn train(cfg: &RunConfig) -> Result<TrainOutcome, HarnessError> {
    let data = load_data(&cfg.data)?;
    let (tr, va) = split_data(&data, &cfg.data);
    train_on(cfg, &tr, &va)
}

/// Trains on already-loaded splits, writing `metrics.csv`, `config.txt`,
/// `best.mwtc` and `final.mwtc` under `cfg.out_dir`.
pub fn train_on(cfg: &RunConfig, train: &Dataset, val: &Dataset) -> Result<TrainOutcome, HarnessError> {
    cfg.validate()?;
    let (h, w, c) = train.dims().ok_or_else(|| HarnessError::Config("training set is empty".into()))?;
    if c != cfg.siren.out_dim {
        return Err(HarnessError::Config(format!("images have {c} channels but siren.out_dim = {}", cfg.siren.out_dim)));
    }
    if cfg.attach_classifier && train.num_classes() > cfg.transformer.num_classes {
        return Err(HarnessError::Config(format!(
            "dataset has {} classes but transformer.num_classes = {}",
            train.num_classes(),
            cfg.transformer.num_classes
        )));
    }
    std::fs::create_dir_all(&cfg.out_dir).map_err(|e| HarnessError::io(&cfg.out_dir, e))?;
    let config_path = cfg.out_dir.join("config.txt");
    std::fs::write(&config_path, cfg.render()).map_err(|e| HarnessError::io(&config_path, e))?;
    let metrics_path = cfg.out_dir.join("metrics.csv");
    let final_checkpoint = cfg.out_dir.join("final.mwtc");
    let best_checkpoint = cfg.out_dir.join("best.mwtc");

    let hash = cfg.hash();
    let start = Instant::now();
    let wall = || if cfg.deterministic { 0.0 } else { start.elapsed().as_secs_f64() };
    let val = if cfg.eval_limit > 0 { val.take(cfg.eval_limit) } else { val.clone() };
    let mut state = TrainState::new(cfg.clone(), h, w)?;
    let grid = state.grid();
    let mut records = Vec::new();
    let mut best: Option<f64> = None;

    let mut run_eval = |state: &TrainState, records: &mut Vec<MetricRecord>| -> Result<(), HarnessError> {
        if val.is_empty() {
            return Ok(());
        }
        let summary = evaluate(state, &val, cfg.meta.k, cfg.eval_s, step_seed(cfg.seed, usize::MAX) ^ EVAL_SALT)?;
        log::info!(
            "epoch {} step {}: val psnr {:.2} dB, accuracy {}",
            state.epoch,
            state.step,
            summary.psnr_db,
            summary.accuracy.map(|a| format!("{:.2}%", 100.0 * a)).unwrap_or_else(|| "-".into())
        );
        let score = summary.accuracy.unwrap_or(summary.psnr_db);
        if best.is_none_or(|b| score > b) {
            best = Some(score);
            state.save(&best_checkpoint)?;
        }
        records.push(MetricRecord {
            config_hash: hash.clone(),
            epoch: state.epoch,
            step: state.step,
            split: "val".into(),
            accuracy: summary.accuracy,
            psnr_db: summary.psnr_db,
            psnr_is_subsampled: summary.psnr_is_subsampled,
            wall_seconds: wall(),
        });
        Ok(())
    };

    run_eval(&state, &mut records)?;
    let mut evaluated_at = 0;
    let bsz = cfg.meta.batch_size;
    'epochs: for epoch in 0..cfg.epochs {
        let order = epoch_order(train.len(), cfg.seed, epoch as u64);
        let (mut rec_sum, mut acc_sum, mut n_steps, mut n_acc) = (0.0, 0.0, 0usize, 0usize);
        for chunk in order.chunks(bsz) {
            if cfg.max_steps > 0 && state.step >= cfg.max_steps {
                break 'epochs;
            }
            let seed = step_seed(cfg.seed, state.step);
            let samples: Vec<_> = chunk
                .iter()
                .enumerate()
                .map(|(i, &j)| {
                    let s = &train.samples[j];
                    if cfg.augment.enabled {
                        let mut rng: ChaCha8Rng = image_rng(seed ^ AUGMENT_SALT, i);
                        augment(s, &cfg.augment, &mut rng)
                    } else {
                        s.clone()
                    }
                })
                .collect();
            let batch: Vec<(&Tensor<f32>, usize)> = samples.iter().map(|s| (&s.pixels, s.label)).collect();
            let result = state.learner.outer_step(state.classifier.as_mut(), &grid, &batch, seed);
            let m = match result {
                Ok(m) => m,
                Err(e) => {
                    // The failed step applied no update, so this is the last good state.
                    let path = cfg.out_dir.join("last_good.mwtc");
                    state.save(&path)?;
                    log::error!("aborting at step {}: {e}; state saved to {}", state.step, path.display());
                    return Err(e.into());
                }
            };
            state.step += 1;
            rec_sum += m.rec_loss;
            n_steps += 1;
            if let Some(a) = m.accuracy {
                acc_sum += a;
                n_acc += 1;
            }
            if cfg.log_every > 0 && state.step % cfg.log_every == 0 {
                log::info!(
                    "step {}: rec {:.5} cls {} alpha mean {:.4} (neg {:.3})",
                    state.step,
                    m.rec_loss,
                    m.cls_loss.map(|c| format!("{c:.4}")).unwrap_or_else(|| "-".into()),
                    m.alpha_mean,
                    m.alpha_negative_fraction
                );
            }
        }
        state.epoch = epoch + 1;
        if n_steps > 0 {
            records.push(MetricRecord {
                config_hash: hash.clone(),
                epoch: state.epoch,
                step: state.step,
                split: "train".into(),
                accuracy: (n_acc > 0).then(|| acc_sum / n_acc as f64),
                psnr_db: psnr(rec_sum / n_steps as f64),
                psnr_is_subsampled: cfg.meta.s < 1.0,
                wall_seconds: wall(),
            });
        }
        if cfg.eval_every > 0 && state.epoch % cfg.eval_every == 0 {
            run_eval(&state, &mut records)?;
            evaluated_at = state.step;
        }
    }
    if evaluated_at != state.step {
        run_eval(&state, &mut records)?;
    }
    state.save(&final_checkpoint)?;
    if !best_checkpoint.exists() {
        state.save(&best_checkpoint)?;
    }
    write_metrics(&metrics_path, &records)?;
    Ok(TrainOutcome { state, records, metrics_path, final_checkpoint, best_checkpoint })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn step_seeds_differ() {
        let a: Vec<u64> = (0..100).map(|s| step_seed(0, s)).collect();
        let mut b = a.clone();
        b.sort_unstable();
        b.dedup();
        assert_eq!(b.len(), 100);
        assert_ne!(step_seed(0, 1), step_seed(1, 1));
    }
}
