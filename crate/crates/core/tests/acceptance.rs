//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails.
//!
//! `MWT_ACCEPT=1,2,8` runs a subset. Criteria 3 to 6 train on the MNIST
//! digits under `data/mnist` and take most of the runtime.

use std::path::{Path, PathBuf};
use std::sync::OnceLock;
use std::time::Instant;

use mwt_core::classifier::{merge_weight_bias, token_count, tokenize, ClassifierSpec, TokenMode, TransformerSpec, WeightClassifier};
use mwt_core::data::{idx_dataset, parse_cifar_records, parse_idx_images, parse_idx_labels, DataError, Dataset, CIFAR_RECORD};
use mwt_core::gradcheck::{check_case, numeric_grad, op_cases, random_tensor, relative_error};
use mwt_core::harness::{self, train_on, Checkpoint, RunConfig, TrainOutcome, TrainState};
use mwt_core::metalearn::{image_gradients, meta_objective, ClassifierState, LrSchedule, MetaConfig, MetaLearner};
use mwt_core::siren::{flatten_layers, layer_vars, recon_grad_explicit, siren_init, CoordGrid, SirenParams, SirenSpec};
use mwt_core::{Tape, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn mnist_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist")
}

fn mnist() -> &'static Dataset {
    static DATA: OnceLock<Dataset> = OnceLock::new();
    DATA.get_or_init(|| {
        let dir = mnist_dir();
        mwt_core::data::load_idx(&dir.join("train-images-idx3-ubyte"), &dir.join("train-labels-idx1-ubyte"))
            .expect("MNIST under data/mnist")
    })
}

fn scratch() -> &'static Path {
    static DIR: OnceLock<tempfile::TempDir> = OnceLock::new();
    DIR.get_or_init(|| tempfile::tempdir().expect("temp dir")).path()
}

// ---------------------------------------------------------------- 1

fn gradient_oracles() -> Outcome {
    let start = Instant::now();
    let mut op_worst: f64 = 0.0;
    let mut op_cases_run = 0;
    let mut worst_name = "";
    for seed in 0..3 {
        for case in op_cases() {
            let err = check_case(&case, 1000 + seed, 1e-5).expect("op case builds");
            if err > op_worst {
                op_worst = err;
                worst_name = case.name;
            }
            op_cases_run += 1;
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut siren_worst: f64 = 0.0;
    let siren_cases = 100;
    for case in 0..siren_cases {
        let spec = SirenSpec {
            in_dim: 2,
            out_dim: 1 + case % 3,
            width: 1 + case % 8,
            hidden_layers: 1 + (case / 8) % 2,
            omega: 1.0 + (case % 5) as f64 * 2.0,
        };
        let n = 1 + (case * 5) % 16;
        let p = siren_init::<f64>(spec, case as u64).unwrap();
        let coords = random_tensor(&[n, 2], -1.0, 1.0, &mut rng);
        let targets = random_tensor(&[n, spec.out_dim], 0.0, 1.0, &mut rng);
        let tape = Tape::new();
        let layers = layer_vars(&spec, tape.leaf(p.to_tensor())).unwrap();
        let rg = recon_grad_explicit(&spec, &layers, tape.constant(coords.clone()), tape.constant(targets.clone())).unwrap();
        let explicit = flatten_layers(&rg.grads).unwrap().value();
        let numeric = numeric_grad(&[p.to_tensor()], 1e-5, |xs| {
            let q = SirenParams::from_flat(spec, xs[0].data().to_vec()).unwrap();
            let pred = q.predict(&coords).unwrap();
            pred.data().iter().zip(targets.data()).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / pred.len() as f64
        });
        siren_worst = siren_worst.max(relative_error(&explicit, &numeric[0]));
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        op_worst < 1e-6 && siren_worst < 1e-5 && op_cases_run >= 100 && secs < 60.0,
        format!(
            "ops: worst rel err {op_worst:.1e} ({worst_name}) over {op_cases_run} cases (< 1e-6); \
             recon_grad_explicit: worst {siren_worst:.1e} over {siren_cases} cases (< 1e-5); {secs:.1}s (< 60s)"
        ),
    )
}

// ---------------------------------------------------------------- 2

fn meta_gradient_oracle() -> Outcome {
    let start = Instant::now();
    let spec = SirenSpec { in_dim: 2, out_dim: 1, width: 4, hidden_layers: 1, omega: 3.0 };
    let transformer = TransformerSpec { blocks: 1, model_dim: 4, head_dim: 4, num_classes: 2, ..TransformerSpec::default() };
    let mut cs = ClassifierSpec::new(spec, transformer);
    cs.tokens = TokenMode::Scale(5.0);
    cs.beta_init = 0.1;
    let grid = CoordGrid::<f64>::new(2, 4);
    let cfg = MetaConfig { k: 3, w_cls: 0.01, s: 1.0, ..MetaConfig::default() };
    let (mut worst_t, mut worst_a): (f64, f64) = (0.0, 0.0);
    for seed in 0..3u64 {
        let theta = siren_init::<f64>(spec, 4 + 10 * seed).unwrap();
        let alpha = LrSchedule::uniform(3, spec.param_count(), false, cfg.alpha_init, 5 + 10 * seed);
        let clf = WeightClassifier::new(cs, 6 + 10 * seed).unwrap();
        let img = random_tensor(&[8, 1], 0.0, 1.0, &mut ChaCha8Rng::seed_from_u64(9 + seed));
        let label = seed as usize % 2;
        let g = image_gradients(&theta, &alpha, Some(&clf), &grid, &img, label, &cfg, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let numeric = numeric_grad(&[theta.to_tensor(), alpha.tensor().clone()], 1e-5, |xs| {
            let t = SirenParams::from_flat(spec, xs[0].data().to_vec()).unwrap();
            let a = LrSchedule::from_tensor(xs[1].clone(), false).unwrap();
            meta_objective(&t, &a, Some(&clf), &grid, &img, label, &cfg, &mut ChaCha8Rng::seed_from_u64(3)).unwrap()
        });
        worst_t = worst_t.max(relative_error(&g.theta, &numeric[0]));
        worst_a = worst_a.max(relative_error(&g.alpha, &numeric[1]));
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        worst_t < 1e-4 && worst_a < 1e-4 && secs < 120.0,
        format!("grad theta rel err {worst_t:.1e}, grad alpha {worst_a:.1e} over 3 problems (< 1e-4); {secs:.1}s (< 120s)"),
    )
}

// ---------------------------------------------------------------- desk runs

/// Desk-scale MNIST settings shared by criteria 3 to 6.
fn desk_config(name: &str) -> RunConfig {
    RunConfig {
        siren: SirenSpec { in_dim: 2, out_dim: 1, width: 64, hidden_layers: 2, omega: 10.0 },
        transformer: TransformerSpec { blocks: 2, model_dim: 64, head_dim: 64, num_classes: 10, ..TransformerSpec::default() },
        meta: MetaConfig { k: 3, lr_theta: 1e-3, lr_alpha: 0.01, lr_psi: 2e-3, ..MetaConfig::default() },
        tokens: TokenMode::LayerNorm,
        log_every: 250,
        eval_every: 0,
        out_dir: scratch().join(name),
        ..RunConfig::default()
    }
}

/// 4,000 training and 1,000 validation images from the first 5,000.
fn split_5k() -> &'static (Dataset, Dataset) {
    static SPLIT: OnceLock<(Dataset, Dataset)> = OnceLock::new();
    SPLIT.get_or_init(|| {
        let c = desk_config("split");
        harness::split_data(&mnist().take(5000), &c.data)
    })
}

/// Finished runs keyed by `(w_cls bits, s bits, seed)`, shared by criteria 4 to 6.
type RunCache = std::sync::Mutex<Vec<((u64, u64, u64), &'static TrainOutcome)>>;

fn classification_run(w_cls: f64, s: f64, seed: u64) -> &'static TrainOutcome {
    static RUNS: OnceLock<RunCache> = OnceLock::new();
    let key = (w_cls.to_bits(), s.to_bits(), seed);
    let runs = RUNS.get_or_init(Default::default);
    if let Some((_, r)) = runs.lock().unwrap().iter().find(|(k, _)| *k == key) {
        return r;
    }
    let mut c = desk_config(&format!("cls_w{w_cls}_s{s}_seed{seed}"));
    c.meta.w_cls = w_cls;
    c.meta.s = s;
    c.eval_s = s;
    c.seed = seed;
    c.epochs = 3;
    let (tr, va) = split_5k();
    let start = Instant::now();
    let out: &'static TrainOutcome = Box::leak(Box::new(train_on(&c, tr, va).expect("desk run")));
    let last = out.final_val().unwrap();
    eprintln!(
        "  run w_cls={w_cls} s={s} seed={seed}: accuracy {:.4}, psnr {:.2} dB ({:.0}s)",
        last.accuracy.unwrap_or(f64::NAN),
        last.psnr_db,
        start.elapsed().as_secs_f64()
    );
    runs.lock().unwrap().push((key, out));
    out
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    v[v.len() / 2]
}

// ---------------------------------------------------------------- 3

fn meta_learning_efficacy() -> Outcome {
    let start = Instant::now();
    let mut c = desk_config("efficacy");
    c.meta.w_cls = 0.0;
    c.attach_classifier = false;
    c.max_steps = 2000;
    c.epochs = usize::MAX;
    c.data.val_fraction = 0.0;
    let train = mnist().take(500);
    // scored on 500 digits the meta-learner never saw
    let held_out = mnist().subset(&(500..1000).collect::<Vec<_>>());
    let empty = Dataset { samples: vec![], class_names: vec![] };
    let out = train_on(&c, &train, &empty).expect("efficacy run");
    let learned = harness::evaluate(&out.state, &held_out, c.meta.k, 1.0, 0).unwrap().psnr_db;

    let mut baseline = TrainState::new(c.clone(), 28, 28).unwrap();
    let mut best = (f64::NEG_INFINITY, 0.0);
    for lr in [0.1, 0.5, 1.0] {
        baseline.learner.alpha = LrSchedule::uniform(c.meta.k, c.siren.param_count(), false, (lr, lr), 0);
        let p = harness::evaluate(&baseline, &held_out, c.meta.k, 1.0, 0).unwrap().psnr_db;
        if p > best.0 {
            best = (p, lr);
        }
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        learned >= best.0 + 3.0,
        format!(
            "learned {learned:.2} dB vs fresh init {:.2} dB at lr {} after {} steps (need +3 dB); {:.0}s",
            best.0, best.1, out.state.step, secs
        ),
    )
}

// ---------------------------------------------------------------- 4

fn mwt_beats_wt() -> Outcome {
    let acc = |w: f64| median((0..3).map(|seed| classification_run(w, 1.0, seed).final_val().unwrap().accuracy.unwrap()).collect());
    let (wt, mwt) = (acc(0.0), acc(0.01));
    outcome(mwt >= wt && mwt >= 0.85, format!("median validation accuracy MWT {mwt:.4} vs WT {wt:.4} (MWT >= WT and >= 0.85)"))
}

// ---------------------------------------------------------------- 5

fn trade_off_direction() -> Outcome {
    let runs: Vec<_> = [0.0, 0.01, 1.0].iter().map(|&w| classification_run(w, 1.0, 0).final_val().unwrap().clone()).collect();
    let psnr: Vec<f64> = runs.iter().map(|r| r.psnr_db).collect();
    let acc: Vec<f64> = runs.iter().map(|r| r.accuracy.unwrap()).collect();
    outcome(
        psnr[0] > psnr[1] && psnr[1] > psnr[2] && acc[1] > acc[0],
        format!(
            "w_task 0 / 0.01 / 1: psnr {:.2} / {:.2} / {:.2} dB, accuracy {:.4} / {:.4} / {:.4}",
            psnr[0], psnr[1], psnr[2], acc[0], acc[1], acc[2]
        ),
    )
}

// ---------------------------------------------------------------- 6

fn subsampling_robustness() -> Outcome {
    let full = classification_run(0.01, 1.0, 0).final_val().unwrap().accuracy.unwrap();
    let sub = classification_run(0.01, 0.25, 0).final_val().unwrap().accuracy.unwrap();
    outcome((full - sub).abs() <= 0.05, format!("accuracy s=1.0 {full:.4} vs s=0.25 {sub:.4} (within 0.05)"))
}

// ---------------------------------------------------------------- 7

fn wt_isolation() -> Outcome {
    let spec = SirenSpec { in_dim: 2, out_dim: 1, width: 32, hidden_layers: 2, omega: 10.0 };
    let cfg = MetaConfig { k: 3, w_cls: 0.0, batch_size: 8, ..MetaConfig::default() };
    let grid = CoordGrid::<f32>::new(28, 28);
    let data = mnist().take(80);
    let transformer = TransformerSpec { blocks: 1, model_dim: 32, head_dim: 16, num_classes: 10, ..TransformerSpec::default() };
    let steps = 10;
    let trajectory = |clf_seed: Option<u64>| {
        let mut learner = MetaLearner::<f32>::new(spec, cfg, 0).unwrap();
        let mut clf =
            clf_seed.map(|s| ClassifierState::new(WeightClassifier::new(ClassifierSpec::new(spec, transformer), s).unwrap(), &cfg));
        let mut snaps = Vec::new();
        for step in 0..steps {
            let batch: Vec<_> = data.samples[step * 8..step * 8 + 8].iter().map(|s| (&s.pixels, s.label)).collect();
            learner.outer_step(clf.as_mut(), &grid, &batch, step as u64).unwrap();
            let bits = |v: &[f32]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
            snaps.push((bits(learner.theta.flat()), bits(learner.alpha.tensor().data())));
        }
        snaps
    };
    let without = trajectory(None);
    let with_a = trajectory(Some(1));
    let with_b = trajectory(Some(2));
    let moved = without[0].0 != without[steps - 1].0;
    outcome(
        moved && without == with_a && without == with_b,
        format!(
            "{steps} outer steps: theta/alpha bit-identical without classifier and with two classifier seeds: {}",
            without == with_a && without == with_b
        ),
    )
}

// ---------------------------------------------------------------- 8

fn token_identities() -> Outcome {
    let w = Tensor::new(vec![2, 3], vec![1.0f64, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
    let b = Tensor::vector(vec![7.0f64, 8.0, 9.0]);
    let m = merge_weight_bias(&w, &b).unwrap();
    let merged_ok = m.shape() == [3, 3] && m.data() == [1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0];
    // [x, 1]·M = x·W + b for an integer x
    let x = Tensor::new(vec![1, 3], vec![2.0, -3.0, 1.0]).unwrap();
    let via_merge = x.matmul(&m).unwrap();
    let direct = Tensor::new(vec![1, 2], vec![2.0, -3.0]).unwrap().matmul(&w).unwrap();
    let affine_ok = via_merge.data().iter().zip(direct.data()).zip(b.data()).all(|((a, d), bb)| *a == d + bb);

    let spec = SirenSpec::default();
    let theta = siren_init::<f64>(spec, 0).unwrap();
    let beta = Tensor::zeros(&[spec.param_count()]);
    let t = tokenize(&theta, &theta, &beta, TokenMode::Scale(500.0)).unwrap();
    let zero_ok = t.tokens.data().iter().all(|&v| v == 0.0);
    let count = token_count(&SirenSpec { out_dim: 3, width: 128, hidden_layers: 4, ..SirenSpec::default() });
    outcome(
        merged_ok && affine_ok && zero_ok && count == 515 && t.len() == 515,
        format!("merge exact: {merged_ok}, affine identity: {affine_ok}, tokens zero at phi = theta: {zero_ok}, count {count} = 512 + 3"),
    )
}

// ---------------------------------------------------------------- 9

fn reproducibility_and_formats() -> Outcome {
    let mut notes = Vec::new();
    let mut ok = true;
    let mut check = |name: &str, pass: bool| {
        ok &= pass;
        if !pass {
            notes.push(name.to_string());
        }
    };

    let data = mnist().take(60);
    let (tr, va) = harness::split_data(&data, &RunConfig::default().data);
    let mut c = desk_config("repro_a");
    c.siren.width = 16;
    c.transformer.model_dim = 16;
    c.transformer.head_dim = 8;
    c.transformer.blocks = 1;
    c.meta.batch_size = 8;
    c.epochs = 2;
    c.eval_every = 1;
    let a = train_on(&c, &tr, &va).unwrap();
    c.out_dir = scratch().join("repro_b");
    let b = train_on(&c, &tr, &va).unwrap();
    check("metrics CSV identical", std::fs::read(&a.metrics_path).unwrap() == std::fs::read(&b.metrics_path).unwrap());

    let bytes = std::fs::read(&a.final_checkpoint).unwrap();
    let reread = Checkpoint::from_bytes(&bytes).unwrap().to_bytes().unwrap();
    let via_state = TrainState::from_checkpoint(&Checkpoint::from_bytes(&bytes).unwrap()).unwrap().to_checkpoint().to_bytes().unwrap();
    check("checkpoint byte round-trip", reread == bytes && via_state == bytes);

    let text = c.render();
    let parsed = RunConfig::parse(&text).unwrap();
    check("config round-trip", parsed == c && parsed.render() == text);

    let p = Path::new("fixture");
    let mut img = vec![0, 0, 8, 3, 0, 0, 0, 2, 0, 0, 0, 2, 0, 0, 0, 2];
    img.extend_from_slice(&[0, 64, 128, 255, 1, 2, 3, 4]);
    let lab = vec![0, 0, 8, 1, 0, 0, 0, 2, 3, 7];
    check("IDX fixture parses", idx_dataset(&img, p, &lab, p).map(|d| d.len() == 2).unwrap_or(false));
    let mut bad_magic = img.clone();
    bad_magic[3] = 0x01;
    check("IDX bad magic", matches!(parse_idx_images(&bad_magic, p), Err(DataError::BadMagic { .. })));
    check("IDX truncated images", matches!(parse_idx_images(&img[..img.len() - 1], p), Err(DataError::Truncated { .. })));
    check("IDX truncated labels", matches!(parse_idx_labels(&lab[..lab.len() - 1], p), Err(DataError::Truncated { .. })));
    check("IDX short header", matches!(parse_idx_labels(&lab[..5], p), Err(DataError::Truncated { .. })));
    let lab3 = vec![0, 0, 8, 1, 0, 0, 0, 3, 3, 7, 1];
    check("IDX count mismatch", matches!(idx_dataset(&img, p, &lab3, p), Err(DataError::CountMismatch { .. })));
    let cifar = vec![3u8; 2 * CIFAR_RECORD];
    check("CIFAR fixture parses", parse_cifar_records(&cifar, p, "t").map(|v| v.len() == 2).unwrap_or(false));
    check("CIFAR bad length", matches!(parse_cifar_records(&cifar[..CIFAR_RECORD + 5], p, "t"), Err(DataError::BadLength { .. })));

    let detail = if notes.is_empty() {
        "metrics CSVs identical, checkpoint and config round-trips byte-exact, corrupted IDX/CIFAR fixtures rejected".to_string()
    } else {
        format!("failed: {}", notes.join(", "))
    };
    outcome(ok, detail)
}

fn main() {
    let only: Option<Vec<usize>> = std::env::var("MWT_ACCEPT").ok().map(|v| v.split(',').filter_map(|s| s.trim().parse().ok()).collect());
    type Criterion = (usize, &'static str, fn() -> Outcome);
    let criteria: [Criterion; 9] = [
        (1, "gradient oracle suite", gradient_oracles),
        (2, "meta-gradient oracle", meta_gradient_oracle),
        (3, "meta-learning efficacy", meta_learning_efficacy),
        (4, "MWT >= WT ordering", mwt_beats_wt),
        (5, "trade-off direction", trade_off_direction),
        (6, "subsampling robustness", subsampling_robustness),
        (7, "WT isolation", wt_isolation),
        (8, "token/merge identities", token_identities),
        (9, "reproducibility and formats", reproducibility_and_formats),
    ];
    let mut failed = 0;
    for (id, name, run) in criteria {
        if only.as_ref().is_some_and(|o| !o.contains(&id)) {
            continue;
        }
        let start = Instant::now();
        let r = run();
        if !r.pass {
            failed += 1;
        }
        println!("{} criterion {id} ({name}): {} [{:.0}s]", if r.pass { "PASS" } else { "FAIL" }, r.detail, start.elapsed().as_secs_f64());
    }
    if failed > 0 {
        println!("{failed} criterion(s) failed");
        std::process::exit(1);
    }
}
