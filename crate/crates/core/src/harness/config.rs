//! Run configuration as flat `key = value` text.

use std::path::PathBuf;

use sha2::{Digest, Sha256};

use super::HarnessError;
use crate::classifier::{ClassifierSpec, TokenMode, TransformerSpec};
use crate::data::AugmentSpec;
use crate::metalearn::MetaConfig;
use crate::siren::SirenSpec;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DataFormat {
    /// Directory holding `train-images-idx3-ubyte` / `train-labels-idx1-ubyte`.
    Idx,
    /// Directory of CIFAR-10 binary batches.
    Cifar,
    /// `root/<class>/<image>` tree.
    Folder,
}

impl DataFormat {
    fn name(self) -> &'static str {
        match self {
            DataFormat::Idx => "idx",
            DataFormat::Cifar => "cifar",
            DataFormat::Folder => "folder",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub format: DataFormat,
    pub path: PathBuf,
    /// Keep only the first `limit` training samples (0 keeps all).
    pub limit: usize,
    /// Square resize for folder datasets (0 keeps the stored size).
    pub resize: usize,
    pub val_fraction: f64,
    pub split_seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub data: DataConfig,
    pub siren: SirenSpec,
    /// `model_dim = 0` follows the SIREN width.
    pub transformer: TransformerSpec,
    pub tokens: TokenMode,
    pub beta_init: f64,
    /// Train a classifier alongside the SIREN meta-learning.
    pub attach_classifier: bool,
    pub meta: MetaConfig,
    pub augment: AugmentSpec,
    pub epochs: usize,
    /// Stop after this many outer steps (0: no cap).
    pub max_steps: usize,
    pub seed: u64,
    /// Write zero wall times so that metrics files are byte-reproducible.
    pub deterministic: bool,
    /// Validation every `eval_every` epochs (0: only at the end).
    pub eval_every: usize,
    /// Pixel fraction for validation fitting and PSNR.
    pub eval_s: f64,
    /// Validate on at most this many samples (0: all).
    pub eval_limit: usize,
    pub log_every: usize,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            data: DataConfig {
                format: DataFormat::Idx,
                path: PathBuf::from("data/mnist"),
                limit: 0,
                resize: 0,
                val_fraction: 0.2,
                split_seed: 0,
            },
            siren: SirenSpec { out_dim: 1, ..SirenSpec::default() },
            transformer: TransformerSpec { model_dim: 0, ..TransformerSpec::default() },
            tokens: TokenMode::Scale(500.0),
            beta_init: 1e-3,
            attach_classifier: true,
            meta: MetaConfig::default(),
            augment: AugmentSpec::default(),
            epochs: 10,
            max_steps: 0,
            seed: 0,
            deterministic: true,
            eval_every: 1,
            eval_s: 1.0,
            eval_limit: 0,
            log_every: 50,
            out_dir: PathBuf::from("runs/default"),
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, HarnessError> {
    value.parse().map_err(|_| HarnessError::Config(format!("{key}: cannot parse {value:?}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool, HarnessError> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(HarnessError::Config(format!("{key}: expected true or false, got {value:?}"))),
    }
}

impl RunConfig {
    /// Every key with its current value, in render order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let d = &self.data;
        let t = &self.transformer;
        let m = &self.meta;
        let a = &self.augment;
        let (mode, lambda) = match self.tokens {
            TokenMode::Scale(l) => ("scale", l),
            TokenMode::LayerNorm => ("layernorm", 500.0),
        };
        vec![
            ("data.format", d.format.name().to_string()),
            ("data.path", d.path.display().to_string()),
            ("data.limit", d.limit.to_string()),
            ("data.resize", d.resize.to_string()),
            ("data.val_fraction", d.val_fraction.to_string()),
            ("data.split_seed", d.split_seed.to_string()),
            ("siren.out_dim", self.siren.out_dim.to_string()),
            ("siren.width", self.siren.width.to_string()),
            ("siren.hidden_layers", self.siren.hidden_layers.to_string()),
            ("siren.omega", self.siren.omega.to_string()),
            ("transformer.blocks", t.blocks.to_string()),
            ("transformer.model_dim", t.model_dim.to_string()),
            ("transformer.head_dim", t.head_dim.to_string()),
            ("transformer.mlp_ratio", t.mlp_ratio.to_string()),
            ("transformer.layerscale", t.layerscale_init.to_string()),
            ("transformer.num_classes", t.num_classes.to_string()),
            ("transformer.ln_eps", t.ln_eps.to_string()),
            ("tokens.mode", mode.to_string()),
            ("tokens.lambda", lambda.to_string()),
            ("tokens.beta_init", self.beta_init.to_string()),
            ("classifier.attach", self.attach_classifier.to_string()),
            ("meta.k", m.k.to_string()),
            ("meta.w_cls", m.w_cls.to_string()),
            ("meta.s", m.s.to_string()),
            ("meta.lr_theta", m.lr_theta.to_string()),
            ("meta.lr_alpha", m.lr_alpha.to_string()),
            ("meta.lr_psi", m.lr_psi.to_string()),
            ("meta.weight_decay", m.weight_decay.to_string()),
            ("meta.alpha_init_low", m.alpha_init.0.to_string()),
            ("meta.alpha_init_high", m.alpha_init.1.to_string()),
            ("meta.batch_size", m.batch_size.to_string()),
            ("meta.shared_alpha", m.shared_alpha.to_string()),
            ("meta.resample_each_step", m.resample_each_step.to_string()),
            ("meta.strict", m.strict.to_string()),
            ("augment.enabled", a.enabled.to_string()),
            ("augment.max_rotation_deg", a.max_rotation_deg.to_string()),
            ("augment.scale_low", a.scale_range.0.to_string()),
            ("augment.scale_high", a.scale_range.1.to_string()),
            ("augment.translate", a.translate_fraction.to_string()),
            ("augment.hflip_prob", a.hflip_prob.to_string()),
            ("run.epochs", self.epochs.to_string()),
            ("run.max_steps", self.max_steps.to_string()),
            ("run.seed", self.seed.to_string()),
            ("run.deterministic", self.deterministic.to_string()),
            ("run.eval_every", self.eval_every.to_string()),
            ("run.eval_s", self.eval_s.to_string()),
            ("run.eval_limit", self.eval_limit.to_string()),
            ("run.log_every", self.log_every.to_string()),
            ("run.out_dir", self.out_dir.display().to_string()),
        ]
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), HarnessError> {
        let v = value.trim();
        match key {
            "data.format" => {
                self.data.format = match v {
                    "idx" => DataFormat::Idx,
                    "cifar" => DataFormat::Cifar,
                    "folder" => DataFormat::Folder,
                    _ => return Err(HarnessError::Config(format!("data.format: unknown format {v:?}"))),
                }
            }
            "data.path" => self.data.path = PathBuf::from(v),
            "data.limit" => self.data.limit = parse(key, v)?,
            "data.resize" => self.data.resize = parse(key, v)?,
            "data.val_fraction" => self.data.val_fraction = parse(key, v)?,
            "data.split_seed" => self.data.split_seed = parse(key, v)?,
            "siren.out_dim" => self.siren.out_dim = parse(key, v)?,
            "siren.width" => self.siren.width = parse(key, v)?,
            "siren.hidden_layers" => self.siren.hidden_layers = parse(key, v)?,
            "siren.omega" => self.siren.omega = parse(key, v)?,
            "transformer.blocks" => self.transformer.blocks = parse(key, v)?,
            "transformer.model_dim" => self.transformer.model_dim = parse(key, v)?,
            "transformer.head_dim" => self.transformer.head_dim = parse(key, v)?,
            "transformer.mlp_ratio" => self.transformer.mlp_ratio = parse(key, v)?,
            "transformer.layerscale" => self.transformer.layerscale_init = parse(key, v)?,
            "transformer.num_classes" => self.transformer.num_classes = parse(key, v)?,
            "transformer.ln_eps" => self.transformer.ln_eps = parse(key, v)?,
            "tokens.mode" => {
                let lambda = match self.tokens {
                    TokenMode::Scale(l) => l,
                    TokenMode::LayerNorm => self.pending_lambda(),
                };
                self.tokens = match v {
                    "scale" => TokenMode::Scale(lambda),
                    "layernorm" => TokenMode::LayerNorm,
                    _ => return Err(HarnessError::Config(format!("tokens.mode: unknown mode {v:?}"))),
                }
            }
            "tokens.lambda" => {
                let l: f64 = parse(key, v)?;
                if let TokenMode::Scale(_) = self.tokens {
                    self.tokens = TokenMode::Scale(l);
                }
            }
            "tokens.beta_init" => self.beta_init = parse(key, v)?,
            "classifier.attach" => self.attach_classifier = parse_bool(key, v)?,
            "meta.k" => self.meta.k = parse(key, v)?,
            "meta.w_cls" => self.meta.w_cls = parse(key, v)?,
            "meta.s" => self.meta.s = parse(key, v)?,
            "meta.lr_theta" => self.meta.lr_theta = parse(key, v)?,
            "meta.lr_alpha" => self.meta.lr_alpha = parse(key, v)?,
            "meta.lr_psi" => self.meta.lr_psi = parse(key, v)?,
            "meta.weight_decay" => self.meta.weight_decay = parse(key, v)?,
            "meta.alpha_init_low" => self.meta.alpha_init.0 = parse(key, v)?,
            "meta.alpha_init_high" => self.meta.alpha_init.1 = parse(key, v)?,
            "meta.batch_size" => self.meta.batch_size = parse(key, v)?,
            "meta.shared_alpha" => self.meta.shared_alpha = parse_bool(key, v)?,
            "meta.resample_each_step" => self.meta.resample_each_step = parse_bool(key, v)?,
            "meta.strict" => self.meta.strict = parse_bool(key, v)?,
            "augment.enabled" => self.augment.enabled = parse_bool(key, v)?,
            "augment.max_rotation_deg" => self.augment.max_rotation_deg = parse(key, v)?,
            "augment.scale_low" => self.augment.scale_range.0 = parse(key, v)?,
            "augment.scale_high" => self.augment.scale_range.1 = parse(key, v)?,
            "augment.translate" => self.augment.translate_fraction = parse(key, v)?,
            "augment.hflip_prob" => self.augment.hflip_prob = parse(key, v)?,
            "run.epochs" => self.epochs = parse(key, v)?,
            "run.max_steps" => self.max_steps = parse(key, v)?,
            "run.seed" => self.seed = parse(key, v)?,
            "run.deterministic" => self.deterministic = parse_bool(key, v)?,
            "run.eval_every" => self.eval_every = parse(key, v)?,
            "run.eval_s" => self.eval_s = parse(key, v)?,
            "run.eval_limit" => self.eval_limit = parse(key, v)?,
            "run.log_every" => self.log_every = parse(key, v)?,
            "run.out_dir" => self.out_dir = PathBuf::from(v),
            _ => return Err(HarnessError::UnknownKey(key.to_string())),
        }
        Ok(())
    }

    // λ is not stored while in layernorm mode; switching back uses the default.
    fn pending_lambda(&self) -> f64 {
        500.0
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.entries() {
            out.push_str(k);
            out.push_str(" = ");
            out.push_str(&v);
            out.push('\n');
        }
        out
    }

    /// Applies `key = value` lines on top of the defaults. Blank lines and
    /// `#` comments are ignored; later lines win.
    pub fn parse(text: &str) -> Result<Self, HarnessError> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<(), HarnessError> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) =
                line.split_once('=').ok_or_else(|| HarnessError::Config(format!("line {}: expected key = value, got {raw:?}", n + 1)))?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    /// `key=value` override as given on the command line.
    pub fn apply_override(&mut self, kv: &str) -> Result<(), HarnessError> {
        let (k, v) = kv.split_once('=').ok_or_else(|| HarnessError::Config(format!("override {kv:?} is not key=value")))?;
        self.set(k.trim(), v)
    }

    /// First 16 hex digits of the SHA-256 of the rendered config, leaving
    /// out `run.out_dir` so that reruns elsewhere share a hash.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for (k, v) in self.entries() {
            if k != "run.out_dir" {
                h.update(format!("{k} = {v}\n").as_bytes());
            }
        }
        let digest = h.finalize();
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    pub fn transformer_spec(&self) -> TransformerSpec {
        let mut t = self.transformer;
        if t.model_dim == 0 {
            t.model_dim = self.siren.width;
        }
        t
    }

    pub fn classifier_spec(&self) -> ClassifierSpec {
        ClassifierSpec { siren: self.siren, transformer: self.transformer_spec(), tokens: self.tokens, beta_init: self.beta_init }
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        self.siren.validate()?;
        self.meta.validate()?;
        if self.attach_classifier {
            self.transformer_spec().validate()?;
        }
        if !(self.eval_s > 0.0 && self.eval_s <= 1.0) {
            return Err(HarnessError::Config(format!("run.eval_s must lie in (0, 1], got {}", self.eval_s)));
        }
        if !(0.0..1.0).contains(&self.data.val_fraction) {
            return Err(HarnessError::Config(format!("data.val_fraction must lie in [0, 1), got {}", self.data.val_fraction)));
        }
        Ok(())
    }
}
