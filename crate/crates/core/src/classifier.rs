//! Weight-space classifier: SIREN parameters become tokens (one per output
//! neuron of every layer after the first), which a pre-norm Transformer
//! encoder reads.
//!
//! Attention is unmasked and the readout is a mean over tokens, so the
//! encoder by itself ignores token order. Position enters only through the
//! learned per-weight bias β added before tokenization.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::siren::{SirenError, SirenParams, SirenSpec};
use crate::tensor::{Real, Tape, Tensor, TensorError, Var};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ClassifierError {
    #[error("invalid classifier spec: {0}")]
    InvalidSpec(String),
    #[error("SIREN spec mismatch: {0}")]
    SpecMismatch(String),
    #[error("non-finite logits")]
    NonFinite,
    #[error("expected {expected} classifier tensors, got {got}")]
    ParamCount { expected: usize, got: usize },
    #[error(transparent)]
    Siren(#[from] SirenError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum TokenMode {
    /// `λ·(φ − θ + β)`
    Scale(f64),
    /// `φ − θ + β`, then each token normalized to zero mean, unit variance.
    LayerNorm,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TransformerSpec {
    pub blocks: usize,
    pub model_dim: usize,
    pub head_dim: usize,
    /// MLP hidden width as a multiple of `model_dim`.
    pub mlp_ratio: usize,
    pub layerscale_init: f64,
    pub num_classes: usize,
    pub ln_eps: f64,
}

impl Default for TransformerSpec {
    fn default() -> Self {
        Self { blocks: 10, model_dim: 128, head_dim: 64, mlp_ratio: 1, layerscale_init: 0.1, num_classes: 10, ln_eps: 1e-5 }
    }
}

impl TransformerSpec {
    pub fn validate(&self) -> Result<(), ClassifierError> {
        if self.blocks == 0 || self.num_classes == 0 || self.mlp_ratio == 0 || self.head_dim == 0 {
            return Err(ClassifierError::InvalidSpec(format!("zero-sized dimension in {self:?}")));
        }
        if self.model_dim < self.head_dim {
            return Err(ClassifierError::InvalidSpec(format!("model_dim {} is smaller than head_dim {}", self.model_dim, self.head_dim)));
        }
        Ok(())
    }

    /// `(start, len)` per head; a remainder of `model_dim / head_dim` is
    /// folded into the last head.
    pub fn heads(&self) -> Vec<(usize, usize)> {
        let n = self.model_dim / self.head_dim;
        (0..n)
            .map(|h| {
                let start = h * self.head_dim;
                let len = if h + 1 == n { self.model_dim - start } else { self.head_dim };
                (start, len)
            })
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClassifierSpec {
    pub siren: SirenSpec,
    pub transformer: TransformerSpec,
    pub tokens: TokenMode,
    /// β is drawn from `U(−beta_init, beta_init)`.
    pub beta_init: f64,
}

impl ClassifierSpec {
    pub fn new(siren: SirenSpec, transformer: TransformerSpec) -> Self {
        Self { siren, transformer, tokens: TokenMode::Scale(500.0), beta_init: 1e-3 }
    }

    /// Shapes of ψ in storage order, with names; β comes first.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let t = &self.transformer;
        let d = t.model_dim;
        let hidden = t.mlp_ratio * d;
        let mut out = vec![
            ("beta".to_string(), vec![self.siren.param_count()]),
            ("in_proj.w".to_string(), vec![token_dim(&self.siren), d]),
            ("in_proj.b".to_string(), vec![d]),
        ];
        for b in 0..t.blocks {
            let p = |s: &str| format!("block{b:02}.{s}");
            out.push((p("ln1.g"), vec![d]));
            out.push((p("ln1.b"), vec![d]));
            for m in ["q", "k", "v", "o"] {
                out.push((p(&format!("{m}.w")), vec![d, d]));
                out.push((p(&format!("{m}.b")), vec![d]));
            }
            out.push((p("ls1"), vec![d]));
            out.push((p("ln2.g"), vec![d]));
            out.push((p("ln2.b"), vec![d]));
            out.push((p("mlp1.w"), vec![d, hidden]));
            out.push((p("mlp1.b"), vec![hidden]));
            out.push((p("mlp2.w"), vec![hidden, d]));
            out.push((p("mlp2.b"), vec![d]));
            out.push((p("ls2"), vec![d]));
        }
        out.push(("ln_f.g".to_string(), vec![d]));
        out.push(("ln_f.b".to_string(), vec![d]));
        out.push(("head.w".to_string(), vec![d, t.num_classes]));
        out.push(("head.b".to_string(), vec![t.num_classes]));
        out
    }

    /// Total scalar count of ψ, β included.
    pub fn param_count(&self) -> usize {
        self.param_shapes().iter().map(|(_, s)| s.iter().product::<usize>()).sum()
    }
}

/// Token feature width: largest fan-in among tokenized layers, plus one.
pub fn token_dim(spec: &SirenSpec) -> usize {
    spec.layers().iter().skip(1).map(|s| s.fan_in).max().unwrap_or(0) + 1
}

/// Number of tokens: output neurons of every layer after the first.
pub fn token_count(spec: &SirenSpec) -> usize {
    spec.layers().iter().skip(1).map(|s| s.fan_out).sum()
}

/// Stacks `b` under `W` so that `[x, 1]·M = x·W + b`.
pub fn merge_weight_bias<T: Real>(w: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>, ClassifierError> {
    let (fan_in, fan_out) = w.dims2("merge_weight_bias")?;
    if b.shape() != [fan_out] {
        return Err(TensorError::ShapeMismatch { op: "merge_weight_bias", lhs: w.shape().to_vec(), rhs: b.shape().to_vec() }.into());
    }
    let mut data = w.data().to_vec();
    data.extend_from_slice(b.data());
    Ok(Tensor::matrix(fan_in + 1, fan_out, data)?)
}

/// Tokens with the `(layer, neuron)` each row came from.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenSequence<T: Real = f32> {
    pub tokens: Tensor<T>,
    pub provenance: Vec<(usize, usize)>,
}

impl<T: Real> TokenSequence<T> {
    pub fn len(&self) -> usize {
        self.provenance.len()
    }

    pub fn is_empty(&self) -> bool {
        self.provenance.is_empty()
    }
}

fn provenance(spec: &SirenSpec) -> Vec<(usize, usize)> {
    spec.layers().iter().enumerate().skip(1).flat_map(|(l, s)| (0..s.fan_out).map(move |n| (l, n))).collect()
}

/// Token matrix `N × token_dim` on a tape, from flat φ, θ and β.
pub fn tokens_on_tape<'t, T: Real>(
    spec: &SirenSpec,
    mode: TokenMode,
    phi: Var<'t, T>,
    theta: Var<'t, T>,
    beta: Var<'t, T>,
) -> Result<Var<'t, T>, ClassifierError> {
    let n = spec.param_count();
    for (name, v) in [("phi", phi), ("theta", theta), ("beta", beta)] {
        if v.shape() != [n] {
            return Err(ClassifierError::SpecMismatch(format!("{name} has shape {:?}, spec needs [{n}]", v.shape())));
        }
    }
    let mut delta = phi.sub(theta)?.add(beta)?;
    if let TokenMode::Scale(lambda) = mode {
        delta = delta.scale(lambda);
    }
    let feat = token_dim(spec);
    let tape = phi.tape();
    let mut rows = Vec::new();
    for s in spec.layers().iter().skip(1) {
        let w = delta.flat_slice(s.weight_offset, &[s.fan_in, s.fan_out])?;
        let b = delta.flat_slice(s.bias_offset, &[1, s.fan_out])?;
        let mut t = Var::concat(&[w, b], 0)?.transpose()?;
        if s.fan_in + 1 < feat {
            let pad = tape.constant(Tensor::zeros(&[s.fan_out, feat - s.fan_in - 1]));
            t = Var::concat(&[t, pad], 1)?;
        }
        rows.push(t);
    }
    let tokens = Var::concat(&rows, 0)?;
    Ok(match mode {
        TokenMode::Scale(_) => tokens,
        TokenMode::LayerNorm => tokens.normalize(1e-5),
    })
}

/// Value-level tokenization.
pub fn tokenize<T: Real>(
    phi: &SirenParams<T>,
    theta: &SirenParams<T>,
    beta: &Tensor<T>,
    mode: TokenMode,
) -> Result<TokenSequence<T>, ClassifierError> {
    if phi.spec() != theta.spec() {
        return Err(ClassifierError::SpecMismatch(format!("{:?} vs {:?}", phi.spec(), theta.spec())));
    }
    let tape = Tape::new();
    let tokens =
        tokens_on_tape(phi.spec(), mode, tape.constant(phi.to_tensor()), tape.constant(theta.to_tensor()), tape.constant(beta.clone()))?;
    Ok(TokenSequence { tokens: tokens.value(), provenance: provenance(phi.spec()) })
}

/// Transformer parameters ψ (β first) and their spec.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightClassifier<T: Real = f32> {
    spec: ClassifierSpec,
    params: Vec<Tensor<T>>,
}

struct Cursor<'a, 't, T: Real> {
    vars: &'a [Var<'t, T>],
    pos: usize,
}

impl<'a, 't, T: Real> Cursor<'a, 't, T> {
    fn next(&mut self) -> Var<'t, T> {
        self.pos += 1;
        self.vars[self.pos - 1]
    }
}

impl<T: Real> WeightClassifier<T> {
    pub fn new(spec: ClassifierSpec, seed: u64) -> Result<Self, ClassifierError> {
        spec.transformer.validate()?;
        spec.siren.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = spec
            .param_shapes()
            .into_iter()
            .map(|(name, shape)| {
                let n: usize = shape.iter().product();
                let fill = |v: f64| Tensor::full(&shape, T::lit(v));
                if name == "beta" {
                    let b = spec.beta_init;
                    Tensor::vector((0..n).map(|_| T::lit(if b > 0.0 { rng.gen_range(-b..b) } else { 0.0 })).collect())
                } else if name.ends_with(".w") {
                    let bound = (6.0 / (shape[0] + shape[1]) as f64).sqrt();
                    Tensor::matrix(shape[0], shape[1], (0..n).map(|_| T::lit(rng.gen_range(-bound..bound))).collect()).expect("sized")
                } else if name.ends_with(".g") {
                    fill(1.0)
                } else if name.ends_with("ls1") || name.ends_with("ls2") {
                    fill(spec.transformer.layerscale_init)
                } else {
                    fill(0.0)
                }
            })
            .collect();
        Ok(Self { spec, params })
    }

    pub fn from_params(spec: ClassifierSpec, params: Vec<Tensor<T>>) -> Result<Self, ClassifierError> {
        spec.transformer.validate()?;
        let shapes = spec.param_shapes();
        if shapes.len() != params.len() {
            return Err(ClassifierError::ParamCount { expected: shapes.len(), got: params.len() });
        }
        for ((name, shape), p) in shapes.iter().zip(&params) {
            if p.shape() != shape.as_slice() {
                return Err(ClassifierError::InvalidSpec(format!("{name}: shape {:?}, expected {shape:?}", p.shape())));
            }
        }
        Ok(Self { spec, params })
    }

    pub fn spec(&self) -> &ClassifierSpec {
        &self.spec
    }

    pub fn params(&self) -> &[Tensor<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.params
    }

    pub fn into_params(self) -> Vec<Tensor<T>> {
        self.params
    }

    pub fn names(&self) -> Vec<String> {
        self.spec.param_shapes().into_iter().map(|(n, _)| n).collect()
    }

    pub fn beta(&self) -> &Tensor<T> {
        &self.params[0]
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    /// Logits `[num_classes]` from a token matrix; `psi` is ψ on the tape in
    /// storage order (β is skipped here).
    pub fn logits_from_tokens<'t>(&self, psi: &[Var<'t, T>], tokens: Var<'t, T>) -> Result<Var<'t, T>, ClassifierError> {
        if psi.len() != self.params.len() {
            return Err(ClassifierError::ParamCount { expected: self.params.len(), got: psi.len() });
        }
        let t = &self.spec.transformer;
        let eps = t.ln_eps;
        let mut c = Cursor { vars: psi, pos: 1 };
        let mut x = tokens.matmul(c.next())?.add(c.next())?;
        for _ in 0..t.blocks {
            let h = x.layer_norm(c.next(), c.next(), eps)?;
            let q = h.matmul(c.next())?.add(c.next())?;
            let k = h.matmul(c.next())?.add(c.next())?;
            let v = h.matmul(c.next())?.add(c.next())?;
            let mut heads = Vec::new();
            for (start, len) in t.heads() {
                let qh = q.narrow_last(start, len)?;
                let kh = k.narrow_last(start, len)?;
                let vh = v.narrow_last(start, len)?;
                let att = qh.matmul_t(kh, false, true)?.scale(1.0 / (len as f64).sqrt()).softmax();
                heads.push(att.matmul(vh)?);
            }
            let attn = if heads.len() == 1 { heads[0] } else { Var::concat(&heads, 1)? };
            let o = attn.matmul(c.next())?.add(c.next())?;
            x = x.add(o.mul(c.next())?)?;
            let h = x.layer_norm(c.next(), c.next(), eps)?;
            let m = h.matmul(c.next())?.add(c.next())?.gelu();
            let m = m.matmul(c.next())?.add(c.next())?;
            x = x.add(m.mul(c.next())?)?;
        }
        let pooled = x.layer_norm(c.next(), c.next(), eps)?.mean_leading();
        let d = t.model_dim;
        let logits = pooled.reshape(&[1, d])?.matmul(c.next())?.reshape(&[t.num_classes])?;
        Ok(logits.add(c.next())?)
    }

    /// Logits for flat φ and θ on the tape (β is `psi[0]`).
    pub fn logits_on_tape<'t>(&self, psi: &[Var<'t, T>], phi: Var<'t, T>, theta: Var<'t, T>) -> Result<Var<'t, T>, ClassifierError> {
        let tokens = tokens_on_tape(&self.spec.siren, self.spec.tokens, phi, theta, psi[0])?;
        self.logits_from_tokens(psi, tokens)
    }

    pub fn tokenize(&self, phi: &SirenParams<T>, theta: &SirenParams<T>) -> Result<TokenSequence<T>, ClassifierError> {
        if phi.spec() != &self.spec.siren {
            return Err(ClassifierError::SpecMismatch(format!("{:?} vs {:?}", phi.spec(), self.spec.siren)));
        }
        tokenize(phi, theta, self.beta(), self.spec.tokens)
    }

    /// Value-level logits; `strict` turns non-finite output into an error.
    pub fn classify(&self, tokens: &TokenSequence<T>, strict: bool) -> Result<Tensor<T>, ClassifierError> {
        let tape = Tape::new();
        let psi: Vec<_> = self.params.iter().map(|p| tape.constant(p.clone())).collect();
        let logits = self.logits_from_tokens(&psi, tape.constant(tokens.tokens.clone()))?.value();
        if strict && !logits.all_finite() {
            return Err(ClassifierError::NonFinite);
        }
        Ok(logits)
    }

    pub fn predict(&self, phi: &SirenParams<T>, theta: &SirenParams<T>) -> Result<usize, ClassifierError> {
        let logits = self.classify(&self.tokenize(phi, theta)?, false)?;
        Ok(argmax(logits.data()))
    }
}

pub fn argmax<T: Real>(v: &[T]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::random_tensor;
    use crate::siren::siren_init;

    fn small_siren() -> SirenSpec {
        SirenSpec { in_dim: 2, out_dim: 3, width: 8, hidden_layers: 2, omega: 10.0 }
    }

    fn small_spec() -> ClassifierSpec {
        let t = TransformerSpec { blocks: 2, model_dim: 8, head_dim: 4, num_classes: 4, ..TransformerSpec::default() };
        ClassifierSpec::new(small_siren(), t)
    }

    #[test]
    fn merge_identity_integer_fixture() {
        let w = Tensor::<f64>::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]).unwrap();
        let b = Tensor::vector(vec![5.0, 6.0]);
        let m = merge_weight_bias(&w, &b).unwrap();
        assert_eq!(m.shape(), &[3, 2]);
        assert_eq!(m.data(), &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let x1 = Tensor::from_rows(&[&[1.0, 1.0, 1.0]]).unwrap();
        assert_eq!(x1.matmul(&m).unwrap().data(), &[9.0, 12.0]);
        let zero = merge_weight_bias(&w, &Tensor::zeros(&[2])).unwrap();
        assert_eq!(&zero.data()[4..], &[0.0, 0.0]);
        assert!(merge_weight_bias(&w, &Tensor::zeros(&[3])).is_err());
    }

    #[test]
    fn merge_identity_random() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w = random_tensor(&[3, 2], -1.0, 1.0, &mut rng);
        let b = random_tensor(&[2], -1.0, 1.0, &mut rng);
        let x = random_tensor(&[1, 3], -1.0, 1.0, &mut rng);
        let m = merge_weight_bias(&w, &b).unwrap();
        let mut xe = x.data().to_vec();
        xe.push(1.0);
        let lhs = Tensor::matrix(1, 4, xe).unwrap().matmul(&m).unwrap();
        for j in 0..2 {
            let direct: f64 = (0..3).map(|i| x.data()[i] * w.data()[i * 2 + j]).sum::<f64>() + b.data()[j];
            assert!((lhs.data()[j] - direct).abs() <= 4.0 * f64::EPSILON);
        }
    }

    #[test]
    fn token_layout_default_shape() {
        let spec = SirenSpec::default();
        assert_eq!(token_count(&spec), 4 * 128 + 3);
        assert_eq!(token_dim(&spec), 129);
        let p = provenance(&spec);
        assert_eq!(p[0], (1, 0));
        assert_eq!(p[511], (4, 127));
        assert_eq!(p[512], (5, 0));
    }

    #[test]
    fn tokens_zero_at_theta_and_scaled_offset() {
        let spec = small_siren();
        let theta = siren_init::<f64>(spec, 0).unwrap();
        let beta = Tensor::zeros(&[spec.param_count()]);
        let tok = tokenize(&theta, &theta, &beta, TokenMode::Scale(500.0)).unwrap();
        assert_eq!(tok.tokens.shape(), &[token_count(&spec), token_dim(&spec)]);
        assert!(tok.tokens.data().iter().all(|&v| v == 0.0));

        let mut phi = theta.clone();
        phi.flat_mut().iter_mut().for_each(|v| *v += 0.001);
        let tok = tokenize(&phi, &theta, &beta, TokenMode::Scale(500.0)).unwrap();
        assert!(tok.tokens.data().iter().all(|&v| (v - 0.5).abs() < 1e-9));
    }

    #[test]
    fn token_rows_are_merged_columns() {
        let spec = small_siren();
        let theta = SirenParams::<f64>::zeros(spec).unwrap();
        let phi = siren_init::<f64>(spec, 3).unwrap();
        let beta = Tensor::zeros(&[spec.param_count()]);
        let tok = tokenize(&phi, &theta, &beta, TokenMode::Scale(1.0)).unwrap();
        let merged =
            merge_weight_bias(&Tensor::matrix(8, 8, phi.weight(2).to_vec()).unwrap(), &Tensor::vector(phi.bias(2).to_vec())).unwrap();
        // layer 2, neuron 5 is token 8 + 5
        let row = &tok.tokens.data()[13 * 9..14 * 9];
        for (i, v) in row.iter().enumerate() {
            assert_eq!(*v, merged.data()[i * 8 + 5]);
        }
        assert_eq!(tok.provenance[13], (2, 5));
    }

    #[test]
    fn tokenize_is_linear_in_offset() {
        let spec = small_siren();
        let theta = siren_init::<f64>(spec, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let beta = random_tensor(&[spec.param_count()], -1e-3, 1e-3, &mut rng);
        let delta = random_tensor(&[spec.param_count()], -1e-2, 1e-2, &mut rng);
        let shifted = |c: f64| {
            let flat = theta.flat().iter().zip(delta.data()).map(|(t, d)| t + c * d).collect();
            SirenParams::from_flat(spec, flat).unwrap()
        };
        let mode = TokenMode::Scale(500.0);
        let t0 = tokenize(&theta, &theta, &beta, mode).unwrap().tokens;
        let t1 = tokenize(&shifted(1.0), &theta, &beta, mode).unwrap().tokens;
        let t2 = tokenize(&shifted(2.0), &theta, &beta, mode).unwrap().tokens;
        for i in 0..t0.len() {
            let (a, b) = (t2.data()[i] - t0.data()[i], 2.0 * (t1.data()[i] - t0.data()[i]));
            assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
    }

    #[test]
    fn layernorm_mode_normalizes_tokens() {
        let spec = small_siren();
        let theta = siren_init::<f64>(spec, 1).unwrap();
        // O(1) offsets so every row's variance dwarfs the normalizer's eps
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let offset = random_tensor(&[spec.param_count()], -1.0, 1.0, &mut rng);
        let phi = SirenParams::from_flat(spec, theta.flat().iter().zip(offset.data()).map(|(a, b)| a + b).collect()).unwrap();
        let tok = tokenize(&phi, &theta, &Tensor::zeros(&[spec.param_count()]), TokenMode::LayerNorm).unwrap();
        for row in tok.tokens.data().chunks(9) {
            let mean = row.iter().sum::<f64>() / 9.0;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 9.0;
            assert!(mean.abs() < 1e-12 && (var - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn spec_validation() {
        let mut t = TransformerSpec { model_dim: 32, ..TransformerSpec::default() };
        assert!(t.validate().is_err());
        t.model_dim = 160;
        assert_eq!(t.heads(), vec![(0, 64), (64, 96)]);
        assert_eq!(TransformerSpec::default().heads(), vec![(0, 64), (64, 64)]);
    }

    #[test]
    fn default_param_count_near_reported() {
        let spec = ClassifierSpec::new(SirenSpec::default(), TransformerSpec::default());
        let n = spec.param_count() as f64;
        assert!((n - 1.1e6).abs() / 1.1e6 < 0.15, "{n}");
    }

    #[test]
    fn zero_tokens_zero_head_give_uniform_logits() {
        let spec = small_spec();
        let mut clf = WeightClassifier::<f64>::new(spec, 0).unwrap();
        let n = clf.params().len();
        clf.params_mut()[n - 2] = Tensor::zeros(&[8, 4]);
        let tokens = TokenSequence { tokens: Tensor::zeros(&[token_count(&spec.siren), 9]), provenance: provenance(&spec.siren) };
        let logits = clf.classify(&tokens, true).unwrap();
        assert!(logits.data().iter().all(|&v| v == 0.0));
        let tape = Tape::new();
        let l = tape.constant(logits).softmax().value();
        assert!(l.data().iter().all(|&p| (p - 0.25).abs() < 1e-15));
    }

    fn permute_hidden(p: &SirenParams<f64>, perm: &[usize]) -> SirenParams<f64> {
        let d = p.spec().width;
        let mut q = p.clone();
        for (new, &old) in perm.iter().enumerate() {
            for r in 0..d {
                q.weight_mut(1)[r * d + new] = p.weight(1)[r * d + old];
            }
            q.weight_mut(2)[new * d..(new + 1) * d].copy_from_slice(&p.weight(2)[old * d..(old + 1) * d]);
            q.bias_mut(1)[new] = p.bias(1)[old];
        }
        q
    }

    #[test]
    fn neuron_permutation_changes_logits() {
        let spec = small_spec();
        let clf = WeightClassifier::<f64>::new(spec, 3).unwrap();
        let theta = siren_init::<f64>(spec.siren, 5).unwrap();
        let phi = siren_init::<f64>(spec.siren, 6).unwrap();
        let perm = [7, 2, 0, 5, 1, 6, 3, 4];
        // same function, permuted hidden units
        let grid = crate::siren::CoordGrid::<f64>::new(3, 3);
        let phi_p = permute_hidden(&phi, &perm);
        assert!(phi.predict(&grid.coords).unwrap().max_abs_diff(&phi_p.predict(&grid.coords).unwrap()) < 1e-12);
        let a = clf.classify(&clf.tokenize(&phi, &theta).unwrap(), true).unwrap();
        let b = clf.classify(&clf.tokenize(&phi_p, &permute_hidden(&theta, &perm)).unwrap(), true).unwrap();
        assert!(a.max_abs_diff(&b) > 1e-6);
    }

    #[test]
    fn beta_gradient_nonzero_at_init() {
        let spec = small_spec();
        let clf = WeightClassifier::<f64>::new(spec, 3).unwrap();
        let theta = siren_init::<f64>(spec.siren, 5).unwrap();
        let mut phi = theta.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for v in phi.flat_mut() {
            *v += rng.gen_range(-1e-3..1e-3);
        }
        let tape = Tape::new();
        let psi: Vec<_> = clf.params().iter().map(|p| tape.leaf(p.clone())).collect();
        let logits = clf.logits_on_tape(&psi, tape.constant(phi.to_tensor()), tape.constant(theta.to_tensor())).unwrap();
        let g = tape.backward(logits.cross_entropy(&[1]).unwrap()).unwrap();
        assert!(g.wrt(psi[0]).data().iter().any(|&v| v != 0.0));
        for v in &psi {
            assert!(g.wrt(*v).all_finite());
        }
    }

    /// Plain-loop forward pass over named ψ, independent of the tape ops.
    fn naive_logits(clf: &WeightClassifier<f64>, tokens: &Tensor<f64>) -> Vec<f64> {
        let t = clf.spec().transformer;
        let names = clf.names();
        let get = |n: &str| clf.params()[names.iter().position(|m| m == n).unwrap()].data().to_vec();
        let (n, f, d) = (tokens.shape()[0], tokens.shape()[1], t.model_dim);
        let linear = |x: &[Vec<f64>], w: &[f64], b: &[f64], out: usize| -> Vec<Vec<f64>> {
            x.iter()
                .map(|row| (0..out).map(|j| b[j] + row.iter().enumerate().map(|(i, v)| v * w[i * out + j]).sum::<f64>()).collect())
                .collect()
        };
        let ln = |x: &[Vec<f64>], g: &[f64], b: &[f64]| -> Vec<Vec<f64>> {
            x.iter()
                .map(|row| {
                    let m = row.iter().sum::<f64>() / row.len() as f64;
                    let v = row.iter().map(|x| (x - m).powi(2)).sum::<f64>() / row.len() as f64;
                    row.iter().enumerate().map(|(i, x)| (x - m) / (v + t.ln_eps).sqrt() * g[i] + b[i]).collect()
                })
                .collect()
        };
        let gelu = |x: f64| 0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh());
        let rows: Vec<Vec<f64>> = (0..n).map(|i| tokens.data()[i * f..(i + 1) * f].to_vec()).collect();
        let mut x = linear(&rows, &get("in_proj.w"), &get("in_proj.b"), d);
        for blk in 0..t.blocks {
            let p = |s: &str| get(&format!("block{blk:02}.{s}"));
            let h = ln(&x, &p("ln1.g"), &p("ln1.b"));
            let q = linear(&h, &p("q.w"), &p("q.b"), d);
            let k = linear(&h, &p("k.w"), &p("k.b"), d);
            let v = linear(&h, &p("v.w"), &p("v.b"), d);
            let mut attn = vec![vec![0.0; d]; n];
            for (start, len) in t.heads() {
                for i in 0..n {
                    let scores: Vec<f64> =
                        (0..n).map(|j| (start..start + len).map(|c| q[i][c] * k[j][c]).sum::<f64>() / (len as f64).sqrt()).collect();
                    let mx = scores.iter().cloned().fold(f64::MIN, f64::max);
                    let z: f64 = scores.iter().map(|s| (s - mx).exp()).sum();
                    for j in 0..n {
                        let a = (scores[j] - mx).exp() / z;
                        for c in start..start + len {
                            attn[i][c] += a * v[j][c];
                        }
                    }
                }
            }
            let o = linear(&attn, &p("o.w"), &p("o.b"), d);
            let ls1 = p("ls1");
            for i in 0..n {
                for c in 0..d {
                    x[i][c] += ls1[c] * o[i][c];
                }
            }
            let h = ln(&x, &p("ln2.g"), &p("ln2.b"));
            let hidden = t.mlp_ratio * d;
            let m: Vec<Vec<f64>> =
                linear(&h, &p("mlp1.w"), &p("mlp1.b"), hidden).into_iter().map(|r| r.into_iter().map(gelu).collect()).collect();
            let m = linear(&m, &p("mlp2.w"), &p("mlp2.b"), d);
            let ls2 = p("ls2");
            for i in 0..n {
                for c in 0..d {
                    x[i][c] += ls2[c] * m[i][c];
                }
            }
        }
        let x = ln(&x, &get("ln_f.g"), &get("ln_f.b"));
        let pooled: Vec<f64> = (0..d).map(|c| x.iter().map(|r| r[c]).sum::<f64>() / n as f64).collect();
        linear(&[pooled], &get("head.w"), &get("head.b"), t.num_classes).remove(0)
    }

    #[test]
    fn single_block_matches_scalar_trace() {
        // two tokens, one 64-wide head
        let siren = SirenSpec { in_dim: 2, out_dim: 2, width: 63, hidden_layers: 1, omega: 10.0 };
        let t = TransformerSpec { blocks: 1, model_dim: 64, head_dim: 64, num_classes: 3, ..TransformerSpec::default() };
        let clf = WeightClassifier::<f64>::new(ClassifierSpec::new(siren, t), 11).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let tokens = random_tensor(&[2, 64], -1.0, 1.0, &mut rng);
        let seq = TokenSequence { tokens: tokens.clone(), provenance: vec![(2, 0), (2, 1)] };
        let got = clf.classify(&seq, true).unwrap();
        let want = naive_logits(&clf, &tokens);
        for (a, b) in got.data().iter().zip(&want) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn multi_block_multi_head_matches_scalar_trace() {
        let spec = small_spec();
        let clf = WeightClassifier::<f64>::new(spec, 12).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let tokens = random_tensor(&[token_count(&spec.siren), 9], -2.0, 2.0, &mut rng);
        let seq = TokenSequence { tokens: tokens.clone(), provenance: provenance(&spec.siren) };
        let got = clf.classify(&seq, true).unwrap();
        let want = naive_logits(&clf, &tokens);
        for (a, b) in got.data().iter().zip(&want) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn from_params_checks_shapes() {
        let spec = small_spec();
        let clf = WeightClassifier::<f32>::new(spec, 0).unwrap();
        let mut params = clf.clone().into_params();
        assert_eq!(WeightClassifier::from_params(spec, params.clone()).unwrap(), clf);
        params[1] = Tensor::zeros(&[2, 2]);
        assert!(WeightClassifier::from_params(spec, params.clone()).is_err());
        params.pop();
        assert!(matches!(WeightClassifier::from_params(spec, params), Err(ClassifierError::ParamCount { .. })));
    }
}
