//! SIREN: sine-activated MLP mapping pixel coordinates to colour.
//!
//! The reconstruction gradient is available in two forms: the usual reverse
//! sweep over [`recon_loss`], and [`recon_grad_explicit`], which writes the
//! gradient out as ordinary tape ops. The explicit form is what the unrolled
//! inner loop uses, so that differentiating *through* a gradient step only
//! needs first-order reverse mode.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::tensor::{Real, Tape, Tensor, TensorError, Var};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SirenError {
    #[error("invalid SIREN spec: {0}")]
    InvalidSpec(String),
    #[error("parameter vector has {got} values, spec needs {expected}")]
    ParamCount { expected: usize, got: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Architecture: `in_dim → width`, `hidden_layers × (width → width)`,
/// `width → out_dim`. Sine on every layer but the last; `omega` scales the
/// first pre-activation only.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SirenSpec {
    pub in_dim: usize,
    pub out_dim: usize,
    pub width: usize,
    pub hidden_layers: usize,
    pub omega: f64,
}

impl Default for SirenSpec {
    fn default() -> Self {
        Self { in_dim: 2, out_dim: 3, width: 128, hidden_layers: 4, omega: 10.0 }
    }
}

/// Position of one layer inside the flat parameter vector.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerSlot {
    pub fan_in: usize,
    pub fan_out: usize,
    pub weight_offset: usize,
    pub bias_offset: usize,
}

impl LayerSlot {
    pub fn end(&self) -> usize {
        self.bias_offset + self.fan_out
    }
}

impl SirenSpec {
    pub fn validate(&self) -> Result<(), SirenError> {
        if self.in_dim == 0 || self.out_dim == 0 || self.width == 0 || self.hidden_layers == 0 {
            return Err(SirenError::InvalidSpec(format!("all dimensions must be positive: {self:?}")));
        }
        if !(self.omega.is_finite() && self.omega > 0.0) {
            return Err(SirenError::InvalidSpec(format!("omega must be positive, got {}", self.omega)));
        }
        Ok(())
    }

    pub fn num_layers(&self) -> usize {
        self.hidden_layers + 2
    }

    /// Layer slots in forward order; weights are stored `fan_in × fan_out`
    /// row-major, each followed by its bias.
    pub fn layers(&self) -> Vec<LayerSlot> {
        let mut dims = vec![(self.in_dim, self.width)];
        dims.extend(std::iter::repeat_n((self.width, self.width), self.hidden_layers));
        dims.push((self.width, self.out_dim));
        let mut offset = 0;
        dims.into_iter()
            .map(|(fan_in, fan_out)| {
                let slot = LayerSlot { fan_in, fan_out, weight_offset: offset, bias_offset: offset + fan_in * fan_out };
                offset = slot.end();
                slot
            })
            .collect()
    }

    /// `(in+1)·d + l·(d+1)·d + (d+1)·out`.
    pub fn param_count(&self) -> usize {
        (self.in_dim + 1) * self.width + self.hidden_layers * (self.width + 1) * self.width + (self.width + 1) * self.out_dim
    }
}

/// SIREN parameters in one contiguous vector; per-layer accessors are views
/// into it.
#[derive(Clone, Debug, PartialEq)]
pub struct SirenParams<T: Real = f32> {
    spec: SirenSpec,
    flat: Vec<T>,
}

impl<T: Real> SirenParams<T> {
    pub fn from_flat(spec: SirenSpec, flat: Vec<T>) -> Result<Self, SirenError> {
        spec.validate()?;
        if flat.len() != spec.param_count() {
            return Err(SirenError::ParamCount { expected: spec.param_count(), got: flat.len() });
        }
        Ok(Self { spec, flat })
    }

    pub fn zeros(spec: SirenSpec) -> Result<Self, SirenError> {
        Self::from_flat(spec, vec![T::zero(); spec.param_count()])
    }

    pub fn spec(&self) -> &SirenSpec {
        &self.spec
    }

    pub fn flat(&self) -> &[T] {
        &self.flat
    }

    pub fn flat_mut(&mut self) -> &mut [T] {
        &mut self.flat
    }

    pub fn into_flat(self) -> Vec<T> {
        self.flat
    }

    pub fn len(&self) -> usize {
        self.flat.len()
    }

    pub fn is_empty(&self) -> bool {
        self.flat.is_empty()
    }

    pub fn weight(&self, layer: usize) -> &[T] {
        let s = self.spec.layers()[layer];
        &self.flat[s.weight_offset..s.bias_offset]
    }

    pub fn bias(&self, layer: usize) -> &[T] {
        let s = self.spec.layers()[layer];
        &self.flat[s.bias_offset..s.end()]
    }

    pub fn weight_mut(&mut self, layer: usize) -> &mut [T] {
        let s = self.spec.layers()[layer];
        &mut self.flat[s.weight_offset..s.bias_offset]
    }

    pub fn bias_mut(&mut self, layer: usize) -> &mut [T] {
        let s = self.spec.layers()[layer];
        &mut self.flat[s.bias_offset..s.end()]
    }

    pub fn to_tensor(&self) -> Tensor<T> {
        Tensor::vector(self.flat.clone())
    }

    pub fn cast<U: Real>(&self) -> SirenParams<U> {
        SirenParams { spec: self.spec, flat: self.flat.iter().map(|v| U::lit(v.as_f64())).collect() }
    }

    /// Predictions for `coords` (`n × in_dim`) without keeping a graph.
    pub fn predict(&self, coords: &Tensor<T>) -> Result<Tensor<T>, SirenError> {
        let tape = Tape::new();
        let flat = tape.constant(self.to_tensor());
        let layers = layer_vars(&self.spec, flat)?;
        Ok(forward(&self.spec, &layers, tape.constant(coords.clone()))?.value())
    }
}

/// Frequency the reference SIREN uses inside its hidden sines. Hidden layers
/// here run at unit frequency with weights pre-multiplied by it; the linear
/// output layer has no sine to absorb it, so its bound is divided by it.
pub const REFERENCE_HIDDEN_OMEGA: f64 = 30.0;

/// SIREN initialization: first layer `U(−1/in, 1/in)`, hidden layers
/// `U(−√(6/fan_in), √(6/fan_in))`, output layer the hidden bound over
/// [`REFERENCE_HIDDEN_OMEGA`], zero biases.
pub fn siren_init<T: Real>(spec: SirenSpec, seed: u64) -> Result<SirenParams<T>, SirenError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut flat = vec![T::zero(); spec.param_count()];
    for (i, slot) in spec.layers().iter().enumerate() {
        let bound = if i == 0 {
            1.0 / slot.fan_in as f64
        } else if i + 1 == spec.num_layers() {
            (6.0 / slot.fan_in as f64).sqrt() / REFERENCE_HIDDEN_OMEGA
        } else {
            (6.0 / slot.fan_in as f64).sqrt()
        };
        for w in &mut flat[slot.weight_offset..slot.bias_offset] {
            *w = T::lit(rng.gen_range(-bound..=bound));
        }
    }
    Ok(SirenParams { spec, flat })
}

/// Pixel-centre coordinates in `[−1, 1]²`, row-major, `(x, y)` per row.
#[derive(Clone, Debug, PartialEq)]
pub struct CoordGrid<T: Real = f32> {
    pub height: usize,
    pub width: usize,
    pub coords: Tensor<T>,
}

impl<T: Real> CoordGrid<T> {
    pub fn new(height: usize, width: usize) -> Self {
        let mut data = Vec::with_capacity(height * width * 2);
        for i in 0..height {
            let y = -1.0 + (2 * i + 1) as f64 / height as f64;
            for j in 0..width {
                let x = -1.0 + (2 * j + 1) as f64 / width as f64;
                data.push(T::lit(x));
                data.push(T::lit(y));
            }
        }
        let coords = Tensor::new(vec![height * width, 2], data).expect("sized");
        Self { height, width, coords }
    }

    pub fn len(&self) -> usize {
        self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Per-layer weight and bias on a tape.
#[derive(Clone, Copy, Debug)]
pub struct LayerVars<'t, T: Real = f32> {
    pub weight: Var<'t, T>,
    pub bias: Var<'t, T>,
}

/// Views a flat `|θ|` vector on the tape as per-layer variables.
pub fn layer_vars<'t, T: Real>(spec: &SirenSpec, flat: Var<'t, T>) -> Result<Vec<LayerVars<'t, T>>, SirenError> {
    let total: usize = flat.shape().iter().product();
    if total != spec.param_count() {
        return Err(SirenError::ParamCount { expected: spec.param_count(), got: total });
    }
    spec.layers()
        .iter()
        .map(|s| {
            Ok(LayerVars {
                weight: flat.flat_slice(s.weight_offset, &[s.fan_in, s.fan_out])?,
                bias: flat.flat_slice(s.bias_offset, &[s.fan_out])?,
            })
        })
        .collect()
}

/// Flattens per-layer variables back into one `|θ|` vector on the tape.
pub fn flatten_layers<'t, T: Real>(layers: &[LayerVars<'t, T>]) -> Result<Var<'t, T>, SirenError> {
    let mut parts = Vec::with_capacity(layers.len() * 2);
    for l in layers {
        let n: usize = l.weight.shape().iter().product();
        parts.push(l.weight.reshape(&[n])?);
        parts.push(l.bias);
    }
    Ok(Var::concat(&parts, 0)?)
}

struct Activations<'t, T: Real> {
    /// Cosines of the sine arguments, when requested.
    cos: Vec<Var<'t, T>>,
    /// Layer inputs: `coords`, then each sine output.
    inputs: Vec<Var<'t, T>>,
    output: Var<'t, T>,
}

fn run_forward<'t, T: Real>(
    spec: &SirenSpec,
    layers: &[LayerVars<'t, T>],
    coords: Var<'t, T>,
    with_cos: bool,
) -> Result<Activations<'t, T>, SirenError> {
    if layers.len() != spec.num_layers() {
        return Err(SirenError::InvalidSpec(format!("{} layers given, spec has {}", layers.len(), spec.num_layers())));
    }
    let mut cos = Vec::with_capacity(layers.len() - 1);
    let mut inputs = vec![coords];
    let mut h = coords;
    for (i, l) in layers.iter().enumerate() {
        let z = h.matmul(l.weight)?.add(l.bias)?;
        if i + 1 == layers.len() {
            return Ok(Activations { cos, inputs, output: z });
        }
        let z = if i == 0 { z.scale(spec.omega) } else { z };
        if with_cos {
            let (s, c) = z.sin_cos();
            h = s;
            cos.push(c);
        } else {
            h = z.sin();
        }
        inputs.push(h);
    }
    unreachable!("spec has at least two layers")
}

/// `n × out_dim` predictions.
pub fn forward<'t, T: Real>(spec: &SirenSpec, layers: &[LayerVars<'t, T>], coords: Var<'t, T>) -> Result<Var<'t, T>, SirenError> {
    Ok(run_forward(spec, layers, coords, false)?.output)
}

/// Mean squared error over all `n·out_dim` values.
pub fn recon_loss<'t, T: Real>(
    spec: &SirenSpec,
    layers: &[LayerVars<'t, T>],
    coords: Var<'t, T>,
    targets: Var<'t, T>,
) -> Result<Var<'t, T>, SirenError> {
    Ok(forward(spec, layers, coords)?.mse(targets)?)
}

/// Reconstruction loss together with its parameter gradient, both recorded
/// as differentiable tape values.
pub struct ReconGrad<'t, T: Real> {
    pub loss: Var<'t, T>,
    pub prediction: Var<'t, T>,
    pub grads: Vec<LayerVars<'t, T>>,
}

/// `∇ L_rec` written out with matmuls, cosines and elementwise products, so
/// the result can itself be differentiated with respect to `layers`.
pub fn recon_grad_explicit<'t, T: Real>(
    spec: &SirenSpec,
    layers: &[LayerVars<'t, T>],
    coords: Var<'t, T>,
    targets: Var<'t, T>,
) -> Result<ReconGrad<'t, T>, SirenError> {
    let act = run_forward(spec, layers, coords, true)?;
    let (pred_shape, target_shape) = (act.output.shape(), targets.shape());
    if pred_shape != target_shape {
        return Err(TensorError::ShapeMismatch { op: "recon_grad_explicit", lhs: pred_shape, rhs: target_shape }.into());
    }
    let count: usize = pred_shape.iter().product();
    let residual = act.output.sub(targets)?;
    let loss = residual.square().mean();
    // d loss / d output
    let mut delta = residual.scale(2.0 / count as f64);
    let mut grads = Vec::with_capacity(layers.len());
    for i in (0..layers.len()).rev() {
        if i + 1 < layers.len() {
            let back = delta.matmul_t(layers[i + 1].weight, false, true)?;
            delta = back.mul(act.cos[i])?;
            if i == 0 {
                delta = delta.scale(spec.omega);
            }
        }
        grads.push(LayerVars { weight: act.inputs[i].matmul_t(delta, true, false)?, bias: delta.sum_leading() });
    }
    grads.reverse();
    Ok(ReconGrad { loss, prediction: act.output, grads })
}
