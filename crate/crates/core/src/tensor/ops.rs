//! Differentiable operations.
//!
//! Forward rules live on [`Var`]; the matching reverse rules are in
//! [`backprop`]. Broadcasting is limited to a right operand whose shape is a
//! suffix of the left operand's shape, or a one-element right operand.

use super::array::{gemm, numel, Tensor};
use super::tape::{Node, Var};
use super::{Real, TensorError};

pub(crate) enum Op<T: Real> {
    Leaf,
    Const,
    MatMul {
        a: usize,
        b: usize,
        ta: bool,
        tb: bool,
    },
    Add {
        a: usize,
        b: usize,
    },
    Sub {
        a: usize,
        b: usize,
    },
    Mul {
        a: usize,
        b: usize,
    },
    Scale {
        a: usize,
        c: T,
    },
    GradScale {
        a: usize,
        c: T,
    },
    Shift {
        a: usize,
    },
    /// `cos` names a node holding `cos(a)` when one was computed alongside.
    Sin {
        a: usize,
        cos: Option<usize>,
    },
    Cos {
        a: usize,
        sin: Option<usize>,
    },
    Square(usize),
    Gelu(usize),
    Exp(usize),
    Softmax(usize),
    Normalize {
        a: usize,
        inv_std: Vec<T>,
    },
    Sum(usize),
    Mean(usize),
    SumLeading(usize),
    Concat {
        inputs: Vec<usize>,
        axis: usize,
    },
    Reshape(usize),
    GatherRows {
        a: usize,
        index: Vec<usize>,
    },
    NarrowLast {
        a: usize,
        start: usize,
    },
    FlatSlice {
        a: usize,
        offset: usize,
    },
    Transpose(usize),
    CrossEntropy {
        a: usize,
        probs: Tensor<T>,
        labels: Vec<usize>,
    },
}

/// Gradient flowing into one input: either a full tensor or a block of
/// values at a flat offset (slices of large parameter vectors).
pub(crate) enum Contribution<T: Real> {
    Dense(Tensor<T>),
    At { offset: usize, values: Vec<T> },
}

fn broadcastable(a: &[usize], b: &[usize]) -> bool {
    numel(b) == 1 || (b.len() <= a.len() && a.ends_with(b))
}

/// `f(a[i], b[i mod len(b)])`.
fn broadcast_zip<T: Real>(a: &[T], b: &[T], f: impl Fn(T, T) -> T) -> Vec<T> {
    if a.len() == b.len() {
        return a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect();
    }
    let mut out = Vec::with_capacity(a.len());
    if b.is_empty() {
        return out;
    }
    for chunk in a.chunks_exact(b.len()) {
        out.extend(chunk.iter().zip(b).map(|(&x, &y)| f(x, y)));
    }
    out
}

/// Sums `g` over repeats of a period-`nb` operand.
fn reduce_period<T: Real>(g: &[T], nb: usize) -> Vec<T> {
    if g.len() == nb {
        return g.to_vec();
    }
    let mut out = vec![T::zero(); nb];
    for chunk in g.chunks_exact(nb) {
        for (o, &v) in out.iter_mut().zip(chunk) {
            *o += v;
        }
    }
    out
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

#[inline]
fn gelu<T: Real>(x: T) -> T {
    let c = T::lit(GELU_C);
    let a = T::lit(GELU_A);
    let half = T::lit(0.5);
    half * x * (T::one() + (c * (x + a * x * x * x)).tanh())
}

#[inline]
fn gelu_grad<T: Real>(x: T) -> T {
    let c = T::lit(GELU_C);
    let a = T::lit(GELU_A);
    let half = T::lit(0.5);
    let t = (c * (x + a * x * x * x)).tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + T::lit(3.0) * a * x * x)
}

// `add`, `mul` and friends return `Result`, so the std operator traits do not fit.
#[allow(clippy::should_implement_trait)]
impl<'t, T: Real> Var<'t, T> {
    fn unary(self, op: Op<T>, f: impl Fn(&Tensor<T>) -> Tensor<T>) -> Var<'t, T> {
        let (value, rg) = {
            let nodes = self.tape.nodes();
            let n = &nodes[self.id];
            (f(&n.value), n.requires_grad)
        };
        self.tape.push(value, op, rg)
    }

    fn binary(self, other: Var<'t, T>, name: &'static str) -> Result<(Var<'t, T>, Var<'t, T>), TensorError> {
        self.tape.check_owner(other)?;
        let (sa, sb) = (self.shape(), other.shape());
        if broadcastable(&sa, &sb) {
            Ok((self, other))
        } else {
            Err(TensorError::ShapeMismatch { op: name, lhs: sa, rhs: sb })
        }
    }

    fn elementwise(self, other: Var<'t, T>, op: Op<T>, f: impl Fn(T, T) -> T) -> Var<'t, T> {
        let (value, rg) = {
            let nodes = self.tape.nodes();
            let (a, b) = (&nodes[self.id], &nodes[other.id]);
            let data = broadcast_zip(a.value.data(), b.value.data(), f);
            (Tensor::from_parts(a.value.shape().to_vec(), data), a.requires_grad || b.requires_grad)
        };
        self.tape.push(value, op, rg)
    }

    /// Elementwise sum; `other` may broadcast over leading dims. Commutes, so
    /// the smaller operand may be on either side.
    pub fn add(self, other: Var<'t, T>) -> Result<Var<'t, T>, TensorError> {
        let (a, b) = match self.binary(other, "add") {
            Ok(p) => p,
            Err(e) => other.binary(self, "add").map_err(|_| e)?,
        };
        Ok(a.elementwise(b, Op::Add { a: a.id, b: b.id }, |x, y| x + y))
    }

    pub fn sub(self, other: Var<'t, T>) -> Result<Var<'t, T>, TensorError> {
        let (a, b) = self.binary(other, "sub")?;
        Ok(a.elementwise(b, Op::Sub { a: a.id, b: b.id }, |x, y| x - y))
    }

    /// Elementwise product with the same broadcasting as [`Var::add`].
    pub fn mul(self, other: Var<'t, T>) -> Result<Var<'t, T>, TensorError> {
        let (a, b) = match self.binary(other, "mul") {
            Ok(p) => p,
            Err(e) => other.binary(self, "mul").map_err(|_| e)?,
        };
        Ok(a.elementwise(b, Op::Mul { a: a.id, b: b.id }, |x, y| x * y))
    }

    pub fn scale(self, c: f64) -> Var<'t, T> {
        let c = T::lit(c);
        self.unary(Op::Scale { a: self.id, c }, |t| t.map(|v| v * c))
    }

    /// Identity on the forward pass; scales the incoming gradient by `c`.
    pub fn grad_scale(self, c: f64) -> Var<'t, T> {
        let c = T::lit(c);
        self.unary(Op::GradScale { a: self.id, c }, |t| t.clone())
    }

    pub fn add_scalar(self, c: f64) -> Var<'t, T> {
        let c = T::lit(c);
        self.unary(Op::Shift { a: self.id }, |t| t.map(|v| v + c))
    }

    pub fn neg(self) -> Var<'t, T> {
        self.scale(-1.0)
    }

    pub fn sin(self) -> Var<'t, T> {
        self.unary(Op::Sin { a: self.id, cos: None }, |t| t.map(T::sin))
    }

    pub fn cos(self) -> Var<'t, T> {
        self.unary(Op::Cos { a: self.id, sin: None }, |t| t.map(T::cos))
    }

    /// `(sin x, cos x)`; each reuses the other's value in the reverse pass.
    pub fn sin_cos(self) -> (Var<'t, T>, Var<'t, T>) {
        let (sin, cos, rg) = {
            let nodes = self.tape.nodes();
            let n = &nodes[self.id];
            let (mut s, mut c) = (Vec::with_capacity(n.value.len()), Vec::with_capacity(n.value.len()));
            for &x in n.value.data() {
                let (sv, cv) = x.sin_cos();
                s.push(sv);
                c.push(cv);
            }
            let shape = n.value.shape().to_vec();
            (Tensor::from_parts(shape.clone(), s), Tensor::from_parts(shape, c), n.requires_grad)
        };
        let base = self.tape.len();
        let s = self.tape.push(sin, Op::Sin { a: self.id, cos: Some(base + 1) }, rg);
        let c = self.tape.push(cos, Op::Cos { a: self.id, sin: Some(base) }, rg);
        (s, c)
    }

    pub fn square(self) -> Var<'t, T> {
        self.unary(Op::Square(self.id), |t| t.map(|v| v * v))
    }

    pub fn exp(self) -> Var<'t, T> {
        self.unary(Op::Exp(self.id), |t| t.map(T::exp))
    }

    /// GELU, tanh approximation.
    pub fn gelu(self) -> Var<'t, T> {
        self.unary(Op::Gelu(self.id), |t| t.map(gelu))
    }

    /// Softmax over the last axis.
    pub fn softmax(self) -> Var<'t, T> {
        self.unary(Op::Softmax(self.id), |t| {
            let m = *t.shape().last().unwrap_or(&1);
            let mut out = t.data().to_vec();
            for row in out.chunks_exact_mut(m.max(1)) {
                let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
                let mut s = T::zero();
                for v in row.iter_mut() {
                    *v = (*v - mx).exp();
                    s += *v;
                }
                for v in row.iter_mut() {
                    *v = *v / s;
                }
            }
            Tensor::from_parts(t.shape().to_vec(), out)
        })
    }

    /// Zero-mean, unit-variance normalization over the last axis.
    pub fn normalize(self, eps: f64) -> Var<'t, T> {
        let (value, inv_std, rg) = {
            let nodes = self.tape.nodes();
            let n = &nodes[self.id];
            let t = &n.value;
            let m = *t.shape().last().unwrap_or(&1);
            let mut out = t.data().to_vec();
            let mut inv = Vec::with_capacity(out.len() / m.max(1));
            let mf = T::lit(m as f64);
            for row in out.chunks_exact_mut(m.max(1)) {
                let mean = row.iter().copied().sum::<T>() / mf;
                let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / mf;
                let r = T::one() / (var + T::lit(eps)).sqrt();
                for v in row.iter_mut() {
                    *v = (*v - mean) * r;
                }
                inv.push(r);
            }
            (Tensor::from_parts(t.shape().to_vec(), out), inv, n.requires_grad)
        };
        self.tape.push(value, Op::Normalize { a: self.id, inv_std }, rg)
    }

    /// Layer normalization over the last axis with learnable gain and bias.
    pub fn layer_norm(self, gain: Var<'t, T>, bias: Var<'t, T>, eps: f64) -> Result<Var<'t, T>, TensorError> {
        self.normalize(eps).mul(gain)?.add(bias)
    }

    /// Sum of all elements (rank-0 result).
    pub fn sum(self) -> Var<'t, T> {
        self.unary(Op::Sum(self.id), |t| Tensor::scalar(t.sum()))
    }

    /// Mean of all elements (rank-0 result).
    pub fn mean(self) -> Var<'t, T> {
        self.unary(Op::Mean(self.id), |t| Tensor::scalar(t.sum() / T::lit(t.len().max(1) as f64)))
    }

    /// Sums over every axis but the last.
    pub fn sum_leading(self) -> Var<'t, T> {
        self.unary(Op::SumLeading(self.id), |t| {
            let m = *t.shape().last().unwrap_or(&1);
            Tensor::vector(reduce_period(t.data(), m))
        })
    }

    /// Mean over every axis but the last.
    pub fn mean_leading(self) -> Var<'t, T> {
        let shape = self.shape();
        let rows = numel(&shape) / shape.last().copied().unwrap_or(1).max(1);
        self.sum_leading().scale(1.0 / rows.max(1) as f64)
    }

    /// `op(self)·op(other)` for matrices, with optional transposes.
    pub fn matmul_t(self, other: Var<'t, T>, ta: bool, tb: bool) -> Result<Var<'t, T>, TensorError> {
        self.tape.check_owner(other)?;
        let (value, rg) = {
            let nodes = self.tape.nodes();
            let (a, b) = (&nodes[self.id], &nodes[other.id]);
            let (ar, ac) = a.value.dims2("matmul")?;
            let (br, bc) = b.value.dims2("matmul")?;
            let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
            let (k2, n) = if tb { (bc, br) } else { (br, bc) };
            if k != k2 {
                return Err(TensorError::ShapeMismatch { op: "matmul", lhs: a.value.shape().to_vec(), rhs: b.value.shape().to_vec() });
            }
            let mut out = vec![T::zero(); m * n];
            gemm(ta, tb, &a.value, &b.value, &mut out, T::zero());
            (Tensor::from_parts(vec![m, n], out), a.requires_grad || b.requires_grad)
        };
        Ok(self.tape.push(value, Op::MatMul { a: self.id, b: other.id, ta, tb }, rg))
    }

    pub fn matmul(self, other: Var<'t, T>) -> Result<Var<'t, T>, TensorError> {
        self.matmul_t(other, false, false)
    }

    /// Swaps the last two axes.
    pub fn transpose(self) -> Result<Var<'t, T>, TensorError> {
        let shape = self.shape();
        if shape.len() < 2 {
            return Err(TensorError::InvalidArgument { op: "transpose", detail: format!("rank {} < 2", shape.len()) });
        }
        Ok(self.unary(Op::Transpose(self.id), |t| transpose_last2(t)))
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t, T>, TensorError> {
        let cur = self.shape();
        if numel(&cur) != numel(shape) {
            return Err(TensorError::ShapeMismatch { op: "reshape", lhs: cur, rhs: shape.to_vec() });
        }
        Ok(self.unary(Op::Reshape(self.id), |t| Tensor::from_parts(shape.to_vec(), t.data().to_vec())))
    }

    /// Selects rows along axis 0 (duplicates allowed).
    pub fn gather_rows(self, index: &[usize]) -> Result<Var<'t, T>, TensorError> {
        let shape = self.shape();
        let Some(&rows) = shape.first() else {
            return Err(TensorError::InvalidArgument { op: "gather_rows", detail: "rank-0 input".into() });
        };
        if let Some(&bad) = index.iter().find(|&&i| i >= rows) {
            return Err(TensorError::InvalidArgument { op: "gather_rows", detail: format!("row {bad} out of range for {rows} rows") });
        }
        let index = index.to_vec();
        let rs = numel(&shape[1..]);
        let mut out_shape = shape.clone();
        out_shape[0] = index.len();
        let value = self.with_value(|t| {
            let mut data = Vec::with_capacity(index.len() * rs);
            for &i in &index {
                data.extend_from_slice(&t.data()[i * rs..(i + 1) * rs]);
            }
            Tensor::from_parts(out_shape, data)
        });
        let rg = self.requires_grad();
        Ok(self.tape.push(value, Op::GatherRows { a: self.id, index }, rg))
    }

    /// Columns `start..start+len` of the last axis.
    pub fn narrow_last(self, start: usize, len: usize) -> Result<Var<'t, T>, TensorError> {
        let shape = self.shape();
        let m = shape.last().copied().unwrap_or(0);
        if start + len > m {
            return Err(TensorError::InvalidArgument {
                op: "narrow_last",
                detail: format!("range {}..{} exceeds last dim {}", start, start + len, m),
            });
        }
        let mut out_shape = shape.clone();
        *out_shape.last_mut().unwrap() = len;
        Ok(self.unary(Op::NarrowLast { a: self.id, start }, |t| {
            let mut data = Vec::with_capacity(numel(&out_shape));
            for row in t.data().chunks_exact(m.max(1)) {
                data.extend_from_slice(&row[start..start + len]);
            }
            Tensor::from_parts(out_shape.clone(), data)
        }))
    }

    /// Contiguous block of the flattened value at `offset`, viewed as `shape`.
    pub fn flat_slice(self, offset: usize, shape: &[usize]) -> Result<Var<'t, T>, TensorError> {
        let total = numel(&self.shape());
        let n = numel(shape);
        if offset + n > total {
            return Err(TensorError::InvalidArgument {
                op: "flat_slice",
                detail: format!("{}..{} exceeds {} elements", offset, offset + n, total),
            });
        }
        Ok(self.unary(Op::FlatSlice { a: self.id, offset }, |t| Tensor::from_parts(shape.to_vec(), t.data()[offset..offset + n].to_vec())))
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(parts: &[Var<'t, T>], axis: usize) -> Result<Var<'t, T>, TensorError> {
        let first = *parts.first().ok_or(TensorError::InvalidArgument { op: "concat", detail: "no inputs".into() })?;
        let tape = first.tape;
        let s0 = first.shape();
        if axis >= s0.len() {
            return Err(TensorError::InvalidArgument { op: "concat", detail: format!("axis {axis} for rank {}", s0.len()) });
        }
        let mut out_shape = s0.clone();
        out_shape[axis] = 0;
        for p in parts {
            tape.check_owner(*p)?;
            let s = p.shape();
            let compatible = s.len() == s0.len() && s.iter().zip(&s0).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(TensorError::ShapeMismatch { op: "concat", lhs: s0, rhs: s });
            }
            out_shape[axis] += s[axis];
        }
        let (value, rg) = {
            let nodes = tape.nodes();
            let outer = numel(&s0[..axis]);
            let mut data = Vec::with_capacity(numel(&out_shape));
            let rg = parts.iter().any(|p| nodes[p.id].requires_grad);
            for o in 0..outer {
                for p in parts {
                    let v = &nodes[p.id].value;
                    let inner = numel(&v.shape()[axis..]);
                    data.extend_from_slice(&v.data()[o * inner..(o + 1) * inner]);
                }
            }
            (Tensor::from_parts(out_shape, data), rg)
        };
        Ok(tape.push(value, Op::Concat { inputs: parts.iter().map(|p| p.id).collect(), axis }, rg))
    }

    /// Mean softmax cross-entropy of `[batch, classes]` logits (or a single
    /// `[classes]` vector) against integer labels.
    pub fn cross_entropy(self, labels: &[usize]) -> Result<Var<'t, T>, TensorError> {
        let shape = self.shape();
        let (b, c) = match shape.as_slice() {
            [c] => (1, *c),
            [b, c] => (*b, *c),
            _ => return Err(TensorError::InvalidArgument { op: "cross_entropy", detail: format!("logits shape {shape:?}") }),
        };
        if labels.len() != b || labels.iter().any(|&l| l >= c) {
            return Err(TensorError::InvalidArgument {
                op: "cross_entropy",
                detail: format!("{} labels for {b} rows of {c} classes", labels.len()),
            });
        }
        let (probs, loss) = self.with_value(|t| {
            let mut probs = t.data().to_vec();
            let mut loss = T::zero();
            for (row, &y) in probs.chunks_exact_mut(c).zip(labels) {
                let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
                let lse = row.iter().map(|&v| (v - mx).exp()).sum::<T>().ln() + mx;
                loss += lse - row[y];
                for v in row.iter_mut() {
                    *v = (*v - lse).exp();
                }
            }
            (Tensor::from_parts(vec![b, c], probs), loss / T::lit(b as f64))
        });
        let rg = self.requires_grad();
        Ok(self.tape.push(Tensor::scalar(loss), Op::CrossEntropy { a: self.id, probs, labels: labels.to_vec() }, rg))
    }

    /// Mean squared difference against `target` (same shape).
    pub fn mse(self, target: Var<'t, T>) -> Result<Var<'t, T>, TensorError> {
        let (sa, sb) = (self.shape(), target.shape());
        if sa != sb {
            return Err(TensorError::ShapeMismatch { op: "mse", lhs: sa, rhs: sb });
        }
        Ok(self.sub(target)?.square().mean())
    }

    /// Same value, cut from the graph.
    pub fn detach(self) -> Var<'t, T> {
        self.tape.constant(self.value())
    }
}

fn transpose_last2<T: Real>(t: &Tensor<T>) -> Tensor<T> {
    let s = t.shape();
    let (r, c) = (s[s.len() - 2], s[s.len() - 1]);
    let mut out_shape = s.to_vec();
    let n = out_shape.len();
    out_shape.swap(n - 2, n - 1);
    let mut data = Vec::with_capacity(t.len());
    for block in t.data().chunks_exact((r * c).max(1)) {
        for j in 0..c {
            for i in 0..r {
                data.push(block[i * c + j]);
            }
        }
    }
    Tensor::from_parts(out_shape, data)
}

fn zip_map<T: Real>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::from_parts(a.shape().to_vec(), data)
}

/// Reverse rule: cotangents for each input of `op`, given the op's output
/// value and its cotangent `g`.
pub(crate) fn backprop<T: Real>(op: &Op<T>, out: &Tensor<T>, g: &Tensor<T>, nodes: &[Node<T>]) -> Vec<(usize, Contribution<T>)> {
    use Contribution::Dense;
    let val = |id: usize| &nodes[id].value;
    match op {
        Op::Leaf | Op::Const => Vec::new(),
        Op::MatMul { a, b, ta, tb } => {
            let (av, bv) = (val(*a), val(*b));
            let mut res = Vec::with_capacity(2);
            if nodes[*a].requires_grad {
                let mut da = vec![T::zero(); av.len()];
                if !ta {
                    gemm(false, !tb, g, bv, &mut da, T::zero());
                } else {
                    gemm(*tb, true, bv, g, &mut da, T::zero());
                }
                res.push((*a, Dense(Tensor::from_parts(av.shape().to_vec(), da))));
            }
            if nodes[*b].requires_grad {
                let mut db = vec![T::zero(); bv.len()];
                if !tb {
                    gemm(!ta, false, av, g, &mut db, T::zero());
                } else {
                    gemm(true, *ta, g, av, &mut db, T::zero());
                }
                res.push((*b, Dense(Tensor::from_parts(bv.shape().to_vec(), db))));
            }
            res
        }
        Op::Add { a, b } => {
            let nb = val(*b).len();
            let gb = Tensor::from_parts(val(*b).shape().to_vec(), reduce_period(g.data(), nb));
            vec![(*a, Dense(g.clone())), (*b, Dense(gb))]
        }
        Op::Sub { a, b } => {
            let nb = val(*b).len();
            let gb = reduce_period(g.data(), nb).into_iter().map(|v| -v).collect();
            vec![(*a, Dense(g.clone())), (*b, Dense(Tensor::from_parts(val(*b).shape().to_vec(), gb)))]
        }
        Op::Mul { a, b } => {
            let (av, bv) = (val(*a), val(*b));
            let nb = bv.len();
            let ga = broadcast_zip(g.data(), bv.data(), |x, y| x * y);
            let prod: Vec<T> = g.data().iter().zip(av.data()).map(|(&x, &y)| x * y).collect();
            vec![
                (*a, Dense(Tensor::from_parts(av.shape().to_vec(), ga))),
                (*b, Dense(Tensor::from_parts(bv.shape().to_vec(), reduce_period(&prod, nb)))),
            ]
        }
        Op::Scale { a, c } | Op::GradScale { a, c } => vec![(*a, Dense(g.map(|v| v * *c)))],
        Op::Shift { a } => vec![(*a, Dense(g.clone()))],
        Op::Sin { a, cos: Some(c) } => vec![(*a, Dense(zip_map(g, val(*c), |gv, y| gv * y)))],
        Op::Sin { a, cos: None } => vec![(*a, Dense(zip_map(g, val(*a), |gv, x| gv * x.cos())))],
        Op::Cos { a, sin: Some(sn) } => vec![(*a, Dense(zip_map(g, val(*sn), |gv, y| -gv * y)))],
        Op::Cos { a, sin: None } => vec![(*a, Dense(zip_map(g, val(*a), |gv, x| -gv * x.sin())))],
        Op::Square(a) => vec![(*a, Dense(zip_map(g, val(*a), |gv, x| gv * (x + x))))],
        Op::Exp(a) => vec![(*a, Dense(zip_map(g, out, |gv, y| gv * y)))],
        Op::Gelu(a) => vec![(*a, Dense(zip_map(g, val(*a), |gv, x| gv * gelu_grad(x))))],
        Op::Softmax(a) => {
            let m = *out.shape().last().unwrap_or(&1);
            let mut dx = Vec::with_capacity(out.len());
            for (y, gy) in out.data().chunks_exact(m.max(1)).zip(g.data().chunks_exact(m.max(1))) {
                let dot: T = y.iter().zip(gy).map(|(&p, &q)| p * q).sum();
                dx.extend(y.iter().zip(gy).map(|(&p, &q)| p * (q - dot)));
            }
            vec![(*a, Dense(Tensor::from_parts(out.shape().to_vec(), dx)))]
        }
        Op::Normalize { a, inv_std } => {
            let m = *out.shape().last().unwrap_or(&1);
            let mf = T::lit(m as f64);
            let mut dx = Vec::with_capacity(out.len());
            for ((y, gy), &r) in out.data().chunks_exact(m.max(1)).zip(g.data().chunks_exact(m.max(1))).zip(inv_std) {
                let mg = gy.iter().copied().sum::<T>() / mf;
                let mgy = y.iter().zip(gy).map(|(&p, &q)| p * q).sum::<T>() / mf;
                dx.extend(y.iter().zip(gy).map(|(&p, &q)| r * (q - mg - p * mgy)));
            }
            vec![(*a, Dense(Tensor::from_parts(out.shape().to_vec(), dx)))]
        }
        Op::Sum(a) => {
            let gv = g.data()[0];
            vec![(*a, Dense(Tensor::full(val(*a).shape(), gv)))]
        }
        Op::Mean(a) => {
            let n = val(*a).len().max(1);
            let gv = g.data()[0] / T::lit(n as f64);
            vec![(*a, Dense(Tensor::full(val(*a).shape(), gv)))]
        }
        Op::SumLeading(a) => {
            let av = val(*a);
            let mut data = Vec::with_capacity(av.len());
            for _ in 0..av.len() / g.len().max(1) {
                data.extend_from_slice(g.data());
            }
            vec![(*a, Dense(Tensor::from_parts(av.shape().to_vec(), data)))]
        }
        Op::Concat { inputs, axis } => {
            let outer = numel(&out.shape()[..*axis]);
            let mut parts: Vec<Vec<T>> = inputs.iter().map(|&i| Vec::with_capacity(val(i).len())).collect();
            let mut pos = 0;
            for _ in 0..outer {
                for (k, &i) in inputs.iter().enumerate() {
                    let inner = numel(&val(i).shape()[*axis..]);
                    parts[k].extend_from_slice(&g.data()[pos..pos + inner]);
                    pos += inner;
                }
            }
            inputs.iter().zip(parts).map(|(&i, d)| (i, Dense(Tensor::from_parts(val(i).shape().to_vec(), d)))).collect()
        }
        Op::Reshape(a) => vec![(*a, Dense(Tensor::from_parts(val(*a).shape().to_vec(), g.data().to_vec())))],
        Op::GatherRows { a, index } => {
            let av = val(*a);
            let rs = numel(&av.shape()[1..]);
            let mut dx = vec![T::zero(); av.len()];
            for (k, &i) in index.iter().enumerate() {
                for (d, &v) in dx[i * rs..(i + 1) * rs].iter_mut().zip(&g.data()[k * rs..(k + 1) * rs]) {
                    *d += v;
                }
            }
            vec![(*a, Dense(Tensor::from_parts(av.shape().to_vec(), dx)))]
        }
        Op::NarrowLast { a, start } => {
            let av = val(*a);
            let m = *av.shape().last().unwrap_or(&1);
            let len = *out.shape().last().unwrap_or(&1);
            let mut dx = vec![T::zero(); av.len()];
            for (row, gr) in dx.chunks_exact_mut(m.max(1)).zip(g.data().chunks_exact(len.max(1))) {
                row[*start..*start + len].copy_from_slice(gr);
            }
            vec![(*a, Dense(Tensor::from_parts(av.shape().to_vec(), dx)))]
        }
        Op::FlatSlice { a, offset } => vec![(*a, Contribution::At { offset: *offset, values: g.data().to_vec() })],
        Op::Transpose(a) => vec![(*a, Dense(transpose_last2(g)))],
        Op::CrossEntropy { a, probs, labels } => {
            let c = *probs.shape().last().unwrap();
            let scale = g.data()[0] / T::lit(labels.len() as f64);
            let mut dx = probs.data().to_vec();
            for (row, &y) in dx.chunks_exact_mut(c).zip(labels) {
                row[y] -= T::one();
                for v in row.iter_mut() {
                    *v *= scale;
                }
            }
            vec![(*a, Dense(Tensor::from_parts(val(*a).shape().to_vec(), dx)))]
        }
    }
}
