//! Central finite-difference oracle and a catalog of per-op gradient cases.
//!
//! The oracle only ever evaluates forward values; it never touches the
//! reverse rules it is used to check.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::tensor::{Tape, Tensor, TensorError, Var};

/// `||a − b||₂ / max(||a||₂, ||b||₂)`, zero when both are zero.
pub fn relative_error(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    if a.shape() != b.shape() {
        return f64::INFINITY;
    }
    let diff: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let na = a.data().iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.data().iter().map(|x| x * x).sum::<f64>().sqrt();
    let den = na.max(nb);
    if den == 0.0 {
        diff
    } else {
        diff / den
    }
}

/// Central differences of `f` with respect to every element of every input.
pub fn numeric_grad(inputs: &[Tensor<f64>], h: f64, f: impl Fn(&[Tensor<f64>]) -> f64) -> Vec<Tensor<f64>> {
    let mut work = inputs.to_vec();
    let mut out = Vec::with_capacity(inputs.len());
    for t in 0..inputs.len() {
        let mut g = Tensor::zeros(inputs[t].shape());
        for i in 0..inputs[t].len() {
            let x0 = inputs[t].data()[i];
            work[t].data_mut()[i] = x0 + h;
            let fp = f(&work);
            work[t].data_mut()[i] = x0 - h;
            let fm = f(&work);
            work[t].data_mut()[i] = x0;
            g.data_mut()[i] = (fp - fm) / (2.0 * h);
        }
        out.push(g);
    }
    out
}

pub fn random_tensor(shape: &[usize], lo: f64, hi: f64, rng: &mut impl Rng) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).expect("sized")
}

pub type BuildFn = for<'t> fn(&[Var<'t, f64>]) -> Result<Var<'t, f64>, TensorError>;

/// One op under test: input shapes and a graph builder.
pub struct OpCase {
    pub name: &'static str,
    pub shapes: Vec<Vec<usize>>,
    pub build: BuildFn,
}

fn case(name: &'static str, shapes: &[&[usize]], build: BuildFn) -> OpCase {
    OpCase { name, shapes: shapes.iter().map(|s| s.to_vec()).collect(), build }
}

/// Every op kind, including broadcast variants and a shared-input case.
pub fn op_cases() -> Vec<OpCase> {
    vec![
        case("matmul", &[&[3, 4], &[4, 2]], |v| v[0].matmul(v[1])),
        case("matmul_ta", &[&[4, 3], &[4, 2]], |v| v[0].matmul_t(v[1], true, false)),
        case("matmul_tb", &[&[3, 4], &[2, 4]], |v| v[0].matmul_t(v[1], false, true)),
        case("matmul_ta_tb", &[&[4, 3], &[2, 4]], |v| v[0].matmul_t(v[1], true, true)),
        case("add", &[&[3, 4], &[3, 4]], |v| v[0].add(v[1])),
        case("add_broadcast_row", &[&[3, 4], &[4]], |v| v[0].add(v[1])),
        case("add_broadcast_left", &[&[4], &[2, 3, 4]], |v| v[0].add(v[1])),
        case("add_broadcast_scalar", &[&[3, 4], &[1]], |v| v[0].add(v[1])),
        case("sub", &[&[3, 4], &[3, 4]], |v| v[0].sub(v[1])),
        case("sub_broadcast", &[&[3, 4], &[4]], |v| v[0].sub(v[1])),
        case("mul", &[&[3, 4], &[3, 4]], |v| v[0].mul(v[1])),
        case("mul_broadcast", &[&[2, 3, 4], &[3, 4]], |v| v[0].mul(v[1])),
        case("scale", &[&[5]], |v| Ok(v[0].scale(-2.5))),
        case("add_scalar", &[&[5]], |v| Ok(v[0].add_scalar(0.75))),
        case("neg", &[&[2, 2]], |v| Ok(v[0].neg())),
        case("sin", &[&[3, 3]], |v| Ok(v[0].sin())),
        case("cos", &[&[3, 3]], |v| Ok(v[0].cos())),
        case("sin_cos", &[&[3, 3]], |v| {
            let (s, c) = v[0].sin_cos();
            s.mul(c)?.add(c)
        }),
        case("square", &[&[3, 3]], |v| Ok(v[0].square())),
        case("exp", &[&[3, 3]], |v| Ok(v[0].exp())),
        case("gelu", &[&[4, 3]], |v| Ok(v[0].scale(3.0).gelu())),
        case("softmax", &[&[3, 5]], |v| Ok(v[0].scale(2.0).softmax())),
        case("normalize", &[&[3, 5]], |v| Ok(v[0].normalize(1e-5))),
        case("layer_norm", &[&[3, 5], &[5], &[5]], |v| v[0].layer_norm(v[1], v[2], 1e-5)),
        case("sum", &[&[3, 4]], |v| Ok(v[0].sum())),
        case("mean", &[&[3, 4]], |v| Ok(v[0].mean())),
        case("sum_leading", &[&[2, 3, 4]], |v| Ok(v[0].sum_leading())),
        case("mean_leading", &[&[5, 4]], |v| Ok(v[0].mean_leading())),
        case("concat_axis0", &[&[2, 3], &[4, 3]], |v| Var::concat(&[v[0], v[1]], 0)),
        case("concat_axis1", &[&[2, 3], &[2, 1], &[2, 2]], |v| Var::concat(&[v[0], v[1], v[2]], 1)),
        case("reshape", &[&[2, 6]], |v| v[0].reshape(&[3, 4])?.matmul(v[0].reshape(&[4, 3])?)),
        case("gather_rows", &[&[4, 3]], |v| v[0].gather_rows(&[2, 0, 2, 3])),
        case("narrow_last", &[&[3, 6]], |v| v[0].narrow_last(2, 3)),
        case("flat_slice", &[&[10]], |v| v[0].flat_slice(3, &[2, 3])),
        case("transpose", &[&[3, 4]], |v| v[0].transpose()),
        case("transpose_batched", &[&[2, 3, 4]], |v| v[0].transpose()),
        case("cross_entropy", &[&[4, 3]], |v| v[0].scale(2.0).cross_entropy(&[0, 2, 1, 2])),
        case("cross_entropy_vector", &[&[5]], |v| v[0].cross_entropy(&[3])),
        case("mse", &[&[3, 2], &[3, 2]], |v| v[0].mse(v[1])),
        case("linear_mse", &[&[3, 2], &[5, 3], &[5, 2]], |v| v[1].matmul(v[0])?.mse(v[2])),
        case("shared_input", &[&[3, 3]], |v| v[0].mul(v[0])?.add(v[0].sin())),
    ]
}

/// Analytic and numeric gradients of `sum(op(x) ⊙ r)` for a random
/// projection `r`; returns the worst relative error over the inputs.
pub fn check_case(case: &OpCase, seed: u64, h: f64) -> Result<f64, TensorError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inputs: Vec<Tensor<f64>> = case.shapes.iter().map(|s| random_tensor(s, -1.0, 1.0, &mut rng)).collect();
    let out_shape = {
        let tape = Tape::new();
        let vars: Vec<_> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        (case.build)(&vars)?.shape()
    };
    let proj = random_tensor(&out_shape, -1.0, 1.0, &mut rng);
    let eval = |xs: &[Tensor<f64>]| -> f64 {
        let tape = Tape::new();
        let vars: Vec<_> = xs.iter().map(|t| tape.constant(t.clone())).collect();
        let out = (case.build)(&vars).expect("valid case").value();
        out.data().iter().zip(proj.data()).map(|(a, b)| a * b).sum()
    };

    let tape = Tape::new();
    let vars: Vec<_> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = (case.build)(&vars)?;
    let loss = out.mul(tape.constant(proj.clone()))?.sum();
    let grads = tape.backward(loss)?;
    let numeric = numeric_grad(&inputs, h, eval);
    Ok(vars.iter().zip(&numeric).map(|(v, n)| relative_error(&grads.wrt(*v), n)).fold(0.0, f64::max))
}
