#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rqat::autodiff::{FakeQuantConfig, Tape, Tensor};
use rqat::quant::{QuantSpec, Scheme};
use rqat::Result;

pub const FD_STEP: f64 = 1e-5;
/// Gradients below this magnitude are compared absolutely.
pub const REL_FLOOR: f64 = 1e-6;

pub struct Case {
    pub name: &'static str,
    pub inputs: Vec<(Vec<usize>, Vec<f64>)>,
    /// Which inputs get finite-difference checked.
    pub check: Vec<bool>,
    pub build: Box<dyn for<'t> Fn(&'t Tape, &[Tensor<'t>]) -> Result<Tensor<'t>>>,
}

fn randn(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0) * scale).collect()
}

/// Reduces any output to a scalar with fixed random weights so every output
/// element receives a distinct upstream gradient.
fn scalarize<'t>(tape: &'t Tape, out: Tensor<'t>) -> Result<Tensor<'t>> {
    let shape = out.shape();
    if shape.is_empty() {
        return Ok(out);
    }
    let n = shape.iter().product();
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let w = tape.constant(&shape, randn(&mut rng, n, 1.0))?;
    Ok(out.mul(&w)?.sum())
}

fn loss_at(case: &Case, inputs: &[(Vec<usize>, Vec<f64>)]) -> Result<f64> {
    let tape = Tape::new();
    let leaves = inputs.iter().map(|(s, d)| tape.leaf(s, d.clone())).collect::<Result<Vec<_>>>()?;
    let out = (case.build)(&tape, &leaves)?;
    Ok(scalarize(&tape, out)?.item())
}

/// Largest relative error between analytic and central-difference gradients.
pub fn max_rel_error(case: &Case) -> Result<f64> {
    let tape = Tape::new();
    let leaves = case.inputs.iter().map(|(s, d)| tape.leaf(s, d.clone())).collect::<Result<Vec<_>>>()?;
    let out = (case.build)(&tape, &leaves)?;
    scalarize(&tape, out)?.backward()?;
    let mut worst = 0.0f64;
    for (i, leaf) in leaves.iter().enumerate() {
        if !case.check[i] {
            continue;
        }
        let analytic = leaf.grad().unwrap_or_else(|| vec![0.0; case.inputs[i].1.len()]);
        for j in 0..analytic.len() {
            let mut plus = case.inputs.clone();
            plus[i].1[j] += FD_STEP;
            let mut minus = case.inputs.clone();
            minus[i].1[j] -= FD_STEP;
            let numeric = (loss_at(case, &plus)? - loss_at(case, &minus)?) / (2.0 * FD_STEP);
            let denom = analytic[j].abs().max(numeric.abs()).max(REL_FLOOR);
            worst = worst.max((analytic[j] - numeric).abs() / denom);
        }
    }
    Ok(worst)
}

fn case(
    name: &'static str,
    inputs: Vec<(Vec<usize>, Vec<f64>)>,
    build: impl for<'t> Fn(&'t Tape, &[Tensor<'t>]) -> Result<Tensor<'t>> + 'static,
) -> Case {
    let check = vec![true; inputs.len()];
    Case { name, inputs, check, build: Box::new(build) }
}

/// One case per differentiable primitive plus the activation path through a
/// fake-quantized linear layer.
pub fn primitive_cases() -> Vec<Case> {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut r = |n: usize| randn(&mut rng, n, 1.0);
    let mut cases = vec![
        case("matmul", vec![(vec![3, 4], r(12)), (vec![4, 2], r(8))], |_, x| x[0].matmul(&x[1])),
        case("matmul_t", vec![(vec![3, 4], r(12)), (vec![5, 4], r(20))], |_, x| x[0].matmul_t(&x[1])),
        case("transpose", vec![(vec![3, 4], r(12))], |_, x| x[0].transpose()),
        case("reshape", vec![(vec![3, 4], r(12))], |_, x| x[0].reshape(&[2, 6])),
        case("add", vec![(vec![2, 3], r(6)), (vec![2, 3], r(6))], |_, x| x[0].add(&x[1])),
        case("sub", vec![(vec![2, 3], r(6)), (vec![2, 3], r(6))], |_, x| x[0].sub(&x[1])),
        case("mul", vec![(vec![2, 3], r(6)), (vec![2, 3], r(6))], |_, x| x[0].mul(&x[1])),
        case("scale", vec![(vec![2, 3], r(6))], |_, x| Ok(x[0].scale(-1.7))),
        case("add_scalar", vec![(vec![2, 3], r(6))], |_, x| Ok(x[0].add_scalar(0.3))),
        case("exp", vec![(vec![2, 3], r(6))], |_, x| Ok(x[0].exp())),
        case("silu", vec![(vec![2, 3], r(6))], |_, x| Ok(x[0].silu())),
        case("gather_rows", vec![(vec![4, 3], r(12))], |_, x| x[0].gather_rows(&[2, 0, 2, 3])),
        case("softmax", vec![(vec![3, 5], r(15))], |_, x| Ok(x[0].softmax())),
        case("rms_norm", vec![(vec![3, 4], r(12)), (vec![4], r(4))], |_, x| x[0].rms_norm(&x[1], 1e-6)),
        case("causal_attention", vec![(vec![6, 4], r(24)), (vec![6, 4], r(24)), (vec![6, 4], r(24))], |_, x| {
            x[0].causal_attention(&x[1], &x[2], 2, 2, 3)
        }),
        case("cross_entropy", vec![(vec![4, 5], r(20))], |_, x| x[0].cross_entropy(&[1, 4, 0, 2], &[1.0, 0.0, 1.0, 0.5])),
        case("kl_divergence", vec![(vec![3, 4], r(12)), (vec![3, 4], r(12))], |_, x| {
            x[0].kl_divergence(&x[1], &[1.0, 1.0, 0.0])
        }),
        case("token_log_probs", vec![(vec![3, 4], r(12))], |_, x| x[0].token_log_probs(&[3, 0, 1], 0.7)),
        case("sum", vec![(vec![2, 3], r(6))], |_, x| Ok(x[0].sum())),
        case("mean", vec![(vec![2, 3], r(6))], |_, x| Ok(x[0].mean())),
    ];
    // ratios exp(logp - old) chosen well inside and outside [1-eps, 1+eps]
    // but away from the kinks
    let logp = vec![-1.0, -2.0, -0.5, -1.5];
    let old = vec![-1.05, -2.5, -0.9, -1.2];
    cases.push(case("clipped_surrogate", vec![(vec![4], logp)], move |_, x| {
        x[0].clipped_surrogate(&old, &[1.0, -0.5, 2.0, -1.0], 0.2)
    }));
    let spec = QuantSpec::grouped(3, 4, Scheme::Asymmetric).unwrap();
    let mut fq = case("fake_quant activation path", vec![(vec![3, 8], r(24)), (vec![5, 8], r(40))], move |_, x| {
        x[0].matmul_t(&x[1].fake_quant(&FakeQuantConfig::dynamic(spec))?)
    });
    // the weight side is a straight-through estimate, not a true derivative
    fq.check = vec![true, false];
    cases.push(fq);
    cases
}

/// True when every fake-quant weight gradient element is exactly 0 or exactly
/// the gradient arriving at the quantized weights.
pub fn ste_mask_is_exact() -> Result<bool> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = randn(&mut rng, 24, 1.0);
    let w = randn(&mut rng, 40, 1.0);
    // frozen params taken from a narrower tensor so some weights clip
    let spec = QuantSpec::grouped(2, 4, Scheme::Asymmetric)?;
    let narrow = rqat::linalg::Matrix { rows: 5, cols: 8, data: w.iter().map(|v| v * 0.5).collect() };
    let params = rqat::quant::quantize_grouped(&narrow, &spec)?.params;
    let cfg = FakeQuantConfig::frozen(spec, params);

    let tape = Tape::new();
    let xt = tape.constant(&[3, 8], x.clone())?;
    let wt = tape.leaf(&[5, 8], w)?;
    let wq = wt.fake_quant(&cfg)?;
    let q_values = wq.value();
    scalarize(&tape, xt.matmul_t(&wq)?)?.backward()?;
    let ste = wt.grad().unwrap();

    let tape2 = Tape::new();
    let xt2 = tape2.constant(&[3, 8], x)?;
    let up_leaf = tape2.leaf(&[5, 8], q_values)?;
    scalarize(&tape2, xt2.matmul_t(&up_leaf)?)?.backward()?;
    let upstream = up_leaf.grad().unwrap();

    let mut zeros = 0;
    for (g, u) in ste.iter().zip(&upstream) {
        if *g == 0.0 && *u != 0.0 {
            zeros += 1;
        } else if g != u {
            return Ok(false);
        }
    }
    // the check is vacuous unless some weights actually clip
    Ok(zeros > 0 && zeros < ste.len())
}
