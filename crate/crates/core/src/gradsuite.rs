//! The gradient-check suite: every differentiable op on several random
//! shapes, plus the full reconstruction loss of a micro model with respect
//! to each of its parameters. Double precision throughout.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::model::{mae_loss, ArchConfig, Mae, MaeModel, TARGET_EPS};
use crate::params::Bound;
use crate::patch::make_mask_plan;
use crate::tensor::{grad_check, grad_check_per_input, Tensor};

pub const OP_TOLERANCE: f64 = 1e-6;
pub const LOSS_TOLERANCE: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub max_error: f64,
    pub tolerance: f64,
    pub cases: usize,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_error < self.tolerance
    }
}

type Case = (Vec<(Vec<usize>, Vec<f64>)>, Box<dyn Fn(&[Tensor<f64>]) -> Result<Tensor<f64>>>);

fn values(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Vec<f64> {
    (0..shape.iter().product::<usize>()).map(|_| rng.random_range(lo..hi)).collect()
}

fn input(rng: &mut ChaCha8Rng, shape: &[usize]) -> (Vec<usize>, Vec<f64>) {
    (shape.to_vec(), values(rng, shape, -1.0, 1.0))
}

/// Sum of the output weighted by a fixed random tensor, so every output
/// element contributes a distinct gradient.
fn probe(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::constant(shape, values(rng, shape, -1.0, 1.0)).expect("probe shape")
}

fn weighted(out: Tensor<f64>, w: &Tensor<f64>) -> Result<Tensor<f64>> {
    Ok(out.mul(w)?.sum())
}

fn unary_cases<F>(rng: &mut ChaCha8Rng, shapes: &[&[usize]], f: F) -> Vec<Case>
where
    F: Fn(&Tensor<f64>) -> Result<Tensor<f64>> + Clone + 'static,
{
    shapes
        .iter()
        .map(|s| {
            let x = input(rng, s);
            let probe_shape = f(&Tensor::constant(s, x.1.clone()).unwrap()).unwrap().shape().to_vec();
            let w = probe(rng, &probe_shape);
            let f = f.clone();
            let case: Case = (vec![x], Box::new(move |t: &[Tensor<f64>]| weighted(f(&t[0])?, &w)));
            case
        })
        .collect()
}

fn binary_cases<F>(rng: &mut ChaCha8Rng, pairs: &[(&[usize], &[usize])], f: F) -> Vec<Case>
where
    F: Fn(&Tensor<f64>, &Tensor<f64>) -> Result<Tensor<f64>> + Clone + 'static,
{
    pairs
        .iter()
        .map(|(a, b)| {
            let xa = input(rng, a);
            let xb = input(rng, b);
            let out_shape = f(
                &Tensor::constant(a, xa.1.clone()).unwrap(),
                &Tensor::constant(b, xb.1.clone()).unwrap(),
            )
            .unwrap()
            .shape()
            .to_vec();
            let w = probe(rng, &out_shape);
            let f = f.clone();
            let case: Case = (vec![xa, xb], Box::new(move |t: &[Tensor<f64>]| weighted(f(&t[0], &t[1])?, &w)));
            case
        })
        .collect()
}

fn run(name: &str, cases: Vec<Case>, tolerance: f64) -> Result<CheckResult> {
    let n = cases.len();
    let mut worst = 0.0f64;
    for (inputs, f) in cases {
        worst = worst.max(grad_check(f, &inputs)?);
    }
    Ok(CheckResult {
        name: name.to_string(),
        max_error: worst,
        tolerance,
        cases: n,
    })
}

/// One result per op, each over at least three random shapes.
pub fn op_checks(seed: u64) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = &mut rng;
    let bin: [(&[usize], &[usize]); 3] = [(&[3, 4], &[3, 4]), (&[2, 3, 4], &[4]), (&[5, 1], &[1, 3])];
    let shapes: [&[usize]; 3] = [&[7], &[3, 4], &[2, 3, 5]];
    let mut out = Vec::new();

    out.push(run("add", binary_cases(r, &bin, |a, b| a.add(b)), OP_TOLERANCE)?);
    out.push(run("sub", binary_cases(r, &bin, |a, b| a.sub(b)), OP_TOLERANCE)?);
    out.push(run("mul", binary_cases(r, &bin, |a, b| a.mul(b)), OP_TOLERANCE)?);
    out.push(run("scale", unary_cases(r, &shapes, |x| Ok(x.scale(-1.7))), OP_TOLERANCE)?);
    out.push(run("gelu", unary_cases(r, &[&[17], &[3, 4], &[2, 2, 3]], |x| Ok(x.scale(3.0).gelu())), OP_TOLERANCE)?);
    out.push(run("sigmoid", unary_cases(r, &shapes, |x| Ok(x.scale(3.0).sigmoid())), OP_TOLERANCE)?);
    out.push(run("sum", unary_cases(r, &shapes, |x| Ok(x.mul(x)?.sum())), OP_TOLERANCE)?);
    out.push(run("mean", unary_cases(r, &shapes, |x| Ok(x.mul(x)?.mean())), OP_TOLERANCE)?);
    out.push(run("mean_axis", unary_cases(r, &[&[4, 3], &[2, 3, 5], &[2, 3, 5]], |x| x.mean_axis(x.rank() - 1)), OP_TOLERANCE)?);
    out.push(run("variance_axis", unary_cases(r, &[&[4, 3], &[2, 3, 5], &[3, 6]], |x| x.variance_axis(0)), OP_TOLERANCE)?);
    out.push(run("softmax", unary_cases(r, &[&[5], &[3, 4], &[2, 3, 4]], |x| x.scale(2.0).softmax(x.rank() - 1)), OP_TOLERANCE)?);
    out.push(run("softmax_inner_axis", unary_cases(r, &[&[3, 4], &[2, 3, 4], &[4, 2]], |x| x.softmax(0)), OP_TOLERANCE)?);
    out.push(run("layer_norm", unary_cases(r, &[&[6], &[3, 5], &[2, 3, 4]], |x| x.layer_norm(x.rank() - 1, 1e-6)), OP_TOLERANCE)?);
    out.push(run(
        "mse",
        binary_cases(r, &[(&[4], &[4]), (&[3, 4], &[3, 4]), (&[2, 2, 3], &[2, 2, 3])], |a, b| a.mse(b)),
        OP_TOLERANCE,
    )?);
    out.push(run("reshape", unary_cases(r, &[&[6], &[3, 4], &[2, 3, 2]], |x| x.reshape(&[x.len()])), OP_TOLERANCE)?);
    out.push(run("transpose", unary_cases(r, &[&[3, 4], &[2, 3, 5], &[1, 4, 2]], |x| x.transpose()), OP_TOLERANCE)?);
    out.push(run("narrow", unary_cases(r, &[&[6, 3], &[2, 5, 4], &[7]], |x| x.narrow(x.rank() - 1, 1, 2)), OP_TOLERANCE)?);
    out.push(run(
        "concat",
        binary_cases(r, &[(&[2, 3], &[4, 3]), (&[3, 2], &[3, 5]), (&[2, 2, 3], &[1, 2, 3])], |a, b| {
            let axis = (0..a.rank()).find(|&i| a.shape()[i] != b.shape()[i]).unwrap_or(0);
            Tensor::concat(&[a.clone(), b.clone()], axis)
        }),
        OP_TOLERANCE,
    )?);
    out.push(run(
        "matmul",
        binary_cases(r, &[(&[5, 7], &[7, 3]), (&[1, 4], &[4, 1]), (&[3, 2], &[2, 6])], |a, b| a.matmul(b)),
        OP_TOLERANCE,
    )?);

    let mut gathers: Vec<Case> = Vec::new();
    let mut scatters: Vec<Case> = Vec::new();
    for (n, d, k) in [(5, 3, 7), (4, 2, 4), (6, 1, 3)] {
        let idx: Vec<usize> = (0..k).map(|_| r.random_range(0..n)).collect();
        let x = input(r, &[n, d]);
        let w = probe(r, &[k, d]);
        let i2 = idx.clone();
        gathers.push((vec![x], Box::new(move |t: &[Tensor<f64>]| weighted(t[0].gather_rows(&i2)?, &w))));
        let y = input(r, &[k, d]);
        let w = probe(r, &[n, d]);
        scatters.push((vec![y], Box::new(move |t: &[Tensor<f64>]| weighted(t[0].scatter_rows(&idx, n)?, &w))));
    }
    out.push(run("gather_rows", gathers, OP_TOLERANCE)?);
    out.push(run("scatter_rows", scatters, OP_TOLERANCE)?);

    out.push(run(
        "conv_transpose2d",
        binary_cases(
            r,
            &[(&[2, 3, 3], &[2, 3, 2, 2]), (&[2, 1, 2, 2], &[1, 2, 2, 2]), (&[1, 3, 1, 2], &[3, 1, 2, 2])],
            |x, w| x.conv_transpose2d(w, 2),
        ),
        OP_TOLERANCE,
    )?);
    out.push(run(
        "conv1x1",
        binary_cases(
            r,
            &[(&[1, 3, 2, 2], &[3, 1]), (&[2, 2, 3, 1], &[2, 4]), (&[2, 4, 2, 3], &[4, 2])],
            |x, w| x.conv1x1(w),
        ),
        OP_TOLERANCE,
    )?);

    let mut ce: Vec<Case> = Vec::new();
    let mut bce: Vec<Case> = Vec::new();
    for (b, k) in [(1, 2), (3, 4), (5, 3)] {
        let labels: Vec<usize> = (0..b).map(|_| r.random_range(0..k)).collect();
        let x = (vec![b, k], values(r, &[b, k], -2.0, 2.0));
        ce.push((vec![x], Box::new(move |t: &[Tensor<f64>]| t[0].cross_entropy(&labels))));
        let targets: Vec<f64> = (0..b * k).map(|_| f64::from(r.random_range(0..2u8))).collect();
        let z = (vec![b, k], values(r, &[b, k], -3.0, 3.0));
        bce.push((vec![z], Box::new(move |t: &[Tensor<f64>]| t[0].bce_with_logits(&targets))));
    }
    out.push(run("cross_entropy", ce, OP_TOLERANCE)?);
    out.push(run("bce_with_logits", bce, OP_TOLERANCE)?);
    Ok(out)
}

/// Reconstruction loss of a micro model on a 2-image batch at ratio 0.5;
/// one maximum error per parameter tensor.
pub fn mae_loss_errors(seed: u64) -> Result<Vec<(String, f64)>> {
    let cfg = ArchConfig::micro();
    let model = MaeModel::<f64>::init(cfg, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    // perturb away from the zero/one initial values so every path is exercised
    let mut params = model.params.clone();
    for (_, p) in params.iter_mut() {
        for v in &mut p.data {
            *v += rng.random_range(-0.3..0.3);
        }
    }
    let px = cfg.patch.num_pixels();
    let images = Tensor::constant(&[2, 1, 8, 8], values(&mut rng, &[2 * px], 0.0, 1.0))?;
    let n = cfg.num_patches();
    let plans = vec![make_mask_plan(n, 0.5, &mut rng)?, make_mask_plan(n, 0.5, &mut rng)?];
    let names: Vec<String> = params.names().map(str::to_string).collect();
    let inputs: Vec<(Vec<usize>, Vec<f64>)> = params.iter().map(|(_, p)| (p.shape.clone(), p.data.clone())).collect();
    let errors = grad_check_per_input(
        |t| {
            let bound = Bound::from_tensors(names.iter().cloned().zip(t.iter().cloned()));
            let mae = Mae::new(&cfg, &bound);
            let pred = mae.decode(&mae.encode(&images, &plans)?, &plans)?;
            mae_loss(&pred, &images, &plans, &cfg, TARGET_EPS)
        },
        &inputs,
    )?;
    Ok(names.into_iter().zip(errors).collect())
}

pub fn mae_loss_check(seed: u64) -> Result<CheckResult> {
    let errors = mae_loss_errors(seed)?;
    Ok(CheckResult {
        name: "mae_loss".into(),
        max_error: errors.iter().map(|e| e.1).fold(0.0, f64::max),
        tolerance: LOSS_TOLERANCE,
        cases: errors.len(),
    })
}

pub fn run_suite(seed: u64) -> Result<Vec<CheckResult>> {
    let mut v = op_checks(seed)?;
    v.push(mae_loss_check(seed)?);
    Ok(v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::inject_backward_fault;

    #[test]
    fn every_op_passes() {
        for r in op_checks(1).unwrap() {
            assert!(r.passed(), "{} error {}", r.name, r.max_error);
            assert!(r.cases >= 3, "{}", r.name);
        }
    }

    #[test]
    fn corrupted_rule_is_caught() {
        inject_backward_fault(Some("matmul"));
        let res = op_checks(1);
        inject_backward_fault(None);
        let failing: Vec<String> = res.unwrap().into_iter().filter(|r| !r.passed()).map(|r| r.name).collect();
        assert_eq!(failing, vec!["matmul".to_string()]);
    }
}
