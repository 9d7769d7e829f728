//! Linear, layer-norm and pre-norm transformer block built from tensor ops.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::Result;
use crate::params::{Bound, Param, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const LN_EPS: f64 = 1e-6;
pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Init {
    /// Normal(0, 0.02) truncated at two standard deviations.
    TruncNormal,
    Normal,
    Zeros,
    Ones,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

impl ParamSpec {
    pub fn new(name: String, shape: Vec<usize>, init: Init) -> Self {
        Self { name, shape, init }
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

pub fn linear_specs(prefix: &str, fan_in: usize, fan_out: usize) -> Vec<ParamSpec> {
    vec![
        ParamSpec::new(format!("{prefix}.weight"), vec![fan_in, fan_out], Init::TruncNormal),
        ParamSpec::new(format!("{prefix}.bias"), vec![fan_out], Init::Zeros),
    ]
}

pub fn norm_specs(prefix: &str, dim: usize) -> Vec<ParamSpec> {
    vec![
        ParamSpec::new(format!("{prefix}.gain"), vec![dim], Init::Ones),
        ParamSpec::new(format!("{prefix}.offset"), vec![dim], Init::Zeros),
    ]
}

pub fn block_specs(prefix: &str, dim: usize, mlp_ratio: usize) -> Vec<ParamSpec> {
    let hidden = dim * mlp_ratio;
    let mut v = norm_specs(&format!("{prefix}.norm1"), dim);
    v.extend(linear_specs(&format!("{prefix}.attn.qkv"), dim, 3 * dim));
    v.extend(linear_specs(&format!("{prefix}.attn.proj"), dim, dim));
    v.extend(norm_specs(&format!("{prefix}.norm2"), dim));
    v.extend(linear_specs(&format!("{prefix}.mlp.fc1"), dim, hidden));
    v.extend(linear_specs(&format!("{prefix}.mlp.fc2"), hidden, dim));
    v
}

pub fn mask_token_spec(name: &str, dim: usize) -> ParamSpec {
    ParamSpec::new(name.to_string(), vec![dim], Init::Normal)
}

fn trunc_normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    loop {
        let z: f64 = StandardNormal.sample(rng);
        if z.abs() <= 2.0 {
            return z * INIT_STD;
        }
    }
}

/// Materializes specs in name order so the draw sequence is a function of
/// the set of `ParamSpec`s alone.
pub fn init_store<T: Scalar, R: Rng + ?Sized>(specs: &[ParamSpec], rng: &mut R) -> ParamStore<T> {
    let mut sorted: Vec<&ParamSpec> = specs.iter().collect();
    sorted.sort_by(|a, b| a.name.cmp(&b.name));
    let mut store = ParamStore::new();
    for s in sorted {
        let n = s.numel();
        let data: Vec<T> = match s.init {
            Init::TruncNormal => (0..n).map(|_| T::of(trunc_normal(rng))).collect(),
            Init::Normal => (0..n)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(rng);
                    T::of(z * INIT_STD)
                })
                .collect(),
            Init::Zeros => vec![T::zero(); n],
            Init::Ones => vec![T::one(); n],
        };
        store.insert(s.name.clone(), Param::new(s.shape.clone(), data).expect("spec shape"));
    }
    store
}

pub fn linear<T: Scalar>(x: &Tensor<T>, p: &Bound<T>, prefix: &str) -> Result<Tensor<T>> {
    x.matmul(p.get(&format!("{prefix}.weight"))?)?
        .add(p.get(&format!("{prefix}.bias"))?)
}

pub fn norm<T: Scalar>(x: &Tensor<T>, p: &Bound<T>, prefix: &str) -> Result<Tensor<T>> {
    x.layer_norm(x.rank() - 1, T::of(LN_EPS))?
        .mul(p.get(&format!("{prefix}.gain"))?)?
        .add(p.get(&format!("{prefix}.offset"))?)
}

/// Multi-head self-attention over `batch` independent sequences of
/// `tokens` rows each; `x` is `[batch * tokens, dim]`.
pub fn attention<T: Scalar>(
    x: &Tensor<T>,
    p: &Bound<T>,
    prefix: &str,
    batch: usize,
    tokens: usize,
    heads: usize,
) -> Result<Tensor<T>> {
    let dim = x.shape()[1];
    let hd = dim / heads;
    let scale = T::one() / T::of(hd as f64).sqrt();
    let qkv = linear(x, p, &format!("{prefix}.qkv"))?;
    let mut per_sample = Vec::with_capacity(batch);
    for b in 0..batch {
        let rows = qkv.narrow(0, b * tokens, tokens)?;
        let mut outs = Vec::with_capacity(heads);
        for h in 0..heads {
            let q = rows.narrow(1, h * hd, hd)?;
            let k = rows.narrow(1, dim + h * hd, hd)?;
            let v = rows.narrow(1, 2 * dim + h * hd, hd)?;
            let att = q.matmul(&k.transpose()?)?.scale(scale).softmax(1)?;
            outs.push(att.matmul(&v)?);
        }
        per_sample.push(Tensor::concat(&outs, 1)?);
    }
    let merged = Tensor::concat(&per_sample, 0)?;
    linear(&merged, p, &format!("{prefix}.proj"))
}

pub fn block<T: Scalar>(
    x: &Tensor<T>,
    p: &Bound<T>,
    prefix: &str,
    batch: usize,
    tokens: usize,
    heads: usize,
) -> Result<Tensor<T>> {
    let h = norm(x, p, &format!("{prefix}.norm1"))?;
    let x = x.add(&attention(&h, p, &format!("{prefix}.attn"), batch, tokens, heads)?)?;
    let h = norm(&x, p, &format!("{prefix}.norm2"))?;
    let h = linear(&h, p, &format!("{prefix}.mlp.fc1"))?.gelu();
    let h = linear(&h, p, &format!("{prefix}.mlp.fc2"))?;
    x.add(&h)
}
