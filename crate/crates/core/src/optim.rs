//! AdamW with decoupled weight decay, warmup + cosine schedule, and the
//! epoch loop shared by pre-training and head training.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::params::{Bound, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScheduleKind {
    Cosine,
    Constant,
}

impl std::str::FromStr for ScheduleKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cosine" => Ok(ScheduleKind::Cosine),
            "constant" => Ok(ScheduleKind::Constant),
            other => Err(Error::Config(format!("unknown schedule {other:?} (expected cosine or constant)"))),
        }
    }
}

impl std::fmt::Display for ScheduleKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ScheduleKind::Cosine => "cosine",
            ScheduleKind::Constant => "constant",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimConfig {
    /// Peak learning rate (no batch-size scaling).
    pub base_lr: f64,
    pub batch_size: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    /// May be fractional; converted to whole steps.
    pub warmup_epochs: f64,
    pub schedule: ScheduleKind,
    pub seed: u64,
}

impl OptimConfig {
    /// Pre-training defaults at desk scale: cosine with 5% warmup.
    pub fn pretrain(epochs: usize) -> Self {
        Self {
            base_lr: 1e-3,
            batch_size: 8,
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.05,
            epochs,
            warmup_epochs: 0.05 * epochs as f64,
            schedule: ScheduleKind::Cosine,
            seed: 0,
        }
    }

    /// Head training defaults: constant rate, no weight decay.
    pub fn head(epochs: usize) -> Self {
        Self {
            base_lr: 1e-3,
            batch_size: 8,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            epochs,
            warmup_epochs: 0.0,
            schedule: ScheduleKind::Constant,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.base_lr.is_nan() || self.base_lr <= 0.0 {
            return Err(Error::Config(format!("base_lr must be positive, got {}", self.base_lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.warmup_epochs < 0.0 || self.warmup_epochs > self.epochs as f64 {
            return Err(Error::Config(format!(
                "warmup_epochs {} must lie in [0, epochs={}]",
                self.warmup_epochs, self.epochs
            )));
        }
        Ok(())
    }

    pub fn steps_per_epoch(&self, samples: usize) -> usize {
        samples.div_ceil(self.batch_size)
    }

    pub fn schedule(&self, samples: usize) -> LrSchedule {
        let spe = self.steps_per_epoch(samples);
        LrSchedule {
            base_lr: self.base_lr,
            warmup_steps: (self.warmup_epochs * spe as f64).round() as usize,
            total_steps: self.epochs * spe,
            kind: self.schedule,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LrSchedule {
    pub base_lr: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
    pub kind: ScheduleKind,
}

impl LrSchedule {
    /// Linear warmup from 0, then half-cosine reaching 0 at `total_steps`.
    pub fn lr_at(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            return self.base_lr * step as f64 / self.warmup_steps as f64;
        }
        match self.kind {
            ScheduleKind::Constant => self.base_lr,
            ScheduleKind::Cosine => {
                let span = self.total_steps.saturating_sub(self.warmup_steps).max(1);
                let progress = ((step - self.warmup_steps) as f64 / span as f64).min(1.0);
                0.5 * self.base_lr * (1.0 + (std::f64::consts::PI * progress).cos())
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl From<&OptimConfig> for AdamHyper {
    fn from(c: &OptimConfig) -> Self {
        Self {
            beta1: c.beta1,
            beta2: c.beta2,
            eps: c.eps,
            weight_decay: c.weight_decay,
        }
    }
}

/// First and second moment buffers for one parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct Moments<T> {
    pub m: Vec<T>,
    pub v: Vec<T>,
}

impl<T: Scalar> Moments<T> {
    pub fn zeros(n: usize) -> Self {
        Self {
            m: vec![T::zero(); n],
            v: vec![T::zero(); n],
        }
    }
}

/// One AdamW update; `t` is the 1-based step count used for bias
/// correction. Decay is skipped when `decay` is false.
pub fn adamw_step<T: Scalar>(
    params: &mut [T],
    grads: &[T],
    state: &mut Moments<T>,
    t: usize,
    lr: f64,
    hp: &AdamHyper,
    decay: bool,
) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() || state.v.len() != params.len() {
        return Err(Error::Contract(format!(
            "adamw_step: {} params, {} grads, {}/{} moments",
            params.len(),
            grads.len(),
            state.m.len(),
            state.v.len()
        )));
    }
    let (b1, b2) = (T::of(hp.beta1), T::of(hp.beta2));
    let c1 = T::of(1.0 - hp.beta1.powi(t as i32));
    let c2 = T::of(1.0 - hp.beta2.powi(t as i32));
    let lr_t = T::of(lr);
    let shrink = T::of(1.0 - lr * hp.weight_decay);
    let eps = T::of(hp.eps);
    for (((p, &g), m), v) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut())
        .zip(state.v.iter_mut())
    {
        if decay {
            *p *= shrink;
        }
        *m = b1 * *m + (T::one() - b1) * g;
        *v = b2 * *v + (T::one() - b2) * g * g;
        let mhat = *m / c1;
        let vhat = *v / c2;
        *p -= lr_t * mhat / (vhat.sqrt() + eps);
    }
    Ok(())
}

/// AdamW over a named parameter store. Weight decay applies to tensors of
/// rank >= 2 only.
#[derive(Debug, Clone)]
pub struct AdamW<T> {
    pub hp: AdamHyper,
    t: usize,
    state: BTreeMap<String, Moments<T>>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(hp: AdamHyper) -> Self {
        Self {
            hp,
            t: 0,
            state: BTreeMap::new(),
        }
    }

    pub fn steps_taken(&self) -> usize {
        self.t
    }

    /// Updates every parameter that has a gradient in `grads`.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &BTreeMap<String, Vec<T>>, lr: f64) -> Result<()> {
        self.t += 1;
        for (name, g) in grads {
            let Some(p) = store.get_mut(name) else {
                return Err(Error::Contract(format!("gradient for unknown parameter {name}")));
            };
            let decay = p.shape.len() >= 2;
            let state = self
                .state
                .entry(name.clone())
                .or_insert_with(|| Moments::zeros(p.data.len()));
            adamw_step(&mut p.data, g, state, self.t, lr, &self.hp, decay)?;
        }
        Ok(())
    }
}

/// `step<TAB>lr<TAB>loss` records.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunLog {
    pub entries: Vec<(usize, f64, f64)>,
}

impl RunLog {
    pub fn render(&self) -> String {
        let mut s = String::new();
        for (step, lr, loss) in &self.entries {
            writeln!(s, "{step}\t{lr}\t{loss}").unwrap();
        }
        s
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.render()).map_err(|e| Error::io(path, e))
    }

    pub fn losses(&self) -> Vec<f64> {
        self.entries.iter().map(|e| e.2).collect()
    }
}

/// Owns the optimizer state and schedule for one training run.
#[derive(Debug, Clone)]
pub struct Trainer<T> {
    pub cfg: OptimConfig,
    pub schedule: LrSchedule,
    opt: AdamW<T>,
    step: usize,
    pub log: RunLog,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(cfg: OptimConfig, samples: usize) -> Result<Self> {
        cfg.validate()?;
        if samples == 0 {
            return Err(Error::Config("training set is empty".into()));
        }
        let schedule = cfg.schedule(samples);
        Ok(Self {
            opt: AdamW::new(AdamHyper::from(&cfg)),
            schedule,
            cfg,
            step: 0,
            log: RunLog::default(),
        })
    }

    pub fn step(&self) -> usize {
        self.step
    }

    /// One pass over `samples` items in a seeded random order, in batches of
    /// `batch_size` (the last batch may be short). `batch_loss` builds the
    /// loss graph for a batch and returns it with the bound parameters to
    /// update. Returns the mean batch loss.
    pub fn train_epoch<R, F>(
        &mut self,
        store: &mut ParamStore<T>,
        samples: usize,
        rng: &mut R,
        mut batch_loss: F,
    ) -> Result<f64>
    where
        R: Rng + ?Sized,
        F: FnMut(&ParamStore<T>, &[usize], &mut R) -> Result<(Tensor<T>, Bound<T>)>,
    {
        if samples == 0 {
            return Err(Error::Config("training set is empty".into()));
        }
        let mut order: Vec<usize> = (0..samples).collect();
        order.shuffle(rng);
        let mut total = 0.0;
        let mut batches = 0usize;
        for batch in order.chunks(self.cfg.batch_size) {
            let (loss, bound) = batch_loss(store, batch, rng)?;
            let value = loss.item()?.as_f64();
            if !value.is_finite() {
                return Err(Error::NumericAbort {
                    step: self.step,
                    loss: value,
                });
            }
            loss.backward()?;
            let grads = bound.grads();
            drop(loss);
            let lr = self.schedule.lr_at(self.step);
            self.opt.step(store, &grads, lr)?;
            self.log.entries.push((self.step, lr, value));
            self.step += 1;
            total += value;
            batches += 1;
        }
        Ok(total / batches as f64)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::Param;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn hp(wd: f64) -> AdamHyper {
        AdamHyper {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: wd,
        }
    }

    #[test]
    fn zero_grads_leave_params_unchanged() {
        let mut p = vec![0.3f64, -1.2];
        let mut st = Moments::zeros(2);
        for t in 1..=3 {
            adamw_step(&mut p, &[0.0, 0.0], &mut st, t, 0.1, &hp(0.0), true).unwrap();
        }
        assert_eq!(p, vec![0.3, -1.2]);
    }

    #[test]
    fn two_step_scalar_trajectory() {
        // reference values computed independently in Python:
        // p0 = 1.0, grads 0.5 then -0.3, lr 0.1, wd 0.01
        let mut p = vec![1.0f64];
        let mut st = Moments::zeros(1);
        adamw_step(&mut p, &[0.5], &mut st, 1, 0.1, &hp(0.01), true).unwrap();
        assert!((p[0] - 0.899000002).abs() < 1e-10, "{}", p[0]);
        adamw_step(&mut p, &[-0.3], &mut st, 2, 0.1, &hp(0.01), true).unwrap();
        assert!((p[0] - 0.8789511989397751).abs() < 1e-10, "{}", p[0]);
    }

    #[test]
    fn decay_shrinks_magnitude() {
        let mut p = vec![2.0f64, -3.0];
        let mut st = Moments::zeros(2);
        let mut prev = p.clone();
        for t in 1..=5 {
            adamw_step(&mut p, &[0.0, 0.0], &mut st, t, 0.1, &hp(0.05), true).unwrap();
            for (a, b) in p.iter().zip(&prev) {
                assert!(a.abs() < b.abs());
            }
            prev = p.clone();
        }
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut p = vec![1.0f64, 2.0];
        let mut st = Moments::zeros(2);
        assert!(adamw_step(&mut p, &[1.0], &mut st, 1, 0.1, &hp(0.0), false).is_err());
    }

    #[test]
    fn schedule_endpoints() {
        let s = LrSchedule {
            base_lr: 1e-3,
            warmup_steps: 10,
            total_steps: 200,
            kind: ScheduleKind::Cosine,
        };
        assert_eq!(s.lr_at(0), 0.0);
        assert_eq!(s.lr_at(10), 1e-3);
        assert!((s.lr_at(9) - 0.9e-3).abs() < 1e-15);
        assert!(s.lr_at(200) < 1e-6 * 1e-3);
        // continuity across the warmup boundary
        let eps = (s.lr_at(10) - s.lr_at(9)).abs();
        assert!(eps <= 1e-3 / 10.0 + 1e-12);
        let c = LrSchedule {
            kind: ScheduleKind::Constant,
            warmup_steps: 0,
            ..s
        };
        assert_eq!(c.lr_at(0), 1e-3);
        assert_eq!(c.lr_at(199), 1e-3);
    }

    #[test]
    fn config_validation() {
        let mut c = OptimConfig::pretrain(10);
        c.validate().unwrap();
        c.warmup_epochs = 11.0;
        assert!(c.validate().is_err());
        let mut c = OptimConfig::head(1);
        c.base_lr = 0.0;
        assert!(c.validate().is_err());
    }

    fn quadratic_run(seed: u64) -> (Vec<f64>, RunLog) {
        let mut store = ParamStore::new();
        store.insert("w", Param::new(vec![1, 2], vec![1.0f64, -1.0]).unwrap());
        let mut cfg = OptimConfig::head(2);
        cfg.batch_size = 3;
        let mut trainer = Trainer::new(cfg, 7).unwrap();
        let targets: Vec<f64> = (0..7).map(|i| i as f64 * 0.1).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut losses = Vec::new();
        for _ in 0..2 {
            let l = trainer
                .train_epoch(&mut store, 7, &mut rng, |s, batch, _| {
                    let b = s.bind(true);
                    let w = b.get("w")?.sum();
                    let t: f64 = batch.iter().map(|&i| targets[i]).sum::<f64>() / batch.len() as f64;
                    let d = w.sub(&Tensor::scalar(t))?;
                    Ok((d.mul(&d)?, b))
                })
                .unwrap();
            losses.push(l);
        }
        (losses, trainer.log)
    }

    #[test]
    fn epochs_are_deterministic_and_keep_partial_batch() {
        let (a, log_a) = quadratic_run(3);
        let (b, log_b) = quadratic_run(3);
        assert_eq!(a, b);
        assert_eq!(log_a.render(), log_b.render());
        // 7 samples in batches of 3 -> 3 steps per epoch
        assert_eq!(log_a.entries.len(), 6);
    }

    #[test]
    fn single_batch_epoch_reports_that_batch() {
        let mut store = ParamStore::new();
        store.insert("w", Param::new(vec![1], vec![2.0f64]).unwrap());
        let mut trainer = Trainer::new(OptimConfig::head(1), 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let l = trainer
            .train_epoch(&mut store, 4, &mut rng, |s, _, _| {
                let b = s.bind(true);
                Ok((b.get("w")?.scale(3.0).sum(), b))
            })
            .unwrap();
        assert_eq!(l, 6.0);
        assert_eq!(trainer.log.entries[0].2, 6.0);
    }

    #[test]
    fn nan_loss_aborts_with_step() {
        let mut store = ParamStore::new();
        store.insert("w", Param::new(vec![1], vec![2.0f64]).unwrap());
        let mut trainer = Trainer::new(OptimConfig::head(1), 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let err = trainer
            .train_epoch(&mut store, 4, &mut rng, |s, _, _| {
                let b = s.bind(true);
                Ok((b.get("w")?.scale(f64::NAN).sum(), b))
            })
            .unwrap_err();
        assert!(matches!(err, Error::NumericAbort { step: 0, .. }));
    }
}
