//! SGD training loop and the per-step loss log.

use std::fmt::Write as _;

use rand::seq::SliceRandom;

use crate::boxes::GroundTruth;
use crate::detector::{normalize_image, Batch, Detector, LossBreakdown, Term};
use crate::error::{Error, Result};
use crate::init::{derive_seed, rng};
use crate::scalar::Scalar;
use crate::tensor::{clip_grad_norm, sgd_step, SgdState, Tape, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Global gradient-norm cap; non-positive disables clipping.
    pub clip_norm: f64,
    /// Linear ramp from 10% of the rate over this many steps.
    pub warmup_steps: usize,
    /// Steps at which the rate is divided by ten.
    pub decay_steps: Vec<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 1000,
            batch_size: 2,
            learning_rate: 0.01,
            momentum: 0.9,
            weight_decay: 1e-4,
            clip_norm: 10.0,
            warmup_steps: 100,
            decay_steps: Vec::new(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be positive".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("train.lr must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config("train.momentum must lie in [0, 1)".into()));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::Config("train.weight_decay must be non-negative".into()));
        }
        Ok(())
    }

    pub fn rate_at(&self, step: usize) -> f64 {
        let mut lr = self.learning_rate;
        if step < self.warmup_steps {
            let f = (step + 1) as f64 / self.warmup_steps as f64;
            lr *= 0.1 + 0.9 * f;
        }
        for &d in &self.decay_steps {
            if step >= d {
                lr *= 0.1;
            }
        }
        lr
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepLog {
    pub step: usize,
    pub learning_rate: f64,
    pub loss: LossBreakdown,
}

/// Deterministic image order: a fresh permutation per epoch.
pub fn batch_indices(n_images: usize, batch_size: usize, step: usize, seed: u64) -> Vec<usize> {
    let mut out = Vec::with_capacity(batch_size);
    for j in 0..batch_size {
        let flat = step * batch_size + j;
        let (epoch, within) = (flat / n_images, flat % n_images);
        let mut perm: Vec<usize> = (0..n_images).collect();
        perm.shuffle(&mut rng(derive_seed(seed, 0x5eed_0000 + epoch as u64)));
        out.push(perm[within]);
    }
    out
}

/// Runs `config.steps` SGD steps. `on_step` sees every step's log; warnings
/// from the decomposition are returned once each.
pub fn train<S: Scalar>(
    detector: &mut Detector<S>,
    images: &[Tensor<f32>],
    gts: &[Vec<GroundTruth>],
    config: &TrainConfig,
    seed: u64,
    mut on_step: impl FnMut(&StepLog) -> Result<()>,
) -> Result<Vec<String>> {
    config.validate()?;
    if images.len() != gts.len() {
        return Err(Error::invalid("train", format!("{} images but {} annotation lists", images.len(), gts.len())));
    }
    if images.is_empty() && config.steps > 0 {
        return Err(Error::invalid("train", "no training images"));
    }
    let mut state = SgdState::new();
    let mut warnings: Vec<String> = Vec::new();
    for step in 0..config.steps {
        let idx = batch_indices(images.len(), config.batch_size, step, seed);
        let batch_images: Vec<Tensor<S>> = idx.iter().map(|&i| normalize_image(&images[i])).collect();
        let batch_gts: Vec<Vec<GroundTruth>> = idx.iter().map(|&i| gts[i].clone()).collect();
        let batch = Batch { images: Tensor::stack(&batch_images)?, gts: &batch_gts };

        let mut tape = Tape::new();
        let pv = tape.bind(&detector.params);
        let mut plan = None;
        let mut plan_rng = rng(derive_seed(seed, 0x91a0_0000 + step as u64));
        let (loss, breakdown) = detector.loss(&mut tape, &pv, &batch, &mut plan, &mut plan_rng)?;
        if !breakdown.total.is_finite() {
            return Err(Error::NonFiniteLoss { step });
        }
        for w in plan.iter().flat_map(|p| p.warnings.iter()) {
            if !warnings.contains(w) {
                warnings.push(w.clone());
            }
        }
        let mut grads = tape.backward(loss)?.params();
        if config.weight_decay > 0.0 {
            let wd = S::of(config.weight_decay);
            for (name, p) in detector.params.iter() {
                if name.ends_with(".b") {
                    continue;
                }
                if let Some(g) = grads.get_mut(name) {
                    for (gv, &pv) in g.data_mut().iter_mut().zip(p.data()) {
                        *gv += wd * pv;
                    }
                }
            }
        }
        if config.clip_norm > 0.0 {
            clip_grad_norm(&mut grads, S::of(config.clip_norm));
        }
        let lr = config.rate_at(step);
        sgd_step(&mut detector.params, &grads, &mut state, S::of(lr), S::of(config.momentum))?;
        if !detector.params.iter().all(|(_, t)| t.is_finite()) {
            return Err(Error::NonFiniteLoss { step });
        }
        on_step(&StepLog { step, learning_rate: lr, loss: breakdown })?;
    }
    Ok(warnings)
}

pub fn loss_log_header(circles: &[usize]) -> String {
    let mut s = String::from("step total");
    for c in circles {
        for t in Term::ALL {
            let _ = write!(s, " c{c}.{t}");
        }
    }
    s
}

pub fn loss_log_line(log: &StepLog, circles: &[usize]) -> String {
    let mut s = format!("{} {:.6}", log.step, log.loss.total);
    for &c in circles {
        for t in Term::ALL {
            let v = log.loss.terms.get(&(c, t)).copied().unwrap_or(0.0);
            let _ = write!(s, " {v:.6}");
        }
    }
    s
}
