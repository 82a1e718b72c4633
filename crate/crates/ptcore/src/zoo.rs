//! Zeroth-order optimizers over phase vectors: coordinate descent (ZCD),
//! three-point coordinate search (ZTP), and gradient estimation with momentum
//! (ZGD), each with best-solution recording.
//!
//! All of them treat the objective as a black box evaluated through PTC port
//! measurements, count every objective call, and keep the probe step inside
//! the control-resolution bounds of the hardware.

use crate::error::{Error, Result};
use crate::rng::{stream_rng, Stream};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

/// Step-size schedule shared by the coordinate optimizers.
///
/// The probe step starts at `init_step`, shrinks by `decay` after every
/// update, and is clamped to `[step_lower, step_upper]` — the coarse and fine
/// phase-control resolutions.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ZooSchedule {
    pub init_step: f64,
    pub decay: f64,
    pub step_upper: f64,
    pub step_lower: f64,
    #[serde(skip, default)]
    current: Option<f64>,
}

/// `2π / (2^min(b_bound, bits) − 1)`: the phase step of the coarser of two
/// control resolutions.
pub fn resolution_step(bound_bits: u32, control_bits: u32) -> f64 {
    let b = bound_bits.min(control_bits).clamp(1, 31);
    2.0 * PI / ((1u64 << b) as f64 - 1.0)
}

impl ZooSchedule {
    /// Schedule from coarse/fine bit bounds and the control bitwidth:
    /// upper bound `2π/(2^min(b_coarse,b)−1)`, lower `2π/(2^min(b_fine,b)−1)`.
    pub fn from_bits(init_step: f64, decay: f64, b_coarse: u32, b_fine: u32, bits: u32) -> Self {
        let upper = resolution_step(b_coarse, bits);
        let lower = resolution_step(b_fine, bits);
        Self {
            init_step: init_step.clamp(lower, upper),
            decay,
            step_upper: upper,
            step_lower: lower,
            current: None,
        }
    }

    /// Defaults matching the learning stages: initial step 0.1 rad, decay
    /// 0.99, coarse bound 4 bits, fine bound at the control bitwidth.
    pub fn for_control_bits(bits: u32) -> Self {
        Self::from_bits(0.1, 0.99, 4, bits, bits)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.decay > 0.0 && self.decay <= 1.0) {
            return Err(Error::Config(format!(
                "decay must be in (0,1], got {}",
                self.decay
            )));
        }
        if !(self.step_lower > 0.0 && self.step_lower <= self.step_upper) {
            return Err(Error::Config(format!(
                "step bounds invalid: [{}, {}]",
                self.step_lower, self.step_upper
            )));
        }
        Ok(())
    }

    pub fn current_step(&self) -> f64 {
        self.current
            .unwrap_or(self.init_step)
            .clamp(self.step_lower, self.step_upper)
    }

    fn decay_once(&mut self) {
        let next = (self.current_step() * self.decay).max(self.step_lower);
        self.current = Some(next);
    }

    pub fn reset(&mut self) {
        self.current = None;
    }
}

/// Best-loss snapshot maintained across iterations.
#[derive(Debug, Clone)]
pub struct BestRecord {
    pub best_loss: f64,
    pub best_params: Vec<f64>,
}

impl BestRecord {
    fn new(loss: f64, params: &[f64]) -> Self {
        Self {
            best_loss: loss,
            best_params: params.to_vec(),
        }
    }

    fn observe(&mut self, loss: f64, params: &[f64]) {
        if loss < self.best_loss {
            self.best_loss = loss;
            self.best_params.copy_from_slice(params);
        }
    }
}

fn check_finite(loss: f64, what: &str, params: &[f64]) -> Result<f64> {
    if loss.is_finite() {
        Ok(loss)
    } else {
        Err(Error::Numerical(format!(
            "{what} returned non-finite loss {loss} at |φ|∞ = {:.3}",
            params.iter().fold(0.0f64, |a, p| a.max(p.abs()))
        )))
    }
}

/// Zeroth-order coordinate descent.
///
/// Each step samples one coordinate, probes `φ + δφ`, keeps the probe if it
/// improved, and otherwise applies `−δφ` unconditionally; best-solution
/// recording hedges the unconditional minus branch.
#[derive(Debug, Clone)]
pub struct ZcdOptimizer {
    schedule: ZooSchedule,
    rng: ChaCha8Rng,
    evals: u64,
    current_loss: Option<f64>,
    best: Option<BestRecord>,
}

impl ZcdOptimizer {
    pub fn new(schedule: ZooSchedule, seed: u64) -> Self {
        Self {
            schedule,
            rng: stream_rng(seed, Stream::Calibrate, &[0x2cd]),
            evals: 0,
            current_loss: None,
            best: None,
        }
    }

    /// One coordinate update. Samples a coordinate uniformly from
    /// `coords` (or all of `phis` when empty).
    pub fn step<F>(&mut self, mut objective: F, phis: &mut [f64], coords: &[usize]) -> Result<()>
    where
        F: FnMut(&[f64]) -> f64,
    {
        let idx = if coords.is_empty() {
            self.rng.random_range(0..phis.len())
        } else {
            coords[self.rng.random_range(0..coords.len())]
        };
        let delta = self.schedule.current_step();

        let current = match self.current_loss {
            Some(l) => l,
            None => {
                self.evals += 1;
                let l = check_finite(objective(phis), "objective", phis)?;
                let rec = BestRecord::new(l, phis);
                self.best.get_or_insert(rec).observe(l, phis);
                l
            }
        };

        phis[idx] += delta;
        self.evals += 1;
        let plus = check_finite(objective(phis), "objective", phis)?;
        if plus < current {
            self.current_loss = Some(plus);
        } else {
            // Unconditional minus branch: revert the probe and step down.
            phis[idx] -= 2.0 * delta;
            self.evals += 1;
            let minus = check_finite(objective(phis), "objective", phis)?;
            self.current_loss = Some(minus);
        }
        let loss = self.current_loss.unwrap();
        self.best
            .get_or_insert_with(|| BestRecord::new(loss, phis))
            .observe(loss, phis);
        self.schedule.decay_once();
        Ok(())
    }

    /// Invalidate the cached loss (e.g. after external phase edits).
    pub fn invalidate(&mut self) {
        self.current_loss = None;
    }

    pub fn evals(&self) -> u64 {
        self.evals
    }

    pub fn best(&self) -> Option<&BestRecord> {
        self.best.as_ref()
    }

    pub fn step_size(&self) -> f64 {
        self.schedule.current_step()
    }
}

/// Zeroth-order three-point coordinate search: evaluates
/// `{φ, φ+δφ, φ−δφ}` on one coordinate and keeps the argmin, so the loss
/// never increases.
#[derive(Debug, Clone)]
pub struct ZtpOptimizer {
    schedule: ZooSchedule,
    rng: ChaCha8Rng,
    evals: u64,
    current_loss: Option<f64>,
    best: Option<BestRecord>,
}

impl ZtpOptimizer {
    pub fn new(schedule: ZooSchedule, seed: u64) -> Self {
        Self {
            schedule,
            rng: stream_rng(seed, Stream::Calibrate, &[0x27b]),
            evals: 0,
            current_loss: None,
            best: None,
        }
    }

    pub fn step<F>(&mut self, mut objective: F, phis: &mut [f64], coords: &[usize]) -> Result<()>
    where
        F: FnMut(&[f64]) -> f64,
    {
        let idx = if coords.is_empty() {
            self.rng.random_range(0..phis.len())
        } else {
            coords[self.rng.random_range(0..coords.len())]
        };
        let delta = self.schedule.current_step();

        let center = match self.current_loss {
            Some(l) => l,
            None => {
                self.evals += 1;
                check_finite(objective(phis), "objective", phis)?
            }
        };
        let base = phis[idx];

        phis[idx] = base + delta;
        self.evals += 1;
        let plus = check_finite(objective(phis), "objective", phis)?;
        phis[idx] = base - delta;
        self.evals += 1;
        let minus = check_finite(objective(phis), "objective", phis)?;

        let (best_phi, best_loss) = if center <= plus && center <= minus {
            (base, center)
        } else if plus <= minus {
            (base + delta, plus)
        } else {
            (base - delta, minus)
        };
        phis[idx] = best_phi;
        self.current_loss = Some(best_loss);
        self.best
            .get_or_insert_with(|| BestRecord::new(best_loss, phis))
            .observe(best_loss, phis);
        self.schedule.decay_once();
        Ok(())
    }

    pub fn invalidate(&mut self) {
        self.current_loss = None;
    }

    pub fn evals(&self) -> u64 {
        self.evals
    }

    pub fn best(&self) -> Option<&BestRecord> {
        self.best.as_ref()
    }
}

/// Zeroth-order gradient descent with momentum.
///
/// The gradient estimate uses symmetric probes along unit Gaussian
/// directions, scaled by the dimension so it is unbiased for linear
/// objectives: `ĝ = (n/2δ)·(L(φ+δu) − L(φ−δu))·u` averaged over samples.
#[derive(Debug, Clone)]
pub struct ZgdOptimizer {
    schedule: ZooSchedule,
    pub momentum: f64,
    pub samples: usize,
    rng: ChaCha8Rng,
    velocity: Vec<f64>,
    evals: u64,
    best: Option<BestRecord>,
}

impl ZgdOptimizer {
    pub fn new(schedule: ZooSchedule, seed: u64, momentum: f64, samples: usize) -> Result<Self> {
        if samples == 0 {
            return Err(Error::Config(
                "ZGD needs at least one gradient sample".into(),
            ));
        }
        Ok(Self {
            schedule,
            momentum,
            samples,
            rng: stream_rng(seed, Stream::Calibrate, &[0x26d]),
            velocity: Vec::new(),
            evals: 0,
            best: None,
        })
    }

    /// Estimate the gradient by symmetric random probes (restoring φ), used
    /// by `step` and exposed for estimator tests.
    pub fn estimate_gradient<F>(&mut self, objective: &mut F, phis: &mut [f64]) -> Result<Vec<f64>>
    where
        F: FnMut(&[f64]) -> f64,
    {
        let n = phis.len();
        let delta = self.schedule.current_step();
        let mut grad = vec![0.0; n];
        for _ in 0..self.samples {
            let mut dir: Vec<f64> = (0..n)
                .map(|_| {
                    <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut self.rng)
                })
                .collect();
            let norm = dir.iter().map(|d| d * d).sum::<f64>().sqrt();
            if norm == 0.0 {
                continue;
            }
            for d in dir.iter_mut() {
                *d /= norm;
            }
            for (p, d) in phis.iter_mut().zip(dir.iter()) {
                *p += delta * d;
            }
            self.evals += 1;
            let plus = check_finite(objective(phis), "objective", phis)?;
            for (p, d) in phis.iter_mut().zip(dir.iter()) {
                *p -= 2.0 * delta * d;
            }
            self.evals += 1;
            let minus = check_finite(objective(phis), "objective", phis)?;
            for (p, d) in phis.iter_mut().zip(dir.iter()) {
                *p += delta * d;
            }
            let coeff = n as f64 * (plus - minus) / (2.0 * delta);
            for (g, d) in grad.iter_mut().zip(dir.iter()) {
                *g += coeff * d;
            }
        }
        for g in grad.iter_mut() {
            *g /= self.samples as f64;
        }
        Ok(grad)
    }

    pub fn step<F>(&mut self, mut objective: F, phis: &mut [f64]) -> Result<()>
    where
        F: FnMut(&[f64]) -> f64,
    {
        if self.velocity.len() != phis.len() {
            self.velocity = vec![0.0; phis.len()];
        }
        let grad = self.estimate_gradient(&mut objective, phis)?;
        let lr = self.schedule.current_step();
        for ((p, v), g) in phis
            .iter_mut()
            .zip(self.velocity.iter_mut())
            .zip(grad.iter())
        {
            *v = self.momentum * *v + g;
            *p -= lr * *v;
        }
        self.evals += 1;
        let loss = check_finite(objective(phis), "objective", phis)?;
        self.best
            .get_or_insert_with(|| BestRecord::new(loss, phis))
            .observe(loss, phis);
        self.schedule.decay_once();
        Ok(())
    }

    pub fn evals(&self) -> u64 {
        self.evals
    }

    pub fn best(&self) -> Option<&BestRecord> {
        self.best.as_ref()
    }
}
