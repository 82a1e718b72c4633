//! Circuit non-ideality: the pipeline from programmed to effective phases.
//!
//! A programmed phase vector Φ passes through control quantization Q, a
//! per-shifter multiplicative gain Γ, a thermal-crosstalk coupling Ω between
//! chain-adjacent MZIs, and finally a hidden additive bias Φ_b frozen at
//! fabrication time: `effective = Ω·(Γ·Q(Φ)) + Φ_b`. The Σ attenuator path is
//! monitored hardware: it quantizes at its own (finer) bitwidth and carries no
//! hidden bias.
//!
//! Gain and crosstalk act on the signed minimal actuation of each shifter
//! (the phase wrapped to (−π, π]): a rotation of 2π−ε is driven as −ε, so the
//! proportional error tracks the magnitude actually applied.
//!
//! The Σ attenuator row is driven closed-loop against its monitor, which
//! nulls static gain and coupling errors; only its control resolution
//! survives, so the Σ pipeline is quantization alone.

use crate::error::{Error, Result};
use crate::rng::{stream_rng, Stream};
use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

/// Bitwidths at or above this are treated as continuous control (no
/// quantization, no wrap).
pub const CONTINUOUS_BITS: u32 = 32;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct NoiseConfig {
    /// Control resolution for the U and V* rotation phases.
    pub bitwidth_unitary: u32,
    /// Control resolution for the Σ attenuator phases.
    pub bitwidth_sigma: u32,
    /// Std of the multiplicative gain error per phase shifter.
    pub gamma_std: f64,
    /// Mutual coupling coefficient between chain-adjacent MZIs.
    pub crosstalk_factor: f64,
    /// Whether hidden fabrication phase bias U(0, 2π) is present.
    pub phase_bias_enabled: bool,
    /// Seed for the frozen per-device draws.
    pub seed: u64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self {
            bitwidth_unitary: 8,
            bitwidth_sigma: 16,
            gamma_std: 0.002,
            crosstalk_factor: 0.005,
            phase_bias_enabled: false,
            seed: 0,
        }
    }
}

impl NoiseConfig {
    /// Everything off: continuous control, unit gain, no coupling, no bias.
    pub fn noiseless() -> Self {
        Self {
            bitwidth_unitary: CONTINUOUS_BITS,
            bitwidth_sigma: CONTINUOUS_BITS,
            gamma_std: 0.0,
            crosstalk_factor: 0.0,
            phase_bias_enabled: false,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=32).contains(&self.bitwidth_unitary) || !(1..=32).contains(&self.bitwidth_sigma) {
            return Err(Error::Config(format!(
                "bitwidths must lie in [1, 32], got unitary={} sigma={}",
                self.bitwidth_unitary, self.bitwidth_sigma
            )));
        }
        if self.gamma_std < 0.0 || !self.gamma_std.is_finite() {
            return Err(Error::Config(format!(
                "gamma_std must be ≥ 0, got {}",
                self.gamma_std
            )));
        }
        if !(0.0..1.0).contains(&self.crosstalk_factor) {
            return Err(Error::Config(format!(
                "crosstalk_factor must lie in [0, 1), got {}",
                self.crosstalk_factor
            )));
        }
        Ok(())
    }
}

/// Uniform b-bit quantization of a phase onto [0, 2π].
///
/// `Q(φ) = Round((φ mod 2π) / step) · step` with `step = 2π/(2^b − 1)` and
/// rounding half away from zero. Bitwidths ≥ 32 pass through untouched.
pub fn quantize_phase(phi: f64, bits: u32) -> f64 {
    if bits >= CONTINUOUS_BITS {
        return phi;
    }
    let step = 2.0 * PI / ((1u64 << bits) as f64 - 1.0);
    let mut p = phi % (2.0 * PI);
    if p < 0.0 {
        p += 2.0 * PI;
    }
    // f64::round is round-half-away-from-zero.
    (p / step).round() * step
}

/// Wrap a phase to the signed minimal actuation in (−π, π].
pub fn wrap_signed(phi: f64) -> f64 {
    let mut p = phi % (2.0 * PI);
    if p > PI {
        p -= 2.0 * PI;
    } else if p <= -PI {
        p += 2.0 * PI;
    }
    p
}

/// Chain-adjacency coupling between the MZIs of one mesh: diagonal 1, both
/// chain neighbors at `factor`, zero elsewhere. Stored compactly; `to_dense`
/// materializes Ω for inspection.
#[derive(Debug, Clone, PartialEq)]
pub struct CouplingMatrix {
    n: usize,
    factor: f64,
}

impl CouplingMatrix {
    pub fn new(n: usize, factor: f64) -> Self {
        Self { n, factor }
    }

    pub fn to_dense(&self) -> Array2<f64> {
        let mut m = Array2::<f64>::eye(self.n);
        for i in 0..self.n {
            if i + 1 < self.n {
                m[[i, i + 1]] = self.factor;
                m[[i + 1, i]] = self.factor;
            }
        }
        m
    }

    /// φ ← Ω·φ in place.
    pub fn apply(&self, phis: &mut [f64]) {
        debug_assert_eq!(phis.len(), self.n);
        if self.factor == 0.0 || self.n < 2 {
            return;
        }
        let mut prev = 0.0;
        for i in 0..self.n {
            let next = if i + 1 < self.n { phis[i + 1] } else { 0.0 };
            let coupled = phis[i] + self.factor * (prev + next);
            prev = phis[i];
            phis[i] = coupled;
        }
    }
}

/// Frozen per-device noise state of one k×k block: gain draws and hidden
/// biases for both unitary meshes and the Σ attenuator row, plus the
/// crosstalk topology. Identical (seed, block id) always reproduces the same
/// draws.
#[derive(Debug, Clone)]
pub struct HiddenNoiseState {
    k: usize,
    gamma_u: Vec<f64>,
    gamma_v: Vec<f64>,
    bias_u: Vec<f64>,
    bias_v: Vec<f64>,
    coupling_unitary: CouplingMatrix,
}

impl HiddenNoiseState {
    /// Draw the frozen state for one block. `block_id` separates devices that
    /// share an experiment seed.
    pub fn for_block(cfg: &NoiseConfig, k: usize, block_id: u64) -> Self {
        let m = crate::mesh::phase_count(k);
        let mut rng = stream_rng(cfg.seed, Stream::NoiseState, &[block_id]);
        let gain = Normal::new(1.0, cfg.gamma_std).expect("validated std");
        let draw_gains = |rng: &mut rand_chacha::ChaCha8Rng, n: usize| -> Vec<f64> {
            (0..n).map(|_| gain.sample(rng)).collect()
        };
        let gamma_u = draw_gains(&mut rng, m);
        let gamma_v = draw_gains(&mut rng, m);
        let draw_bias = |rng: &mut rand_chacha::ChaCha8Rng, n: usize| -> Vec<f64> {
            (0..n)
                .map(|_| {
                    if cfg.phase_bias_enabled {
                        rng.random_range(0.0..2.0 * PI)
                    } else {
                        0.0
                    }
                })
                .collect()
        };
        let bias_u = draw_bias(&mut rng, m);
        let bias_v = draw_bias(&mut rng, m);
        Self {
            k,
            gamma_u,
            gamma_v,
            bias_u,
            bias_v,
            coupling_unitary: CouplingMatrix::new(m, cfg.crosstalk_factor),
        }
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn coupling_unitary(&self) -> &CouplingMatrix {
        &self.coupling_unitary
    }

    fn pipeline(
        &self,
        programmed: &[f64],
        bits: u32,
        gains: &[f64],
        biases: Option<&[f64]>,
        coupling: &CouplingMatrix,
    ) -> Vec<f64> {
        let mut eff: Vec<f64> = programmed
            .iter()
            .zip(gains.iter())
            .map(|(&phi, &g)| g * wrap_signed(quantize_phase(phi, bits)))
            .collect();
        coupling.apply(&mut eff);
        if let Some(b) = biases {
            for (e, &bias) in eff.iter_mut().zip(b.iter()) {
                *e += bias;
            }
        }
        eff
    }

    /// Effective rotation phases of the U mesh for a programmed vector.
    pub fn effective_unitary_u(&self, programmed: &[f64], cfg: &NoiseConfig) -> Vec<f64> {
        self.pipeline(
            programmed,
            cfg.bitwidth_unitary,
            &self.gamma_u,
            Some(&self.bias_u),
            &self.coupling_unitary,
        )
    }

    /// Effective rotation phases of the V* mesh for a programmed vector.
    pub fn effective_unitary_v(&self, programmed: &[f64], cfg: &NoiseConfig) -> Vec<f64> {
        self.pipeline(
            programmed,
            cfg.bitwidth_unitary,
            &self.gamma_v,
            Some(&self.bias_v),
            &self.coupling_unitary,
        )
    }

    /// Effective attenuator phases for the monitored Σ path: closed-loop
    /// control leaves only quantization.
    pub fn effective_sigma(&self, programmed: &[f64], cfg: &NoiseConfig) -> Vec<f64> {
        programmed
            .iter()
            .map(|&p| wrap_signed(quantize_phase(p, cfg.bitwidth_sigma)))
            .collect()
    }
}

/// Apply the full pipeline to one block program.
///
/// Returns (effective U phases, effective V phases, effective Σ phases).
pub fn apply_noise(
    phi_u: &[f64],
    phi_v: &[f64],
    phi_sigma: &[f64],
    state: &HiddenNoiseState,
    cfg: &NoiseConfig,
) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
    let m = crate::mesh::phase_count(state.k);
    if phi_u.len() != m || phi_v.len() != m || phi_sigma.len() != state.k {
        return Err(Error::Config(format!(
            "program shape ({}, {}, {}) does not match k={} state",
            phi_u.len(),
            phi_v.len(),
            phi_sigma.len(),
            state.k
        )));
    }
    Ok((
        state.effective_unitary_u(phi_u, cfg),
        state.effective_unitary_v(phi_v, cfg),
        state.effective_sigma(phi_sigma, cfg),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quantize_endpoints_and_coarse_value() {
        assert_eq!(quantize_phase(0.0, 8), 0.0);
        assert!(quantize_phase(2.0 * PI, 8).abs() < 1e-12);
        // Two bits: step 2π/3; π/step = 1.5 rounds away from zero to 2.
        let q = quantize_phase(PI, 2);
        assert!((q - 4.0 * PI / 3.0).abs() < 1e-12, "got {q}");
    }

    #[test]
    fn quantize_stays_in_range_and_is_idempotent() {
        for bits in [1u32, 3, 8, 16] {
            for i in 0..200 {
                let phi = -7.0 + 0.07 * i as f64;
                let q = quantize_phase(phi, bits);
                assert!((0.0..=2.0 * PI + 1e-9).contains(&q), "bits={bits} q={q}");
                // Idempotent up to the 2π ≡ 0 wrap at the top of the range.
                let q2 = quantize_phase(q, bits);
                let diff = (q - q2).abs();
                assert!(diff < 1e-9 || (diff - 2.0 * PI).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn continuous_bits_pass_through() {
        assert_eq!(quantize_phase(1.234567, 32), 1.234567);
        // 16-bit error bound: half a step.
        let step = 2.0 * PI / (65536.0 - 1.0);
        let q = quantize_phase(1.234567, 16);
        assert!((q - 1.234567).abs() <= step / 2.0 + 1e-12);
    }

    #[test]
    fn disabled_noise_is_identity() {
        let cfg = NoiseConfig::noiseless();
        let state = HiddenNoiseState::for_block(&cfg, 4, 0);
        let phis: Vec<f64> = (0..crate::mesh::phase_count(4))
            .map(|i| 0.3 * i as f64)
            .collect();
        let eff = state.effective_unitary_u(&phis, &cfg);
        for (p, e) in phis.iter().zip(eff.iter()) {
            // Continuous control wraps only through the signed actuation.
            assert!((wrap_signed(*p) - *e).abs() < 1e-15);
        }
    }

    #[test]
    fn crosstalk_couples_adjacent_pairs() {
        let cfg = NoiseConfig {
            bitwidth_unitary: 32,
            bitwidth_sigma: 32,
            gamma_std: 0.0,
            crosstalk_factor: 0.005,
            phase_bias_enabled: false,
            seed: 1,
        };
        // k=3 gives a 3-element mesh chain; park the third shifter at zero so
        // the first two form an isolated adjacent pair.
        let state = HiddenNoiseState::for_block(&cfg, 3, 0);
        let eff = state.effective_unitary_u(&[0.4, 0.9, 0.0], &cfg);
        assert!((eff[0] - (0.4 + 0.005 * 0.9)).abs() < 1e-12);
        assert!((eff[1] - (0.9 + 0.005 * 0.4)).abs() < 1e-12);
        assert!((eff[2] - 0.005 * 0.9).abs() < 1e-12);
    }

    #[test]
    fn coupling_matrix_shape() {
        let omega = CouplingMatrix::new(4, 0.005).to_dense();
        for i in 0..4usize {
            for j in 0..4usize {
                let expected = if i == j {
                    1.0
                } else if i.abs_diff(j) == 1 {
                    0.005
                } else {
                    0.0
                };
                assert_eq!(omega[[i, j]], expected);
            }
        }
    }

    #[test]
    fn zero_gamma_deviation_keeps_phase() {
        let cfg = NoiseConfig {
            gamma_std: 0.0,
            crosstalk_factor: 0.0,
            bitwidth_unitary: 32,
            ..NoiseConfig::default()
        };
        let state = HiddenNoiseState::for_block(&cfg, 3, 5);
        let phis = vec![0.7, 1.1, 2.2];
        let eff = state.effective_unitary_u(&phis, &cfg);
        for (p, e) in phis.iter().zip(eff.iter()) {
            assert!((p - e).abs() < 1e-15);
        }
    }

    #[test]
    fn same_seed_same_draws() {
        let cfg = NoiseConfig {
            phase_bias_enabled: true,
            seed: 99,
            ..NoiseConfig::default()
        };
        let a = HiddenNoiseState::for_block(&cfg, 9, 3);
        let b = HiddenNoiseState::for_block(&cfg, 9, 3);
        let c = HiddenNoiseState::for_block(&cfg, 9, 4);
        assert_eq!(a.bias_u, b.bias_u);
        assert_eq!(a.gamma_v, b.gamma_v);
        assert_ne!(a.bias_u, c.bias_u);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let cfg = NoiseConfig::default();
        let state = HiddenNoiseState::for_block(&cfg, 3, 0);
        let err = apply_noise(&[0.0; 2], &[0.0; 3], &[0.0; 3], &state, &cfg);
        assert!(matches!(err, Err(Error::Config(_))));
    }
}
