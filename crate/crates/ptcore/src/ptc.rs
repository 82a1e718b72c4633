//! One simulated k×k photonic tensor core behind an observability firewall.
//!
//! A block computes `y = Ũ Σ̃ Ṽ* x` where the tilded factors are built from
//! noise-affected effective phases. Callers may program phases, push light
//! through the ports (forward and reverse), and read the monitored Σ
//! diagonal. The realized unitaries are never exposed; the [`oracle`] module
//! bypasses the firewall for test instrumentation only.

use crate::cost::CostMeter;
use crate::error::{Error, Result};
use crate::mesh::{self, UnitaryPhases};
use crate::noise::{quantize_phase, HiddenNoiseState, NoiseConfig};
use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

/// Diagonal ±1 matrix; the unobservable residue of identity calibration.
#[derive(Debug, Clone, PartialEq)]
pub struct SignFlipMatrix {
    signs: Vec<f64>,
}

impl SignFlipMatrix {
    pub fn new(signs: Vec<f64>) -> Result<Self> {
        if signs.iter().any(|&s| s != 1.0 && s != -1.0) {
            return Err(Error::InvalidInput("sign entries must be ±1".into()));
        }
        Ok(Self { signs })
    }

    pub fn identity(k: usize) -> Self {
        Self {
            signs: vec![1.0; k],
        }
    }

    pub fn signs(&self) -> &[f64] {
        &self.signs
    }

    pub fn matrix(&self) -> Array2<f64> {
        Array2::from_diag(&Array1::from_vec(self.signs.clone()))
    }

    /// Ĩ·Ĩ = I.
    pub fn is_self_inverse(&self) -> bool {
        self.signs.iter().all(|s| (s * s - 1.0).abs() < 1e-15)
    }
}

/// Programmed state of one block: rotation phases for both meshes and the
/// attenuator row realizing `Σ = sigma_scale · diag(cos φ^S_i)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PhaseProgram {
    pub phi_u: UnitaryPhases,
    pub phi_v: UnitaryPhases,
    pub phi_sigma: Vec<f64>,
    pub sigma_scale: f64,
}

impl PhaseProgram {
    /// Identity program: both meshes at zero phases, Σ = I.
    pub fn identity(k: usize) -> Self {
        Self {
            phi_u: UnitaryPhases::identity(k),
            phi_v: UnitaryPhases::identity(k),
            phi_sigma: vec![0.0; k],
            sigma_scale: 1.0,
        }
    }

    /// Program realizing a target matrix through its SVD.
    pub fn from_dense(w: &Array2<f64>) -> Result<Self> {
        let triple = mesh::svd(w)?;
        let phi_u = mesh::decompose_unitary(&triple.u)?;
        let phi_v = mesh::decompose_unitary(&triple.v_t)?;
        let (phi_sigma, sigma_scale) = sigma_to_phases(triple.sigma.as_slice().unwrap());
        Ok(Self {
            phi_u,
            phi_v,
            phi_sigma,
            sigma_scale,
        })
    }

    pub fn k(&self) -> usize {
        self.phi_u.k()
    }

    fn validate(&self, k: usize) -> Result<()> {
        if self.phi_u.k() != k || self.phi_v.k() != k || self.phi_sigma.len() != k {
            return Err(Error::Shape(format!(
                "program dimensions do not match block size {k}"
            )));
        }
        if !(self.sigma_scale.is_finite() && self.sigma_scale > 0.0) {
            return Err(Error::InvalidInput(format!(
                "sigma_scale must be positive, got {}",
                self.sigma_scale
            )));
        }
        Ok(())
    }
}

/// Re-parametrize singular values as attenuator phases with the max-|σ|
/// prefactor. A zero vector maps to scale 1 with all phases at π/2.
pub fn sigma_to_phases(sigma: &[f64]) -> (Vec<f64>, f64) {
    let scale = sigma.iter().fold(0.0f64, |acc, s| acc.max(s.abs()));
    if scale == 0.0 {
        return (vec![PI / 2.0; sigma.len()], 1.0);
    }
    let phis = sigma
        .iter()
        .map(|&s| (s / scale).clamp(-1.0, 1.0).acos())
        .collect();
    (phis, scale)
}

/// Wire format for one block program, serialized as decimal doubles.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PhaseProgramRecord {
    pub k: usize,
    pub phi_u: Vec<f64>,
    pub d_u: Vec<f64>,
    pub phi_v: Vec<f64>,
    pub d_v: Vec<f64>,
    pub phi_sigma: Vec<f64>,
    pub sigma_scale: f64,
}

impl From<&PhaseProgram> for PhaseProgramRecord {
    fn from(p: &PhaseProgram) -> Self {
        Self {
            k: p.k(),
            phi_u: p.phi_u.phis().to_vec(),
            d_u: p.phi_u.d().to_vec(),
            phi_v: p.phi_v.phis().to_vec(),
            d_v: p.phi_v.d().to_vec(),
            phi_sigma: p.phi_sigma.clone(),
            sigma_scale: p.sigma_scale,
        }
    }
}

impl TryFrom<&PhaseProgramRecord> for PhaseProgram {
    type Error = Error;

    fn try_from(r: &PhaseProgramRecord) -> Result<Self> {
        Ok(Self {
            phi_u: UnitaryPhases::new(r.k, r.phi_u.clone(), r.d_u.clone())?,
            phi_v: UnitaryPhases::new(r.k, r.phi_v.clone(), r.d_v.clone())?,
            phi_sigma: r.phi_sigma.clone(),
            sigma_scale: r.sigma_scale,
        })
    }
}

/// One simulated photonic tensor core.
///
/// Only port-level behavior is public: `forward`, the reverse-direction
/// passes, and the monitored Σ diagonal. Effective matrices are cached
/// internally and refreshed whenever the program changes.
#[derive(Debug, Clone)]
pub struct PtcBlock {
    k: usize,
    program: PhaseProgram,
    hidden: HiddenNoiseState,
    cfg: NoiseConfig,
    // Cached effective factors, kept in sync with `program`.
    u_eff: Array2<f64>,
    vt_eff: Array2<f64>,
    sigma_eff: Vec<f64>,
}

impl PtcBlock {
    /// Build a block with its own frozen noise draws. `block_id` separates
    /// devices sharing one experiment seed.
    pub fn new(k: usize, cfg: NoiseConfig, block_id: u64) -> Result<Self> {
        if !(2..=32).contains(&k) {
            return Err(Error::Config(format!(
                "block size must lie in [2, 32], got {k}"
            )));
        }
        cfg.validate()?;
        let hidden = HiddenNoiseState::for_block(&cfg, k, block_id);
        let mut block = Self {
            k,
            program: PhaseProgram::identity(k),
            hidden,
            cfg,
            u_eff: Array2::eye(k),
            vt_eff: Array2::eye(k),
            sigma_eff: vec![1.0; k],
        };
        block.refresh();
        Ok(block)
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn config(&self) -> &NoiseConfig {
        &self.cfg
    }

    pub fn program(&self) -> &PhaseProgram {
        &self.program
    }

    pub fn set_program(&mut self, program: PhaseProgram) -> Result<()> {
        program.validate(self.k)?;
        self.program = program;
        self.refresh();
        Ok(())
    }

    /// Overwrite only the rotation phases of both meshes (the ZO search
    /// surface), leaving d vectors and the Σ path untouched.
    pub fn set_unitary_phases(&mut self, phi_u: &[f64], phi_v: &[f64]) -> Result<()> {
        self.program.phi_u.set_phis(phi_u)?;
        self.program.phi_v.set_phis(phi_v)?;
        self.refresh();
        Ok(())
    }

    /// Program Σ from target singular values via the arccos re-parametrization.
    pub fn set_sigma(&mut self, sigma: &[f64]) -> Result<()> {
        if sigma.len() != self.k {
            return Err(Error::Shape(format!(
                "expected {} singular values, got {}",
                self.k,
                sigma.len()
            )));
        }
        let (phis, scale) = sigma_to_phases(sigma);
        self.program.phi_sigma = phis;
        self.program.sigma_scale = scale;
        self.refresh();
        Ok(())
    }

    fn refresh(&mut self) {
        let eff_u = self
            .hidden
            .effective_unitary_u(self.program.phi_u.phis(), &self.cfg);
        let eff_v = self
            .hidden
            .effective_unitary_v(self.program.phi_v.phis(), &self.cfg);
        let eff_s = self
            .hidden
            .effective_sigma(&self.program.phi_sigma, &self.cfg);
        let pu = UnitaryPhases::new(self.k, eff_u, self.program.phi_u.d().to_vec())
            .expect("effective phases keep program shape");
        let pv = UnitaryPhases::new(self.k, eff_v, self.program.phi_v.d().to_vec())
            .expect("effective phases keep program shape");
        self.u_eff = mesh::reconstruct_unitary(&pu);
        self.vt_eff = mesh::reconstruct_unitary(&pv);
        self.sigma_eff = eff_s
            .iter()
            .map(|&p| self.program.sigma_scale * p.cos())
            .collect();
    }

    /// Optical forward pass: `y = Ũ Σ̃ Ṽ* x`. One PTC call.
    pub fn forward(&self, x: &Array1<f64>, meter: &mut CostMeter) -> Array1<f64> {
        meter.record_forward_call(self.k, self.k);
        let mut mid = self.vt_eff.dot(x);
        for (m, s) in mid.iter_mut().zip(self.sigma_eff.iter()) {
            *m *= s;
        }
        self.u_eff.dot(&mid)
    }

    /// Full reverse pass through the reciprocal circuit: `(Ũ Σ̃ Ṽ*)ᵀ z`.
    pub fn adjoint(&self, z: &Array1<f64>, meter: &mut CostMeter) -> Array1<f64> {
        meter.record_feedback_call();
        let mut mid = self.u_eff.t().dot(z);
        for (m, s) in mid.iter_mut().zip(self.sigma_eff.iter()) {
            *m *= s;
        }
        self.vt_eff.t().dot(&mid)
    }

    /// Reverse pass isolating the U mesh (Σ and V* parked at identity):
    /// returns `Ũᵀ z`. One PTC call.
    pub fn adjoint_u(&self, z: &Array1<f64>, meter: &mut CostMeter) -> Array1<f64> {
        meter.record_weight_grad_call();
        self.u_eff.t().dot(z)
    }

    /// Forward pass isolating the V* mesh (U and Σ parked at identity):
    /// returns `Ṽ* x`. One PTC call.
    pub fn adjoint_v(&self, x: &Array1<f64>, meter: &mut CostMeter) -> Array1<f64> {
        meter.record_weight_grad_call();
        self.vt_eff.dot(x)
    }

    /// The monitored Σ diagonal — the only internal state readable.
    pub fn read_sigma(&self) -> Vec<f64> {
        self.sigma_eff.clone()
    }

    /// In-situ subspace gradient for this block: `(Ũᵀ dy) ⊙ (Ṽ* x)`.
    /// Two PTC calls; any common sign flip cancels in the product.
    pub fn subspace_grad(
        &self,
        x: &Array1<f64>,
        dy: &Array1<f64>,
        meter: &mut CostMeter,
    ) -> Array1<f64> {
        let left = self.adjoint_u(dy, meter);
        let right = self.adjoint_v(x, meter);
        let mut g = left;
        for (gi, ri) in g.iter_mut().zip(right.iter()) {
            *gi *= ri;
        }
        g
    }

    /// Optimal singular-value projection: measure `diag(Ũᵀ W Ṽ)` by the
    /// two-pass optical procedure and reprogram the Σ path with it.
    ///
    /// Pass 1 parks Σ and V* at their identity programs and reverse-propagates
    /// the columns of `w_target`; pass 2 parks U and Σ and forward-propagates
    /// the transposed readout. With `noisy_passes` the temporary identity
    /// configurations go through the same noise pipeline as any program;
    /// otherwise the passes are ideal. Returns the measured diagonal.
    pub fn osp_project(
        &mut self,
        w_target: &Array2<f64>,
        noisy_passes: bool,
        meter: &mut CostMeter,
    ) -> Result<Vec<f64>> {
        if w_target.nrows() != self.k || w_target.ncols() != self.k {
            return Err(Error::Shape(format!(
                "target is {}×{}, block is {k}×{k}",
                w_target.nrows(),
                w_target.ncols(),
                k = self.k
            )));
        }
        let ident = PhaseProgram::identity(self.k);

        // Temporary configurations for the two measurement passes.
        let (vt_pass1, sigma_pass1, u_pass2, sigma_pass2) = if noisy_passes {
            let eff_v = self
                .hidden
                .effective_unitary_v(ident.phi_v.phis(), &self.cfg);
            let pv = UnitaryPhases::new(self.k, eff_v, ident.phi_v.d().to_vec())?;
            let eff_u = self
                .hidden
                .effective_unitary_u(ident.phi_u.phis(), &self.cfg);
            let pu = UnitaryPhases::new(self.k, eff_u, ident.phi_u.d().to_vec())?;
            let eff_s = self.hidden.effective_sigma(&ident.phi_sigma, &self.cfg);
            let sig: Vec<f64> = eff_s.iter().map(|&p| p.cos()).collect();
            (
                mesh::reconstruct_unitary(&pv),
                sig.clone(),
                mesh::reconstruct_unitary(&pu),
                sig,
            )
        } else {
            (
                Array2::eye(self.k),
                vec![1.0; self.k],
                Array2::eye(self.k),
                vec![1.0; self.k],
            )
        };

        // Pass 1: reverse pass of W's columns through (Ũ, Σ₁≈I, V₁*≈I):
        // A = (Ũ Σ₁ V₁*)ᵀ W, read at the input ports.
        let mut a = Array2::<f64>::zeros((self.k, self.k));
        for col in 0..self.k {
            meter.record_weight_grad_call();
            let w_col = w_target.column(col).to_owned();
            let mut mid = self.u_eff.t().dot(&w_col);
            for (m, s) in mid.iter_mut().zip(sigma_pass1.iter()) {
                *m *= s;
            }
            let out = vt_pass1.t().dot(&mid);
            for row in 0..self.k {
                a[[row, col]] = out[row];
            }
        }

        // Pass 2: forward pass of Aᵀ's columns through (U₂≈I, Σ₂≈I, Ṽ*):
        // B = (U₂ Σ₂ Ṽ*) Aᵀ; the projected diagonal sits on B's diagonal and
        // sign flips shared by both meshes cancel there.
        let mut sigma_opt = vec![0.0; self.k];
        for col in 0..self.k {
            meter.record_weight_grad_call();
            let a_row = a.row(col).to_owned();
            let mut mid = self.vt_eff.dot(&a_row);
            for (m, s) in mid.iter_mut().zip(sigma_pass2.iter()) {
                *m *= s;
            }
            let out = u_pass2.dot(&mid);
            sigma_opt[col] = out[col];
        }

        self.set_sigma(&sigma_opt)?;
        Ok(sigma_opt)
    }

    /// Quantization applied on the monitored Σ path, exposed for reporting.
    pub fn sigma_quantization(&self, value: f64) -> f64 {
        quantize_phase(value, self.cfg.bitwidth_sigma)
    }
}

/// Test-only instrumentation that bypasses the observability firewall.
///
/// Nothing in the training stages may decide based on this module; it exists
/// for oracles that need the realized matrices (calibration MSE reporting,
/// mapping ground truth, sign-flip checks).
pub mod oracle {
    use super::*;

    /// The realized factors (Ũ, σ̃, Ṽ*).
    pub fn effective_factors(block: &PtcBlock) -> (Array2<f64>, Vec<f64>, Array2<f64>) {
        (
            block.u_eff.clone(),
            block.sigma_eff.clone(),
            block.vt_eff.clone(),
        )
    }

    /// The realized dense matrix Ũ Σ̃ Ṽ*.
    pub fn effective_dense(block: &PtcBlock) -> Array2<f64> {
        let k = block.k;
        let mut scaled = block.vt_eff.clone();
        for r in 0..k {
            for c in 0..k {
                scaled[[r, c]] *= block.sigma_eff[r];
            }
        }
        block.u_eff.dot(&scaled)
    }

    /// Mean squared deviation of |M| from the identity, `‖|M| − I‖²_F / k²`.
    pub fn abs_identity_mse(m: &Array2<f64>) -> f64 {
        let k = m.nrows();
        let mut acc = 0.0;
        for r in 0..k {
            for c in 0..k {
                let target = if r == c { 1.0 } else { 0.0 };
                let d = m[[r, c]].abs() - target;
                acc += d * d;
            }
        }
        acc / (k * k) as f64
    }
}
