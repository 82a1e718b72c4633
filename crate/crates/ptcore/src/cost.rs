//! Hardware cost accounting: measured PTC-call counters plus the analytic
//! energy and time-step formulas, broken down into forward, weight-gradient,
//! and error-feedback phases.
//!
//! Energy is counted in PTC-call work units: forward passes accumulate
//! multiply-accumulates with padding excluded (a full k×k block call is k²),
//! weight-gradient and feedback passes count raw calls — matching the
//! formula conventions so measured counters and predictions agree exactly on
//! aligned configurations.

use serde::{Deserialize, Serialize};

/// Measured counters, accumulated at each optical pass.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CostMeter {
    pub forward_macs: u64,
    pub weight_grad_calls: u64,
    pub feedback_calls: u64,
}

impl CostMeter {
    pub fn record_forward_call(&mut self, active_rows: usize, active_cols: usize) {
        self.forward_macs += (active_rows * active_cols) as u64;
    }

    pub fn record_weight_grad_call(&mut self) {
        self.weight_grad_calls += 1;
    }

    pub fn record_feedback_call(&mut self) {
        self.feedback_calls += 1;
    }

    pub fn merge(&mut self, other: &CostMeter) {
        self.forward_macs += other.forward_macs;
        self.weight_grad_calls += other.weight_grad_calls;
        self.feedback_calls += other.feedback_calls;
    }

    pub fn total(&self) -> u64 {
        self.forward_macs + self.weight_grad_calls + self.feedback_calls
    }
}

/// Shape of one blocked layer as the profiler sees it. Linear layers set
/// `kernel = 1`, `stride = 1`, and unit spatial dims.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct LayerDims {
    pub c_out: usize,
    pub c_in: usize,
    pub kernel: usize,
    pub stride: usize,
    pub h: usize,
    pub w: usize,
    pub h_out: usize,
    pub w_out: usize,
    /// Block size of the tensor cores.
    pub k: usize,
}

impl LayerDims {
    pub fn linear(c_out: usize, c_in: usize, k: usize) -> Self {
        Self {
            c_out,
            c_in,
            kernel: 1,
            stride: 1,
            h: 1,
            w: 1,
            h_out: 1,
            w_out: 1,
            k,
        }
    }

    /// Block-grid rows: P = ⌈C_out / k⌉.
    pub fn p(&self) -> usize {
        self.c_out.div_ceil(self.k)
    }

    /// Block-grid columns: Q = ⌈C_in·K² / k⌉.
    pub fn q(&self) -> usize {
        (self.c_in * self.kernel * self.kernel).div_ceil(self.k)
    }
}

/// Per-phase PTC energy for one optimization iteration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct EnergyBreakdown {
    pub forward: u64,
    pub weight_grad: u64,
    pub feedback: u64,
}

impl EnergyBreakdown {
    pub fn total(&self) -> u64 {
        self.forward + self.weight_grad + self.feedback
    }
}

/// Energy formulas per iteration. `sc_kept` is Tr(S_CᵀS_C) (surviving im2col
/// columns), `sw_kept` is Tr(S_WᵀS_W) (surviving feedback blocks).
pub fn energy(dims: &LayerDims, batch: usize, sc_kept: usize, sw_kept: usize) -> EnergyBreakdown {
    let spatial_out = dims.h_out * dims.w_out;
    EnergyBreakdown {
        forward: (dims.c_out * dims.c_in * dims.kernel * dims.kernel * batch * spatial_out) as u64,
        weight_grad: (2 * sc_kept * batch * dims.p() * dims.q()) as u64,
        feedback: (sw_kept * batch * dims.h * dims.w) as u64,
    }
}

/// Per-phase accumulation steps for one optimization iteration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct StepBreakdown {
    pub forward: u64,
    pub weight_grad: u64,
    pub feedback: u64,
}

impl StepBreakdown {
    pub fn total(&self) -> u64 {
        self.forward + self.weight_grad + self.feedback
    }
}

/// Time-step formulas per iteration; `sw_row_sums[q] = Σ_p S_W(q, p)`. The
/// feedback branch for kernels larger than 1 carries the max-over-rows
/// accumulation-path term; the pointwise branch uses output spatial dims.
pub fn timesteps(
    dims: &LayerDims,
    batch: usize,
    sc_kept: usize,
    sw_row_sums: &[usize],
) -> StepBreakdown {
    let spatial_out = dims.h_out * dims.w_out;
    let q = dims.q();
    let forward = (q.saturating_sub(1) * batch * spatial_out) as u64
        + (batch * spatial_out).div_ceil(dims.k) as u64;
    let weight_grad = (4 * sc_kept * batch) as u64;
    let max_path = sw_row_sums
        .iter()
        .map(|&s| s.saturating_sub(1))
        .max()
        .unwrap_or(0);
    let feedback = if dims.kernel > 1 {
        (dims.c_in.div_ceil(dims.p())
            * ((2 * dims.k) as f64).log2().ceil() as usize
            * max_path.div_ceil(2)
            * batch
            * dims.h
            * dims.w) as u64
    } else {
        (max_path * batch * dims.h_out * dims.w_out) as u64
    };
    StepBreakdown {
        forward,
        weight_grad,
        feedback,
    }
}

/// Mean over rows of `(row_sum − 1)₊`, the balanced counterpart of the
/// feedback max-path term.
pub fn mean_feedback_path(sw_row_sums: &[usize]) -> f64 {
    if sw_row_sums.is_empty() {
        return 0.0;
    }
    sw_row_sums
        .iter()
        .map(|&s| s.saturating_sub(1) as f64)
        .sum::<f64>()
        / sw_row_sums.len() as f64
}

/// Max over rows of `(row_sum − 1)₊`.
pub fn max_feedback_path(sw_row_sums: &[usize]) -> usize {
    sw_row_sums
        .iter()
        .map(|&s| s.saturating_sub(1))
        .max()
        .unwrap_or(0)
}

/// Learning stage identifiers for analytic cost projection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Stage {
    IdentityCalibration,
    ParallelMapping,
    SubspaceLearning,
}

/// Inputs for the closed-form stage cost projections.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StageCostConfig {
    /// Per-layer weight element counts (M·N of the unfolded matrix).
    pub layer_weights: Vec<usize>,
    /// Per-layer N·B·H·W products for subspace learning.
    pub layer_activations: Vec<usize>,
    pub k: usize,
    /// Iterations of each stage.
    pub t_ic: usize,
    pub t_pm: usize,
    pub t_sl: usize,
}

/// Projected (steps, PTC calls) for one stage.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StageCost {
    pub steps: f64,
    pub ptc_calls: f64,
}

/// Closed-form stage projections: calibration runs all blocks in parallel
/// (2k(k−1)·T₁ steps), mapping accumulates 2·Σ(MN)·(k−1)·T₂/k + 3, and both
/// consume about 2·Σ(MN)·T PTC calls; subspace learning takes about
/// T₃·Σ(N·B·H·W)/k steps.
pub fn stage_cost(stage: Stage, cfg: &StageCostConfig) -> StageCost {
    let weight_sum: f64 = cfg.layer_weights.iter().map(|&x| x as f64).sum();
    match stage {
        Stage::IdentityCalibration => StageCost {
            steps: (2 * cfg.k * (cfg.k - 1) * cfg.t_ic) as f64,
            ptc_calls: 2.0 * weight_sum * cfg.t_ic as f64,
        },
        Stage::ParallelMapping => StageCost {
            steps: 2.0 * weight_sum * (cfg.k as f64 - 1.0) * cfg.t_pm as f64 / cfg.k as f64 + 3.0,
            ptc_calls: 2.0 * weight_sum * cfg.t_pm as f64,
        },
        Stage::SubspaceLearning => {
            let act_sum: f64 = cfg.layer_activations.iter().map(|&x| x as f64).sum();
            StageCost {
                steps: cfg.t_sl as f64 * act_sum / cfg.k as f64,
                // Forward plus the two weight-gradient passes per sample.
                ptc_calls: 3.0 * cfg.t_sl as f64 * act_sum,
            }
        }
    }
}

/// Normalization basis for report columns: PTC calls in units of 10⁹, steps
/// in units of 10⁶. Only ratios are meaningful across reports.
pub const ENERGY_UNIT: f64 = 1e9;
pub const STEP_UNIT: f64 = 1e6;

/// Accumulated normalized cost of a run, with per-phase breakdown and ratios
/// against a named baseline.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CostReport {
    pub energy_forward: f64,
    pub energy_weight_grad: f64,
    pub energy_feedback: f64,
    pub step_forward: f64,
    pub step_weight_grad: f64,
    pub step_feedback: f64,
    pub baseline: Option<String>,
    /// baseline_total / this_total.
    pub energy_ratio: Option<f64>,
    pub step_ratio: Option<f64>,
}

impl CostReport {
    pub fn from_counts(meter: &CostMeter, steps: &StepBreakdown) -> Self {
        Self {
            energy_forward: meter.forward_macs as f64 / ENERGY_UNIT,
            energy_weight_grad: meter.weight_grad_calls as f64 / ENERGY_UNIT,
            energy_feedback: meter.feedback_calls as f64 / ENERGY_UNIT,
            step_forward: steps.forward as f64 / STEP_UNIT,
            step_weight_grad: steps.weight_grad as f64 / STEP_UNIT,
            step_feedback: steps.feedback as f64 / STEP_UNIT,
            baseline: None,
            energy_ratio: None,
            step_ratio: None,
        }
    }

    pub fn energy_total(&self) -> f64 {
        self.energy_forward + self.energy_weight_grad + self.energy_feedback
    }

    pub fn step_total(&self) -> f64 {
        self.step_forward + self.step_weight_grad + self.step_feedback
    }

    pub fn with_baseline(mut self, name: &str, baseline: &CostReport) -> Self {
        self.baseline = Some(name.to_string());
        let et = self.energy_total();
        let st = self.step_total();
        self.energy_ratio = (et > 0.0).then(|| baseline.energy_total() / et);
        self.step_ratio = (st > 0.0).then(|| baseline.step_total() / st);
        self
    }

    /// Table-shaped CSV: phase × {energy, steps} plus ratio columns.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("phase,norm_ptc_energy,norm_steps\n");
        out.push_str(&format!(
            "forward,{},{}\n",
            self.energy_forward, self.step_forward
        ));
        out.push_str(&format!(
            "weight_grad,{},{}\n",
            self.energy_weight_grad, self.step_weight_grad
        ));
        out.push_str(&format!(
            "feedback,{},{}\n",
            self.energy_feedback, self.step_feedback
        ));
        out.push_str(&format!(
            "total,{},{}\n",
            self.energy_total(),
            self.step_total()
        ));
        if let (Some(er), Some(sr)) = (self.energy_ratio, self.step_ratio) {
            out.push_str(&format!("ratio_vs_baseline,{er},{sr}\n"));
        }
        out
    }
}
