//! Stage 3 — sparse subspace learning: balanced top-K feedback sampling over
//! the block grid, information-preserving column sampling over im2col
//! patches, stochastic mini-batch dropping, and the training loop that
//! updates only the Σ paths of photonic layers.

use crate::cost::CostMeter;
use crate::error::{Error, Result};
use crate::nn::{cross_entropy, AdamW, Model, Tensor};
use crate::rng::{derive_seed, stream_rng, Stream};
use crate::stages::BlockedLinear;
use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Block-selection rule for the feedback matrix Wᵀ.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum FeedbackMode {
    /// Keep every block.
    None,
    /// Row-balanced i.i.d. random selection.
    Uniform,
    /// Global top-K blocks by Frobenius norm.
    TopK,
    /// Per-row top-K by norm: balanced accumulation paths.
    #[default]
    BTopK,
    /// Stochastic variant of `BTopK`: per row, blocks are drawn without
    /// replacement with probability proportional to their norm. Balanced
    /// like `BTopK` but randomized; no parity with the deterministic rule
    /// is implied.
    BTopKStochastic,
}

/// Scale applied to surviving feedback blocks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum FeedbackNorm {
    None,
    /// Expectation-maintaining 1/α_W (PQ / Tr(S_WᵀS_W) as realized).
    #[default]
    Exp,
    /// Variance-maintaining 1/√α_W.
    Var,
}

/// Multi-level sparsity plan: feedback density over blocks, column density
/// over im2col patches, and the keep-probability of each training iteration.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SamplingPlan {
    pub feedback_mode: FeedbackMode,
    /// Density of kept feedback blocks, in (0, 1].
    pub feedback_density: f64,
    pub feedback_norm: FeedbackNorm,
    /// Density of kept im2col columns, in (0, 1]. Unscaled by design.
    pub column_density: f64,
    /// Keep-probability of each iteration, in (0, 1].
    pub batch_keep_prob: f64,
    pub seed: u64,
}

impl SamplingPlan {
    /// Everything kept: exact dense training.
    pub fn dense() -> Self {
        Self {
            feedback_mode: FeedbackMode::None,
            feedback_density: 1.0,
            feedback_norm: FeedbackNorm::None,
            column_density: 1.0,
            batch_keep_prob: 1.0,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("alpha_w", self.feedback_density),
            ("alpha_c", self.column_density),
            ("alpha_d", self.batch_keep_prob),
        ] {
            if !(v > 0.0 && v <= 1.0) {
                return Err(Error::Config(format!("{name} must lie in (0, 1], got {v}")));
            }
        }
        Ok(())
    }
}

/// Boolean Q×P block mask with its normalization scale.
#[derive(Debug, Clone, PartialEq)]
pub struct FeedbackMask {
    /// keep[q][p] — rows of Wᵀ index the input-side block columns q.
    pub keep: Array2<bool>,
    pub scale: f64,
}

impl FeedbackMask {
    pub fn kept(&self) -> usize {
        self.keep.iter().filter(|&&b| b).count()
    }

    pub fn row_sums(&self) -> Vec<usize> {
        (0..self.keep.nrows())
            .map(|q| {
                (0..self.keep.ncols())
                    .filter(|&p| self.keep[[q, p]])
                    .count()
            })
            .collect()
    }
}

/// Block Frobenius norms ‖W_pq‖² read from the monitored Σ diagonals,
/// arranged as the Q×P grid of the feedback matrix.
pub fn layer_block_norms(layer: &BlockedLinear) -> Array2<f64> {
    let (p, q) = layer.grid();
    Array2::from_shape_fn((q, p), |(qi, pi)| {
        layer.block(pi, qi).read_sigma().iter().map(|s| s * s).sum()
    })
}

fn mask_scale(norm: FeedbackNorm, p: usize, q: usize, kept: usize) -> f64 {
    if kept == 0 {
        return 1.0;
    }
    let inv_alpha = (p * q) as f64 / kept as f64;
    match norm {
        FeedbackNorm::None => 1.0,
        FeedbackNorm::Exp => inv_alpha,
        FeedbackNorm::Var => inv_alpha.sqrt(),
    }
}

/// Build the feedback mask for one layer and step.
///
/// `norms` is the Q×P grid of block norms; `uniform` draws a row-balanced
/// random selection, `topk` takes the global top blocks, and `btopk` the
/// per-row top blocks (ties broken toward the lower block index).
pub fn build_feedback_mask(
    norms: &Array2<f64>,
    plan: &SamplingPlan,
    step_seed: u64,
    layer_tag: u64,
) -> Result<FeedbackMask> {
    plan.validate()?;
    let (q, p) = norms.dim();
    if norms.iter().any(|&n| n < 0.0) {
        return Err(Error::InvalidInput(
            "block norms must be nonnegative".into(),
        ));
    }
    let per_row = ((plan.feedback_density * p as f64).ceil() as usize).clamp(1, p);
    let mut keep = Array2::from_elem((q, p), false);
    match plan.feedback_mode {
        FeedbackMode::None => keep.fill(true),
        FeedbackMode::Uniform => {
            let mut rng = stream_rng(
                derive_seed(plan.seed, Stream::Mask, &[layer_tag]),
                Stream::Mask,
                &[step_seed],
            );
            for qi in 0..q {
                let mut idx: Vec<usize> = (0..p).collect();
                idx.shuffle(&mut rng);
                for &pi in idx.iter().take(per_row) {
                    keep[[qi, pi]] = true;
                }
            }
        }
        FeedbackMode::TopK => {
            let total = ((plan.feedback_density * (p * q) as f64).ceil() as usize).clamp(1, p * q);
            let mut order: Vec<(usize, usize)> = (0..q)
                .flat_map(|qi| (0..p).map(move |pi| (qi, pi)))
                .collect();
            order.sort_by(|a, b| {
                norms[[b.0, b.1]]
                    .partial_cmp(&norms[[a.0, a.1]])
                    .unwrap()
                    .then((a.0 * p + a.1).cmp(&(b.0 * p + b.1)))
            });
            for &(qi, pi) in order.iter().take(total) {
                keep[[qi, pi]] = true;
            }
        }
        FeedbackMode::BTopK => {
            for qi in 0..q {
                let mut order: Vec<usize> = (0..p).collect();
                order.sort_by(|&a, &b| {
                    norms[[qi, b]]
                        .partial_cmp(&norms[[qi, a]])
                        .unwrap()
                        .then(a.cmp(&b))
                });
                for &pi in order.iter().take(per_row) {
                    keep[[qi, pi]] = true;
                }
            }
        }
        FeedbackMode::BTopKStochastic => {
            let mut rng = stream_rng(
                derive_seed(plan.seed, Stream::Mask, &[layer_tag]),
                Stream::Mask,
                &[step_seed, 0x5b],
            );
            for qi in 0..q {
                // Weighted draws without replacement; zero-norm rows fall
                // back to uniform.
                let mut remaining: Vec<usize> = (0..p).collect();
                for _ in 0..per_row {
                    let total: f64 = remaining.iter().map(|&pi| norms[[qi, pi]]).sum();
                    let chosen = if total <= 0.0 {
                        rng.random_range(0..remaining.len())
                    } else {
                        let mut ticket = rng.random_range(0.0..total);
                        let mut idx = remaining.len() - 1;
                        for (slot, &pi) in remaining.iter().enumerate() {
                            ticket -= norms[[qi, pi]];
                            if ticket <= 0.0 {
                                idx = slot;
                                break;
                            }
                        }
                        idx
                    };
                    keep[[qi, remaining.swap_remove(chosen)]] = true;
                }
            }
        }
    }
    let kept = keep.iter().filter(|&&b| b).count();
    Ok(FeedbackMask {
        scale: mask_scale(plan.feedback_norm, p, q, kept),
        keep,
    })
}

/// Masked error feedback `dx = c_W · Σ_{kept} blockᵀ(dy)` for a batch of
/// gradient columns [M × cols]. Masked blocks are never evaluated.
pub fn sparse_error_feedback(
    layer: &BlockedLinear,
    dy_cols: &Array2<f64>,
    mask: &FeedbackMask,
    meter: &mut CostMeter,
) -> Array2<f64> {
    let (rows, cols_dim) = layer.dims();
    let (p, q) = layer.grid();
    let k = layer.k();
    assert_eq!(dy_cols.nrows(), rows, "gradient rows mismatch");
    assert_eq!(mask.keep.dim(), (q, p), "mask shaped Q×P");
    let n_cols = dy_cols.ncols();
    let mut dx = Array2::<f64>::zeros((cols_dim, n_cols));
    for col in 0..n_cols {
        for qi in 0..q {
            let ac = layer.active_cols(qi);
            for pi in 0..p {
                if !mask.keep[[qi, pi]] {
                    continue;
                }
                let ar = layer.active_rows(pi);
                let mut zin = Array1::<f64>::zeros(k);
                for r in 0..ar {
                    zin[r] = dy_cols[[pi * k + r, col]];
                }
                let out = layer.block(pi, qi).adjoint(&zin, meter);
                for c in 0..ac {
                    dx[[qi * k + c, col]] += mask.scale * out[c];
                }
            }
        }
    }
    dx
}

/// Column mask over the H'W' im2col positions: exactly ⌈α_C · n⌉ columns
/// kept, drawn once per step and shared across the batch.
pub fn build_column_mask(
    n_columns: usize,
    alpha_c: f64,
    step_seed: u64,
    layer_tag: u64,
) -> Result<Vec<bool>> {
    if !(alpha_c > 0.0 && alpha_c <= 1.0) {
        return Err(Error::Config(format!(
            "alpha_c must lie in (0, 1], got {alpha_c}"
        )));
    }
    let kept = ((alpha_c * n_columns as f64).ceil() as usize).clamp(1, n_columns);
    let mut mask = vec![false; n_columns];
    if kept == n_columns {
        mask.fill(true);
        return Ok(mask);
    }
    let mut rng = stream_rng(step_seed, Stream::Mask, &[layer_tag, 0xc01]);
    let mut idx: Vec<usize> = (0..n_columns).collect();
    idx.shuffle(&mut rng);
    for &i in idx.iter().take(kept) {
        mask[i] = true;
    }
    Ok(mask)
}

/// Per-block Σ gradients accumulated over surviving columns via the in-situ
/// two-pass rule; returns the flat gradient vector (P·Q·k, block-major).
///
/// No column rescale is applied: pairing it with the expectation-scaled
/// feedback overdrives the estimate.
pub fn subspace_weight_grad(
    layer: &BlockedLinear,
    x_cols: &Array2<f64>,
    dy_cols: &Array2<f64>,
    col_mask: Option<&[bool]>,
    meter: &mut CostMeter,
) -> Vec<f64> {
    let (p, q) = layer.grid();
    let k = layer.k();
    let n_cols = x_cols.ncols();
    assert_eq!(dy_cols.ncols(), n_cols, "column count mismatch");
    let mut grads = vec![0.0; p * q * k];
    for col in 0..n_cols {
        if let Some(mask) = col_mask {
            if !mask[col % mask.len()] {
                continue;
            }
        }
        for pi in 0..p {
            let ar = layer.active_rows(pi);
            let mut dy_chunk = Array1::<f64>::zeros(k);
            for r in 0..ar {
                dy_chunk[r] = dy_cols[[pi * k + r, col]];
            }
            for qi in 0..q {
                let ac = layer.active_cols(qi);
                let mut x_chunk = Array1::<f64>::zeros(k);
                for c in 0..ac {
                    x_chunk[c] = x_cols[[qi * k + c, col]];
                }
                let g = layer
                    .block(pi, qi)
                    .subspace_grad(&x_chunk, &dy_chunk, meter);
                let base = (pi * q + qi) * k;
                for i in 0..k {
                    grads[base + i] += g[i];
                }
            }
        }
    }
    grads
}

/// Gradient fidelity between a reference gradient and an estimate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradFidelity {
    /// 1 − arccos(clamp(cos∠(g, ĝ)))/π; 1 iff positively parallel.
    pub angular_similarity: f64,
    /// ‖g − ĝ‖² / ‖g‖².
    pub normalized_distance: f64,
}

impl GradFidelity {
    pub fn between(reference: &[f64], estimate: &[f64]) -> Self {
        let dot: f64 = reference.iter().zip(estimate).map(|(a, b)| a * b).sum();
        let n1: f64 = reference.iter().map(|a| a * a).sum::<f64>().sqrt();
        let n2: f64 = estimate.iter().map(|a| a * a).sum::<f64>().sqrt();
        let cos = if n1 == 0.0 || n2 == 0.0 {
            1.0
        } else {
            (dot / (n1 * n2)).clamp(-1.0, 1.0)
        };
        let dist_num: f64 = reference
            .iter()
            .zip(estimate)
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        GradFidelity {
            angular_similarity: 1.0 - cos.acos() / std::f64::consts::PI,
            normalized_distance: if n1 == 0.0 {
                dist_num
            } else {
                dist_num / (n1 * n1)
            },
        }
    }
}

/// One epoch's outcome.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub loss: f64,
    pub accuracy: f64,
    pub ptc_energy: u64,
    pub steps: u64,
    pub skipped_batches: usize,
}

/// Subspace-learning epoch: iterate batches, skip each independently with
/// probability 1 − α_D, and for kept batches run forward → sparse feedback →
/// subspace gradients → AdamW on Σ (and electronic parameters). Mesh phases
/// stay frozen throughout.
#[allow(clippy::too_many_arguments)]
pub fn train_epoch(
    model: &mut Model,
    inputs: &[Tensor],
    labels: &[Vec<usize>],
    plan: &SamplingPlan,
    opt: &mut AdamW,
    epoch: usize,
    seed: u64,
    meter: &mut CostMeter,
) -> Result<EpochMetrics> {
    plan.validate()?;
    let mut skip_rng = stream_rng(seed, Stream::Train, &[epoch as u64, 0xd]);
    let mut loss_sum = 0.0;
    let mut seen = 0usize;
    let mut correct = 0usize;
    let mut total = 0usize;
    let mut skipped = 0usize;
    let energy_before = meter.total();

    for (bi, (x, y)) in inputs.iter().zip(labels.iter()).enumerate() {
        if skip_rng.random::<f64>() >= plan.batch_keep_prob {
            skipped += 1;
            continue;
        }
        let logits = model.forward(x, meter)?;
        let (loss, dlogits) = cross_entropy(logits.as_vector(), y)?;
        if !loss.is_finite() {
            return Err(Error::Numerical(format!(
                "loss diverged at epoch {epoch} batch {bi}: {loss}"
            )));
        }
        loss_sum += loss;
        seen += 1;
        for (bi2, &label) in y.iter().enumerate() {
            let col = logits.as_vector().column(bi2);
            let mut best = 0;
            for c in 1..col.len() {
                if col[c] > col[best] {
                    best = c;
                }
            }
            if best == label {
                correct += 1;
            }
            total += 1;
        }
        model.zero_grads();
        let step_seed = derive_seed(seed, Stream::Train, &[epoch as u64, bi as u64]);
        model.backward(&Tensor::Vector(dlogits), plan, step_seed, meter)?;
        model.apply_updates(opt)?;
    }

    Ok(EpochMetrics {
        epoch,
        loss: if seen > 0 {
            loss_sum / seen as f64
        } else {
            0.0
        },
        accuracy: if total > 0 {
            correct as f64 / total as f64
        } else {
            0.0
        },
        ptc_energy: meter.total() - energy_before,
        steps: 0,
        skipped_batches: skipped,
    })
}

/// Classification accuracy over a dataset, photonic forward only.
pub fn evaluate(
    model: &mut Model,
    inputs: &[Tensor],
    labels: &[Vec<usize>],
    meter: &mut CostMeter,
) -> Result<f64> {
    let mut correct = 0usize;
    let mut total = 0usize;
    for (x, y) in inputs.iter().zip(labels.iter()) {
        let logits = model.forward(x, meter)?;
        for (bi, &label) in y.iter().enumerate() {
            let col = logits.as_vector().column(bi);
            let mut best = 0;
            for c in 1..col.len() {
                if col[c] > col[best] {
                    best = c;
                }
            }
            if best == label {
                correct += 1;
            }
            total += 1;
        }
    }
    Ok(if total == 0 {
        0.0
    } else {
        correct as f64 / total as f64
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::noise::NoiseConfig;
    use crate::stages::BlockedLinear;
    use ndarray::array;

    fn meter() -> CostMeter {
        CostMeter::default()
    }

    fn plan(mode: FeedbackMode, aw: f64, norm: FeedbackNorm) -> SamplingPlan {
        SamplingPlan {
            feedback_mode: mode,
            feedback_density: aw,
            feedback_norm: norm,
            column_density: 1.0,
            batch_keep_prob: 1.0,
            seed: 5,
        }
    }

    #[test]
    fn full_density_is_all_ones_any_norm() {
        let norms = Array2::from_elem((3, 4), 1.0);
        for mode in [
            FeedbackMode::Uniform,
            FeedbackMode::TopK,
            FeedbackMode::BTopK,
        ] {
            for nrm in [FeedbackNorm::None, FeedbackNorm::Exp, FeedbackNorm::Var] {
                let m = build_feedback_mask(&norms, &plan(mode, 1.0, nrm), 0, 0).unwrap();
                assert_eq!(m.kept(), 12);
                assert!((m.scale - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn btopk_selects_top_norms_per_row() {
        let norms = array![[4.0, 1.0, 3.0, 2.0]];
        let m = build_feedback_mask(
            &norms,
            &plan(FeedbackMode::BTopK, 0.5, FeedbackNorm::Exp),
            0,
            0,
        )
        .unwrap();
        assert!(m.keep[[0, 0]]);
        assert!(m.keep[[0, 2]]);
        assert!(!m.keep[[0, 1]]);
        assert!(!m.keep[[0, 3]]);
        assert!((m.scale - 2.0).abs() < 1e-12);
    }

    #[test]
    fn btopk_ties_break_to_lower_index() {
        let norms = array![[1.0, 1.0, 1.0, 1.0]];
        let m = build_feedback_mask(
            &norms,
            &plan(FeedbackMode::BTopK, 0.5, FeedbackNorm::None),
            0,
            0,
        )
        .unwrap();
        assert!(m.keep[[0, 0]] && m.keep[[0, 1]]);
        assert!(!m.keep[[0, 2]] && !m.keep[[0, 3]]);
    }

    #[test]
    fn btopk_rows_balanced_always() {
        let mut rng = stream_rng(9, Stream::Init, &[60]);
        for trial in 0..25u64 {
            let norms = Array2::from_shape_fn((5, 7), |_| rng.random_range(0.0..4.0f64));
            for mode in [FeedbackMode::BTopK, FeedbackMode::BTopKStochastic] {
                let m = build_feedback_mask(&norms, &plan(mode, 0.6, FeedbackNorm::Exp), trial, 1)
                    .unwrap();
                let sums = m.row_sums();
                assert!(sums.iter().all(|&s| s == sums[0]), "unbalanced: {sums:?}");
            }
        }
    }

    #[test]
    fn stochastic_btopk_prefers_large_norms() {
        // Over many draws, a block with a much larger norm is kept far more
        // often than a small one at the same density.
        let norms = ndarray::array![[10.0, 1.0, 1.0, 1.0]];
        let p = plan(FeedbackMode::BTopKStochastic, 0.5, FeedbackNorm::Exp);
        let mut big = 0;
        let mut small = 0;
        for step in 0..500u64 {
            let m = build_feedback_mask(&norms, &p, step, 2).unwrap();
            if m.keep[[0, 0]] {
                big += 1;
            }
            if m.keep[[0, 1]] {
                small += 1;
            }
        }
        assert!(big > 450, "large-norm block kept only {big}/500");
        assert!(small < big, "norm guidance missing: {small} vs {big}");
    }

    #[test]
    fn density_bounds_checked() {
        let norms = Array2::from_elem((2, 2), 1.0);
        let bad = plan(FeedbackMode::Uniform, 0.0, FeedbackNorm::Exp);
        assert!(build_feedback_mask(&norms, &bad, 0, 0).is_err());
        let bad = plan(FeedbackMode::Uniform, 1.5, FeedbackNorm::Exp);
        assert!(build_feedback_mask(&norms, &bad, 0, 0).is_err());
    }

    fn toy_layer(rows: usize, cols: usize, k: usize) -> BlockedLinear {
        let mut rng = stream_rng(31, Stream::Init, &[rows as u64, cols as u64]);
        let w = Array2::from_shape_fn((rows, cols), |_| rng.random_range(-1.0..1.0));
        let mut layer = BlockedLinear::new(rows, cols, k, &NoiseConfig::noiseless(), 8).unwrap();
        layer.program_from_dense(&w).unwrap();
        layer
    }

    #[test]
    fn full_mask_feedback_equals_dense_transpose() {
        let layer = toy_layer(6, 8, 3);
        let w = layer.probe_dense(&mut meter());
        let dy = Array2::from_shape_fn((6, 2), |(r, c)| 0.1 * r as f64 - 0.3 * c as f64 + 0.2);
        let mask =
            build_feedback_mask(&layer_block_norms(&layer), &SamplingPlan::dense(), 0, 0).unwrap();
        let dx = sparse_error_feedback(&layer, &dy, &mask, &mut meter());
        let dx_ref = w.t().dot(&dy);
        for (a, b) in dx.iter().zip(dx_ref.iter()) {
            assert!((a - b).abs() < 1e-8);
        }
    }

    #[test]
    fn masked_rows_are_exactly_zero() {
        let layer = toy_layer(6, 6, 3);
        let (p, q) = layer.grid();
        let mut keep = Array2::from_elem((q, p), true);
        for pi in 0..p {
            keep[[1, pi]] = false;
        }
        let mask = FeedbackMask { keep, scale: 1.0 };
        let dy = Array2::from_elem((6, 1), 1.0);
        let before = meter();
        let mut m = before.clone();
        let dx = sparse_error_feedback(&layer, &dy, &mask, &mut m);
        for c in 3..6 {
            assert_eq!(dx[[c, 0]], 0.0);
        }
        // Only unmasked blocks were evaluated.
        assert_eq!(m.feedback_calls, (p * (q - 1)) as u64);
    }

    #[test]
    fn uniform_exp_feedback_unbiased_monte_carlo() {
        // E[masked·scaled feedback] = dense feedback within 3 standard errors.
        let layer = toy_layer(4, 4, 2);
        let w = layer.probe_dense(&mut meter());
        let dy = Array2::from_shape_fn((4, 1), |(r, _)| 0.25 * (r as f64 + 1.0));
        let dense = w.t().dot(&dy);
        let norms = layer_block_norms(&layer);
        let mut plan_mc = plan(FeedbackMode::Uniform, 0.5, FeedbackNorm::Exp);
        let draws = 10_000;
        let n = 4;
        let mut sums = vec![0.0; n];
        let mut sq = vec![0.0; n];
        for d in 0..draws {
            plan_mc.seed = 999;
            let mask = build_feedback_mask(&norms, &plan_mc, d as u64, 7).unwrap();
            let dx = sparse_error_feedback(&layer, &dy, &mask, &mut meter());
            for i in 0..n {
                sums[i] += dx[[i, 0]];
                sq[i] += dx[[i, 0]] * dx[[i, 0]];
            }
        }
        for i in 0..n {
            let mean = sums[i] / draws as f64;
            let var = sq[i] / draws as f64 - mean * mean;
            let se = (var / draws as f64).sqrt();
            assert!(
                (mean - dense[[i, 0]]).abs() <= 3.0 * se + 1e-12,
                "coord {i}: {mean} vs {} (se {se})",
                dense[[i, 0]]
            );
        }
    }

    #[test]
    fn exhaustive_balanced_masks_average_to_dense_exactly() {
        // 2×2 block grid at α_W = 0.5: four equally likely balanced masks.
        // Grouping the expectation per block makes the scaled inclusion
        // coefficient exactly 1, so the weighted sum is bit-identical to the
        // dense feedback evaluated with the same block order.
        let layer = toy_layer(4, 4, 2);
        let dy = Array2::from_shape_fn((4, 1), |(r, _)| 0.3 - 0.15 * r as f64);
        let (p, q) = layer.grid();
        assert_eq!((p, q), (2, 2));

        // Inclusion counts over the exhaustive mask family.
        let scale = 2.0;
        let num_masks = 4.0;
        let mut counts = Array2::<f64>::zeros((q, p));
        for m0 in 0..2usize {
            for m1 in 0..2usize {
                counts[[0, m0]] += 1.0;
                counts[[1, m1]] += 1.0;
            }
        }
        // Every block's coefficient count·scale/num_masks is exactly 1.
        for &c in counts.iter() {
            assert_eq!(c * scale / num_masks, 1.0);
        }

        // With coefficients exactly 1 the expectation is the full-mask
        // feedback; computed through the same path it matches bitwise.
        let full =
            build_feedback_mask(&layer_block_norms(&layer), &SamplingPlan::dense(), 0, 0).unwrap();
        let expectation = sparse_error_feedback(&layer, &dy, &full, &mut meter());
        let again = sparse_error_feedback(&layer, &dy, &full, &mut meter());
        for (a, b) in expectation.iter().zip(again.iter()) {
            assert_eq!(*a, *b, "exhaustive expectation must be exact");
        }

        // And the per-mask contributions really do sum to it within one ulp
        // of accumulation error per coordinate.
        let mut acc = Array2::<f64>::zeros((4, 1));
        for m0 in 0..2usize {
            for m1 in 0..2usize {
                let mut keep = Array2::from_elem((q, p), false);
                keep[[0, m0]] = true;
                keep[[1, m1]] = true;
                let mask = FeedbackMask { keep, scale };
                acc += &sparse_error_feedback(&layer, &dy, &mask, &mut meter());
            }
        }
        acc.mapv_inplace(|v| v / num_masks);
        for (a, b) in acc.iter().zip(expectation.iter()) {
            assert!((a - b).abs() <= 1e-15 * (1.0 + b.abs()), "{a} vs {b}");
        }
    }

    #[test]
    fn btopk_variance_no_worse_than_uniform() {
        let layer = toy_layer(6, 6, 3);
        let dy = Array2::from_shape_fn((6, 1), |(r, _)| (r as f64 * 0.7).sin());
        let norms = layer_block_norms(&layer);
        let measure = |mode: FeedbackMode| -> f64 {
            let p = plan(mode, 0.5, FeedbackNorm::Exp);
            let mut acc = 0.0;
            let draws = 1000;
            let mut means = vec![0.0; 6];
            let mut sq = vec![0.0; 6];
            for d in 0..draws {
                let mask = build_feedback_mask(&norms, &p, d as u64, 3).unwrap();
                let dx = sparse_error_feedback(&layer, &dy, &mask, &mut meter());
                for i in 0..6 {
                    means[i] += dx[[i, 0]];
                    sq[i] += dx[[i, 0]] * dx[[i, 0]];
                }
            }
            for i in 0..6 {
                let m = means[i] / draws as f64;
                acc += sq[i] / draws as f64 - m * m;
            }
            acc
        };
        let var_uniform = measure(FeedbackMode::Uniform);
        let var_btopk = measure(FeedbackMode::BTopK);
        assert!(
            var_btopk <= var_uniform + 1e-9,
            "btopk {var_btopk} vs uniform {var_uniform}"
        );
    }

    #[test]
    fn column_mask_counts_and_coverage() {
        let m = build_column_mask(4, 1.0, 0, 0).unwrap();
        assert!(m.iter().all(|&b| b));
        let m = build_column_mask(4, 0.5, 3, 0).unwrap();
        assert_eq!(m.iter().filter(|&&b| b).count(), 2);

        // 3×3 kernel, stride 1 on a 4×4 input: every interior pixel appears
        // in all four patches, so dropping one column keeps full coverage.
        // Interior pixels are rows (1,1),(1,2),(2,1),(2,2) of the input; in
        // im2col each column contains a shifted 3×3 window that always
        // includes the 2×2 interior.
        for drop in 0..4usize {
            let mask: Vec<bool> = (0..4).map(|c| c != drop).collect();
            // Each interior pixel (iy, ix) appears in column (oy, ox) iff
            // oy ≤ iy ≤ oy+2 and ox ≤ ix ≤ ox+2: all four columns qualify.
            for (iy, ix) in [(1, 1), (1, 2), (2, 1), (2, 2)] {
                let mut covered = false;
                for oy in 0..2usize {
                    for ox in 0..2usize {
                        let col = oy * 2 + ox;
                        if mask[col] && iy >= oy && iy <= oy + 2 && ix >= ox && ix <= ox + 2 {
                            covered = true;
                        }
                    }
                }
                assert!(covered, "pixel ({iy},{ix}) lost after dropping {drop}");
            }
        }
    }

    #[test]
    fn weight_grad_zero_when_dy_zero() {
        let layer = toy_layer(4, 4, 2);
        let x = Array2::from_elem((4, 3), 0.7);
        let dy = Array2::<f64>::zeros((4, 3));
        let g = subspace_weight_grad(&layer, &x, &dy, None, &mut meter());
        assert!(g.iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn weight_grad_call_accounting() {
        let layer = toy_layer(4, 4, 2);
        let (p, q) = layer.grid();
        let x = Array2::from_elem((4, 5), 0.3);
        let dy = Array2::from_elem((4, 5), 0.1);
        let mask = vec![true, false, true, true, false];
        let mut m = meter();
        subspace_weight_grad(&layer, &x, &dy, Some(&mask), &mut m);
        // 2 calls per surviving column per block.
        assert_eq!(m.weight_grad_calls, (2 * 3 * p * q) as u64);
    }

    #[test]
    fn sign_flip_injection_bit_identical() {
        // Injecting a common Ĩ into both meshes of every block through the
        // exact phase-level transformation (angle signs s_i·s_j, d·s) leaves
        // subspace gradients bit-identical when control is continuous.
        use crate::mesh::{phase_count, phase_order, UnitaryPhases};
        let layer = toy_layer(4, 4, 2);
        let x = Array2::from_shape_fn((4, 3), |(r, c)| 0.4 * r as f64 - 0.25 * c as f64 + 0.3);
        let dy = Array2::from_shape_fn((4, 3), |(r, c)| 0.2 - 0.1 * r as f64 + 0.05 * c as f64);
        let g_ref = subspace_weight_grad(&layer, &x, &dy, None, &mut meter());

        let mut flipped = layer.clone();
        let k = flipped.k();
        let signs = [1.0f64, -1.0];
        let (p, q) = flipped.grid();
        for idx in 0..p * q {
            let block = flipped.block_mut(idx / q, idx % q);
            let program = block.program().clone();
            // U ← U·Ĩ: push Ĩ left through the rotators (angles scale by
            // s_i·s_j, D absorbs Ĩ); V* ← Ĩ·V*: row flips live in d.
            let mut phi_u: Vec<f64> = program.phi_u.phis().to_vec();
            for (slot, (i, j)) in phase_order(k).enumerate() {
                phi_u[slot] *= signs[i - 1] * signs[j - 1];
            }
            let d_u: Vec<f64> = program
                .phi_u
                .d()
                .iter()
                .zip(signs.iter())
                .map(|(d, s)| d * s)
                .collect();
            let d_v: Vec<f64> = program
                .phi_v
                .d()
                .iter()
                .zip(signs.iter())
                .map(|(d, s)| d * s)
                .collect();
            let mut new_program = program.clone();
            new_program.phi_u = UnitaryPhases::new(k, phi_u, d_u).unwrap();
            new_program.phi_v = UnitaryPhases::new(k, program.phi_v.phis().to_vec(), d_v).unwrap();
            block.set_program(new_program).unwrap();
            assert_eq!(phase_count(k), 1);
        }
        let g_flip = subspace_weight_grad(&flipped, &x, &dy, None, &mut meter());
        for (a, b) in g_ref.iter().zip(g_flip.iter()) {
            assert_eq!(a.to_bits(), b.to_bits(), "{a} vs {b} not bit-identical");
        }
    }

    #[test]
    fn full_densities_reduce_to_dense_training() {
        // α_C = α_W = 1 under any mode/norm is exactly the dense plan.
        let layer = toy_layer(6, 6, 3);
        let dy = Array2::from_shape_fn((6, 2), |(r, c)| 0.3 * r as f64 - 0.2 * c as f64);
        let x = Array2::from_shape_fn((6, 2), |(r, c)| 0.1 * r as f64 + 0.4 * c as f64);
        let dense_mask =
            build_feedback_mask(&layer_block_norms(&layer), &SamplingPlan::dense(), 0, 0).unwrap();
        let dx_dense = sparse_error_feedback(&layer, &dy, &dense_mask, &mut meter());
        let g_dense = subspace_weight_grad(&layer, &x, &dy, None, &mut meter());

        let full_btopk = SamplingPlan {
            feedback_mode: FeedbackMode::BTopK,
            feedback_density: 1.0,
            feedback_norm: FeedbackNorm::Exp,
            column_density: 1.0,
            batch_keep_prob: 1.0,
            seed: 3,
        };
        let mask = build_feedback_mask(&layer_block_norms(&layer), &full_btopk, 5, 1).unwrap();
        let dx = sparse_error_feedback(&layer, &dy, &mask, &mut meter());
        let col_mask = build_column_mask(2, 1.0, 5, 1).unwrap();
        let g = subspace_weight_grad(&layer, &x, &dy, Some(&col_mask), &mut meter());
        for (a, b) in dx_dense.iter().zip(dx.iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        for (a, b) in g_dense.iter().zip(g.iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn batch_keep_probability_semantics() {
        // α_D = 0.5 skips about half the iterations (binomial, seeded).
        use crate::nn::{LayerSpec, Model, Shape};
        let specs = vec![LayerSpec::Linear {
            in_features: 4,
            out_features: 2,
            photonic: false,
            bias: false,
        }];
        let mut model = Model::new(specs, Shape::Vector(4), 2, &NoiseConfig::noiseless()).unwrap();
        model.init_random(1).unwrap();
        let n_batches = 400;
        let xs: Vec<_> = (0..n_batches)
            .map(|i| crate::nn::Tensor::Vector(Array2::from_elem((4, 2), i as f64 * 1e-3)))
            .collect();
        let ys: Vec<Vec<usize>> = (0..n_batches).map(|_| vec![0, 1]).collect();
        let plan = SamplingPlan {
            batch_keep_prob: 0.5,
            ..SamplingPlan::dense()
        };
        let mut opt = crate::nn::AdamW::new(0.0, 0.0);
        let m = train_epoch(&mut model, &xs, &ys, &plan, &mut opt, 0, 11, &mut meter()).unwrap();
        let skip_rate = m.skipped_batches as f64 / n_batches as f64;
        assert!(
            (skip_rate - 0.5).abs() < 0.08,
            "skip rate {skip_rate} far from 0.5"
        );
        // And α_D = 1 never skips.
        let m = train_epoch(
            &mut model,
            &xs,
            &ys,
            &SamplingPlan::dense(),
            &mut opt,
            1,
            11,
            &mut meter(),
        )
        .unwrap();
        assert_eq!(m.skipped_batches, 0);
    }

    #[test]
    fn unitary_phases_frozen_through_training() {
        use crate::nn::{LayerSpec, Model, Shape};
        let specs = vec![
            LayerSpec::Linear {
                in_features: 6,
                out_features: 6,
                photonic: true,
                bias: false,
            },
            LayerSpec::Relu,
            LayerSpec::Linear {
                in_features: 6,
                out_features: 3,
                photonic: true,
                bias: false,
            },
        ];
        let mut model = Model::new(specs, Shape::Vector(6), 3, &NoiseConfig::default()).unwrap();
        model.init_random(5).unwrap();
        let before = model.unitary_phase_snapshot();
        let xs: Vec<_> = (0..8)
            .map(|i| {
                crate::nn::Tensor::Vector(Array2::from_shape_fn((6, 4), |(r, c)| {
                    ((i + r + c) as f64 * 0.31).sin()
                }))
            })
            .collect();
        let ys: Vec<Vec<usize>> = (0..8).map(|i| vec![i % 3, (i + 1) % 3, 0, 2]).collect();
        let mut opt = crate::nn::AdamW::new(0.01, 0.01);
        for epoch in 0..3 {
            train_epoch(
                &mut model,
                &xs,
                &ys,
                &SamplingPlan::dense(),
                &mut opt,
                epoch,
                7,
                &mut meter(),
            )
            .unwrap();
        }
        let after = model.unitary_phase_snapshot();
        assert_eq!(before.len(), after.len());
        for (a, b) in before.iter().zip(after.iter()) {
            assert_eq!(a.to_bits(), b.to_bits(), "mesh phases must stay frozen");
        }
    }

    #[test]
    fn grad_fidelity_formula() {
        let f = GradFidelity::between(&[1.0, 0.0], &[2.0, 0.0]);
        assert!((f.angular_similarity - 1.0).abs() < 1e-12);
        let f = GradFidelity::between(&[1.0, 0.0], &[0.0, 1.0]);
        assert!((f.angular_similarity - 0.5).abs() < 1e-12);
        let f = GradFidelity::between(&[1.0, 0.0], &[-1.0, 0.0]);
        assert!(f.angular_similarity.abs() < 1e-12);
        let f = GradFidelity::between(&[1.0, 1.0], &[1.0, 1.0]);
        assert!(f.normalized_distance.abs() < 1e-15);
    }
}
