//! The first two on-chip learning stages, orchestrated per block and fully
//! parallel across blocks: identity calibration (prepare both meshes to a
//! common sign-flip state using only port measurements) and parallel mapping
//! (regress each block onto its weight target with alternating coordinate
//! descent, then project the singular values analytically).

use crate::cost::CostMeter;
use crate::error::{Error, Result};
use crate::mesh::phase_count;
use crate::noise::NoiseConfig;
use crate::ptc::{oracle, PhaseProgram, PtcBlock};
use crate::rng::{derive_seed, Stream};
use crate::zoo::{ZcdOptimizer, ZooSchedule, ZtpOptimizer};
use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

/// Which zeroth-order optimizer a stage runs. Best-solution recording is
/// always on (the "-B" variants).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ZooKind {
    #[default]
    Zcd,
    Ztp,
}

/// An M×N photonic linear operator blocked into a P×Q grid of k×k tensor
/// cores, zero-padded up to multiples of k.
#[derive(Debug, Clone)]
pub struct BlockedLinear {
    rows: usize,
    cols: usize,
    k: usize,
    p: usize,
    q: usize,
    blocks: Vec<PtcBlock>,
}

impl BlockedLinear {
    /// Identity-programmed grid. `layer_id` keeps noise draws distinct
    /// between layers sharing one experiment seed.
    pub fn new(
        rows: usize,
        cols: usize,
        k: usize,
        cfg: &NoiseConfig,
        layer_id: u64,
    ) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::Shape("layer dimensions must be positive".into()));
        }
        let p = rows.div_ceil(k);
        let q = cols.div_ceil(k);
        let mut blocks = Vec::with_capacity(p * q);
        for idx in 0..p * q {
            blocks.push(PtcBlock::new(
                k,
                cfg.clone(),
                derive_seed(layer_id, Stream::NoiseState, &[idx as u64]),
            )?);
        }
        Ok(Self {
            rows,
            cols,
            k,
            p,
            q,
            blocks,
        })
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.p, self.q)
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn block(&self, bp: usize, bq: usize) -> &PtcBlock {
        &self.blocks[bp * self.q + bq]
    }

    pub fn block_mut(&mut self, bp: usize, bq: usize) -> &mut PtcBlock {
        &mut self.blocks[bp * self.q + bq]
    }

    pub fn blocks(&self) -> &[PtcBlock] {
        &self.blocks
    }

    pub fn blocks_mut(&mut self) -> &mut [PtcBlock] {
        &mut self.blocks
    }

    /// Rows of this block-row that carry real (unpadded) outputs.
    pub fn active_rows(&self, bp: usize) -> usize {
        (self.rows - bp * self.k).min(self.k)
    }

    /// Columns of this block-column that carry real (unpadded) inputs.
    pub fn active_cols(&self, bq: usize) -> usize {
        (self.cols - bq * self.k).min(self.k)
    }

    /// The k×k zero-padded target for one block of a dense M×N matrix.
    pub fn block_target(&self, w: &Array2<f64>, bp: usize, bq: usize) -> Array2<f64> {
        let mut t = Array2::<f64>::zeros((self.k, self.k));
        for r in 0..self.active_rows(bp) {
            for c in 0..self.active_cols(bq) {
                t[[r, c]] = w[[bp * self.k + r, bq * self.k + c]];
            }
        }
        t
    }

    /// Program every block from the SVD of its target sub-matrix.
    pub fn program_from_dense(&mut self, w: &Array2<f64>) -> Result<()> {
        if w.nrows() != self.rows || w.ncols() != self.cols {
            return Err(Error::Shape(format!(
                "target is {}×{}, layer is {}×{}",
                w.nrows(),
                w.ncols(),
                self.rows,
                self.cols
            )));
        }
        if w.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidInput("target has non-finite entries".into()));
        }
        for bp in 0..self.p {
            for bq in 0..self.q {
                let t = self.block_target(w, bp, bq);
                let program = PhaseProgram::from_dense(&t)?;
                self.block_mut(bp, bq).set_program(program)?;
            }
        }
        Ok(())
    }

    /// Random program: Haar-ish meshes with singular values scaled so the
    /// dense equivalent matches a fan-in Gaussian initialization.
    pub fn random_init(&mut self, seed: u64) -> Result<()> {
        use rand::Rng;
        let sigma_mag = (2.0 * self.k as f64 / self.cols as f64).sqrt();
        for idx in 0..self.blocks.len() {
            let mut rng = crate::rng::stream_rng(seed, Stream::Init, &[idx as u64]);
            let m = phase_count(self.k);
            let phi_u: Vec<f64> = (0..m).map(|_| rng.random_range(0.0..2.0 * PI)).collect();
            let phi_v: Vec<f64> = (0..m).map(|_| rng.random_range(0.0..2.0 * PI)).collect();
            let sigma: Vec<f64> = (0..self.k)
                .map(|_| sigma_mag * rng.random_range(-1.0..1.0f64))
                .collect();
            let block = &mut self.blocks[idx];
            block.set_unitary_phases(&phi_u, &phi_v)?;
            block.set_sigma(&sigma)?;
        }
        Ok(())
    }

    /// Blocked matvec `y = W̃ x` through the optical ports, padding stripped.
    pub fn forward(&self, x: &Array1<f64>, meter: &mut CostMeter) -> Array1<f64> {
        assert_eq!(x.len(), self.cols, "input length mismatch");
        let mut y = Array1::<f64>::zeros(self.rows);
        for bp in 0..self.p {
            let ar = self.active_rows(bp);
            for bq in 0..self.q {
                let ac = self.active_cols(bq);
                let mut xin = Array1::<f64>::zeros(self.k);
                for c in 0..ac {
                    xin[c] = x[bq * self.k + c];
                }
                let block = self.block(bp, bq);
                // Count only the unpadded work of this call.
                let mut sub = CostMeter::default();
                let out = block.forward(&xin, &mut sub);
                meter.record_forward_call(ar, ac);
                for r in 0..ar {
                    y[bp * self.k + r] += out[r];
                }
            }
        }
        y
    }

    /// Dense feedback `dx = W̃ᵀ dy` through reverse passes over all blocks.
    pub fn adjoint(&self, dy: &Array1<f64>, meter: &mut CostMeter) -> Array1<f64> {
        assert_eq!(dy.len(), self.rows, "gradient length mismatch");
        let mut dx = Array1::<f64>::zeros(self.cols);
        for bq in 0..self.q {
            let ac = self.active_cols(bq);
            for bp in 0..self.p {
                let ar = self.active_rows(bp);
                let mut zin = Array1::<f64>::zeros(self.k);
                for r in 0..ar {
                    zin[r] = dy[bp * self.k + r];
                }
                let out = self.block(bp, bq).adjoint(&zin, meter);
                for c in 0..ac {
                    dx[bq * self.k + c] += out[c];
                }
            }
        }
        dx
    }

    /// Dense equivalent measured through basis-vector probes (k PTC calls per
    /// block-column); the firewall-compliant way to observe W̃.
    pub fn probe_dense(&self, meter: &mut CostMeter) -> Array2<f64> {
        let mut w = Array2::<f64>::zeros((self.rows, self.cols));
        for c in 0..self.cols {
            let mut e = Array1::<f64>::zeros(self.cols);
            e[c] = 1.0;
            let y = self.forward(&e, meter);
            for r in 0..self.rows {
                w[[r, c]] = y[r];
            }
        }
        w
    }
}

/// Identity-calibration settings.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IcConfig {
    /// Epochs; one epoch samples every rotation phase once on average.
    pub epochs: usize,
    pub schedule: ZooSchedule,
    pub optimizer: ZooKind,
}

impl IcConfig {
    pub fn defaults_for_bits(bits: u32) -> Self {
        Self {
            epochs: 400,
            schedule: ZooSchedule::for_control_bits(bits),
            optimizer: ZooKind::Zcd,
        }
    }
}

/// Per-block identity-calibration outcome.
///
/// `mse_u`/`mse_v` are oracle instrumentation (`‖|Ũ|−I‖²/k²`, hidden-state
/// access): they report calibration quality and must not feed back into
/// training decisions.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IcReport {
    pub final_loss: f64,
    pub mse_u: f64,
    pub mse_v: f64,
    pub objective_calls: u64,
    pub ptc_calls: u64,
}

/// The fixed, known, non-degenerate Σ used during calibration:
/// σ_i = (k−i)/k, all distinct in (0, 1].
pub fn calibration_sigma(k: usize) -> Vec<f64> {
    (0..k).map(|i| (k - i) as f64 / k as f64).collect()
}

fn ic_probe_loss(block: &PtcBlock, sigma_read: &[f64], meter: &mut CostMeter) -> f64 {
    let k = block.k();
    let mut loss = 0.0;
    for j in 0..k {
        let mut e = Array1::<f64>::zeros(k);
        e[j] = 1.0;
        let y = block.forward(&e, meter);
        for r in 0..k {
            let target = if r == j { 1.0 } else { 0.0 };
            let d = y[r] / sigma_read[j] - target;
            loss += d * d;
        }
    }
    loss
}

/// Stage 1: calibrate one block's meshes toward a common sign-flip state.
///
/// Programs Σ to the fixed distinct diagonal, zeroes both meshes (the
/// uncalibrated state), and minimizes the port-measured surrogate
/// `Σ_j ‖forward(e_j)/σ̃_j − e_j‖²` by zeroth-order search over all rotation
/// phases. The best-recorded solution is programmed back before reporting.
pub fn identity_calibrate(
    block: &mut PtcBlock,
    cfg: &IcConfig,
    seed: u64,
    meter: &mut CostMeter,
) -> Result<IcReport> {
    let k = block.k();
    let sigma = calibration_sigma(k);
    // Degeneracy guard: Σ⁻¹ and sign resolution need distinct nonzero values.
    for i in 0..k {
        if sigma[i] == 0.0 {
            return Err(Error::Precondition("calibration Σ has a zero entry".into()));
        }
        for j in (i + 1)..k {
            if (sigma[i] - sigma[j]).abs() < 1e-12 {
                return Err(Error::Precondition(
                    "calibration Σ has repeated entries".into(),
                ));
            }
        }
    }

    let m = phase_count(k);
    let mut program = PhaseProgram::identity(k);
    let (phi_s, scale) = crate::ptc::sigma_to_phases(&sigma);
    program.phi_sigma = phi_s;
    program.sigma_scale = scale;
    block.set_program(program)?;
    let sigma_read = block.read_sigma();

    let mut phis = vec![0.0; 2 * m];
    let steps = cfg.epochs * 2 * m;
    let calls;
    {
        let mut probes = CostMeter::default();
        let mut objective = |cand: &[f64]| {
            block
                .set_unitary_phases(&cand[..m], &cand[m..])
                .expect("candidate keeps program shape");
            ic_probe_loss(block, &sigma_read, &mut probes)
        };
        match cfg.optimizer {
            ZooKind::Zcd => {
                let mut opt = ZcdOptimizer::new(cfg.schedule.clone(), seed);
                for _ in 0..steps {
                    opt.step(&mut objective, &mut phis, &[])?;
                }
                let best = opt.best().expect("at least one evaluation");
                phis.copy_from_slice(&best.best_params);
                calls = opt.evals();
            }
            ZooKind::Ztp => {
                let mut opt = ZtpOptimizer::new(cfg.schedule.clone(), seed);
                for _ in 0..steps {
                    opt.step(&mut objective, &mut phis, &[])?;
                }
                let best = opt.best().expect("at least one evaluation");
                phis.copy_from_slice(&best.best_params);
                calls = opt.evals();
            }
        }
        meter.merge(&probes);
    }
    block.set_unitary_phases(&phis[..m], &phis[m..])?;

    let mut final_meter = CostMeter::default();
    let final_loss = ic_probe_loss(block, &sigma_read, &mut final_meter);
    meter.merge(&final_meter);

    let (u_eff, _s, vt_eff) = oracle::effective_factors(block);
    Ok(IcReport {
        final_loss,
        mse_u: oracle::abs_identity_mse(&u_eff),
        mse_v: oracle::abs_identity_mse(&vt_eff),
        objective_calls: calls,
        ptc_calls: calls * k as u64,
    })
}

/// Parallel-mapping settings.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MapConfig {
    /// Alternation epochs; each runs one full sweep on Φ^U then one on Φ^V.
    pub epochs: usize,
    pub schedule: ZooSchedule,
    pub optimizer: ZooKind,
    /// Whether the two OSP measurement passes run through the noise pipeline.
    pub osp_noisy_passes: bool,
}

impl MapConfig {
    pub fn defaults_for_bits(bits: u32) -> Self {
        Self {
            epochs: 300,
            schedule: ZooSchedule::for_control_bits(bits),
            optimizer: ZooKind::Zcd,
            osp_noisy_passes: true,
        }
    }
}

/// Mapping outcome for one block.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BlockMapReport {
    pub row: usize,
    pub col: usize,
    /// Normalized distance ‖W̃−W‖²_F/‖W‖²_F right after SVD initialization.
    pub dist_init: f64,
    /// After zeroth-order refinement, before OSP.
    pub dist_before: f64,
    /// After the optimal singular-value projection.
    pub dist_after: f64,
    pub objective_calls: u64,
    pub converged: bool,
}

/// Mapping outcome for a whole layer.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MappingReport {
    pub blocks: Vec<BlockMapReport>,
}

impl MappingReport {
    pub fn mean_dist_after(&self) -> f64 {
        if self.blocks.is_empty() {
            return 0.0;
        }
        self.blocks.iter().map(|b| b.dist_after).sum::<f64>() / self.blocks.len() as f64
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("block_row,block_col,dist_before,dist_after,calls\n");
        for b in &self.blocks {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                b.row, b.col, b.dist_before, b.dist_after, b.objective_calls
            ));
        }
        out
    }
}

/// Normalized squared distance between the probed block response and its
/// target over the active (unpadded) region.
fn block_distance(
    block: &PtcBlock,
    target: &Array2<f64>,
    active_rows: usize,
    active_cols: usize,
    meter: &mut CostMeter,
) -> f64 {
    let k = block.k();
    let mut num = 0.0;
    let mut den = 0.0;
    for c in 0..active_cols {
        let mut e = Array1::<f64>::zeros(k);
        e[c] = 1.0;
        let y = block.forward(&e, meter);
        for r in 0..active_rows {
            let d = y[r] - target[[r, c]];
            num += d * d;
            den += target[[r, c]] * target[[r, c]];
        }
    }
    if den == 0.0 {
        num
    } else {
        num / den
    }
}

fn map_probe_loss(block: &PtcBlock, target: &Array2<f64>, meter: &mut CostMeter) -> f64 {
    let k = block.k();
    let mut loss = 0.0;
    for c in 0..k {
        let mut e = Array1::<f64>::zeros(k);
        e[c] = 1.0;
        let y = block.forward(&e, meter);
        for r in 0..k {
            let d = y[r] - target[[r, c]];
            loss += d * d;
        }
    }
    loss
}

/// Stage 2 for one block: SVD initialization, alternating zeroth-order
/// refinement of the two meshes against port-probed regression loss, then
/// analytic singular-value projection.
#[allow(clippy::too_many_arguments)]
pub fn map_block(
    block: &mut PtcBlock,
    target: &Array2<f64>,
    cfg: &MapConfig,
    seed: u64,
    row: usize,
    col: usize,
    active_rows: usize,
    active_cols: usize,
    meter: &mut CostMeter,
) -> Result<BlockMapReport> {
    let k = block.k();
    if target.iter().any(|x| !x.is_finite()) {
        return Err(Error::InvalidInput(
            "mapping target has non-finite entries".into(),
        ));
    }

    // Zero target: Σ ← 0 via OSP, no zeroth-order search needed.
    if target.iter().all(|&x| x == 0.0) {
        let dist_init = block_distance(block, target, active_rows, active_cols, meter);
        block.osp_project(target, cfg.osp_noisy_passes, meter)?;
        let dist_after = block_distance(block, target, active_rows, active_cols, meter);
        return Ok(BlockMapReport {
            row,
            col,
            dist_init,
            dist_before: dist_init,
            dist_after,
            objective_calls: 0,
            converged: true,
        });
    }

    block.set_program(PhaseProgram::from_dense(target)?)?;
    let dist_init = block_distance(block, target, active_rows, active_cols, meter);

    let m = phase_count(k);
    let mut phis = vec![0.0; 2 * m];
    phis[..m].copy_from_slice(block.program().phi_u.phis());
    phis[m..].copy_from_slice(block.program().phi_v.phis());
    let u_coords: Vec<usize> = (0..m).collect();
    let v_coords: Vec<usize> = (m..2 * m).collect();

    let calls;
    {
        let mut probes = CostMeter::default();
        let mut objective = |cand: &[f64]| {
            block
                .set_unitary_phases(&cand[..m], &cand[m..])
                .expect("candidate keeps program shape");
            map_probe_loss(block, target, &mut probes)
        };
        match cfg.optimizer {
            ZooKind::Zcd => {
                let mut opt = ZcdOptimizer::new(cfg.schedule.clone(), seed);
                for _ in 0..cfg.epochs {
                    for _ in 0..m {
                        opt.step(&mut objective, &mut phis, &u_coords)?;
                    }
                    for _ in 0..m {
                        opt.step(&mut objective, &mut phis, &v_coords)?;
                    }
                }
                if let Some(best) = opt.best() {
                    phis.copy_from_slice(&best.best_params);
                }
                calls = opt.evals();
            }
            ZooKind::Ztp => {
                let mut opt = ZtpOptimizer::new(cfg.schedule.clone(), seed);
                for _ in 0..cfg.epochs {
                    for _ in 0..m {
                        opt.step(&mut objective, &mut phis, &u_coords)?;
                    }
                    for _ in 0..m {
                        opt.step(&mut objective, &mut phis, &v_coords)?;
                    }
                }
                if let Some(best) = opt.best() {
                    phis.copy_from_slice(&best.best_params);
                }
                calls = opt.evals();
            }
        }
        meter.merge(&probes);
    }
    block.set_unitary_phases(&phis[..m], &phis[m..])?;

    let dist_before = block_distance(block, target, active_rows, active_cols, meter);
    block.osp_project(target, cfg.osp_noisy_passes, meter)?;
    let dist_after = block_distance(block, target, active_rows, active_cols, meter);

    Ok(BlockMapReport {
        row,
        col,
        dist_init,
        dist_before,
        dist_after,
        objective_calls: calls,
        converged: dist_after.is_finite(),
    })
}

/// Stage 2 over a whole layer, block-parallel.
///
/// Every block owns an independent seed derived from (seed, block index), so
/// results are identical for any worker count.
pub fn parallel_map(
    layer: &mut BlockedLinear,
    w_target: &Array2<f64>,
    cfg: &MapConfig,
    seed: u64,
    workers: usize,
    meter: &mut CostMeter,
) -> Result<MappingReport> {
    let (rows, cols) = layer.dims();
    if w_target.nrows() != rows || w_target.ncols() != cols {
        return Err(Error::Shape(format!(
            "target is {}×{}, layer is {rows}×{cols}",
            w_target.nrows(),
            w_target.ncols()
        )));
    }
    let (p, q) = layer.grid();
    let targets: Vec<Array2<f64>> = (0..p * q)
        .map(|idx| layer.block_target(w_target, idx / q, idx % q))
        .collect();
    let actives: Vec<(usize, usize)> = (0..p * q)
        .map(|idx| (layer.active_rows(idx / q), layer.active_cols(idx % q)))
        .collect();

    let workers = workers.max(1);
    let chunk = (p * q).div_ceil(workers);
    let mut results: Vec<Result<(BlockMapReport, CostMeter)>> = Vec::with_capacity(p * q);
    {
        let blocks = layer.blocks_mut();
        let mut slots: Vec<Vec<Result<(BlockMapReport, CostMeter)>>> = Vec::new();
        std::thread::scope(|scope| {
            let mut handles = Vec::new();
            for (w_idx, block_chunk) in blocks.chunks_mut(chunk).enumerate() {
                let targets = &targets;
                let actives = &actives;
                let handle = scope.spawn(move || {
                    let mut out = Vec::with_capacity(block_chunk.len());
                    for (off, block) in block_chunk.iter_mut().enumerate() {
                        let idx = w_idx * chunk + off;
                        let mut local = CostMeter::default();
                        let r = map_block(
                            block,
                            &targets[idx],
                            cfg,
                            derive_seed(seed, Stream::Map, &[idx as u64]),
                            idx / q,
                            idx % q,
                            actives[idx].0,
                            actives[idx].1,
                            &mut local,
                        )
                        .map(|rep| (rep, local));
                        out.push(r);
                    }
                    out
                });
                handles.push(handle);
            }
            for handle in handles {
                slots.push(handle.join().expect("mapping worker panicked"));
            }
        });
        for chunk_results in slots {
            results.extend(chunk_results);
        }
    }

    let mut blocks_out = Vec::with_capacity(p * q);
    for r in results {
        let (rep, local) = r?;
        meter.merge(&local);
        blocks_out.push(rep);
    }
    Ok(MappingReport { blocks: blocks_out })
}
