//! Experiment orchestration: the three-stage flow (identity calibration →
//! parallel mapping → subspace learning) over a configured model and
//! dataset, with metrics, cost reports, plot data, and checkpoints written
//! to the output directory. Any prefix/suffix subset of stages can run;
//! from-scratch subspace learning never reads mapping state.

use crate::config::ExperimentConfig;
use crate::cost::{self, CostMeter, LayerDims, StepBreakdown};
use crate::error::{Error, Result};
use crate::nn::{cosine_lr, AdamW, Layer, LayerSpec, MatMul, Model, Shape};
use crate::noise::NoiseConfig;
use crate::ptc::{PhaseProgram, PhaseProgramRecord};
use crate::rng::{derive_seed, Stream};
use crate::sparse::{evaluate, train_epoch, EpochMetrics, SamplingPlan};
use crate::stages::{
    identity_calibrate, parallel_map, IcConfig, IcReport, MapConfig, MappingReport, ZooKind,
};
use crate::zoo::ZooSchedule;
use ndarray::Array2;
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

/// Serialized state of one model layer.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerCheckpoint {
    Photonic {
        rows: usize,
        cols: usize,
        k: usize,
        blocks: Vec<PhaseProgramRecord>,
        bias: Option<Vec<f64>>,
    },
    Electronic {
        rows: usize,
        cols: usize,
        weight: Vec<f64>,
        bias: Option<Vec<f64>>,
    },
    Stateless,
    Branch {
        layers: Vec<LayerCheckpoint>,
    },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelCheckpoint {
    pub layers: Vec<LayerCheckpoint>,
}

fn bias_values(bias: &Option<crate::nn::BiasParam>) -> Option<Vec<f64>> {
    bias.as_ref().map(|(b, ..)| b.to_vec())
}

fn checkpoint_layers(layers: &[Layer]) -> Vec<LayerCheckpoint> {
    layers
        .iter()
        .map(|layer| match layer {
            Layer::Linear { op, bias, .. } => checkpoint_op(op, bias_values(bias)),
            Layer::Conv2d { op, .. } => checkpoint_op(op, None),
            Layer::Residual { branch } => LayerCheckpoint::Branch {
                layers: checkpoint_layers(branch),
            },
            _ => LayerCheckpoint::Stateless,
        })
        .collect()
}

fn checkpoint_op(op: &MatMul, bias: Option<Vec<f64>>) -> LayerCheckpoint {
    match op {
        MatMul::Electronic { weight, .. } => LayerCheckpoint::Electronic {
            rows: weight.nrows(),
            cols: weight.ncols(),
            weight: weight.iter().cloned().collect(),
            bias,
        },
        MatMul::Photonic { blocks, .. } => {
            let (p, q) = blocks.grid();
            let records = (0..p * q)
                .map(|idx| PhaseProgramRecord::from(blocks.block(idx / q, idx % q).program()))
                .collect();
            LayerCheckpoint::Photonic {
                rows: blocks.dims().0,
                cols: blocks.dims().1,
                k: blocks.k(),
                blocks: records,
                bias,
            }
        }
    }
}

/// Snapshot the model state (block programs plus electronic parameters).
pub fn checkpoint_model(model: &Model) -> ModelCheckpoint {
    ModelCheckpoint {
        layers: checkpoint_layers(&model.layers),
    }
}

fn restore_layers(layers: &mut [Layer], ckpt: &[LayerCheckpoint]) -> Result<()> {
    if layers.len() != ckpt.len() {
        return Err(Error::Shape("checkpoint layer count mismatch".into()));
    }
    for (layer, saved) in layers.iter_mut().zip(ckpt.iter()) {
        match (layer, saved) {
            (Layer::Linear { op, bias, .. }, _) => {
                restore_op(op, saved)?;
                if let (Some((b, ..)), Some(values)) = (
                    bias.as_mut(),
                    match saved {
                        LayerCheckpoint::Photonic { bias, .. }
                        | LayerCheckpoint::Electronic { bias, .. } => bias.as_ref(),
                        _ => None,
                    },
                ) {
                    if b.len() != values.len() {
                        return Err(Error::Shape("bias length mismatch".into()));
                    }
                    for (dst, src) in b.iter_mut().zip(values.iter()) {
                        *dst = *src;
                    }
                }
            }
            (Layer::Conv2d { op, .. }, _) => restore_op(op, saved)?,
            (Layer::Residual { branch }, LayerCheckpoint::Branch { layers }) => {
                restore_layers(branch, layers)?
            }
            (
                Layer::Relu { .. } | Layer::AvgPool { .. } | Layer::Flatten { .. },
                LayerCheckpoint::Stateless,
            ) => {}
            _ => return Err(Error::Shape("checkpoint kind mismatch".into())),
        }
    }
    Ok(())
}

fn restore_op(op: &mut MatMul, saved: &LayerCheckpoint) -> Result<()> {
    match (op, saved) {
        (
            MatMul::Electronic { weight, .. },
            LayerCheckpoint::Electronic {
                rows,
                cols,
                weight: w,
                ..
            },
        ) => {
            if weight.nrows() != *rows || weight.ncols() != *cols {
                return Err(Error::Shape("electronic weight shape mismatch".into()));
            }
            for (dst, src) in weight.iter_mut().zip(w.iter()) {
                *dst = *src;
            }
            Ok(())
        }
        (
            op @ MatMul::Photonic { .. },
            LayerCheckpoint::Photonic {
                rows,
                cols,
                k,
                blocks: recs,
                ..
            },
        ) => {
            if let MatMul::Photonic { blocks, .. } = op {
                if blocks.dims() != (*rows, *cols) || blocks.k() != *k {
                    return Err(Error::Shape("photonic layer shape mismatch".into()));
                }
                let (p, q) = blocks.grid();
                if recs.len() != p * q {
                    return Err(Error::Shape("block count mismatch".into()));
                }
                for (idx, rec) in recs.iter().enumerate() {
                    let program = PhaseProgram::try_from(rec)?;
                    blocks.block_mut(idx / q, idx % q).set_program(program)?;
                }
            }
            op.pull_sigma();
            Ok(())
        }
        _ => Err(Error::Shape("checkpoint/layer kind mismatch".into())),
    }
}

/// Restore a checkpoint into a freshly built model of the same architecture.
pub fn restore_model(model: &mut Model, ckpt: &ModelCheckpoint) -> Result<()> {
    restore_layers(&mut model.layers, &ckpt.layers)
}

/// Per-stage artifacts of one run.
#[derive(Debug, Clone, Serialize, Deserialize, Default)]
pub struct PipelineSummary {
    pub ic_reports: Vec<IcReport>,
    pub mapping: Vec<MappingReport>,
    pub epochs: Vec<EpochMetrics>,
    pub test_accuracy: Option<f64>,
    pub pretrain_test_accuracy: Option<f64>,
    pub energy_total: u64,
}

/// Formula-projected steps per training iteration for the photonic layers of
/// a model under a sampling plan.
pub fn projected_steps_per_iteration(
    specs: &[LayerSpec],
    input: Shape,
    batch: usize,
    k: usize,
    plan: &SamplingPlan,
) -> StepBreakdown {
    let mut total = StepBreakdown::default();
    for dims in photonic_layer_dims(specs, input, k) {
        let p = dims.p();
        let q = dims.q();
        let per_row = ((plan.feedback_density * p as f64).ceil() as usize).clamp(1, p);
        let row_sums = vec![per_row; q];
        let cols = dims.h_out * dims.w_out;
        let kept_cols = ((plan.column_density * cols as f64).ceil() as usize).clamp(1, cols);
        let s = cost::timesteps(&dims, batch, kept_cols, &row_sums);
        total.forward += s.forward;
        total.weight_grad += s.weight_grad;
        total.feedback += s.feedback;
    }
    total
}

/// LayerDims of each photonic matmul in the chain, in forward order.
pub fn photonic_layer_dims(specs: &[LayerSpec], input: Shape, k: usize) -> Vec<LayerDims> {
    let mut dims = Vec::new();
    let mut shape = input;
    for spec in specs {
        match spec {
            LayerSpec::Linear {
                in_features,
                out_features,
                photonic,
                ..
            } => {
                if *photonic {
                    dims.push(LayerDims::linear(*out_features, *in_features, k));
                }
                shape = Shape::Vector(*out_features);
            }
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
                photonic,
            } => {
                if let Shape::Image(_, h, w) = shape {
                    let h_out = (h + 2 * padding - kernel) / stride + 1;
                    let w_out = (w + 2 * padding - kernel) / stride + 1;
                    if *photonic {
                        dims.push(LayerDims {
                            c_out: *out_channels,
                            c_in: *in_channels,
                            kernel: *kernel,
                            stride: *stride,
                            h,
                            w,
                            h_out,
                            w_out,
                            k,
                        });
                    }
                    shape = Shape::Image(*out_channels, h_out, w_out);
                }
            }
            LayerSpec::AvgPool { kernel } => {
                if let Shape::Image(c, h, w) = shape {
                    shape = Shape::Image(c, h / kernel, w / kernel);
                }
            }
            LayerSpec::Flatten => {
                shape = Shape::Vector(shape.features());
            }
            LayerSpec::Residual { branch } => {
                dims.extend(photonic_layer_dims(branch, shape, k));
            }
            LayerSpec::Relu => {}
        }
    }
    dims
}

/// Train the electronic twin offline (exact math), returning it with its
/// test accuracy.
pub fn pretrain_electronic(
    cfg: &ExperimentConfig,
    data: &crate::dataset::DatasetHandle,
) -> Result<(Model, f64)> {
    pretrain_electronic_on(cfg, data)
}

/// Like [`pretrain_electronic`], against an explicit dataset handle (used by
/// transfer experiments that pretrain on a class subset).
pub fn pretrain_electronic_on(
    cfg: &ExperimentConfig,
    data: &crate::dataset::DatasetHandle,
) -> Result<(Model, f64)> {
    let mut specs = cfg.model.layers.clone();
    set_photonic(&mut specs, false);
    let mut model = Model::new(specs, cfg.model.input, cfg.k, &NoiseConfig::noiseless())?;
    model.init_random(derive_seed(cfg.seed, Stream::Init, &[0xe1ec]))?;
    let mut opt = AdamW::new(cfg.pretrain.lr, cfg.pretrain.weight_decay);
    let mut meter = CostMeter::default();
    let plan = SamplingPlan::dense();
    for epoch in 0..cfg.pretrain.epochs {
        opt.lr = cosine_lr(epoch, cfg.pretrain.epochs, cfg.pretrain.lr, 0.0);
        let batches = data.batches(
            true,
            cfg.train.batch_size,
            Some(derive_seed(
                cfg.seed,
                Stream::Dataset,
                &[0xe1ec, epoch as u64],
            )),
        );
        let (xs, ys): (Vec<_>, Vec<_>) = batches.into_iter().unzip();
        train_epoch(
            &mut model, &xs, &ys, &plan, &mut opt, epoch, cfg.seed, &mut meter,
        )?;
    }
    let test_batches = data.batches(false, cfg.train.batch_size, None);
    let (xs, ys): (Vec<_>, Vec<_>) = test_batches.into_iter().unzip();
    let acc = evaluate(&mut model, &xs, &ys, &mut meter)?;
    Ok((model, acc))
}

fn set_photonic(specs: &mut [LayerSpec], value: bool) {
    for spec in specs {
        match spec {
            LayerSpec::Linear { photonic, .. } | LayerSpec::Conv2d { photonic, .. } => {
                *photonic = value
            }
            LayerSpec::Residual { branch } => set_photonic(branch, value),
            _ => {}
        }
    }
}

/// Stage 1 over every photonic layer of the model.
pub fn run_calibration(
    model: &mut Model,
    cfg: &ExperimentConfig,
    meter: &mut CostMeter,
) -> Result<Vec<IcReport>> {
    let ic = IcConfig {
        epochs: cfg.ic.epochs,
        schedule: stage_schedule(cfg.ic.init_step, cfg.ic.decay, &cfg.noise),
        optimizer: ZooKind::Zcd,
    };
    let mut reports = Vec::new();
    let mut layer_idx = 0u64;
    for_each_photonic(&mut model.layers, &mut |blocks| {
        let (p, q) = blocks.grid();
        for idx in 0..p * q {
            let seed = derive_seed(cfg.seed, Stream::Calibrate, &[layer_idx, idx as u64]);
            let report = identity_calibrate(blocks.block_mut(idx / q, idx % q), &ic, seed, meter)?;
            reports.push(report);
        }
        layer_idx += 1;
        Ok(())
    })?;
    Ok(reports)
}

/// Stage 2: map every photonic layer onto the twin's weights.
pub fn run_mapping(
    model: &mut Model,
    twin: &Model,
    cfg: &ExperimentConfig,
    meter: &mut CostMeter,
) -> Result<Vec<MappingReport>> {
    let map_cfg = MapConfig {
        epochs: cfg.map.epochs,
        schedule: stage_schedule(cfg.map.init_step, cfg.map.decay, &cfg.noise),
        optimizer: ZooKind::Zcd,
        osp_noisy_passes: cfg.map.osp_noisy_passes,
    };
    let targets = electronic_weights(twin);
    let mut reports = Vec::new();
    let mut photonic_idx = 0usize;
    for_each_photonic(&mut model.layers, &mut |blocks| {
        let target = targets.get(photonic_idx).ok_or_else(|| {
            Error::Shape("twin has fewer matmul layers than the photonic model".into())
        })?;
        let seed = derive_seed(cfg.seed, Stream::Map, &[photonic_idx as u64]);
        let report = parallel_map(blocks, target, &map_cfg, seed, cfg.workers, meter)?;
        reports.push(report);
        photonic_idx += 1;
        Ok(())
    })?;
    // Shadow σ values must match the reprogrammed blocks.
    pull_all_sigma(&mut model.layers);
    Ok(reports)
}

fn stage_schedule(init_step: f64, decay: f64, noise: &NoiseConfig) -> ZooSchedule {
    let mut s = ZooSchedule::for_control_bits(noise.bitwidth_unitary);
    s.init_step = init_step;
    s.decay = decay;
    s
}

fn for_each_photonic(
    layers: &mut [Layer],
    f: &mut impl FnMut(&mut crate::stages::BlockedLinear) -> Result<()>,
) -> Result<()> {
    for layer in layers {
        match layer {
            Layer::Linear { op, .. } | Layer::Conv2d { op, .. } => {
                if let MatMul::Photonic { blocks, .. } = op {
                    f(blocks)?;
                }
            }
            Layer::Residual { branch } => for_each_photonic(branch, f)?,
            _ => {}
        }
    }
    Ok(())
}

fn pull_all_sigma(layers: &mut [Layer]) {
    for layer in layers {
        match layer {
            Layer::Linear { op, .. } | Layer::Conv2d { op, .. } => op.pull_sigma(),
            Layer::Residual { branch } => pull_all_sigma(branch),
            _ => {}
        }
    }
}

/// Reinitialize only the Σ paths of every photonic layer (meshes stay
/// frozen): the starting point for transfer runs that re-learn singular
/// values over inherited bases.
pub fn reset_sigma(model: &mut Model, seed: u64) -> Result<()> {
    use rand::Rng;
    let mut idx = 0u64;
    for_each_photonic(&mut model.layers, &mut |blocks| {
        let (_, cols) = blocks.dims();
        let k = blocks.k();
        let (p, q) = blocks.grid();
        let mag = (2.0 * k as f64 / cols as f64).sqrt();
        for b in 0..p * q {
            let mut rng = crate::rng::stream_rng(seed, Stream::Init, &[0x515, idx, b as u64]);
            let sigma: Vec<f64> = (0..k).map(|_| mag * rng.random_range(-1.0..1.0)).collect();
            blocks.block_mut(b / q, b % q).set_sigma(&sigma)?;
        }
        idx += 1;
        Ok(())
    })?;
    pull_all_sigma(&mut model.layers);
    Ok(())
}

/// All matmul weights of an electronic model, in forward order (matching
/// the photonic twin's matmul order).
pub fn electronic_weights(model: &Model) -> Vec<Array2<f64>> {
    fn visit(layers: &[Layer], out: &mut Vec<Array2<f64>>) {
        for layer in layers {
            match layer {
                Layer::Linear { op, .. } | Layer::Conv2d { op, .. } => {
                    if let MatMul::Electronic { weight, .. } = op {
                        out.push(weight.clone());
                    }
                }
                Layer::Residual { branch } => visit(branch, out),
                _ => {}
            }
        }
    }
    let mut out = Vec::new();
    visit(&model.layers, &mut out);
    out
}

/// Stage 3: subspace learning over the dataset; appends per-epoch metrics.
#[allow(clippy::too_many_arguments)]
pub fn run_subspace_learning(
    model: &mut Model,
    data: &crate::dataset::DatasetHandle,
    cfg: &ExperimentConfig,
    meter: &mut CostMeter,
    metrics_out: &mut Vec<EpochMetrics>,
) -> Result<()> {
    let mut opt = AdamW::new(cfg.train.lr, cfg.train.weight_decay);
    let steps_per_iter = projected_steps_per_iteration(
        &cfg.model.layers,
        cfg.model.input,
        cfg.train.batch_size,
        cfg.k,
        &cfg.sampling,
    );
    for epoch in 0..cfg.train.epochs {
        opt.lr = cosine_lr(epoch, cfg.train.epochs, cfg.train.lr, cfg.train.lr_min);
        let batches = data.batches(
            true,
            cfg.train.batch_size,
            Some(derive_seed(
                cfg.seed,
                Stream::Dataset,
                &[0x51, epoch as u64],
            )),
        );
        let n_batches = batches.len();
        let (xs, ys): (Vec<_>, Vec<_>) = batches.into_iter().unzip();
        let mut m = train_epoch(
            model,
            &xs,
            &ys,
            &cfg.sampling,
            &mut opt,
            epoch,
            cfg.seed,
            meter,
        )?;
        let kept = n_batches - m.skipped_batches;
        m.steps = steps_per_iter.total() * kept as u64;
        metrics_out.push(m);
    }
    Ok(())
}

/// Everything `run_pipeline` leaves on disk, plus the in-memory summary.
pub struct PipelineArtifacts {
    pub summary: PipelineSummary,
    pub model: Model,
}

fn write(path: &Path, contents: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(path, contents)?;
    Ok(())
}

pub fn metrics_csv(epochs: &[EpochMetrics]) -> String {
    let mut out = String::from("epoch,loss,acc,ptc_energy,steps,skipped_batches\n");
    for m in epochs {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            m.epoch, m.loss, m.accuracy, m.ptc_energy, m.steps, m.skipped_batches
        );
    }
    out
}

fn plot_data_csv(epochs: &[EpochMetrics]) -> (String, String) {
    let mut loss_vs_calls = String::from("cumulative_ptc_calls,loss\n");
    let mut acc_vs_steps = String::from("cumulative_steps,acc\n");
    let mut calls = 0u64;
    let mut steps = 0u64;
    for m in epochs {
        calls += m.ptc_energy;
        steps += m.steps;
        let _ = writeln!(loss_vs_calls, "{calls},{}", m.loss);
        let _ = writeln!(acc_vs_steps, "{steps},{}", m.accuracy);
    }
    (loss_vs_calls, acc_vs_steps)
}

/// Run the enabled stages in order, writing artifacts under
/// `cfg.output_dir`: config echo, per-stage checkpoints, mapping reports,
/// metrics.csv, plot data, and cost.json.
pub fn run_pipeline(cfg: &ExperimentConfig) -> Result<PipelineArtifacts> {
    cfg.validate()?;
    let out = &cfg.output_dir;
    write(&out.join("config-echo.toml"), &cfg.to_toml()?)?;

    let data = cfg.dataset.load(cfg.seed)?;
    data.validate()?;
    let mut summary = PipelineSummary::default();
    let mut meter = CostMeter::default();

    let mut model = Model::new(cfg.model.layers.clone(), cfg.model.input, cfg.k, &cfg.noise)?;
    model.init_random(derive_seed(cfg.seed, Stream::Init, &[0x9107]))?;

    // Offline pre-training feeds the mapping stage; from-scratch subspace
    // learning never touches it.
    let twin = if cfg.map.enabled && cfg.pretrain.enabled {
        let (twin, acc) = pretrain_electronic(cfg, &data)?;
        summary.pretrain_test_accuracy = Some(acc);
        Some(twin)
    } else {
        None
    };

    if cfg.ic.enabled {
        summary.ic_reports = run_calibration(&mut model, cfg, &mut meter)?;
        let ckpt = checkpoint_model(&model);
        write(
            &out.join("checkpoint_calibrate.json"),
            &serde_json::to_string_pretty(&ckpt)?,
        )?;
    }

    if cfg.map.enabled {
        let twin = twin
            .as_ref()
            .ok_or_else(|| Error::Config("mapping requires pretraining".into()))?;
        summary.mapping = run_mapping(&mut model, twin, cfg, &mut meter)?;
        let ckpt = checkpoint_model(&model);
        write(
            &out.join("checkpoint_map.json"),
            &serde_json::to_string_pretty(&ckpt)?,
        )?;
        let mut csv = String::new();
        for (li, rep) in summary.mapping.iter().enumerate() {
            let _ = writeln!(csv, "# layer {li}");
            csv.push_str(&rep.to_csv());
        }
        write(&out.join("mapping.csv"), &csv)?;
        write(
            &out.join("mapping.json"),
            &serde_json::to_string_pretty(&summary.mapping)?,
        )?;
    }

    if cfg.train.enabled {
        run_subspace_learning(&mut model, &data, cfg, &mut meter, &mut summary.epochs)?;
        let ckpt = checkpoint_model(&model);
        write(
            &out.join("checkpoint_train.json"),
            &serde_json::to_string_pretty(&ckpt)?,
        )?;
    }

    // Final evaluation on the test split.
    let test_batches = data.batches(false, cfg.train.batch_size, None);
    let (xs, ys): (Vec<_>, Vec<_>) = test_batches.into_iter().unzip();
    summary.test_accuracy = Some(evaluate(&mut model, &xs, &ys, &mut meter)?);
    summary.energy_total = meter.total();

    write(&out.join("metrics.csv"), &metrics_csv(&summary.epochs))?;
    let (loss_csv, acc_csv) = plot_data_csv(&summary.epochs);
    write(&out.join("loss_vs_calls.csv"), &loss_csv)?;
    write(&out.join("acc_vs_steps.csv"), &acc_csv)?;

    let steps_per_iter = projected_steps_per_iteration(
        &cfg.model.layers,
        cfg.model.input,
        cfg.train.batch_size,
        cfg.k,
        &cfg.sampling,
    );
    let total_steps = StepBreakdown {
        forward: steps_per_iter.forward * summary.epochs.len().max(1) as u64,
        weight_grad: steps_per_iter.weight_grad * summary.epochs.len().max(1) as u64,
        feedback: steps_per_iter.feedback * summary.epochs.len().max(1) as u64,
    };
    let report = cost::CostReport::from_counts(&meter, &total_steps);
    write(
        &out.join("cost.json"),
        &serde_json::to_string_pretty(&report)?,
    )?;
    write(&out.join("cost.csv"), &report.to_csv())?;
    write(
        &out.join("summary.json"),
        &serde_json::to_string_pretty(&summary)?,
    )?;

    Ok(PipelineArtifacts { summary, model })
}

/// Formula-level profiling without running the model: per-iteration energy
/// and steps for the configured plan, against the dense baseline.
pub fn run_profile(cfg: &ExperimentConfig, batch: usize) -> Result<(cost::CostReport, PathBuf)> {
    cfg.validate()?;
    let dims = photonic_layer_dims(&cfg.model.layers, cfg.model.input, cfg.k);
    let mut dense_energy = CostMeter::default();
    let mut dense_steps = StepBreakdown::default();
    let mut plan_energy = CostMeter::default();
    let mut plan_steps = StepBreakdown::default();
    for d in &dims {
        let cols = d.h_out * d.w_out;
        let p = d.p();
        let q = d.q();
        let kept_cols =
            ((cfg.sampling.column_density * cols as f64).ceil() as usize).clamp(1, cols);
        let per_row = ((cfg.sampling.feedback_density * p as f64).ceil() as usize).clamp(1, p);

        let e_dense = cost::energy(d, batch, cols, p * q);
        let s_dense = cost::timesteps(d, batch, cols, &vec![p; q]);
        dense_energy.forward_macs += e_dense.forward;
        dense_energy.weight_grad_calls += e_dense.weight_grad;
        dense_energy.feedback_calls += e_dense.feedback;
        dense_steps.forward += s_dense.forward;
        dense_steps.weight_grad += s_dense.weight_grad;
        dense_steps.feedback += s_dense.feedback;

        let e_plan = cost::energy(d, batch, kept_cols, per_row * q);
        let s_plan = cost::timesteps(d, batch, kept_cols, &vec![per_row; q]);
        plan_energy.forward_macs += e_plan.forward;
        plan_energy.weight_grad_calls += e_plan.weight_grad;
        plan_energy.feedback_calls += e_plan.feedback;
        plan_steps.forward += s_plan.forward;
        plan_steps.weight_grad += s_plan.weight_grad;
        plan_steps.feedback += s_plan.feedback;
    }
    let dense = cost::CostReport::from_counts(&dense_energy, &dense_steps);
    let plan =
        cost::CostReport::from_counts(&plan_energy, &plan_steps).with_baseline("dense", &dense);
    let path = cfg.output_dir.join("profile.json");
    write(&path, &serde_json::to_string_pretty(&plan)?)?;
    write(&cfg.output_dir.join("profile.csv"), &plan.to_csv())?;
    Ok((plan, path))
}

/// Evaluate a checkpoint on the configured dataset's test split.
pub fn run_eval(cfg: &ExperimentConfig, checkpoint: &Path) -> Result<f64> {
    cfg.validate()?;
    let data = cfg.dataset.load(cfg.seed)?;
    let mut model = Model::new(cfg.model.layers.clone(), cfg.model.input, cfg.k, &cfg.noise)?;
    let text = std::fs::read_to_string(checkpoint)
        .map_err(|e| Error::Config(format!("cannot read {}: {e}", checkpoint.display())))?;
    let ckpt: ModelCheckpoint = serde_json::from_str(&text)?;
    restore_model(&mut model, &ckpt)?;
    let mut meter = CostMeter::default();
    let batches = data.batches(false, cfg.train.batch_size, None);
    let (xs, ys): (Vec<_>, Vec<_>) = batches.into_iter().unzip();
    evaluate(&mut model, &xs, &ys, &mut meter)
}
