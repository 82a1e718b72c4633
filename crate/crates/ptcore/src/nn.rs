//! Minimal neural-network runtime hosting blocked photonic layers next to
//! exact electronic ones: linear, conv2d via im2col, ReLU, average pooling,
//! flatten, residual blocks, softmax cross-entropy, and an adaptive-moment
//! optimizer with decoupled weight decay on a cosine schedule.
//!
//! Photonic layers keep their weights inside [`BlockedLinear`] tensor-core
//! grids; their backward pass goes through the sparse in-situ routines, so
//! gradient flow only ever touches optical ports. Electronic layers use
//! exact float math.

use crate::cost::CostMeter;
use crate::error::{Error, Result};
use crate::noise::NoiseConfig;
use crate::sparse::{self, SamplingPlan};
use crate::stages::BlockedLinear;
use ndarray::{Array1, Array2, Array3, Array4};
use serde::{Deserialize, Serialize};

/// Activation shape flowing between layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Shape {
    /// Feature vector of the given length.
    Vector(usize),
    /// Channel-major image: (channels, height, width).
    Image(usize, usize, usize),
}

impl Shape {
    pub fn features(&self) -> usize {
        match *self {
            Shape::Vector(n) => n,
            Shape::Image(c, h, w) => c * h * w,
        }
    }
}

/// Declarative layer description; `photonic` picks the blocked PTC
/// implementation over the exact electronic one.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Linear {
        in_features: usize,
        out_features: usize,
        #[serde(default)]
        photonic: bool,
        #[serde(default)]
        bias: bool,
    },
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        #[serde(default)]
        photonic: bool,
    },
    Relu,
    AvgPool {
        kernel: usize,
    },
    Flatten,
    /// Residual branch: output = input + branch(input).
    Residual {
        branch: Vec<LayerSpec>,
    },
}

/// Validate a layer chain against an input shape, returning the output shape.
pub fn validate_chain(specs: &[LayerSpec], input: Shape) -> Result<Shape> {
    let mut shape = input;
    for (i, spec) in specs.iter().enumerate() {
        shape = match (spec, shape) {
            (
                LayerSpec::Linear {
                    in_features,
                    out_features,
                    ..
                },
                Shape::Vector(n),
            ) => {
                if n != *in_features {
                    return Err(Error::Shape(format!(
                        "layer {i}: linear expects {in_features} features, got {n}"
                    )));
                }
                Shape::Vector(*out_features)
            }
            (
                LayerSpec::Conv2d {
                    in_channels,
                    out_channels,
                    kernel,
                    stride,
                    padding,
                    ..
                },
                Shape::Image(c, h, w),
            ) => {
                if c != *in_channels {
                    return Err(Error::Shape(format!(
                        "layer {i}: conv expects {in_channels} channels, got {c}"
                    )));
                }
                if *kernel == 0 || *stride == 0 {
                    return Err(Error::Shape(format!(
                        "layer {i}: kernel/stride must be positive"
                    )));
                }
                let hp = h + 2 * padding;
                let wp = w + 2 * padding;
                if hp < *kernel || wp < *kernel {
                    return Err(Error::Shape(format!(
                        "layer {i}: kernel exceeds padded input"
                    )));
                }
                let h_out = (hp - kernel) / stride + 1;
                let w_out = (wp - kernel) / stride + 1;
                Shape::Image(*out_channels, h_out, w_out)
            }
            (LayerSpec::Relu, s) => s,
            (LayerSpec::AvgPool { kernel }, Shape::Image(c, h, w)) => {
                if *kernel == 0 || h < *kernel || w < *kernel {
                    return Err(Error::Shape(format!("layer {i}: pool kernel too large")));
                }
                Shape::Image(c, h / kernel, w / kernel)
            }
            (LayerSpec::Flatten, Shape::Image(c, h, w)) => Shape::Vector(c * h * w),
            (LayerSpec::Residual { branch }, s) => {
                let out = validate_chain(branch, s)?;
                if out != s {
                    return Err(Error::Shape(format!(
                        "layer {i}: residual branch maps {s:?} to {out:?}"
                    )));
                }
                s
            }
            (spec, shape) => {
                return Err(Error::Shape(format!(
                    "layer {i}: {spec:?} cannot follow shape {shape:?}"
                )))
            }
        };
    }
    Ok(shape)
}

/// Batched activation: vectors are features×batch, images are B×C×H×W.
#[derive(Debug, Clone)]
pub enum Tensor {
    Vector(Array2<f64>),
    Image(Array4<f64>),
}

impl Tensor {
    pub fn batch(&self) -> usize {
        match self {
            Tensor::Vector(a) => a.ncols(),
            Tensor::Image(a) => a.dim().0,
        }
    }

    pub fn as_vector(&self) -> &Array2<f64> {
        match self {
            Tensor::Vector(a) => a,
            Tensor::Image(_) => panic!("expected vector activation"),
        }
    }

    fn finite(&self) -> bool {
        match self {
            Tensor::Vector(a) => a.iter().all(|x| x.is_finite()),
            Tensor::Image(a) => a.iter().all(|x| x.is_finite()),
        }
    }
}

/// Lower B×C×H×W inputs to patch columns: B × (C·K²) × (H'·W').
pub fn im2col(x: &Array4<f64>, kernel: usize, stride: usize, pad: usize) -> Result<Array3<f64>> {
    let (b, c, h, w) = x.dim();
    let hp = h + 2 * pad;
    let wp = w + 2 * pad;
    if hp < kernel || wp < kernel {
        return Err(Error::Shape("kernel exceeds padded input".into()));
    }
    let h_out = (hp - kernel) / stride + 1;
    let w_out = (wp - kernel) / stride + 1;
    let mut cols = Array3::<f64>::zeros((b, c * kernel * kernel, h_out * w_out));
    for bi in 0..b {
        for oy in 0..h_out {
            for ox in 0..w_out {
                let col = oy * w_out + ox;
                for ci in 0..c {
                    for ky in 0..kernel {
                        for kx in 0..kernel {
                            let iy = oy * stride + ky;
                            let ix = ox * stride + kx;
                            let row = ci * kernel * kernel + ky * kernel + kx;
                            if iy >= pad && ix >= pad && iy - pad < h && ix - pad < w {
                                cols[[bi, row, col]] = x[[bi, ci, iy - pad, ix - pad]];
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(cols)
}

/// Scatter patch columns back onto the image grid, summing overlaps.
pub fn col2im(
    cols: &Array3<f64>,
    shape: (usize, usize, usize, usize),
    kernel: usize,
    stride: usize,
    pad: usize,
) -> Array4<f64> {
    let (b, c, h, w) = shape;
    let h_out = (h + 2 * pad - kernel) / stride + 1;
    let w_out = (w + 2 * pad - kernel) / stride + 1;
    let mut x = Array4::<f64>::zeros(shape);
    for bi in 0..b {
        for oy in 0..h_out {
            for ox in 0..w_out {
                let col = oy * w_out + ox;
                for ci in 0..c {
                    for ky in 0..kernel {
                        for kx in 0..kernel {
                            let iy = oy * stride + ky;
                            let ix = ox * stride + kx;
                            let row = ci * kernel * kernel + ky * kernel + kx;
                            if iy >= pad && ix >= pad && iy - pad < h && ix - pad < w {
                                x[[bi, ci, iy - pad, ix - pad]] += cols[[bi, row, col]];
                            }
                        }
                    }
                }
            }
        }
    }
    x
}

/// Either a dense electronic weight or a photonic block grid.
#[derive(Debug, Clone)]
pub enum MatMul {
    Electronic {
        weight: Array2<f64>,
        grad: Array2<f64>,
        adam_m: Array2<f64>,
        adam_v: Array2<f64>,
    },
    Photonic {
        blocks: BlockedLinear,
        /// Shadow singular values (P·Q·k), the trained parameters.
        sigma: Vec<f64>,
        grad: Vec<f64>,
        adam_m: Vec<f64>,
        adam_v: Vec<f64>,
    },
}

impl MatMul {
    fn electronic(rows: usize, cols: usize) -> Self {
        MatMul::Electronic {
            weight: Array2::zeros((rows, cols)),
            grad: Array2::zeros((rows, cols)),
            adam_m: Array2::zeros((rows, cols)),
            adam_v: Array2::zeros((rows, cols)),
        }
    }

    fn photonic(
        rows: usize,
        cols: usize,
        k: usize,
        noise: &NoiseConfig,
        layer_id: u64,
    ) -> Result<Self> {
        let blocks = BlockedLinear::new(rows, cols, k, noise, layer_id)?;
        let n = blocks.grid().0 * blocks.grid().1 * k;
        Ok(MatMul::Photonic {
            blocks,
            sigma: vec![0.0; n],
            grad: vec![0.0; n],
            adam_m: vec![0.0; n],
            adam_v: vec![0.0; n],
        })
    }

    /// Synchronize shadow σ values from the realized block programs.
    pub fn pull_sigma(&mut self) {
        if let MatMul::Photonic { blocks, sigma, .. } = self {
            let k = blocks.k();
            let (p, q) = blocks.grid();
            for idx in 0..p * q {
                let s = blocks.block(idx / q, idx % q).read_sigma();
                sigma[idx * k..(idx + 1) * k].copy_from_slice(&s);
            }
        }
    }

    /// Reprogram block Σ paths from the shadow parameters.
    fn push_sigma(&mut self) -> Result<()> {
        if let MatMul::Photonic { blocks, sigma, .. } = self {
            let k = blocks.k();
            let (p, q) = blocks.grid();
            for idx in 0..p * q {
                blocks
                    .block_mut(idx / q, idx % q)
                    .set_sigma(&sigma[idx * k..(idx + 1) * k])?;
            }
        }
        Ok(())
    }
}

/// Bias vector with its gradient and the two optimizer moment buffers.
pub type BiasParam = (Array1<f64>, Array1<f64>, Array1<f64>, Array1<f64>);

/// One instantiated layer with its cached forward state.
#[derive(Debug, Clone)]
pub enum Layer {
    Linear {
        op: MatMul,
        bias: Option<BiasParam>,
        input: Option<Array2<f64>>,
    },
    Conv2d {
        op: MatMul,
        kernel: usize,
        stride: usize,
        padding: usize,
        in_shape: (usize, usize, usize),
        cols: Option<Array3<f64>>,
        batch: usize,
    },
    Relu {
        mask: Option<Tensor>,
    },
    AvgPool {
        kernel: usize,
        in_shape: (usize, usize, usize, usize),
    },
    Flatten {
        in_shape: (usize, usize, usize, usize),
    },
    Residual {
        branch: Vec<Layer>,
    },
}

/// A sequential model over validated layer specs.
#[derive(Debug, Clone)]
pub struct Model {
    pub specs: Vec<LayerSpec>,
    pub layers: Vec<Layer>,
    pub input_shape: Shape,
    pub output_shape: Shape,
    pub k: usize,
}

fn build_layers(
    specs: &[LayerSpec],
    k: usize,
    noise: &NoiseConfig,
    layer_counter: &mut u64,
) -> Result<Vec<Layer>> {
    let mut layers = Vec::with_capacity(specs.len());
    for spec in specs {
        let id = *layer_counter;
        *layer_counter += 1;
        let layer = match spec {
            LayerSpec::Linear {
                in_features,
                out_features,
                photonic,
                bias,
            } => Layer::Linear {
                op: if *photonic {
                    MatMul::photonic(*out_features, *in_features, k, noise, id)?
                } else {
                    MatMul::electronic(*out_features, *in_features)
                },
                bias: bias.then(|| {
                    (
                        Array1::zeros(*out_features),
                        Array1::zeros(*out_features),
                        Array1::zeros(*out_features),
                        Array1::zeros(*out_features),
                    )
                }),
                input: None,
            },
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
                photonic,
            } => Layer::Conv2d {
                op: if *photonic {
                    MatMul::photonic(*out_channels, in_channels * kernel * kernel, k, noise, id)?
                } else {
                    MatMul::electronic(*out_channels, in_channels * kernel * kernel)
                },
                kernel: *kernel,
                stride: *stride,
                padding: *padding,
                in_shape: (0, 0, 0),
                cols: None,
                batch: 0,
            },
            LayerSpec::Relu => Layer::Relu { mask: None },
            LayerSpec::AvgPool { kernel } => Layer::AvgPool {
                kernel: *kernel,
                in_shape: (0, 0, 0, 0),
            },
            LayerSpec::Flatten => Layer::Flatten {
                in_shape: (0, 0, 0, 0),
            },
            LayerSpec::Residual { branch } => Layer::Residual {
                branch: build_layers(branch, k, noise, layer_counter)?,
            },
        };
        layers.push(layer);
    }
    Ok(layers)
}

impl Model {
    /// Build a model; the chain is shape-checked before any state exists.
    pub fn new(
        specs: Vec<LayerSpec>,
        input_shape: Shape,
        k: usize,
        noise: &NoiseConfig,
    ) -> Result<Self> {
        let output_shape = validate_chain(&specs, input_shape)?;
        let mut counter = 0;
        let layers = build_layers(&specs, k, noise, &mut counter)?;
        Ok(Self {
            specs,
            layers,
            input_shape,
            output_shape,
            k,
        })
    }

    /// Deterministic weight initialization (electronic dense and photonic σ
    /// from random meshes).
    pub fn init_random(&mut self, seed: u64) -> Result<()> {
        use rand::Rng;
        let mut layer_idx = 0u64;
        fn visit(layers: &mut [Layer], seed: u64, layer_idx: &mut u64) -> Result<()> {
            for layer in layers {
                match layer {
                    Layer::Linear { op, .. } | Layer::Conv2d { op, .. } => {
                        let id = *layer_idx;
                        *layer_idx += 1;
                        match op {
                            MatMul::Electronic { weight, .. } => {
                                let mut rng =
                                    crate::rng::stream_rng(seed, crate::rng::Stream::Init, &[id]);
                                let fan_in = weight.ncols() as f64;
                                let scale = (2.0 / fan_in).sqrt();
                                for v in weight.iter_mut() {
                                    *v = scale * rng.random_range(-1.0..1.0);
                                }
                            }
                            MatMul::Photonic { blocks, .. } => {
                                blocks.random_init(crate::rng::derive_seed(
                                    seed,
                                    crate::rng::Stream::Init,
                                    &[id],
                                ))?;
                            }
                        }
                        op.pull_sigma();
                    }
                    Layer::Residual { branch } => visit(branch, seed, layer_idx)?,
                    _ => {}
                }
            }
            Ok(())
        }
        visit(&mut self.layers, seed, &mut layer_idx)
    }

    /// Program every photonic layer from the matching electronic weights of
    /// `source` (an exact map; no zeroth-order refinement).
    pub fn adopt_weights(&mut self, source: &Model) -> Result<()> {
        fn visit(dst: &mut [Layer], src: &[Layer]) -> Result<()> {
            for (d, s) in dst.iter_mut().zip(src.iter()) {
                match (d, s) {
                    (
                        Layer::Linear {
                            op: dop,
                            bias: dbias,
                            ..
                        },
                        Layer::Linear {
                            op: sop,
                            bias: sbias,
                            ..
                        },
                    ) => {
                        adopt_op(dop, sop)?;
                        if let (Some(d), Some(s)) = (dbias.as_mut(), sbias.as_ref()) {
                            d.0.assign(&s.0);
                        }
                    }
                    (Layer::Conv2d { op: dop, .. }, Layer::Conv2d { op: sop, .. }) => {
                        adopt_op(dop, sop)?
                    }
                    (Layer::Residual { branch: db }, Layer::Residual { branch: sb }) => {
                        visit(db, sb)?
                    }
                    _ => {}
                }
            }
            Ok(())
        }
        fn adopt_op(dst: &mut MatMul, src: &MatMul) -> Result<()> {
            let w = match src {
                MatMul::Electronic { weight, .. } => weight.clone(),
                MatMul::Photonic { .. } => {
                    return Err(Error::Config(
                        "adopt_weights source must be electronic".into(),
                    ))
                }
            };
            match dst {
                MatMul::Electronic { weight, .. } => {
                    weight.assign(&w);
                }
                MatMul::Photonic { blocks, .. } => {
                    blocks.program_from_dense(&w)?;
                }
            }
            dst.pull_sigma();
            Ok(())
        }
        visit(&mut self.layers, &source.layers)
    }

    pub fn forward(&mut self, input: &Tensor, meter: &mut CostMeter) -> Result<Tensor> {
        let mut x = input.clone();
        let layers = &mut self.layers;
        x = forward_layers(layers, x, meter)?;
        if !x.finite() {
            return Err(Error::Numerical(
                "non-finite activations in forward pass".into(),
            ));
        }
        Ok(x)
    }

    /// Backward from the loss gradient at the output; fills parameter grads.
    pub fn backward(
        &mut self,
        dy: &Tensor,
        plan: &SamplingPlan,
        step_seed: u64,
        meter: &mut CostMeter,
    ) -> Result<Tensor> {
        let mut layer_tag = 0u64;
        backward_layers(
            &mut self.layers,
            dy.clone(),
            plan,
            step_seed,
            &mut layer_tag,
            meter,
        )
    }

    /// AdamW update on all trainable parameters. Photonic layers train only
    /// their Σ paths (meshes frozen); Σ is reprogrammed afterwards.
    pub fn apply_updates(&mut self, opt: &mut AdamW) -> Result<()> {
        fn visit(layers: &mut [Layer], opt: &AdamW, t: u64) -> Result<()> {
            for layer in layers {
                match layer {
                    Layer::Linear { op, bias, .. } => {
                        update_op(op, opt, t)?;
                        if let Some((b, g, m, v)) = bias {
                            opt.update(
                                b.as_slice_mut().unwrap(),
                                g.as_slice().unwrap(),
                                m.as_slice_mut().unwrap(),
                                v.as_slice_mut().unwrap(),
                                t,
                            );
                        }
                    }
                    Layer::Conv2d { op, .. } => update_op(op, opt, t)?,
                    Layer::Residual { branch } => visit(branch, opt, t)?,
                    _ => {}
                }
            }
            Ok(())
        }
        fn update_op(op: &mut MatMul, opt: &AdamW, t: u64) -> Result<()> {
            match op {
                MatMul::Electronic {
                    weight,
                    grad,
                    adam_m,
                    adam_v,
                } => {
                    opt.update(
                        weight.as_slice_mut().unwrap(),
                        grad.as_slice().unwrap(),
                        adam_m.as_slice_mut().unwrap(),
                        adam_v.as_slice_mut().unwrap(),
                        t,
                    );
                }
                MatMul::Photonic {
                    sigma,
                    grad,
                    adam_m,
                    adam_v,
                    ..
                } => {
                    opt.update(sigma, grad, adam_m, adam_v, t);
                }
            }
            op.push_sigma()
        }
        opt.t += 1;
        let t = opt.t;
        visit(&mut self.layers, opt, t)
    }

    pub fn zero_grads(&mut self) {
        fn visit(layers: &mut [Layer]) {
            for layer in layers {
                match layer {
                    Layer::Linear { op, bias, .. } => {
                        zero_op(op);
                        if let Some((_, g, _, _)) = bias {
                            g.fill(0.0);
                        }
                    }
                    Layer::Conv2d { op, .. } => zero_op(op),
                    Layer::Residual { branch } => visit(branch),
                    _ => {}
                }
            }
        }
        fn zero_op(op: &mut MatMul) {
            match op {
                MatMul::Electronic { grad, .. } => grad.fill(0.0),
                MatMul::Photonic { grad, .. } => grad.iter_mut().for_each(|g| *g = 0.0),
            }
        }
        visit(&mut self.layers);
    }

    /// Snapshot of the rotation phases of every photonic mesh, for
    /// frozen-unitary checks.
    pub fn unitary_phase_snapshot(&self) -> Vec<f64> {
        fn visit(layers: &[Layer], out: &mut Vec<f64>) {
            for layer in layers {
                match layer {
                    Layer::Linear { op, .. } | Layer::Conv2d { op, .. } => {
                        if let MatMul::Photonic { blocks, .. } = op {
                            let (p, q) = blocks.grid();
                            for idx in 0..p * q {
                                let b = blocks.block(idx / q, idx % q);
                                out.extend_from_slice(b.program().phi_u.phis());
                                out.extend_from_slice(b.program().phi_v.phis());
                            }
                        }
                    }
                    Layer::Residual { branch } => visit(branch, out),
                    _ => {}
                }
            }
        }
        let mut out = Vec::new();
        visit(&self.layers, &mut out);
        out
    }

    /// Per-photonic-layer handles, in forward order.
    pub fn photonic_layers(&self) -> Vec<&BlockedLinear> {
        fn visit<'a>(layers: &'a [Layer], out: &mut Vec<&'a BlockedLinear>) {
            for layer in layers {
                match layer {
                    Layer::Linear { op, .. } | Layer::Conv2d { op, .. } => {
                        if let MatMul::Photonic { blocks, .. } = op {
                            out.push(blocks);
                        }
                    }
                    Layer::Residual { branch } => visit(branch, out),
                    _ => {}
                }
            }
        }
        let mut out = Vec::new();
        visit(&self.layers, &mut out);
        out
    }

    /// Gradients of all photonic σ parameters, per layer, in forward order.
    pub fn photonic_sigma_grads(&self) -> Vec<Vec<f64>> {
        fn visit(layers: &[Layer], out: &mut Vec<Vec<f64>>) {
            for layer in layers {
                match layer {
                    Layer::Linear { op, .. } | Layer::Conv2d { op, .. } => {
                        if let MatMul::Photonic { grad, .. } = op {
                            out.push(grad.clone());
                        }
                    }
                    Layer::Residual { branch } => visit(branch, out),
                    _ => {}
                }
            }
        }
        let mut out = Vec::new();
        visit(&self.layers, &mut out);
        out
    }
}

fn matmul_forward(op: &MatMul, x_cols: &Array2<f64>, meter: &mut CostMeter) -> Array2<f64> {
    match op {
        MatMul::Electronic { weight, .. } => weight.dot(x_cols),
        MatMul::Photonic { blocks, .. } => {
            let mut out = Array2::<f64>::zeros((blocks.dims().0, x_cols.ncols()));
            for c in 0..x_cols.ncols() {
                let y = blocks.forward(&x_cols.column(c).to_owned(), meter);
                for r in 0..y.len() {
                    out[[r, c]] = y[r];
                }
            }
            out
        }
    }
}

fn forward_layers(layers: &mut [Layer], mut x: Tensor, meter: &mut CostMeter) -> Result<Tensor> {
    for layer in layers {
        x = match layer {
            Layer::Linear { op, bias, input } => {
                let xv = x.as_vector().clone();
                let mut y = matmul_forward(op, &xv, meter);
                if let Some((b, ..)) = bias {
                    for c in 0..y.ncols() {
                        for r in 0..y.nrows() {
                            y[[r, c]] += b[r];
                        }
                    }
                }
                *input = Some(xv);
                Tensor::Vector(y)
            }
            Layer::Conv2d {
                op,
                kernel,
                stride,
                padding,
                in_shape,
                cols,
                batch,
            } => {
                let img = match &x {
                    Tensor::Image(a) => a,
                    _ => return Err(Error::Shape("conv2d expects image input".into())),
                };
                let (b, c, h, w) = img.dim();
                *in_shape = (c, h, w);
                *batch = b;
                let lowered = im2col(img, *kernel, *stride, *padding)?;
                let h_out = (h + 2 * *padding - *kernel) / *stride + 1;
                let w_out = (w + 2 * *padding - *kernel) / *stride + 1;
                let c_out = match op {
                    MatMul::Electronic { weight, .. } => weight.nrows(),
                    MatMul::Photonic { blocks, .. } => blocks.dims().0,
                };
                let mut out = Array4::<f64>::zeros((b, c_out, h_out, w_out));
                for bi in 0..b {
                    let xc = lowered.index_axis(ndarray::Axis(0), bi).to_owned();
                    let y = matmul_forward(op, &xc, meter);
                    for co in 0..c_out {
                        for pos in 0..h_out * w_out {
                            out[[bi, co, pos / w_out, pos % w_out]] = y[[co, pos]];
                        }
                    }
                }
                *cols = Some(lowered);
                Tensor::Image(out)
            }
            Layer::Relu { mask } => {
                let y = match &x {
                    Tensor::Vector(a) => Tensor::Vector(a.mapv(|v| v.max(0.0))),
                    Tensor::Image(a) => Tensor::Image(a.mapv(|v| v.max(0.0))),
                };
                *mask = Some(x.clone());
                y
            }
            Layer::AvgPool { kernel, in_shape } => {
                let img = match &x {
                    Tensor::Image(a) => a,
                    _ => return Err(Error::Shape("avgpool expects image input".into())),
                };
                let (b, c, h, w) = img.dim();
                *in_shape = (b, c, h, w);
                let p = *kernel;
                let (ho, wo) = (h / p, w / p);
                let mut out = Array4::<f64>::zeros((b, c, ho, wo));
                for bi in 0..b {
                    for ci in 0..c {
                        for oy in 0..ho {
                            for ox in 0..wo {
                                let mut acc = 0.0;
                                for ky in 0..p {
                                    for kx in 0..p {
                                        acc += img[[bi, ci, oy * p + ky, ox * p + kx]];
                                    }
                                }
                                out[[bi, ci, oy, ox]] = acc / (p * p) as f64;
                            }
                        }
                    }
                }
                Tensor::Image(out)
            }
            Layer::Flatten { in_shape } => {
                let img = match &x {
                    Tensor::Image(a) => a,
                    _ => return Err(Error::Shape("flatten expects image input".into())),
                };
                let (b, c, h, w) = img.dim();
                *in_shape = (b, c, h, w);
                let mut out = Array2::<f64>::zeros((c * h * w, b));
                for bi in 0..b {
                    for ci in 0..c {
                        for y in 0..h {
                            for xx in 0..w {
                                out[[ci * h * w + y * w + xx, bi]] = img[[bi, ci, y, xx]];
                            }
                        }
                    }
                }
                Tensor::Vector(out)
            }
            Layer::Residual { branch } => {
                let skip = x.clone();
                let y = forward_layers(branch, x, meter)?;
                match (skip, y) {
                    (Tensor::Vector(a), Tensor::Vector(b)) => Tensor::Vector(a + b),
                    (Tensor::Image(a), Tensor::Image(b)) => Tensor::Image(a + b),
                    _ => return Err(Error::Shape("residual branch changed tensor kind".into())),
                }
            }
        };
    }
    Ok(x)
}

/// Backward through a matmul: photonic layers use masked feedback and
/// in-situ subspace gradients; electronic ones exact math.
#[allow(clippy::too_many_arguments)]
fn matmul_backward(
    op: &mut MatMul,
    x_cols: &Array2<f64>,
    dy_cols: &Array2<f64>,
    plan: &SamplingPlan,
    step_seed: u64,
    layer_tag: u64,
    col_mask: Option<&[bool]>,
    meter: &mut CostMeter,
) -> Result<Array2<f64>> {
    match op {
        MatMul::Electronic { weight, grad, .. } => {
            *grad += &dy_cols.dot(&x_cols.t());
            Ok(weight.t().dot(dy_cols))
        }
        MatMul::Photonic { blocks, grad, .. } => {
            let mask = sparse::build_feedback_mask(
                &sparse::layer_block_norms(blocks),
                plan,
                step_seed,
                layer_tag,
            )?;
            let dx = sparse::sparse_error_feedback(blocks, dy_cols, &mask, meter);
            let g = sparse::subspace_weight_grad(blocks, x_cols, dy_cols, col_mask, meter);
            for (gi, v) in grad.iter_mut().zip(g.iter()) {
                *gi += v;
            }
            Ok(dx)
        }
    }
}

fn backward_layers(
    layers: &mut [Layer],
    mut dy: Tensor,
    plan: &SamplingPlan,
    step_seed: u64,
    layer_tag: &mut u64,
    meter: &mut CostMeter,
) -> Result<Tensor> {
    for layer in layers.iter_mut().rev() {
        let tag = *layer_tag;
        *layer_tag += 1;
        dy = match layer {
            Layer::Linear { op, bias, input } => {
                let d = dy.as_vector().clone();
                if let Some((_, g, _, _)) = bias {
                    for r in 0..d.nrows() {
                        let mut acc = 0.0;
                        for c in 0..d.ncols() {
                            acc += d[[r, c]];
                        }
                        g[r] += acc;
                    }
                }
                let x = input.take().ok_or_else(|| {
                    Error::Numerical("backward before forward on linear layer".into())
                })?;
                let dx = matmul_backward(op, &x, &d, plan, step_seed, tag, None, meter)?;
                Tensor::Vector(dx)
            }
            Layer::Conv2d {
                op,
                kernel,
                stride,
                padding,
                in_shape,
                cols,
                batch,
            } => {
                let dimg = match &dy {
                    Tensor::Image(a) => a,
                    _ => return Err(Error::Shape("conv2d backward expects image grad".into())),
                };
                let (b, c_out, h_out, w_out) = dimg.dim();
                debug_assert_eq!(b, *batch);
                let lowered = cols.take().ok_or_else(|| {
                    Error::Numerical("backward before forward on conv layer".into())
                })?;
                // One shared column mask per step, drawn once across batches.
                let col_mask =
                    sparse::build_column_mask(h_out * w_out, plan.column_density, step_seed, tag)?;
                let (cin, h, w) = *in_shape;
                let mut dx_cols = Array3::<f64>::zeros((b, cin * kernel.pow(2), h_out * w_out));
                for bi in 0..b {
                    let mut dyc = Array2::<f64>::zeros((c_out, h_out * w_out));
                    for co in 0..c_out {
                        for pos in 0..h_out * w_out {
                            dyc[[co, pos]] = dimg[[bi, co, pos / w_out, pos % w_out]];
                        }
                    }
                    let xc = lowered.index_axis(ndarray::Axis(0), bi).to_owned();
                    let dxc = matmul_backward(
                        op,
                        &xc,
                        &dyc,
                        plan,
                        step_seed,
                        tag,
                        Some(&col_mask),
                        meter,
                    )?;
                    for r in 0..dxc.nrows() {
                        for c in 0..dxc.ncols() {
                            dx_cols[[bi, r, c]] = dxc[[r, c]];
                        }
                    }
                }
                let dx = col2im(&dx_cols, (b, cin, h, w), *kernel, *stride, *padding);
                Tensor::Image(dx)
            }
            Layer::Relu { mask } => {
                let saved = mask
                    .take()
                    .ok_or_else(|| Error::Numerical("backward before forward on relu".into()))?;
                match (&dy, &saved) {
                    (Tensor::Vector(d), Tensor::Vector(x)) => {
                        let mut out = d.clone();
                        for (o, xin) in out.iter_mut().zip(x.iter()) {
                            if *xin <= 0.0 {
                                *o = 0.0;
                            }
                        }
                        Tensor::Vector(out)
                    }
                    (Tensor::Image(d), Tensor::Image(x)) => {
                        let mut out = d.clone();
                        for (o, xin) in out.iter_mut().zip(x.iter()) {
                            if *xin <= 0.0 {
                                *o = 0.0;
                            }
                        }
                        Tensor::Image(out)
                    }
                    _ => return Err(Error::Shape("relu grad kind mismatch".into())),
                }
            }
            Layer::AvgPool { kernel, in_shape } => {
                let dimg = match &dy {
                    Tensor::Image(a) => a,
                    _ => return Err(Error::Shape("avgpool backward expects image grad".into())),
                };
                let (b, c, h, w) = *in_shape;
                let p = *kernel;
                let mut dx = Array4::<f64>::zeros((b, c, h, w));
                let (ho, wo) = (h / p, w / p);
                let inv = 1.0 / (p * p) as f64;
                for bi in 0..b {
                    for ci in 0..c {
                        for oy in 0..ho {
                            for ox in 0..wo {
                                let g = dimg[[bi, ci, oy, ox]] * inv;
                                for ky in 0..p {
                                    for kx in 0..p {
                                        dx[[bi, ci, oy * p + ky, ox * p + kx]] = g;
                                    }
                                }
                            }
                        }
                    }
                }
                Tensor::Image(dx)
            }
            Layer::Flatten { in_shape } => {
                let d = dy.as_vector();
                let (b, c, h, w) = *in_shape;
                let mut dx = Array4::<f64>::zeros((b, c, h, w));
                for bi in 0..b {
                    for ci in 0..c {
                        for y in 0..h {
                            for xx in 0..w {
                                dx[[bi, ci, y, xx]] = d[[ci * h * w + y * w + xx, bi]];
                            }
                        }
                    }
                }
                Tensor::Image(dx)
            }
            Layer::Residual { branch } => {
                let d_branch =
                    backward_layers(branch, dy.clone(), plan, step_seed, layer_tag, meter)?;
                match (dy, d_branch) {
                    (Tensor::Vector(a), Tensor::Vector(b)) => Tensor::Vector(a + b),
                    (Tensor::Image(a), Tensor::Image(b)) => Tensor::Image(a + b),
                    _ => return Err(Error::Shape("residual grad kind mismatch".into())),
                }
            }
        };
    }
    Ok(dy)
}

/// Softmax cross-entropy over logits [classes × batch]; returns the mean
/// loss and the gradient w.r.t. logits (with the 1/B factor applied).
pub fn cross_entropy(logits: &Array2<f64>, labels: &[usize]) -> Result<(f64, Array2<f64>)> {
    let (c, b) = logits.dim();
    if labels.len() != b {
        return Err(Error::Shape("label count mismatch".into()));
    }
    let mut grad = Array2::<f64>::zeros((c, b));
    let mut loss = 0.0;
    for bi in 0..b {
        let col = logits.column(bi);
        let maxv = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = col.iter().map(|&v| (v - maxv).exp()).collect();
        let z: f64 = exps.iter().sum();
        let label = labels[bi];
        if label >= c {
            return Err(Error::InvalidInput(format!("label {label} out of range")));
        }
        loss += -(exps[label] / z).ln();
        for ci in 0..c {
            grad[[ci, bi]] = (exps[ci] / z - if ci == label { 1.0 } else { 0.0 }) / b as f64;
        }
    }
    Ok((loss / b as f64, grad))
}

/// Mean squared error ½‖y − t‖² averaged over the batch.
pub fn mse_loss(y: &Array2<f64>, target: &Array2<f64>) -> (f64, Array2<f64>) {
    let b = y.ncols() as f64;
    let mut grad = y - target;
    let loss = 0.5 * grad.iter().map(|g| g * g).sum::<f64>() / b;
    grad.mapv_inplace(|g| g / b);
    (loss, grad)
}

/// Adaptive-moment optimizer with decoupled weight decay.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub t: u64,
}

impl AdamW {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            t: 0,
        }
    }

    pub fn update(&self, params: &mut [f64], grads: &[f64], m: &mut [f64], v: &mut [f64], t: u64) {
        let b1t = 1.0 - self.beta1.powi(t as i32);
        let b2t = 1.0 - self.beta2.powi(t as i32);
        for i in 0..params.len() {
            m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * grads[i];
            v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * grads[i] * grads[i];
            let mhat = m[i] / b1t;
            let vhat = v[i] / b2t;
            params[i] -=
                self.lr * (mhat / (vhat.sqrt() + self.eps) + self.weight_decay * params[i]);
        }
    }
}

/// Cosine-annealed learning rate: η(t) = η_min + ½(η₀−η_min)(1+cos(πt/T)).
pub fn cosine_lr(t: usize, total: usize, lr0: f64, lr_min: f64) -> f64 {
    if total == 0 {
        return lr0;
    }
    let frac = (t as f64 / total as f64).min(1.0);
    lr_min + 0.5 * (lr0 - lr_min) * (1.0 + (std::f64::consts::PI * frac).cos())
}
