//! Dataset ingestion: IDX-format image/label files plus deterministic
//! synthetic generators (Gaussian blobs as a small-vector task and
//! procedural digit images as an MNIST-class stand-in).

use crate::error::{Error, Result};
use crate::nn::{Shape, Tensor};
use crate::rng::{stream_rng, Stream};
use ndarray::{Array2, Array4};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use std::io::Read;
use std::path::Path;

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Raw samples of one split.
#[derive(Debug, Clone)]
pub enum Samples {
    /// features × n
    Vectors(Array2<f64>),
    /// n × c × h × w
    Images(Array4<f64>),
}

impl Samples {
    pub fn len(&self) -> usize {
        match self {
            Samples::Vectors(a) => a.ncols(),
            Samples::Images(a) => a.dim().0,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// A loaded dataset: disjoint train/test splits, labels in range, and the
/// normalization applied at load time.
#[derive(Debug, Clone)]
pub struct DatasetHandle {
    pub name: String,
    pub input_shape: Shape,
    pub n_classes: usize,
    pub train: Samples,
    pub train_labels: Vec<usize>,
    pub test: Samples,
    pub test_labels: Vec<usize>,
    pub mean: f64,
    pub std: f64,
}

impl DatasetHandle {
    pub fn validate(&self) -> Result<()> {
        if self.train.len() != self.train_labels.len() || self.test.len() != self.test_labels.len()
        {
            return Err(Error::Shape("sample/label count mismatch".into()));
        }
        if let Some(&bad) = self
            .train_labels
            .iter()
            .chain(self.test_labels.iter())
            .find(|&&l| l >= self.n_classes)
        {
            return Err(Error::InvalidInput(format!(
                "label {bad} outside {} classes",
                self.n_classes
            )));
        }
        Ok(())
    }

    fn gather(&self, split: &Samples, idx: &[usize]) -> Tensor {
        match split {
            Samples::Vectors(a) => {
                let mut out = Array2::<f64>::zeros((a.nrows(), idx.len()));
                for (j, &i) in idx.iter().enumerate() {
                    for r in 0..a.nrows() {
                        out[[r, j]] = a[[r, i]];
                    }
                }
                Tensor::Vector(out)
            }
            Samples::Images(a) => {
                let (_, c, h, w) = a.dim();
                let mut out = Array4::<f64>::zeros((idx.len(), c, h, w));
                for (j, &i) in idx.iter().enumerate() {
                    for ci in 0..c {
                        for y in 0..h {
                            for x in 0..w {
                                out[[j, ci, y, x]] = a[[i, ci, y, x]];
                            }
                        }
                    }
                }
                Tensor::Image(out)
            }
        }
    }

    /// Deterministic mini-batches; `shuffle_seed` permutes sample order
    /// (None keeps file order).
    pub fn batches(
        &self,
        train: bool,
        batch_size: usize,
        shuffle_seed: Option<u64>,
    ) -> Vec<(Tensor, Vec<usize>)> {
        let (split, labels) = if train {
            (&self.train, &self.train_labels)
        } else {
            (&self.test, &self.test_labels)
        };
        let mut order: Vec<usize> = (0..split.len()).collect();
        if let Some(seed) = shuffle_seed {
            let mut rng = stream_rng(seed, Stream::Dataset, &[train as u64]);
            order.shuffle(&mut rng);
        }
        order
            .chunks(batch_size.max(1))
            .map(|chunk| {
                let xs = self.gather(split, chunk);
                let ys = chunk.iter().map(|&i| labels[i]).collect();
                (xs, ys)
            })
            .collect()
    }

    /// Keep only samples whose label passes the filter, remapping labels
    /// through `relabel`. Used for task-transfer splits (e.g. digits 0–4
    /// versus 5–9).
    pub fn filter_classes(
        &self,
        keep: impl Fn(usize) -> bool,
        relabel: impl Fn(usize) -> usize,
        n_classes: usize,
    ) -> Self {
        let pick = |split: &Samples, labels: &[usize]| -> (Samples, Vec<usize>) {
            let idx: Vec<usize> = labels
                .iter()
                .enumerate()
                .filter(|(_, &l)| keep(l))
                .map(|(i, _)| i)
                .collect();
            let samples = match self.gather(split, &idx) {
                Tensor::Vector(a) => Samples::Vectors(a),
                Tensor::Image(a) => Samples::Images(a),
            };
            let labels = idx.iter().map(|&i| relabel(labels[i])).collect();
            (samples, labels)
        };
        let (train, train_labels) = pick(&self.train, &self.train_labels);
        let (test, test_labels) = pick(&self.test, &self.test_labels);
        DatasetHandle {
            name: format!("{}-filtered", self.name),
            input_shape: self.input_shape,
            n_classes,
            train,
            train_labels,
            test,
            test_labels,
            mean: self.mean,
            std: self.std,
        }
    }
}

struct IdxReader<R> {
    inner: R,
    offset: u64,
}

impl<R: Read> IdxReader<R> {
    fn new(inner: R) -> Self {
        Self { inner, offset: 0 }
    }

    fn read_exact(&mut self, buf: &mut [u8], what: &str) -> Result<()> {
        match self.inner.read_exact(buf) {
            Ok(()) => {
                self.offset += buf.len() as u64;
                Ok(())
            }
            Err(_) => Err(Error::DatasetFormat {
                offset: self.offset,
                message: format!("truncated while reading {what}"),
            }),
        }
    }

    fn read_u32(&mut self, what: &str) -> Result<u32> {
        let mut b = [0u8; 4];
        self.read_exact(&mut b, what)?;
        Ok(u32::from_be_bytes(b))
    }
}

/// Parse an IDX image file (magic 0x00000803, big-endian dims, row-major
/// uint8 pixels) into n × 1 × rows × cols doubles scaled to [0, 1].
pub fn read_idx_images<R: Read>(reader: R) -> Result<Array4<f64>> {
    let mut r = IdxReader::new(reader);
    let magic = r.read_u32("image magic")?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::DatasetFormat {
            offset: 0,
            message: format!("bad image magic {magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x}"),
        });
    }
    let n = r.read_u32("image count")? as usize;
    let rows = r.read_u32("row count")? as usize;
    let cols = r.read_u32("column count")? as usize;
    let mut data = vec![0u8; n * rows * cols];
    r.read_exact(&mut data, "pixel data")?;
    let mut out = Array4::<f64>::zeros((n, 1, rows, cols));
    for i in 0..n {
        for y in 0..rows {
            for x in 0..cols {
                out[[i, 0, y, x]] = data[i * rows * cols + y * cols + x] as f64 / 255.0;
            }
        }
    }
    Ok(out)
}

/// Parse an IDX label file (magic 0x00000801).
pub fn read_idx_labels<R: Read>(reader: R) -> Result<Vec<usize>> {
    let mut r = IdxReader::new(reader);
    let magic = r.read_u32("label magic")?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::DatasetFormat {
            offset: 0,
            message: format!("bad label magic {magic:#010x}, expected {IDX_LABELS_MAGIC:#010x}"),
        });
    }
    let n = r.read_u32("label count")? as usize;
    let mut data = vec![0u8; n];
    r.read_exact(&mut data, "label data")?;
    Ok(data.into_iter().map(|b| b as usize).collect())
}

/// Serialize images to IDX bytes (the writer counterpart, used for fixtures
/// and exporting synthetic sets).
pub fn write_idx_images(images: &Array4<f64>) -> Vec<u8> {
    let (n, _c, rows, cols) = images.dim();
    let mut out = Vec::with_capacity(16 + n * rows * cols);
    out.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
    out.extend_from_slice(&(n as u32).to_be_bytes());
    out.extend_from_slice(&(rows as u32).to_be_bytes());
    out.extend_from_slice(&(cols as u32).to_be_bytes());
    for i in 0..n {
        for y in 0..rows {
            for x in 0..cols {
                out.push((images[[i, 0, y, x]].clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
    }
    out
}

pub fn write_idx_labels(labels: &[usize]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend(labels.iter().map(|&l| l as u8));
    out
}

fn standardize_images(mut imgs: Array4<f64>, mean: f64, std: f64) -> Array4<f64> {
    imgs.mapv_inplace(|v| (v - mean) / std);
    imgs
}

/// Load an IDX dataset from `train-images/train-labels/t10k-images/...`
/// files under `dir`, standardized with the given statistics. `limit`
/// truncates both splits (deterministically, file order).
pub fn load_idx_dataset(
    dir: &Path,
    mean: f64,
    std: f64,
    limit_train: Option<usize>,
    limit_test: Option<usize>,
) -> Result<DatasetHandle> {
    let open = |name: &str| -> Result<std::fs::File> {
        let path = dir.join(name);
        std::fs::File::open(&path)
            .map_err(|e| Error::Config(format!("cannot open {}: {e}", path.display())))
    };
    let mut train = read_idx_images(open("train-images-idx3-ubyte")?)?;
    let mut train_labels = read_idx_labels(open("train-labels-idx1-ubyte")?)?;
    let mut test = read_idx_images(open("t10k-images-idx3-ubyte")?)?;
    let mut test_labels = read_idx_labels(open("t10k-labels-idx1-ubyte")?)?;
    if train.dim().0 != train_labels.len() || test.dim().0 != test_labels.len() {
        return Err(Error::Shape("image/label counts differ".into()));
    }
    if let Some(limit) = limit_train {
        let n = limit.min(train.dim().0);
        train = train.slice(ndarray::s![..n, .., .., ..]).to_owned();
        train_labels.truncate(n);
    }
    if let Some(limit) = limit_test {
        let n = limit.min(test.dim().0);
        test = test.slice(ndarray::s![..n, .., .., ..]).to_owned();
        test_labels.truncate(n);
    }
    let (_, c, h, w) = train.dim();
    let n_classes = train_labels
        .iter()
        .chain(test_labels.iter())
        .max()
        .map_or(0, |&m| m + 1);
    let handle = DatasetHandle {
        name: "idx".into(),
        input_shape: Shape::Image(c, h, w),
        n_classes,
        train: Samples::Images(standardize_images(train, mean, std)),
        train_labels,
        test: Samples::Images(standardize_images(test, mean, std)),
        test_labels,
        mean,
        std,
    };
    handle.validate()?;
    Ok(handle)
}

/// Synthetic Gaussian blobs: `classes` centers on a seeded sphere of radius
/// 2.5 in `features` dimensions, per-class noise std 0.6.
pub fn synthetic_blobs(
    features: usize,
    classes: usize,
    train_per_class: usize,
    test_per_class: usize,
    seed: u64,
) -> DatasetHandle {
    let mut rng = stream_rng(seed, Stream::Dataset, &[0xb10b]);
    let normal = Normal::new(0.0, 1.0f64).unwrap();
    let centers: Vec<Vec<f64>> = (0..classes)
        .map(|_| {
            let raw: Vec<f64> = (0..features).map(|_| normal.sample(&mut rng)).collect();
            let n = raw.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-9);
            raw.into_iter().map(|x| 2.5 * x / n).collect()
        })
        .collect();
    let noise = Normal::new(0.0, 0.6f64).unwrap();
    let make = |per_class: usize, tag: u64| -> (Array2<f64>, Vec<usize>) {
        let mut rng = stream_rng(seed, Stream::Dataset, &[0xb10b, tag]);
        let n = per_class * classes;
        let mut xs = Array2::<f64>::zeros((features, n));
        let mut ys = Vec::with_capacity(n);
        for i in 0..n {
            let class = i % classes;
            for f in 0..features {
                xs[[f, i]] = centers[class][f] + noise.sample(&mut rng);
            }
            ys.push(class);
        }
        (xs, ys)
    };
    let (train, train_labels) = make(train_per_class, 1);
    let (test, test_labels) = make(test_per_class, 2);
    DatasetHandle {
        name: "blobs".into(),
        input_shape: Shape::Vector(features),
        n_classes: classes,
        train: Samples::Vectors(train),
        train_labels,
        test: Samples::Vectors(test),
        test_labels,
        mean: 0.0,
        std: 1.0,
    }
}

/// Procedural digit-like images built from a shared motif vocabulary: a
/// seeded bank of oriented strokes is placed in class-specific arrangements,
/// so different classes (and class splits) share low-level structure the way
/// handwritten digits share pen strokes. Samples jitter the arrangement,
/// shift it by a few pixels, and add pixel noise. Deterministic under seed.
pub fn synthetic_digits(
    classes: usize,
    train_per_class: usize,
    test_per_class: usize,
    side: usize,
    seed: u64,
) -> DatasetHandle {
    let mut bank_rng = stream_rng(seed, Stream::Dataset, &[0xd161, 0xba1c]);
    // Shared stroke bank: anisotropic oriented Gaussians.
    let n_motifs = 6;
    let motifs: Vec<(f64, f64, f64)> = (0..n_motifs)
        .map(|_| {
            let angle = bank_rng.random_range(0.0..std::f64::consts::PI);
            let len: f64 = bank_rng.random_range(2.5..4.5);
            let width: f64 = bank_rng.random_range(0.9..1.6);
            (angle, len, width)
        })
        .collect();

    // Class layouts: 3-4 motifs from the bank at class-specific anchors.
    let mut proto_rng = stream_rng(seed, Stream::Dataset, &[0xd161, 1]);
    let layouts: Vec<Vec<(usize, f64, f64)>> = (0..classes)
        .map(|_| {
            let n = 3 + proto_rng.random_range(0..2usize);
            (0..n)
                .map(|_| {
                    (
                        proto_rng.random_range(0..n_motifs),
                        proto_rng.random_range(0.25..0.75) * side as f64,
                        proto_rng.random_range(0.25..0.75) * side as f64,
                    )
                })
                .collect()
        })
        .collect();

    let render = |layout: &[(usize, f64, f64)], jitter: &[(f64, f64)], img: &mut Array2<f64>| {
        for (slot, &(m, cy, cx)) in layout.iter().enumerate() {
            let (angle, len, width) = motifs[m];
            let (jy, jx) = jitter[slot];
            let (sa, ca) = angle.sin_cos();
            for y in 0..side {
                for x in 0..side {
                    let dy = y as f64 - (cy + jy);
                    let dx = x as f64 - (cx + jx);
                    let along = ca * dx + sa * dy;
                    let across = -sa * dx + ca * dy;
                    let v = (-0.5 * ((along / len).powi(2) + (across / width).powi(2))).exp();
                    img[[y, x]] += v;
                }
            }
        }
    };

    let make = |per_class: usize, tag: u64| -> (Array4<f64>, Vec<usize>) {
        let mut rng = stream_rng(seed, Stream::Dataset, &[0xd161, 2, tag]);
        let noise = Normal::new(0.0, 0.18f64).unwrap();
        let n = per_class * classes;
        let mut xs = Array4::<f64>::zeros((n, 1, side, side));
        let mut ys = Vec::with_capacity(n);
        for i in 0..n {
            let class = i % classes;
            let layout = &layouts[class];
            let jitter: Vec<(f64, f64)> = layout
                .iter()
                .map(|_| (rng.random_range(-1.5..1.5), rng.random_range(-1.5..1.5)))
                .collect();
            let mut img = Array2::<f64>::zeros((side, side));
            render(layout, &jitter, &mut img);
            let max = img.iter().cloned().fold(0.0f64, f64::max).max(1e-9);
            let gain: f64 = rng.random_range(0.6..1.1);
            let shift_y = rng.random_range(-2i64..=2);
            let shift_x = rng.random_range(-2i64..=2);
            for y in 0..side {
                for x in 0..side {
                    let sy = y as i64 - shift_y;
                    let sx = x as i64 - shift_x;
                    let base = if sy >= 0 && sx >= 0 && (sy as usize) < side && (sx as usize) < side
                    {
                        img[[sy as usize, sx as usize]] / max
                    } else {
                        0.0
                    };
                    xs[[i, 0, y, x]] = (gain * base + noise.sample(&mut rng)).clamp(0.0, 1.0);
                }
            }
            ys.push(class);
        }
        (xs, ys)
    };
    let (train, train_labels) = make(train_per_class, 1);
    let (test, test_labels) = make(test_per_class, 2);
    let mean = 0.2;
    let std = 0.35;
    DatasetHandle {
        name: "synthetic-digits".into(),
        input_shape: Shape::Image(1, side, side),
        n_classes: classes,
        train: Samples::Images(standardize_images(train, mean, std)),
        train_labels,
        test: Samples::Images(standardize_images(test, mean, std)),
        test_labels,
        mean,
        std,
    }
}
