//! Python bindings for the core photonic tensor-core types and operations:
//! mesh math (rotators, decomposition, SVD), phase quantization, single
//! blocks behind the observability firewall, and the cost formulas.

use ndarray::{Array1, Array2};
use ptcore::cost::{CostMeter, LayerDims};
use ptcore::mesh;
use ptcore::noise::NoiseConfig;
use ptcore::ptc::{PhaseProgram, PhaseProgramRecord, PtcBlock};
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

fn err<T>(r: ptcore::error::Result<T>) -> PyResult<T> {
    r.map_err(|e| PyValueError::new_err(e.to_string()))
}

fn to_matrix(rows: Vec<Vec<f64>>) -> PyResult<Array2<f64>> {
    let n = rows.len();
    if n == 0 || rows.iter().any(|r| r.len() != rows[0].len()) {
        return Err(PyValueError::new_err(
            "matrix must be rectangular and non-empty",
        ));
    }
    let m = rows[0].len();
    let mut out = Array2::<f64>::zeros((n, m));
    for (i, row) in rows.iter().enumerate() {
        for (j, &v) in row.iter().enumerate() {
            out[[i, j]] = v;
        }
    }
    Ok(out)
}

fn from_matrix(m: &Array2<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|r| (0..m.ncols()).map(|c| m[[r, c]]).collect())
        .collect()
}

/// Uniform b-bit phase quantization onto [0, 2π].
#[pyfunction]
fn quantize_phase(phi: f64, bits: u32) -> f64 {
    ptcore::noise::quantize_phase(phi, bits)
}

/// 2×2 planar rotator [[cos φ, −sin φ], [sin φ, cos φ]].
#[pyfunction]
fn rotator(phi: f64) -> PyResult<Vec<Vec<f64>>> {
    Ok(from_matrix(&err(mesh::rotator(phi))?))
}

/// The four physical shifter settings (θ_T, θ_L, ω_P, ω_W) realizing a
/// rotation angle.
#[pyfunction]
fn mzi_phase_settings(phi: f64) -> PyResult<(f64, f64, f64, f64)> {
    let s = err(mesh::mzi_phase_settings(phi))?;
    Ok((s.theta_t, s.theta_l, s.omega_p, s.omega_w))
}

/// Factor an orthogonal matrix into mesh phases; returns (phis, d).
#[pyfunction]
fn decompose_unitary(matrix: Vec<Vec<f64>>) -> PyResult<(Vec<f64>, Vec<f64>)> {
    let u = to_matrix(matrix)?;
    let p = err(mesh::decompose_unitary(&u))?;
    Ok((p.phis().to_vec(), p.d().to_vec()))
}

/// Rebuild the orthogonal matrix from (k, phis, d).
#[pyfunction]
fn reconstruct_unitary(k: usize, phis: Vec<f64>, d: Vec<f64>) -> PyResult<Vec<Vec<f64>>> {
    let p = err(mesh::UnitaryPhases::new(k, phis, d))?;
    Ok(from_matrix(&mesh::reconstruct_unitary(&p)))
}

type PyMatrix = Vec<Vec<f64>>;

/// SVD of a square matrix; returns (u, sigma, v_t).
#[pyfunction]
fn svd(matrix: Vec<Vec<f64>>) -> PyResult<(PyMatrix, Vec<f64>, PyMatrix)> {
    let w = to_matrix(matrix)?;
    let t = err(mesh::svd(&w))?;
    Ok((from_matrix(&t.u), t.sigma.to_vec(), from_matrix(&t.v_t)))
}

/// Per-iteration PTC energy formula (forward, weight_grad, feedback).
#[pyfunction]
#[allow(clippy::too_many_arguments)]
fn energy(
    c_out: usize,
    c_in: usize,
    kernel: usize,
    h_out: usize,
    w_out: usize,
    h: usize,
    w: usize,
    k: usize,
    batch: usize,
    sc_kept: usize,
    sw_kept: usize,
) -> (u64, u64, u64) {
    let dims = LayerDims {
        c_out,
        c_in,
        kernel,
        stride: 1,
        h,
        w,
        h_out,
        w_out,
        k,
    };
    let e = ptcore::cost::energy(&dims, batch, sc_kept, sw_kept);
    (e.forward, e.weight_grad, e.feedback)
}

/// Noise configuration of a simulated block.
#[pyclass(name = "NoiseConfig", from_py_object)]
#[derive(Clone)]
struct PyNoiseConfig {
    inner: NoiseConfig,
}

#[pymethods]
impl PyNoiseConfig {
    #[new]
    #[pyo3(signature = (bitwidth_unitary=8, bitwidth_sigma=16, gamma_std=0.002, crosstalk_factor=0.005, phase_bias_enabled=false, seed=0))]
    fn new(
        bitwidth_unitary: u32,
        bitwidth_sigma: u32,
        gamma_std: f64,
        crosstalk_factor: f64,
        phase_bias_enabled: bool,
        seed: u64,
    ) -> PyResult<Self> {
        let inner = NoiseConfig {
            bitwidth_unitary,
            bitwidth_sigma,
            gamma_std,
            crosstalk_factor,
            phase_bias_enabled,
            seed,
        };
        err(inner.validate())?;
        Ok(Self { inner })
    }

    /// Everything off: continuous control, no gain error, no coupling.
    #[staticmethod]
    fn noiseless() -> Self {
        Self {
            inner: NoiseConfig::noiseless(),
        }
    }

    fn __repr__(&self) -> String {
        format!("{:?}", self.inner)
    }
}

/// One simulated k×k photonic tensor core. Only port-level behavior is
/// exposed: forward/reverse passes and the monitored Σ diagonal.
#[pyclass(name = "PtcBlock")]
struct PyPtcBlock {
    inner: PtcBlock,
    meter: CostMeter,
}

#[pymethods]
impl PyPtcBlock {
    #[new]
    #[pyo3(signature = (k, noise=None, block_id=0))]
    fn new(k: usize, noise: Option<PyNoiseConfig>, block_id: u64) -> PyResult<Self> {
        let cfg = noise.map(|n| n.inner).unwrap_or_default();
        Ok(Self {
            inner: err(PtcBlock::new(k, cfg, block_id))?,
            meter: CostMeter::default(),
        })
    }

    /// Program the block to realize a dense k×k target through its SVD.
    fn program_from_dense(&mut self, target: Vec<Vec<f64>>) -> PyResult<()> {
        let w = to_matrix(target)?;
        let program = err(PhaseProgram::from_dense(&w))?;
        err(self.inner.set_program(program))
    }

    /// Optical forward pass y = Ũ Σ̃ Ṽ* x.
    fn forward(&mut self, x: Vec<f64>) -> PyResult<Vec<f64>> {
        if x.len() != self.inner.k() {
            return Err(PyValueError::new_err("input length must equal k"));
        }
        let y = self.inner.forward(&Array1::from_vec(x), &mut self.meter);
        Ok(y.to_vec())
    }

    /// Reverse pass (Ũ Σ̃ Ṽ*)ᵀ z through the reciprocal circuit.
    fn adjoint(&mut self, z: Vec<f64>) -> PyResult<Vec<f64>> {
        if z.len() != self.inner.k() {
            return Err(PyValueError::new_err("input length must equal k"));
        }
        let y = self.inner.adjoint(&Array1::from_vec(z), &mut self.meter);
        Ok(y.to_vec())
    }

    /// The monitored Σ diagonal.
    fn read_sigma(&self) -> Vec<f64> {
        self.inner.read_sigma()
    }

    /// Two-pass optimal singular-value projection onto a target matrix;
    /// returns the measured diagonal.
    #[pyo3(signature = (target, noisy_passes=true))]
    fn osp_project(&mut self, target: Vec<Vec<f64>>, noisy_passes: bool) -> PyResult<Vec<f64>> {
        let w = to_matrix(target)?;
        err(self.inner.osp_project(&w, noisy_passes, &mut self.meter))
    }

    /// In-situ subspace gradient (Ũᵀ dy) ⊙ (Ṽ* x).
    fn subspace_grad(&mut self, x: Vec<f64>, dy: Vec<f64>) -> PyResult<Vec<f64>> {
        if x.len() != self.inner.k() || dy.len() != self.inner.k() {
            return Err(PyValueError::new_err("vector lengths must equal k"));
        }
        let g =
            self.inner
                .subspace_grad(&Array1::from_vec(x), &Array1::from_vec(dy), &mut self.meter);
        Ok(g.to_vec())
    }

    /// Accumulated (forward_macs, weight_grad_calls, feedback_calls).
    fn meter(&self) -> (u64, u64, u64) {
        (
            self.meter.forward_macs,
            self.meter.weight_grad_calls,
            self.meter.feedback_calls,
        )
    }

    /// The block program in the checkpoint JSON wire format.
    fn checkpoint_json(&self) -> PyResult<String> {
        let record = PhaseProgramRecord::from(self.inner.program());
        serde_json_to_string(&record)
    }

    fn k(&self) -> usize {
        self.inner.k()
    }
}

fn serde_json_to_string<T: serde::Serialize>(value: &T) -> PyResult<String> {
    serde_json::to_string(value).map_err(|e| PyValueError::new_err(e.to_string()))
}

#[pymodule]
fn ptcore_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyNoiseConfig>()?;
    m.add_class::<PyPtcBlock>()?;
    m.add_function(wrap_pyfunction!(quantize_phase, m)?)?;
    m.add_function(wrap_pyfunction!(rotator, m)?)?;
    m.add_function(wrap_pyfunction!(mzi_phase_settings, m)?)?;
    m.add_function(wrap_pyfunction!(decompose_unitary, m)?)?;
    m.add_function(wrap_pyfunction!(reconstruct_unitary, m)?)?;
    m.add_function(wrap_pyfunction!(svd, m)?)?;
    m.add_function(wrap_pyfunction!(energy, m)?)?;
    Ok(())
}
