//! Dense small-matrix linear algebra for k×k photonic blocks: 2×2 planar
//! rotators, triangular-mesh unitary parametrization, and SVD.
//!
//! All arithmetic is real and double precision. An MZI reduces to the planar
//! rotator `R(φ) = [[cos φ, −sin φ], [sin φ, cos φ]]`, and a k×k orthogonal
//! matrix factors as `U = D · ∏_{i=k..2} ∏_{j=1..i−1} R_ij(φ_ij)` where `D` is
//! a ±1 diagonal and `R_ij` embeds the rotator into the (j, i) plane (rows and
//! columns ordered ascending, so `R_ij[j][i] = −sin φ`).

use crate::error::{Error, Result};
use ndarray::{Array1, Array2};
use std::f64::consts::PI;

/// Planar rotation angle of one MZI.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rotator {
    pub phi: f64,
}

impl Rotator {
    pub fn new(phi: f64) -> Result<Self> {
        if !phi.is_finite() {
            return Err(Error::InvalidInput(format!(
                "rotator phase {phi} not finite"
            )));
        }
        Ok(Self { phi })
    }

    pub fn matrix(&self) -> Array2<f64> {
        rotator(self.phi).expect("finite by construction")
    }
}

/// 2×2 planar rotator `[[cos φ, −sin φ], [sin φ, cos φ]]`.
pub fn rotator(phi: f64) -> Result<Array2<f64>> {
    if !phi.is_finite() {
        return Err(Error::InvalidInput(format!(
            "rotator phase {phi} not finite"
        )));
    }
    let (s, c) = phi.sin_cos();
    Ok(ndarray::array![[c, -s], [s, c]])
}

/// Settings of the four physical phase shifters of one MZI.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MziShifterSettings {
    pub theta_t: f64,
    pub theta_l: f64,
    pub omega_p: f64,
    pub omega_w: f64,
}

/// Physical shifter settings that make an MZI implement `rotator(phi)`.
///
/// The internal arms are driven with common mode π and differential mode
/// `Δω = π − 2φ`; the input shifters sit at θ_T = π/2, θ_L = 3π/2.
pub fn mzi_phase_settings(phi: f64) -> Result<MziShifterSettings> {
    if !phi.is_finite() {
        return Err(Error::InvalidInput(format!("MZI phase {phi} not finite")));
    }
    let delta_omega = PI - 2.0 * phi;
    Ok(MziShifterSettings {
        theta_t: PI / 2.0,
        theta_l: 3.0 * PI / 2.0,
        omega_p: PI + delta_omega / 2.0,
        omega_w: PI - delta_omega / 2.0,
    })
}

/// Phase parametrization of a k×k orthogonal matrix: one rotation angle per
/// MZI in the triangular mesh plus a ±1 output diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct UnitaryPhases {
    k: usize,
    /// Angles ordered by the mesh product: i = k..2 descending, j = 1..i−1
    /// ascending (1-based indices).
    phis: Vec<f64>,
    /// Diagonal sign vector, entries ±1.
    d: Vec<f64>,
}

/// Number of rotators in a k×k triangular mesh.
pub fn phase_count(k: usize) -> usize {
    k * (k - 1) / 2
}

/// The (i, j) pairs (1-based, i > j) in mesh product order.
pub fn phase_order(k: usize) -> impl Iterator<Item = (usize, usize)> {
    (2..=k).rev().flat_map(move |i| (1..i).map(move |j| (i, j)))
}

impl UnitaryPhases {
    pub fn new(k: usize, phis: Vec<f64>, d: Vec<f64>) -> Result<Self> {
        if k < 1 {
            return Err(Error::InvalidInput("block size must be at least 1".into()));
        }
        if phis.len() != phase_count(k) {
            return Err(Error::Shape(format!(
                "expected {} phases for k={k}, got {}",
                phase_count(k),
                phis.len()
            )));
        }
        if d.len() != k || d.iter().any(|&s| s != 1.0 && s != -1.0) {
            return Err(Error::InvalidInput(format!(
                "diagonal must be {k} entries of ±1"
            )));
        }
        if phis.iter().any(|p| !p.is_finite()) {
            return Err(Error::InvalidInput("non-finite phase".into()));
        }
        Ok(Self { k, phis, d })
    }

    /// All-zero phases with +1 diagonal (the identity mesh).
    pub fn identity(k: usize) -> Self {
        Self {
            k,
            phis: vec![0.0; phase_count(k)],
            d: vec![1.0; k],
        }
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn phis(&self) -> &[f64] {
        &self.phis
    }

    pub fn phis_mut(&mut self) -> &mut [f64] {
        &mut self.phis
    }

    pub fn set_phis(&mut self, phis: &[f64]) -> Result<()> {
        if phis.len() != self.phis.len() {
            return Err(Error::Shape(format!(
                "expected {} phases, got {}",
                self.phis.len(),
                phis.len()
            )));
        }
        self.phis.copy_from_slice(phis);
        Ok(())
    }

    pub fn d(&self) -> &[f64] {
        &self.d
    }
}

/// Apply the embedded rotator `R_ij(phi)` on the left of `m` in place:
/// rows a = j−1 and b = i−1 (0-based) are mixed as
/// `[row_a; row_b] ← [[c, −s], [s, c]] · [row_a; row_b]`.
fn rotate_rows_left(m: &mut Array2<f64>, a: usize, b: usize, phi: f64) {
    let (s, c) = phi.sin_cos();
    let n = m.ncols();
    for col in 0..n {
        let xa = m[[a, col]];
        let xb = m[[b, col]];
        m[[a, col]] = c * xa - s * xb;
        m[[b, col]] = s * xa + c * xb;
    }
}

/// Rebuild the k×k orthogonal matrix `D · ∏ R_ij(φ_ij)` from its phases.
pub fn reconstruct_unitary(p: &UnitaryPhases) -> Array2<f64> {
    let k = p.k;
    let mut m = Array2::<f64>::eye(k);
    // Build the product by applying factors right-to-left onto the identity:
    // the last factor in the product order is applied first.
    for (&(i, j), &phi) in phase_order(k)
        .collect::<Vec<_>>()
        .iter()
        .rev()
        .zip(p.phis.iter().rev())
    {
        rotate_rows_left(&mut m, j - 1, i - 1, phi);
    }
    for (r, &sign) in p.d.iter().enumerate() {
        for c in 0..k {
            m[[r, c]] *= sign;
        }
    }
    m
}

/// Apply the mesh to a vector without materializing the matrix.
pub fn apply_unitary(p: &UnitaryPhases, x: &Array1<f64>) -> Array1<f64> {
    let k = p.k;
    let mut v = x.clone();
    for (&(i, j), &phi) in phase_order(k)
        .collect::<Vec<_>>()
        .iter()
        .rev()
        .zip(p.phis.iter().rev())
    {
        let (s, c) = phi.sin_cos();
        let (a, b) = (j - 1, i - 1);
        let xa = v[a];
        let xb = v[b];
        v[a] = c * xa - s * xb;
        v[b] = s * xa + c * xb;
    }
    for (r, &sign) in p.d.iter().enumerate() {
        v[r] *= sign;
    }
    v
}

fn wrap_two_pi(phi: f64) -> f64 {
    let mut p = phi % (2.0 * PI);
    if p < 0.0 {
        p += 2.0 * PI;
    }
    if p >= 2.0 * PI {
        p = 0.0;
    }
    p
}

/// Frobenius norm of `U·Uᵀ − I`.
pub fn orthogonality_residual(u: &Array2<f64>) -> f64 {
    let k = u.nrows();
    let gram = u.dot(&u.t());
    let mut acc = 0.0;
    for r in 0..k {
        for c in 0..k {
            let target = if r == c { 1.0 } else { 0.0 };
            let d = gram[[r, c]] - target;
            acc += d * d;
        }
    }
    acc.sqrt()
}

/// Factor an orthogonal matrix into mesh phases by Givens elimination.
///
/// Columns are cleared right-to-left, each top-down: the step for slot
/// (i, j) zeroes entry (j, i) by a row rotation in the (j, i) plane, which
/// rebuilds the mesh product in its defined order with the ±1 diagonal left
/// over at the end. The leftover diagonal is pushed back through the product
/// (flipping angle signs where its two plane signs differ) to give the
/// leading `D`. Phases come out normalized to [0, 2π).
pub fn decompose_unitary(u: &Array2<f64>) -> Result<UnitaryPhases> {
    decompose_unitary_impl(u, true)
}

/// Like [`decompose_unitary`] but always taking the pivot-positive Givens
/// branch, so a generic rotation (det +1, no exact zero targets) decomposes
/// with `d = +1`. Used where phases must line up with an all-plus diagonal,
/// at the price of larger angles.
pub fn decompose_unitary_positive(u: &Array2<f64>) -> Result<UnitaryPhases> {
    decompose_unitary_impl(u, false)
}

fn decompose_unitary_impl(u: &Array2<f64>, minimal_branch: bool) -> Result<UnitaryPhases> {
    let k = u.nrows();
    if u.ncols() != k {
        return Err(Error::Shape(format!(
            "matrix is {}×{}",
            u.nrows(),
            u.ncols()
        )));
    }
    let ortho = orthogonality_residual(u);
    if ortho > 1e-6 {
        return Err(Error::Decomposition {
            residual: ortho,
            tolerance: 1e-6,
        });
    }

    let order: Vec<(usize, usize)> = phase_order(k).collect();
    let mut m = u.clone();
    // Angles of the rotations applied during elimination, slot-aligned with
    // the product order. U = ∏_order R_ij(−θ_ij) · Δ.
    let mut thetas = vec![0.0; order.len()];
    for (slot, &(i, j)) in order.iter().enumerate() {
        let (a, b) = (j - 1, i - 1);
        let target = m[[a, b]];
        let pivot = m[[b, b]];
        let theta = if target.abs() < 1e-14 {
            0.0
        } else if minimal_branch {
            // Of the two angles that zero the target, keep the one with the
            // smaller actuation; the π ambiguity is absorbed by the end
            // diagonal. Smaller programmed phases mean proportionally smaller
            // gain and crosstalk perturbations on hardware.
            let mut t = target.atan2(pivot);
            if t > PI / 2.0 {
                t -= PI;
            } else if t < -PI / 2.0 {
                t += PI;
            }
            t
        } else {
            target.atan2(pivot)
        };
        if theta != 0.0 {
            rotate_rows_left(&mut m, a, b, theta);
        }
        thetas[slot] = theta;
    }

    let mut d = Vec::with_capacity(k);
    let mut residual = 0.0f64;
    for r in 0..k {
        for c in 0..k {
            if r != c {
                residual += m[[r, c]] * m[[r, c]];
            }
        }
        d.push(if m[[r, r]] < 0.0 { -1.0 } else { 1.0 });
        let dev = m[[r, r]].abs() - 1.0;
        residual += dev * dev;
    }
    let residual = residual.sqrt();
    if residual > 1e-7 {
        return Err(Error::Decomposition {
            residual,
            tolerance: 1e-7,
        });
    }

    // Move Δ from the right of the product to the left: conjugating R_ij by
    // the sign diagonal scales its angle by d_i·d_j.
    let phis: Vec<f64> = order
        .iter()
        .zip(thetas.iter())
        .map(|(&(i, j), &theta)| wrap_two_pi(-theta * d[i - 1] * d[j - 1]))
        .collect();
    UnitaryPhases::new(k, phis, d)
}

/// SVD of a square real matrix.
#[derive(Debug, Clone)]
pub struct SvdTriple {
    pub u: Array2<f64>,
    pub sigma: Array1<f64>,
    pub v_t: Array2<f64>,
}

impl SvdTriple {
    pub fn reconstruct(&self) -> Array2<f64> {
        let k = self.u.nrows();
        let mut scaled = self.v_t.clone();
        for r in 0..k {
            for c in 0..k {
                scaled[[r, c]] *= self.sigma[r];
            }
        }
        self.u.dot(&scaled)
    }
}

/// One-sided Jacobi SVD for k×k blocks (k ≤ 64).
///
/// Column pairs of the working matrix are orthogonalized until the largest
/// normalized inner product falls below 1e-12 or 60 sweeps pass. Zero columns
/// are completed to an orthonormal basis, and singular values come out
/// nonnegative in descending order.
pub fn svd(w: &Array2<f64>) -> Result<SvdTriple> {
    let k = w.nrows();
    if w.ncols() != k {
        return Err(Error::Shape(format!(
            "matrix is {}×{}",
            w.nrows(),
            w.ncols()
        )));
    }
    if w.iter().any(|x| !x.is_finite()) {
        return Err(Error::InvalidInput("matrix has non-finite entries".into()));
    }

    let mut a = w.clone();
    let mut v = Array2::<f64>::eye(k);

    for _sweep in 0..60 {
        let mut max_off = 0.0f64;
        for p in 0..k {
            for q in (p + 1)..k {
                let mut app = 0.0;
                let mut aqq = 0.0;
                let mut apq = 0.0;
                for r in 0..k {
                    let x = a[[r, p]];
                    let y = a[[r, q]];
                    app += x * x;
                    aqq += y * y;
                    apq += x * y;
                }
                let denom = (app * aqq).sqrt();
                if denom > 0.0 {
                    max_off = max_off.max(apq.abs() / denom);
                }
                if apq.abs() <= 1e-30 || denom == 0.0 || apq.abs() <= 1e-15 * denom {
                    continue;
                }
                let zeta = (aqq - app) / (2.0 * apq);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for r in 0..k {
                    let x = a[[r, p]];
                    let y = a[[r, q]];
                    a[[r, p]] = c * x - s * y;
                    a[[r, q]] = s * x + c * y;
                }
                for r in 0..k {
                    let x = v[[r, p]];
                    let y = v[[r, q]];
                    v[[r, p]] = c * x - s * y;
                    v[[r, q]] = s * x + c * y;
                }
            }
        }
        if max_off <= 1e-12 {
            break;
        }
    }

    // Column norms are the singular values.
    let mut order: Vec<usize> = (0..k).collect();
    let norms: Vec<f64> = (0..k)
        .map(|c| (0..k).map(|r| a[[r, c]] * a[[r, c]]).sum::<f64>().sqrt())
        .collect();
    order.sort_by(|&x, &y| norms[y].partial_cmp(&norms[x]).unwrap().then(x.cmp(&y)));

    let mut u = Array2::<f64>::zeros((k, k));
    let mut sigma = Array1::<f64>::zeros(k);
    let mut v_sorted = Array2::<f64>::zeros((k, k));
    let max_norm = norms[order[0]];
    for (slot, &c) in order.iter().enumerate() {
        sigma[slot] = norms[c];
        for r in 0..k {
            v_sorted[[r, slot]] = v[[r, c]];
        }
        if norms[c] > max_norm * 1e-13 && norms[c] > 0.0 {
            for r in 0..k {
                u[[r, slot]] = a[[r, c]] / norms[c];
            }
        }
    }

    // Complete zero columns of U to an orthonormal basis.
    for slot in 0..k {
        let len: f64 = (0..k).map(|r| u[[r, slot]] * u[[r, slot]]).sum();
        if len > 0.5 {
            continue;
        }
        sigma[slot] = 0.0;
        'candidates: for cand in 0..k {
            let mut col = vec![0.0; k];
            col[cand] = 1.0;
            for other in 0..k {
                if other == slot {
                    continue;
                }
                let dot: f64 = (0..k).map(|r| u[[r, other]] * col[r]).sum();
                for (r, item) in col.iter_mut().enumerate() {
                    *item -= dot * u[[r, other]];
                }
            }
            let n: f64 = col.iter().map(|x| x * x).sum::<f64>().sqrt();
            if n > 1e-6 {
                for r in 0..k {
                    u[[r, slot]] = col[r] / n;
                }
                break 'candidates;
            }
        }
    }

    Ok(SvdTriple {
        u,
        sigma,
        v_t: v_sorted.t().to_owned(),
    })
}

/// Haar-ish random orthogonal matrix: random rotations composed through the
/// mesh parametrization plus random signs.
pub fn random_orthogonal(k: usize, rng: &mut impl rand::Rng) -> Array2<f64> {
    let phis: Vec<f64> = (0..phase_count(k))
        .map(|_| rng.random_range(0.0..2.0 * PI))
        .collect();
    let d: Vec<f64> = (0..k)
        .map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 })
        .collect();
    let p = UnitaryPhases::new(k, phis, d).expect("valid sizes");
    reconstruct_unitary(&p)
}
