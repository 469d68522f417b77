//! Radial-basis parameter fields, the squared-exponential mixing kernel and the
//! lattice transition matrix.
//!
//! The kernel at location `s` is a bivariate Gaussian centred at `s - (θ2, θ3)`
//! with per-axis variance `2·θ1`:
//!
//! `k(s, u; θ) = 1/(4π θ1) · exp(-‖s - (θ2, θ3) - u‖² / (4 θ1))`
//!
//! so under `Y_{t+1} = K Y_t` a lump of mass at `u` moves to `u + (θ2, θ3)`.
//! `θ2` displaces along `x` (columns) and `θ3` along `y` (rows).

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::grid::{Field, GridSpec};

/// Default lower bound added to the diffusivity link.
pub const THETA_MIN: f64 = 1e-6;

/// Gaussian radial basis functions on a regular `√r × √r` lattice of centres.
#[derive(Debug, Clone)]
pub struct RbfBasis {
    grid: GridSpec,
    centers: Vec<(f64, f64)>,
    bandwidth: f64,
    /// `n² × r` evaluation matrix.
    phi: DMatrix<f64>,
}

impl RbfBasis {
    pub fn grid(&self) -> GridSpec {
        self.grid
    }

    pub fn r(&self) -> usize {
        self.centers.len()
    }

    pub fn centers(&self) -> &[(f64, f64)] {
        &self.centers
    }

    pub fn bandwidth(&self) -> f64 {
        self.bandwidth
    }

    pub fn phi(&self) -> &DMatrix<f64> {
        &self.phi
    }

    /// `Φ·w` as a plain vector.
    pub fn expand(&self, w: &[f64]) -> Result<Vec<f64>> {
        if w.len() != self.r() {
            return Err(Error::DimensionMismatch(format!(
                "{} weights for {} basis functions",
                w.len(),
                self.r()
            )));
        }
        Ok((&self.phi * DVector::from_column_slice(w)).data.into())
    }

    /// `Φᵀ·g` for a per-pixel gradient `g`.
    pub fn project(&self, g: &[f64]) -> Vec<f64> {
        (self.phi.transpose() * DVector::from_column_slice(g)).data.into()
    }
}

/// Default bandwidth: one and a half centre spacings.
pub fn default_bandwidth(r: usize) -> f64 {
    1.5 / (r as f64).sqrt()
}

pub fn build_rbf_basis(grid: GridSpec, r: usize, bandwidth: f64) -> Result<RbfBasis> {
    let k = (r as f64).sqrt().round() as usize;
    if r == 0 || k * k != r {
        return Err(Error::NotPerfectSquare(r));
    }
    if !(bandwidth > 0.0) || !bandwidth.is_finite() {
        return Err(Error::InvalidArgument(format!("bandwidth must be positive, got {bandwidth}")));
    }
    let mut centers = Vec::with_capacity(r);
    for i in 0..k {
        for j in 0..k {
            centers.push(((j as f64 + 0.5) / k as f64, (i as f64 + 0.5) / k as f64));
        }
    }
    let two_b2 = 2.0 * bandwidth * bandwidth;
    let phi = DMatrix::from_fn(grid.len(), r, |p, c| {
        let (x, y) = grid.center(p);
        let (cx, cy) = centers[c];
        (-((x - cx).powi(2) + (y - cy).powi(2)) / two_b2).exp()
    });
    Ok(RbfBasis { grid, centers, bandwidth, phi })
}

/// Basis coefficients for diffusion (`w1`, before the positivity link) and for the
/// two advection components (`w2` along x, `w3` along y).
#[derive(Debug, Clone, PartialEq)]
pub struct DynamicsWeights {
    pub w1: Vec<f64>,
    pub w2: Vec<f64>,
    pub w3: Vec<f64>,
}

impl DynamicsWeights {
    pub fn zeros(r: usize) -> Self {
        Self { w1: vec![0.0; r], w2: vec![0.0; r], w3: vec![0.0; r] }
    }

    pub fn r(&self) -> usize {
        self.w1.len()
    }

    pub fn get(&self, component: usize) -> &[f64] {
        match component {
            0 => &self.w1,
            1 => &self.w2,
            2 => &self.w3,
            _ => panic!("dynamics component {component} out of range"),
        }
    }
}

/// Per-pixel kernel parameters: diffusivity `theta1` (> 0) and advection
/// displacements `theta2` (x) and `theta3` (y), in unit-square lengths.
#[derive(Debug, Clone, PartialEq)]
pub struct ThetaFields {
    pub theta1: Vec<f64>,
    pub theta2: Vec<f64>,
    pub theta3: Vec<f64>,
}

impl ThetaFields {
    /// Spatially invariant parameters.
    pub fn constant(grid: GridSpec, d: f64, v1: f64, v2: f64) -> Result<Self> {
        if !(d > 0.0) {
            return Err(Error::NonpositiveDiffusion(d));
        }
        let n = grid.len();
        Ok(Self { theta1: vec![d; n], theta2: vec![v1; n], theta3: vec![v2; n] })
    }

    pub fn len(&self) -> usize {
        self.theta1.len()
    }

    pub fn is_empty(&self) -> bool {
        self.theta1.is_empty()
    }
}

pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `θ1 = softplus(Φ w1) + theta_min`, `θ2 = Φ w2`, `θ3 = Φ w3`.
pub fn theta_fields(basis: &RbfBasis, w: &DynamicsWeights, theta_min: f64) -> Result<ThetaFields> {
    let pre1 = basis.expand(&w.w1)?;
    Ok(ThetaFields {
        theta1: pre1.iter().map(|&a| softplus(a) + theta_min).collect(),
        theta2: basis.expand(&w.w2)?,
        theta3: basis.expand(&w.w3)?,
    })
}

/// Pull per-pixel gradients on `θ` back to the basis weights.
pub fn theta_fields_vjp(
    basis: &RbfBasis,
    w: &DynamicsWeights,
    g1: &[f64],
    g2: &[f64],
    g3: &[f64],
) -> Result<DynamicsWeights> {
    let pre1 = basis.expand(&w.w1)?;
    let g1_pre: Vec<f64> = g1.iter().zip(&pre1).map(|(g, a)| g * sigmoid(*a)).collect();
    Ok(DynamicsWeights { w1: basis.project(&g1_pre), w2: basis.project(g2), w3: basis.project(g3) })
}

pub fn kernel_value(
    s: (f64, f64),
    u: (f64, f64),
    theta1: f64,
    theta2: f64,
    theta3: f64,
) -> Result<f64> {
    if !(theta1 > 0.0) {
        return Err(Error::NonpositiveDiffusion(theta1));
    }
    let dx = s.0 - theta2 - u.0;
    let dy = s.1 - theta3 - u.1;
    Ok((-(dx * dx + dy * dy) / (4.0 * theta1)).exp() / (4.0 * PI * theta1))
}

/// One row of the transition matrix: `cell_area · k(s, u_j; θ)` over all cells `u_j`.
pub fn kernel_row(grid: GridSpec, s: (f64, f64), theta1: f64, theta2: f64, theta3: f64) -> Result<Vec<f64>> {
    if !(theta1 > 0.0) {
        return Err(Error::NonpositiveDiffusion(theta1));
    }
    let mut row = vec![0.0; grid.len()];
    fill_row(&mut row, grid, s, (theta1, theta2, theta3), false);
    Ok(row)
}

fn fill_row(row: &mut [f64], grid: GridSpec, s: (f64, f64), th: (f64, f64, f64), periodic: bool) {
    let n = grid.n();
    let w = grid.cell_width();
    let scale = grid.cell_area() / (4.0 * PI * th.0);
    let inv = 1.0 / (4.0 * th.0);
    let cx = s.0 - th.1;
    let cy = s.1 - th.2;
    let wrap = |d: f64| if periodic { d - d.round() } else { d };
    // exp(-(dx²+dy²)/4θ1) factorizes over the two axes
    let ex: Vec<f64> = (0..n)
        .map(|c| {
            let d = wrap(cx - (c as f64 + 0.5) * w);
            (-d * d * inv).exp()
        })
        .collect();
    for r in 0..n {
        let d = wrap(cy - (r as f64 + 0.5) * w);
        let ey = (-d * d * inv).exp() * scale;
        for (out, e) in row[r * n..(r + 1) * n].iter_mut().zip(&ex) {
            *out = ey * e;
        }
    }
}

/// Dense lattice operator `K` with `K[i, j] = cell_area · k(s_i, u_j; θ(s_i))`.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionMatrix {
    grid: GridSpec,
    k: DMatrix<f64>,
}

impl TransitionMatrix {
    /// Wrap an arbitrary square operator (used by state-independent test systems).
    pub fn from_matrix(grid: GridSpec, k: DMatrix<f64>) -> Result<Self> {
        if k.nrows() != grid.len() || k.ncols() != grid.len() {
            return Err(Error::DimensionMismatch(format!(
                "operator is {}x{}, grid has {} pixels",
                k.nrows(),
                k.ncols(),
                grid.len()
            )));
        }
        Ok(Self { grid, k })
    }

    pub fn identity(grid: GridSpec) -> Self {
        Self { grid, k: DMatrix::identity(grid.len(), grid.len()) }
    }

    pub fn grid(&self) -> GridSpec {
        self.grid
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.k
    }

    pub fn apply(&self, y: &[f64]) -> Vec<f64> {
        let mut out = DVector::zeros(self.grid.len());
        out.gemv(1.0, &self.k, &DVector::from_column_slice(y), 0.0);
        out.data.into()
    }

    pub fn row_sums(&self) -> Vec<f64> {
        self.k.row_iter().map(|r| r.sum()).collect()
    }
}

fn build(theta: &ThetaFields, grid: GridSpec, trunc_tol: f64, periodic: bool) -> Result<TransitionMatrix> {
    let n2 = grid.len();
    if theta.len() != n2 || theta.theta2.len() != n2 || theta.theta3.len() != n2 {
        return Err(Error::DimensionMismatch(format!(
            "theta fields have {} entries, grid has {n2} pixels",
            theta.len()
        )));
    }
    if let Some(&t) = theta.theta1.iter().find(|t| !(**t > 0.0)) {
        return Err(Error::NonpositiveDiffusion(t));
    }
    // rows are filled contiguously, then transposed into nalgebra's column-major layout
    let mut rows = vec![0.0; n2 * n2];
    for (i, row) in rows.chunks_mut(n2).enumerate() {
        let th = (theta.theta1[i], theta.theta2[i], theta.theta3[i]);
        fill_row(row, grid, grid.center(i), th, periodic);
        if trunc_tol > 0.0 {
            row.iter_mut().filter(|v| **v < trunc_tol).for_each(|v| *v = 0.0);
        }
    }
    Ok(TransitionMatrix { grid, k: DMatrix::from_row_slice(n2, n2, &rows) })
}

pub fn transition_matrix(theta: &ThetaFields, grid: GridSpec) -> Result<TransitionMatrix> {
    build(theta, grid, 0.0, false)
}

/// As [`transition_matrix`] but zeroing entries below `trunc_tol`.
pub fn transition_matrix_truncated(
    theta: &ThetaFields,
    grid: GridSpec,
    trunc_tol: f64,
) -> Result<TransitionMatrix> {
    build(theta, grid, trunc_tol, false)
}

/// Wrap-around kernel distances; only used to check translation identities.
#[doc(hidden)]
pub fn transition_matrix_periodic(theta: &ThetaFields, grid: GridSpec) -> Result<TransitionMatrix> {
    build(theta, grid, 0.0, true)
}

pub fn propagate(k: &TransitionMatrix, y: &Field, eta: Option<&Field>) -> Result<Field> {
    if y.grid() != k.grid() {
        return Err(Error::DimensionMismatch("field and operator grids differ".into()));
    }
    let mut out = k.apply(y.values());
    if let Some(eta) = eta {
        if eta.grid() != k.grid() {
            return Err(Error::DimensionMismatch("noise and operator grids differ".into()));
        }
        out.iter_mut().zip(eta.values()).for_each(|(o, e)| *o += e);
    }
    Field::new(k.grid(), out)
}

/// Vector-Jacobian product of `θ ↦ vᵀ K(θ) x`: returns the gradients with respect
/// to `theta1`, `theta2`, `theta3` at every pixel.
pub fn transition_vjp(
    theta: &ThetaFields,
    k: &TransitionMatrix,
    v: &[f64],
    x: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let grid = k.grid();
    let n = grid.n();
    let n2 = grid.len();
    let w = grid.cell_width();
    let mut g1 = vec![0.0; n2];
    let mut g2 = vec![0.0; n2];
    let mut g3 = vec![0.0; n2];
    let coord: Vec<f64> = (0..n).map(|c| (c as f64 + 0.5) * w).collect();
    for i in 0..n2 {
        if v[i] == 0.0 {
            continue;
        }
        let (sx, sy) = grid.center(i);
        let (t1, t2, t3) = (theta.theta1[i], theta.theta2[i], theta.theta3[i]);
        let cx = sx - t2;
        let cy = sy - t3;
        let (mut a0, mut a1, mut a2, mut a3) = (0.0, 0.0, 0.0, 0.0);
        for j in 0..n2 {
            let kx = k.k[(i, j)] * x[j];
            if kx == 0.0 {
                continue;
            }
            let dx = cx - coord[j % n];
            let dy = cy - coord[j / n];
            a0 += kx;
            a1 += kx * (dx * dx + dy * dy);
            a2 += kx * dx;
            a3 += kx * dy;
        }
        // ∂K/∂θ1 = K (h²/(4θ1²) - 1/θ1), ∂K/∂θ2 = K dx/(2θ1), ∂K/∂θ3 = K dy/(2θ1)
        g1[i] = v[i] * (a1 / (4.0 * t1 * t1) - a0 / t1);
        g2[i] = v[i] * a2 / (2.0 * t1);
        g3[i] = v[i] * a3 / (2.0 * t1);
    }
    (g1, g2, g3)
}
