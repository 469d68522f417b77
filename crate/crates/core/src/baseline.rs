//! Reference forecasters: persistence and a spatially invariant IDE fitted per
//! window by exact Kalman-filter maximum likelihood.

use nalgebra::{Cholesky, DMatrix, DVector};
use rayon::prelude::*;

use crate::enkf::Observations;
use crate::error::{Error, Result};
use crate::grid::{Field, GridSpec};
use crate::kernel::{transition_matrix, ThetaFields};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Persistence: tomorrow looks like today.
pub fn persistence_forecast(prediction: &Field) -> Field {
    prediction.clone()
}

#[derive(Debug, Clone, PartialEq)]
pub struct KalmanState {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    pub t: usize,
}

#[derive(Debug, Clone)]
pub struct KalmanRun {
    /// Filtered state after each observation time.
    pub filtered: Vec<KalmanState>,
    /// Innovation vector and its covariance at each time.
    pub innovations: Vec<(DVector<f64>, DMatrix<f64>)>,
    pub loglik: f64,
}

fn symmetrize(p: &mut DMatrix<f64>) {
    let n = p.nrows();
    for i in 0..n {
        for j in 0..i {
            let v = 0.5 * (p[(i, j)] + p[(j, i)]);
            p[(i, j)] = v;
            p[(j, i)] = v;
        }
    }
}

/// Log-density of `N(0, S)` at `v`, with the factor of `S`.
pub fn innovation_logpdf(v: &DVector<f64>, s: &DMatrix<f64>) -> Result<f64> {
    let chol = Cholesky::new(s.clone()).ok_or(Error::SingularInnovationCov)?;
    let logdet = 2.0 * chol.l_dirty().diagonal().iter().map(|x| x.ln()).sum::<f64>();
    let quad = v.dot(&chol.solve(v));
    Ok(-0.5 * (v.len() as f64 * LN_2PI + logdet + quad))
}

/// Exact filter for `Y_{t+1} = K Y_t + η`, `η ~ N(0, Q)`, starting from the prior
/// `(m0, p0)` at the first observation time. Observation times must be consecutive.
pub fn kalman_filter(
    m0: &DVector<f64>,
    p0: &DMatrix<f64>,
    k: &DMatrix<f64>,
    q: &DMatrix<f64>,
    observations: &[Observations],
) -> Result<KalmanRun> {
    let n = m0.len();
    if p0.shape() != (n, n) || k.shape() != (n, n) || q.shape() != (n, n) {
        return Err(Error::DimensionMismatch("Kalman filter matrices".into()));
    }
    let mut m = m0.clone();
    let mut p = p0.clone();
    let mut run = KalmanRun { filtered: Vec::new(), innovations: Vec::new(), loglik: 0.0 };
    for (step, obs) in observations.iter().enumerate() {
        if step > 0 {
            m = k * &m;
            p = k * &p * k.transpose() + q;
            symmetrize(&mut p);
        }
        if obs.pixels.iter().any(|&i| i >= n) {
            return Err(Error::DimensionMismatch("observation pixel outside the state".into()));
        }
        let mo = obs.len();
        let v = DVector::from_fn(mo, |i, _| obs.values[i] - m[obs.pixels[i]]);
        let pht = DMatrix::from_fn(n, mo, |i, j| p[(i, obs.pixels[j])]);
        let mut s = DMatrix::from_fn(mo, mo, |i, j| pht[(obs.pixels[i], j)]);
        for i in 0..mo {
            s[(i, i)] += obs.sigma2_eps;
        }
        if mo > 0 {
            run.loglik += innovation_logpdf(&v, &s)?;
            let chol = Cholesky::new(s.clone()).ok_or(Error::SingularInnovationCov)?;
            let gain = chol.solve(&pht.transpose()).transpose();
            m += &gain * &v;
            p -= &gain * pht.transpose();
            symmetrize(&mut p);
        }
        run.innovations.push((v, s));
        run.filtered.push(KalmanState { mean: m.clone(), cov: p.clone(), t: obs.t });
    }
    Ok(run)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VanillaIdeParams {
    pub d: f64,
    pub v1: f64,
    pub v2: f64,
    pub sigma2_v: f64,
}

impl VanillaIdeParams {
    pub fn new(d: f64, v1: f64, v2: f64, sigma2_v: f64) -> Result<Self> {
        if !(d > 0.0 && sigma2_v > 0.0 && v1.is_finite() && v2.is_finite() && d.is_finite() && sigma2_v.is_finite()) {
            return Err(Error::InvalidArgument(format!("vanilla IDE parameters out of domain: {d}, {sigma2_v}")));
        }
        Ok(Self { d, v1, v2, sigma2_v })
    }

    pub fn transition(&self, grid: GridSpec) -> Result<DMatrix<f64>> {
        let th = ThetaFields::constant(grid, self.d, self.v1, self.v2)?;
        Ok(transition_matrix(&th, grid)?.matrix().clone())
    }
}

/// Result of a window fit, with the filtered state at the window's last time.
#[derive(Debug, Clone)]
pub struct VanillaFit {
    pub params: VanillaIdeParams,
    pub loglik: f64,
    pub state: KalmanState,
    /// Objective value at each multi-start initial point.
    pub start_logliks: Vec<f64>,
}

// Search box, in the optimizer's coordinates (ln d, v1, v2, ln σ²_v). The lower end
// of d depends on the grid, see `ln_d_min`.
const LN_D_MAX: f64 = -2.3;
const LN_S2: (f64, f64) = (-13.8, 1.0);
const V_MAX_CELLS: f64 = 4.0;
const NM_EVALS: usize = 200;
const NM_RESTARTS: usize = 4;

fn decode(x: &[f64]) -> VanillaIdeParams {
    VanillaIdeParams { d: x[0].exp(), v1: x[1], v2: x[2], sigma2_v: x[3].exp() }
}

/// Narrowest kernel searched: standard deviation of half a cell, below which the lattice
/// sum aliases and the likelihood surface in `v` turns jagged.
fn ln_d_min(grid: GridSpec) -> f64 {
    (grid.cell_area() / 8.0).ln()
}

fn in_box(x: &[f64], vmax: f64, ln_d_min: f64) -> bool {
    (ln_d_min..=LN_D_MAX).contains(&x[0])
        && x[1].abs() <= vmax
        && x[2].abs() <= vmax
        && (LN_S2.0..=LN_S2.1).contains(&x[3])
}

/// Innovations log-likelihood of the window under `params`, with the prior `N(0, I)` at the
/// window's first time.
pub fn window_loglik(params: &VanillaIdeParams, grid: GridSpec, observations: &[Observations]) -> Result<KalmanRun> {
    let n2 = grid.len();
    let k = params.transition(grid)?;
    let q = DMatrix::identity(n2, n2) * params.sigma2_v;
    kalman_filter(&DVector::zeros(n2), &DMatrix::identity(n2, n2), &k, &q, observations)
}

/// The window log-likelihood of [`window_loglik`] for exactly three times, computed
/// without forming full covariance matrices. The prior `N(0, I)` makes the first
/// posterior covariance diagonal, so only products with observed rows of `K` are needed.
pub fn window_loglik_fast(params: &VanillaIdeParams, grid: GridSpec, observations: &[Observations]) -> Result<f64> {
    let [o1, o2, o3] = observations else {
        return Err(Error::InsufficientFrames { needed: 3, got: observations.len() });
    };
    let n = grid.len();
    let k = params.transition(grid)?;
    let q = params.sigma2_v;
    // time 1: prior N(0, I)
    let mut m1 = DVector::zeros(n);
    let mut dvar = DVector::from_element(n, 1.0);
    let mut ll = 0.0;
    if !o1.is_empty() {
        let v = DVector::from_column_slice(&o1.values);
        let s = DMatrix::identity(o1.len(), o1.len()) * (1.0 + o1.sigma2_eps);
        ll += innovation_logpdf(&v, &s)?;
        for (&p, &z) in o1.pixels.iter().zip(&o1.values) {
            m1[p] = z / (1.0 + o1.sigma2_eps);
            dvar[p] = o1.sigma2_eps / (1.0 + o1.sigma2_eps);
        }
    }
    let sqrt_d = dvar.map(f64::sqrt);
    // time 2
    let rows = |o: &Observations| DMatrix::from_fn(o.len(), n, |i, j| k[(o.pixels[i], j)]);
    let k2 = rows(o2);
    let kd = DMatrix::from_fn(n, n, |i, j| k[(i, j)] * sqrt_d[j]);
    let k2d = DMatrix::from_fn(o2.len(), n, |i, j| k2[(i, j)] * sqrt_d[j]);
    // U = P2⁻ H2ᵀ = K D K2ᵀ + q H2ᵀ
    let mut u = &kd * k2d.transpose();
    for (c, &p) in o2.pixels.iter().enumerate() {
        u[(p, c)] += q;
    }
    let mut m2 = &k * &m1;
    let s2_chol = if o2.is_empty() {
        None
    } else {
        let mut s2 = DMatrix::from_fn(o2.len(), o2.len(), |i, j| u[(o2.pixels[i], j)]);
        for i in 0..o2.len() {
            s2[(i, i)] += o2.sigma2_eps;
        }
        let v2 = DVector::from_fn(o2.len(), |i, _| o2.values[i] - m2[o2.pixels[i]]);
        ll += innovation_logpdf(&v2, &s2)?;
        let chol = Cholesky::new(s2).ok_or(Error::SingularInnovationCov)?;
        m2 += &u * chol.solve(&v2);
        Some(chol)
    };
    // time 3
    if !o3.is_empty() {
        let k3 = rows(o3);
        let c = &k3 * &kd;
        let mut s3 = &c * c.transpose() + (&k3 * k3.transpose()) * q;
        if let Some(chol) = &s2_chol {
            let k3u = &k3 * &u;
            s3 -= &k3u * chol.solve(&k3u.transpose());
        }
        for i in 0..o3.len() {
            s3[(i, i)] += q + o3.sigma2_eps;
        }
        let pred = &k3 * &m2;
        let v3 = DVector::from_fn(o3.len(), |i, _| o3.values[i] - pred[i]);
        ll += innovation_logpdf(&v3, &s3)?;
    }
    Ok(ll)
}

/// Minimizes `f` from `x0` with a Nelder–Mead simplex whose initial edges are `steps`.
/// Returns the best point and value.
pub fn nelder_mead(f: &dyn Fn(&[f64]) -> f64, x0: &[f64], steps: &[f64], max_evals: usize, ftol: f64) -> (Vec<f64>, f64) {
    let n = x0.len();
    let mut simplex: Vec<(Vec<f64>, f64)> = Vec::with_capacity(n + 1);
    simplex.push((x0.to_vec(), f(x0)));
    for i in 0..n {
        let mut x = x0.to_vec();
        x[i] += steps[i];
        let fx = f(&x);
        simplex.push((x, fx));
    }
    let mut evals = n + 1;
    let at = |c: &[f64], w: &[f64], t: f64| -> Vec<f64> { c.iter().zip(w).map(|(a, b)| a + t * (b - a)).collect() };
    while evals < max_evals {
        simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
        let (best, worst) = (simplex[0].1, simplex[n].1);
        if (worst - best).abs() <= ftol * (best.abs() + worst.abs() + 1e-12) {
            break;
        }
        let centroid: Vec<f64> =
            (0..n).map(|j| simplex[..n].iter().map(|(x, _)| x[j]).sum::<f64>() / n as f64).collect();
        let xr = at(&centroid, &simplex[n].0, -1.0);
        let fr = f(&xr);
        evals += 1;
        if fr < simplex[0].1 {
            let xe = at(&centroid, &simplex[n].0, -2.0);
            let fe = f(&xe);
            evals += 1;
            simplex[n] = if fe < fr { (xe, fe) } else { (xr, fr) };
        } else if fr < simplex[n - 1].1 {
            simplex[n] = (xr, fr);
        } else {
            let (xc, fc) = if fr < simplex[n].1 {
                let xc = at(&centroid, &xr, 0.5);
                let fc = f(&xc);
                (xc, fc)
            } else {
                let xc = at(&centroid, &simplex[n].0, 0.5);
                let fc = f(&xc);
                (xc, fc)
            };
            evals += 1;
            if fc < fr.min(simplex[n].1) {
                simplex[n] = (xc, fc);
            } else {
                let x0 = simplex[0].0.clone();
                for s in simplex.iter_mut().skip(1) {
                    s.0 = at(&x0, &s.0, 0.5);
                    s.1 = f(&s.0);
                }
                evals += n;
            }
        }
    }
    simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
    simplex.swap_remove(0)
}

/// Innovations maximum likelihood of `(d, v1, v2, σ²_v)` over a three-time window.
pub fn fit_window_ide(grid: GridSpec, observations: &[Observations]) -> Result<VanillaFit> {
    if observations.len() != 3 {
        return Err(Error::InsufficientFrames { needed: 3, got: observations.len() });
    }
    let w = grid.cell_width();
    let vmax = V_MAX_CELLS * w;
    let ld_min = ln_d_min(grid);
    let objective = |x: &[f64]| -> f64 {
        if !in_box(x, vmax, ld_min) {
            return f64::INFINITY;
        }
        match window_loglik_fast(&decode(x), grid, observations) {
            Ok(ll) if ll.is_finite() => -ll,
            _ => f64::INFINITY,
        }
    };
    let starts: [[f64; 4]; 4] = [
        [(0.25 * w * w).ln(), 0.0, 0.0, (0.1f64).ln()],
        [(2.0 * w * w).ln(), 0.0, 0.0, (0.1f64).ln()],
        [(0.5 * w * w).ln(), w, w, (0.1f64).ln()],
        [(0.5 * w * w).ln(), -w, -w, (0.1f64).ln()],
    ];
    let steps = [1.0, 0.5 * w, 0.5 * w, 1.0];
    let runs: Vec<(Vec<f64>, f64, f64)> = starts
        .par_iter()
        .map(|x0| {
            let f0 = objective(x0);
            let (mut x, mut fx) = nelder_mead(&objective, x0, &steps, NM_EVALS, 1e-7);
            // restart from the converged point until a restart stops helping
            for _ in 0..NM_RESTARTS {
                let (x2, f2) = nelder_mead(&objective, &x, &steps, NM_EVALS, 1e-7);
                let gained = fx - f2;
                if f2 < fx {
                    (x, fx) = (x2, f2);
                }
                if gained < 1e-6 * fx.abs() {
                    break;
                }
            }
            (x, fx, f0)
        })
        .collect();
    let start_logliks = runs.iter().map(|r| -r.2).collect();
    let best = runs
        .iter()
        .filter(|r| r.1.is_finite())
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .ok_or(Error::OptimizerFailure)?;
    let params = decode(&best.0);
    let run = window_loglik(&params, grid, observations)?;
    let state = run.filtered.last().cloned().ok_or(Error::OptimizerFailure)?;
    Ok(VanillaFit { params, loglik: run.loglik, state, start_logliks })
}

/// One-step forecast from a filtered state: mean `K m`, variance `diag(K P Kᵀ) + σ²_v`.
pub fn vanilla_ide_forecast(params: &VanillaIdeParams, grid: GridSpec, state: &KalmanState) -> Result<(Field, Field)> {
    let k = params.transition(grid)?;
    let mean = &k * &state.mean;
    let kp = &k * &state.cov;
    let var: Vec<f64> = (0..grid.len()).map(|i| kp.row(i).dot(&k.row(i)) + params.sigma2_v).collect();
    Ok((Field::new(grid, mean.as_slice().to_vec())?, Field::new(grid, var)?))
}

/// Every pixel of a field as an observation.
pub fn full_observations(t: usize, field: &Field, sigma2_eps: f64) -> Result<Observations> {
    Observations::new(t, (0..field.grid().len()).collect(), field.values().to_vec(), sigma2_eps, field.grid())
}
