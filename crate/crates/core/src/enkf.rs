//! Stochastic ensemble Kalman filter on the augmented window state.
//!
//! Each member is a [`FrameWindow`]. Prediction pushes a new newest frame
//! `K(window) Y_t + η` and drops the oldest; the update only touches the newest
//! frame, so older frames stay exact copies of earlier newest frames.

use nalgebra::{Cholesky, DMatrix};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::cnn::cnn_forward;
use crate::error::{Error, Result};
use crate::grid::{Field, FrameWindow, GridSpec};
use crate::kernel::{theta_fields, DynamicsWeights, TransitionMatrix};
use crate::likelihood::{IdeModel, NoiseCovariance};

/// Number of 30° direction bins.
pub const DIRECTION_BINS: usize = 12;

#[derive(Debug, Clone, PartialEq)]
pub struct Observations {
    pub t: usize,
    pub pixels: Vec<usize>,
    pub values: Vec<f64>,
    pub sigma2_eps: f64,
}

impl Observations {
    pub fn new(t: usize, pixels: Vec<usize>, values: Vec<f64>, sigma2_eps: f64, grid: GridSpec) -> Result<Self> {
        if pixels.len() != values.len() {
            return Err(Error::DimensionMismatch(format!("{} pixels but {} values", pixels.len(), values.len())));
        }
        if !(sigma2_eps > 0.0) {
            return Err(Error::InvalidArgument(format!("measurement variance must be positive, got {sigma2_eps}")));
        }
        let mut seen = vec![false; grid.len()];
        for &p in &pixels {
            if p >= grid.len() || std::mem::replace(&mut seen[p], true) {
                return Err(Error::InvalidArgument(format!("observation pixel {p} is out of range or repeated")));
            }
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("non-finite observation".into()));
        }
        Ok(Self { t, pixels, values, sigma2_eps })
    }

    pub fn empty(t: usize, sigma2_eps: f64) -> Self {
        Self { t, pixels: Vec::new(), values: Vec::new(), sigma2_eps }
    }

    pub fn len(&self) -> usize {
        self.pixels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Ensemble {
    pub members: Vec<FrameWindow>,
    pub t: usize,
    pub seed: u64,
}

impl Ensemble {
    pub fn new(members: Vec<FrameWindow>, t: usize, seed: u64) -> Result<Self> {
        if members.len() < 2 {
            return Err(Error::InvalidArgument(format!("ensemble needs at least 2 members, got {}", members.len())));
        }
        let (g, tau) = (members[0].grid(), members[0].tau());
        if members.iter().any(|m| m.grid() != g || m.tau() != tau) {
            return Err(Error::ShapeMismatch("ensemble members differ in grid or window length".into()));
        }
        Ok(Self { members, t, seed })
    }

    pub fn size(&self) -> usize {
        self.members.len()
    }

    pub fn grid(&self) -> GridSpec {
        self.members[0].grid()
    }

    pub fn tau(&self) -> usize {
        self.members[0].tau()
    }

    /// Value of every member's newest frame at one pixel.
    pub fn pixel_values(&self, pixel: usize) -> Vec<f64> {
        self.members.iter().map(|m| m.newest().values()[pixel]).collect()
    }

    pub fn mean(&self) -> Field {
        let n = self.size() as f64;
        let mut acc = vec![0.0; self.grid().len()];
        for m in &self.members {
            acc.iter_mut().zip(m.newest().values()).for_each(|(a, v)| *a += v);
        }
        Field::new(self.grid(), acc.into_iter().map(|v| v / n).collect()).expect("finite ensemble")
    }

    /// Per-pixel sample standard deviation (divisor `N − 1`) of the newest frames.
    pub fn sd(&self) -> Field {
        let mean = self.mean();
        let mut acc = vec![0.0; self.grid().len()];
        for m in &self.members {
            acc.iter_mut().zip(m.newest().values()).zip(mean.values()).for_each(|((a, v), mu)| *a += (v - mu).powi(2));
        }
        let d = (self.size() - 1) as f64;
        Field::new(self.grid(), acc.into_iter().map(|v| (v / d).sqrt()).collect()).expect("finite ensemble")
    }
}

/// Anything that maps a window to a transition matrix.
pub trait Dynamics: Sync {
    fn transition(&self, window: &FrameWindow) -> Result<TransitionMatrix>;
}

impl Dynamics for IdeModel {
    fn transition(&self, window: &FrameWindow) -> Result<TransitionMatrix> {
        IdeModel::transition(self, window)
    }
}

/// A state-independent transition.
#[derive(Debug, Clone)]
pub struct FixedDynamics(pub TransitionMatrix);

impl Dynamics for FixedDynamics {
    fn transition(&self, _window: &FrameWindow) -> Result<TransitionMatrix> {
        Ok(self.0.clone())
    }
}

#[derive(Debug, Clone, Copy)]
enum Purpose {
    Init = 1,
    Forcing = 2,
    ObsPerturbation = 3,
}

/// Independent stream per (run seed, time, member, purpose).
fn member_rng(seed: u64, t: usize, member: usize, purpose: Purpose) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((t as u64) << 32) ^ ((member as u64) << 2) ^ purpose as u64);
    rng
}

/// Members are the last `tau` frames plus independent draws of `jitter · η`.
pub fn init_ensemble(
    frames: &[Field],
    tau: usize,
    size: usize,
    jitter: f64,
    noise: &NoiseCovariance,
    t: usize,
    seed: u64,
) -> Result<Ensemble> {
    if frames.len() < tau || tau < 2 {
        return Err(Error::InsufficientFrames { needed: tau.max(2), got: frames.len() });
    }
    let base = &frames[frames.len() - tau..];
    let members: Result<Vec<FrameWindow>> = (0..size)
        .map(|j| {
            let mut rng = member_rng(seed, t, j, Purpose::Init);
            let fs: Result<Vec<Field>> = base
                .iter()
                .map(|f| {
                    if jitter == 0.0 {
                        return Ok(f.clone());
                    }
                    let eta = noise.sample(&mut rng);
                    Field::new(f.grid(), f.values().iter().zip(&eta).map(|(v, e)| v + jitter * e).collect())
                })
                .collect();
            FrameWindow::new(fs?)
        })
        .collect();
    Ensemble::new(members?, t, seed)
}

/// Advance every member one step; `noise = None` switches the forcing off.
pub fn enkf_predict(ens: &Ensemble, dynamics: &dyn Dynamics, noise: Option<&NoiseCovariance>) -> Result<Ensemble> {
    let t_next = ens.t + 1;
    let members: Vec<Result<FrameWindow>> = ens
        .members
        .par_iter()
        .enumerate()
        .map(|(j, m)| {
            let k = dynamics.transition(m)?;
            let mut next = k.apply(m.newest().values());
            if let Some(cov) = noise {
                let eta = cov.sample(&mut member_rng(ens.seed, t_next, j, Purpose::Forcing));
                next.iter_mut().zip(&eta).for_each(|(v, e)| *v += e);
            }
            m.shifted(Field::new(m.grid(), next)?)
        })
        .collect();
    Ensemble::new(members.into_iter().collect::<Result<_>>()?, t_next, ens.seed)
}

/// Gaspari–Cohn fifth-order compactly supported correlation with half-width `c`.
pub fn gaspari_cohn(d: f64, c: f64) -> f64 {
    let z = d / c;
    if z <= 1.0 {
        (((-0.25 * z + 0.5) * z + 0.625) * z - 5.0 / 3.0) * z * z + 1.0
    } else if z < 2.0 {
        ((((z / 12.0 - 0.5) * z + 0.625) * z + 5.0 / 3.0) * z - 5.0) * z + 4.0 - 2.0 / (3.0 * z)
    } else {
        0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TaperSpec {
    pub c: f64,
}

impl TaperSpec {
    pub const DEFAULT_C: f64 = 0.15;

    pub fn new(c: f64) -> Result<Self> {
        if !(c > 0.0 && c.is_finite()) {
            return Err(Error::InvalidArgument(format!("taper half-length must be positive, got {c}")));
        }
        Ok(Self { c })
    }

    pub fn support(&self) -> f64 {
        2.0 * self.c
    }
}

/// Kalman gain `P Hᵀ S⁻¹` of an ensemble, with `S = H P Hᵀ + σ²_ε I` and both
/// covariance products optionally tapered.
pub fn ensemble_gain(ens: &Ensemble, pixels: &[usize], sigma2_eps: f64, taper: Option<TaperSpec>) -> Result<DMatrix<f64>> {
    let (a, _) = anomalies(ens);
    let (ph, s) = gain_terms(ens.grid(), &a, pixels, sigma2_eps, taper);
    let chol = Cholesky::new(s).ok_or(Error::SingularInnovationCov)?;
    Ok(chol.solve(&ph.transpose()).transpose())
}

/// Scaled anomalies `(X − x̄)/√(N−1)` of the newest frames (pixels × members) and the mean.
fn anomalies(ens: &Ensemble) -> (DMatrix<f64>, Vec<f64>) {
    let n2 = ens.grid().len();
    let nm = ens.size();
    let mean = ens.mean().into_values();
    let scale = 1.0 / ((nm - 1) as f64).sqrt();
    let mut a = DMatrix::zeros(n2, nm);
    for (j, m) in ens.members.iter().enumerate() {
        for (i, v) in m.newest().values().iter().enumerate() {
            a[(i, j)] = (v - mean[i]) * scale;
        }
    }
    (a, mean)
}

fn gain_terms(
    grid: GridSpec,
    a: &DMatrix<f64>,
    pixels: &[usize],
    sigma2_eps: f64,
    taper: Option<TaperSpec>,
) -> (DMatrix<f64>, DMatrix<f64>) {
    let m = pixels.len();
    let ha = DMatrix::from_fn(m, a.ncols(), |i, j| a[(pixels[i], j)]);
    let mut ph = a * ha.transpose();
    let mut s = &ha * ha.transpose();
    if let Some(tp) = taper {
        for j in 0..m {
            for i in 0..ph.nrows() {
                ph[(i, j)] *= gaspari_cohn(grid.distance(i, pixels[j]), tp.c);
            }
            for i in 0..m {
                s[(i, j)] *= gaspari_cohn(grid.distance(pixels[i], pixels[j]), tp.c);
            }
        }
    }
    for i in 0..m {
        s[(i, i)] += sigma2_eps;
    }
    (ph, s)
}

/// Perturbed-observation update of the newest frame of every member.
pub fn enkf_update(ens: &Ensemble, obs: &Observations, taper: Option<TaperSpec>) -> Result<Ensemble> {
    if obs.is_empty() {
        return Ok(ens.clone());
    }
    let grid = ens.grid();
    if obs.pixels.iter().any(|&p| p >= grid.len()) {
        return Err(Error::InvalidArgument("observation pixel outside the grid".into()));
    }
    let (a, _) = anomalies(ens);
    let (ph, s) = gain_terms(grid, &a, &obs.pixels, obs.sigma2_eps, taper);
    let chol = Cholesky::new(s).ok_or(Error::SingularInnovationCov)?;
    let sd = obs.sigma2_eps.sqrt();
    let m = obs.len();
    let mut innov = DMatrix::zeros(m, ens.size());
    for (j, member) in ens.members.iter().enumerate() {
        let mut rng = member_rng(ens.seed, obs.t, j, Purpose::ObsPerturbation);
        let y = member.newest().values();
        for (i, (&p, &z)) in obs.pixels.iter().zip(&obs.values).enumerate() {
            let eps: f64 = StandardNormal.sample(&mut rng);
            innov[(i, j)] = z + sd * eps - y[p];
        }
    }
    let incr = ph * chol.solve(&innov);
    let members: Result<Vec<FrameWindow>> = ens
        .members
        .iter()
        .enumerate()
        .map(|(j, member)| {
            let mut w = member.clone();
            let updated: Vec<f64> = member.newest().values().iter().enumerate().map(|(i, v)| v + incr[(i, j)]).collect();
            *w.newest_mut() = Field::new(grid, updated)?;
            Ok(w)
        })
        .collect();
    Ensemble::new(members?, ens.t, ens.seed)
}

/// `h` prediction steps without updates; element `k` is the ensemble at `t + k + 1`.
pub fn forecast(ens: &Ensemble, dynamics: &dyn Dynamics, noise: Option<&NoiseCovariance>, h: usize) -> Result<Vec<Ensemble>> {
    if h == 0 {
        return Err(Error::InvalidArgument("forecast horizon must be at least 1".into()));
    }
    let mut out: Vec<Ensemble> = Vec::with_capacity(h);
    for _ in 0..h {
        let next = enkf_predict(out.last().unwrap_or(ens), dynamics, noise)?;
        out.push(next);
    }
    Ok(out)
}

/// Ensemble statistics of the dynamics the network reads off each member.
#[derive(Debug, Clone, PartialEq)]
pub struct DynamicsSummary {
    pub t: usize,
    pub forecast: bool,
    pub coef_mean: DynamicsWeights,
    pub coef_var: DynamicsWeights,
    /// Per-pixel member means of `θ1`, `θ2`, `θ3`.
    pub theta_mean: [Vec<f64>; 3],
    pub theta_var: [Vec<f64>; 3],
    /// Per-pixel member counts of the flow direction `atan2(θ3, θ2)` in 30° bins from 0°.
    pub direction_hist: Vec<[u32; DIRECTION_BINS]>,
}

/// Index of the 30° bin holding the direction of `(dx, dy)`, angles measured from +x towards +y.
pub fn direction_bin(dx: f64, dy: f64) -> usize {
    let mut deg = dy.atan2(dx).to_degrees();
    if deg < 0.0 {
        deg += 360.0;
    }
    ((deg / 30.0).floor() as usize).min(DIRECTION_BINS - 1)
}

/// Adds one member's per-pixel flow directions to the histogram.
pub fn count_directions(hist: &mut [[u32; DIRECTION_BINS]], theta2: &[f64], theta3: &[f64]) {
    for ((h, &dx), &dy) in hist.iter_mut().zip(theta2).zip(theta3) {
        h[direction_bin(dx, dy)] += 1;
    }
}

fn mean_var(rows: &[Vec<f64>]) -> (Vec<f64>, Vec<f64>) {
    // shifted by the first row so identical rows give exactly zero variance
    let n = rows.len() as f64;
    let r0 = &rows[0];
    let mut mean = Vec::with_capacity(r0.len());
    let mut var = Vec::with_capacity(r0.len());
    for i in 0..r0.len() {
        let dm = rows.iter().map(|r| r[i] - r0[i]).sum::<f64>() / n;
        let ss = rows.iter().map(|r| (r[i] - r0[i] - dm).powi(2)).sum::<f64>();
        mean.push(r0[i] + dm);
        var.push(ss / (n - 1.0).max(1.0));
    }
    (mean, var)
}

pub fn dynamics_summary(ens: &Ensemble, model: &IdeModel, forecast: bool) -> Result<DynamicsSummary> {
    let per_member: Vec<Result<(DynamicsWeights, [Vec<f64>; 3])>> = ens
        .members
        .par_iter()
        .map(|m| {
            let (w, _) = cnn_forward(m, &model.params)?;
            let th = theta_fields(&model.basis, &w, model.theta_min)?;
            Ok((w, [th.theta1, th.theta2, th.theta3]))
        })
        .collect();
    let per_member: Vec<(DynamicsWeights, [Vec<f64>; 3])> = per_member.into_iter().collect::<Result<_>>()?;
    let coef = |c: usize| -> (Vec<f64>, Vec<f64>) {
        let rows: Vec<Vec<f64>> = per_member.iter().map(|(w, _)| w.get(c).to_vec()).collect();
        mean_var(&rows)
    };
    let ((m1, v1), (m2, v2), (m3, v3)) = (coef(0), coef(1), coef(2));
    let th = |c: usize| -> (Vec<f64>, Vec<f64>) {
        let rows: Vec<Vec<f64>> = per_member.iter().map(|(_, t)| t[c].clone()).collect();
        mean_var(&rows)
    };
    let ((tm1, tv1), (tm2, tv2), (tm3, tv3)) = (th(0), th(1), th(2));
    let n2 = ens.grid().len();
    let mut hist = vec![[0u32; DIRECTION_BINS]; n2];
    for (_, t) in &per_member {
        count_directions(&mut hist, &t[1], &t[2]);
    }
    Ok(DynamicsSummary {
        t: ens.t,
        forecast,
        coef_mean: DynamicsWeights { w1: m1, w2: m2, w3: m3 },
        coef_var: DynamicsWeights { w1: v1, w2: v2, w3: v3 },
        theta_mean: [tm1, tm2, tm3],
        theta_var: [tv1, tv2, tv3],
        direction_hist: hist,
    })
}

/// One assimilation cycle's products.
#[derive(Debug, Clone)]
pub struct FilterStep {
    pub t: usize,
    /// Ensemble after assimilating the observations at `t`.
    pub filtered: Ensemble,
    /// One-step forecast ensemble for `t + 1` issued from `filtered`.
    pub forecast: Ensemble,
}

/// Alternate updates and predictions over `observations`, which must be consecutive in
/// time starting at `initial.t`. `initial` is the prior ensemble for the first time step.
pub fn run_filter(
    initial: &Ensemble,
    observations: &[Observations],
    dynamics: &dyn Dynamics,
    noise: Option<&NoiseCovariance>,
    taper: Option<TaperSpec>,
) -> Result<Vec<FilterStep>> {
    let mut prior = initial.clone();
    let mut out = Vec::with_capacity(observations.len());
    for obs in observations {
        if obs.t != prior.t {
            return Err(Error::InvalidArgument(format!("observation time {} but ensemble is at {}", obs.t, prior.t)));
        }
        let filtered = enkf_update(&prior, obs, taper)?;
        let fc = enkf_predict(&filtered, dynamics, noise)?;
        out.push(FilterStep { t: obs.t, filtered, forecast: fc.clone() });
        prior = fc;
    }
    Ok(out)
}
