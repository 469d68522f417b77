//! Gaussian transition likelihood, minibatch gradients, CNN training and the
//! Matérn-3/2 residual fit.

use std::time::Instant;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::cnn::{adam_step, cnn_backward, cnn_forward, AdamConfig, AdamState, CnnParams, FeatureStack, Gradients};
use crate::error::{Error, Result};
use crate::grid::{Field, FrameWindow, GridSpec};
use crate::kernel::{
    theta_fields, theta_fields_vjp, transition_matrix, transition_vjp, DynamicsWeights, RbfBasis, ThetaFields,
    TransitionMatrix, THETA_MIN,
};

/// Relative diagonal jitter added to every Matérn covariance matrix.
pub const NUGGET_REL: f64 = 1e-8;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

pub fn matern32(d: f64, sigma2: f64, rho: f64) -> Result<f64> {
    if !(d >= 0.0) || !(sigma2 > 0.0 && sigma2.is_finite()) || !(rho > 0.0 && rho.is_finite()) {
        return Err(Error::InvalidArgument(format!("matern32 domain: d={d}, sigma2={sigma2}, rho={rho}")));
    }
    if d.is_infinite() {
        return Ok(0.0);
    }
    let a = 3f64.sqrt() * d / rho;
    Ok(sigma2 * (1.0 + a) * (-a).exp())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseParams {
    pub sigma2: f64,
    pub rho: f64,
}

impl NoiseParams {
    pub fn new(sigma2: f64, rho: f64) -> Result<Self> {
        if !(sigma2 > 0.0 && sigma2.is_finite() && rho > 0.0 && rho.is_finite()) {
            return Err(Error::InvalidArgument(format!("noise parameters must be positive, got ({sigma2}, {rho})")));
        }
        Ok(Self { sigma2, rho })
    }
}

/// `Σ` with its factorization, either `σ² I` or a dense Matérn matrix.
#[derive(Debug, Clone)]
pub enum NoiseCovariance {
    Isotropic { dim: usize, sigma2: f64 },
    Dense { chol: Cholesky<f64, Dyn>, logdet: f64 },
}

impl NoiseCovariance {
    pub fn isotropic(dim: usize, sigma2: f64) -> Result<Self> {
        if !(sigma2 > 0.0 && sigma2.is_finite()) {
            return Err(Error::InvalidArgument(format!("variance must be positive, got {sigma2}")));
        }
        Ok(NoiseCovariance::Isotropic { dim, sigma2 })
    }

    pub fn from_matrix(m: DMatrix<f64>) -> Result<Self> {
        let chol = Cholesky::new(m).ok_or_else(|| Error::CholeskyFailure("covariance is not positive definite".into()))?;
        let logdet = 2.0 * chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>();
        Ok(NoiseCovariance::Dense { chol, logdet })
    }

    pub fn dim(&self) -> usize {
        match self {
            NoiseCovariance::Isotropic { dim, .. } => *dim,
            NoiseCovariance::Dense { chol, .. } => chol.l_dirty().nrows(),
        }
    }

    pub fn logdet(&self) -> f64 {
        match self {
            NoiseCovariance::Isotropic { dim, sigma2 } => *dim as f64 * sigma2.ln(),
            NoiseCovariance::Dense { logdet, .. } => *logdet,
        }
    }

    /// `Σ⁻¹ e`.
    pub fn solve(&self, e: &[f64]) -> Vec<f64> {
        match self {
            NoiseCovariance::Isotropic { sigma2, .. } => e.iter().map(|v| v / sigma2).collect(),
            NoiseCovariance::Dense { chol, .. } => chol.solve(&DVector::from_column_slice(e)).as_slice().to_vec(),
        }
    }

    /// Log-density of a zero-mean Gaussian at `e`, and `Σ⁻¹ e`.
    pub fn log_density(&self, e: &[f64]) -> (f64, Vec<f64>) {
        let s = self.solve(e);
        let quad: f64 = e.iter().zip(&s).map(|(a, b)| a * b).sum();
        (-0.5 * (e.len() as f64 * LN_2PI + self.logdet() + quad), s)
    }

    /// One draw from `N(0, Σ)`.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let z: Vec<f64> = (0..self.dim()).map(|_| rng.sample(StandardNormal)).collect();
        match self {
            NoiseCovariance::Isotropic { sigma2, .. } => z.iter().map(|v| v * sigma2.sqrt()).collect(),
            NoiseCovariance::Dense { chol, .. } => (chol.l_dirty().lower_triangle() * DVector::from_vec(z)).as_slice().to_vec(),
        }
    }
}

/// The dense Matérn-3/2 matrix over the grid's cell centres, nugget included.
pub fn matern_matrix(grid: GridSpec, params: NoiseParams) -> DMatrix<f64> {
    let centers = grid.centers();
    let n2 = centers.len();
    let s3 = 3f64.sqrt() / params.rho;
    let mut m = DMatrix::zeros(n2, n2);
    for i in 0..n2 {
        for j in 0..=i {
            let (dx, dy) = (centers[i].0 - centers[j].0, centers[i].1 - centers[j].1);
            let a = s3 * (dx * dx + dy * dy).sqrt();
            let v = params.sigma2 * (1.0 + a) * (-a).exp();
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
        m[(i, i)] += NUGGET_REL * params.sigma2;
    }
    m
}

pub fn noise_covariance(grid: GridSpec, params: NoiseParams) -> Result<NoiseCovariance> {
    NoiseCovariance::from_matrix(matern_matrix(grid, params))
}

/// One `(Y_t^(τ), Y_{t+1})` training pair.
#[derive(Debug, Clone, PartialEq)]
pub struct SequencePair {
    pub window: FrameWindow,
    pub target: Field,
    pub zone: usize,
    pub t: usize,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SequenceDataset {
    pub pairs: Vec<SequencePair>,
}

impl SequenceDataset {
    /// Every pair `t ∈ {τ, …, T−1}` of one frame sequence (times are 1-based).
    pub fn from_frames(frames: &[Field], tau: usize, zone: usize) -> Result<Self> {
        let mut ds = Self::default();
        ds.push_frames(frames, tau, zone)?;
        Ok(ds)
    }

    pub fn push_frames(&mut self, frames: &[Field], tau: usize, zone: usize) -> Result<()> {
        if frames.len() <= tau {
            return Err(Error::InsufficientFrames { needed: tau + 1, got: frames.len() });
        }
        for t in tau..frames.len() {
            self.pairs.push(SequencePair {
                window: FrameWindow::new(frames[t - tau..t].to_vec())?,
                target: frames[t].clone(),
                zone,
                t,
            });
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

/// The network together with the basis its outputs are expanded in.
#[derive(Debug, Clone)]
pub struct IdeModel {
    pub params: CnnParams,
    pub basis: RbfBasis,
    pub theta_min: f64,
}

/// Everything one forward evaluation of the model produces.
#[derive(Debug, Clone)]
pub struct ModelPass {
    pub weights: DynamicsWeights,
    pub features: FeatureStack,
    pub theta: ThetaFields,
    pub transition: TransitionMatrix,
}

impl IdeModel {
    pub fn new(params: CnnParams, basis: RbfBasis) -> Result<Self> {
        let arch = params.architecture();
        if arch.r != basis.r() || arch.input_side != basis.grid().n() {
            return Err(Error::ShapeMismatch(format!(
                "network emits {} weights for side {}, basis has {} functions on side {}",
                arch.r,
                arch.input_side,
                basis.r(),
                basis.grid().n()
            )));
        }
        Ok(Self { params, basis, theta_min: THETA_MIN })
    }

    pub fn grid(&self) -> GridSpec {
        self.basis.grid()
    }

    pub fn tau(&self) -> usize {
        self.params.architecture().tau
    }

    pub fn pass(&self, window: &FrameWindow) -> Result<ModelPass> {
        let (weights, features) = cnn_forward(window, &self.params)?;
        let theta = theta_fields(&self.basis, &weights, self.theta_min)?;
        let transition = transition_matrix(&theta, self.grid())?;
        Ok(ModelPass { weights, features, theta, transition })
    }

    pub fn transition(&self, window: &FrameWindow) -> Result<TransitionMatrix> {
        Ok(self.pass(window)?.transition)
    }
}

fn residual(k: &TransitionMatrix, window: &FrameWindow, target: &Field) -> Result<Vec<f64>> {
    if target.grid() != window.grid() {
        return Err(Error::ShapeMismatch("target and window grids differ".into()));
    }
    let pred = k.apply(window.newest().values());
    Ok(target.values().iter().zip(&pred).map(|(a, b)| a - b).collect())
}

/// `log N(target; K(window) Y_t, Σ)`.
pub fn cond_loglik_term(model: &IdeModel, window: &FrameWindow, target: &Field, noise: &NoiseCovariance) -> Result<f64> {
    let k = model.transition(window)?;
    if noise.dim() != target.grid().len() {
        return Err(Error::ShapeMismatch("noise covariance dimension".into()));
    }
    Ok(noise.log_density(&residual(&k, window, target)?).0)
}

/// One pair's log-likelihood and its gradient with respect to every network parameter.
pub fn pair_loglik_grad(model: &IdeModel, pair: &SequencePair, noise: &NoiseCovariance) -> Result<(f64, Gradients)> {
    let pass = model.pass(&pair.window)?;
    let e = residual(&pass.transition, &pair.window, &pair.target)?;
    let (ll, sinv_e) = noise.log_density(&e);
    // ∂ℓ/∂K = Σ⁻¹ e Y_tᵀ
    let (g1, g2, g3) = transition_vjp(&pass.theta, &pass.transition, &sinv_e, pair.window.newest().values());
    let gw = theta_fields_vjp(&model.basis, &pass.weights, &g1, &g2, &g3)?;
    let g = cnn_backward(&model.params, &pass.features, &gw)?;
    Ok((ll, g))
}

fn noise_for(noises: &[NoiseCovariance], zone: usize) -> Result<&NoiseCovariance> {
    match noises.len() {
        1 => Ok(&noises[0]),
        _ => noises
            .get(zone)
            .ok_or_else(|| Error::InvalidArgument(format!("no noise covariance for zone {zone}"))),
    }
}

/// Sum of log-likelihood terms and gradients over `indices`, reduced in index order.
fn summed_grad(model: &IdeModel, dataset: &SequenceDataset, indices: &[usize], noises: &[NoiseCovariance]) -> Result<(f64, Gradients)> {
    let parts: Vec<Result<(f64, Gradients)>> = indices
        .par_iter()
        .map(|&i| {
            let pair = dataset.pairs.get(i).ok_or_else(|| Error::InvalidArgument(format!("pair index {i} out of range")))?;
            pair_loglik_grad(model, pair, noise_for(noises, pair.zone)?)
        })
        .collect();
    let mut total = 0.0;
    let mut grad = Gradients::zeros(model.params.len());
    for p in parts {
        let (ll, g) = p?;
        total += ll;
        grad.add_scaled(&g, 1.0);
    }
    Ok((total, grad))
}

/// Unbiased estimate of the full conditional log-likelihood and its gradient from the
/// pairs in `batch`, scaled by `dataset.len() / batch.len()`.
pub fn minibatch_grad(
    model: &IdeModel,
    dataset: &SequenceDataset,
    batch: &[usize],
    noises: &[NoiseCovariance],
) -> Result<(f64, Gradients)> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let scale = dataset.len() as f64 / batch.len() as f64;
    let (ll, mut g) = summed_grad(model, dataset, batch, noises)?;
    g.scale(scale);
    Ok((scale * ll, g))
}

/// Sum of log-likelihood terms over `indices`, without gradients.
pub fn total_loglik(model: &IdeModel, dataset: &SequenceDataset, indices: &[usize], noises: &[NoiseCovariance]) -> Result<f64> {
    let parts: Vec<Result<f64>> = indices
        .par_iter()
        .map(|&i| {
            let pair = dataset.pairs.get(i).ok_or_else(|| Error::InvalidArgument(format!("pair index {i} out of range")))?;
            cond_loglik_term(model, &pair.window, &pair.target, noise_for(noises, pair.zone)?)
        })
        .collect();
    parts.into_iter().sum()
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingConfig {
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub max_epochs: usize,
    pub valid_fraction: f64,
    /// Relative change of the validation log-likelihood treated as "no change".
    pub tolerance: f64,
    pub seed: u64,
    /// Working noise variance while fitting the network.
    pub sigma2_0: f64,
    /// Optional cap on the total number of optimizer steps.
    pub max_steps: Option<usize>,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            batch_size: 16,
            adam: AdamConfig::default(),
            max_epochs: 50,
            valid_fraction: 0.10,
            tolerance: 1e-3,
            seed: 0,
            sigma2_0: 0.01,
            max_steps: None,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.valid_fraction > 0.0 && self.valid_fraction < 1.0) {
            return Err(Error::InvalidArgument(format!("validation fraction {} not in (0, 1)", self.valid_fraction)));
        }
        if self.batch_size == 0 || self.max_epochs == 0 {
            return Err(Error::InvalidArgument("batch size and epoch count must be positive".into()));
        }
        if !(self.sigma2_0 > 0.0) || !(self.adam.lr > 0.0) || !(self.tolerance >= 0.0) {
            return Err(Error::InvalidArgument("sigma2_0, learning rate and tolerance must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Sum of per-pair log-likelihoods seen during the epoch's updates.
    pub train_loglik: f64,
    pub valid_loglik: f64,
    /// Optimizer steps taken so far.
    pub steps: usize,
    pub wall_seconds: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainingLog {
    pub epochs: Vec<EpochRecord>,
    pub steps: usize,
    pub train_indices: Vec<usize>,
    pub valid_indices: Vec<usize>,
}

impl TrainingLog {
    /// Wall-clock times are left out so equal runs write equal files.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,train_loglik,valid_loglik,steps\n");
        for e in &self.epochs {
            s.push_str(&format!("{},{},{},{}\n", e.epoch, e.train_loglik, e.valid_loglik, e.steps));
        }
        s
    }
}

/// Seeded train/validation split; validation gets `ceil(fraction · len)` pairs (at least one).
pub fn split_indices(len: usize, valid_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..len).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let nv = ((valid_fraction * len as f64).ceil() as usize).clamp(1, len.saturating_sub(1).max(1));
    let valid = idx.split_off(len - nv);
    (idx, valid)
}

/// Fits the network by Adam ascent on the minibatch conditional log-likelihood with
/// `Σ = σ²_0 I`, stopping once the validation log-likelihood has stayed within the
/// relative tolerance for two consecutive epochs.
pub fn train_cnn(mut model: IdeModel, dataset: &SequenceDataset, config: &TrainingConfig) -> Result<(IdeModel, TrainingLog)> {
    config.validate()?;
    if dataset.len() < 2 {
        return Err(Error::InsufficientFrames { needed: 2, got: dataset.len() });
    }
    let noise = [NoiseCovariance::isotropic(model.grid().len(), config.sigma2_0)?];
    let (train, valid) = split_indices(dataset.len(), config.valid_fraction, config.seed);
    let train_set = SequenceDataset { pairs: train.iter().map(|&i| dataset.pairs[i].clone()).collect() };
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_0f_ba7c4);
    let mut adam = AdamState::new(model.params.len());
    let mut log = TrainingLog { train_indices: train, valid_indices: valid.clone(), ..Default::default() };
    let start = Instant::now();
    let mut calm_epochs = 0;
    let mut prev_valid: Option<f64> = None;
    let mut batch_counter = 0usize;
    'epochs: for epoch in 1..=config.max_epochs {
        order.shuffle(&mut rng);
        let mut train_ll = 0.0;
        let mut stop_after = false;
        for batch in order.chunks(config.batch_size) {
            if config.max_steps.is_some_and(|m| log.steps >= m) {
                stop_after = true;
                break;
            }
            let (ll, mut g) = minibatch_grad(&model, &train_set, batch, &noise)?;
            if !ll.is_finite() || g.0.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteLoss { batch: batch_counter });
            }
            train_ll += ll * batch.len() as f64 / train_set.len() as f64;
            g.scale(-1.0);
            adam_step(model.params.as_mut_slice(), &g.0, &mut adam, &config.adam);
            log.steps += 1;
            batch_counter += 1;
        }
        let valid_ll = total_loglik(&model, dataset, &valid, &noise)?;
        if !valid_ll.is_finite() {
            return Err(Error::NonFiniteLoss { batch: batch_counter });
        }
        log.epochs.push(EpochRecord {
            epoch,
            train_loglik: train_ll,
            valid_loglik: valid_ll,
            steps: log.steps,
            wall_seconds: start.elapsed().as_secs_f64(),
        });
        if let Some(p) = prev_valid {
            if (valid_ll - p).abs() < config.tolerance * valid_ll.abs() {
                calm_epochs += 1;
            } else {
                calm_epochs = 0;
            }
        }
        prev_valid = Some(valid_ll);
        if calm_epochs >= 2 || stop_after || config.max_steps.is_some_and(|m| log.steps >= m) {
            break 'epochs;
        }
    }
    Ok((model, log))
}

/// Residuals `Y_{t+1} − K̂ Y_t` of the fitted model over the given pairs.
pub fn residual_fields(model: &IdeModel, dataset: &SequenceDataset, indices: &[usize]) -> Result<Vec<Field>> {
    let parts: Vec<Result<Field>> = indices
        .par_iter()
        .map(|&i| {
            let pair = &dataset.pairs[i];
            let k = model.transition(&pair.window)?;
            Field::new(pair.target.grid(), residual(&k, &pair.window, &pair.target)?)
        })
        .collect();
    parts.into_iter().collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ResidualFit {
    pub params: NoiseParams,
    pub loglik: f64,
    /// The length scale sits on the lower search bound: no resolvable spatial correlation.
    pub at_lower_bound: bool,
}

pub const MIN_RESIDUAL_FIELDS: usize = 30;
const SIGMA2_BOUNDS: (f64, f64) = (1e-5, 1.0);
const RHO_MAX: f64 = 0.5;
/// Half the 95% quantile of χ²₁.
const LR_MARGIN: f64 = 1.92;

/// Smallest length scale searched: a quarter of a cell width.
pub fn rho_lower_bound(grid: GridSpec) -> f64 {
    0.25 * grid.cell_width()
}

/// Log-likelihood of the residuals at length scale `rho`, with `σ²` at its closed-form
/// maximizer (clamped to its bounds). Returns `(loglik, σ²)`.
fn profile_loglik(grid: GridSpec, residuals: &[Field], rho: f64) -> Result<(f64, f64)> {
    let corr = noise_covariance(grid, NoiseParams { sigma2: 1.0, rho })?;
    let quads: Vec<f64> = residuals
        .par_iter()
        .map(|r| {
            let s = corr.solve(r.values());
            r.values().iter().zip(&s).map(|(a, b)| a * b).sum::<f64>()
        })
        .collect();
    let quad: f64 = quads.iter().sum();
    let count = (residuals.len() * grid.len()) as f64;
    let sigma2 = (quad / count).clamp(SIGMA2_BOUNDS.0, SIGMA2_BOUNDS.1);
    let ll = -0.5 * (count * (LN_2PI + sigma2.ln()) + residuals.len() as f64 * corr.logdet() + quad / sigma2);
    Ok((ll, sigma2))
}

/// Maximum-likelihood `(σ², ρ)` of i.i.d. Matérn-3/2 residual fields: a log-spaced scan
/// over `ρ` with `σ²` profiled out, then golden-section refinement around the best scan
/// point.
pub fn fit_residual_matern(residuals: &[Field]) -> Result<ResidualFit> {
    if residuals.len() < MIN_RESIDUAL_FIELDS {
        return Err(Error::InsufficientFrames { needed: MIN_RESIDUAL_FIELDS, got: residuals.len() });
    }
    let grid = residuals[0].grid();
    if residuals.iter().any(|r| r.grid() != grid) {
        return Err(Error::ShapeMismatch("residual fields on different grids".into()));
    }
    let ms = residuals.iter().flat_map(|r| r.values()).map(|v| v * v).sum::<f64>() / (residuals.len() * grid.len()) as f64;
    if !(ms > 1e-20) {
        return Err(Error::DegenerateResiduals);
    }
    let (lo, hi) = (rho_lower_bound(grid).ln(), RHO_MAX.ln());
    let n_scan = 24;
    let scan: Vec<f64> = (0..n_scan).map(|i| lo + (hi - lo) * i as f64 / (n_scan - 1) as f64).collect();
    let mut vals = Vec::with_capacity(n_scan);
    for &lr in &scan {
        vals.push(profile_loglik(grid, residuals, lr.exp())?.0);
    }
    let best = (0..n_scan).max_by(|&a, &b| vals[a].total_cmp(&vals[b])).ok_or(Error::OptimizerFailure)?;
    let (mut a, mut b) = (scan[best.saturating_sub(1)], scan[(best + 1).min(n_scan - 1)]);
    let f = |lr: f64| profile_loglik(grid, residuals, lr.exp()).map(|v| v.0);
    let g = 0.5 * (5f64.sqrt() - 1.0);
    let mut c = b - g * (b - a);
    let mut d = a + g * (b - a);
    let (mut fc, mut fd) = (f(c)?, f(d)?);
    for _ in 0..40 {
        if (b - a).abs() < 1e-5 {
            break;
        }
        if fc > fd {
            b = d;
            d = c;
            fd = fc;
            c = b - g * (b - a);
            fc = f(c)?;
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + g * (b - a);
            fd = f(d)?;
        }
    }
    let mut lr = 0.5 * (a + b);
    let (mut ll, mut sigma2) = profile_loglik(grid, residuals, lr.exp())?;
    if vals[best] > ll {
        lr = scan[best];
        (ll, sigma2) = profile_loglik(grid, residuals, lr.exp())?;
    }
    // Below the grid spacing the profile is nearly flat; keep the bound unless the
    // interior optimum beats it by a 95% likelihood-ratio margin.
    let (ll_lo, sigma2_lo) = profile_loglik(grid, residuals, lo.exp())?;
    let at_lower_bound = ll - ll_lo < LR_MARGIN;
    if at_lower_bound {
        (lr, ll, sigma2) = (lo, ll_lo, sigma2_lo);
    }
    Ok(ResidualFit { params: NoiseParams::new(sigma2, lr.exp())?, loglik: ll, at_lower_bound })
}

/// Independent draws from `N(0, Σ)` laid out as fields.
pub fn sample_matern_fields(grid: GridSpec, params: NoiseParams, count: usize, seed: u64) -> Result<Vec<Field>> {
    let cov = noise_covariance(grid, params)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count).map(|_| Field::new(grid, cov.sample(&mut rng))).collect()
}
