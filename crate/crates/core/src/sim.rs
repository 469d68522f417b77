//! Synthetic frame sequences with known flow, and noisy pixel sampling.
//!
//! The simulators move mass with their own schemes (analytic blob tracks,
//! semi-Lagrangian bilinear advection, five-point diffusion) rather than with the
//! model's kernel.

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::enkf::Observations;
use crate::error::{Error, Result};
use crate::grid::{Field, GridSpec};
use crate::likelihood::{noise_covariance, NoiseCovariance, NoiseParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Regime {
    TranslatingBlobs,
    AdvectionDiffusion,
    RotationalFlow,
}

impl std::str::FromStr for Regime {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "translating-blobs" => Ok(Regime::TranslatingBlobs),
            "advection-diffusion" => Ok(Regime::AdvectionDiffusion),
            "rotational-flow" => Ok(Regime::RotationalFlow),
            other => Err(Error::Parse(format!("unknown regime '{other}'"))),
        }
    }
}

impl std::fmt::Display for Regime {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Regime::TranslatingBlobs => "translating-blobs",
            Regime::AdvectionDiffusion => "advection-diffusion",
            Regime::RotationalFlow => "rotational-flow",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    pub n: usize,
    /// Number of frames `T`.
    pub t_len: usize,
    pub tau: usize,
    pub regime: Regime,
    /// Flow speed in cells per step.
    pub amplitude: f64,
    /// Explicit diffusion number per step (grid units); at most 0.25.
    pub diffusion: f64,
    pub forcing_sigma2: f64,
    pub forcing_rho: f64,
    /// Blob standard deviation (unit-square lengths).
    pub blob_sd: f64,
    pub n_blobs: usize,
    /// Extra rotation of blob tracks about the domain centre, radians per step.
    pub rotation: f64,
    /// Fixed blob heading in radians (from +x towards +y); random per blob when absent.
    pub heading: Option<f64>,
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            n: 16,
            t_len: 4,
            tau: 3,
            regime: Regime::TranslatingBlobs,
            amplitude: 1.0,
            diffusion: 0.0,
            forcing_sigma2: 0.0,
            forcing_rho: 0.1,
            blob_sd: 0.1,
            n_blobs: 1,
            rotation: 0.0,
            heading: None,
            seed: 0,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        GridSpec::new(self.n)?;
        if self.t_len <= self.tau {
            return Err(Error::InvalidArgument(format!("need T > tau, got T={} tau={}", self.t_len, self.tau)));
        }
        if !(self.amplitude >= 0.0) || self.amplitude > self.n as f64 / 4.0 {
            return Err(Error::UnstableConfig(format!("amplitude {} cells/step exceeds n/4", self.amplitude)));
        }
        if !(0.0..=0.25).contains(&self.diffusion) {
            return Err(Error::UnstableConfig(format!("diffusion number {} outside [0, 0.25]", self.diffusion)));
        }
        if !(self.forcing_sigma2 >= 0.0) || !(self.forcing_rho > 0.0) || !(self.blob_sd > 0.0) {
            return Err(Error::InvalidArgument("forcing variance, forcing length scale and blob size must be positive".into()));
        }
        Ok(())
    }
}

/// Frames plus the flow that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct Simulation {
    pub frames: Vec<Field>,
    /// Per-frame displacement fields `(dx, dy)` in unit-square lengths per step: the
    /// motion carrying frame `t` into frame `t + 1`.
    pub flow: Vec<(Vec<f64>, Vec<f64>)>,
    /// Blob centres per frame (translating-blobs only).
    pub centers: Vec<Vec<(f64, f64)>>,
    /// Per-blob displacement per step, before rotation (translating-blobs only).
    pub velocities: Vec<(f64, f64)>,
}

pub fn simulate(config: &SimConfig) -> Result<Simulation> {
    config.validate()?;
    let grid = GridSpec::new(config.n)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let forcing = if config.forcing_sigma2 > 0.0 {
        Some(noise_covariance(grid, NoiseParams::new(config.forcing_sigma2, config.forcing_rho)?)?)
    } else {
        None
    };
    match config.regime {
        Regime::TranslatingBlobs => blobs(config, grid, &mut rng, forcing.as_ref()),
        Regime::AdvectionDiffusion | Regime::RotationalFlow => transport(config, grid, &mut rng, forcing.as_ref()),
    }
}

fn rotate_about_center(p: (f64, f64), angle: f64) -> (f64, f64) {
    let (s, c) = angle.sin_cos();
    let (x, y) = (p.0 - 0.5, p.1 - 0.5);
    (0.5 + c * x - s * y, 0.5 + s * x + c * y)
}

fn add_forcing(values: &mut [f64], forcing: Option<&NoiseCovariance>, rng: &mut ChaCha8Rng) {
    if let Some(cov) = forcing {
        let eta = cov.sample(rng);
        values.iter_mut().zip(&eta).for_each(|(v, e)| *v += e);
    }
}

fn blobs(config: &SimConfig, grid: GridSpec, rng: &mut ChaCha8Rng, forcing: Option<&NoiseCovariance>) -> Result<Simulation> {
    let speed = config.amplitude * grid.cell_width();
    let span = (config.t_len - 1) as f64;
    let mut starts = Vec::with_capacity(config.n_blobs);
    let mut velocities = Vec::with_capacity(config.n_blobs);
    for _ in 0..config.n_blobs {
        let heading = config.heading.unwrap_or_else(|| rng.gen_range(0.0..std::f64::consts::TAU));
        let v = (speed * heading.cos(), speed * heading.sin());
        // midpoint of the track near the centre so the blob stays inside
        let mid = (rng.gen_range(0.35..0.65), rng.gen_range(0.35..0.65));
        starts.push((mid.0 - 0.5 * span * v.0, mid.1 - 0.5 * span * v.1));
        velocities.push(v);
    }
    let two_s2 = 2.0 * config.blob_sd * config.blob_sd;
    let mut frames = Vec::with_capacity(config.t_len);
    let mut flow = Vec::with_capacity(config.t_len);
    let mut centers = Vec::with_capacity(config.t_len);
    let mut current = starts;
    for _ in 0..config.t_len {
        let mut values = vec![0.0; grid.len()];
        let mut owner = vec![0usize; grid.len()];
        let mut best = vec![f64::NEG_INFINITY; grid.len()];
        for (i, v) in values.iter_mut().enumerate() {
            let (x, y) = grid.center(i);
            for (k, c) in current.iter().enumerate() {
                let b = (-((x - c.0).powi(2) + (y - c.1).powi(2)) / two_s2).exp();
                *v += b;
                if b > best[i] {
                    best[i] = b;
                    owner[i] = k;
                }
            }
        }
        add_forcing(&mut values, forcing, rng);
        let next: Vec<(f64, f64)> = current
            .iter()
            .zip(&velocities)
            .map(|(c, v)| rotate_about_center((c.0 + v.0, c.1 + v.1), config.rotation))
            .collect();
        // a point riding with blob k moves like the blob's rigid motion
        let (mut fx, mut fy) = (vec![0.0; grid.len()], vec![0.0; grid.len()]);
        for i in 0..grid.len() {
            let k = owner[i];
            let (x, y) = grid.center(i);
            let (dx, dy) = (x - current[k].0, y - current[k].1);
            let (s, c) = config.rotation.sin_cos();
            fx[i] = next[k].0 + c * dx - s * dy - x;
            fy[i] = next[k].1 + s * dx + c * dy - y;
        }
        frames.push(Field::new(grid, values)?);
        flow.push((fx, fy));
        centers.push(current.clone());
        current = next;
    }
    Ok(Simulation { frames, flow, centers, velocities })
}

/// Bilinear interpolation at fractional cell coordinates, periodic or clamped.
fn bilinear(values: &[f64], n: usize, col: f64, row: f64, periodic: bool) -> f64 {
    let idx = |k: isize| -> usize {
        if periodic {
            k.rem_euclid(n as isize) as usize
        } else {
            k.clamp(0, n as isize - 1) as usize
        }
    };
    let (c0, r0) = (col.floor(), row.floor());
    let (fc, fr) = (col - c0, row - r0);
    let (c0, r0) = (c0 as isize, r0 as isize);
    let at = |r: isize, c: isize| values[idx(r) * n + idx(c)];
    (1.0 - fr) * ((1.0 - fc) * at(r0, c0) + fc * at(r0, c0 + 1)) + fr * ((1.0 - fc) * at(r0 + 1, c0) + fc * at(r0 + 1, c0 + 1))
}

/// One periodic five-point explicit diffusion step with diffusion number `kappa`.
pub fn diffuse_periodic(values: &[f64], n: usize, kappa: f64) -> Vec<f64> {
    let mut out = values.to_vec();
    for r in 0..n {
        for c in 0..n {
            let up = values[((r + n - 1) % n) * n + c];
            let down = values[((r + 1) % n) * n + c];
            let left = values[r * n + (c + n - 1) % n];
            let right = values[r * n + (c + 1) % n];
            out[r * n + c] += kappa * (up + down + left + right - 4.0 * values[r * n + c]);
        }
    }
    out
}

fn transport(config: &SimConfig, grid: GridSpec, rng: &mut ChaCha8Rng, forcing: Option<&NoiseCovariance>) -> Result<Simulation> {
    let n = grid.n();
    let w = grid.cell_width();
    let a = config.amplitude * w;
    let periodic = config.regime == Regime::AdvectionDiffusion;
    let phase = rng.gen_range(0.0..std::f64::consts::TAU);
    let tau2 = std::f64::consts::TAU;
    let (fx, fy): (Vec<f64>, Vec<f64>) = (0..grid.len())
        .map(|i| {
            let (x, y) = grid.center(i);
            match config.regime {
                Regime::AdvectionDiffusion => {
                    (a * (phase.cos() + 0.5 * (tau2 * y).sin()), a * (phase.sin() + 0.5 * (tau2 * x).sin()))
                }
                _ => (-a * (y - 0.5) / 0.5, a * (x - 0.5) / 0.5),
            }
        })
        .unzip();
    // smooth random start: a few bumps
    let mut values = vec![0.0; grid.len()];
    for _ in 0..3 {
        let c = (rng.gen_range(0.2..0.8), rng.gen_range(0.2..0.8));
        let amp = rng.gen_range(0.5..1.5);
        for (i, v) in values.iter_mut().enumerate() {
            let (x, y) = grid.center(i);
            *v += amp * (-((x - c.0).powi(2) + (y - c.1).powi(2)) / (2.0 * config.blob_sd.powi(2))).exp();
        }
    }
    let mut frames = Vec::with_capacity(config.t_len);
    let mut flow = Vec::with_capacity(config.t_len);
    for t in 0..config.t_len {
        if t > 0 {
            let prev = values.clone();
            values = (0..grid.len())
                .map(|i| {
                    let (row, col) = grid.row_col(i);
                    bilinear(&prev, n, col as f64 - fx[i] * n as f64, row as f64 - fy[i] * n as f64, periodic)
                })
                .collect();
            if config.diffusion > 0.0 {
                values = diffuse_periodic(&values, n, config.diffusion);
            }
            add_forcing(&mut values, forcing, rng);
        }
        frames.push(Field::new(grid, values.clone())?);
        flow.push((fx.clone(), fy.clone()));
    }
    Ok(Simulation { frames, flow, centers: Vec::new(), velocities: Vec::new() })
}

/// Per time step, `m` distinct pixels drawn uniformly with `N(0, σ²_ε)` noise added to the truth.
/// Observation times are the frame indices.
pub fn sample_observations(frames: &[Field], m: usize, sigma2_eps: f64, seed: u64) -> Result<Vec<Observations>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, sigma2_eps.max(0.0).sqrt()).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    frames
        .iter()
        .enumerate()
        .map(|(t, f)| {
            let grid = f.grid();
            if m > grid.len() {
                return Err(Error::TooManyPixels { m, available: grid.len() });
            }
            let mut pixels = index::sample(&mut rng, grid.len(), m).into_vec();
            pixels.sort_unstable();
            let values = pixels.iter().map(|&p| f.values()[p] + noise.sample(&mut rng)).collect();
            // a zero-variance draw still needs a positive variance for assimilation
            Observations::new(t, pixels, values, sigma2_eps.max(f64::MIN_POSITIVE), grid)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn still_config_repeats_frames() {
        let cfg = SimConfig { amplitude: 0.0, t_len: 6, seed: 3, ..Default::default() };
        let sim = simulate(&cfg).unwrap();
        assert!(sim.frames.windows(2).all(|w| w[0] == w[1]));
        let cfg = SimConfig { regime: Regime::AdvectionDiffusion, amplitude: 0.0, t_len: 5, ..Default::default() };
        let sim = simulate(&cfg).unwrap();
        assert!(sim.frames.windows(2).all(|w| w[0] == w[1]));
    }

    #[test]
    fn eastward_blob_moves_one_column_per_frame() {
        let cfg = SimConfig { n: 24, t_len: 6, heading: Some(0.0), blob_sd: 0.06, seed: 4, ..Default::default() };
        let sim = simulate(&cfg).unwrap();
        let grid = GridSpec::new(24).unwrap();
        let cols: Vec<usize> = sim
            .frames
            .iter()
            .map(|f| grid.row_col(f.values().iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0).1)
            .collect();
        assert!(cols.windows(2).all(|w| w[1] == w[0] + 1), "{cols:?}");
    }

    #[test]
    fn diffusion_conserves_total_on_periodic_grid() {
        let cfg = SimConfig { regime: Regime::AdvectionDiffusion, amplitude: 0.0, diffusion: 0.2, t_len: 10, ..Default::default() };
        let sim = simulate(&cfg).unwrap();
        let sums: Vec<f64> = sim.frames.iter().map(|f| f.values().iter().sum()).collect();
        assert!(sums.windows(2).all(|w| (w[1] - w[0]).abs() < 1e-6));
        assert!(sim.frames[0] != sim.frames[9]);
    }

    #[test]
    fn rejects_unstable_settings() {
        assert!(matches!(simulate(&SimConfig { diffusion: 0.3, ..Default::default() }), Err(Error::UnstableConfig(_))));
        assert!(matches!(simulate(&SimConfig { amplitude: 5.0, ..Default::default() }), Err(Error::UnstableConfig(_))));
        assert!(simulate(&SimConfig { t_len: 3, ..Default::default() }).is_err());
    }

    #[test]
    fn seeded_runs_are_identical() {
        let cfg = SimConfig { forcing_sigma2: 0.01, n_blobs: 2, rotation: 0.1, t_len: 8, seed: 9, ..Default::default() };
        assert_eq!(simulate(&cfg).unwrap(), simulate(&cfg).unwrap());
        let cfg = SimConfig { regime: Regime::RotationalFlow, forcing_sigma2: 0.01, t_len: 5, seed: 9, ..Default::default() };
        assert_eq!(simulate(&cfg).unwrap(), simulate(&cfg).unwrap());
    }

    #[test]
    fn truth_flow_at_blob_centre_is_the_velocity() {
        let cfg = SimConfig { n: 16, t_len: 5, seed: 11, ..Default::default() };
        let sim = simulate(&cfg).unwrap();
        let grid = GridSpec::new(16).unwrap();
        let v = sim.velocities[0];
        for (t, cs) in sim.centers.iter().enumerate() {
            // the pixel nearest the centre is owned by the only blob; its flow is the rigid shift
            let c = cs[0];
            let i = grid.index(((c.1 * 16.0) as usize).min(15), ((c.0 * 16.0) as usize).min(15));
            assert!((sim.flow[t].0[i] - v.0).abs() < 1e-12 && (sim.flow[t].1[i] - v.1).abs() < 1e-12);
        }
        let speed = v.0.hypot(v.1);
        assert!((speed - grid.cell_width()).abs() < 1e-12);
    }

    #[test]
    fn rotated_tracks_turn() {
        let cfg = SimConfig { amplitude: 0.0, rotation: 0.2, t_len: 4, seed: 12, ..Default::default() };
        let sim = simulate(&cfg).unwrap();
        let r = |p: (f64, f64)| (p.0 - 0.5).hypot(p.1 - 0.5);
        let c0 = sim.centers[0][0];
        let c1 = sim.centers[1][0];
        assert!((r(c0) - r(c1)).abs() < 1e-12);
        let a0 = (c0.1 - 0.5).atan2(c0.0 - 0.5);
        let a1 = (c1.1 - 0.5).atan2(c1.0 - 0.5);
        assert!(((a1 - a0).rem_euclid(std::f64::consts::TAU) - 0.2).abs() < 1e-9);
    }

    #[test]
    fn full_noise_free_sampling_is_exact() {
        let sim = simulate(&SimConfig::default()).unwrap();
        let obs = sample_observations(&sim.frames, 256, 0.0, 1).unwrap();
        for (o, f) in obs.iter().zip(&sim.frames) {
            assert_eq!(o.pixels, (0..256).collect::<Vec<_>>());
            assert_eq!(o.values, f.values());
        }
        assert!(matches!(sample_observations(&sim.frames, 257, 0.0, 1), Err(Error::TooManyPixels { .. })));
    }

    #[test]
    fn measurement_noise_has_the_requested_variance() {
        let grid = GridSpec::new(16).unwrap();
        let frames = vec![Field::zeros(grid); 400];
        let obs = sample_observations(&frames, 250, 0.01, 2).unwrap();
        let vals: Vec<f64> = obs.iter().flat_map(|o| o.values.iter().copied()).collect();
        assert_eq!(vals.len(), 100_000);
        let var = vals.iter().map(|v| v * v).sum::<f64>() / vals.len() as f64;
        assert!((var / 0.01 - 1.0).abs() < 0.05, "{var}");
        for o in &obs {
            let mut p = o.pixels.clone();
            p.dedup();
            assert_eq!(p.len(), 250);
        }
    }
}
