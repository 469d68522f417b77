//! `key = value` run configuration.

use std::path::Path;
use std::str::FromStr;

use deepide::cnn::{AdamConfig, CnnArchitecture};
use deepide::enkf::TaperSpec;
use deepide::kernel::{default_bandwidth, THETA_MIN};
use deepide::likelihood::TrainingConfig;
use deepide::sim::{Regime, SimConfig};

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub n: usize,
    pub tau: usize,
    pub r: usize,
    /// `None` picks the default for `r`.
    pub bandwidth: Option<f64>,
    pub theta_min: f64,
    pub filters: Vec<usize>,
    pub patch: usize,
    pub batch: usize,
    pub lr: f64,
    pub max_epochs: usize,
    pub valid_frac: f64,
    pub tol: f64,
    pub sigma2_0: f64,
    pub n_members: usize,
    /// Zero disables tapering.
    pub taper_c: f64,
    /// Scale of the initial ensemble spread around zero fields.
    pub jitter: f64,
    pub init_rho: f64,
    pub sigma2_eps: f64,
    /// Observed pixels per step.
    pub obs_m: usize,
    pub border: usize,
    pub seed: u64,
    pub regime: Regime,
    pub sequences: usize,
    pub frames: usize,
    pub test_frames: usize,
    pub static_frac: f64,
    pub amplitude: f64,
    pub diffusion: f64,
    pub forcing_sigma2: f64,
    pub forcing_rho: f64,
    pub blob_sd: f64,
    pub n_blobs: usize,
    pub rotation: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            n: 16,
            tau: 3,
            r: 16,
            bandwidth: None,
            theta_min: THETA_MIN,
            filters: vec![8, 16, 32],
            patch: 5,
            batch: 16,
            lr: 3e-4,
            max_epochs: 50,
            valid_frac: 0.10,
            tol: 1e-3,
            sigma2_0: 0.01,
            n_members: 64,
            taper_c: TaperSpec::DEFAULT_C,
            jitter: 1.0,
            init_rho: 0.1,
            sigma2_eps: 0.01,
            obs_m: 64,
            border: 2,
            seed: 0,
            regime: Regime::TranslatingBlobs,
            sequences: 200,
            frames: 4,
            test_frames: 12,
            static_frac: 0.2,
            amplitude: 1.0,
            diffusion: 0.0,
            forcing_sigma2: 1e-4,
            forcing_rho: 0.1,
            blob_sd: 0.1,
            n_blobs: 1,
            rotation: 0.0,
        }
    }
}

fn value<T: FromStr>(key: &str, raw: &str) -> Result<T, CliError> {
    raw.parse().map_err(|_| CliError::config(key, format!("cannot parse '{raw}'")))
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let mut c = Self::default();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, raw) = line
                .split_once('=')
                .ok_or_else(|| CliError::config(&format!("line {}", lineno + 1), "expected 'key = value'"))?;
            let (key, raw) = (key.trim(), raw.trim());
            c.set(key, raw)?;
        }
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::file(path, e.to_string()))?;
        Self::parse(&text)
    }

    fn set(&mut self, key: &str, raw: &str) -> Result<(), CliError> {
        match key {
            "grid.n" => self.n = value(key, raw)?,
            "model.tau" => self.tau = value(key, raw)?,
            "model.r" => self.r = value(key, raw)?,
            "model.bandwidth" => self.bandwidth = Some(value(key, raw)?),
            "model.theta_min" => self.theta_min = value(key, raw)?,
            "model.filters" => {
                self.filters = raw.split(',').map(|s| value(key, s.trim())).collect::<Result<_, _>>()?;
            }
            "model.patch" => self.patch = value(key, raw)?,
            "train.batch" => self.batch = value(key, raw)?,
            "train.lr" => self.lr = value(key, raw)?,
            "train.max_epochs" => self.max_epochs = value(key, raw)?,
            "train.valid_frac" => self.valid_frac = value(key, raw)?,
            "train.tol" => self.tol = value(key, raw)?,
            "train.sigma2_0" => self.sigma2_0 = value(key, raw)?,
            "enkf.n_members" => self.n_members = value(key, raw)?,
            "enkf.taper_c" => self.taper_c = value(key, raw)?,
            "enkf.jitter" => self.jitter = value(key, raw)?,
            "enkf.init_rho" => self.init_rho = value(key, raw)?,
            "obs.sigma2_eps" => self.sigma2_eps = value(key, raw)?,
            "obs.m" => self.obs_m = value(key, raw)?,
            "mask.border" => self.border = value(key, raw)?,
            "seed" => self.seed = value(key, raw)?,
            "sim.regime" => self.regime = value(key, raw)?,
            "sim.sequences" => self.sequences = value(key, raw)?,
            "sim.frames" => self.frames = value(key, raw)?,
            "sim.test_frames" => self.test_frames = value(key, raw)?,
            "sim.static_frac" => self.static_frac = value(key, raw)?,
            "sim.amplitude" => self.amplitude = value(key, raw)?,
            "sim.diffusion" => self.diffusion = value(key, raw)?,
            "sim.forcing_sigma2" => self.forcing_sigma2 = value(key, raw)?,
            "sim.forcing_rho" => self.forcing_rho = value(key, raw)?,
            "sim.blob_sd" => self.blob_sd = value(key, raw)?,
            "sim.n_blobs" => self.n_blobs = value(key, raw)?,
            "sim.rotation" => self.rotation = value(key, raw)?,
            _ => return Err(CliError::config(key, "unknown key")),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let check = |ok: bool, key: &str, msg: &str| if ok { Ok(()) } else { Err(CliError::config(key, msg)) };
        check(self.tau >= 2, "model.tau", "must be at least 2")?;
        check(self.n_members >= 2, "enkf.n_members", "must be at least 2")?;
        check(self.taper_c >= 0.0, "enkf.taper_c", "must be nonnegative")?;
        check(self.jitter > 0.0 && self.init_rho > 0.0, "enkf.jitter", "initial spread and its length scale must be positive")?;
        check(self.sigma2_eps > 0.0, "obs.sigma2_eps", "must be positive")?;
        check(self.obs_m >= 1 && self.obs_m <= self.n * self.n, "obs.m", "must lie in [1, n²]")?;
        check(2 * self.border < self.n, "mask.border", "leaves no interior pixels")?;
        check((0.0..=1.0).contains(&self.static_frac), "sim.static_frac", "must lie in [0, 1]")?;
        check(self.sequences >= 1, "sim.sequences", "must be positive")?;
        check(self.test_frames > self.tau + 1, "sim.test_frames", "must exceed model.tau + 1")?;
        check(self.theta_min > 0.0, "model.theta_min", "must be positive")?;
        check(self.bandwidth.is_none_or(|b| b > 0.0), "model.bandwidth", "must be positive")?;
        self.architecture().map_err(|e| CliError::config("model.filters", e.to_string()))?;
        self.training().validate().map_err(|e| CliError::config("train", e.to_string()))?;
        self.sim(self.frames, 0, false).validate().map_err(|e| CliError::config("sim", e.to_string()))?;
        Ok(())
    }

    pub fn architecture(&self) -> deepide::Result<CnnArchitecture> {
        CnnArchitecture::new(self.tau, self.n, self.filters.clone(), self.patch, self.r)
    }

    pub fn bandwidth(&self) -> f64 {
        self.bandwidth.unwrap_or_else(|| default_bandwidth(self.r))
    }

    pub fn training(&self) -> TrainingConfig {
        TrainingConfig {
            batch_size: self.batch,
            adam: AdamConfig { lr: self.lr, ..AdamConfig::default() },
            max_epochs: self.max_epochs,
            valid_fraction: self.valid_frac,
            tolerance: self.tol,
            seed: self.seed,
            sigma2_0: self.sigma2_0,
            max_steps: None,
        }
    }

    pub fn taper(&self) -> Option<TaperSpec> {
        (self.taper_c > 0.0).then_some(TaperSpec { c: self.taper_c })
    }

    pub fn sim(&self, t_len: usize, seed: u64, still: bool) -> SimConfig {
        SimConfig {
            n: self.n,
            t_len,
            tau: self.tau,
            regime: self.regime,
            amplitude: if still { 0.0 } else { self.amplitude },
            diffusion: self.diffusion,
            forcing_sigma2: self.forcing_sigma2,
            forcing_rho: self.forcing_rho,
            blob_sd: self.blob_sd,
            n_blobs: self.n_blobs,
            rotation: if still { 0.0 } else { self.rotation },
            heading: None,
            seed,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_text_gives_defaults() {
        assert_eq!(RunConfig::parse("").unwrap(), RunConfig::default());
        assert_eq!(RunConfig::default().training().batch_size, 16);
        assert_eq!(RunConfig::default().n_members, 64);
    }

    #[test]
    fn comments_and_spacing() {
        let c = RunConfig::parse("# desk\n  seed = 7   # trailing\nmodel.filters = 4, 8\n\nenkf.taper_c=0\n").unwrap();
        assert_eq!(c.seed, 7);
        assert_eq!(c.filters, vec![4, 8]);
        assert!(c.taper().is_none());
    }

    #[test]
    fn unknown_and_bad_keys_are_rejected() {
        let e = RunConfig::parse("train.learning_rate = 0.1\n").unwrap_err();
        assert_eq!(e.exit_code(), 2);
        assert!(e.to_string().contains("train.learning_rate"));
        let e = RunConfig::parse("train.lr = fast\n").unwrap_err();
        assert!(e.to_string().contains("train.lr"));
        assert!(RunConfig::parse("seed 4\n").is_err());
        assert!(RunConfig::parse("obs.m = 1000\n").is_err());
        assert!(RunConfig::parse("sim.regime = swirl\n").is_err());
    }

    #[test]
    fn bundled_config_parses() {
        let text = include_str!("../../../configs/desk.conf");
        let c = RunConfig::parse(text).unwrap();
        assert_eq!(c.architecture().unwrap(), CnnArchitecture::desk(3));
    }
}
