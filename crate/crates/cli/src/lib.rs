//! Command implementations behind the `deepide` binary. Commands talk to each other
//! only through files.

pub mod config;
pub mod error;

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use deepide::baseline::{fit_window_ide, vanilla_ide_forecast};
use deepide::cnn::CnnParams;
use deepide::enkf::{dynamics_summary, forecast, init_ensemble, run_filter, Ensemble};
use deepide::grid::{interior_mask, Field, GridSpec};
use deepide::io::{
    decode_ensemble, dynamics_summary_csv, encode_ensemble, observations_csv, parse_observations_csv, read_file,
    score_csv, write_file, Checkpoint, ScoreRow, SequenceFile,
};
use deepide::kernel::build_rbf_basis;
use deepide::likelihood::{
    fit_residual_matern, noise_covariance, residual_fields, train_cnn, IdeModel, NoiseParams, SequenceDataset,
};
use deepide::sim::{sample_observations, simulate};
use deepide::verify::{score_ensemble, score_gaussian, score_ratio_table, ScoreReport};

pub use config::RunConfig;
pub use error::CliError;

pub type CliResult<T> = Result<T, CliError>;

fn create_dir(path: &Path) -> CliResult<()> {
    fs::create_dir_all(path).map_err(|e| CliError::file(path, e.to_string()))
}

fn write_text(path: &Path, text: &str) -> CliResult<()> {
    write_file(path, text.as_bytes()).map_err(|e| CliError::at(path, e))
}

fn load_sequence(path: &Path) -> CliResult<SequenceFile> {
    SequenceFile::load(path).map_err(|e| CliError::at(path, e))
}

fn save_sequence(path: &Path, file: &SequenceFile) -> CliResult<()> {
    file.save(path).map_err(|e| CliError::at(path, e))
}

fn load_checkpoint(path: &Path) -> CliResult<Checkpoint> {
    Checkpoint::load(path).map_err(|e| CliError::at(path, e))
}

/// Sorted paths in `dir` whose names start with `prefix` and end in `.ideq`.
fn sequence_files(dir: &Path, prefix: &str) -> CliResult<Vec<PathBuf>> {
    let entries = fs::read_dir(dir).map_err(|e| CliError::file(dir, e.to_string()))?;
    let mut out = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| CliError::file(dir, e.to_string()))?.path();
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("");
        if name.starts_with(prefix) && name.ends_with(".ideq") {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

/// Time index encoded in `<prefix>_<t>.ideq`.
fn time_of(path: &Path) -> Option<usize> {
    path.file_stem()?.to_str()?.rsplit('_').next()?.parse().ok()
}

fn ensure_grid(config: &RunConfig, grid: GridSpec, path: &Path) -> CliResult<()> {
    if grid.n() != config.n {
        return Err(CliError::config("grid.n", format!("{} holds a {}-pixel grid, config says {}", path.display(), grid.n(), config.n)));
    }
    Ok(())
}

/// Training sequences under `out/train`, one held-out test sequence and its sampled
/// observations under `out/test`.
pub fn cmd_simulate(config: &RunConfig, out: &Path) -> CliResult<()> {
    let train_dir = out.join("train");
    let test_dir = out.join("test");
    create_dir(&train_dir)?;
    create_dir(&test_dir)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut velocities = String::from("sequence,still,vx_cells,vy_cells\n");
    let cells = config.n as f64;
    for s in 0..config.sequences {
        let still = rng.gen::<f64>() < config.static_frac;
        let sim = simulate(&config.sim(config.frames, rng.gen(), still))?;
        let file = SequenceFile::with_standardization(sim.frames)?;
        save_sequence(&train_dir.join(format!("seq_{s:05}.ideq")), &file)?;
        let v = sim.velocities.first().copied().unwrap_or((0.0, 0.0));
        let _ = writeln!(velocities, "{s},{},{},{}", u8::from(still), v.0 * cells, v.1 * cells);
    }
    write_text(&train_dir.join("velocities.csv"), &velocities)?;
    let sim = simulate(&config.sim(config.test_frames, rng.gen(), false))?;
    let truth = SequenceFile::with_standardization(sim.frames)?;
    save_sequence(&test_dir.join("truth.ideq"), &truth)?;
    let obs = sample_observations(&truth.standardized()?, config.obs_m, config.sigma2_eps, rng.gen())?;
    write_text(&test_dir.join("obs.csv"), &observations_csv(&obs, truth.grid()))?;
    Ok(())
}

fn load_dataset(config: &RunConfig, data: &Path) -> CliResult<SequenceDataset> {
    let files = sequence_files(data, "")?;
    if files.is_empty() {
        return Err(CliError::file(data, "no .ideq sequences found"));
    }
    let mut ds = SequenceDataset::default();
    for path in &files {
        let seq = load_sequence(path)?;
        ensure_grid(config, seq.grid(), path)?;
        ds.push_frames(&seq.standardized()?, config.tau, 0).map_err(|e| CliError::at(path, e))?;
    }
    Ok(ds)
}

pub fn cmd_train(config: &RunConfig, data: &Path, out: &Path) -> CliResult<()> {
    let ds = load_dataset(config, data)?;
    let arch = config.architecture()?;
    let grid = GridSpec::new(config.n)?;
    let params = CnnParams::init(arch, config.seed)?;
    let mut model = IdeModel::new(params, build_rbf_basis(grid, config.r, config.bandwidth())?)?;
    model.theta_min = config.theta_min;
    let training = config.training();
    let (model, log) = train_cnn(model, &ds, &training)?;
    for e in &log.epochs {
        eprintln!("epoch {} train_loglik {:.3} valid_loglik {:.3} elapsed {:.1}s", e.epoch, e.train_loglik, e.valid_loglik, e.wall_seconds);
    }
    create_dir(out)?;
    let path = out.join("checkpoint.idec");
    Checkpoint { model, training, noise: Vec::new() }.save(&path).map_err(|e| CliError::at(&path, e))?;
    write_text(&out.join("training_log.csv"), &log.to_csv())
}

/// Fits the Matérn residual noise over every training pair and writes an updated checkpoint.
pub fn cmd_fit_residuals(config: &RunConfig, checkpoint: &Path, data: &Path, out: &Path) -> CliResult<()> {
    let mut ck = load_checkpoint(checkpoint)?;
    let ds = load_dataset(config, data)?;
    let all: Vec<usize> = (0..ds.len()).collect();
    let residuals = residual_fields(&ck.model, &ds, &all)?;
    let fit = fit_residual_matern(&residuals)?;
    ck.noise = vec![fit.params];
    create_dir(out)?;
    let path = out.join("checkpoint.idec");
    ck.save(&path).map_err(|e| CliError::at(&path, e))?;
    write_text(
        &out.join("residual_fit.csv"),
        &format!("sigma2,rho,loglik,at_lower_bound\n{},{},{},{}\n", fit.params.sigma2, fit.params.rho, fit.loglik, u8::from(fit.at_lower_bound)),
    )
}

fn fitted_noise(ck: &Checkpoint, path: &Path) -> CliResult<NoiseParams> {
    ck.noise.first().copied().ok_or_else(|| CliError::file(path, "checkpoint has no fitted residual noise; run fit-residuals first"))
}

fn newest_frames(ens: &Ensemble) -> Vec<Field> {
    ens.members.iter().map(|m| m.newest().clone()).collect()
}

fn mean_sd(ens: &Ensemble) -> CliResult<SequenceFile> {
    Ok(SequenceFile::identity(vec![ens.mean(), ens.sd()])?)
}

/// Assimilates the observations with the stochastic EnKF, starting from zero fields
/// with Matérn spread. Per time `t` writes the filtered mean and sd, the member
/// forecasts for `t + 1`, and the dynamics summary; the last filtered ensemble goes to
/// `state.iden`.
pub fn cmd_filter(config: &RunConfig, checkpoint: &Path, obs_path: &Path, out: &Path) -> CliResult<()> {
    let ck = load_checkpoint(checkpoint)?;
    let noise = noise_covariance(ck.model.grid(), fitted_noise(&ck, checkpoint)?)?;
    let grid = ck.model.grid();
    ensure_grid(config, grid, checkpoint)?;
    let text = fs::read_to_string(obs_path).map_err(|e| CliError::file(obs_path, e.to_string()))?;
    let obs = parse_observations_csv(&text, grid, config.sigma2_eps).map_err(|e| CliError::at(obs_path, e))?;
    let first = obs.first().ok_or_else(|| CliError::file(obs_path, "no observations"))?;
    let init_cov = noise_covariance(grid, NoiseParams::new(1.0, config.init_rho)?)?;
    let zeros = vec![Field::zeros(grid); ck.model.tau()];
    let prior = init_ensemble(&zeros, ck.model.tau(), config.n_members, config.jitter, &init_cov, first.t, config.seed)?;
    let steps = run_filter(&prior, &obs, &ck.model, Some(&noise), config.taper())?;
    create_dir(out)?;
    for step in &steps {
        save_sequence(&out.join(format!("filtered_{:04}.ideq", step.t)), &mean_sd(&step.filtered)?)?;
        save_sequence(&out.join(format!("forecast_{:04}.ideq", step.forecast.t)), &SequenceFile::identity(newest_frames(&step.forecast))?)?;
        let summary = dynamics_summary(&step.filtered, &ck.model, false)?;
        write_text(&out.join(format!("dynamics_{:04}.csv", step.t)), &dynamics_summary_csv(&summary, grid))?;
    }
    let last = &steps.last().expect("at least one observation time").filtered;
    let path = out.join("state.iden");
    write_file(&path, &encode_ensemble(last)?).map_err(|e| CliError::at(&path, e))
}

/// `steps` forecasts ahead of a saved filter state, one member file per lead time.
pub fn cmd_forecast(config: &RunConfig, checkpoint: &Path, state: &Path, steps: usize, out: &Path) -> CliResult<()> {
    let ck = load_checkpoint(checkpoint)?;
    ensure_grid(config, ck.model.grid(), checkpoint)?;
    let noise = noise_covariance(ck.model.grid(), fitted_noise(&ck, checkpoint)?)?;
    let ens = decode_ensemble(&read_file(state).map_err(|e| CliError::at(state, e))?).map_err(|e| CliError::at(state, e))?;
    if steps == 0 {
        return Err(CliError::config("--steps", "forecast horizon must be positive"));
    }
    let path = forecast(&ens, &ck.model, Some(&noise), steps)?;
    create_dir(out)?;
    for e in &path {
        save_sequence(&out.join(format!("forecast_{:04}.ideq", e.t)), &SequenceFile::identity(newest_frames(e))?)?;
        save_sequence(&out.join(format!("forecast_mean_sd_{:04}.ideq", e.t)), &mean_sd(e)?)?;
    }
    Ok(())
}

/// Windowed vanilla IDE: refit on each run of three observation times and forecast
/// one step past the window.
pub fn cmd_baseline(config: &RunConfig, obs_path: &Path, out: &Path) -> CliResult<()> {
    let grid = GridSpec::new(config.n)?;
    let text = fs::read_to_string(obs_path).map_err(|e| CliError::file(obs_path, e.to_string()))?;
    let obs = parse_observations_csv(&text, grid, config.sigma2_eps).map_err(|e| CliError::at(obs_path, e))?;
    create_dir(out)?;
    let mut fits = String::from("t,d,v1_cells,v2_cells,sigma2_v,loglik\n");
    for w in obs.windows(3) {
        let fit = fit_window_ide(grid, w)?;
        let (mean, var) = vanilla_ide_forecast(&fit.params, grid, &fit.state)?;
        let sd = Field::new(grid, var.values().iter().map(|v| v.max(0.0).sqrt()).collect())?;
        let t = w[2].t + 1;
        save_sequence(&out.join(format!("vanilla_{t:04}.ideq")), &SequenceFile::identity(vec![mean, sd])?)?;
        let p = fit.params;
        let cells = config.n as f64;
        let _ = writeln!(fits, "{},{},{},{},{},{}", w[2].t, p.d, p.v1 * cells, p.v2 * cells, p.sigma2_v, fit.loglik);
    }
    write_text(&out.join("vanilla_fits.csv"), &fits)
}

/// One method's predictive distribution per time.
enum Predictive {
    Ensemble(Vec<Field>),
    Gaussian { mean: Field, var: Field },
}

fn gaussian_from_mean_sd(file: &SequenceFile, path: &Path) -> CliResult<Predictive> {
    if file.frames.len() != 2 {
        return Err(CliError::file(path, "expected a mean frame and an sd frame"));
    }
    let sd = &file.frames[1];
    Ok(Predictive::Gaussian {
        mean: file.frames[0].clone(),
        var: Field::new(sd.grid(), sd.values().iter().map(|s| s * s).collect())?,
    })
}

type Method = (String, Vec<(usize, Predictive)>);

fn collect_methods(pred: &Path) -> CliResult<Vec<Method>> {
    if pred.is_file() {
        let file = load_sequence(pred)?;
        let z = file.standardized()?;
        let name = pred.file_stem().and_then(|s| s.to_str()).unwrap_or("prediction").to_owned();
        let grid = file.grid();
        let times = z.into_iter().enumerate().map(|(t, f)| (t, Predictive::Gaussian { mean: f, var: Field::zeros(grid) })).collect();
        return Ok(vec![(name, times)]);
    }
    let mut methods = Vec::new();
    for (prefix, name) in [("forecast_", "cnn-ide"), ("filtered_", "persistence"), ("vanilla_", "vanilla-ide")] {
        let mut times = Vec::new();
        for path in sequence_files(pred, prefix)? {
            let name_str = path.file_name().and_then(|n| n.to_str()).unwrap_or("");
            if name_str.starts_with("forecast_mean_sd_") {
                continue;
            }
            let t = time_of(&path).ok_or_else(|| CliError::file(&path, "no time index in file name"))?;
            let file = load_sequence(&path)?;
            let p = match prefix {
                "forecast_" => Predictive::Ensemble(file.frames),
                _ => gaussian_from_mean_sd(&file, &path)?,
            };
            // persistence carries the filtered mean at t forward to t + 1
            times.push((if prefix == "filtered_" { t + 1 } else { t }, p));
        }
        if !times.is_empty() {
            methods.push((name.to_owned(), times));
        }
    }
    if methods.is_empty() {
        return Err(CliError::file(pred, "no forecast, filtered or vanilla files"));
    }
    Ok(methods)
}

fn score_times(p: &[&Predictive], truth: &[Field], mask: &[bool]) -> CliResult<ScoreReport> {
    if let Predictive::Ensemble(_) = p[0] {
        let members: Vec<Vec<Field>> = p
            .iter()
            .map(|x| match x {
                Predictive::Ensemble(m) => m.clone(),
                Predictive::Gaussian { .. } => unreachable!("one method has one kind"),
            })
            .collect();
        return Ok(score_ensemble(&members, truth, mask)?);
    }
    let (means, vars): (Vec<Field>, Vec<Field>) = p
        .iter()
        .map(|x| match x {
            Predictive::Gaussian { mean, var } => (mean.clone(), var.clone()),
            Predictive::Ensemble(_) => unreachable!("one method has one kind"),
        })
        .unzip();
    Ok(score_gaussian(&means, &vars, truth, mask)?)
}

/// Scores every method found under `preds` against the standardized truth, over the
/// times all methods share, on the interior mask. Writes `scores.csv` (per time and
/// aggregate) and `ratios.csv` (relative to the vanilla IDE when present, else
/// persistence, else the first method).
pub fn cmd_evaluate(config: &RunConfig, truth_path: &Path, preds: &[PathBuf], out: &Path) -> CliResult<()> {
    let truth = load_sequence(truth_path)?;
    ensure_grid(config, truth.grid(), truth_path)?;
    let truth = truth.standardized()?;
    let mask = interior_mask(truth[0].grid(), config.border)?;
    let mut methods: Vec<Method> = Vec::new();
    for p in preds {
        for (mut name, times) in collect_methods(p)? {
            let base = name.clone();
            let mut k = 2;
            while methods.iter().any(|m| m.0 == name) {
                name = format!("{base}-{k}");
                k += 1;
            }
            methods.push((name, times));
        }
    }
    if methods.is_empty() {
        return Err(CliError::config("--pred", "nothing to evaluate"));
    }
    let mut common: Vec<usize> = (0..truth.len()).collect();
    for (_, times) in &methods {
        common.retain(|t| times.iter().any(|(u, _)| u == t));
    }
    if common.is_empty() {
        return Err(CliError::file(truth_path, "methods share no forecast time with the truth sequence"));
    }
    let mut rows = Vec::new();
    let mut totals = Vec::new();
    for (name, times) in &methods {
        let at = |t: usize| &times.iter().find(|(u, _)| *u == t).expect("common time").1;
        for &t in &common {
            let report = score_times(&[at(t)], &truth[t..=t], &mask)?;
            rows.push(ScoreRow { method: name.clone(), zone: 0, t: Some(t), report });
        }
        let ps: Vec<&Predictive> = common.iter().map(|&t| at(t)).collect();
        let ts: Vec<Field> = common.iter().map(|&t| truth[t].clone()).collect();
        let report = score_times(&ps, &ts, &mask)?;
        rows.push(ScoreRow { method: name.clone(), zone: 0, t: None, report });
        totals.push((name.clone(), report));
    }
    let reference = ["vanilla-ide", "persistence"]
        .iter()
        .find_map(|r| totals.iter().find(|(n, _)| n == r))
        .unwrap_or(&totals[0]);
    let ratios = score_ratio_table(&totals, &reference.1)?;
    let mut text = String::from("method,reference,rmspe_ratio,crps_ratio\n");
    for r in &ratios {
        let _ = writeln!(text, "{},{},{},{}", r.method, reference.0, r.rmspe, r.crps);
    }
    create_dir(out)?;
    write_text(&out.join("scores.csv"), &score_csv(&rows))?;
    write_text(&out.join("ratios.csv"), &text)
}

/// Diffusion and flow the network reads off the last `τ` frames of a sequence file.
pub fn cmd_extract_flow(config: &RunConfig, checkpoint: &Path, window: &Path, out: &Path) -> CliResult<()> {
    let ck = load_checkpoint(checkpoint)?;
    let seq = load_sequence(window)?;
    ensure_grid(config, seq.grid(), window)?;
    let tau = ck.model.tau();
    let frames = seq.standardized()?;
    if frames.len() < tau {
        return Err(CliError::file(window, format!("need {tau} frames, file has {}", frames.len())));
    }
    let w = deepide::grid::FrameWindow::new(frames[frames.len() - tau..].to_vec())?;
    let theta = ck.model.pass(&w)?.theta;
    let grid = seq.grid();
    let cells = grid.n() as f64;
    let mut s = String::from("pixel_row,pixel_col,theta1,theta2,theta3,dx_cells,dy_cells,direction_deg,magnitude_cells\n");
    for i in 0..grid.len() {
        let (r, c) = grid.row_col(i);
        let (dx, dy) = (theta.theta2[i] * cells, theta.theta3[i] * cells);
        let deg = dy.atan2(dx).to_degrees().rem_euclid(360.0);
        let _ = writeln!(s, "{r},{c},{},{},{},{dx},{dy},{deg},{}", theta.theta1[i], theta.theta2[i], theta.theta3[i], dx.hypot(dy));
    }
    create_dir(out)?;
    write_text(&out.join("flow.csv"), &s)
}
