//! Acceptance gates at their pinned tolerances. Prints one PASS/FAIL line per gate and
//! exits nonzero when any gate fails.

use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use deepide::baseline::{fit_window_ide, kalman_filter, vanilla_ide_forecast};
use deepide::cnn::{cnn_forward, AdamConfig, CnnArchitecture, CnnParams};
use deepide::enkf::{init_ensemble, run_filter, FixedDynamics, TaperSpec};
use deepide::grid::{interior_mask, standardize, Field, FrameWindow, GridSpec};
use deepide::kernel::{build_rbf_basis, default_bandwidth, transition_matrix, ThetaFields};
use deepide::likelihood::{
    cond_loglik_term, fit_residual_matern, minibatch_grad, noise_covariance, pair_loglik_grad, residual_fields,
    sample_matern_fields, total_loglik, train_cnn, IdeModel, NoiseCovariance, NoiseParams, SequenceDataset,
    TrainingConfig,
};
use deepide::sim::{sample_observations, simulate, SimConfig, Simulation};
use deepide::verify::{coverage_90, crps_ensemble, interval_score_90, score_ensemble, score_gaussian};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn report(id: usize, name: &str, o: &Outcome, secs: f64) -> bool {
    println!("gate {id:02} {name}: {} ({}; {secs:.1}s)", if o.pass { "PASS" } else { "FAIL" }, o.detail);
    o.pass
}

fn grid(n: usize) -> GridSpec {
    GridSpec::new(n).unwrap()
}

fn random_field(g: GridSpec, rng: &mut ChaCha8Rng) -> Field {
    Field::from_fn(g, |_| rng.gen_range(-1.0..1.0)).unwrap()
}

/// 8×8, τ = 3, two small stages, r = 4, with heads large enough to matter.
fn toy_model(seed: u64) -> IdeModel {
    let arch = CnnArchitecture::new(3, 8, vec![2, 3], 3, 4).unwrap();
    let mut params = CnnParams::init(arch, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
    for name in ["head.A1", "head.A2"] {
        params.tensor_mut(name).unwrap().iter_mut().for_each(|v| *v = rng.gen_range(-0.5..0.5));
    }
    for name in ["stage1.pathway1.bias", "stage1.pathway2.bias", "stage2.pathway0.bias"] {
        params.tensor_mut(name).unwrap().iter_mut().for_each(|v| *v = rng.gen_range(0.0..0.2));
    }
    IdeModel::new(params, build_rbf_basis(grid(8), 4, default_bandwidth(4)).unwrap()).unwrap()
}

fn gradient_gate() -> Outcome {
    let model = toy_model(41);
    let g = grid(8);
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let frames: Vec<Field> = (0..4).map(|_| random_field(g, &mut rng)).collect();
    let ds = SequenceDataset::from_frames(&frames, 3, 0).unwrap();
    let pair = &ds.pairs[0];
    let noise = NoiseCovariance::isotropic(g.len(), 0.5).unwrap();
    let (_, grad) = pair_loglik_grad(&model, pair, &noise).unwrap();
    let pattern = |m: &IdeModel| cnn_forward(&pair.window, &m.params).unwrap().1.activation_pattern();
    let base = pattern(&model);
    // Richardson-extrapolated central differences; a larger step keeps cancellation error
    // well below the smallest gradient entries
    let h = 1e-3;
    let shifted = |i: usize, d: f64| {
        let mut m = model.clone();
        m.params.as_mut_slice()[i] += d;
        m
    };
    let (mut checked, mut skipped, mut worst) = (0, 0, 0.0f64);
    for i in 0..model.params.len() {
        let probes: Vec<IdeModel> = [h, -h, 0.5 * h, -0.5 * h].iter().map(|&d| shifted(i, d)).collect();
        if probes.iter().any(|m| pattern(m) != base) {
            skipped += 1;
            continue;
        }
        let ll: Vec<f64> =
            probes.iter().map(|m| cond_loglik_term(m, &pair.window, &pair.target, &noise).unwrap()).collect();
        let coarse = (ll[0] - ll[1]) / (2.0 * h);
        let fine = (ll[2] - ll[3]) / h;
        let fd = (4.0 * fine - coarse) / 3.0;
        let rel = (fd - grad.0[i]).abs() / fd.abs().max(grad.0[i].abs()).max(1e-8);
        worst = worst.max(rel);
        checked += 1;
    }
    outcome(
        worst < 1e-4 && checked > 0,
        format!("{checked} parameters checked, {skipped} kink-adjacent skipped, worst relative error {worst:.2e} (limit 1e-4)"),
    )
}

fn mass_gate() -> Outcome {
    let mut parts = Vec::new();
    let mut pass = true;
    for (n, tol) in [(32usize, 1e-2), (64, 1e-3)] {
        let g = grid(n);
        let k = transition_matrix(&ThetaFields::constant(g, 1e-4, 0.0, 0.0).unwrap(), g).unwrap();
        let sums = k.row_sums();
        let worst = (0..g.len())
            .filter(|&i| {
                let (r, c) = g.row_col(i);
                r >= 5 && c >= 5 && r < n - 5 && c < n - 5
            })
            .map(|i| (sums[i] - 1.0).abs())
            .fold(0.0, f64::max);
        pass &= worst <= tol;
        parts.push(format!("n={n}: max |row sum - 1| = {worst:.3e} (limit {tol:.0e})"));
    }
    outcome(pass, parts.join(", "))
}

fn unbiasedness_gate() -> Outcome {
    let model = toy_model(51);
    let g = grid(8);
    let mut rng = ChaCha8Rng::seed_from_u64(52);
    let frames: Vec<Field> = (0..9).map(|_| random_field(g, &mut rng)).collect();
    let ds = SequenceDataset::from_frames(&frames, 3, 0).unwrap();
    assert_eq!(ds.len(), 6);
    let noise = [NoiseCovariance::isotropic(g.len(), 0.3).unwrap()];
    let all: Vec<usize> = (0..6).collect();
    let full = total_loglik(&model, &ds, &all, &noise).unwrap();
    let (mut sum, mut count) = (0.0, 0);
    for i in 0..6 {
        for j in i + 1..6 {
            sum += minibatch_grad(&model, &ds, &[i, j], &noise).unwrap().0;
            count += 1;
        }
    }
    let avg = sum / count as f64;
    let rel = (avg - full).abs() / full.abs();
    outcome(rel <= 1e-10, format!("{count} subsets, average {avg:.12e} vs full {full:.12e}, relative gap {rel:.2e} (limit 1e-10)"))
}

fn enkf_oracle_gate() -> Outcome {
    let g = grid(8);
    let w = g.cell_width();
    let k = transition_matrix(&ThetaFields::constant(g, 4e-3, 0.5 * w, 0.25 * w).unwrap(), g).unwrap();
    let q_params = NoiseParams::new(0.1, 0.15).unwrap();
    let q = noise_covariance(g, q_params).unwrap();
    // truth from the same linear model, started from N(0, I)
    let mut rng = ChaCha8Rng::seed_from_u64(61);
    let normal = rand_distr::StandardNormal;
    let mut x = Field::from_fn(g, |_| rng.sample::<f64, _>(normal)).unwrap();
    let mut truth = Vec::new();
    for _ in 0..50 {
        truth.push(x.clone());
        let eta = q.sample(&mut rng);
        let next: Vec<f64> = k.apply(x.values()).iter().zip(&eta).map(|(a, b)| a + b).collect();
        x = Field::new(g, next).unwrap();
    }
    let obs = sample_observations(&truth, 64, 0.01, 62).unwrap();
    let exact = kalman_filter(
        &DVector::zeros(g.len()),
        &DMatrix::identity(g.len(), g.len()),
        k.matrix(),
        &deepide::likelihood::matern_matrix(g, q_params),
        &obs,
    )
    .unwrap();
    let prior_cov = NoiseCovariance::isotropic(g.len(), 1.0).unwrap();
    let prior = init_ensemble(&vec![Field::zeros(g); 2], 2, 1000, 1.0, &prior_cov, 0, 63).unwrap();
    let steps = run_filter(&prior, &obs, &FixedDynamics(k), Some(&q), None).unwrap();
    let (mut worst_mean, mut worst_var) = (0.0f64, 0.0f64);
    for (s, kf) in steps.iter().zip(&exact.filtered) {
        let m = s.filtered.mean();
        let sd = s.filtered.sd();
        let dm: f64 = m.values().iter().zip(kf.mean.iter()).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let nm = kf.mean.norm();
        let kv: Vec<f64> = (0..g.len()).map(|i| kf.cov[(i, i)]).collect();
        let dv: f64 = sd.values().iter().zip(&kv).map(|(a, b)| (a * a - b).powi(2)).sum::<f64>().sqrt();
        let nv: f64 = kv.iter().map(|v| v * v).sum::<f64>().sqrt();
        worst_mean = worst_mean.max(dm / nm);
        worst_var = worst_var.max(dv / nv);
    }
    outcome(
        worst_mean <= 0.05 && worst_var <= 0.15,
        format!("over 50 steps, worst relative mean error {worst_mean:.3} (limit 0.05), worst relative variance error {worst_var:.3} (limit 0.15)"),
    )
}

fn blob(seed: u64, still: bool, t_len: usize) -> Simulation {
    let cfg = SimConfig {
        n: 16,
        t_len,
        tau: 3,
        amplitude: if still { 0.0 } else { 1.0 },
        forcing_sigma2: 1e-4,
        forcing_rho: 0.1,
        seed,
        ..SimConfig::default()
    };
    simulate(&cfg).unwrap()
}

fn standardized(frames: &[Field]) -> Vec<Field> {
    frames.iter().map(|f| standardize(f).unwrap().0).collect()
}

/// Desk-scale network trained once on translating blobs, plus the pairs it never saw.
struct Trained {
    model: IdeModel,
    dataset: SequenceDataset,
    valid: Vec<usize>,
}

fn train_desk() -> Trained {
    let mut dataset = SequenceDataset::default();
    for s in 0..2000u64 {
        dataset.push_frames(&standardized(&blob(s, s % 5 == 0, 4).frames), 3, 0).unwrap();
    }
    let g = grid(16);
    let params = CnnParams::init(CnnArchitecture::desk(3), 1).unwrap();
    let model = IdeModel::new(params, build_rbf_basis(g, 16, default_bandwidth(16)).unwrap()).unwrap();
    let config = TrainingConfig { max_epochs: 8, seed: 3, adam: AdamConfig { lr: 3e-4, ..AdamConfig::default() }, ..TrainingConfig::default() };
    let (model, log) = train_cnn(model, &dataset, &config).unwrap();
    Trained { model, dataset, valid: log.valid_indices }
}

fn flow_gate(t: &Trained) -> Outcome {
    let g = grid(16);
    let cells = 16.0;
    let (mut hits, mut moving) = (0, 0);
    let (mut abs2, mut abs3, mut still) = (0.0, 0.0, 0);
    for s in 0..125u64 {
        let is_still = s % 5 == 0;
        let sim = blob(1_000_000 + s, is_still, 4);
        let z = standardized(&sim.frames);
        let theta = t.model.pass(&FrameWindow::new(z[..3].to_vec()).unwrap()).unwrap().theta;
        if is_still {
            abs2 += theta.theta2.iter().map(|v| v.abs()).sum::<f64>() / g.len() as f64 * cells;
            abs3 += theta.theta3.iter().map(|v| v.abs()).sum::<f64>() / g.len() as f64 * cells;
            still += 1;
            continue;
        }
        // newest window frame; the blob moves from here to the target frame
        let c = sim.centers[2][0];
        let i = g.index(((c.1 * cells) as usize).min(15), ((c.0 * cells) as usize).min(15));
        let (a, b) = (theta.theta2[i], theta.theta3[i]);
        let v = sim.velocities[0];
        let cos = (a * v.0 + b * v.1) / (a.hypot(b) * v.0.hypot(v.1));
        if cos >= std::f64::consts::FRAC_PI_4.cos() {
            hits += 1;
        }
        moving += 1;
    }
    let frac = hits as f64 / moving as f64;
    let (m2, m3) = (abs2 / still as f64, abs3 / still as f64);
    outcome(
        frac >= 0.8 && m2 < 0.1 && m3 < 0.1,
        format!(
            "{hits}/{moving} moving sequences within 45 degrees (need 80%), static mean |theta2| {m2:.3} and |theta3| {m3:.3} cells (limit 0.1)"
        ),
    )
}

fn forecast_gates(t: &Trained) -> (Outcome, Outcome) {
    let g = grid(16);
    let residuals = residual_fields(&t.model, &t.dataset, &t.valid).unwrap();
    let q = noise_covariance(g, fit_residual_matern(&residuals).unwrap().params).unwrap();
    let init = noise_covariance(g, NoiseParams::new(1.0, 0.1).unwrap()).unwrap();
    let mask = interior_mask(g, 2).unwrap();
    let taper = Some(TaperSpec::new(TaperSpec::DEFAULT_C).unwrap());
    let t_len = 12;
    let (mut members, mut truth, mut pm, mut pv, mut vm, mut vv) = (vec![], vec![], vec![], vec![], vec![], vec![]);
    for s in 0..6u64 {
        let z = standardized(&blob(5_000_000 + s, false, t_len).frames);
        let obs = sample_observations(&z, 64, 0.01, 77 + s).unwrap();
        let prior = init_ensemble(&vec![Field::zeros(g); 3], 3, 64, 1.0, &init, 0, 99 + s).unwrap();
        let steps = run_filter(&prior, &obs[..t_len - 1], &t.model, Some(&q), taper).unwrap();
        // score forecasts issued once the window holds three filtered frames
        for tt in 2..t_len - 1 {
            let step = &steps[tt];
            members.push(step.forecast.members.iter().map(|m| m.newest().clone()).collect::<Vec<_>>());
            truth.push(z[tt + 1].clone());
            pm.push(step.filtered.mean());
            pv.push(Field::new(g, step.filtered.sd().values().iter().map(|x| x * x).collect()).unwrap());
            let fit = fit_window_ide(g, &obs[tt - 2..=tt]).unwrap();
            let (m, v) = vanilla_ide_forecast(&fit.params, g, &fit.state).unwrap();
            vm.push(m);
            vv.push(v);
        }
    }
    let cnn = score_ensemble(&members, &truth, &mask).unwrap();
    let persistence = score_gaussian(&pm, &pv, &truth, &mask).unwrap();
    let vanilla = score_gaussian(&vm, &vv, &truth, &mask).unwrap();
    let ordering = outcome(
        cnn.rmspe < persistence.rmspe && cnn.rmspe <= 1.3 * vanilla.rmspe,
        format!(
            "RMSPE cnn-ide {:.4}, persistence {:.4}, vanilla-ide {:.4}; ratio to vanilla {:.3} (limit 1.3)",
            cnn.rmspe,
            persistence.rmspe,
            vanilla.rmspe,
            cnn.rmspe / vanilla.rmspe
        ),
    );
    let calibration = outcome(
        (0.80..=0.97).contains(&cnn.cov90),
        format!("Cov90 {:.3} over {} forecasts (band [0.80, 0.97])", cnn.cov90, truth.len()),
    );
    (ordering, calibration)
}

/// Exact integral of `(F(z) - 1{z >= y})²` over the breakpoints of the step functions.
fn crps_by_quadrature(members: &[f64], y: f64) -> f64 {
    let mut knots: Vec<f64> = members.to_vec();
    knots.push(y);
    knots.sort_by(f64::total_cmp);
    let n = members.len() as f64;
    let mut total = 0.0;
    for w in knots.windows(2) {
        let mid = 0.5 * (w[0] + w[1]);
        let f = members.iter().filter(|&&x| x <= mid).count() as f64 / n;
        let h = if mid >= y { 1.0 } else { 0.0 };
        total += (f - h).powi(2) * (w[1] - w[0]);
    }
    total
}

fn score_oracle_gate() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(81);
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let n = rng.gen_range(2..40);
        let members: Vec<f64> = (0..n).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let y = rng.gen_range(-4.0..4.0);
        worst = worst.max((crps_ensemble(&members, y) - crps_by_quadrature(&members, y)).abs());
    }
    // width 1 plus 20 times the miss distance
    let cases = [((0.0, 1.0, 0.5), 1.0), ((0.0, 1.0, -0.5), 11.0), ((-2.0, 2.0, 3.0), 24.0)];
    let is_ok = cases.iter().all(|&((l, u, y), want)| (interval_score_90(l, u, y).unwrap() - want).abs() < 1e-12);
    let g = grid(4);
    let lower = vec![Field::new(g, vec![0.0; 16]).unwrap()];
    let upper = vec![Field::new(g, vec![1.0; 16]).unwrap()];
    let truth = vec![Field::from_fn(g, |i| if i < 12 { 0.5 } else { 1.5 }).unwrap()];
    let full = coverage_90(&lower, &upper, &truth, &[true; 16]).unwrap();
    let first_row = coverage_90(&lower, &upper, &truth, &(0..16).map(|i| i < 4).collect::<Vec<_>>()).unwrap();
    let last_row = coverage_90(&lower, &upper, &truth, &(0..16).map(|i| i >= 12).collect::<Vec<_>>()).unwrap();
    let cov_ok = full == 0.75 && first_row == 1.0 && last_row == 0.0;
    outcome(
        worst < 1e-6 && is_ok && cov_ok,
        format!("CRPS worst gap {worst:.2e} (limit 1e-6) on 20 ensembles, interval score cases {}, coverage cases {}", ok(is_ok), ok(cov_ok)),
    )
}

fn ok(b: bool) -> &'static str {
    if b {
        "match"
    } else {
        "MISMATCH"
    }
}

fn recovery_gate() -> Outcome {
    let fields = sample_matern_fields(grid(16), NoiseParams::new(0.01, 0.04).unwrap(), 200, 91).unwrap();
    let fit = fit_residual_matern(&fields).unwrap();
    let (es, er) = (fit.params.sigma2 / 0.01 - 1.0, fit.params.rho / 0.04 - 1.0);
    outcome(
        es.abs() <= 0.2 && er.abs() <= 0.2,
        format!("sigma2 {:.5} ({:+.1}%), rho {:.5} ({:+.1}%), limit 20%", fit.params.sigma2, 100.0 * es, fit.params.rho, 100.0 * er),
    )
}

const PIPELINE_CONFIG: &str = "\
grid.n = 16
model.tau = 3
train.max_epochs = 2
train.lr = 3e-4
enkf.n_members = 16
sim.sequences = 40
sim.test_frames = 6
";

fn run_pipeline(root: &Path) -> Result<(), String> {
    let bin = env!("CARGO_BIN_EXE_deepide");
    let config = root.join("run.conf");
    std::fs::write(&config, PIPELINE_CONFIG).map_err(|e| e.to_string())?;
    let c = config.to_str().unwrap();
    let p = |s: &str| root.join(s).to_str().unwrap().to_owned();
    let stages: Vec<Vec<String>> = vec![
        vec!["simulate".into(), "--out".into(), p("sim")],
        vec!["train".into(), "--data".into(), p("sim/train"), "--out".into(), p("train")],
        vec!["fit-residuals".into(), "--checkpoint".into(), p("train/checkpoint.idec"), "--data".into(), p("sim/train"), "--out".into(), p("fit")],
        vec!["filter".into(), "--checkpoint".into(), p("fit/checkpoint.idec"), "--obs".into(), p("sim/test/obs.csv"), "--out".into(), p("filter")],
        vec!["forecast".into(), "--checkpoint".into(), p("fit/checkpoint.idec"), "--state".into(), p("filter/state.iden"), "--steps".into(), "2".into(), "--out".into(), p("forecast")],
        vec!["baseline".into(), "--obs".into(), p("sim/test/obs.csv"), "--out".into(), p("vanilla")],
        vec!["evaluate".into(), "--truth".into(), p("sim/test/truth.ideq"), "--pred".into(), p("filter"), "--pred".into(), p("vanilla"), "--out".into(), p("eval")],
        vec!["extract-flow".into(), "--checkpoint".into(), p("fit/checkpoint.idec"), "--window".into(), p("sim/test/truth.ideq"), "--out".into(), p("flow")],
    ];
    for args in stages {
        let out = Command::new(bin).args(&args).args(["--config", c, "--seed", "11"]).output().map_err(|e| e.to_string())?;
        if !out.status.success() {
            return Err(format!("{} failed: {}", args[0], String::from_utf8_lossy(&out.stderr).trim()));
        }
    }
    Ok(())
}

fn files_under(root: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in std::fs::read_dir(&dir).unwrap() {
            let path = e.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.push(path.strip_prefix(root).unwrap().to_path_buf());
            }
        }
    }
    out.sort();
    out
}

fn determinism_gate() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for root in [&a, &b] {
        std::fs::create_dir_all(root).unwrap();
        if let Err(e) = run_pipeline(root) {
            return outcome(false, e);
        }
    }
    let (fa, fb) = (files_under(&a), files_under(&b));
    if fa != fb {
        return outcome(false, "runs produced different file sets".into());
    }
    let differing: Vec<String> = fa
        .iter()
        .filter(|f| std::fs::read(a.join(f)).unwrap() != std::fs::read(b.join(f)).unwrap())
        .map(|f| f.display().to_string())
        .collect();
    outcome(
        differing.is_empty(),
        if differing.is_empty() {
            format!("{} output files byte-identical across two runs", fa.len())
        } else {
            format!("{} of {} files differ, first {}", differing.len(), fa.len(), differing[0])
        },
    )
}

fn timed(id: usize, name: &str, f: &dyn Fn() -> Outcome) -> bool {
    let start = Instant::now();
    let o = f();
    report(id, name, &o, start.elapsed().as_secs_f64())
}

fn main() {
    let mut all = true;
    all &= timed(1, "gradient finite differences", &gradient_gate);
    all &= timed(2, "kernel mass", &mass_gate);
    all &= timed(3, "minibatch unbiasedness", &unbiasedness_gate);
    all &= timed(4, "EnKF vs exact Kalman", &enkf_oracle_gate);
    let start = Instant::now();
    let trained = train_desk();
    println!("trained desk-scale network on {} pairs in {:.1}s", trained.dataset.len(), start.elapsed().as_secs_f64());
    all &= timed(5, "flow recovery", &|| flow_gate(&trained));
    let start = Instant::now();
    let (ordering, calibration) = forecast_gates(&trained);
    let secs = start.elapsed().as_secs_f64();
    all &= report(6, "forecast ordering", &ordering, secs);
    all &= report(7, "forecast calibration", &calibration, secs);
    all &= timed(8, "score oracles", &score_oracle_gate);
    all &= timed(9, "Matern recovery", &recovery_gate);
    all &= timed(10, "CLI determinism", &determinism_gate);
    if !all {
        println!("acceptance: at least one gate failed");
        std::process::exit(1);
    }
    println!("acceptance: all gates passed");
}
