//! Forecast verification scores over masked pixels and times.

use crate::error::{Error, Result};
use crate::grid::Field;

/// Neumaier-compensated running sum.
#[derive(Debug, Clone, Copy, Default)]
pub struct CompensatedSum {
    sum: f64,
    comp: f64,
}

impl CompensatedSum {
    pub fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.comp += (self.sum - t) + x;
        } else {
            self.comp += (x - t) + self.sum;
        }
        self.sum = t;
    }

    pub fn value(&self) -> f64 {
        self.sum + self.comp
    }
}

pub fn compensated_sum<I: IntoIterator<Item = f64>>(xs: I) -> f64 {
    let mut s = CompensatedSum::default();
    xs.into_iter().for_each(|x| s.add(x));
    s.value()
}

fn check_aligned(a: &[Field], b: &[Field], mask: &[bool]) -> Result<usize> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::DimensionMismatch(format!("{} predictions for {} truths", a.len(), b.len())));
    }
    let grid = b[0].grid();
    if a.iter().chain(b).any(|f| f.grid() != grid) || mask.len() != grid.len() {
        return Err(Error::DimensionMismatch("fields and mask must share one grid".into()));
    }
    let count = mask.iter().filter(|&&m| m).count();
    if count == 0 {
        return Err(Error::EmptyMask);
    }
    Ok(count)
}

/// Mean of `f(t, pixel)` over all times and masked pixels.
fn masked_mean(times: usize, mask: &[bool], mut f: impl FnMut(usize, usize) -> f64) -> f64 {
    let mut s = CompensatedSum::default();
    let mut n = 0usize;
    for t in 0..times {
        for (i, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
            s.add(f(t, i));
            n += 1;
        }
    }
    s.value() / n as f64
}

pub fn rmspe(pred: &[Field], truth: &[Field], mask: &[bool]) -> Result<f64> {
    check_aligned(pred, truth, mask)?;
    Ok(masked_mean(truth.len(), mask, |t, i| (pred[t].values()[i] - truth[t].values()[i]).powi(2)).sqrt())
}

/// Empirical-CDF CRPS `(1/N)Σ|x_i − y| − (1/(2N²))ΣΣ|x_i − x_j|`.
pub fn crps_ensemble(members: &[f64], y: f64) -> f64 {
    assert!(members.len() >= 2, "CRPS needs at least two members");
    let n = members.len() as f64;
    let mut sorted = members.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mae = compensated_sum(sorted.iter().map(|x| (x - y).abs())) / n;
    // ΣΣ|x_i − x_j| = 2 Σ_i (2i − N − 1) x_(i), i 1-based
    let spread = 2.0 * compensated_sum(sorted.iter().enumerate().map(|(i, x)| (2.0 * (i + 1) as f64 - n - 1.0) * x));
    mae - spread / (2.0 * n * n)
}

/// CRPS of a Gaussian forecast `N(mu, sigma²)`.
pub fn crps_gaussian(mu: f64, sigma: f64, y: f64) -> f64 {
    if sigma <= 0.0 {
        return (y - mu).abs();
    }
    let z = (y - mu) / sigma;
    let pdf = (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt();
    sigma * (z * (2.0 * normal_cdf(z) - 1.0) + 2.0 * pdf - 1.0 / std::f64::consts::PI.sqrt())
}

fn normal_cdf(z: f64) -> f64 {
    0.5 * erfc(-z / std::f64::consts::SQRT_2)
}

// Complementary error function, Numerical Recipes Chebyshev fit (|rel err| < 1.2e-7).
fn erfc(x: f64) -> f64 {
    let z = x.abs();
    let t = 1.0 / (1.0 + 0.5 * z);
    let r = t * (-z * z - 1.26551223
        + t * (1.00002368
            + t * (0.37409196
                + t * (0.09678418
                    + t * (-0.18628806
                        + t * (0.27886807 + t * (-1.13520398 + t * (1.48851587 + t * (-0.82215223 + t * 0.17087277)))))))))
        .exp();
    if x >= 0.0 {
        r
    } else {
        2.0 - r
    }
}

/// `z_{0.95}` of the standard normal.
pub const Z95: f64 = 1.644_853_626_951_472_2;

/// Sample quantile by linear interpolation between order statistics at `(N − 1) p`.
pub fn quantile(values: &[f64], p: f64) -> f64 {
    assert!(!values.is_empty() && (0.0..=1.0).contains(&p));
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    quantile_sorted(&v, p)
}

pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// 90% interval score of one interval.
pub fn interval_score_90(lower: f64, upper: f64, truth: f64) -> Result<f64> {
    if lower > upper {
        return Err(Error::InvertedInterval { lower, upper });
    }
    let alpha = 0.1;
    let mut s = upper - lower;
    if truth < lower {
        s += 2.0 / alpha * (lower - truth);
    }
    if truth > upper {
        s += 2.0 / alpha * (truth - upper);
    }
    Ok(s)
}

/// Mean 90% interval score over masked pixels and times.
pub fn mean_interval_score_90(lower: &[Field], upper: &[Field], truth: &[Field], mask: &[bool]) -> Result<f64> {
    check_aligned(lower, truth, mask)?;
    check_aligned(upper, truth, mask)?;
    for (l, u) in lower.iter().zip(upper) {
        for (&a, &b) in l.values().iter().zip(u.values()) {
            if a > b {
                return Err(Error::InvertedInterval { lower: a, upper: b });
            }
        }
    }
    Ok(masked_mean(truth.len(), mask, |t, i| {
        interval_score_90(lower[t].values()[i], upper[t].values()[i], truth[t].values()[i]).expect("checked above")
    }))
}

/// Fraction of masked pixels and times whose truth lies in `[lower, upper]`.
pub fn coverage_90(lower: &[Field], upper: &[Field], truth: &[Field], mask: &[bool]) -> Result<f64> {
    check_aligned(lower, truth, mask)?;
    check_aligned(upper, truth, mask)?;
    Ok(masked_mean(truth.len(), mask, |t, i| {
        let y = truth[t].values()[i];
        ((lower[t].values()[i]..=upper[t].values()[i]).contains(&y)) as u8 as f64
    }))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoreReport {
    pub rmspe: f64,
    pub crps: f64,
    pub is90: f64,
    pub cov90: f64,
    /// Masked pixels per time.
    pub pixels: usize,
    pub times: usize,
}

/// Scores of ensemble forecasts; `members[t]` holds the member fields forecast for `truth[t]`.
/// The point forecast is the ensemble mean and the interval spans the 5% and 95% quantiles.
pub fn score_ensemble(members: &[Vec<Field>], truth: &[Field], mask: &[bool]) -> Result<ScoreReport> {
    if members.len() != truth.len() {
        return Err(Error::DimensionMismatch("one member set per truth field".into()));
    }
    let grid = truth.first().ok_or(Error::EmptyMask)?.grid();
    let mut means = Vec::with_capacity(truth.len());
    let mut lower = Vec::with_capacity(truth.len());
    let mut upper = Vec::with_capacity(truth.len());
    let mut crps = Vec::with_capacity(truth.len());
    for (ms, y) in members.iter().zip(truth) {
        if ms.len() < 2 || ms.iter().any(|m| m.grid() != grid) {
            return Err(Error::DimensionMismatch("each forecast needs at least two members on the truth grid".into()));
        }
        let n2 = grid.len();
        let (mut mu, mut lo, mut hi, mut cr) = (vec![0.0; n2], vec![0.0; n2], vec![0.0; n2], vec![0.0; n2]);
        for i in 0..n2 {
            let mut v: Vec<f64> = ms.iter().map(|m| m.values()[i]).collect();
            cr[i] = crps_ensemble(&v, y.values()[i]);
            v.sort_by(f64::total_cmp);
            mu[i] = compensated_sum(v.iter().copied()) / v.len() as f64;
            lo[i] = quantile_sorted(&v, 0.05);
            hi[i] = quantile_sorted(&v, 0.95);
        }
        means.push(Field::new(grid, mu)?);
        lower.push(Field::new(grid, lo)?);
        upper.push(Field::new(grid, hi)?);
        crps.push(cr);
    }
    let pixels = check_aligned(&means, truth, mask)?;
    Ok(ScoreReport {
        rmspe: rmspe(&means, truth, mask)?,
        crps: masked_mean(truth.len(), mask, |t, i| crps[t][i]),
        is90: mean_interval_score_90(&lower, &upper, truth, mask)?,
        cov90: coverage_90(&lower, &upper, truth, mask)?,
        pixels,
        times: truth.len(),
    })
}

/// Scores of Gaussian forecasts given per-pixel means and variances.
pub fn score_gaussian(means: &[Field], vars: &[Field], truth: &[Field], mask: &[bool]) -> Result<ScoreReport> {
    let pixels = check_aligned(means, truth, mask)?;
    check_aligned(vars, truth, mask)?;
    let sd: Vec<Vec<f64>> = vars.iter().map(|v| v.values().iter().map(|x| x.max(0.0).sqrt()).collect()).collect();
    let lower: Vec<Field> = means
        .iter()
        .zip(&sd)
        .map(|(m, s)| Field::new(m.grid(), m.values().iter().zip(s).map(|(a, b)| a - Z95 * b).collect()))
        .collect::<Result<_>>()?;
    let upper: Vec<Field> = means
        .iter()
        .zip(&sd)
        .map(|(m, s)| Field::new(m.grid(), m.values().iter().zip(s).map(|(a, b)| a + Z95 * b).collect()))
        .collect::<Result<_>>()?;
    Ok(ScoreReport {
        rmspe: rmspe(means, truth, mask)?,
        crps: masked_mean(truth.len(), mask, |t, i| crps_gaussian(means[t].values()[i], sd[t][i], truth[t].values()[i])),
        is90: mean_interval_score_90(&lower, &upper, truth, mask)?,
        cov90: coverage_90(&lower, &upper, truth, mask)?,
        pixels,
        times: truth.len(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreRatio {
    pub method: String,
    pub rmspe: f64,
    pub crps: f64,
}

/// RMSPE and CRPS of each method divided by the reference's.
pub fn score_ratio_table(methods: &[(String, ScoreReport)], reference: &ScoreReport) -> Result<Vec<ScoreRatio>> {
    methods
        .iter()
        .map(|(name, r)| {
            if r.pixels != reference.pixels || r.times != reference.times {
                return Err(Error::MismatchedCoverage(format!(
                    "{name} covers {}×{} pixel-times, reference {}×{}",
                    r.pixels, r.times, reference.pixels, reference.times
                )));
            }
            Ok(ScoreRatio { method: name.clone(), rmspe: r.rmspe / reference.rmspe, crps: r.crps / reference.crps })
        })
        .collect()
}
