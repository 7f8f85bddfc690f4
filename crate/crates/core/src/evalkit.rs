//! Evaluation math: MSE, Spearman ρ, the equivalence-class variance bound,
//! variance decomposition, explained-variance and McFadden R², residual
//! histograms.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::infer::{PredictionResult, PredictionRow};
use crate::synthgen::{project_text, FeatureMask, Oracle};

fn same_len(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::Metric(format!("length mismatch: {a} vs {b}")));
    }
    Ok(())
}

pub fn mse(preds: &[f64], ys: &[f64]) -> Result<f64> {
    same_len(preds.len(), ys.len())?;
    if preds.is_empty() {
        return Err(Error::Metric("mse of empty input".into()));
    }
    Ok(preds.iter().zip(ys).map(|(p, y)| (p - y) * (p - y)).sum::<f64>() / preds.len() as f64)
}

/// 1-based ranks; ties share the average of their positions.
pub fn average_ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut ranks = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

fn pearson(a: &[f64], b: &[f64]) -> Result<f64> {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        return Err(Error::Metric("correlation undefined for a constant input".into()));
    }
    Ok((sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0))
}

pub fn spearman(preds: &[f64], ys: &[f64]) -> Result<f64> {
    same_len(preds.len(), ys.len())?;
    if preds.len() < 2 {
        return Err(Error::Metric("spearman needs at least 2 points".into()));
    }
    pearson(&average_ranks(preds), &average_ranks(ys))
}

fn pop_var(v: &[f64]) -> f64 {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Weighting {
    /// Plain mean over equivalence classes.
    #[default]
    Unweighted,
    /// Classes weighted by their record counts.
    RecordWeighted,
}

/// Groups values by key, preserving first-seen class order.
fn classes<K: std::hash::Hash + Eq>(keys: impl IntoIterator<Item = K>, vals: &[f64]) -> Vec<Vec<f64>> {
    let mut slot: HashMap<K, usize> = HashMap::new();
    let mut out: Vec<Vec<f64>> = Vec::new();
    for (k, &v) in keys.into_iter().zip(vals) {
        let next = slot.len();
        let i = *slot.entry(k).or_insert(next);
        if i == out.len() {
            out.push(Vec::new());
        }
        out[i].push(v);
    }
    out
}

fn class_mean_variance(groups: &[Vec<f64>], weighting: Weighting) -> f64 {
    match weighting {
        Weighting::Unweighted => groups.iter().map(|g| pop_var(g)).sum::<f64>() / groups.len() as f64,
        Weighting::RecordWeighted => {
            let n: usize = groups.iter().map(Vec::len).sum();
            groups.iter().map(|g| pop_var(g) * g.len() as f64).sum::<f64>() / n as f64
        }
    }
}

/// Mean within-class population variance of `ys`, classes being the
/// distinct values of `phi(x)`.
pub fn total_variance(xs: &[&str], ys: &[f64], phi: &dyn Fn(&str) -> String) -> Result<f64> {
    total_variance_with(xs, ys, phi, Weighting::Unweighted)
}

pub fn total_variance_with(
    xs: &[&str],
    ys: &[f64],
    phi: &dyn Fn(&str) -> String,
    weighting: Weighting,
) -> Result<f64> {
    same_len(xs.len(), ys.len())?;
    if xs.is_empty() {
        return Err(Error::Metric("total variance of empty input".into()));
    }
    let groups = classes(xs.iter().map(|x| phi(x)), ys);
    Ok(class_mean_variance(&groups, weighting))
}

/// Projector onto the feature blocks selected by `mask`.
pub fn mask_projector(mask: FeatureMask) -> impl Fn(&str) -> String {
    move |x| project_text(x, mask)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VarianceDecomposition {
    /// Mean oracle variance over records.
    pub aleatoric: f64,
    /// Class-averaged variance of the oracle means.
    pub epistemic: f64,
    /// Empirical class-averaged variance of y.
    pub total: f64,
}

impl VarianceDecomposition {
    /// `total − aleatoric`: how far the bound sits above pure noise.
    pub fn margin(&self) -> f64 {
        self.total - self.aleatoric
    }
}

pub fn variance_decomposition(
    oracle: &Oracle<'_>,
    xs: &[&str],
    ys: &[f64],
    phi: &dyn Fn(&str) -> String,
) -> Result<VarianceDecomposition> {
    same_len(xs.len(), ys.len())?;
    if xs.is_empty() {
        return Err(Error::Metric("variance decomposition of empty input".into()));
    }
    let mut means = Vec::with_capacity(xs.len());
    let mut vars = Vec::with_capacity(xs.len());
    for x in xs {
        means.push(oracle.mean(x)?);
        vars.push(oracle.variance(x)?);
    }
    let keys: Vec<String> = xs.iter().map(|x| phi(x)).collect();
    let w = Weighting::Unweighted;
    Ok(VarianceDecomposition {
        aleatoric: vars.iter().sum::<f64>() / vars.len() as f64,
        epistemic: class_mean_variance(&classes(keys.iter(), &means), w),
        total: class_mean_variance(&classes(keys.iter(), ys), w),
    })
}

pub fn r2_ev(mse_model: f64, mse_null: f64) -> Result<f64> {
    if !(mse_null > 0.0) {
        return Err(Error::Metric(format!("null MSE must be positive, got {mse_null}")));
    }
    Ok(1.0 - mse_model / mse_null)
}

pub fn r2_nll(nll_model: f64, nll_null: f64) -> Result<f64> {
    if !(nll_null > 0.0) {
        return Err(Error::Metric(format!("null NLL must be positive, got {nll_null}")));
    }
    Ok(1.0 - nll_model / nll_null)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistBin {
    pub bin_low: f64,
    pub bin_high: f64,
    pub count: usize,
}

/// Squared errors binned into `log_bins` log-spaced bins between the
/// smallest and largest positive value; the first row is the underflow bin
/// `[0, smallest)` holding exact zeros.
pub fn residual_histogram(preds: &[f64], ys: &[f64], log_bins: usize) -> Result<Vec<HistBin>> {
    same_len(preds.len(), ys.len())?;
    if log_bins == 0 {
        return Err(Error::Metric("log_bins must be >= 1".into()));
    }
    let sq: Vec<f64> = preds.iter().zip(ys).map(|(p, y)| (p - y) * (p - y)).collect();
    let pos: Vec<f64> = sq.iter().copied().filter(|&e| e > 0.0).collect();
    let zeros = sq.len() - pos.len();
    if pos.is_empty() {
        return Ok(vec![HistBin { bin_low: 0.0, bin_high: 0.0, count: zeros }]);
    }
    let lo = pos.iter().copied().fold(f64::INFINITY, f64::min).log10();
    let hi = pos.iter().copied().fold(0.0, f64::max).log10();
    let width = if hi > lo { (hi - lo) / log_bins as f64 } else { 1.0 };
    let edge = |i: usize| 10f64.powf(lo + width * i as f64);
    let mut bins = vec![HistBin { bin_low: 0.0, bin_high: edge(0), count: zeros }];
    bins.extend((0..log_bins).map(|i| HistBin { bin_low: edge(i), bin_high: edge(i + 1), count: 0 }));
    for e in pos {
        let k = (((e.log10() - lo) / width).floor() as usize).min(log_bins - 1);
        bins[k + 1].count += 1;
    }
    Ok(bins)
}

/// Spearman ρ between predictive variance and squared residual of the
/// mean prediction.
pub fn uncertainty_correlation(results: &[PredictionResult], ys: &[f64]) -> Result<f64> {
    same_len(results.len(), ys.len())?;
    if results.len() < 3 {
        return Err(Error::Metric("uncertainty correlation needs at least 3 results".into()));
    }
    let var: Vec<f64> = results.iter().map(|r| r.sample_variance).collect();
    let sq: Vec<f64> = results.iter().zip(ys).map(|(r, y)| (r.point_mean - y).powi(2)).collect();
    spearman(&var, &sq)
}

/// Same statistic from prediction rows.
pub fn uncertainty_correlation_rows(rows: &[PredictionRow]) -> Result<f64> {
    if rows.len() < 3 {
        return Err(Error::Metric("uncertainty correlation needs at least 3 results".into()));
    }
    let var: Vec<f64> = rows.iter().map(|r| r.sample_variance).collect();
    let sq: Vec<f64> = rows.iter().map(|r| (r.point_mean - r.y_true).powi(2)).collect();
    spearman(&var, &sq)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub task_id: String,
    pub n_test: usize,
    pub mse: f64,
    pub spearman_rho: f64,
    pub tv_null: f64,
    pub tv_hyperparams: f64,
    pub tv_full: f64,
    pub r2_ev: f64,
    /// NaN when no null-model NLL is supplied.
    pub r2_nll: f64,
    pub mean_nll: f64,
}

pub const REPORT_HEADER: [&str; 10] =
    ["task_id", "n_test", "mse", "spearman_rho", "tv_null", "tv_hyperparams", "tv_full", "r2_ev", "r2_nll", "mean_nll"];

impl EvalReport {
    /// Total variance per mask name, as stored in the report columns.
    pub fn total_variance_by_mask(&self) -> Vec<(&'static str, f64)> {
        vec![("null", self.tv_null), ("hyperparams", self.tv_hyperparams), ("full", self.tv_full)]
    }
}

/// Scores one task's predictions. `xs[i]` is the input of `rows[i]`.
/// MSE uses the sample mean, Spearman the sample median; the null MSE is
/// the population variance of the test targets.
pub fn evaluate_predictions(rows: &[PredictionRow], xs: &[&str], nll_null: Option<f64>) -> Result<EvalReport> {
    same_len(rows.len(), xs.len())?;
    if rows.is_empty() {
        return Err(Error::Metric("no predictions to evaluate".into()));
    }
    let task_id = rows[0].task_id.clone();
    if let Some(r) = rows.iter().find(|r| r.task_id != task_id) {
        return Err(Error::Metric(format!("mixed tasks {task_id} and {}", r.task_id)));
    }
    let ys: Vec<f64> = rows.iter().map(|r| r.y_true).collect();
    let means: Vec<f64> = rows.iter().map(|r| r.point_mean).collect();
    let medians: Vec<f64> = rows.iter().map(|r| r.point_median).collect();
    let m = mse(&means, &ys)?;
    let tv_null = total_variance(xs, &ys, &mask_projector(FeatureMask::NULL))?;
    let mean_nll = rows.iter().map(|r| r.nll).sum::<f64>() / rows.len() as f64;
    Ok(EvalReport {
        task_id,
        n_test: rows.len(),
        mse: m,
        spearman_rho: spearman(&medians, &ys)?,
        tv_null,
        tv_hyperparams: total_variance(xs, &ys, &mask_projector(FeatureMask::HYPERPARAMS))?,
        tv_full: total_variance(xs, &ys, &mask_projector(FeatureMask::FULL))?,
        r2_ev: r2_ev(m, tv_null)?,
        r2_nll: match nll_null {
            Some(n) => r2_nll(mean_nll, n)?,
            None => f64::NAN,
        },
        mean_nll,
    })
}

pub fn write_reports(path: &Path, reports: &[EvalReport]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    if reports.is_empty() {
        w.write_record(REPORT_HEADER)?;
    }
    for r in reports {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_reports(path: &Path) -> Result<Vec<EvalReport>> {
    let mut rdr = csv::Reader::from_path(path)?;
    let headers: Vec<String> = rdr.headers()?.iter().map(String::from).collect();
    if headers != REPORT_HEADER {
        return Err(Error::Dataset(format!("{}: unexpected report header", path.display())));
    }
    rdr.deserialize().map(|r| r.map_err(Error::from)).collect()
}

pub fn write_histogram(path: &Path, bins: &[HistBin]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    if bins.is_empty() {
        w.write_record(["bin_low", "bin_high", "count"])?;
    }
    for b in bins {
        w.serialize(b)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests;
