//! Synthetic cluster-workload generator with a fully known p(y|x).
//!
//! A task is a (cell, month) pair. Each record is a sampled cluster state
//! rendered in a YAML-like layout together with a metric drawn from
//!
//! ```text
//! y = base + A·sin(2π·hour/24 + φ) + W·weekday(day) + Σ large-user effects
//!       + Σ hyper effects + platform-mix term + N(0, σ²)
//!       [± gap/2 inside the bimodal window]
//! ```
//!
//! Every component's variance is fixed as a fraction of the task's
//! `spread` (the variance of y), so oracle means and variances are exact.
//! Cells share a global effect structure plus a cell-specific perturbation.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::str::FromStr;

use chrono::{Datelike, Duration, NaiveDate, NaiveDateTime, Timelike};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PLATFORMS: [&str; 6] = ["machineA", "machineB", "machineC", "machineD", "machineE", "machineF"];
const USERS: [&str; 10] = [
    "ads_fetch", "webserver", "storage_1", "storage_2", "routing", "analytics", "monitoring", "ecommerce",
    "batch_etl", "model_serving",
];
const JOBS: [(&str, &str); 6] = [
    ("leaf", "bun"),
    ("cent", "rock"),
    ("pond", "green"),
    ("data_pipeline", "data_pipeline_workers"),
    ("indexer", "search"),
    ("trainer", "ml"),
];
const LOCATIONS: [&str; 6] = ["us-east1", "us-west2", "europe-west4", "asia-east1", "us-central1", "europe-north1"];
const YEAR: i32 = 2024;
const SLOT_MINUTES: i64 = 5;
const SLOTS_PER_DAY: i64 = 24 * 60 / SLOT_MINUTES;
const TOP_STD: f64 = 250.0;
const STD_DECAY: f64 = 0.88;
const BASE_LEVEL: f64 = 2000.0;
const CELL_MIX: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Month {
    #[serde(rename = "JUN")]
    Jun,
    #[serde(rename = "NOV")]
    Nov,
}

impl Month {
    pub fn number(self) -> u32 {
        match self {
            Month::Jun => 6,
            Month::Nov => 11,
        }
    }

    fn first_day(self) -> NaiveDate {
        NaiveDate::from_ymd_opt(YEAR, self.number(), 1).expect("valid month")
    }

    pub fn days(self) -> u32 {
        let next = if self.number() == 12 {
            NaiveDate::from_ymd_opt(YEAR + 1, 1, 1)
        } else {
            NaiveDate::from_ymd_opt(YEAR, self.number() + 1, 1)
        };
        (next.expect("valid month") - self.first_day()).num_days() as u32
    }
}

impl fmt::Display for Month {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Month::Jun => "JUN",
            Month::Nov => "NOV",
        })
    }
}

impl FromStr for Month {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "JUN" => Ok(Month::Jun),
            "NOV" => Ok(Month::Nov),
            _ => Err(Error::Config(format!("unknown month {s:?} (expected JUN or NOV)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Profile {
    LowNoise,
    Noisy,
    Bimodal,
}

/// Fractions of `spread` carried by each component.
struct Budget {
    daily: f64,
    weekly: f64,
    users: f64,
    hyper: f64,
    platform: f64,
    noise: f64,
    bimodal: f64,
}

impl Profile {
    fn budget(self) -> Budget {
        match self {
            Profile::LowNoise => {
                Budget { daily: 0.55, weekly: 0.05, users: 0.30, hyper: 0.04, platform: 0.01, noise: 0.05, bimodal: 0.0 }
            }
            Profile::Noisy => {
                Budget { daily: 0.30, weekly: 0.05, users: 0.15, hyper: 0.10, platform: 0.05, noise: 0.35, bimodal: 0.0 }
            }
            Profile::Bimodal => {
                Budget { daily: 0.25, weekly: 0.03, users: 0.08, hyper: 0.05, platform: 0.02, noise: 0.17, bimodal: 0.40 }
            }
        }
    }
}

impl fmt::Display for Profile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Profile::LowNoise => "low_noise",
            Profile::Noisy => "noisy",
            Profile::Bimodal => "bimodal",
        })
    }
}

impl FromStr for Profile {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "low_noise" => Ok(Profile::LowNoise),
            "noisy" => Ok(Profile::Noisy),
            "bimodal" => Ok(Profile::Bimodal),
            _ => Err(Error::Config(format!("unknown profile {s:?}"))),
        }
    }
}

/// Scheduler hyperparameter domain; identical for every task.
#[derive(Debug, Clone, PartialEq)]
pub enum Domain {
    Categorical(Vec<String>),
    /// Evenly spaced grid `lo, lo+step, …, hi`.
    Numeric { lo: f64, hi: f64, step: f64 },
}

impl Domain {
    fn levels(&self) -> usize {
        match self {
            Domain::Categorical(c) => c.len(),
            Domain::Numeric { .. } => 1,
        }
    }

    fn grid(&self) -> Vec<f64> {
        match self {
            Domain::Categorical(_) => Vec::new(),
            Domain::Numeric { lo, hi, step } => {
                let n = ((hi - lo) / step).round() as usize;
                (0..=n).map(|i| quantize(lo + step * i as f64)).collect()
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HyperParam {
    pub name: String,
    pub domain: Domain,
}

pub fn scheduler_hyperparams() -> Vec<HyperParam> {
    let cat = |xs: &[&str]| Domain::Categorical(xs.iter().map(|s| s.to_string()).collect());
    vec![
        HyperParam { name: "machineA,machineE".into(), domain: cat(&["machineA", "machineE", "none_selected"]) },
        HyperParam { name: "machineD".into(), domain: cat(&["machineD", "none_selected"]) },
        HyperParam { name: "slack".into(), domain: Domain::Numeric { lo: 0.05, hi: 0.4, step: 0.05 } },
    ]
}

#[derive(Debug, Clone, PartialEq)]
pub enum HyperValue {
    Choice(String),
    Number(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlatformDist {
    pub platform: String,
    pub num_machines: f64,
    pub low_level_zones: f64,
    pub mid_level_zones: f64,
    pub high_level_zones: f64,
    pub resources: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct JobProfile {
    pub user: String,
    pub group_name: String,
    /// platform → mean_mips_per_resource_usage
    pub platform_profiles: Vec<(String, f64)>,
    pub job_requested_resource_limit: f64,
    pub job_requested_num_vms: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterState {
    pub cell_name: String,
    pub location: String,
    pub window_start: NaiveDateTime,
    pub window_end: NaiveDateTime,
    pub top_users: Vec<String>,
    pub scheduler_hyperparams: Vec<HyperParam>,
    pub assignments: Vec<(String, HyperValue)>,
    pub platform_distributions: Vec<PlatformDist>,
    pub job_profiles: Vec<JobProfile>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub task_id: String,
    pub k: u32,
    pub cell_name: String,
    pub location: String,
    pub month: Month,
    pub profile: Profile,
    pub base_level: f64,
    pub spread: f64,
    pub noise_sigma: f64,
    pub bimodal: bool,
    pub mode_gap: f64,
    /// Hours `[start, end)` of the day in which the bimodal shift applies.
    pub bimodal_hours: [u32; 2],
    pub daily_amplitude: f64,
    pub daily_phase: f64,
    pub weekly_amplitude: f64,
    /// Monday-first effect per weekday, zero-mean and unit-variance over
    /// the days of the task's month.
    pub weekday_effect: Vec<f64>,
    /// Per-level effects of each categorical hyperparameter followed by
    /// the slope of each numeric one (on its standardized value).
    pub hyperparam_weights: Vec<f64>,
    /// Additive effect of each large user present in the state.
    pub user_effects: BTreeMap<String, f64>,
    pub user_center: f64,
    /// Effect per platform, weighted by its share of machines.
    pub platform_effects: BTreeMap<String, f64>,
    /// Means of the raw user and platform terms, subtracted so both are
    /// centered.
    pub platform_center: f64,
    pub valid_range: [f64; 2],
    pub seed: u64,
}

fn mix(a: u64, b: u64) -> u64 {
    // splitmix64 finalizer over a simple combination
    let mut z = a ^ b.wrapping_mul(0x9E37_79B9_7F4A_7C15).rotate_left(17);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Rounds to four significant digits, the precision of the rendered form.
pub fn quantize(v: f64) -> f64 {
    format!("{v:.3e}").parse().expect("formatted float parses")
}

/// Scientific notation with three decimals and a signed two-digit exponent,
/// e.g. `1.239e+03`.
pub fn fmt_sci(v: f64) -> String {
    let s = format!("{v:.3e}");
    let (m, e) = s.split_once('e').expect("exponent present");
    let e: i32 = e.parse().expect("integer exponent");
    format!("{m}e{}{:02}", if e < 0 { '-' } else { '+' }, e.abs())
}

fn cell_letter(k: u32) -> String {
    let mut k = k;
    let mut s = Vec::new();
    while k > 0 {
        k -= 1;
        s.push(b'a' + (k % 26) as u8);
        k /= 26;
    }
    s.reverse();
    String::from_utf8(s).expect("ascii")
}

fn hyper_offsets(hps: &[HyperParam]) -> Vec<usize> {
    let mut off = Vec::with_capacity(hps.len());
    let mut next = 0;
    for h in hps {
        off.push(next);
        next += h.domain.levels();
    }
    off
}

fn grid_stats(grid: &[f64]) -> (f64, f64) {
    let n = grid.len() as f64;
    let mean = grid.iter().sum::<f64>() / n;
    let var = grid.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Deterministic task construction; lower `k` has a larger spread.
pub fn make_task(k: u32, month: Month, profile: Profile, seed: u64) -> Result<TaskSpec> {
    if k == 0 {
        return Err(Error::Config("task index k must be >= 1".into()));
    }
    let b = profile.budget();
    let std = TOP_STD * STD_DECAY.powi(k as i32 - 1);
    let spread = std * std;
    let mut g = ChaCha8Rng::seed_from_u64(mix(seed, 0x61_6c_6f_62));
    let mut c = ChaCha8Rng::seed_from_u64(mix(mix(seed, k as u64), month.number() as u64));

    let daily_phase = g.random_range(0.0..std::f64::consts::TAU) + 0.5 * normal(&mut c);
    let daily_amplitude = (2.0 * b.daily * spread).sqrt();

    let raw_week: Vec<f64> = {
        let base = [0.4, 0.5, 0.5, 0.4, 0.2, -1.0, -1.2];
        let gw: Vec<f64> = base.iter().map(|v| v + 0.3 * normal(&mut g)).collect();
        gw.iter().map(|v| v + CELL_MIX * 0.3 * normal(&mut c)).collect()
    };
    let weekday_effect = normalize_weekdays(&raw_week, month);
    let weekly_amplitude = (b.weekly * spread).sqrt();

    let hps = scheduler_hyperparams();
    let mut raw: Vec<f64> = Vec::new();
    for h in &hps {
        let n = h.domain.levels();
        let mut eff: Vec<f64> = (0..n).map(|_| normal(&mut g)).collect();
        for e in &mut eff {
            *e += CELL_MIX * normal(&mut c);
        }
        if matches!(h.domain, Domain::Categorical(_)) {
            let m = eff.iter().sum::<f64>() / n as f64;
            eff.iter_mut().for_each(|e| *e -= m);
        }
        raw.extend(eff);
    }
    let raw_var = hyper_variance(&hps, &raw);
    let scale = if raw_var > 0.0 { (b.hyper * spread / raw_var).sqrt() } else { 0.0 };
    let hyperparam_weights: Vec<f64> = raw.iter().map(|w| w * scale).collect();

    let mut platform_effects: BTreeMap<String, f64> = PLATFORMS
        .iter()
        .map(|p| (p.to_string(), normal(&mut g) + CELL_MIX * normal(&mut c)))
        .collect();
    let mut user_effects: BTreeMap<String, f64> = USERS
        .iter()
        .map(|u| (u.to_string(), normal(&mut g) + CELL_MIX * normal(&mut c)))
        .collect();

    let k_letter = cell_letter(k);
    let mut spec = TaskSpec {
        task_id: format!("C{k}_{month}"),
        k,
        cell_name: format!("cell_{k_letter}"),
        location: LOCATIONS[(mix(seed, k as u64) % LOCATIONS.len() as u64) as usize].to_string(),
        month,
        profile,
        base_level: BASE_LEVEL + c.random_range(-100.0..100.0),
        spread,
        noise_sigma: (b.noise * spread).sqrt(),
        bimodal: profile == Profile::Bimodal,
        mode_gap: 0.0,
        bimodal_hours: [8, 14],
        daily_amplitude,
        daily_phase,
        weekly_amplitude,
        weekday_effect,
        hyperparam_weights,
        user_effects: user_effects.clone(),
        user_center: 0.0,
        platform_effects: platform_effects.clone(),
        platform_center: 0.0,
        valid_range: [500.0, 3000.0],
        seed,
    };
    if spec.bimodal {
        let p = (spec.bimodal_hours[1] - spec.bimodal_hours[0]) as f64 / 24.0;
        spec.mode_gap = 2.0 * (b.bimodal * spread / p).sqrt();
    }

    // user and platform terms: scale and center from a fixed Monte Carlo
    // sample of states
    let mut mc = ChaCha8Rng::seed_from_u64(mix(seed, 0x706c_6174 + k as u64));
    let states: Vec<ClusterState> = (0..8000).map(|_| sample_state(&spec, &mut mc)).collect();
    let fit = |draws: Vec<f64>, frac: f64| {
        let (mean, sd) = grid_stats(&draws);
        let scale = if sd > 0.0 { (frac * spread).sqrt() / sd } else { 0.0 };
        (scale, mean * scale)
    };
    let (us, uc) = fit(states.iter().map(|s| raw_user_term(&spec, s)).collect(), b.users);
    let (ps, pc) = fit(states.iter().map(|s| raw_platform_term(&spec, s)).collect(), b.platform);
    user_effects.values_mut().for_each(|v| *v *= us);
    platform_effects.values_mut().for_each(|v| *v *= ps);
    spec.user_effects = user_effects;
    spec.user_center = uc;
    spec.platform_effects = platform_effects;
    spec.platform_center = pc;
    spec.valid_range = bracket(&spec);
    Ok(spec)
}

fn normalize_weekdays(raw: &[f64], month: Month) -> Vec<f64> {
    let first = month.first_day();
    let vals: Vec<f64> = (0..month.days())
        .map(|d| raw[(first + Duration::days(d as i64)).weekday().num_days_from_monday() as usize])
        .collect();
    let (mean, sd) = grid_stats(&vals);
    raw.iter().map(|v| if sd > 0.0 { (v - mean) / sd } else { 0.0 }).collect()
}

/// Exact variance of the hyperparameter term under uniform assignment.
fn hyper_variance(hps: &[HyperParam], w: &[f64]) -> f64 {
    let off = hyper_offsets(hps);
    hps.iter()
        .zip(off)
        .map(|(h, o)| match &h.domain {
            Domain::Categorical(c) => {
                let eff = &w[o..o + c.len()];
                let m = eff.iter().sum::<f64>() / c.len() as f64;
                eff.iter().map(|e| (e - m).powi(2)).sum::<f64>() / c.len() as f64
            }
            Domain::Numeric { .. } => w[o] * w[o],
        })
        .sum()
}

/// Smallest `[low, high]` containing `[500, 3000]` and every achievable
/// mode center ± 4σ, rounded outward to hundreds.
fn bracket(spec: &TaskSpec) -> [f64; 2] {
    let hps = scheduler_hyperparams();
    let off = hyper_offsets(&hps);
    let (mut lo, mut hi) = (spec.base_level, spec.base_level);
    lo -= spec.daily_amplitude;
    hi += spec.daily_amplitude;
    let wk = spec.weekday_effect.iter().map(|e| e * spec.weekly_amplitude);
    lo += wk.clone().fold(f64::INFINITY, f64::min);
    hi += wk.fold(f64::NEG_INFINITY, f64::max);
    for (h, o) in hps.iter().zip(off) {
        match &h.domain {
            Domain::Categorical(c) => {
                let eff = &spec.hyperparam_weights[o..o + c.len()];
                lo += eff.iter().cloned().fold(f64::INFINITY, f64::min);
                hi += eff.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            }
            Domain::Numeric { .. } => {
                let (m, s) = grid_stats(&h.domain.grid());
                let g = h.domain.grid();
                let z: Vec<f64> = g.iter().map(|v| (v - m) / s * spec.hyperparam_weights[o]).collect();
                lo += z.iter().cloned().fold(f64::INFINITY, f64::min);
                hi += z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            }
        }
    }
    let mut ue: Vec<f64> = spec.user_effects.values().copied().collect();
    ue.sort_by(f64::total_cmp);
    let (neg, pos): (f64, f64) = (
        ue.iter().take(3).filter(|v| **v < 0.0).sum(),
        ue.iter().rev().take(3).filter(|v| **v > 0.0).sum(),
    );
    lo += neg.min(ue[0]) - spec.user_center;
    hi += pos.max(ue[ue.len() - 1]) - spec.user_center;
    let pe = spec.platform_effects.values();
    lo += pe.clone().cloned().fold(f64::INFINITY, f64::min) - spec.platform_center;
    hi += pe.cloned().fold(f64::NEG_INFINITY, f64::max) - spec.platform_center;
    let pad = spec.mode_gap / 2.0 + 4.0 * spec.noise_sigma;
    [((lo - pad) / 100.0).floor().min(5.0) * 100.0, ((hi + pad) / 100.0).ceil().max(30.0) * 100.0]
}

/// Draws a state uniformly over the task's month and the shared domains.
pub fn sample_state(task: &TaskSpec, rng: &mut ChaCha8Rng) -> ClusterState {
    let day = rng.random_range(0..task.month.days()) as i64;
    let slot = rng.random_range(0..SLOTS_PER_DAY);
    let start = task.month.first_day().and_hms_opt(0, 0, 0).expect("midnight")
        + Duration::days(day)
        + Duration::minutes(slot * SLOT_MINUTES);

    let n_users = rng.random_range(1..=3);
    let mut users: Vec<String> = USERS.iter().map(|s| s.to_string()).collect();
    users.shuffle(rng);
    users.truncate(n_users);

    let hps = scheduler_hyperparams();
    let assignments = hps
        .iter()
        .map(|h| {
            let v = match &h.domain {
                Domain::Categorical(c) => HyperValue::Choice(c[rng.random_range(0..c.len())].clone()),
                Domain::Numeric { .. } => {
                    let g = h.domain.grid();
                    HyperValue::Number(g[rng.random_range(0..g.len())])
                }
            };
            (h.name.clone(), v)
        })
        .collect();

    let mut present: Vec<&str> = PLATFORMS.iter().copied().filter(|_| rng.random_bool(0.5)).collect();
    if present.is_empty() {
        present.push(PLATFORMS[rng.random_range(0..PLATFORMS.len())]);
    }
    let platform_distributions: Vec<PlatformDist> = present
        .iter()
        .map(|p| {
            let n = (400.0 * (0.8 * normal(rng)).exp()).round().max(10.0);
            let low = (n.sqrt() * rng.random_range(0.8..1.6)).round().max(1.0);
            PlatformDist {
                platform: p.to_string(),
                num_machines: quantize(n),
                low_level_zones: low,
                mid_level_zones: low,
                high_level_zones: (low * rng.random_range(0.5..0.9)).round().max(1.0),
                resources: quantize(n * rng.random_range(100.0..500.0)),
            }
        })
        .collect();

    let n_jobs = rng.random_range(1..=3);
    let mut jobs: Vec<(&str, &str)> = JOBS.to_vec();
    jobs.shuffle(rng);
    let job_profiles = jobs[..n_jobs]
        .iter()
        .map(|(u, g)| {
            let mut profs: Vec<(String, f64)> = Vec::new();
            for p in &present {
                if rng.random_bool(0.7) {
                    profs.push((p.to_string(), quantize(rng.random_range(400.0..1000.0))));
                }
            }
            if profs.is_empty() {
                profs.push((present[0].to_string(), quantize(rng.random_range(400.0..1000.0))));
            }
            JobProfile {
                user: u.to_string(),
                group_name: g.to_string(),
                platform_profiles: profs,
                job_requested_resource_limit: quantize(2000.0 * normal(rng).exp()),
                job_requested_num_vms: rng.random_range(1..=2000),
            }
        })
        .collect();

    ClusterState {
        cell_name: task.cell_name.clone(),
        location: task.location.clone(),
        window_start: start,
        window_end: start + Duration::minutes(SLOT_MINUTES),
        top_users: users,
        scheduler_hyperparams: hps,
        assignments,
        platform_distributions,
        job_profiles,
    }
}

fn raw_platform_term(task: &TaskSpec, state: &ClusterState) -> f64 {
    let total: f64 = state.platform_distributions.iter().map(|p| p.num_machines).sum();
    state
        .platform_distributions
        .iter()
        .map(|p| task.platform_effects.get(&p.platform).copied().unwrap_or(0.0) * p.num_machines / total)
        .sum()
}

fn raw_user_term(task: &TaskSpec, state: &ClusterState) -> f64 {
    state.top_users.iter().map(|u| task.user_effects.get(u).copied().unwrap_or(0.0)).sum()
}

fn check_owner(task: &TaskSpec, state: &ClusterState) -> Result<()> {
    let d = state.window_start.date();
    if state.cell_name != task.cell_name || d.year() != YEAR || d.month() != task.month.number() {
        return Err(Error::Input(format!(
            "state of {} in {}-{:02} was not generated by task {}",
            state.cell_name,
            d.year(),
            d.month(),
            task.task_id
        )));
    }
    Ok(())
}

fn hour_of(state: &ClusterState) -> f64 {
    state.window_start.hour() as f64 + state.window_start.minute() as f64 / 60.0
}

pub fn in_bimodal_window(task: &TaskSpec, state: &ClusterState) -> bool {
    let h = state.window_start.hour();
    task.bimodal && h >= task.bimodal_hours[0] && h < task.bimodal_hours[1]
}

pub fn true_mean(task: &TaskSpec, state: &ClusterState) -> Result<f64> {
    check_owner(task, state)?;
    let hour = hour_of(state);
    let daily = task.daily_amplitude * (std::f64::consts::TAU * hour / 24.0 + task.daily_phase).sin();
    let wd = state.window_start.weekday().num_days_from_monday() as usize;
    let weekly = task.weekly_amplitude * task.weekday_effect.get(wd).copied().unwrap_or(0.0);
    let hps = scheduler_hyperparams();
    let off = hyper_offsets(&hps);
    let mut hyper = 0.0;
    for ((h, o), (name, val)) in hps.iter().zip(off).zip(&state.assignments) {
        if *name != h.name {
            return Err(Error::Input(format!("unexpected hyperparameter {name}")));
        }
        hyper += match (&h.domain, val) {
            (Domain::Categorical(c), HyperValue::Choice(v)) => {
                let i = c.iter().position(|x| x == v).ok_or_else(|| Error::Input(format!("unknown choice {v}")))?;
                task.hyperparam_weights.get(o + i).copied().unwrap_or(0.0)
            }
            (Domain::Numeric { .. }, HyperValue::Number(v)) => {
                let (m, s) = grid_stats(&h.domain.grid());
                task.hyperparam_weights.get(o).copied().unwrap_or(0.0) * (v - m) / s
            }
            _ => return Err(Error::Input(format!("hyperparameter {name} has the wrong kind"))),
        };
    }
    let users = raw_user_term(task, state) - task.user_center;
    let platform = raw_platform_term(task, state) - task.platform_center;
    Ok(task.base_level + daily + weekly + users + hyper + platform)
}

pub fn true_variance(task: &TaskSpec, state: &ClusterState) -> Result<f64> {
    check_owner(task, state)?;
    let mut v = task.noise_sigma * task.noise_sigma;
    if in_bimodal_window(task, state) {
        v += task.mode_gap * task.mode_gap / 4.0;
    }
    Ok(v)
}

/// Centers of the two mixture components inside the bimodal window.
pub fn mode_centers(task: &TaskSpec, state: &ClusterState) -> Result<Option<(f64, f64)>> {
    let m = true_mean(task, state)?;
    Ok(in_bimodal_window(task, state).then(|| (m - task.mode_gap / 2.0, m + task.mode_gap / 2.0)))
}

/// Gaussian around the oracle mean (plus the ±gap/2 mixture shift inside
/// the bimodal window), resampled until it lands in `valid_range`.
pub fn draw_y(task: &TaskSpec, state: &ClusterState, rng: &mut ChaCha8Rng) -> Result<f64> {
    let mean = true_mean(task, state)?;
    let bimodal = in_bimodal_window(task, state);
    let [lo, hi] = task.valid_range;
    let mut y = mean;
    for _ in 0..1000 {
        y = mean + task.noise_sigma * normal(rng);
        if bimodal {
            y += if rng.random_bool(0.5) { task.mode_gap / 2.0 } else { -task.mode_gap / 2.0 };
        }
        if (lo..=hi).contains(&y) {
            return Ok(y);
        }
    }
    Ok(y.clamp(lo, hi))
}

/// Feature blocks of a rendered state, in render order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct FeatureMask(u8);

impl FeatureMask {
    pub const NULL: Self = Self(0);
    pub const CELL: Self = Self(1);
    pub const WINDOW: Self = Self(2);
    pub const USERS: Self = Self(4);
    pub const HYPERPARAMS: Self = Self(8);
    pub const DISTRIBUTIONS: Self = Self(16);
    pub const PROFILES: Self = Self(32);
    /// Everything except cell and window.
    pub const REST: Self = Self(4 | 8 | 16 | 32);
    pub const FULL: Self = Self(63);

    const NAMED: [(&'static str, FeatureMask); 6] = [
        ("CELL", Self::CELL),
        ("WINDOW", Self::WINDOW),
        ("USERS", Self::USERS),
        ("HYPERPARAMS", Self::HYPERPARAMS),
        ("DISTRIBUTIONS", Self::DISTRIBUTIONS),
        ("PROFILES", Self::PROFILES),
    ];

    pub fn union(self, other: Self) -> Self {
        Self(self.0 | other.0)
    }

    pub fn contains(self, other: Self) -> bool {
        self.0 & other.0 == other.0
    }

    pub fn is_null(self) -> bool {
        self.0 == 0
    }

    /// Accepts `null`, `full`, letter codes over `C`/`W`/`R` (e.g. `WR`), or a
    /// comma-separated list of block names.
    pub fn parse(s: &str) -> Result<Self> {
        let t = s.trim();
        match t.to_ascii_lowercase().as_str() {
            "null" | "" => return Ok(Self::NULL),
            "full" => return Ok(Self::FULL),
            _ => {}
        }
        if t.chars().all(|c| matches!(c, 'C' | 'W' | 'R')) {
            return Ok(t.chars().fold(Self::NULL, |m, c| {
                m.union(match c {
                    'C' => Self::CELL,
                    'W' => Self::WINDOW,
                    _ => Self::REST,
                })
            }));
        }
        t.split(',').try_fold(Self::NULL, |m, part| {
            let p = part.trim().to_ascii_uppercase();
            Self::NAMED
                .iter()
                .find(|(n, _)| *n == p)
                .map(|(_, f)| m.union(*f))
                .ok_or_else(|| Error::Config(format!("unknown feature block {part:?} in mask {s:?}")))
        })
    }
}

impl fmt::Display for FeatureMask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            Self::NULL => f.write_str("null"),
            Self::FULL => f.write_str("full"),
            m => {
                let names: Vec<&str> = Self::NAMED.iter().filter(|(_, b)| m.contains(*b)).map(|(n, _)| *n).collect();
                f.write_str(&names.join(","))
            }
        }
    }
}

fn render_block(state: &ClusterState, block: FeatureMask, out: &mut String) {
    use std::fmt::Write as _;
    match block {
        FeatureMask::CELL => {
            let _ = writeln!(out, "cell: {}", state.cell_name);
            let _ = writeln!(out, "location: {}", state.location);
        }
        FeatureMask::WINDOW => {
            for t in [state.window_start, state.window_end] {
                let _ = writeln!(out, "'{}'", t.format("%Y-%m-%dT%H:%M:%SZ"));
            }
        }
        FeatureMask::USERS => {
            let users: Vec<String> = state.top_users.iter().map(|u| format!("'{u}'")).collect();
            let _ = writeln!(out, "Large users: [{}]", users.join(", "));
        }
        FeatureMask::HYPERPARAMS => {
            let space: Vec<String> = state
                .scheduler_hyperparams
                .iter()
                .map(|h| match &h.domain {
                    Domain::Categorical(c) => {
                        let cs: Vec<String> = c.iter().map(|x| format!("'{x}'")).collect();
                        format!("{{'{}': [{}]}}", h.name, cs.join(", "))
                    }
                    Domain::Numeric { lo, hi, .. } => format!("{{'{}': [{}, {}]}}", h.name, fmt_sci(*lo), fmt_sci(*hi)),
                })
                .collect();
            let _ = writeln!(out, "search_space: {}", space.join(" "));
            let asg: Vec<String> = state
                .assignments
                .iter()
                .map(|(k, v)| match v {
                    HyperValue::Choice(c) => format!("\"{k}\": \"{c}\""),
                    HyperValue::Number(x) => format!("\"{k}\": {}", fmt_sci(*x)),
                })
                .collect();
            let _ = writeln!(out, "assignments: {{{}}}", asg.join(", "));
        }
        FeatureMask::DISTRIBUTIONS => {
            out.push_str("distributions:\n");
            for p in &state.platform_distributions {
                let _ = writeln!(out, "- platform: {{{}}}", p.platform);
                let _ = writeln!(out, "  num_machines: {}", fmt_sci(p.num_machines));
                let _ = writeln!(out, "  low_level_zones: {}", fmt_sci(p.low_level_zones));
                let _ = writeln!(out, "  mid_level_zones: {}", fmt_sci(p.mid_level_zones));
                let _ = writeln!(out, "  high_level_zones: {}", fmt_sci(p.high_level_zones));
                let _ = writeln!(out, "  resources: {}", fmt_sci(p.resources));
            }
        }
        FeatureMask::PROFILES => {
            out.push_str("job_profiles:\n");
            for j in &state.job_profiles {
                let _ = writeln!(out, "- job: {{user: {}, group_name: {}}}", j.user, j.group_name);
                out.push_str("  platform_profiles:\n");
                for (p, m) in &j.platform_profiles {
                    let _ = writeln!(out, "    {p}: {{mean_mips_per_resource_usage: {}}}", fmt_sci(*m));
                }
                let _ = writeln!(
                    out,
                    "  limits: {{job_requested_resource_limit: {}, job_requested_num_vms: {}}}",
                    fmt_sci(j.job_requested_resource_limit),
                    j.job_requested_num_vms
                );
            }
        }
        _ => unreachable!("single block"),
    }
}

const BLOCK_ORDER: [FeatureMask; 6] = [
    FeatureMask::CELL,
    FeatureMask::WINDOW,
    FeatureMask::USERS,
    FeatureMask::HYPERPARAMS,
    FeatureMask::DISTRIBUTIONS,
    FeatureMask::PROFILES,
];

pub fn render_yaml(state: &ClusterState) -> String {
    project_features(state, FeatureMask::FULL)
}

pub fn project_features(state: &ClusterState, mask: FeatureMask) -> String {
    let mut out = String::new();
    for b in BLOCK_ORDER {
        if mask.contains(b) {
            render_block(state, b, &mut out);
        }
    }
    out
}

fn block_of_line(line: &str) -> Option<FeatureMask> {
    if line.starts_with("cell: ") || line.starts_with("location: ") {
        Some(FeatureMask::CELL)
    } else if line.starts_with('\'') {
        Some(FeatureMask::WINDOW)
    } else if line.starts_with("Large users:") {
        Some(FeatureMask::USERS)
    } else if line.starts_with("search_space:") || line.starts_with("assignments:") {
        Some(FeatureMask::HYPERPARAMS)
    } else if line.starts_with("distributions:") {
        Some(FeatureMask::DISTRIBUTIONS)
    } else if line.starts_with("job_profiles:") {
        Some(FeatureMask::PROFILES)
    } else {
        None
    }
}

/// Same projection as [`project_features`], applied to an already rendered
/// (or previously projected) string.
pub fn project_text(x: &str, mask: FeatureMask) -> String {
    let mut out = String::new();
    let mut current = FeatureMask::NULL;
    for line in x.split_inclusive('\n') {
        if let Some(b) = block_of_line(line) {
            current = b;
        }
        if !current.is_null() && mask.contains(current) {
            out.push_str(line);
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(Error::Config(format!("unknown split {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub task_id: String,
    pub cell: String,
    pub month: Month,
    pub split: Split,
    pub x: String,
    pub y: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RegressionDataset {
    pub records: Vec<Record>,
}

impl RegressionDataset {
    pub fn split(&self, split: Split) -> Vec<&Record> {
        self.records.iter().filter(|r| r.split == split).collect()
    }

    /// `(train, val, test)` record counts.
    pub fn counts(&self) -> (usize, usize, usize) {
        let c = |s| self.records.iter().filter(|r| r.split == s).count();
        (c(Split::Train), c(Split::Val), c(Split::Test))
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn task_ids(&self) -> Vec<String> {
        let mut seen = Vec::new();
        for r in &self.records {
            if !seen.contains(&r.task_id) {
                seen.push(r.task_id.clone());
            }
        }
        seen
    }

    pub fn concat(sets: &[RegressionDataset]) -> Self {
        Self { records: sets.iter().flat_map(|s| s.records.iter().cloned()).collect() }
    }

    /// Same records with each `x` replaced by its projection under `mask`.
    pub fn project(&self, mask: FeatureMask) -> Self {
        let records = self
            .records
            .iter()
            .map(|r| Record { x: project_text(&r.x, mask), ..r.clone() })
            .collect();
        Self { records }
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let mut s = String::new();
        for r in &self.records {
            s.push_str(&serde_json::to_string(r)?);
            s.push('\n');
        }
        Ok(s)
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(self.to_jsonl()?.as_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read_jsonl(path: &Path) -> Result<Self> {
        let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut records = Vec::new();
        for (i, line) in BufReader::new(f).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let r: Record = serde_json::from_str(&line)
                .map_err(|e| Error::Dataset(format!("{}:{}: {e}", path.display(), i + 1)))?;
            records.push(r);
        }
        Ok(Self { records })
    }
}

/// Split sizes for `n` records in 8/1/1 proportion.
pub fn split_sizes(n: usize) -> (usize, usize, usize) {
    let train = (n * 8 + 5) / 10;
    let val = (n + 5) / 10;
    (train, val, n - train - val)
}

/// `n` i.i.d. records plus the states behind them (same order).
pub fn generate_with_states(task: &TaskSpec, n: usize, seed: u64) -> Result<(RegressionDataset, Vec<ClusterState>)> {
    if n < 10 {
        return Err(Error::Config(format!("dataset size {n} is below the minimum of 10")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(mix(task.seed, seed));
    let mut states = Vec::with_capacity(n);
    let mut ys = Vec::with_capacity(n);
    for _ in 0..n {
        let s = sample_state(task, &mut rng);
        ys.push(draw_y(task, &s, &mut rng)?);
        states.push(s);
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix(task.seed, seed ^ 0x5eed)));
    let (tr, va, _) = split_sizes(n);
    let mut split = vec![Split::Test; n];
    for (pos, &i) in order.iter().enumerate() {
        split[i] = if pos < tr {
            Split::Train
        } else if pos < tr + va {
            Split::Val
        } else {
            Split::Test
        };
    }
    let records = states
        .iter()
        .zip(ys)
        .zip(split)
        .map(|((s, y), split)| Record {
            task_id: task.task_id.clone(),
            cell: task.cell_name.clone(),
            month: task.month,
            split,
            x: render_yaml(s),
            y,
        })
        .collect();
    Ok((RegressionDataset { records }, states))
}

pub fn generate_dataset(task: &TaskSpec, n: usize, seed: u64) -> Result<RegressionDataset> {
    generate_with_states(task, n, seed).map(|(d, _)| d)
}

pub fn save_task_spec(task: &TaskSpec, path: &Path) -> Result<()> {
    let text = toml::to_string(task).map_err(|e| Error::Config(format!("task spec: {e}")))?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn load_task_spec(path: &Path) -> Result<TaskSpec> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

/// Oracle lookup from rendered x strings back to their generating states.
pub struct Oracle<'a> {
    pub task: &'a TaskSpec,
    by_x: HashMap<&'a str, &'a ClusterState>,
}

impl<'a> Oracle<'a> {
    pub fn new(task: &'a TaskSpec, data: &'a RegressionDataset, states: &'a [ClusterState]) -> Self {
        let by_x = data.records.iter().map(|r| r.x.as_str()).zip(states).collect();
        Self { task, by_x }
    }

    pub fn state(&self, x: &str) -> Result<&'a ClusterState> {
        self.by_x.get(x).copied().ok_or_else(|| Error::Oracle("no oracle state for record".into()))
    }

    pub fn mean(&self, x: &str) -> Result<f64> {
        true_mean(self.task, self.state(x)?)
    }

    pub fn variance(&self, x: &str) -> Result<f64> {
        true_variance(self.task, self.state(x)?)
    }
}

#[cfg(test)]
mod tests;
