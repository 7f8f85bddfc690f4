//! Sampling-based prediction: grammar-constrained decoding of i.i.d.
//! y-samples, range filtering, aggregation and teacher-forced NLL.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::numcodec::{decode_y, encode_y, is_valid_y_sequence};
use crate::synthgen::Record;
use crate::textenc::{encode_text, truncate, TokenId, TokenSequence, Vocabulary, BOS};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplingConfig {
    pub num_samples: usize,
    /// 0 selects greedy decoding.
    pub temperature: f64,
    /// Inclusive `[low, high]`; samples outside are dropped.
    pub valid_range: [f64; 2],
    /// Extra sampling rounds when every sample of a round was filtered.
    pub max_resample_attempts: usize,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self { num_samples: 128, temperature: 1.0, valid_range: [500.0, 3000.0], max_resample_attempts: 2 }
    }
}

impl SamplingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_samples == 0 {
            return Err(Error::Config("num_samples must be >= 1".into()));
        }
        if !(self.temperature >= 0.0 && self.temperature.is_finite()) {
            return Err(Error::Config(format!("invalid temperature {}", self.temperature)));
        }
        let [lo, hi] = self.valid_range;
        if !(lo < hi) {
            return Err(Error::Config(format!("valid_range [{lo}, {hi}] must have low < high")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredictionResult {
    /// Samples inside the valid range, in draw order.
    pub samples: Vec<f64>,
    pub raw_sample_count: usize,
    pub point_mean: f64,
    pub point_median: f64,
    /// Population variance of `samples`.
    pub sample_variance: f64,
    pub filtered_count: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregate {
    Mean,
    Median,
}

pub fn aggregate(samples: &[f64], mode: Aggregate) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Input("cannot aggregate an empty sample list".into()));
    }
    Ok(match mode {
        Aggregate::Mean => samples.iter().sum::<f64>() / samples.len() as f64,
        Aggregate::Median => {
            let mut s = samples.to_vec();
            s.sort_by(f64::total_cmp);
            let n = s.len();
            if n % 2 == 1 {
                s[n / 2]
            } else {
                (s[n / 2 - 1] + s[n / 2]) / 2.0
            }
        }
    })
}

fn population_variance(samples: &[f64]) -> f64 {
    let n = samples.len() as f64;
    let m = samples.iter().sum::<f64>() / n;
    samples.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n
}

#[derive(Debug, Clone, PartialEq)]
pub struct DensitySummary {
    pub mean: f64,
    pub variance: f64,
    /// `(q, value)` for q in 0.05, 0.25, 0.5, 0.75, 0.95.
    pub quantiles: Vec<(f64, f64)>,
}

pub const SUMMARY_QUANTILES: [f64; 5] = [0.05, 0.25, 0.5, 0.75, 0.95];

/// Linear-interpolation quantile of sorted data.
fn quantile_sorted(s: &[f64], q: f64) -> f64 {
    let h = (s.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    s[lo] + (h - lo as f64) * (s[hi] - s[lo])
}

pub fn density_summary(samples: &[f64]) -> Result<DensitySummary> {
    if samples.len() < 2 {
        return Err(Error::Metric(format!("variance needs at least 2 samples, got {}", samples.len())));
    }
    let mut s = samples.to_vec();
    s.sort_by(f64::total_cmp);
    Ok(DensitySummary {
        mean: samples.iter().sum::<f64>() / samples.len() as f64,
        variance: population_variance(samples),
        quantiles: SUMMARY_QUANTILES.iter().map(|&q| (q, quantile_sorted(&s, q))).collect(),
    })
}

/// Token ids permitted at decoding position `pos` (0 = sign).
fn allowed_ids(vocab: &Vocabulary, pos: usize) -> std::ops::Range<TokenId> {
    let m = vocab.p10().mantissa_digits;
    if pos == 0 {
        vocab.sign_ids()
    } else if pos <= m {
        vocab.digit_ids()
    } else {
        vocab.exponent_ids()
    }
}

fn pick(logits: &[f32], allowed: std::ops::Range<TokenId>, temperature: f64, rng: &mut ChaCha8Rng) -> TokenId {
    let lo = allowed.start as usize;
    let row = &logits[lo..allowed.end as usize];
    if temperature == 0.0 {
        let mut best = 0;
        for (i, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = i;
            }
        }
        return (lo + best) as TokenId;
    }
    let max = row.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b)) as f64;
    let w: Vec<f64> = row.iter().map(|&v| ((v as f64 - max) / temperature).exp()).collect();
    let total: f64 = w.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (i, wi) in w.iter().enumerate() {
        if u < *wi {
            return (lo + i) as TokenId;
        }
        u -= wi;
    }
    (lo + row.len() - 1) as TokenId
}

/// Draws `n` raw y-token sequences; stream `offset + i` drives draw `i`.
fn draw_sequences(
    params: &ModelParams,
    vocab: &Vocabulary,
    x_ids: &[TokenId],
    n: usize,
    temperature: f64,
    seed: u64,
    offset: usize,
) -> Result<Vec<Vec<TokenId>>> {
    let net = params.net();
    let x = &x_ids[..x_ids.len().min(params.arch.max_encoder_len)];
    let session = net.session(x)?;
    let v = params.arch.vocab_size;
    let len = vocab.p10().sequence_len();
    let mut rngs: Vec<ChaCha8Rng> = (0..n)
        .map(|i| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            r.set_stream((offset + i) as u64);
            r
        })
        .collect();
    let mut prefixes = vec![vec![BOS]; n];
    for pos in 0..len {
        // identical prefixes share one decoder row
        let mut unique: Vec<Vec<TokenId>> = Vec::new();
        let mut slot: HashMap<&[TokenId], usize> = HashMap::new();
        let mut row_of = Vec::with_capacity(n);
        for p in &prefixes {
            let next = slot.len();
            let r = *slot.entry(p.as_slice()).or_insert(next);
            if r == unique.len() {
                unique.push(p.clone());
            }
            row_of.push(r);
        }
        let logits = session.next_logits(&unique)?;
        let allowed = allowed_ids(vocab, pos);
        let picks: Vec<TokenId> = row_of
            .iter()
            .zip(rngs.iter_mut())
            .map(|(&r, rng)| pick(&logits[r * v..(r + 1) * v], allowed.clone(), temperature, rng))
            .collect();
        for (p, t) in prefixes.iter_mut().zip(picks) {
            p.push(t);
        }
    }
    Ok(prefixes.into_iter().map(|mut p| p.split_off(1)).collect())
}

fn decode_ids(vocab: &Vocabulary, ids: &[TokenId]) -> Result<f64> {
    let toks = vocab.decode_p10(ids)?;
    if !is_valid_y_sequence(&toks.to_tokens(), vocab.p10()) {
        return Err(Error::Decode(format!("sampled an invalid sequence {toks}")));
    }
    decode_y(&toks, vocab.p10())
}

/// Raw decoded samples before range filtering.
pub fn sample_raw(
    params: &ModelParams,
    vocab: &Vocabulary,
    x_ids: &TokenSequence,
    n: usize,
    temperature: f64,
    seed: u64,
) -> Result<Vec<f64>> {
    draw_sequences(params, vocab, &x_ids.ids, n, temperature, seed, 0)?
        .iter()
        .map(|s| decode_ids(vocab, s))
        .collect()
}

pub fn sample_y(
    params: &ModelParams,
    vocab: &Vocabulary,
    x_ids: &TokenSequence,
    cfg: &SamplingConfig,
    seed: u64,
) -> Result<PredictionResult> {
    cfg.validate()?;
    let [lo, hi] = cfg.valid_range;
    let mut raw = 0;
    let mut filtered = 0;
    let mut kept = Vec::new();
    for attempt in 0..=cfg.max_resample_attempts {
        let seqs = draw_sequences(
            params,
            vocab,
            &x_ids.ids,
            cfg.num_samples,
            cfg.temperature,
            seed,
            attempt * cfg.num_samples,
        )?;
        raw += seqs.len();
        for s in &seqs {
            let y = decode_ids(vocab, s)?;
            if (lo..=hi).contains(&y) {
                kept.push(y);
            } else {
                filtered += 1;
            }
        }
        if !kept.is_empty() || cfg.temperature == 0.0 {
            break;
        }
    }
    if kept.is_empty() {
        return Err(Error::EmptySamples { raw, filtered });
    }
    Ok(PredictionResult {
        point_mean: aggregate(&kept, Aggregate::Mean)?,
        point_median: aggregate(&kept, Aggregate::Median)?,
        sample_variance: population_variance(&kept),
        samples: kept,
        raw_sample_count: raw,
        filtered_count: filtered,
    })
}

/// Argmax decoding under the grammar mask.
pub fn greedy_decode(params: &ModelParams, vocab: &Vocabulary, x_ids: &TokenSequence) -> Result<f64> {
    let seqs = draw_sequences(params, vocab, &x_ids.ids, 1, 0.0, 0, 0)?;
    decode_ids(vocab, &seqs[0])
}

/// Teacher-forced negative log-likelihood (nats) of the P10 tokens of `y`
/// under the unconstrained model distribution.
pub fn nll_of(params: &ModelParams, vocab: &Vocabulary, x_ids: &TokenSequence, y: f64) -> Result<f64> {
    let target = vocab.encode_p10(&encode_y(y, vocab.p10())?);
    let mut dec = vec![BOS];
    dec.extend_from_slice(&target[..target.len() - 1]);
    let x = &x_ids.ids[..x_ids.len().min(params.arch.max_encoder_len)];
    let out = params.net().forward(&[x.to_vec()], &[dec])?;
    let v = params.arch.vocab_size;
    let mut nll = 0.0f64;
    for (t, &tok) in target.iter().enumerate() {
        let row = &out.logits[t * v..(t + 1) * v];
        let max = row.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b)) as f64;
        let lse = max + row.iter().map(|&l| (l as f64 - max).exp()).sum::<f64>().ln();
        nll += lse - row[tok as usize] as f64;
    }
    Ok(nll)
}

/// One row of the prediction CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRow {
    pub task_id: String,
    pub example_id: usize,
    pub y_true: f64,
    pub point_mean: f64,
    pub point_median: f64,
    pub sample_variance: f64,
    pub nll: f64,
    pub filtered_count: usize,
}

pub const PREDICTION_HEADER: [&str; 8] =
    ["task_id", "example_id", "y_true", "point_mean", "point_median", "sample_variance", "nll", "filtered_count"];
pub const SAMPLE_HEADER: [&str; 3] = ["example_id", "sample_index", "y_sample"];

/// Per-example seed derived from a run seed.
pub fn example_seed(seed: u64, example_id: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (example_id as u64).wrapping_add(1).wrapping_mul(0xD1B5_4A32_D192_ED03)
}

/// Samples and scores each record; `example_id` is the record's position.
pub fn predict_records(
    params: &ModelParams,
    vocab: &Vocabulary,
    records: &[&Record],
    cfg: &SamplingConfig,
    seed: u64,
) -> Result<Vec<(PredictionRow, PredictionResult)>> {
    records
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let ids = truncate(&encode_text(&r.x, vocab), params.arch.max_encoder_len.max(1));
            let res = sample_y(params, vocab, &ids, cfg, example_seed(seed, i))?;
            let row = PredictionRow {
                task_id: r.task_id.clone(),
                example_id: i,
                y_true: r.y,
                point_mean: res.point_mean,
                point_median: res.point_median,
                sample_variance: res.sample_variance,
                nll: nll_of(params, vocab, &ids, r.y)?,
                filtered_count: res.filtered_count,
            };
            Ok((row, res))
        })
        .collect()
}

pub fn write_predictions(path: &Path, rows: &[PredictionRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    if rows.is_empty() {
        w.write_record(PREDICTION_HEADER)?;
    }
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_predictions(path: &Path) -> Result<Vec<PredictionRow>> {
    let mut rdr = csv::Reader::from_path(path)?;
    let headers: Vec<String> = rdr.headers()?.iter().map(String::from).collect();
    if headers != PREDICTION_HEADER {
        return Err(Error::Dataset(format!(
            "{}: expected header {}, found {}",
            path.display(),
            PREDICTION_HEADER.join(","),
            headers.join(",")
        )));
    }
    rdr.deserialize().map(|r| r.map_err(Error::from)).collect()
}

pub fn write_samples(path: &Path, results: &[(usize, &[f64])]) -> Result<()> {
    let mut s = SAMPLE_HEADER.join(",");
    s.push('\n');
    for (id, samples) in results {
        for (j, y) in samples.iter().enumerate() {
            s.push_str(&format!("{id},{j},{y}\n"));
        }
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(s.as_bytes()).map_err(|e| Error::io(path, e))
}

pub fn read_samples(path: &Path) -> Result<Vec<(usize, usize, f64)>> {
    let mut rdr = csv::Reader::from_path(path)?;
    let headers: Vec<String> = rdr.headers()?.iter().map(String::from).collect();
    if headers != SAMPLE_HEADER {
        return Err(Error::Dataset(format!("{}: unexpected sample header", path.display())));
    }
    rdr.deserialize().map(|r| r.map_err(Error::from)).collect()
}
