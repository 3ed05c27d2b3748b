//! Labeled dataset machinery: uniform environment sampling, min-max
//! featurization, oracle labeling with rejection of unlabelable instances,
//! the distribution-shift split by mean squared raw features, and bootstrap
//! replicas for head training. Datasets round-trip through a line-delimited
//! JSON file format.

use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mec::{check_feasible, Environment, MtParams, OffloadStrategy};

pub const DATASET_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("parameter {name}={value} outside declared range [{lo}, {hi}]")]
    OutOfRange {
        name: &'static str,
        value: f64,
        lo: f64,
        hi: f64,
    },
    #[error("invalid sampling ranges: {0}")]
    InvalidRanges(String),
    #[error("rejection rate exceeded 90% while labeling ({rejected} rejected / {attempts} attempts)")]
    RejectionRate { rejected: usize, attempts: usize },
    #[error("labeling failed: {0}")]
    Label(String),
    #[error("sample count must be >= 1")]
    EmptyRequest,
    #[error("dataset is empty or shape-inconsistent: {0}")]
    BadShape(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
}

/// Closed interval for one sampled parameter.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
}

impl Interval {
    pub fn new(lo: f64, hi: f64) -> Self {
        Self { lo, hi }
    }

    fn sample(&self, rng: &mut impl Rng) -> f64 {
        if self.hi > self.lo {
            rng.gen_range(self.lo..=self.hi)
        } else {
            self.lo
        }
    }

    /// Min-max normalize; degenerate intervals map to 0.5.
    fn normalize(&self, v: f64, name: &'static str) -> Result<f64, DatasetError> {
        if v < self.lo || v > self.hi {
            return Err(DatasetError::OutOfRange {
                name,
                value: v,
                lo: self.lo,
                hi: self.hi,
            });
        }
        if self.hi == self.lo {
            return Ok(0.5);
        }
        Ok((v - self.lo) / (self.hi - self.lo))
    }

    fn denormalize(&self, f: f64) -> f64 {
        if self.hi == self.lo {
            self.lo
        } else {
            self.lo + f * (self.hi - self.lo)
        }
    }
}

/// Sampling intervals for the per-MT parameters plus the fixed globals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplingRanges {
    pub n_mts: usize,
    pub c: Interval,
    pub r_local: Interval,
    pub p: Interval,
    pub q: Interval,
    pub u: Interval,
    pub d: Interval,
    pub p_up: Interval,
    pub p_exec: Interval,
    pub p_down: Interval,
    pub theta: Interval,
    pub alpha: f64,
    pub kappa: f64,
    pub f_mes: f64,
    pub seed: u64,
}

impl SamplingRanges {
    /// Desk-scale defaults that label quickly and mix offload/local optima.
    pub fn default_for(n_mts: usize, seed: u64) -> Self {
        Self {
            n_mts,
            c: Interval::new(0.5, 8.0),
            r_local: Interval::new(0.5, 4.0),
            p: Interval::new(0.1, 4.0),
            q: Interval::new(0.05, 1.0),
            u: Interval::new(0.5, 8.0),
            d: Interval::new(0.5, 8.0),
            p_up: Interval::new(0.1, 1.5),
            p_exec: Interval::new(0.1, 1.5),
            p_down: Interval::new(0.05, 0.8),
            theta: Interval::new(1.0, 8.0),
            alpha: 0.5,
            kappa: 0.05,
            f_mes: 10.0,
            seed,
        }
    }

    pub fn validate(&self) -> Result<(), DatasetError> {
        if self.n_mts == 0 {
            return Err(DatasetError::InvalidRanges("n_mts must be >= 1".into()));
        }
        let strict_pos = [
            (&self.c, "c"),
            (&self.r_local, "r_local"),
            (&self.u, "u"),
            (&self.d, "d"),
            (&self.theta, "theta"),
        ];
        for (iv, name) in strict_pos {
            if iv.lo <= 0.0 || iv.lo.is_nan() {
                return Err(DatasetError::InvalidRanges(format!(
                    "{name} interval must have lo > 0"
                )));
            }
        }
        let all = [
            (&self.c, "c"),
            (&self.r_local, "r_local"),
            (&self.p, "p"),
            (&self.q, "q"),
            (&self.u, "u"),
            (&self.d, "d"),
            (&self.p_up, "p_up"),
            (&self.p_exec, "p_exec"),
            (&self.p_down, "p_down"),
            (&self.theta, "theta"),
        ];
        for (iv, name) in all {
            if !iv.lo.is_finite() || !iv.hi.is_finite() || iv.lo > iv.hi || iv.lo < 0.0 {
                return Err(DatasetError::InvalidRanges(format!(
                    "{name} interval [{}, {}] is invalid",
                    iv.lo, iv.hi
                )));
            }
        }
        if !(0.0..=1.0).contains(&self.alpha)
            || self.kappa.is_nan()
            || self.kappa <= 0.0
            || self.f_mes.is_nan()
            || self.f_mes <= 0.0
        {
            return Err(DatasetError::InvalidRanges(
                "alpha/kappa/f_mes out of range".into(),
            ));
        }
        Ok(())
    }

    fn per_mt_intervals(&self) -> [(&Interval, &'static str); 6] {
        [
            (&self.c, "c"),
            (&self.r_local, "r_local"),
            (&self.p, "p"),
            (&self.q, "q"),
            (&self.u, "u"),
            (&self.d, "d"),
        ]
    }
}

/// Per-MT feature count; only the six sampled job/link parameters carry
/// information (powers and theta are featurizable too, but the default
/// feature map follows the job/link set).
pub const FEATURES_PER_MT: usize = 6;

fn mt_raw_features(mt: &MtParams) -> [f64; FEATURES_PER_MT] {
    [mt.c, mt.r_local, mt.p, mt.q, mt.u, mt.d]
}

/// Min-max normalized feature vector, length 6 * N.
pub fn featurize(env: &Environment, ranges: &SamplingRanges) -> Result<Vec<f64>, DatasetError> {
    let mut x = Vec::with_capacity(FEATURES_PER_MT * env.n_mts());
    for mt in &env.mts {
        let raw = mt_raw_features(mt);
        for (k, (iv, name)) in ranges.per_mt_intervals().into_iter().enumerate() {
            x.push(iv.normalize(raw[k], name)?);
        }
    }
    Ok(x)
}

/// Invert `featurize` back to per-MT (c, r_local, p, q, u, d) tuples.
pub fn defeaturize(x: &[f64], ranges: &SamplingRanges) -> Vec<[f64; FEATURES_PER_MT]> {
    x.chunks(FEATURES_PER_MT)
        .map(|chunk| {
            let ivs = ranges.per_mt_intervals();
            let mut out = [0.0; FEATURES_PER_MT];
            for k in 0..FEATURES_PER_MT {
                out[k] = ivs[k].0.denormalize(chunk[k]);
            }
            out
        })
        .collect()
}

/// Mean of the squared raw per-MT features; the shift-split key.
pub fn mean_square_features(env: &Environment) -> f64 {
    let mut sum = 0.0;
    let mut count = 0usize;
    for mt in &env.mts {
        for v in mt_raw_features(mt) {
            sum += v * v;
            count += 1;
        }
    }
    sum / count as f64
}

/// Draw one environment, every per-MT parameter uniform in its interval.
pub fn sample_environment(ranges: &SamplingRanges, rng: &mut impl Rng) -> Environment {
    let mts = (0..ranges.n_mts)
        .map(|_| MtParams {
            c: ranges.c.sample(rng),
            r_local: ranges.r_local.sample(rng),
            p: ranges.p.sample(rng),
            q: ranges.q.sample(rng),
            u: ranges.u.sample(rng),
            d: ranges.d.sample(rng),
            p_up: ranges.p_up.sample(rng),
            p_exec: ranges.p_exec.sample(rng),
            p_down: ranges.p_down.sample(rng),
            theta: ranges.theta.sample(rng),
        })
        .collect();
    Environment {
        mts,
        alpha: ranges.alpha,
        kappa: ranges.kappa,
        f_mes: ranges.f_mes,
    }
}

/// One oracle-labeled training sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledSample {
    pub x: Vec<f64>,
    pub d_star: Vec<u8>,
    pub r_star: Vec<f64>,
    pub cost_star: f64,
    pub raw_env: Environment,
}

impl LabeledSample {
    pub fn strategy(&self) -> OffloadStrategy {
        OffloadStrategy {
            d: self.d_star.clone(),
            r: self.r_star.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub version: u32,
    pub ranges: SamplingRanges,
    pub count: usize,
    pub seed: u64,
    /// Environments rejected as unlabelable during generation.
    pub rejected: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub meta: DatasetMeta,
    pub samples: Vec<LabeledSample>,
}

impl Dataset {
    pub fn n_mts(&self) -> usize {
        self.meta.ranges.n_mts
    }

    pub fn feature_dim(&self) -> usize {
        FEATURES_PER_MT * self.n_mts()
    }

    pub fn validate(&self) -> Result<(), DatasetError> {
        let n = self.n_mts();
        let f = self.feature_dim();
        for (i, s) in self.samples.iter().enumerate() {
            if s.x.len() != f || s.d_star.len() != n || s.r_star.len() != n {
                return Err(DatasetError::BadShape(format!("sample {i} shape mismatch")));
            }
        }
        Ok(())
    }

    /// Fraction of samples whose label offloads at least one terminal.
    pub fn offload_fraction(&self) -> f64 {
        if self.samples.is_empty() {
            return 0.0;
        }
        let k = self
            .samples
            .iter()
            .filter(|s| s.d_star.contains(&1))
            .count();
        k as f64 / self.samples.len() as f64
    }
}

/// Generate exactly `count` labeled samples; unlabelable environments are
/// resampled from the same per-sample stream. Deterministic in (ranges,
/// count, seed): sample index t owns ChaCha stream t.
pub fn generate_dataset(
    ranges: &SamplingRanges,
    count: usize,
    seed: u64,
) -> Result<Dataset, DatasetError> {
    if count == 0 {
        return Err(DatasetError::EmptyRequest);
    }
    ranges.validate()?;
    let mut samples = Vec::with_capacity(count);
    let mut rejected = 0usize;
    let mut attempts = 0usize;
    for t in 0..count {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(t as u64);
        loop {
            attempts += 1;
            let env = sample_environment(ranges, &mut rng);
            match crate::oracle::label_sample(&env, ranges) {
                Ok(s) => {
                    samples.push(s);
                    break;
                }
                Err(crate::oracle::OracleError::Unlabelable) => {
                    rejected += 1;
                    if attempts >= 100 && (rejected as f64) > 0.9 * attempts as f64 {
                        return Err(DatasetError::RejectionRate { rejected, attempts });
                    }
                }
                Err(e) => return Err(DatasetError::Label(e.to_string())),
            }
        }
    }
    let ds = Dataset {
        meta: DatasetMeta {
            version: DATASET_FORMAT_VERSION,
            ranges: ranges.clone(),
            count,
            seed,
            rejected,
        },
        samples,
    };
    debug_assert!(ds
        .samples
        .iter()
        .all(|s| check_feasible(&s.raw_env, &s.strategy()).feasible()));
    Ok(ds)
}

/// Sort by mean squared raw features (stable by index) and cut the top
/// `test_fraction` quantile off as the drifted test set.
pub fn shift_split(ds: &Dataset, test_fraction: f64) -> Result<(Dataset, Dataset), DatasetError> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(DatasetError::InvalidRanges(format!(
            "test_fraction {test_fraction} must be in (0, 1)"
        )));
    }
    let len = ds.samples.len();
    if len < 2 {
        return Err(DatasetError::BadShape("need >= 2 samples to split".into()));
    }
    let mut order: Vec<usize> = (0..len).collect();
    let keys: Vec<f64> = ds.samples.iter().map(|s| mean_square_features(&s.raw_env)).collect();
    order.sort_by(|&a, &b| keys[a].partial_cmp(&keys[b]).unwrap().then(a.cmp(&b)));
    let n_test = ((len as f64 * test_fraction).round() as usize).clamp(1, len - 1);
    let split_at = len - n_test;
    let make = |idx: &[usize]| Dataset {
        meta: DatasetMeta {
            count: idx.len(),
            ..ds.meta.clone()
        },
        samples: idx.iter().map(|&i| ds.samples[i].clone()).collect(),
    };
    Ok((make(&order[..split_at]), make(&order[split_at..])))
}

/// M equal-sized bootstrap replicas, each T draws with replacement.
/// Replica m owns ChaCha stream m of the given seed.
pub fn bootstrap(ds: &Dataset, m_replicas: usize, seed: u64) -> Vec<Dataset> {
    let t = ds.samples.len();
    (0..m_replicas)
        .map(|m| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(m as u64);
            let samples: Vec<LabeledSample> = (0..t)
                .map(|_| ds.samples[rng.gen_range(0..t)].clone())
                .collect();
            Dataset {
                meta: ds.meta.clone(),
                samples,
            }
        })
        .collect()
}

#[derive(Serialize, Deserialize)]
struct SampleRecord {
    version: u32,
    n: usize,
    x: Vec<f64>,
    d_star: Vec<u8>,
    r_star: Vec<f64>,
    cost_star: f64,
    raw_env: Environment,
}

/// Write a dataset as one JSON header line plus one JSON record per sample.
pub fn write_dataset<W: Write>(ds: &Dataset, w: W) -> Result<(), DatasetError> {
    let mut w = BufWriter::new(w);
    serde_json::to_writer(&mut w, &ds.meta).map_err(io_err)?;
    w.write_all(b"\n")?;
    for s in &ds.samples {
        let rec = SampleRecord {
            version: ds.meta.version,
            n: s.d_star.len(),
            x: s.x.clone(),
            d_star: s.d_star.clone(),
            r_star: s.r_star.clone(),
            cost_star: s.cost_star,
            raw_env: s.raw_env.clone(),
        };
        serde_json::to_writer(&mut w, &rec).map_err(io_err)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_dataset<R: Read>(r: R) -> Result<Dataset, DatasetError> {
    let reader = BufReader::new(r);
    let mut lines = reader.lines();
    let header = lines
        .next()
        .ok_or_else(|| DatasetError::Parse {
            line: 1,
            msg: "empty file".into(),
        })??;
    let meta: DatasetMeta = serde_json::from_str(&header).map_err(|e| DatasetError::Parse {
        line: 1,
        msg: e.to_string(),
    })?;
    let mut samples = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: SampleRecord = serde_json::from_str(&line).map_err(|e| DatasetError::Parse {
            line: i + 2,
            msg: e.to_string(),
        })?;
        samples.push(LabeledSample {
            x: rec.x,
            d_star: rec.d_star,
            r_star: rec.r_star,
            cost_star: rec.cost_star,
            raw_env: rec.raw_env,
        });
    }
    let ds = Dataset { meta, samples };
    ds.validate()?;
    Ok(ds)
}

pub fn save_dataset(ds: &Dataset, path: &Path) -> Result<(), DatasetError> {
    write_dataset(ds, std::fs::File::create(path)?)
}

pub fn load_dataset(path: &Path) -> Result<Dataset, DatasetError> {
    read_dataset(std::fs::File::open(path)?)
}

fn io_err(e: serde_json::Error) -> DatasetError {
    DatasetError::Io(std::io::Error::other(e))
}
