//! Population statistics of per-channel feature-map means.
//!
//! Sample `i` of a run seeded with `seed` uses latent seed
//! `derive_seed(seed, 2i)` and noise seed `derive_seed(seed, 2i + 1)`, so any
//! index range can be estimated independently and merged later.

use std::ops::Range;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::generator::{generate, GenerateOptions, GeneratorModel, NoHooks};
use crate::rng::{derive_seed, sample_latent};

pub const DEFAULT_NUM_SAMPLES: usize = 3000;
const CHUNK: usize = 32;
const STATS_FORMAT: &str = "fp-stats-1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoisePolicy {
    FreshPerSample,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StatsMetadata {
    pub num_samples: usize,
    pub latent_seed: u64,
    pub noise_policy: NoisePolicy,
    pub model_fingerprint: String,
    /// RFC 3339 timestamp, if the caller recorded one.
    pub created_at: Option<String>,
}

/// `mu[l][j]`, `sigma[l][j]` for instrumented layer `l`, channel `j`.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelStats {
    pub mu: Vec<Vec<f32>>,
    pub sigma: Vec<Vec<f32>>,
    pub meta: StatsMetadata,
}

impl ChannelStats {
    pub fn num_layers(&self) -> usize {
        self.mu.len()
    }

    pub fn channels(&self, layer: usize) -> usize {
        self.mu[layer].len()
    }

    pub fn entry_count(&self) -> usize {
        self.mu.iter().map(Vec::len).sum()
    }

    /// Errors unless these stats were estimated on `model`.
    pub fn check_model(&self, model: &GeneratorModel) -> Result<()> {
        check_fingerprint(&self.meta.model_fingerprint, model.fingerprint())
    }
}

pub(crate) fn check_fingerprint(expected: &str, found: &str) -> Result<()> {
    if expected != found {
        return Err(Error::FingerprintMismatch { expected: expected.to_string(), found: found.to_string() });
    }
    Ok(())
}

/// Count / sum / sum-of-squares of channel means over a sample index range.
#[derive(Clone, Debug, PartialEq)]
pub struct PartialStats {
    pub model_fingerprint: String,
    pub latent_seed: u64,
    pub range: Range<usize>,
    pub sum: Vec<Vec<f64>>,
    pub sum_sq: Vec<Vec<f64>>,
}

impl PartialStats {
    fn empty(model: &GeneratorModel, seed: u64, start: usize) -> Self {
        let zeros: Vec<Vec<f64>> =
            model.config().layer_specs().iter().map(|s| vec![0.0; s.out_channels]).collect();
        Self {
            model_fingerprint: model.fingerprint().to_string(),
            latent_seed: seed,
            range: start..start,
            sum: zeros.clone(),
            sum_sq: zeros,
        }
    }

    pub fn count(&self) -> usize {
        self.range.len()
    }

    fn push(&mut self, means: &[Vec<f64>]) {
        for (l, layer) in means.iter().enumerate() {
            for (j, &m) in layer.iter().enumerate() {
                self.sum[l][j] += m;
                self.sum_sq[l][j] += m * m;
            }
        }
        self.range.end += 1;
    }

    fn absorb(&mut self, other: &PartialStats) {
        for l in 0..self.sum.len() {
            for j in 0..self.sum[l].len() {
                self.sum[l][j] += other.sum[l][j];
                self.sum_sq[l][j] += other.sum_sq[l][j];
            }
        }
        self.range.end = other.range.end;
    }
}

/// Per-layer, per-channel spatial means of sample `index`.
pub fn sample_channel_means(model: &GeneratorModel, index: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
    let z = sample_latent(model.config().latent_dim, derive_seed(seed, 2 * index as u64));
    let options = GenerateOptions { psi: None, noise_seed: derive_seed(seed, 2 * index as u64 + 1) };
    let trace = generate(model, &z, &options, &mut NoHooks)?;
    Ok(trace
        .layers
        .iter()
        .map(|rec| (0..rec.info.channels).map(|c| rec.channel_mean(c)).collect())
        .collect())
}

/// Channel means of samples `range`, in index order, computed in parallel.
pub fn sample_means(model: &GeneratorModel, range: Range<usize>, seed: u64) -> Result<Vec<Vec<Vec<f64>>>> {
    range.into_par_iter().map(|i| sample_channel_means(model, i, seed)).collect()
}

/// Builds the partial sums for samples `start..start + means.len()`.
/// Summation is chunked in fixed blocks, so the result does not depend on
/// how the means were produced.
pub fn partial_from_means(model: &GeneratorModel, seed: u64, start: usize, means: &[Vec<Vec<f64>>]) -> PartialStats {
    let mut total = PartialStats::empty(model, seed, start);
    for chunk in means.chunks(CHUNK) {
        let mut part = PartialStats::empty(model, seed, total.range.end);
        for m in chunk {
            part.push(m);
        }
        total.absorb(&part);
    }
    total
}

/// Accumulates samples `range`. The result does not depend on the number of
/// worker threads.
pub fn estimate_partial(model: &GeneratorModel, range: Range<usize>, seed: u64) -> Result<PartialStats> {
    let start = range.start;
    let means = sample_means(model, range, seed)?;
    Ok(partial_from_means(model, seed, start, &means))
}

/// Combines partial sums into statistics (sample std, `N − 1` denominator).
/// Parts are reduced in sample-index order whatever order they arrive in.
pub fn merge_stats(parts: &[PartialStats]) -> Result<ChannelStats> {
    let first = parts.first().ok_or_else(|| Error::InvalidArgument("merge_stats needs at least one part".into()))?;
    let mut sorted: Vec<&PartialStats> = parts.iter().collect();
    sorted.sort_by_key(|p| p.range.start);
    for p in &sorted {
        check_fingerprint(&first.model_fingerprint, &p.model_fingerprint)?;
        if p.latent_seed != first.latent_seed {
            return Err(Error::InvalidArgument(format!(
                "parts use different seeds ({} and {})",
                first.latent_seed, p.latent_seed
            )));
        }
    }
    for pair in sorted.windows(2) {
        if pair[0].range.end > pair[1].range.start {
            return Err(Error::InvalidArgument(format!(
                "sample ranges {:?} and {:?} overlap",
                pair[0].range, pair[1].range
            )));
        }
    }
    let n: usize = sorted.iter().map(|p| p.count()).sum();
    if n < 2 {
        return Err(Error::InvalidArgument(format!("need at least 2 samples, got {n}")));
    }
    let mut mu = vec![];
    let mut sigma = vec![];
    for l in 0..first.sum.len() {
        let channels = first.sum[l].len();
        let mut layer_mu = Vec::with_capacity(channels);
        let mut layer_sigma = Vec::with_capacity(channels);
        for j in 0..channels {
            let (mut s, mut ss) = (0.0f64, 0.0f64);
            for p in &sorted {
                s += p.sum[l][j];
                ss += p.sum_sq[l][j];
            }
            let m = s / n as f64;
            let var = ((ss - s * m) / (n - 1) as f64).max(0.0);
            layer_mu.push(m as f32);
            layer_sigma.push(var.sqrt() as f32);
        }
        mu.push(layer_mu);
        sigma.push(layer_sigma);
    }
    Ok(ChannelStats {
        mu,
        sigma,
        meta: StatsMetadata {
            num_samples: n,
            latent_seed: first.latent_seed,
            noise_policy: NoisePolicy::FreshPerSample,
            model_fingerprint: first.model_fingerprint.clone(),
            created_at: None,
        },
    })
}

/// Estimates `(μ, σ)` from `num_samples` fresh generations without
/// truncation or hooks.
pub fn estimate_stats(model: &GeneratorModel, num_samples: usize, seed: u64) -> Result<ChannelStats> {
    if num_samples < 2 {
        return Err(Error::InvalidArgument(format!("estimate_stats needs num_samples >= 2, got {num_samples}")));
    }
    merge_stats(&[estimate_partial(model, 0..num_samples, seed)?])
}

#[derive(Debug, Serialize, Deserialize)]
struct StatsHeader {
    format: String,
    #[serde(flatten)]
    meta: StatsMetadata,
    layer_channels: Vec<usize>,
}

/// One JSON header line, then `(mu, sigma)` f32 LE pairs in
/// `(layer, channel)` order.
pub fn stats_bytes(stats: &ChannelStats) -> Vec<u8> {
    let header = StatsHeader {
        format: STATS_FORMAT.into(),
        meta: stats.meta.clone(),
        layer_channels: stats.mu.iter().map(Vec::len).collect(),
    };
    let mut out = serde_json::to_vec(&header).expect("header serializes");
    out.push(b'\n');
    for (mu, sigma) in stats.mu.iter().zip(&stats.sigma) {
        for (m, s) in mu.iter().zip(sigma) {
            out.extend_from_slice(&m.to_le_bytes());
            out.extend_from_slice(&s.to_le_bytes());
        }
    }
    out
}

/// Hex SHA-256 of the serialized stats file.
pub fn stats_fingerprint(stats: &ChannelStats) -> String {
    use sha2::{Digest, Sha256};
    hex::encode(Sha256::digest(stats_bytes(stats)))
}

pub fn parse_stats(bytes: &[u8]) -> Result<ChannelStats> {
    let newline = bytes.iter().position(|&b| b == b'\n').ok_or(Error::StatsParse {
        offset: bytes.len(),
        reason: "header line is not terminated".into(),
    })?;
    let header: StatsHeader = serde_json::from_slice(&bytes[..newline])
        .map_err(|e| Error::StatsParse { offset: e.column().saturating_sub(1), reason: e.to_string() })?;
    if header.format != STATS_FORMAT {
        return Err(Error::StatsParse { offset: 0, reason: format!("unknown format {:?}", header.format) });
    }
    let table = &bytes[newline + 1..];
    let entries: usize = header.layer_channels.iter().sum();
    let expected = entries.checked_mul(8).ok_or(Error::StatsParse { offset: 0, reason: "entry count overflows".into() })?;
    if table.len() != expected {
        return Err(Error::StatsParse {
            offset: newline + 1 + table.len().min(expected),
            reason: format!("table has {} bytes, header declares {expected}", table.len()),
        });
    }
    let mut values = table.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]));
    let (mut mu, mut sigma) = (vec![], vec![]);
    let mut offset = newline + 1;
    for &channels in &header.layer_channels {
        let (mut lm, mut ls) = (Vec::with_capacity(channels), Vec::with_capacity(channels));
        for _ in 0..channels {
            let m = values.next().expect("length checked");
            let s = values.next().expect("length checked");
            if !m.is_finite() || !s.is_finite() || s < 0.0 {
                return Err(Error::StatsParse { offset, reason: format!("invalid entry mu={m} sigma={s}") });
            }
            lm.push(m);
            ls.push(s);
            offset += 8;
        }
        mu.push(lm);
        sigma.push(ls);
    }
    Ok(ChannelStats { mu, sigma, meta: header.meta })
}

pub fn save_stats(stats: &ChannelStats, path: &Path) -> Result<()> {
    std::fs::write(path, stats_bytes(stats))?;
    Ok(())
}

/// Loads a stats file and checks it was estimated on `model`.
pub fn load_stats(path: &Path, model: &GeneratorModel) -> Result<ChannelStats> {
    let stats = parse_stats(&std::fs::read(path)?)?;
    stats.check_model(model)?;
    let expected: Vec<usize> = model.config().layer_specs().iter().map(|s| s.out_channels).collect();
    let found: Vec<usize> = stats.mu.iter().map(Vec::len).collect();
    if expected != found {
        return Err(Error::StatsParse { offset: 0, reason: format!("layer channels {found:?}, model has {expected:?}") });
    }
    Ok(stats)
}
