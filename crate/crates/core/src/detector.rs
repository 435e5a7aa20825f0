//! Per-channel risk scoring and dominated-feature ratios.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::generator::GenerationTrace;
use crate::stats::{check_fingerprint, ChannelStats};
use crate::tensor::{mean, Tensor};

pub const DEFAULT_T: f64 = 2.0;
pub const DEFAULT_C: f64 = 0.1;
pub const DEFAULT_RHO: f64 = 0.9;

/// `r = |mean(x) − μ| / max(σ, c)`.
pub fn risk(channel_mean: f64, mu: f32, sigma: f32, c: f64) -> f64 {
    (channel_mean - mu as f64).abs() / (sigma as f64).max(c)
}

/// Risk of every channel of one `[1, C, H, W]` map.
pub fn layer_risks(map: &Tensor, mu: &[f32], sigma: &[f32], c: f64) -> Result<Vec<f64>> {
    let (_, channels, _, _) = map.dims4()?;
    if channels != mu.len() || channels != sigma.len() {
        return Err(Error::shape(
            "layer_risks",
            format!("map has {channels} channels, stats have {}", mu.len()),
        ));
    }
    Ok((0..channels).map(|j| risk(mean(map.plane(0, j)), mu[j], sigma[j], c)).collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerRisk {
    pub layer_id: usize,
    pub r: Vec<f64>,
    pub flagged: Vec<bool>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RiskReport {
    pub t: f64,
    pub c: f64,
    pub layers: Vec<LayerRisk>,
}

impl RiskReport {
    pub fn flagged_count(&self) -> usize {
        self.layers.iter().map(|l| l.flagged.iter().filter(|&&f| f).count()).sum()
    }

    /// `(layer, channel)` pairs with `r > t`, in layer order.
    pub fn flagged(&self) -> Vec<(usize, usize)> {
        self.layers
            .iter()
            .flat_map(|l| l.flagged.iter().enumerate().filter(|(_, &f)| f).map(move |(j, _)| (l.layer_id, j)))
            .collect()
    }
}

fn check_trace(trace: &GenerationTrace, stats: &ChannelStats) -> Result<()> {
    check_fingerprint(&stats.meta.model_fingerprint, &trace.model_fingerprint)?;
    if trace.layers.len() != stats.num_layers() {
        return Err(Error::shape(
            "risk_scores",
            format!("trace has {} layers, stats have {}", trace.layers.len(), stats.num_layers()),
        ));
    }
    Ok(())
}

pub fn risk_scores(trace: &GenerationTrace, stats: &ChannelStats, t: f64, c: f64) -> Result<RiskReport> {
    check_trace(trace, stats)?;
    let layers = trace
        .layers
        .iter()
        .enumerate()
        .map(|(l, rec)| {
            let r = layer_risks(&rec.map, &stats.mu[l], &stats.sigma[l], c)?;
            let flagged = r.iter().map(|&v| v > t).collect();
            Ok(LayerRisk { layer_id: rec.info.layer_id, r, flagged })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(RiskReport { t, c, layers })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EtaMode {
    Proxy,
    Exact,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EtaTrace {
    pub mode: EtaMode,
    pub layer_ids: Vec<usize>,
    pub eta: Vec<f64>,
    pub source: Option<(usize, usize)>,
    pub rho: Option<f64>,
}

impl EtaTrace {
    pub fn last(&self) -> f64 {
        *self.eta.last().expect("at least one layer")
    }
}

/// Fraction of flagged channels per layer.
pub fn eta_proxy_trace(trace: &GenerationTrace, stats: &ChannelStats, t: f64, c: f64) -> Result<EtaTrace> {
    Ok(eta_from_report(&risk_scores(trace, stats, t, c)?))
}

pub fn eta_from_report(report: &RiskReport) -> EtaTrace {
    EtaTrace {
        mode: EtaMode::Proxy,
        layer_ids: report.layers.iter().map(|l| l.layer_id).collect(),
        eta: report
            .layers
            .iter()
            .map(|l| l.flagged.iter().filter(|&&f| f).count() as f64 / l.flagged.len() as f64)
            .collect(),
        source: None,
        rho: None,
    }
}

/// Nearest-neighbour resize of an `h × w` plane to `size × size`.
fn resize_nearest(plane: &[f32], h: usize, w: usize, size: usize) -> Vec<f32> {
    let mut out = Vec::with_capacity(size * size);
    for y in 0..size {
        let sy = y * h / size;
        for x in 0..size {
            out.push(plane[sy * w + x * w / size]);
        }
    }
    out
}

/// Pearson correlation; 0 when either side is constant.
pub fn pearson(a: &[f32], b: &[f32]) -> f64 {
    let ma = mean(a);
    let mb = mean(b);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        let (dx, dy) = (x as f64 - ma, y as f64 - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        return 0.0;
    }
    (sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0)
}

/// Exact (slow) dominated-feature ratio: for the source layer and every
/// later layer, the fraction of channels whose correlation with the resized
/// source map is at least `rho`.
pub fn exact_domination_set(trace: &GenerationTrace, source: (usize, usize), rho: f64) -> Result<EtaTrace> {
    let (layer, channel) = source;
    let rec = trace
        .layers
        .get(layer)
        .filter(|r| channel < r.info.channels)
        .ok_or(Error::InvalidPosition { layer, channel })?;
    if !(rho > 0.0 && rho <= 1.0) {
        return Err(Error::InvalidArgument(format!("rho must be in (0, 1], got {rho}")));
    }
    let res = rec.info.resolution;
    let src = rec.map.plane(0, channel);
    let mut layer_ids = vec![];
    let mut eta = vec![];
    for target in &trace.layers[layer..] {
        let size = target.info.resolution;
        let resized = resize_nearest(src, res, res, size);
        let dominated = (0..target.info.channels)
            .filter(|&j| pearson(&resized, target.map.plane(0, j)) >= rho - 1e-12)
            .count();
        layer_ids.push(target.info.layer_id);
        eta.push(dominated as f64 / target.info.channels as f64);
    }
    Ok(EtaTrace { mode: EtaMode::Exact, layer_ids, eta, source: Some(source), rho: Some(rho) })
}
