//! Inline treatments and manipulations, all run as [`FeatureHook`]s.
//!
//! Hooks see each layer's map after it is computed and before the next
//! layer reads it, so every rewrite propagates downstream.

use log::{debug, warn};
use serde::{Deserialize, Serialize};

use crate::detector::{layer_risks, DEFAULT_C, DEFAULT_T};
use crate::error::{Error, Result};
use crate::generator::{FeatureHook, GeneratorModel, LayerInfo};
use crate::stats::ChannelStats;
use crate::tensor::Tensor;

pub const DEFAULT_P: f64 = 2.0;
pub const DEFAULT_T_PRIME: f64 = 0.5;
const PIXEL_NORM_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CureMode {
    ChannelWise,
    LayerWise,
    PixelWise,
    /// Zero every flagged channel.
    Zero,
    #[default]
    Off,
}

impl std::str::FromStr for CureMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "channel_wise" | "channel" => CureMode::ChannelWise,
            "layer_wise" | "layer" => CureMode::LayerWise,
            "pixel_wise" | "pixel" => CureMode::PixelWise,
            "zero" => CureMode::Zero,
            "off" => CureMode::Off,
            _ => return Err(Error::InvalidArgument(format!("unknown cure mode {s:?}"))),
        })
    }
}

impl std::fmt::Display for CureMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            CureMode::ChannelWise => "channel_wise",
            CureMode::LayerWise => "layer_wise",
            CureMode::PixelWise => "pixel_wise",
            CureMode::Zero => "zero",
            CureMode::Off => "off",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CureConfig {
    pub mode: CureMode,
    pub t: f64,
    pub p: f64,
    pub c: f64,
    pub t_prime: f64,
    /// Inclusive `[first, last]` layer ids the cure may act on.
    pub layer_range: Option<(usize, usize)>,
}

impl Default for CureConfig {
    fn default() -> Self {
        Self { mode: CureMode::Off, t: DEFAULT_T, p: DEFAULT_P, c: DEFAULT_C, t_prime: DEFAULT_T_PRIME, layer_range: None }
    }
}

impl CureConfig {
    pub fn with_mode(mode: CureMode) -> Self {
        Self { mode, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.p > 0.0 && self.p.is_finite()) {
            return Err(Error::InvalidArgument(format!("p must be positive, got {}", self.p)));
        }
        if !(self.t >= 0.0 && self.t.is_finite()) {
            return Err(Error::InvalidArgument(format!("t must be non-negative, got {}", self.t)));
        }
        if !(self.c > 0.0 && self.c.is_finite()) {
            return Err(Error::InvalidArgument(format!("c must be positive, got {}", self.c)));
        }
        if !self.t_prime.is_finite() {
            return Err(Error::InvalidArgument("t_prime must be finite".into()));
        }
        if let Some((a, b)) = self.layer_range {
            if a > b {
                return Err(Error::InvalidArgument(format!("empty layer range [{a}, {b}]")));
            }
        }
        Ok(())
    }

    pub fn in_range(&self, layer: usize) -> bool {
        self.layer_range.is_none_or(|(a, b)| (a..=b).contains(&layer))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActionKind {
    Rescale,
    Zero,
    PixelNorm,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CureAction {
    pub layer: usize,
    /// `None` for whole-layer actions.
    pub channel: Option<usize>,
    pub kind: ActionKind,
    pub r: Option<f64>,
    /// Multiplier applied to the channel (`1 / (p·r)` for rescaling).
    pub scale: Option<f64>,
}

/// `x / (p·r)`.
pub fn rescale_channel(x: &[f32], r: f64, p: f64) -> Result<Vec<f32>> {
    if r.is_nan() || p.is_nan() || r <= 0.0 || p <= 0.0 {
        return Err(Error::InvalidArgument(format!("rescale needs r > 0 and p > 0, got r={r}, p={p}")));
    }
    let d = (p * r) as f32;
    Ok(x.iter().map(|v| v / d).collect())
}

fn rescale_in_place(x: &mut [f32], r: f64, p: f64) {
    let d = (p * r) as f32;
    x.iter_mut().for_each(|v| *v /= d);
}

/// Correlation of each channel with the layer's mean absolute flagged map:
/// `c_j = Σ(|x_j| · x̄) / Σ|x_j|`, where `x̄` is the standardized mean of
/// `|x_k|` over flagged `k`. `None` if nothing is flagged or `x̄` is
/// undefined (constant).
pub fn layer_wise_coefficients(map: &Tensor, flagged: &[bool]) -> Result<Option<Vec<f64>>> {
    let (_, channels, h, w) = map.dims4()?;
    if flagged.len() != channels {
        return Err(Error::shape("layer_wise_coefficients", format!("{} flags for {channels} channels", flagged.len())));
    }
    let picked: Vec<usize> = (0..channels).filter(|&j| flagged[j]).collect();
    if picked.is_empty() {
        return Ok(None);
    }
    let n = h * w;
    let mut hat = vec![0.0f64; n];
    for &j in &picked {
        for (acc, &v) in hat.iter_mut().zip(map.plane(0, j)) {
            *acc += v.abs() as f64;
        }
    }
    hat.iter_mut().for_each(|v| *v /= picked.len() as f64);
    let m = hat.iter().sum::<f64>() / n as f64;
    let sd = (hat.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n as f64).sqrt();
    if sd == 0.0 {
        return Ok(None);
    }
    let bar: Vec<f64> = hat.iter().map(|v| (v - m) / sd).collect();
    Ok(Some(
        (0..channels)
            .map(|j| {
                let (mut num, mut den) = (0.0, 0.0);
                for (&v, &b) in map.plane(0, j).iter().zip(&bar) {
                    num += v.abs() as f64 * b;
                    den += v.abs() as f64;
                }
                if den == 0.0 {
                    0.0
                } else {
                    num / den
                }
            })
            .collect(),
    ))
}

/// Divides each pixel's channel vector by its RMS.
pub fn pixel_wise_normalize(map: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = map.dims4()?;
    let plane = h * w;
    let mut out = map.clone();
    for b in 0..n {
        for i in 0..plane {
            let ms = (0..c).map(|j| (map.data()[(b * c + j) * plane + i] as f64).powi(2)).sum::<f64>() / c as f64;
            let scale = 1.0 / (ms + PIXEL_NORM_EPS).sqrt();
            for j in 0..c {
                let idx = (b * c + j) * plane + i;
                out.data_mut()[idx] = (map.data()[idx] as f64 * scale) as f32;
            }
        }
    }
    Ok(out)
}

/// Detection plus treatment at every instrumented layer, in layer order.
/// Later layers are scored on the already-treated stream.
pub struct CureHooks<'a> {
    config: CureConfig,
    stats: &'a ChannelStats,
    log: Vec<CureAction>,
}

impl<'a> CureHooks<'a> {
    pub fn new(config: CureConfig, stats: &'a ChannelStats, model: &GeneratorModel) -> Result<Self> {
        config.validate()?;
        if config.mode != CureMode::Off {
            stats.check_model(model)?;
        }
        if config.mode == CureMode::ChannelWise && config.p * config.t < 1.0 {
            warn!("p·t = {} < 1: flagged channels with r < 1/p will be amplified", config.p * config.t);
        }
        Ok(Self { config, stats, log: vec![] })
    }

    pub fn config(&self) -> &CureConfig {
        &self.config
    }

    pub fn log(&self) -> &[CureAction] {
        &self.log
    }

    pub fn into_log(self) -> Vec<CureAction> {
        self.log
    }

    fn rescale(&mut self, layer: usize, channel: usize, r: f64, maps: &mut Tensor) {
        let scale = 1.0 / (self.config.p * r);
        if scale > 1.0 {
            if self.config.mode == CureMode::LayerWise {
                warn!("layer {layer} channel {channel}: rescale factor {scale:.3} amplifies the map");
            } else {
                debug!("layer {layer} channel {channel}: rescale factor {scale:.3} amplifies the map");
            }
        }
        rescale_in_place(maps.plane_mut(0, channel), r, self.config.p);
        self.log.push(CureAction { layer, channel: Some(channel), kind: ActionKind::Rescale, r: Some(r), scale: Some(scale) });
    }
}

impl FeatureHook for CureHooks<'_> {
    fn on_layer(&mut self, info: &LayerInfo, maps: &mut Tensor) -> Result<()> {
        let layer = info.layer_id;
        if self.config.mode == CureMode::Off || !self.config.in_range(layer) {
            return Ok(());
        }
        if self.config.mode == CureMode::PixelWise {
            *maps = pixel_wise_normalize(maps)?;
            self.log.push(CureAction { layer, channel: None, kind: ActionKind::PixelNorm, r: None, scale: None });
            return Ok(());
        }
        if layer >= self.stats.num_layers() {
            return Err(Error::InvalidPosition { layer, channel: 0 });
        }
        let r = layer_risks(maps, &self.stats.mu[layer], &self.stats.sigma[layer], self.config.c)?;
        let flagged: Vec<bool> = r.iter().map(|&v| v > self.config.t).collect();
        match self.config.mode {
            CureMode::ChannelWise => {
                for j in (0..r.len()).filter(|&j| flagged[j]) {
                    self.rescale(layer, j, r[j], maps);
                }
            }
            CureMode::Zero => {
                for j in (0..r.len()).filter(|&j| flagged[j]) {
                    maps.plane_mut(0, j).fill(0.0);
                    self.log.push(CureAction { layer, channel: Some(j), kind: ActionKind::Zero, r: Some(r[j]), scale: Some(0.0) });
                }
            }
            CureMode::LayerWise => {
                if !flagged.contains(&true) {
                    return Ok(());
                }
                let Some(coeffs) = layer_wise_coefficients(maps, &flagged)? else {
                    warn!("layer {layer}: mean flagged map is constant, skipping layer-wise cure");
                    return Ok(());
                };
                for j in 0..coeffs.len() {
                    if coeffs[j] > self.config.t_prime && r[j] > 0.0 {
                        self.rescale(layer, j, r[j], maps);
                    }
                }
            }
            CureMode::PixelWise | CureMode::Off => unreachable!(),
        }
        Ok(())
    }
}

/// Zeroes fixed `(layer, channel)` positions.
#[derive(Clone, Debug)]
pub struct ZeroChannels {
    targets: Vec<(usize, usize)>,
}

impl ZeroChannels {
    pub fn new(model: &GeneratorModel, targets: Vec<(usize, usize)>) -> Result<Self> {
        let specs = model.config().layer_specs();
        for &(layer, channel) in &targets {
            if specs.get(layer).is_none_or(|s| channel >= s.out_channels) {
                return Err(Error::InvalidPosition { layer, channel });
            }
        }
        Ok(Self { targets })
    }
}

impl FeatureHook for ZeroChannels {
    fn on_layer(&mut self, info: &LayerInfo, maps: &mut Tensor) -> Result<()> {
        for &(layer, channel) in &self.targets {
            if layer == info.layer_id {
                zero_channel(maps, channel)?;
            }
        }
        Ok(())
    }
}

pub fn zero_channel(maps: &mut Tensor, channel: usize) -> Result<()> {
    let (_, c, _, _) = maps.dims4()?;
    if channel >= c {
        return Err(Error::InvalidArgument(format!("channel {channel} out of range for {c} channels")));
    }
    maps.plane_mut(0, channel).fill(0.0);
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CancerPayload {
    /// Adds `m · max(σ, c)` to every element of the target channel.
    Synthetic { m: f64 },
    /// Replaces the target channel with a `[H, W]` map.
    Stored(Tensor),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CancerSpec {
    pub layer: usize,
    pub channel: usize,
    pub payload: CancerPayload,
}

/// Injects an outlier channel during the forward pass.
#[derive(Clone, Debug)]
pub struct CancerHook {
    spec: CancerSpec,
    offset: f32,
}

impl CancerHook {
    pub fn new(spec: CancerSpec, model: &GeneratorModel, stats: &ChannelStats, c: f64) -> Result<Self> {
        let specs = model.config().layer_specs();
        let target = specs
            .get(spec.layer)
            .filter(|s| spec.channel < s.out_channels)
            .ok_or(Error::InvalidPosition { layer: spec.layer, channel: spec.channel })?;
        let offset = match &spec.payload {
            CancerPayload::Synthetic { m } => {
                stats.check_model(model)?;
                let sigma = stats.sigma[spec.layer][spec.channel] as f64;
                (m * sigma.max(c)) as f32
            }
            CancerPayload::Stored(map) => {
                let res = target.resolution;
                if map.shape() != [res, res] {
                    return Err(Error::shape(
                        "inject_cancer",
                        format!("payload {:?} does not match layer {} ({res}x{res})", map.shape(), spec.layer),
                    ));
                }
                0.0
            }
        };
        Ok(Self { spec, offset })
    }

    pub fn spec(&self) -> &CancerSpec {
        &self.spec
    }
}

impl FeatureHook for CancerHook {
    fn on_layer(&mut self, info: &LayerInfo, maps: &mut Tensor) -> Result<()> {
        if info.layer_id != self.spec.layer {
            return Ok(());
        }
        let plane = maps.plane_mut(0, self.spec.channel);
        match &self.spec.payload {
            CancerPayload::Synthetic { .. } => plane.iter_mut().for_each(|v| *v += self.offset),
            CancerPayload::Stored(map) => plane.copy_from_slice(map.data()),
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::generator::{generate, random_init, GenerateOptions, GeneratorConfig, NoHooks, NormalizationMode};
    use crate::rng::sample_latent;
    use crate::stats::{NoisePolicy, StatsMetadata};
    use proptest::prelude::*;
    use std::collections::BTreeMap;
    use std::sync::OnceLock;

    fn small_model() -> &'static GeneratorModel {
        static M: OnceLock<GeneratorModel> = OnceLock::new();
        M.get_or_init(|| {
            let mut cfg = GeneratorConfig::toy(NormalizationMode::Demodulation);
            cfg.max_resolution = 16;
            cfg.channels = BTreeMap::from([(4, 8), (8, 8), (16, 4)]);
            random_init(&cfg, 7).unwrap()
        })
    }

    fn small_stats() -> &'static ChannelStats {
        static S: OnceLock<ChannelStats> = OnceLock::new();
        S.get_or_init(|| crate::stats::estimate_stats(small_model(), 200, 1).unwrap())
    }

    fn const_stats(channels: &[usize], mu: f32, sigma: f32) -> ChannelStats {
        ChannelStats {
            mu: channels.iter().map(|&c| vec![mu; c]).collect(),
            sigma: channels.iter().map(|&c| vec![sigma; c]).collect(),
            meta: StatsMetadata {
                num_samples: 2,
                latent_seed: 0,
                noise_policy: NoisePolicy::FreshPerSample,
                model_fingerprint: small_model().fingerprint().into(),
                created_at: None,
            },
        }
    }

    fn run(hooks: &mut dyn FeatureHook, seed: u64) -> crate::generator::GenerationTrace {
        let z = sample_latent(64, seed);
        generate(small_model(), &z, &GenerateOptions { psi: None, noise_seed: seed }, hooks).unwrap()
    }

    #[test]
    fn unit_scale_is_identity() {
        let x: Vec<f32> = (0..16).map(|i| (i as f32).sin() * 3.0).collect();
        assert_eq!(rescale_channel(&x, 0.5, 2.0).unwrap(), x);
    }

    #[test]
    fn rescale_divides_by_p_r() {
        let x = vec![8.0, -16.0, 4.0, 1.0];
        assert_eq!(rescale_channel(&x, 4.0, 2.0).unwrap(), vec![1.0, -2.0, 0.5, 0.125]);
        assert!(rescale_channel(&x, 0.0, 2.0).is_err());
        assert!(rescale_channel(&x, -1.0, 2.0).is_err());
    }

    #[test]
    fn flagged_rescale_shrinks_by_more_than_four() {
        let mut rng = crate::rng::stream_rng(3, 0);
        for _ in 0..200 {
            let x = crate::rng::normal_tensor(&[8, 8], &mut rng).map(|v| v + 3.0);
            let r = crate::detector::risk(x.mean(), 0.0, 1.0, DEFAULT_C);
            assert!(r > DEFAULT_T);
            let out = rescale_channel(x.data(), r, DEFAULT_P).unwrap();
            let max_in = x.data().iter().fold(0.0f32, |m, v| m.max(v.abs()));
            let max_out = out.iter().fold(0.0f32, |m, v| m.max(v.abs()));
            assert!(max_out < max_in / 4.0);
        }
    }

    #[test]
    fn two_by_two_coefficient_oracle() {
        // One flagged channel: x̂ = |x|, so c is the |x|-weighted mean of x̄.
        let x = [1.0f32, -2.0, 3.0, 0.5];
        let map = Tensor::new(vec![1, 2, 2, 2], [x.to_vec(), vec![1.0, 1.0, 0.0, 0.0]].concat()).unwrap();
        let c = layer_wise_coefficients(&map, &[true, false]).unwrap().unwrap();

        let a = [1.0f64, 2.0, 3.0, 0.5];
        let m = (1.0 + 2.0 + 3.0 + 0.5) / 4.0;
        let var = ((1.0 - m) * (1.0 - m) + (2.0 - m) * (2.0 - m) + (3.0 - m) * (3.0 - m) + (0.5 - m) * (0.5 - m)) / 4.0;
        let sd: f64 = f64::sqrt(var);
        let bar: Vec<f64> = a.iter().map(|v| (v - m) / sd).collect();
        let c0 = (a[0] * bar[0] + a[1] * bar[1] + a[2] * bar[2] + a[3] * bar[3]) / 6.5;
        let c1 = (bar[0] + bar[1]) / 2.0;
        assert!((c[0] - c0).abs() < 1e-6, "{} vs {c0}", c[0]);
        assert!((c[1] - c1).abs() < 1e-6);
    }

    #[test]
    fn orthogonal_channel_has_zero_coefficient() {
        // x̄ = [1, -1, 1, -1]; |x_1| = [1, 1, 1, 1] has zero inner product.
        let map = Tensor::new(vec![1, 2, 2, 2], vec![2.0, 0.0, 2.0, 0.0, 1.0, -1.0, 1.0, -1.0]).unwrap();
        let c = layer_wise_coefficients(&map, &[true, false]).unwrap().unwrap();
        assert_eq!(c[1], 0.0);
        assert!(c[1] <= DEFAULT_T_PRIME);
    }

    #[test]
    fn coefficients_degenerate_cases() {
        let map = Tensor::full(&[1, 2, 2, 2], 1.0);
        assert_eq!(layer_wise_coefficients(&map, &[false, false]).unwrap(), None);
        assert_eq!(layer_wise_coefficients(&map, &[true, false]).unwrap(), None);
    }

    #[test]
    fn pixel_norm_examples() {
        let out = pixel_wise_normalize(&Tensor::full(&[1, 1, 2, 2], -3.0)).unwrap();
        assert!(out.data().iter().all(|&v| (v + 1.0).abs() < 1e-6));

        let map = Tensor::from_fn(&[1, 5, 3, 3], |i| (i as f32 * 1.3).sin() * 4.0 + 0.5);
        let out = pixel_wise_normalize(&map).unwrap();
        for i in 0..9 {
            let ms: f64 = (0..5).map(|c| (out.data()[c * 9 + i] as f64).powi(2)).sum::<f64>() / 5.0;
            assert!((ms - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn off_and_healthy_are_bitwise_noops() {
        let base = run(&mut NoHooks, 11);
        let stats = const_stats(&[8, 8, 8, 4, 4], 0.0, 1e6);
        let mut off = CureHooks::new(CureConfig::default(), &stats, small_model()).unwrap();
        assert_eq!(run(&mut off, 11), base);
        let mut healthy = CureHooks::new(CureConfig::with_mode(CureMode::ChannelWise), &stats, small_model()).unwrap();
        assert_eq!(run(&mut healthy, 11), base);
        assert!(healthy.log().is_empty());
    }

    #[test]
    fn null_injection_is_identity() {
        let base = run(&mut NoHooks, 4);
        let spec = CancerSpec { layer: 1, channel: 2, payload: CancerPayload::Synthetic { m: 0.0 } };
        let mut hook = CancerHook::new(spec, small_model(), small_stats(), DEFAULT_C).unwrap();
        assert_eq!(run(&mut hook, 4), base);
    }

    #[test]
    fn injection_is_logged_and_range_gated() {
        let spec = CancerSpec { layer: 2, channel: 0, payload: CancerPayload::Synthetic { m: 50.0 } };
        let inject = CancerHook::new(spec, small_model(), small_stats(), DEFAULT_C).unwrap();
        let cure = CureHooks::new(CureConfig::with_mode(CureMode::ChannelWise), small_stats(), small_model()).unwrap();
        let mut hooks = (inject.clone(), cure);
        run(&mut hooks, 5);
        assert!(hooks.1.log().iter().any(|a| a.layer == 2 && a.channel == Some(0)));

        let gated = CureConfig { layer_range: Some((3, 3)), ..CureConfig::with_mode(CureMode::ChannelWise) };
        let mut hooks = (inject, CureHooks::new(gated, small_stats(), small_model()).unwrap());
        run(&mut hooks, 5);
        assert!(hooks.1.log().iter().all(|a| a.layer == 3));
    }

    #[test]
    fn log_precedes_every_difference() {
        let spec = CancerSpec { layer: 1, channel: 3, payload: CancerPayload::Synthetic { m: 8.0 } };
        let inject = CancerHook::new(spec, small_model(), small_stats(), DEFAULT_C).unwrap();
        let uncured = run(&mut inject.clone(), 6);
        let cure = CureHooks::new(CureConfig::with_mode(CureMode::ChannelWise), small_stats(), small_model()).unwrap();
        let mut hooks = (inject, cure);
        let cured = run(&mut hooks, 6);
        let first_action = hooks.1.log().iter().map(|a| a.layer).min();
        for (a, b) in uncured.layers.iter().zip(&cured.layers) {
            if a.map != b.map {
                assert!(first_action.is_some_and(|l| l <= a.info.layer_id));
            }
        }
        let mut layers: Vec<usize> = hooks.1.log().iter().map(|a| a.layer).collect();
        let sorted = {
            let mut s = layers.clone();
            s.sort();
            s
        };
        assert_eq!(layers, sorted);
        layers.dedup();
    }

    #[test]
    fn zeroing_zero_channel_changes_nothing() {
        let zeroed = ZeroChannels::new(small_model(), vec![(1, 2)]).unwrap();
        let once = run(&mut zeroed.clone(), 8);
        let mut twice = (zeroed.clone(), zeroed);
        assert_eq!(run(&mut twice, 8), once);
        assert!(once.layers[1].map.plane(0, 2).iter().all(|&v| v == 0.0));
        assert!(matches!(ZeroChannels::new(small_model(), vec![(1, 99)]), Err(Error::InvalidPosition { .. })));
    }

    #[test]
    fn rescale_skips_zeroed_channel_near_mu() {
        // μ = 0 so a zeroed channel has r = 0 and is never flagged.
        let stats = const_stats(&[8, 8, 8, 4, 4], 0.0, 1.0);
        let zero = ZeroChannels::new(small_model(), vec![(2, 1)]).unwrap();
        let cure = CureHooks::new(CureConfig::with_mode(CureMode::ChannelWise), &stats, small_model()).unwrap();
        let mut hooks = (zero, cure);
        run(&mut hooks, 9);
        assert!(!hooks.1.log().iter().any(|a| a.layer == 2 && a.channel == Some(1)));
    }

    #[test]
    fn stored_payload_shape_is_checked() {
        let spec = CancerSpec { layer: 1, channel: 0, payload: CancerPayload::Stored(Tensor::zeros(&[4, 4])) };
        assert!(matches!(CancerHook::new(spec, small_model(), small_stats(), DEFAULT_C), Err(Error::Shape { .. })));
        let spec = CancerSpec { layer: 1, channel: 0, payload: CancerPayload::Stored(Tensor::full(&[8, 8], 2.0)) };
        let mut hook = CancerHook::new(spec, small_model(), small_stats(), DEFAULT_C).unwrap();
        let trace = run(&mut hook, 1);
        assert!(trace.layers[1].map.plane(0, 0).iter().all(|&v| v == 2.0));
    }

    #[test]
    fn config_validation() {
        assert!(CureConfig { p: 0.0, ..CureConfig::default() }.validate().is_err());
        assert!(CureConfig { c: 0.0, ..CureConfig::default() }.validate().is_err());
        assert!(CureConfig { t: -1.0, ..CureConfig::default() }.validate().is_err());
        assert!(CureConfig { layer_range: Some((3, 2)), ..CureConfig::default() }.validate().is_err());
        assert_eq!("channel_wise".parse::<CureMode>().unwrap(), CureMode::ChannelWise);
        assert!("bogus".parse::<CureMode>().is_err());
    }

    proptest! {
        #[test]
        fn rescale_is_linear(x in prop::collection::vec(-10.0f32..10.0, 1..32), alpha in -4i32..4, r in 0.1f64..10.0, p in 0.5f64..4.0) {
            let alpha = alpha as f32;
            let scaled: Vec<f32> = x.iter().map(|v| v * alpha).collect();
            let lhs = rescale_channel(&scaled, r, p).unwrap();
            let rhs: Vec<f32> = rescale_channel(&x, r, p).unwrap().iter().map(|v| v * alpha).collect();
            for (a, b) in lhs.iter().zip(&rhs) {
                prop_assert!((a - b).abs() <= 1e-6 * (1.0 + b.abs()));
            }
        }

        #[test]
        fn coefficient_is_scale_invariant(x in prop::collection::vec(-5.0f32..5.0, 32), alpha in 0.1f32..10.0) {
            let map = Tensor::new(vec![1, 2, 4, 4], x).unwrap();
            let mut scaled = map.clone();
            scaled.plane_mut(0, 1).iter_mut().for_each(|v| *v *= alpha);
            let flags = [true, false];
            if let (Some(a), Some(b)) = (layer_wise_coefficients(&map, &flags).unwrap(), layer_wise_coefficients(&scaled, &flags).unwrap()) {
                prop_assert!((a[1] - b[1]).abs() < 1e-6);
            }
        }
    }
}
