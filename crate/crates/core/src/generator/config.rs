use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::UpsampleMode;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormalizationMode {
    /// StyleGAN2: styles scale the conv weights, which are then renormalized
    /// per output channel. Activations are never normalized.
    Demodulation,
    /// StyleGAN1: each feature map is standardized and re-styled after the
    /// activation.
    Adain,
}

impl std::fmt::Display for NormalizationMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            NormalizationMode::Demodulation => "demodulation",
            NormalizationMode::Adain => "adain",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub latent_dim: usize,
    pub mapping_layers: usize,
    pub base_resolution: usize,
    pub max_resolution: usize,
    /// Channel count per resolution; keys must cover base..=max.
    pub channels: BTreeMap<usize, usize>,
    pub normalization: NormalizationMode,
    /// Multiply leaky-ReLU outputs by √2.
    pub activation_gain: bool,
    pub epsilon: f32,
    pub upsample: UpsampleMode,
    pub seed: u64,
}

/// One instrumented synthesis convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerSpec {
    pub id: usize,
    pub resolution: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    /// Upsample the input 2× before the convolution.
    pub upsample: bool,
    /// Last conv at its resolution; feeds a toRGB head.
    pub emits_rgb: bool,
}

impl GeneratorConfig {
    /// Desk-scale model: 4→64 px, 64-d latent, two mapping layers.
    pub fn toy(normalization: NormalizationMode) -> Self {
        Self {
            latent_dim: 64,
            mapping_layers: 2,
            base_resolution: 4,
            max_resolution: 64,
            channels: [(4, 64), (8, 64), (16, 32), (32, 32), (64, 16)].into_iter().collect(),
            normalization,
            activation_gain: true,
            epsilon: 1e-8,
            upsample: UpsampleMode::Nearest,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if self.latent_dim == 0 {
            return bad("latent_dim must be >= 1".into());
        }
        if !self.base_resolution.is_power_of_two() || !self.max_resolution.is_power_of_two() {
            return bad("resolutions must be powers of two".into());
        }
        if self.base_resolution < 2 || self.max_resolution < self.base_resolution {
            return bad(format!(
                "need 2 <= base_resolution <= max_resolution, got {} and {}",
                self.base_resolution, self.max_resolution
            ));
        }
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return bad("epsilon must be positive".into());
        }
        for res in self.resolutions() {
            match self.channels.get(&res) {
                Some(&c) if c >= 1 => {}
                Some(_) => return bad(format!("channel count at {res} must be >= 1")),
                None => return bad(format!("no channel count for resolution {res}")),
            }
        }
        if let Some(extra) = self.channels.keys().find(|r| !self.resolutions().contains(r)) {
            return bad(format!("channel entry for unused resolution {extra}"));
        }
        Ok(())
    }

    pub fn resolutions(&self) -> Vec<usize> {
        let mut out = vec![];
        let mut r = self.base_resolution;
        while r <= self.max_resolution {
            out.push(r);
            r *= 2;
        }
        out
    }

    pub fn channels_at(&self, resolution: usize) -> usize {
        self.channels[&resolution]
    }

    /// Synthesis convolutions in forward order: one at the base resolution,
    /// two (upsampling + refining) at each higher one.
    pub fn layer_specs(&self) -> Vec<LayerSpec> {
        let mut specs = vec![];
        let res = self.resolutions();
        let c0 = self.channels_at(res[0]);
        specs.push(LayerSpec {
            id: 0,
            resolution: res[0],
            in_channels: c0,
            out_channels: c0,
            upsample: false,
            emits_rgb: true,
        });
        for pair in res.windows(2) {
            let (cin, cout) = (self.channels_at(pair[0]), self.channels_at(pair[1]));
            let id = specs.len();
            specs.push(LayerSpec {
                id,
                resolution: pair[1],
                in_channels: cin,
                out_channels: cout,
                upsample: true,
                emits_rgb: false,
            });
            specs.push(LayerSpec {
                id: id + 1,
                resolution: pair[1],
                in_channels: cout,
                out_channels: cout,
                upsample: false,
                emits_rgb: true,
            });
        }
        specs
    }

    pub fn num_layers(&self) -> usize {
        1 + 2 * (self.resolutions().len() - 1)
    }

    pub fn total_channels(&self) -> usize {
        self.layer_specs().iter().map(|l| l.out_channels).sum()
    }

    /// Width of the style vector produced for a layer.
    pub fn style_width(&self, spec: &LayerSpec) -> usize {
        match self.normalization {
            NormalizationMode::Demodulation => spec.in_channels,
            NormalizationMode::Adain => 2 * spec.out_channels,
        }
    }

    pub fn activation_gain_value(&self) -> f32 {
        if self.activation_gain {
            std::f32::consts::SQRT_2
        } else {
            1.0
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toy_layout() {
        let cfg = GeneratorConfig::toy(NormalizationMode::Demodulation);
        cfg.validate().unwrap();
        let specs = cfg.layer_specs();
        assert_eq!(specs.len(), 9);
        assert_eq!(cfg.num_layers(), 9);
        assert_eq!(specs[1].resolution, 8);
        assert!(specs[1].upsample && !specs[1].emits_rgb);
        assert_eq!((specs[3].in_channels, specs[3].out_channels), (64, 32));
        assert_eq!(specs[8].out_channels, 16);
        assert_eq!(cfg.total_channels(), 64 + 128 + 64 + 64 + 32);
    }

    #[test]
    fn rejects_bad_configs() {
        let mut cfg = GeneratorConfig::toy(NormalizationMode::Adain);
        cfg.max_resolution = 48;
        assert!(cfg.validate().is_err());
        let mut cfg = GeneratorConfig::toy(NormalizationMode::Adain);
        cfg.channels.insert(16, 0);
        assert!(cfg.validate().is_err());
        let mut cfg = GeneratorConfig::toy(NormalizationMode::Adain);
        cfg.channels.remove(&32);
        assert!(cfg.validate().is_err());
    }
}
