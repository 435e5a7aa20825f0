use std::collections::BTreeMap;

use super::config::{GeneratorConfig, NormalizationMode};
use crate::error::{ContainerError, Error, Result};
use crate::rng::{normal_tensor, stream_rng};
use crate::tensor::Tensor;
use crate::weight_io;

/// Scale of randomly initialized per-channel noise strengths.
pub const NOISE_STRENGTH_INIT: f32 = 0.1;

#[derive(Clone, Debug, PartialEq)]
pub struct MappingLayer {
    pub weight: Tensor,
    pub bias: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthesisLayer {
    /// `[Cout, Cin, 3, 3]`.
    pub weight: Tensor,
    pub bias: Tensor,
    /// Maps `w` to the layer's style vector: `s` (`[Cin]`) under
    /// demodulation, `(y_s, y_b)` (`[2·Cout]`) under AdaIN.
    pub style_weight: Tensor,
    pub style_bias: Tensor,
    pub noise_strength: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ToRgb {
    pub weight: Tensor,
    pub bias: Tensor,
    pub style_weight: Tensor,
    pub style_bias: Tensor,
}

/// Immutable generator weights. `w_avg` is the only field set after
/// construction (see [`super::estimate_w_avg`]).
#[derive(Clone, Debug)]
pub struct GeneratorModel {
    config: GeneratorConfig,
    pub(crate) mapping: Vec<MappingLayer>,
    pub(crate) constant: Tensor,
    pub(crate) layers: Vec<SynthesisLayer>,
    pub(crate) to_rgb: Vec<ToRgb>,
    pub(crate) w_avg: Option<Tensor>,
    fingerprint: String,
}

impl PartialEq for GeneratorModel {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config
            && self.mapping == other.mapping
            && self.constant == other.constant
            && self.layers == other.layers
            && self.to_rgb == other.to_rgb
            && self.w_avg == other.w_avg
    }
}

/// Name and shape of every tensor a config requires, in directory order.
pub fn tensor_specs(config: &GeneratorConfig) -> Vec<(String, Vec<usize>)> {
    let d = config.latent_dim;
    let mut specs = vec![];
    for i in 0..config.mapping_layers {
        specs.push((format!("mapping.{i}.weight"), vec![d, d]));
        specs.push((format!("mapping.{i}.bias"), vec![d]));
    }
    let c0 = config.channels_at(config.base_resolution);
    let b = config.base_resolution;
    specs.push(("synthesis.const".into(), vec![c0, b, b]));
    for spec in config.layer_specs() {
        let p = format!("synthesis.layer{}", spec.id);
        let sw = config.style_width(&spec);
        specs.push((format!("{p}.weight"), vec![spec.out_channels, spec.in_channels, 3, 3]));
        specs.push((format!("{p}.bias"), vec![spec.out_channels]));
        specs.push((format!("{p}.style.weight"), vec![sw, d]));
        specs.push((format!("{p}.style.bias"), vec![sw]));
        specs.push((format!("{p}.noise_strength"), vec![spec.out_channels]));
    }
    for res in config.resolutions() {
        let c = config.channels_at(res);
        let p = format!("synthesis.torgb{res}");
        specs.push((format!("{p}.weight"), vec![3, c, 1, 1]));
        specs.push((format!("{p}.bias"), vec![3]));
        specs.push((format!("{p}.style.weight"), vec![c, d]));
        specs.push((format!("{p}.style.bias"), vec![c]));
    }
    specs
}

pub const W_AVG_NAME: &str = "w_avg";

impl GeneratorModel {
    /// Builds a model from named tensors, checking every shape against the
    /// config. `w_avg` may be supplied under [`W_AVG_NAME`].
    pub fn from_tensors(config: GeneratorConfig, mut tensors: BTreeMap<String, Tensor>) -> Result<Self> {
        config.validate()?;
        let mut take = |name: &str, shape: &[usize]| -> Result<Tensor> {
            let t = tensors
                .remove(name)
                .ok_or_else(|| ContainerError::MissingTensor(name.to_string()))?;
            if t.shape() != shape {
                return Err(ContainerError::ShapeMismatch {
                    name: name.to_string(),
                    expected: shape.to_vec(),
                    found: t.shape().to_vec(),
                }
                .into());
            }
            Ok(t)
        };
        let specs: BTreeMap<String, Vec<usize>> = tensor_specs(&config).into_iter().collect();
        let mut get = |name: String| -> Result<Tensor> { take(&name, &specs[&name]) };

        let mapping = (0..config.mapping_layers)
            .map(|i| {
                Ok(MappingLayer {
                    weight: get(format!("mapping.{i}.weight"))?,
                    bias: get(format!("mapping.{i}.bias"))?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let constant = get("synthesis.const".into())?;
        let layers = config
            .layer_specs()
            .iter()
            .map(|s| {
                let p = format!("synthesis.layer{}", s.id);
                Ok(SynthesisLayer {
                    weight: get(format!("{p}.weight"))?,
                    bias: get(format!("{p}.bias"))?,
                    style_weight: get(format!("{p}.style.weight"))?,
                    style_bias: get(format!("{p}.style.bias"))?,
                    noise_strength: get(format!("{p}.noise_strength"))?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let to_rgb = config
            .resolutions()
            .iter()
            .map(|r| {
                let p = format!("synthesis.torgb{r}");
                Ok(ToRgb {
                    weight: get(format!("{p}.weight"))?,
                    bias: get(format!("{p}.bias"))?,
                    style_weight: get(format!("{p}.style.weight"))?,
                    style_bias: get(format!("{p}.style.bias"))?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let w_avg = tensors.remove(W_AVG_NAME);
        if let Some(w) = &w_avg {
            if w.shape() != [config.latent_dim] {
                return Err(ContainerError::ShapeMismatch {
                    name: W_AVG_NAME.into(),
                    expected: vec![config.latent_dim],
                    found: w.shape().to_vec(),
                }
                .into());
            }
        }
        if let Some(name) = tensors.keys().next() {
            return Err(ContainerError::UnknownTensor(name.clone()).into());
        }
        let mut model = Self {
            config,
            mapping,
            constant,
            layers,
            to_rgb,
            w_avg,
            fingerprint: String::new(),
        };
        model.fingerprint = weight_io::fingerprint(&model);
        Ok(model)
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.config
    }

    /// Content hash over the config and every weight (excluding `w_avg`).
    pub fn fingerprint(&self) -> &str {
        &self.fingerprint
    }

    pub fn w_avg(&self) -> Option<&Tensor> {
        self.w_avg.as_ref()
    }

    pub fn set_w_avg(&mut self, w_avg: Tensor) -> Result<()> {
        if w_avg.shape() != [self.config.latent_dim] {
            return Err(Error::shape("set_w_avg", format!("{:?}", w_avg.shape())));
        }
        self.w_avg = Some(w_avg);
        Ok(())
    }

    /// Weights in directory order (without `w_avg`).
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = vec![];
        for (i, m) in self.mapping.iter().enumerate() {
            out.push((format!("mapping.{i}.weight"), &m.weight));
            out.push((format!("mapping.{i}.bias"), &m.bias));
        }
        out.push(("synthesis.const".into(), &self.constant));
        for (id, l) in self.layers.iter().enumerate() {
            let p = format!("synthesis.layer{id}");
            out.push((format!("{p}.weight"), &l.weight));
            out.push((format!("{p}.bias"), &l.bias));
            out.push((format!("{p}.style.weight"), &l.style_weight));
            out.push((format!("{p}.style.bias"), &l.style_bias));
            out.push((format!("{p}.noise_strength"), &l.noise_strength));
        }
        for (r, t) in self.config.resolutions().iter().zip(&self.to_rgb) {
            let p = format!("synthesis.torgb{r}");
            out.push((format!("{p}.weight"), &t.weight));
            out.push((format!("{p}.bias"), &t.bias));
            out.push((format!("{p}.style.weight"), &t.style_weight));
            out.push((format!("{p}.style.bias"), &t.style_bias));
        }
        out
    }

    /// Mutable access for experiments that perturb weights (tests, fuzzing).
    pub fn with_tensor_mut(mut self, name: &str, f: impl FnOnce(&mut Tensor)) -> Result<Self> {
        let mut tensors: BTreeMap<String, Tensor> =
            self.named_tensors().into_iter().map(|(n, t)| (n, t.clone())).collect();
        if let Some(w) = self.w_avg.take() {
            tensors.insert(W_AVG_NAME.into(), w);
        }
        let t = tensors
            .get_mut(name)
            .ok_or_else(|| ContainerError::MissingTensor(name.to_string()))?;
        f(t);
        Self::from_tensors(self.config, tensors)
    }
}

/// Random weights, `N(0, 1/fan_in)`, deterministic per seed. Style biases
/// start at 1 for scales and 0 for offsets, matching StyleGAN2's init.
pub fn random_init(config: &GeneratorConfig, seed: u64) -> Result<GeneratorModel> {
    config.validate()?;
    let mut config = config.clone();
    config.seed = seed;
    let mut tensors = BTreeMap::new();
    for (index, (name, shape)) in tensor_specs(&config).into_iter().enumerate() {
        let mut rng = stream_rng(seed, index as u64);
        let t = if name.ends_with(".style.bias") {
            style_bias_init(&config, &name, &shape)
        } else if name.ends_with(".bias") {
            Tensor::zeros(&shape)
        } else if name.ends_with(".noise_strength") {
            normal_tensor(&shape, &mut rng).map(|v| v * NOISE_STRENGTH_INIT)
        } else if name == "synthesis.const" {
            normal_tensor(&shape, &mut rng)
        } else {
            let fan_in: usize = shape[1..].iter().product();
            let scale = 1.0 / (fan_in as f32).sqrt();
            normal_tensor(&shape, &mut rng).map(|v| v * scale)
        };
        tensors.insert(name, t);
    }
    GeneratorModel::from_tensors(config, tensors)
}

fn style_bias_init(config: &GeneratorConfig, name: &str, shape: &[usize]) -> Tensor {
    let n = shape[0];
    let is_rgb = name.contains("torgb");
    match config.normalization {
        NormalizationMode::Adain if !is_rgb => {
            Tensor::from_fn(shape, |i| if i < n / 2 { 1.0 } else { 0.0 })
        }
        _ => Tensor::full(shape, 1.0),
    }
}
