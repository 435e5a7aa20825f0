use serde::{Deserialize, Serialize};

use super::config::{LayerSpec, NormalizationMode};
use super::model::GeneratorModel;
use super::ops::{adain, map_latent, modulate, modulate_demodulate, truncate_w, StyleParams};
use crate::error::{Error, Result};
use crate::rng::layer_noise;
use crate::tensor::{add_bias, add_noise, conv2d, leaky_relu, linear, upsample2x, Tensor, DEFAULT_LEAKY_SLOPE};

/// Where a hook is being invoked.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerInfo {
    pub layer_id: usize,
    pub resolution: usize,
    pub channels: usize,
}

/// Called on every instrumented feature map after the activation and before
/// the next layer consumes it. Hooks may rewrite the map in place.
pub trait FeatureHook {
    fn on_layer(&mut self, info: &LayerInfo, maps: &mut Tensor) -> Result<()>;
}

/// Leaves every map untouched.
#[derive(Clone, Copy, Debug, Default)]
pub struct NoHooks;

impl FeatureHook for NoHooks {
    fn on_layer(&mut self, _: &LayerInfo, _: &mut Tensor) -> Result<()> {
        Ok(())
    }
}

impl<T: FeatureHook + ?Sized> FeatureHook for &mut T {
    fn on_layer(&mut self, info: &LayerInfo, maps: &mut Tensor) -> Result<()> {
        (**self).on_layer(info, maps)
    }
}

/// Runs `A` then `B` on each layer.
impl<A: FeatureHook, B: FeatureHook> FeatureHook for (A, B) {
    fn on_layer(&mut self, info: &LayerInfo, maps: &mut Tensor) -> Result<()> {
        self.0.on_layer(info, maps)?;
        self.1.on_layer(info, maps)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerRecord {
    pub info: LayerInfo,
    /// `[1, C, H, W]`, as consumed by the next layer (after hooks).
    pub map: Tensor,
}

impl LayerRecord {
    pub fn channel_mean(&self, channel: usize) -> f64 {
        crate::tensor::mean(self.map.plane(0, channel))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GenerationTrace {
    pub z: Tensor,
    /// Latent actually used for synthesis (after truncation).
    pub w: Tensor,
    pub noise_seed: u64,
    pub psi: Option<f32>,
    pub model_fingerprint: String,
    pub layers: Vec<LayerRecord>,
    /// `[3, H, W]`, nominally in [−1, 1].
    pub image: Tensor,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct GenerateOptions {
    pub psi: Option<f32>,
    pub noise_seed: u64,
}

fn style_vector(model: &GeneratorModel, weight: &Tensor, bias: &Tensor, w: &Tensor) -> Result<Tensor> {
    let d = model.config().latent_dim;
    let s = linear(&w.clone().reshape(&[1, d])?, weight, bias)?;
    let n = s.len();
    s.reshape(&[n])
}

/// One synthesis convolution, up to and including the activation (and the
/// AdaIN in that mode). Hooks are not run here.
pub fn forward_layer(
    model: &GeneratorModel,
    layer_id: usize,
    input: &Tensor,
    w: &Tensor,
    noise: &Tensor,
) -> Result<Tensor> {
    let cfg = model.config();
    let spec: LayerSpec = *cfg
        .layer_specs()
        .get(layer_id)
        .ok_or_else(|| Error::InvalidArgument(format!("no synthesis layer {layer_id}")))?;
    let params = &model.layers[layer_id];
    let x = if spec.upsample { upsample2x(input, cfg.upsample)? } else { input.clone() };
    let style = style_vector(model, &params.style_weight, &params.style_bias, w)?;
    let gain = cfg.activation_gain_value();
    match cfg.normalization {
        NormalizationMode::Demodulation => {
            let weight = modulate_demodulate(&params.weight, &style, cfg.epsilon)?;
            let x = conv2d(&x, &weight, 1)?;
            let x = add_noise(&x, noise, &params.noise_strength)?;
            let x = add_bias(&x, &params.bias)?;
            Ok(leaky_relu(&x, DEFAULT_LEAKY_SLOPE, gain))
        }
        NormalizationMode::Adain => {
            let x = conv2d(&x, &params.weight, 1)?;
            let x = add_noise(&x, noise, &params.noise_strength)?;
            let x = add_bias(&x, &params.bias)?;
            let x = leaky_relu(&x, DEFAULT_LEAKY_SLOPE, gain);
            let c = spec.out_channels;
            let styles = StyleParams {
                y_s: Tensor::new(vec![c], style.data()[..c].to_vec())?,
                y_b: Tensor::new(vec![c], style.data()[c..].to_vec())?,
            };
            adain(&x, &styles)
        }
    }
}

fn to_rgb(model: &GeneratorModel, index: usize, x: &Tensor, w: &Tensor) -> Result<Tensor> {
    let head = &model.to_rgb[index];
    let s = style_vector(model, &head.style_weight, &head.style_bias, w)?;
    let weight = modulate(&head.weight, &s)?;
    add_bias(&conv2d(x, &weight, 0)?, &head.bias)
}

/// Synthesizes from an already-mapped latent.
pub fn synthesize(
    model: &GeneratorModel,
    w: &Tensor,
    noise_seed: u64,
    hooks: &mut dyn FeatureHook,
) -> Result<(Vec<LayerRecord>, Tensor)> {
    let cfg = model.config();
    let base = cfg.base_resolution;
    let c0 = cfg.channels_at(base);
    let mut x = model.constant.clone().reshape(&[1, c0, base, base])?;
    let mut image: Option<Tensor> = None;
    let mut rgb_index = 0;
    let mut records = Vec::with_capacity(cfg.num_layers());
    for spec in cfg.layer_specs() {
        let noise = layer_noise(noise_seed, spec.id, spec.resolution);
        x = forward_layer(model, spec.id, &x, w, &noise)?;
        let info = LayerInfo { layer_id: spec.id, resolution: spec.resolution, channels: spec.out_channels };
        if !x.is_finite() {
            return Err(Error::NonFinite { location: format!("synthesis layer {}", spec.id) });
        }
        hooks.on_layer(&info, &mut x)?;
        if !x.is_finite() {
            return Err(Error::NonFinite { location: format!("synthesis layer {} (after hooks)", spec.id) });
        }
        records.push(LayerRecord { info, map: x.clone() });
        if spec.emits_rgb {
            let rgb = to_rgb(model, rgb_index, &x, w)?;
            rgb_index += 1;
            image = Some(match image {
                None => rgb,
                Some(prev) => {
                    let up = upsample2x(&prev, cfg.upsample)?;
                    let data = up.data().iter().zip(rgb.data()).map(|(a, b)| a + b).collect();
                    Tensor::new(rgb.shape().to_vec(), data)?
                }
            });
        }
    }
    let image = image.expect("at least one toRGB head");
    if !image.is_finite() {
        return Err(Error::NonFinite { location: "toRGB output".into() });
    }
    let res = cfg.max_resolution;
    Ok((records, image.reshape(&[3, res, res])?))
}

/// Full forward pass `z → image`, recording every instrumented map.
pub fn generate(
    model: &GeneratorModel,
    z: &Tensor,
    options: &GenerateOptions,
    hooks: &mut dyn FeatureHook,
) -> Result<GenerationTrace> {
    let mut w = map_latent(model, z)?;
    if let Some(psi) = options.psi {
        w = truncate_w(model, &w, psi)?;
    }
    let (layers, image) = synthesize(model, &w, options.noise_seed, hooks)?;
    Ok(GenerationTrace {
        z: z.clone(),
        w,
        noise_seed: options.noise_seed,
        psi: options.psi,
        model_fingerprint: model.fingerprint().to_string(),
        layers,
        image,
    })
}
