//! StyleGAN2-style generator with instrumentation taps.
//!
//! `z` is mapped to `w`, optionally truncated toward `w_avg`, and broadcast
//! to every synthesis layer. Each synthesis convolution's post-activation map
//! is handed to a [`FeatureHook`] before the next layer reads it, and the
//! (possibly rewritten) map is recorded in the [`GenerationTrace`].

mod config;
mod forward;
mod model;
mod ops;

pub use config::{GeneratorConfig, LayerSpec, NormalizationMode};
pub use forward::{
    forward_layer, generate, synthesize, FeatureHook, GenerateOptions, GenerationTrace, LayerInfo,
    LayerRecord, NoHooks,
};
pub use model::{
    random_init, tensor_specs, GeneratorModel, MappingLayer, SynthesisLayer, ToRgb, NOISE_STRENGTH_INIT,
    W_AVG_NAME,
};
pub use ops::{
    adain, estimate_w_avg, map_latent, modulate, modulate_demodulate, normalize_latent, truncate_w,
    StyleParams,
};

#[cfg(test)]
mod tests;
