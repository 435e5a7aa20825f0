use std::collections::BTreeMap;

use super::*;
use crate::rng::{layer_noise, sample_latent};
use crate::tensor::{add_noise, conv2d, leaky_relu, linear, upsample2x, Tensor, UpsampleMode};

fn toy(mode: NormalizationMode) -> GeneratorModel {
    random_init(&GeneratorConfig::toy(mode), 42).unwrap()
}

fn tiny_config(mode: NormalizationMode) -> GeneratorConfig {
    let mut cfg = GeneratorConfig::toy(mode);
    cfg.latent_dim = 8;
    cfg.max_resolution = 8;
    cfg.channels = BTreeMap::from([(4, 3), (8, 2)]);
    cfg
}

struct Identity;

impl FeatureHook for Identity {
    fn on_layer(&mut self, _: &LayerInfo, maps: &mut Tensor) -> crate::Result<()> {
        maps.data_mut().iter_mut().for_each(|v| *v *= 1.0);
        Ok(())
    }
}

#[test]
fn generation_is_deterministic() {
    let model = toy(NormalizationMode::Demodulation);
    let z = sample_latent(64, 3);
    let opts = GenerateOptions { psi: None, noise_seed: 9 };
    let a = generate(&model, &z, &opts, &mut NoHooks).unwrap();
    let b = generate(&model, &z, &opts, &mut NoHooks).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.layers.len(), 9);
    assert_eq!(a.image.shape(), [3, 64, 64]);
    assert!(a.image.is_finite());
}

#[test]
fn identity_hook_is_neutral() {
    let model = toy(NormalizationMode::Demodulation);
    let z = sample_latent(64, 4);
    let opts = GenerateOptions { psi: None, noise_seed: 1 };
    let a = generate(&model, &z, &opts, &mut NoHooks).unwrap();
    let b = generate(&model, &z, &opts, &mut Identity).unwrap();
    assert_eq!(a, b);
}

#[test]
fn psi_zero_renders_w_avg() {
    let mut model = toy(NormalizationMode::Demodulation);
    let w_avg = estimate_w_avg(&mut model, 64, 0).unwrap();
    let z = sample_latent(64, 5);
    let trace = generate(&model, &z, &GenerateOptions { psi: Some(0.0), noise_seed: 2 }, &mut NoHooks).unwrap();
    let (_, image) = synthesize(&model, &w_avg, 2, &mut NoHooks).unwrap();
    assert_eq!(trace.image, image);
}

#[test]
fn truncation_requires_w_avg() {
    let model = toy(NormalizationMode::Demodulation);
    let z = sample_latent(64, 5);
    let err = generate(&model, &z, &GenerateOptions { psi: Some(0.7), noise_seed: 0 }, &mut NoHooks).unwrap_err();
    assert!(matches!(err, crate::Error::MissingWAvg));
}

#[test]
fn adain_block_is_standardized() {
    // Zero style weights and biases (1, 0) give y_s = 1, y_b = 0 for every w.
    let cfg = GeneratorConfig::toy(NormalizationMode::Adain);
    let model = random_init(&cfg, 1)
        .unwrap()
        .with_tensor_mut("synthesis.layer0.style.weight", |t| t.data_mut().fill(0.0))
        .unwrap();
    let w = map_latent(&model, &sample_latent(64, 0)).unwrap();
    let input = model.constant.clone().reshape(&[1, 64, 4, 4]).unwrap();
    let out = forward_layer(&model, 0, &input, &w, &Tensor::zeros(&[4, 4])).unwrap();
    for c in 0..64 {
        let plane = out.plane(0, c);
        assert!(crate::tensor::mean(plane).abs() < 1e-6);
    }
}

#[test]
fn two_block_composition_oracle() {
    for mode in [NormalizationMode::Demodulation, NormalizationMode::Adain] {
        let cfg = tiny_config(mode);
        let model = random_init(&cfg, 3).unwrap();
        let z = sample_latent(8, 1);
        let trace = generate(&model, &z, &GenerateOptions { psi: None, noise_seed: 4 }, &mut NoHooks).unwrap();

        // Rebuild every layer from the raw kernels.
        let tensors: BTreeMap<String, Tensor> =
            model.named_tensors().into_iter().map(|(n, t)| (n, t.clone())).collect();
        let mut w = normalize_latent(&z);
        for i in 0..cfg.mapping_layers {
            let y = linear(&w.clone().reshape(&[1, 8]).unwrap(), &tensors[&format!("mapping.{i}.weight")], &tensors[&format!("mapping.{i}.bias")]).unwrap();
            w = leaky_relu(&y, 0.2, std::f32::consts::SQRT_2).reshape(&[8]).unwrap();
        }
        let mut x = tensors["synthesis.const"].clone().reshape(&[1, 3, 4, 4]).unwrap();
        for spec in cfg.layer_specs() {
            let p = format!("synthesis.layer{}", spec.id);
            if spec.upsample {
                x = upsample2x(&x, UpsampleMode::Nearest).unwrap();
            }
            let style = linear(&w.clone().reshape(&[1, 8]).unwrap(), &tensors[&format!("{p}.style.weight")], &tensors[&format!("{p}.style.bias")]).unwrap();
            let noise = layer_noise(4, spec.id, spec.resolution);
            let weight = &tensors[&format!("{p}.weight")];
            let (cout, cin) = (spec.out_channels, spec.in_channels);
            let conv_w = match mode {
                NormalizationMode::Demodulation => Tensor::from_fn(weight.shape(), |i| {
                    let (o, ci) = (i / (cin * 9), (i / 9) % cin);
                    let norm: f64 = (0..cin * 9)
                        .map(|k| (weight.data()[o * cin * 9 + k] as f64 * style.data()[k / 9] as f64).powi(2))
                        .sum::<f64>();
                    (weight.data()[i] as f64 * style.data()[ci] as f64 / (norm + 1e-8).sqrt()) as f32
                }),
                NormalizationMode::Adain => weight.clone(),
            };
            let y = conv2d(&x, &conv_w, 1).unwrap();
            let y = add_noise(&y, &noise, &tensors[&format!("{p}.noise_strength")]).unwrap();
            let bias = &tensors[&format!("{p}.bias")];
            let y = Tensor::from_fn(y.shape(), |i| y.data()[i] + bias.data()[(i / (spec.resolution * spec.resolution)) % cout]);
            let mut y = leaky_relu(&y, 0.2, std::f32::consts::SQRT_2);
            if mode == NormalizationMode::Adain {
                for c in 0..cout {
                    let plane = y.plane_mut(0, c);
                    let m = crate::tensor::mean(plane);
                    let s = crate::tensor::std_dev(plane);
                    let (ys, yb) = (style.data()[c] as f64, style.data()[cout + c] as f64);
                    plane.iter_mut().for_each(|v| *v = (ys * (*v as f64 - m) / s + yb) as f32);
                }
            }
            let got = &trace.layers[spec.id].map;
            for (a, b) in got.data().iter().zip(y.data()) {
                assert!((a - b).abs() <= 1e-5 * (1.0 + b.abs()), "{mode} layer {}: {a} vs {b}", spec.id);
            }
            x = y;
        }
    }
}

#[test]
fn random_init_is_reproducible_and_scaled() {
    let cfg = GeneratorConfig::toy(NormalizationMode::Demodulation);
    let a = random_init(&cfg, 42).unwrap();
    assert_eq!(a, random_init(&cfg, 42).unwrap());
    assert_ne!(a, random_init(&cfg, 43).unwrap());
    for (name, t) in a.named_tensors() {
        if t.len() < 1000 || !name.ends_with("weight") {
            continue;
        }
        let fan_in: usize = t.shape()[1..].iter().product();
        let expected = 1.0 / (fan_in as f64).sqrt();
        let sd = crate::tensor::std_dev(t.data());
        assert!((sd - expected).abs() < 0.1 * expected, "{name}: {sd} vs {expected}");
    }
}

#[test]
fn non_finite_latent_is_rejected() {
    let model = toy(NormalizationMode::Demodulation);
    let mut z = sample_latent(64, 0);
    z.data_mut()[3] = f32::NAN;
    assert!(generate(&model, &z, &GenerateOptions::default(), &mut NoHooks).is_err());
}

#[test]
fn exploding_weights_name_the_layer() {
    let model = toy(NormalizationMode::Adain)
        .with_tensor_mut("synthesis.layer4.bias", |t| t.data_mut()[0] = f32::MAX)
        .unwrap()
        .with_tensor_mut("synthesis.layer4.noise_strength", |t| t.data_mut()[0] = f32::MAX)
        .unwrap();
    let err = generate(&model, &sample_latent(64, 0), &GenerateOptions::default(), &mut NoHooks).unwrap_err();
    assert!(err.to_string().contains("layer 4"), "{err}");
}
