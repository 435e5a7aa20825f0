//! Style-dependent operators: weight (de)modulation, AdaIN, the mapping
//! network and the truncation trick.

use rayon::prelude::*;

use super::model::GeneratorModel;
use crate::error::{Error, Result};
use crate::rng::{derive_seed, sample_latent};
use crate::tensor::{leaky_relu, linear, Tensor, DEFAULT_LEAKY_SLOPE};

/// Scales input channel `i` of every filter by `s[i]`, then rescales each
/// output filter to unit L2 norm: `w'' = s·w / sqrt(Σ_{i,k} (s·w)² + ε)`.
pub fn modulate_demodulate(weight: &Tensor, s: &Tensor, epsilon: f32) -> Result<Tensor> {
    let mut out = modulate(weight, s)?;
    let (cout, cin, kh, kw) = out.dims4()?;
    let per_out = cin * kh * kw;
    for j in 0..cout {
        let filter = &mut out.data_mut()[j * per_out..(j + 1) * per_out];
        let sum_sq: f64 = filter.iter().map(|&v| (v as f64).powi(2)).sum();
        let inv = 1.0 / (sum_sq + epsilon as f64).sqrt();
        filter.iter_mut().for_each(|v| *v = (*v as f64 * inv) as f32);
    }
    Ok(out)
}

/// `w' = s_i · w` without demodulation (toRGB heads).
pub fn modulate(weight: &Tensor, s: &Tensor) -> Result<Tensor> {
    let (cout, cin, kh, kw) = weight.dims4()?;
    if s.shape() != [cin] {
        return Err(Error::shape(
            "modulate",
            format!("style {:?} for weight with {cin} input channels", s.shape()),
        ));
    }
    if !s.is_finite() {
        return Err(Error::NonFinite { location: "style vector".into() });
    }
    let k = kh * kw;
    let mut out = weight.clone();
    for j in 0..cout {
        for i in 0..cin {
            let si = s.data()[i];
            let start = (j * cin + i) * k;
            out.data_mut()[start..start + k].iter_mut().for_each(|v| *v *= si);
        }
    }
    Ok(out)
}

/// Per-channel style scale and offset for AdaIN.
#[derive(Clone, Debug, PartialEq)]
pub struct StyleParams {
    pub y_s: Tensor,
    pub y_b: Tensor,
}

/// `y_s,i · (x_i − μ(x_i)) / σ(x_i) + y_b,i` per channel, with population σ.
/// A constant channel (σ = 0) maps to `y_b` everywhere.
pub fn adain(x: &Tensor, style: &StyleParams) -> Result<Tensor> {
    let (n, c, _, _) = x.dims4()?;
    if style.y_s.shape() != [c] || style.y_b.shape() != [c] {
        return Err(Error::shape(
            "adain",
            format!(
                "styles {:?}/{:?} for {c} channels",
                style.y_s.shape(),
                style.y_b.shape()
            ),
        ));
    }
    let mut out = x.clone();
    for b in 0..n {
        for ch in 0..c {
            let plane = out.plane_mut(b, ch);
            let len = plane.len() as f64;
            let mu = plane.iter().map(|&v| v as f64).sum::<f64>() / len;
            let var = plane.iter().map(|&v| (v as f64 - mu).powi(2)).sum::<f64>() / len;
            let sigma = var.sqrt();
            let ys = style.y_s.data()[ch] as f64;
            let yb = style.y_b.data()[ch] as f64;
            if sigma == 0.0 {
                plane.iter_mut().for_each(|v| *v = yb as f32);
            } else {
                let scale = ys / sigma;
                plane
                    .iter_mut()
                    .for_each(|v| *v = ((*v as f64 - mu) * scale + yb) as f32);
            }
        }
    }
    Ok(out)
}

/// Pixel normalization of a latent: `z / sqrt(mean(z²) + 1e-8)`.
pub fn normalize_latent(z: &Tensor) -> Tensor {
    let ms = z.data().iter().map(|&v| (v as f64).powi(2)).sum::<f64>() / z.len().max(1) as f64;
    let inv = 1.0 / (ms + 1e-8).sqrt();
    z.map(|v| (v as f64 * inv) as f32)
}

/// Mapping network `z → w`.
pub fn map_latent(model: &GeneratorModel, z: &Tensor) -> Result<Tensor> {
    let d = model.config().latent_dim;
    if z.shape() != [d] {
        return Err(Error::shape("map_latent", format!("z {:?} for latent_dim {d}", z.shape())));
    }
    if !z.is_finite() {
        return Err(Error::NonFinite { location: "latent z".into() });
    }
    let gain = model.config().activation_gain_value();
    let mut x = normalize_latent(z).reshape(&[1, d])?;
    for layer in &model.mapping {
        x = leaky_relu(&linear(&x, &layer.weight, &layer.bias)?, DEFAULT_LEAKY_SLOPE, gain);
    }
    let w = x.reshape(&[d])?;
    if !w.is_finite() {
        return Err(Error::NonFinite { location: "mapping network output".into() });
    }
    Ok(w)
}

/// `w' = w_avg + ψ (w − w_avg)`.
pub fn truncate_w(model: &GeneratorModel, w: &Tensor, psi: f32) -> Result<Tensor> {
    let avg = model.w_avg().ok_or(Error::MissingWAvg)?;
    if w.shape() != avg.shape() {
        return Err(Error::shape("truncate_w", format!("w {:?} vs w_avg {:?}", w.shape(), avg.shape())));
    }
    let data = w
        .data()
        .iter()
        .zip(avg.data())
        .map(|(&wi, &ai)| (ai as f64 + psi as f64 * (wi as f64 - ai as f64)) as f32)
        .collect();
    Tensor::new(w.shape().to_vec(), data)
}

/// Mean of `map_latent` over `num_samples` latents drawn from `seed`,
/// stored on the model and returned.
pub fn estimate_w_avg(model: &mut GeneratorModel, num_samples: usize, seed: u64) -> Result<Tensor> {
    if num_samples == 0 {
        return Err(Error::InvalidArgument("estimate_w_avg needs at least one sample".into()));
    }
    let d = model.config().latent_dim;
    let shared: &GeneratorModel = model;
    let ws = (0..num_samples)
        .into_par_iter()
        .map(|i| map_latent(shared, &sample_latent(d, derive_seed(seed, i as u64))))
        .collect::<Result<Vec<_>>>()?;
    let mut acc = vec![0f64; d];
    for w in &ws {
        for (a, &v) in acc.iter_mut().zip(w.data()) {
            *a += v as f64;
        }
    }
    let avg = Tensor::new(vec![d], acc.iter().map(|&a| (a / num_samples as f64) as f32).collect())?;
    model.set_w_avg(avg.clone())?;
    Ok(avg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::generator::{random_init, GeneratorConfig, NormalizationMode};
    use crate::tensor::std_dev;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng, lo: f32, hi: f32) -> Tensor {
        Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
    }

    fn filter_sums(w: &Tensor) -> Vec<f64> {
        let (cout, cin, kh, kw) = w.dims4().unwrap();
        let per = cin * kh * kw;
        (0..cout)
            .map(|j| w.data()[j * per..(j + 1) * per].iter().map(|&v| (v as f64).powi(2)).sum())
            .collect()
    }

    #[test]
    fn demodulated_filters_have_unit_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w = random(&[4, 3, 3, 3], &mut rng, -1.0, 1.0);
        let s = random(&[3], &mut rng, 0.1, 3.0);
        let out = modulate_demodulate(&w, &s, 1e-8).unwrap();
        for sum in filter_sums(&out) {
            assert!((sum - 1.0).abs() <= 1e-4, "{sum}");
        }
    }

    #[test]
    fn unit_filters_with_unit_style_are_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut w = random(&[2, 3, 3, 3], &mut rng, -1.0, 1.0);
        let norms = filter_sums(&w);
        for j in 0..2 {
            let n = norms[j].sqrt() as f32;
            w.data_mut()[j * 27..(j + 1) * 27].iter_mut().for_each(|v| *v /= n);
        }
        let out = modulate_demodulate(&w, &Tensor::full(&[3], 1.0), 1e-8).unwrap();
        for (a, b) in out.data().iter().zip(w.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn single_element_self_normalizes() {
        let w = Tensor::new(vec![1, 1, 1, 1], vec![2.0]).unwrap();
        let out = modulate_demodulate(&w, &Tensor::full(&[1], 1.0), 1e-12).unwrap();
        assert!((out.data()[0] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn adain_standardizes() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = random(&[1, 3, 6, 6], &mut rng, -2.0, 5.0);
        let style = StyleParams { y_s: Tensor::full(&[3], 1.0), y_b: Tensor::zeros(&[3]) };
        let y = adain(&x, &style).unwrap();
        for c in 0..3 {
            assert!(crate::tensor::mean(y.plane(0, c)).abs() < 1e-6);
            assert!((std_dev(y.plane(0, c)) - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn adain_constant_channel_maps_to_offset() {
        let x = Tensor::full(&[1, 2, 4, 4], 3.0);
        let style = StyleParams {
            y_s: Tensor::full(&[2], 2.0),
            y_b: Tensor::new(vec![2], vec![0.5, -1.5]).unwrap(),
        };
        let y = adain(&x, &style).unwrap();
        assert!(y.plane(0, 0).iter().all(|&v| v == 0.5));
        assert!(y.plane(0, 1).iter().all(|&v| v == -1.5));
    }

    #[test]
    fn adain_statistics_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random(&[2, 4, 8, 8], &mut rng, -3.0, 3.0);
        let style = StyleParams { y_s: Tensor::full(&[4], 2.5), y_b: Tensor::full(&[4], -1.0) };
        let y = adain(&x, &style).unwrap();
        for b in 0..2 {
            for c in 0..4 {
                let p = y.plane(b, c);
                assert!((crate::tensor::mean(p) + 1.0).abs() <= 1e-5);
                assert!((std_dev(p) - 2.5).abs() <= 1e-4);
            }
        }
    }

    fn toy_without_mapping() -> GeneratorModel {
        let mut cfg = GeneratorConfig::toy(NormalizationMode::Demodulation);
        cfg.mapping_layers = 0;
        random_init(&cfg, 3).unwrap()
    }

    #[test]
    fn zero_depth_mapping_is_pixel_norm() {
        let model = toy_without_mapping();
        let z = sample_latent(64, 9);
        assert_eq!(map_latent(&model, &z).unwrap(), normalize_latent(&z));
    }

    #[test]
    fn mapping_matches_layer_oracle() {
        let model = random_init(&GeneratorConfig::toy(NormalizationMode::Demodulation), 8).unwrap();
        let z = sample_latent(64, 10);
        let w = map_latent(&model, &z).unwrap();
        assert_eq!(w, map_latent(&model, &z).unwrap());

        // Independent recomputation with explicit loops.
        let ms: f64 = z.data().iter().map(|&v| (v as f64).powi(2)).sum::<f64>() / 64.0;
        let mut x: Vec<f64> = z.data().iter().map(|&v| v as f64 / (ms + 1e-8).sqrt()).collect();
        for layer in &model.mapping {
            let mut next = vec![0f64; 64];
            for o in 0..64 {
                let mut s = layer.bias.data()[o] as f64;
                for i in 0..64 {
                    s += layer.weight.data()[o * 64 + i] as f64 * (x[i] as f32) as f64;
                }
                let s = s as f32 as f64;
                next[o] = if s >= 0.0 { s } else { 0.2 * s } * std::f64::consts::SQRT_2;
            }
            x = next;
        }
        for (a, b) in w.data().iter().zip(&x) {
            assert!((*a as f64 - b).abs() < 1e-6);
        }
    }

    #[test]
    fn map_latent_rejects_non_finite() {
        let model = toy_without_mapping();
        let mut z = sample_latent(64, 1);
        z.data_mut()[3] = f32::NAN;
        assert!(matches!(map_latent(&model, &z), Err(Error::NonFinite { .. })));
    }

    #[test]
    fn truncation_identities() {
        let mut model = toy_without_mapping();
        assert!(matches!(truncate_w(&model, &sample_latent(64, 0), 0.5), Err(Error::MissingWAvg)));
        estimate_w_avg(&mut model, 16, 1).unwrap();
        let avg = model.w_avg().unwrap().clone();
        let w = sample_latent(64, 2);
        assert_eq!(truncate_w(&model, &w, 1.0).unwrap(), w);
        assert_eq!(truncate_w(&model, &w, 0.0).unwrap(), avg);
        let t = truncate_w(&model, &w, 0.7).unwrap();
        for i in 0..64 {
            let d = w.data()[i] - avg.data()[i];
            assert!((t.data()[i] - avg.data()[i] - 0.7 * d).abs() < 1e-6);
        }
    }

    #[test]
    fn w_avg_single_sample_and_law_of_large_numbers() {
        let mut model = toy_without_mapping();
        let avg = estimate_w_avg(&mut model, 1, 77).unwrap();
        let w = map_latent(&model, &sample_latent(64, derive_seed(77, 0))).unwrap();
        assert_eq!(avg, w);

        let n = 4000;
        let avg = estimate_w_avg(&mut model, n, 5).unwrap();
        let bound = 5.0 / (n as f32).sqrt();
        assert!(avg.data().iter().all(|v| v.abs() < bound));
    }

    #[test]
    fn w_avg_is_reproducible() {
        let mut a = random_init(&GeneratorConfig::toy(NormalizationMode::Demodulation), 1).unwrap();
        let mut b = a.clone();
        assert_eq!(estimate_w_avg(&mut a, 1000, 9).unwrap(), estimate_w_avg(&mut b, 1000, 9).unwrap());
    }
}
