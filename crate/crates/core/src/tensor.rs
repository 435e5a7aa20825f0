//! Dense `f32` tensors and the CPU kernels the generator is built from.
//!
//! Feature maps use NCHW layout. Reductions (convolution sums, means,
//! matrix products) accumulate in `f64` and round once on store, so results
//! are deterministic for a given input regardless of thread count.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::shape(
                "Tensor::new",
                format!("shape {shape:?} needs {expected} elements, got {}", data.len()),
            ));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f32) -> Self {
        let len = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![value; len] }
    }

    pub fn from_fn(shape: &[usize], f: impl FnMut(usize) -> f32) -> Self {
        let len = shape.iter().product();
        Self { shape: shape.to_vec(), data: (0..len).map(f).collect() }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let len: usize = shape.iter().product();
        if len != self.data.len() {
            return Err(Error::shape(
                "reshape",
                format!("cannot view {:?} as {shape:?}", self.shape),
            ));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    /// `(N, C, H, W)` of a 4-D tensor.
    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        match self.shape[..] {
            [n, c, h, w] => Ok((n, c, h, w)),
            _ => Err(Error::shape("dims4", format!("expected 4-D tensor, got {:?}", self.shape))),
        }
    }

    /// Spatial plane of sample `n`, channel `c` of a 4-D tensor.
    pub fn plane(&self, n: usize, c: usize) -> &[f32] {
        let (_, ch, h, w) = self.dims4().expect("plane() on non 4-D tensor");
        let start = (n * ch + c) * h * w;
        &self.data[start..start + h * w]
    }

    pub fn plane_mut(&mut self, n: usize, c: usize) -> &mut [f32] {
        let (_, ch, h, w) = self.dims4().expect("plane_mut() on non 4-D tensor");
        let start = (n * ch + c) * h * w;
        &mut self.data[start..start + h * w]
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Self {
        Self { shape: self.shape.clone(), data: self.data.iter().map(|&x| f(x)).collect() }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Arithmetic mean of all elements, accumulated in `f64`.
    pub fn mean(&self) -> f64 {
        mean(&self.data)
    }
}

pub fn mean(values: &[f32]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    values.iter().map(|&v| v as f64).sum::<f64>() / values.len() as f64
}

/// Population standard deviation (denominator `n`).
pub fn std_dev(values: &[f32]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let m = mean(values);
    let var = values.iter().map(|&v| (v as f64 - m).powi(2)).sum::<f64>() / values.len() as f64;
    var.sqrt()
}

/// 2-D cross-correlation, stride 1, zero padding. No kernel flip.
pub fn conv2d(input: &Tensor, weight: &Tensor, padding: usize) -> Result<Tensor> {
    let (n, cin, h, w) = input.dims4()?;
    let (cout, wcin, kh, kw) = weight
        .dims4()
        .map_err(|_| Error::shape("conv2d", format!("weight must be 4-D, got {:?}", weight.shape())))?;
    if wcin != cin {
        return Err(Error::shape(
            "conv2d",
            format!("input has {cin} channels but weight expects {wcin} (weight {:?})", weight.shape()),
        ));
    }
    if kh != kw || kh % 2 == 0 {
        return Err(Error::shape("conv2d", format!("kernel must be square and odd, got {kh}x{kw}")));
    }
    let k = kh;
    if h + 2 * padding < k || w + 2 * padding < k {
        return Err(Error::shape(
            "conv2d",
            format!("kernel {k}x{k} larger than padded input {}x{}", h + 2 * padding, w + 2 * padding),
        ));
    }
    let ho = h + 2 * padding - k + 1;
    let wo = w + 2 * padding - k + 1;
    let mut out = Tensor::zeros(&[n, cout, ho, wo]);
    let mut acc = vec![0f64; ho * wo];
    let wdata = weight.data();
    let wide: Vec<f64> = input.data().iter().map(|&v| v as f64).collect();
    for b in 0..n {
        for co in 0..cout {
            acc.iter_mut().for_each(|a| *a = 0.0);
            for ci in 0..cin {
                let plane = &wide[(b * cin + ci) * h * w..(b * cin + ci + 1) * h * w];
                let kbase = (co * cin + ci) * k * k;
                for ky in 0..k {
                    for kx in 0..k {
                        let wv = wdata[kbase + ky * k + kx] as f64;
                        accumulate_tap(&mut acc, plane, wv, (h, w), (ho, wo), (ky, kx), padding);
                    }
                }
            }
            for (o, a) in out.plane_mut(b, co).iter_mut().zip(&acc) {
                *o = *a as f32;
            }
        }
    }
    Ok(out)
}

#[inline]
fn accumulate_tap(
    acc: &mut [f64],
    plane: &[f64],
    wv: f64,
    (h, w): (usize, usize),
    (ho, wo): (usize, usize),
    (ky, kx): (usize, usize),
    padding: usize,
) {
    // Output column range whose input column ox + kx - padding is inside [0, w).
    let ox_lo = padding.saturating_sub(kx);
    let ox_hi = wo.min((w + padding).saturating_sub(kx));
    if ox_lo >= ox_hi {
        return;
    }
    for oy in 0..ho {
        let iy = oy + ky;
        if iy < padding || iy - padding >= h {
            continue;
        }
        let row = &plane[(iy - padding) * w..(iy - padding + 1) * w];
        let src = &row[ox_lo + kx - padding..ox_hi + kx - padding];
        let dst = &mut acc[oy * wo + ox_lo..oy * wo + ox_hi];
        for (d, &s) in dst.iter_mut().zip(src) {
            *d += wv * s;
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpsampleMode {
    #[default]
    Nearest,
    Bilinear,
}

/// Doubles H and W of a 4-D tensor.
pub fn upsample2x(input: &Tensor, mode: UpsampleMode) -> Result<Tensor> {
    let (n, c, h, w) = input.dims4()?;
    let (ho, wo) = (2 * h, 2 * w);
    let mut out = Tensor::zeros(&[n, c, ho, wo]);
    for b in 0..n {
        for ch in 0..c {
            let src = input.plane(b, ch);
            let dst = out.plane_mut(b, ch);
            match mode {
                UpsampleMode::Nearest => {
                    for y in 0..ho {
                        for x in 0..wo {
                            dst[y * wo + x] = src[(y / 2) * w + x / 2];
                        }
                    }
                }
                UpsampleMode::Bilinear => bilinear_plane(src, dst, h, w),
            }
        }
    }
    Ok(out)
}

// Half-pixel centres, edge clamped.
fn bilinear_plane(src: &[f32], dst: &mut [f32], h: usize, w: usize) {
    let wo = 2 * w;
    let coord = |o: usize, size: usize| -> (usize, usize, f32) {
        let pos = ((o as f32 + 0.5) / 2.0 - 0.5).max(0.0);
        let i0 = (pos.floor() as usize).min(size - 1);
        let i1 = (i0 + 1).min(size - 1);
        (i0, i1, pos - i0 as f32)
    };
    for y in 0..2 * h {
        let (y0, y1, fy) = coord(y, h);
        for x in 0..wo {
            let (x0, x1, fx) = coord(x, w);
            let top = src[y0 * w + x0] * (1.0 - fx) + src[y0 * w + x1] * fx;
            let bottom = src[y1 * w + x0] * (1.0 - fx) + src[y1 * w + x1] * fx;
            dst[y * wo + x] = top * (1.0 - fy) + bottom * fy;
        }
    }
}

pub const DEFAULT_LEAKY_SLOPE: f32 = 0.2;

/// `x` for non-negative inputs, `slope * x` otherwise, then multiplied by `gain`.
pub fn leaky_relu(input: &Tensor, slope: f32, gain: f32) -> Tensor {
    input.map(|x| if x >= 0.0 { x * gain } else { x * slope * gain })
}

/// `out[n,c,h,w] = in[n,c,h,w] + strength[c] * noise[h,w]`.
pub fn add_noise(input: &Tensor, noise: &Tensor, strength: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = input.dims4()?;
    if noise.shape() != [h, w] {
        return Err(Error::shape(
            "add_noise",
            format!("noise {:?} does not match spatial size {h}x{w}", noise.shape()),
        ));
    }
    if strength.shape() != [c] {
        return Err(Error::shape(
            "add_noise",
            format!("strength {:?} does not match {c} channels", strength.shape()),
        ));
    }
    let mut out = input.clone();
    for b in 0..n {
        for ch in 0..c {
            let s = strength.data()[ch];
            if s == 0.0 {
                continue;
            }
            for (o, &z) in out.plane_mut(b, ch).iter_mut().zip(noise.data()) {
                *o += s * z;
            }
        }
    }
    Ok(out)
}

/// Per-channel bias on a 4-D tensor.
pub fn add_bias(input: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (n, c, _, _) = input.dims4()?;
    if bias.shape() != [c] {
        return Err(Error::shape("add_bias", format!("bias {:?} for {c} channels", bias.shape())));
    }
    let mut out = input.clone();
    for b in 0..n {
        for ch in 0..c {
            let v = bias.data()[ch];
            out.plane_mut(b, ch).iter_mut().for_each(|x| *x += v);
        }
    }
    Ok(out)
}

/// Fully connected layer: `input · weightᵀ + bias`.
pub fn linear(input: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (n, din) = match input.shape() {
        &[n, d] => (n, d),
        s => return Err(Error::shape("linear", format!("input must be [N, D], got {s:?}"))),
    };
    let dout = match weight.shape() {
        &[o, i] if i == din => o,
        s => {
            return Err(Error::shape(
                "linear",
                format!("weight {s:?} incompatible with input width {din}"),
            ))
        }
    };
    if bias.shape() != [dout] {
        return Err(Error::shape("linear", format!("bias {:?} for {dout} outputs", bias.shape())));
    }
    let mut out = Vec::with_capacity(n * dout);
    for row in input.data().chunks_exact(din) {
        for (o, wrow) in weight.data().chunks_exact(din).enumerate() {
            let dot: f64 = row.iter().zip(wrow).map(|(&a, &b)| a as f64 * b as f64).sum();
            out.push((dot + bias.data()[o] as f64) as f32);
        }
    }
    Tensor::new(vec![n, dout], out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::from_fn(shape, |_| rng.random_range(-1.0f32..1.0))
    }

    /// Direct six-loop reference; independent of the tap-accumulation path.
    fn conv_oracle(x: &Tensor, wt: &Tensor, pad: usize) -> Vec<f64> {
        let (n, cin, h, w) = x.dims4().unwrap();
        let (cout, _, k, _) = wt.dims4().unwrap();
        let (ho, wo) = (h + 2 * pad - k + 1, w + 2 * pad - k + 1);
        let mut out = vec![0f64; n * cout * ho * wo];
        for b in 0..n {
            for co in 0..cout {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut s = 0f64;
                        for ci in 0..cin {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let iy = oy as isize + ky as isize - pad as isize;
                                    let ix = ox as isize + kx as isize - pad as isize;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                        continue;
                                    }
                                    let xv = x.data()[((b * cin + ci) * h + iy as usize) * w + ix as usize];
                                    let wv = wt.data()[((co * cin + ci) * k + ky) * k + kx];
                                    s += xv as f64 * wv as f64;
                                }
                            }
                        }
                        out[((b * cout + co) * ho + oy) * wo + ox] = s;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_all_ones_center_is_nine() {
        let x = Tensor::full(&[1, 1, 3, 3], 1.0);
        let k = Tensor::full(&[1, 1, 3, 3], 1.0);
        let y = conv2d(&x, &k, 1).unwrap();
        assert_eq!(y.shape(), &[1, 1, 3, 3]);
        assert_eq!(y.data()[4], 9.0);
        assert_eq!(y.data()[0], 4.0);
    }

    #[test]
    fn conv_impulse_response_is_flipped_kernel() {
        let mut x = Tensor::zeros(&[1, 1, 5, 5]);
        x.data_mut()[12] = 1.0;
        let k = Tensor::from_fn(&[1, 1, 3, 3], |i| i as f32 + 1.0);
        let y = conv2d(&x, &k, 1).unwrap();
        for dy in 0..3 {
            for dx in 0..3 {
                let out = y.data()[(1 + dy) * 5 + 1 + dx];
                assert_eq!(out, k.data()[(2 - dy) * 3 + (2 - dx)]);
            }
        }
    }

    #[test]
    fn conv_matches_loop_oracle_small() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = random(&[1, 2, 5, 5], &mut rng);
        let k = random(&[3, 2, 3, 3], &mut rng);
        let y = conv2d(&x, &k, 1).unwrap();
        for (a, b) in y.data().iter().zip(conv_oracle(&x, &k, 1)) {
            assert!((*a as f64 - b).abs() < 1e-6);
        }
    }

    #[test]
    fn conv_matches_oracle_on_many_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..120 {
            let n = rng.random_range(1..3);
            let cin = rng.random_range(1..5);
            let cout = rng.random_range(1..5);
            let k = [1usize, 3, 5][rng.random_range(0..3)];
            let h = rng.random_range(k..9);
            let w = rng.random_range(k..9);
            let pad = rng.random_range(0..=(k - 1) / 2);
            let x = random(&[n, cin, h, w], &mut rng);
            let wt = random(&[cout, cin, k, k], &mut rng);
            let y = conv2d(&x, &wt, pad).unwrap();
            for (a, b) in y.data().iter().zip(conv_oracle(&x, &wt, pad)) {
                assert!((*a as f64 - b).abs() <= 1e-5 * (1.0 + b.abs()));
            }
        }
    }

    #[test]
    fn conv_rejects_channel_mismatch() {
        let x = Tensor::zeros(&[1, 2, 4, 4]);
        let w = Tensor::zeros(&[1, 3, 3, 3]);
        let err = conv2d(&x, &w, 1).unwrap_err().to_string();
        assert!(err.contains("2 channels") && err.contains("expects 3"), "{err}");
    }

    #[test]
    fn conv_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random(&[1, 4, 8, 8], &mut rng);
        let w = random(&[4, 4, 3, 3], &mut rng);
        let a = conv2d(&x, &w, 1).unwrap();
        let b = conv2d(&x, &w, 1).unwrap();
        assert_eq!(a.data(), b.data());
    }

    proptest! {
        #[test]
        fn conv_is_linear(seed in any::<u64>(), a in -3.0f32..3.0, b in -3.0f32..3.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = random(&[1, 3, 6, 6], &mut rng);
            let y = random(&[1, 3, 6, 6], &mut rng);
            let w = random(&[2, 3, 3, 3], &mut rng);
            let combo = Tensor::from_fn(x.shape(), |i| a * x.data()[i] + b * y.data()[i]);
            let lhs = conv2d(&combo, &w, 1).unwrap();
            let cx = conv2d(&x, &w, 1).unwrap();
            let cy = conv2d(&y, &w, 1).unwrap();
            for i in 0..lhs.len() {
                let rhs = a as f64 * cx.data()[i] as f64 + b as f64 * cy.data()[i] as f64;
                let l = lhs.data()[i] as f64;
                prop_assert!((l - rhs).abs() <= 1e-5 * (1.0 + rhs.abs()));
            }
        }

        #[test]
        fn nearest_upsample_preserves_channel_mean(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = random(&[1, 3, 4, 4], &mut rng);
            let y = upsample2x(&x, UpsampleMode::Nearest).unwrap();
            for c in 0..3 {
                prop_assert_eq!(mean(x.plane(0, c)), mean(y.plane(0, c)));
            }
        }
    }

    #[test]
    fn nearest_upsample_duplicates() {
        let x = Tensor::new(vec![1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let y = upsample2x(&x, UpsampleMode::Nearest).unwrap();
        assert_eq!(
            y.data(),
            &[1., 1., 2., 2., 1., 1., 2., 2., 3., 3., 4., 4., 3., 3., 4., 4.]
        );
    }

    #[test]
    fn upsample_constant_stays_constant() {
        let x = Tensor::full(&[1, 2, 3, 3], 0.75);
        for mode in [UpsampleMode::Nearest, UpsampleMode::Bilinear] {
            let y = upsample2x(&x, mode).unwrap();
            assert_eq!(y.shape(), &[1, 2, 6, 6]);
            assert!(y.data().iter().all(|&v| v == 0.75));
        }
    }

    #[test]
    fn nearest_upsample_matches_index_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random(&[1, 1, 4, 4], &mut rng);
        let y = upsample2x(&x, UpsampleMode::Nearest).unwrap();
        for oy in 0..8 {
            for ox in 0..8 {
                assert_eq!(y.data()[oy * 8 + ox], x.data()[(oy >> 1) * 4 + (ox >> 1)]);
            }
        }
    }

    #[test]
    fn upsample_rejects_non_4d() {
        assert!(upsample2x(&Tensor::zeros(&[2, 2]), UpsampleMode::Nearest).is_err());
    }

    #[test]
    #[allow(clippy::approx_constant)]
    fn leaky_relu_values() {
        let g = std::f32::consts::SQRT_2;
        let x = Tensor::new(vec![3], vec![1.0, -1.0, 0.0]).unwrap();
        let y = leaky_relu(&x, 0.2, g);
        assert!((y.data()[0] - 1.414214).abs() < 1e-6);
        assert!((y.data()[1] + 0.282843).abs() < 1e-6);
        assert_eq!(y.data()[2], 0.0);
    }

    #[test]
    fn noise_disabled_is_bitwise_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = random(&[1, 3, 4, 4], &mut rng);
        let noise = random(&[4, 4], &mut rng);
        let y = add_noise(&x, &noise, &Tensor::zeros(&[3])).unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn noise_broadcast_and_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let noise = random(&[4, 4], &mut rng);
        let y = add_noise(&Tensor::zeros(&[1, 2, 4, 4]), &noise, &Tensor::full(&[2], 1.0)).unwrap();
        assert_eq!(y.plane(0, 0), noise.data());
        assert_eq!(y.plane(0, 1), noise.data());

        let x = random(&[2, 3, 4, 4], &mut rng);
        let s = random(&[3], &mut rng);
        let y = add_noise(&x, &noise, &s).unwrap();
        for b in 0..2 {
            for c in 0..3 {
                for i in 0..16 {
                    let expect = x.plane(b, c)[i] + s.data()[c] * noise.data()[i];
                    assert_eq!(y.plane(b, c)[i], expect);
                }
            }
        }
        assert!(add_noise(&x, &Tensor::zeros(&[3, 4]), &s).is_err());
    }

    #[test]
    fn linear_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let x = random(&[2, 4], &mut rng);
        let eye = Tensor::from_fn(&[4, 4], |i| if i / 4 == i % 4 { 1.0 } else { 0.0 });
        assert_eq!(linear(&x, &eye, &Tensor::zeros(&[4])).unwrap(), x);

        let b = Tensor::new(vec![3], vec![0.5, -1.0, 2.0]).unwrap();
        let y = linear(&x, &Tensor::zeros(&[3, 4]), &b).unwrap();
        assert_eq!(&y.data()[..3], b.data());
        assert_eq!(&y.data()[3..], b.data());

        let w = random(&[3, 4], &mut rng);
        let y = linear(&x, &w, &b).unwrap();
        for r in 0..2 {
            for o in 0..3 {
                let mut s = b.data()[o] as f64;
                for i in 0..4 {
                    s += x.data()[r * 4 + i] as f64 * w.data()[o * 4 + i] as f64;
                }
                assert!((y.data()[r * 3 + o] as f64 - s).abs() < 1e-6);
            }
        }
        assert!(linear(&x, &Tensor::zeros(&[3, 5]), &b).is_err());
    }
}
