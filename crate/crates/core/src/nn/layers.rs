//! Normalization, activation, pooling and channel dropout.

use rand::{Rng, RngExt};

use super::param::{Param, ParamKind};
use super::tensor::Tensor;
use crate::scalar::Scalar;

pub const LEAKY_SLOPE: f64 = 0.01;
pub const NORM_EPS: f64 = 1e-5;

/// Instance normalization with a learned per-channel affine, followed by LeakyReLU.
#[derive(Clone, Debug)]
pub struct InstanceNormAct<T> {
    pub channels: usize,
    pub scale: Param<T>,
    pub shift: Param<T>,
}

/// Values retained by [`InstanceNormAct::forward`] for the backward pass.
#[derive(Clone, Debug)]
pub struct NormCache<T> {
    normalized: Tensor<T>,
    inv_std: Vec<T>,
    output: Tensor<T>,
}

impl<T> NormCache<T> {
    pub fn output(&self) -> &Tensor<T> {
        &self.output
    }
}

impl<T: Scalar> InstanceNormAct<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            channels,
            scale: Param::filled(channels, T::one(), ParamKind::NormScale),
            shift: Param::filled(channels, T::zero(), ParamKind::NormShift),
        }
    }

    pub fn forward(&self, x: Tensor<T>) -> NormCache<T> {
        let n = x.voxels();
        let nf = T::from_usize_lossy(n);
        let eps = T::lit(NORM_EPS);
        let slope = T::lit(LEAKY_SLOPE);
        let mut normalized = x;
        let mut output = Tensor::zeros(self.channels, normalized.spatial);
        let mut inv_std = Vec::with_capacity(self.channels);
        for c in 0..self.channels {
            let ch = normalized.channel_mut(c);
            let mean = ch.iter().copied().sum::<T>() / nf;
            let var = ch.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nf;
            let inv = T::one() / (var + eps).sqrt();
            inv_std.push(inv);
            let (g, b) = (self.scale.value[c], self.shift.value[c]);
            let out = output.channel_mut(c);
            for (v, o) in ch.iter_mut().zip(out.iter_mut()) {
                *v = (*v - mean) * inv;
                let a = g * *v + b;
                *o = if a > T::zero() { a } else { a * slope };
            }
        }
        NormCache {
            normalized,
            inv_std,
            output,
        }
    }

    pub fn backward(&mut self, cache: &NormCache<T>, mut dy: Tensor<T>) -> Tensor<T> {
        let n = dy.voxels();
        let nf = T::from_usize_lossy(n);
        let slope = T::lit(LEAKY_SLOPE);
        for c in 0..self.channels {
            let out = cache.output.channel(c);
            let xhat = cache.normalized.channel(c);
            let g = self.scale.value[c];
            let inv = cache.inv_std[c];
            let d = dy.channel_mut(c);
            let mut sum_d = T::zero();
            let mut sum_dx = T::zero();
            for i in 0..n {
                if out[i] <= T::zero() {
                    d[i] *= slope;
                }
                sum_d += d[i];
                sum_dx += d[i] * xhat[i];
            }
            self.scale.grad[c] += sum_dx;
            self.shift.grad[c] += sum_d;
            // gradient w.r.t. normalized input, then through the standardization
            let k = g * inv / nf;
            for i in 0..n {
                d[i] = k * (nf * d[i] - sum_d - xhat[i] * sum_dx);
            }
        }
        dy
    }

    pub fn params(&self) -> Vec<&Param<T>> {
        vec![&self.scale, &self.shift]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        vec![&mut self.scale, &mut self.shift]
    }
}

/// 2×2×2 max pooling; returns the pooled map and the flat argmax of each window.
pub fn max_pool2<T: Scalar>(x: &Tensor<T>) -> (Tensor<T>, Vec<u32>) {
    let [d, h, w] = x.spatial;
    let (od, oh, ow) = (d / 2, h / 2, w / 2);
    let mut y = Tensor::zeros(x.channels, [od, oh, ow]);
    let mut idx = vec![0u32; y.data.len()];
    let on = od * oh * ow;
    for c in 0..x.channels {
        let src = x.channel(c);
        for z in 0..od {
            for yy in 0..oh {
                for xx in 0..ow {
                    let mut best = T::neg_infinity();
                    let mut best_i = 0usize;
                    for a in 0..2 {
                        for b in 0..2 {
                            let row = ((2 * z + a) * h + 2 * yy + b) * w + 2 * xx;
                            for (cc, &v) in src[row..row + 2].iter().enumerate() {
                                if v > best {
                                    best = v;
                                    best_i = row + cc;
                                }
                            }
                        }
                    }
                    let o = (z * oh + yy) * ow + xx;
                    y.data[c * on + o] = best;
                    idx[c * on + o] = best_i as u32;
                }
            }
        }
    }
    (y, idx)
}

pub fn max_pool2_backward<T: Scalar>(dy: &Tensor<T>, idx: &[u32], input_spatial: [usize; 3]) -> Tensor<T> {
    let mut dx = Tensor::zeros(dy.channels, input_spatial);
    let on = dy.voxels();
    for c in 0..dy.channels {
        let dst = dx.channel_mut(c);
        for o in 0..on {
            dst[idx[c * on + o] as usize] += dy.data[c * on + o];
        }
    }
    dx
}

/// Per-channel multipliers produced by one draw of channel dropout.
#[derive(Clone, Debug, PartialEq)]
pub struct DropoutMask<T> {
    pub rate: f64,
    pub scales: Vec<T>,
}

impl<T: Scalar> DropoutMask<T> {
    pub fn identity(channels: usize) -> Self {
        Self {
            rate: 0.0,
            scales: vec![T::one(); channels],
        }
    }

    /// Draws a rate uniformly from `[lo, hi)`, zeroes each channel with that probability
    /// and rescales survivors by `1 / (1 - rate)`.
    pub fn sample<R: Rng + ?Sized>(channels: usize, rate_range: (f64, f64), rng: &mut R) -> Self {
        let (lo, hi) = rate_range;
        let rate = if hi > lo { rng.random_range(lo..hi) } else { lo };
        if rate <= 0.0 {
            return Self::identity(channels);
        }
        let keep = T::lit(1.0 / (1.0 - rate));
        let scales = (0..channels)
            .map(|_| if rng.random_bool(rate) { T::zero() } else { keep })
            .collect();
        Self { rate, scales }
    }

    pub fn apply(&self, x: &Tensor<T>) -> Tensor<T> {
        let mut y = x.clone();
        for (c, &s) in self.scales.iter().enumerate() {
            if s != T::one() {
                y.channel_mut(c).iter_mut().for_each(|v| *v *= s);
            }
        }
        y
    }

    /// Dropout is linear, so the backward pass applies the same per-channel factors.
    pub fn backward(&self, dy: &Tensor<T>) -> Tensor<T> {
        self.apply(dy)
    }
}

/// Channel dropout with a rate drawn from `rate_range`, reproducible from `rng_seed`.
pub fn feature_dropout<T: Scalar>(features: &Tensor<T>, rate_range: (f64, f64), rng_seed: u64) -> Tensor<T> {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(rng_seed);
    DropoutMask::sample(features.channels, rate_range, &mut rng).apply(features)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_tensor(c: usize, s: [usize; 3], seed: u64) -> Tensor<f64> {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..c * s.iter().product::<usize>()).map(|_| r.random_range(-1.0..1.0)).collect();
        Tensor::from_vec(c, s, data)
    }

    fn dot(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
        a.data.iter().zip(&b.data).map(|(x, y)| x * y).sum()
    }

    #[test]
    fn instance_norm_output_is_standardized_before_activation() {
        let norm = InstanceNormAct::<f64>::new(2);
        let cache = norm.forward(random_tensor(2, [3, 3, 3], 1));
        for c in 0..2 {
            let ch = cache.normalized.channel(c);
            let mean: f64 = ch.iter().sum::<f64>() / 27.0;
            let var: f64 = ch.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 27.0;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn instance_norm_gradients_match_finite_differences() {
        let mut norm = InstanceNormAct::<f64>::new(2);
        norm.scale.value = vec![1.3, 0.7];
        norm.shift.value = vec![0.1, -0.2];
        let x = random_tensor(2, [2, 3, 2], 2);
        let probe = random_tensor(2, [2, 3, 2], 3);
        let cache = norm.forward(x.clone());
        let dx = norm.backward(&cache, probe.clone());
        let eps = 1e-6;
        for i in 0..x.data.len() {
            let mut xp = x.clone();
            xp.data[i] += eps;
            let mut xm = x.clone();
            xm.data[i] -= eps;
            let fd = (dot(norm.forward(xp).output(), &probe) - dot(norm.forward(xm).output(), &probe)) / (2.0 * eps);
            assert!((fd - dx.data[i]).abs() < 1e-5, "{fd} vs {}", dx.data[i]);
        }
        let orig = norm.scale.value[1];
        norm.scale.value[1] = orig + eps;
        let lp = dot(norm.forward(x.clone()).output(), &probe);
        norm.scale.value[1] = orig - eps;
        let lm = dot(norm.forward(x.clone()).output(), &probe);
        assert!(((lp - lm) / (2.0 * eps) - norm.scale.grad[1]).abs() < 1e-5);
    }

    #[test]
    fn max_pool_round_trip() {
        let x = random_tensor(2, [4, 2, 4], 9);
        let (y, idx) = max_pool2(&x);
        assert_eq!(y.spatial, [2, 1, 2]);
        for c in 0..2 {
            for (o, &v) in y.channel(c).iter().enumerate() {
                assert_eq!(v, x.channel(c)[idx[c * 4 + o] as usize]);
            }
        }
        let dy = Tensor::from_vec(2, [2, 1, 2], vec![1.0; 8]);
        let dx = max_pool2_backward(&dy, &idx, x.spatial);
        assert_eq!(dx.data.iter().sum::<f64>(), 8.0);
    }

    #[test]
    fn zero_rate_dropout_is_identity() {
        let x = random_tensor(4, [2, 2, 2], 1);
        assert_eq!(feature_dropout(&x, (0.0, 0.0), 5), x);
    }

    #[test]
    fn half_rate_dropout_zeroes_about_half_and_doubles_survivors() {
        let x = Tensor::from_vec(64, [1, 1, 1], vec![1.0f64; 64]);
        let mut zeroed = 0usize;
        let draws = 200;
        for seed in 0..draws {
            let y = feature_dropout(&x, (0.5, 0.5), seed);
            for &v in &y.data {
                assert!(v == 0.0 || v == 2.0);
                zeroed += (v == 0.0) as usize;
            }
        }
        let mean = zeroed as f64 / draws as f64;
        // binomial(64, 0.5): sd of the mean over 200 draws is 0.28
        assert!((mean - 32.0).abs() < 1.5, "mean zeroed {mean}");
    }

    #[test]
    fn dropout_is_unbiased_in_expectation() {
        let x = random_tensor(8, [2, 2, 2], 3);
        let mut acc = vec![0.0; x.data.len()];
        let draws = 1000;
        for seed in 0..draws {
            let y = feature_dropout(&x, (0.0, 0.5), seed);
            for (a, v) in acc.iter_mut().zip(&y.data) {
                *a += v;
            }
        }
        let num: f64 = acc.iter().zip(&x.data).map(|(a, v)| (a / draws as f64 - v).abs()).sum();
        let den: f64 = x.data.iter().map(|v| v.abs()).sum();
        // per-entry Monte-Carlo noise is about 2% at this draw count
        assert!(num / den < 0.05, "relative deviation {}", num / den);
        // aggregated over all entries the estimate is within 2%
        let total: f64 = acc.iter().sum::<f64>() / draws as f64;
        let want: f64 = x.data.iter().sum();
        let scale: f64 = x.data.iter().map(|v| v.abs()).sum();
        assert!((total - want).abs() / scale < 0.02);
    }

    #[test]
    fn dropout_reproducible_from_seed() {
        let x = random_tensor(16, [2, 2, 2], 3);
        assert_eq!(feature_dropout(&x, (0.0, 0.5), 42), feature_dropout(&x, (0.0, 0.5), 42));
    }
}
