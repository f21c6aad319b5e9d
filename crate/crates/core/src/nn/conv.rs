//! 3D convolutions lowered to matrix products via im2col.

use rand::Rng;

use super::param::{InitScheme, Param, ParamKind};
use super::tensor::Tensor;
use crate::scalar::{matmul, Scalar, Trans};

/// Stride-1 "same" convolution with a cubic kernel of size 1 or 3.
///
/// For kernel 3 the padding equals the dilation, so the spatial shape is preserved for
/// any dilation rate.
#[derive(Clone, Debug)]
pub struct Conv3d<T> {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub dilation: usize,
    /// `out_channels × (in_channels · kernel³)`, row-major.
    pub weight: Param<T>,
    pub bias: Option<Param<T>>,
}

impl<T: Scalar> Conv3d<T> {
    pub fn new<R: Rng + ?Sized>(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        dilation: usize,
        with_bias: bool,
        init: InitScheme,
        rng: &mut R,
    ) -> Self {
        assert!(kernel == 1 || kernel == 3, "kernel size must be 1 or 3");
        assert!(dilation >= 1);
        let taps = kernel.pow(3);
        let weight = init.kernel(
            out_channels * in_channels * taps,
            in_channels * taps,
            out_channels * taps,
            rng,
        );
        Self {
            in_channels,
            out_channels,
            kernel,
            dilation,
            weight,
            bias: with_bias.then(|| Param::filled(out_channels, T::zero(), ParamKind::Bias)),
        }
    }

    fn taps(&self) -> usize {
        self.kernel.pow(3)
    }

    pub fn forward(&self, x: &Tensor<T>) -> Tensor<T> {
        assert_eq!(x.channels, self.in_channels, "conv input channels");
        let n = x.voxels();
        let k = self.in_channels * self.taps();
        let mut y = Tensor::zeros(self.out_channels, x.spatial);
        if self.kernel == 1 {
            matmul(self.out_channels, k, n, &self.weight.value, Trans::No, &x.data, Trans::No, T::zero(), &mut y.data);
        } else {
            let mut cols = Vec::new();
            for (z0, z1) in slabs(x.spatial) {
                let nc = im2col_slab(x, self.dilation, z0, z1, &mut cols);
                let off = z0 * x.spatial[1] * x.spatial[2];
                // SAFETY: `y` holds out_channels rows of length n; columns off..off+nc are in bounds.
                unsafe {
                    T::gemm_raw(
                        self.out_channels, k, nc, T::one(),
                        self.weight.value.as_ptr(), k as isize, 1,
                        cols.as_ptr(), nc as isize, 1,
                        T::zero(),
                        y.data.as_mut_ptr().add(off), n as isize, 1,
                    );
                }
            }
        }
        if let Some(b) = &self.bias {
            for (c, &bc) in b.value.iter().enumerate() {
                y.channel_mut(c).iter_mut().for_each(|v| *v += bc);
            }
        }
        y
    }

    /// Accumulates parameter gradients; returns the input gradient when `need_input_grad`.
    pub fn backward(&mut self, x: &Tensor<T>, dy: &Tensor<T>, need_input_grad: bool) -> Option<Tensor<T>> {
        let n = x.voxels();
        let k = self.in_channels * self.taps();
        let cout = self.out_channels;
        if let Some(b) = &mut self.bias {
            for c in 0..cout {
                b.grad[c] += dy.channel(c).iter().copied().sum::<T>();
            }
        }
        if self.kernel == 1 {
            matmul(cout, n, k, &dy.data, Trans::No, &x.data, Trans::Yes, T::one(), &mut self.weight.grad);
            if !need_input_grad {
                return None;
            }
            let mut dx = Tensor::zeros(self.in_channels, x.spatial);
            matmul(k, cout, n, &self.weight.value, Trans::Yes, &dy.data, Trans::No, T::zero(), &mut dx.data);
            return Some(dx);
        }
        let mut dx = need_input_grad.then(|| Tensor::zeros(self.in_channels, x.spatial));
        let mut cols = Vec::new();
        for (z0, z1) in slabs(x.spatial) {
            let nc = im2col_slab(x, self.dilation, z0, z1, &mut cols);
            let off = z0 * x.spatial[1] * x.spatial[2];
            // SAFETY: dy has cout rows of length n; the slab columns off..off+nc are in bounds;
            // cols is K×nc and weight.grad is cout×K.
            unsafe {
                T::gemm_raw(
                    cout, nc, k, T::one(),
                    dy.data.as_ptr().add(off), n as isize, 1,
                    cols.as_ptr(), 1, nc as isize,
                    T::one(),
                    self.weight.grad.as_mut_ptr(), k as isize, 1,
                );
            }
            if let Some(dx) = dx.as_mut() {
                // SAFETY: weight is cout×K read transposed; cols is overwritten as K×nc.
                unsafe {
                    T::gemm_raw(
                        k, cout, nc, T::one(),
                        self.weight.value.as_ptr(), 1, k as isize,
                        dy.data.as_ptr().add(off), n as isize, 1,
                        T::zero(),
                        cols.as_mut_ptr(), nc as isize, 1,
                    );
                }
                col2im_slab(&cols, dx, self.dilation, z0, z1);
            }
        }
        dx
    }

    pub fn params(&self) -> Vec<&Param<T>> {
        std::iter::once(&self.weight).chain(self.bias.as_ref()).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        std::iter::once(&mut self.weight).chain(self.bias.as_mut()).collect()
    }
}

/// Valid output range `[lo, hi)` along an axis of length `len` for tap offset `off`.
#[inline]
fn valid_range(len: usize, off: isize) -> (usize, usize) {
    let lo = (-off).max(0) as usize;
    let hi = (len as isize - off).clamp(0, len as isize) as usize;
    (lo.min(hi), hi)
}

/// Column budget per slab; keeps the unfolded matrix near cache size.
const SLAB_VOXELS: usize = 2048;

/// Splits the depth axis into slabs of roughly [`SLAB_VOXELS`] voxels.
fn slabs(spatial: [usize; 3]) -> impl Iterator<Item = (usize, usize)> {
    let plane = (spatial[1] * spatial[2]).max(1);
    let step = (SLAB_VOXELS / plane).max(1);
    let d = spatial[0];
    (0..d).step_by(step).map(move |z0| (z0, (z0 + step).min(d)))
}

/// Unfolds the 3×3×3 dilated neighbourhoods of output slices `z0..z1` into `cols`
/// as a `(C·27) × nc` matrix (zero padded) and returns `nc`.
fn im2col_slab<T: Scalar>(x: &Tensor<T>, dilation: usize, z0: usize, z1: usize, cols: &mut Vec<T>) -> usize {
    let [d, h, w] = x.spatial;
    let nc = (z1 - z0) * h * w;
    cols.clear();
    cols.resize(x.channels * 27 * nc, T::zero());
    let dil = dilation as isize;
    for ci in 0..x.channels {
        let src = x.channel(ci);
        for tap in 0..27 {
            let (oz, oy, ox) = tap_offset(tap, dil);
            let row = &mut cols[(ci * 27 + tap) * nc..(ci * 27 + tap + 1) * nc];
            let (vz0, vz1) = valid_range(d, oz);
            let (y0, y1) = valid_range(h, oy);
            let (x0, x1) = valid_range(w, ox);
            if x0 >= x1 {
                continue;
            }
            for z in vz0.max(z0)..vz1.min(z1) {
                let sz = (z as isize + oz) as usize;
                for y in y0..y1 {
                    let sy = (y as isize + oy) as usize;
                    let dst_base = ((z - z0) * h + y) * w;
                    let src_base = (sz * h + sy) * w;
                    let sx0 = (x0 as isize + ox) as usize;
                    row[dst_base + x0..dst_base + x1].copy_from_slice(&src[src_base + sx0..src_base + sx0 + (x1 - x0)]);
                }
            }
        }
    }
    nc
}

/// Adjoint of [`im2col_slab`]: scatter-adds the slab columns onto `out`.
fn col2im_slab<T: Scalar>(cols: &[T], out: &mut Tensor<T>, dilation: usize, z0: usize, z1: usize) {
    let [d, h, w] = out.spatial;
    let nc = (z1 - z0) * h * w;
    let dil = dilation as isize;
    for ci in 0..out.channels {
        let dst = out.channel_mut(ci);
        for tap in 0..27 {
            let (oz, oy, ox) = tap_offset(tap, dil);
            let row = &cols[(ci * 27 + tap) * nc..(ci * 27 + tap + 1) * nc];
            let (vz0, vz1) = valid_range(d, oz);
            let (y0, y1) = valid_range(h, oy);
            let (x0, x1) = valid_range(w, ox);
            if x0 >= x1 {
                continue;
            }
            for z in vz0.max(z0)..vz1.min(z1) {
                let sz = (z as isize + oz) as usize;
                for y in y0..y1 {
                    let sy = (y as isize + oy) as usize;
                    let row_base = ((z - z0) * h + y) * w;
                    let dst_base = (sz * h + sy) * w;
                    let sx0 = (x0 as isize + ox) as usize;
                    let len = x1 - x0;
                    for (a, &b) in dst[dst_base + sx0..dst_base + sx0 + len]
                        .iter_mut()
                        .zip(&row[row_base + x0..row_base + x0 + len])
                    {
                        *a += b;
                    }
                }
            }
        }
    }
}

/// Unfolds the whole volume into a `(C·27) × N` matrix.
pub fn im2col<T: Scalar>(x: &Tensor<T>, dilation: usize) -> Vec<T> {
    let mut cols = Vec::new();
    im2col_slab(x, dilation, 0, x.spatial[0], &mut cols);
    cols
}

/// Adjoint of [`im2col`].
pub fn col2im<T: Scalar>(cols: &[T], channels: usize, spatial: [usize; 3], dilation: usize) -> Tensor<T> {
    let mut out = Tensor::zeros(channels, spatial);
    col2im_slab(cols, &mut out, dilation, 0, spatial[0]);
    out
}

#[inline]
fn tap_offset(tap: usize, dil: isize) -> (isize, isize, isize) {
    let kz = (tap / 9) as isize - 1;
    let ky = ((tap / 3) % 3) as isize - 1;
    let kx = (tap % 3) as isize - 1;
    (kz * dil, ky * dil, kx * dil)
}

/// Kernel-2 stride-2 transposed convolution (exact 2× upsampling).
#[derive(Clone, Debug)]
pub struct TransposedConv3d<T> {
    pub in_channels: usize,
    pub out_channels: usize,
    /// `in_channels × (out_channels · 8)`, row-major.
    pub weight: Param<T>,
    pub bias: Param<T>,
}

impl<T: Scalar> TransposedConv3d<T> {
    pub fn new<R: Rng + ?Sized>(in_channels: usize, out_channels: usize, init: InitScheme, rng: &mut R) -> Self {
        // each output voxel receives exactly one tap from every input channel
        let weight = init.kernel(in_channels * out_channels * 8, in_channels, out_channels * 8, rng);
        Self {
            in_channels,
            out_channels,
            weight,
            bias: Param::filled(out_channels, T::zero(), ParamKind::Bias),
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Tensor<T> {
        assert_eq!(x.channels, self.in_channels, "transposed conv input channels");
        let nin = x.voxels();
        let m = self.out_channels * 8;
        let mut z = vec![T::zero(); m * nin];
        matmul(m, self.in_channels, nin, &self.weight.value, Trans::Yes, &x.data, Trans::No, T::zero(), &mut z);
        let [d, h, w] = x.spatial;
        let mut y = Tensor::zeros(self.out_channels, [2 * d, 2 * h, 2 * w]);
        let (oh, ow) = (2 * h, 2 * w);
        for co in 0..self.out_channels {
            let bias = self.bias.value[co];
            let out = y.channel_mut(co);
            for tap in 0..8 {
                let (a, b, c) = (tap / 4, (tap / 2) % 2, tap % 2);
                let row = &z[(co * 8 + tap) * nin..(co * 8 + tap + 1) * nin];
                for zz in 0..d {
                    for yy in 0..h {
                        let base_out = ((2 * zz + a) * oh + 2 * yy + b) * ow + c;
                        let base_in = (zz * h + yy) * w;
                        for xx in 0..w {
                            out[base_out + 2 * xx] = row[base_in + xx] + bias;
                        }
                    }
                }
            }
        }
        y
    }

    pub fn backward(&mut self, x: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
        let nin = x.voxels();
        let m = self.out_channels * 8;
        let [d, h, w] = x.spatial;
        let (oh, ow) = (2 * h, 2 * w);
        let mut dz = vec![T::zero(); m * nin];
        for co in 0..self.out_channels {
            let g = dy.channel(co);
            self.bias.grad[co] += g.iter().copied().sum::<T>();
            for tap in 0..8 {
                let (a, b, c) = (tap / 4, (tap / 2) % 2, tap % 2);
                let row = &mut dz[(co * 8 + tap) * nin..(co * 8 + tap + 1) * nin];
                for zz in 0..d {
                    for yy in 0..h {
                        let base_out = ((2 * zz + a) * oh + 2 * yy + b) * ow + c;
                        let base_in = (zz * h + yy) * w;
                        for xx in 0..w {
                            row[base_in + xx] = g[base_out + 2 * xx];
                        }
                    }
                }
            }
        }
        matmul(self.in_channels, nin, m, &x.data, Trans::No, &dz, Trans::Yes, T::one(), &mut self.weight.grad);
        let mut dx = Tensor::zeros(self.in_channels, x.spatial);
        matmul(self.in_channels, m, nin, &self.weight.value, Trans::No, &dz, Trans::No, T::zero(), &mut dx.data);
        dx
    }

    pub fn params(&self) -> Vec<&Param<T>> {
        vec![&self.weight, &self.bias]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        vec![&mut self.weight, &mut self.bias]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(7)
    }

    fn random_tensor(c: usize, s: [usize; 3], seed: u64) -> Tensor<f64> {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..c * s.iter().product::<usize>()).map(|_| rand::RngExt::random_range(&mut r, -1.0..1.0)).collect();
        Tensor::from_vec(c, s, data)
    }

    /// Direct nested-loop dilated convolution.
    fn naive_conv(conv: &Conv3d<f64>, x: &Tensor<f64>) -> Tensor<f64> {
        let [d, h, w] = x.spatial;
        let k = conv.kernel as isize;
        let half = (k - 1) / 2;
        let dil = conv.dilation as isize;
        let mut y = Tensor::zeros(conv.out_channels, x.spatial);
        for co in 0..conv.out_channels {
            for z in 0..d as isize {
                for yy in 0..h as isize {
                    for xx in 0..w as isize {
                        let mut acc = conv.bias.as_ref().map_or(0.0, |b| b.value[co]);
                        for ci in 0..conv.in_channels {
                            for kz in 0..k {
                                for ky in 0..k {
                                    for kx in 0..k {
                                        let (sz, sy, sx) = (z + (kz - half) * dil, yy + (ky - half) * dil, xx + (kx - half) * dil);
                                        if sz < 0 || sy < 0 || sx < 0 || sz >= d as isize || sy >= h as isize || sx >= w as isize {
                                            continue;
                                        }
                                        let widx = ((co * conv.in_channels + ci) * (k * k * k) as usize) + ((kz * k + ky) * k + kx) as usize;
                                        acc += conv.weight.value[widx]
                                            * x.channel(ci)[((sz as usize) * h + sy as usize) * w + sx as usize];
                                    }
                                }
                            }
                        }
                        y.channel_mut(co)[((z as usize) * h + yy as usize) * w + xx as usize] = acc;
                    }
                }
            }
        }
        y
    }

    #[test]
    fn conv_matches_naive_for_dilations() {
        for &dil in &[1usize, 2, 3, 6] {
            let conv = Conv3d::<f64>::new(2, 3, 3, dil, true, InitScheme::Kaiming, &mut rng());
            let x = random_tensor(2, [5, 4, 7], dil as u64);
            let a = conv.forward(&x);
            let b = naive_conv(&conv, &x);
            for (p, q) in a.data.iter().zip(&b.data) {
                assert!((p - q).abs() < 1e-12, "dilation {dil}");
            }
        }
    }

    #[test]
    fn pointwise_conv_matches_naive() {
        let mut conv = Conv3d::<f64>::new(3, 2, 1, 1, true, InitScheme::Xavier, &mut rng());
        conv.bias.as_mut().unwrap().value = vec![0.5, -0.25];
        let x = random_tensor(3, [2, 3, 2], 1);
        let a = conv.forward(&x);
        let b = naive_conv(&conv, &x);
        for (p, q) in a.data.iter().zip(&b.data) {
            assert!((p - q).abs() < 1e-12);
        }
    }

    fn loss_of(y: &Tensor<f64>, probe: &Tensor<f64>) -> f64 {
        y.data.iter().zip(&probe.data).map(|(a, b)| a * b).sum()
    }

    #[test]
    fn conv_gradients_match_finite_differences() {
        for &(kernel, dil) in &[(3usize, 1usize), (3, 2), (1, 1)] {
            let mut conv = Conv3d::<f64>::new(2, 2, kernel, dil, true, InitScheme::Kaiming, &mut rng());
            let x = random_tensor(2, [3, 4, 3], 3);
            let probe = random_tensor(2, [3, 4, 3], 4);
            let dx = conv.backward(&x, &probe, true).unwrap();
            let eps = 1e-6;
            for i in (0..x.data.len()).step_by(5) {
                let mut xp = x.clone();
                xp.data[i] += eps;
                let mut xm = x.clone();
                xm.data[i] -= eps;
                let fd = (loss_of(&conv.forward(&xp), &probe) - loss_of(&conv.forward(&xm), &probe)) / (2.0 * eps);
                assert!((fd - dx.data[i]).abs() < 1e-6, "input grad k={kernel} d={dil}");
            }
            for i in (0..conv.weight.len()).step_by(7) {
                let analytic = conv.weight.grad[i];
                let orig = conv.weight.value[i];
                conv.weight.value[i] = orig + eps;
                let lp = loss_of(&conv.forward(&x), &probe);
                conv.weight.value[i] = orig - eps;
                let lm = loss_of(&conv.forward(&x), &probe);
                conv.weight.value[i] = orig;
                assert!(((lp - lm) / (2.0 * eps) - analytic).abs() < 1e-6, "weight grad");
            }
            let bsum: f64 = probe.channel(1).iter().sum();
            assert!((conv.bias.as_ref().unwrap().grad[1] - bsum).abs() < 1e-12);
        }
    }

    #[test]
    fn transposed_conv_upsamples_and_has_correct_gradients() {
        let mut up = TransposedConv3d::<f64>::new(3, 2, InitScheme::Kaiming, &mut rng());
        up.bias.value = vec![0.1, -0.2];
        let x = random_tensor(3, [2, 1, 3], 5);
        let y = up.forward(&x);
        assert_eq!(y.spatial, [4, 2, 6]);
        // output voxel (co=1, z=3, y=1, x=4) comes from input (1,0,2) with tap (1,1,0)
        let tap = 4 + 2;
        let want: f64 = (0..3).map(|ci| up.weight.value[ci * 16 + 8 + tap] * x.channel(ci)[3 + 2]).sum::<f64>() - 0.2;
        assert!((y.channel(1)[(3 * 2 + 1) * 6 + 4] - want).abs() < 1e-12);

        let probe = random_tensor(2, [4, 2, 6], 6);
        let dx = up.backward(&x, &probe);
        let eps = 1e-6;
        for i in 0..x.data.len() {
            let mut xp = x.clone();
            xp.data[i] += eps;
            let mut xm = x.clone();
            xm.data[i] -= eps;
            let fd = (loss_of(&up.forward(&xp), &probe) - loss_of(&up.forward(&xm), &probe)) / (2.0 * eps);
            assert!((fd - dx.data[i]).abs() < 1e-6);
        }
        for i in (0..up.weight.len()).step_by(3) {
            let analytic = up.weight.grad[i];
            let orig = up.weight.value[i];
            up.weight.value[i] = orig + eps;
            let lp = loss_of(&up.forward(&x), &probe);
            up.weight.value[i] = orig - eps;
            let lm = loss_of(&up.forward(&x), &probe);
            up.weight.value[i] = orig;
            assert!(((lp - lm) / (2.0 * eps) - analytic).abs() < 1e-6);
        }
    }

    #[test]
    fn dilation_does_not_change_parameter_count() {
        let a = Conv3d::<f32>::new(4, 8, 3, 1, false, InitScheme::Kaiming, &mut rng());
        let b = Conv3d::<f32>::new(4, 8, 3, 6, false, InitScheme::Kaiming, &mut rng());
        assert_eq!(a.weight.len(), b.weight.len());
    }
}
