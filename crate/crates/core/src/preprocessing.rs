//! Intensity windowing and training-patch sampling.

use ndarray::{s, Array3};
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{ScribbleAnnotation, Shape3, Volume};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Abdominal CT window width in HU.
pub const DEFAULT_WINDOW: f64 = 400.0;
/// Abdominal CT window centre in HU.
pub const DEFAULT_LEVEL: f64 = 50.0;

/// Clips intensities to `[level - window/2, level + window/2]` and maps that range onto `[0, 1]`.
pub fn window_and_normalize<T: Scalar>(v: &Volume<T>, window: f64, level: f64) -> Result<Volume<T>> {
    if !(window > 0.0) {
        return Err(Error::InvalidArgument(format!("window must be positive, got {window}")));
    }
    let lo = T::lit(level - window / 2.0);
    let hi = T::lit(level + window / 2.0);
    let width = T::lit(window);
    let data = v.data.mapv(|x| {
        let clipped = x.max(lo).min(hi);
        ((clipped - lo) / width).max(T::zero()).min(T::one())
    });
    Ok(Volume {
        data,
        spacing: v.spacing,
        id: v.id.clone(),
    })
}

/// Leading/trailing padding that brings `size` up to at least `target`, split symmetrically.
pub fn symmetric_padding(size: usize, target: usize) -> (usize, usize) {
    if size >= target {
        (0, 0)
    } else {
        let total = target - size;
        (total / 2, total - total / 2)
    }
}

fn pad3<A: Clone>(data: &Array3<A>, min_shape: Shape3, fill: A) -> (Array3<A>, Shape3) {
    let shape = [data.shape()[0], data.shape()[1], data.shape()[2]];
    let pads: Vec<(usize, usize)> = (0..3).map(|a| symmetric_padding(shape[a], min_shape[a])).collect();
    if pads.iter().all(|&(b, e)| b == 0 && e == 0) {
        return (data.clone(), [0; 3]);
    }
    let padded_shape = [
        shape[0] + pads[0].0 + pads[0].1,
        shape[1] + pads[1].0 + pads[1].1,
        shape[2] + pads[2].0 + pads[2].1,
    ];
    let mut out = Array3::from_elem(padded_shape, fill);
    out.slice_mut(s![
        pads[0].0..pads[0].0 + shape[0],
        pads[1].0..pads[1].0 + shape[1],
        pads[2].0..pads[2].0 + shape[2]
    ])
    .assign(data);
    (out, [pads[0].0, pads[1].0, pads[2].0])
}

/// Zero-pads an image so each axis is at least `min_shape`; returns the leading pad per axis.
pub fn pad_volume<T: Scalar>(v: &Volume<T>, min_shape: Shape3) -> (Volume<T>, Shape3) {
    let (data, before) = pad3(&v.data, min_shape, T::zero());
    (
        Volume {
            data,
            spacing: v.spacing,
            id: v.id.clone(),
        },
        before,
    )
}

/// Pads a scribble with unlabeled voxels so each axis is at least `min_shape`.
pub fn pad_scribble(s: &ScribbleAnnotation, min_shape: Shape3) -> (ScribbleAnnotation, Shape3) {
    let (labels, before) = pad3(&s.labels, min_shape, ScribbleAnnotation::IGNORE);
    (
        ScribbleAnnotation {
            labels,
            num_classes: s.num_classes,
        },
        before,
    )
}

/// An aligned training crop.
#[derive(Clone, Debug)]
pub struct Patch<T> {
    pub volume: Volume<T>,
    pub scribble: ScribbleAnnotation,
    /// Crop origin in the (possibly padded) source grid.
    pub origin: Shape3,
    /// Leading padding applied to the source before cropping.
    pub padding: Shape3,
}

/// Crops a uniformly placed `patch_size` window from an image/scribble pair.
///
/// Axes shorter than the patch are padded first (zeros for the image, unlabeled for the
/// scribble), so the crop always has exactly `patch_size` voxels per axis.
pub fn extract_random_patch<T: Scalar>(
    v: &Volume<T>,
    s: &ScribbleAnnotation,
    patch_size: Shape3,
    rng_seed: u64,
) -> Result<Patch<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    extract_random_patch_with(v, s, patch_size, &mut rng)
}

pub fn extract_random_patch_with<T: Scalar, R: rand::Rng>(
    v: &Volume<T>,
    s: &ScribbleAnnotation,
    patch_size: Shape3,
    rng: &mut R,
) -> Result<Patch<T>> {
    if patch_size.iter().any(|&p| p == 0) {
        return Err(Error::InvalidArgument(format!(
            "patch dimensions must be positive, got {patch_size:?}"
        )));
    }
    let shape = v.shape();
    for (axis, (&a, &b)) in ["depth", "height", "width"].iter().zip(shape.iter().zip(&s.shape())) {
        if a != b {
            return Err(Error::ShapeMismatch {
                axis,
                expected: a,
                actual: b,
            });
        }
    }
    let (pv, padding) = pad_volume(v, patch_size);
    let (ps, _) = pad_scribble(s, patch_size);
    let padded = pv.shape();
    let mut origin = [0usize; 3];
    for a in 0..3 {
        origin[a] = rng.random_range(0..=padded[a] - patch_size[a]);
    }
    let window = s![
        origin[0]..origin[0] + patch_size[0],
        origin[1]..origin[1] + patch_size[1],
        origin[2]..origin[2] + patch_size[2]
    ];
    Ok(Patch {
        volume: Volume {
            data: pv.data.slice(window).to_owned(),
            spacing: v.spacing,
            id: v.id.clone(),
        },
        scribble: ScribbleAnnotation {
            labels: ps.labels.slice(window).to_owned(),
            num_classes: s.num_classes,
        },
        origin,
        padding,
    })
}
