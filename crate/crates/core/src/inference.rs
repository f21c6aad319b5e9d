//! Whole-volume prediction by averaging overlapping windows of the primary decoder.

use ndarray::{s, Array3, Array4};

use crate::data::{argmax_to_mask, ProbabilityMap, SegmentationMask, Shape3, Volume};
use crate::error::{Error, Result};
use crate::network::TDNet;
use crate::nn::Tensor;
use crate::preprocessing::pad_volume;
use crate::scalar::Scalar;

/// Half the patch along each axis, at least one voxel.
pub fn default_stride(patch: Shape3) -> Shape3 {
    patch.map(|p| (p / 2).max(1))
}

/// Window start positions along one axis; the last window ends exactly at `size`.
pub fn window_origins(size: usize, patch: usize, stride: usize) -> Vec<usize> {
    if size <= patch {
        return vec![0];
    }
    let last = size - patch;
    let mut origins: Vec<usize> = (0..last).step_by(stride).collect();
    origins.push(last);
    origins
}

/// Number of windows covering each voxel.
pub fn cover_counts(shape: Shape3, patch: Shape3, stride: Shape3) -> Array3<u32> {
    let mut counts = Array3::zeros(shape);
    let origins: Vec<Vec<usize>> = (0..3).map(|a| window_origins(shape[a], patch[a], stride[a])).collect();
    for &z in &origins[0] {
        for &y in &origins[1] {
            for &x in &origins[2] {
                counts
                    .slice_mut(s![
                        z..(z + patch[0]).min(shape[0]),
                        y..(y + patch[1]).min(shape[1]),
                        x..(x + patch[2]).min(shape[2])
                    ])
                    .mapv_inplace(|c| c + 1);
            }
        }
    }
    counts
}

fn check_window(patch: Shape3, stride: Shape3) -> Result<()> {
    for a in 0..3 {
        if patch[a] == 0 || stride[a] == 0 || stride[a] > patch[a] {
            return Err(Error::InvalidArgument(format!(
                "stride {stride:?} must be in 1..=patch {patch:?} on every axis"
            )));
        }
    }
    Ok(())
}

/// Tiles `image` with windows, calls `predict` on each window to get per-class
/// probabilities, and averages them per voxel. Images smaller than the window are
/// zero-padded and the result is cropped back.
pub fn sliding_window<T: Scalar, F>(
    image: &Array3<T>,
    num_classes: usize,
    patch: Shape3,
    stride: Shape3,
    mut predict: F,
) -> Result<ProbabilityMap<T>>
where
    F: FnMut(&Array3<T>) -> Result<Array4<T>>,
{
    check_window(patch, stride)?;
    let source = Volume {
        data: image.clone(),
        spacing: [1.0; 3],
        id: String::new(),
    };
    let (padded, before) = pad_volume(&source, patch);
    let shape = padded.shape();
    let mut acc = Array4::<T>::zeros((num_classes, shape[0], shape[1], shape[2]));
    let counts = cover_counts(shape, patch, stride);
    let origins: Vec<Vec<usize>> = (0..3).map(|a| window_origins(shape[a], patch[a], stride[a])).collect();
    for &z in &origins[0] {
        for &y in &origins[1] {
            for &x in &origins[2] {
                let window = s![z..z + patch[0], y..y + patch[1], x..x + patch[2]];
                let crop = padded.data.slice(window).to_owned();
                let probs = predict(&crop)?;
                let mut target = acc.slice_mut(s![.., z..z + patch[0], y..y + patch[1], x..x + patch[2]]);
                target += &probs;
            }
        }
    }
    for mut channel in acc.outer_iter_mut() {
        channel.zip_mut_with(&counts, |v, &c| *v /= T::from_usize_lossy(c as usize));
    }
    let orig = image.shape();
    let cropped = acc
        .slice(s![
            ..,
            before[0]..before[0] + orig[0],
            before[1]..before[1] + orig[1],
            before[2]..before[2] + orig[2]
        ])
        .to_owned();
    Ok(ProbabilityMap::new_unchecked(cropped))
}

/// Primary-decoder probabilities over the whole volume.
pub fn sliding_window_predict<T: Scalar>(
    model: &TDNet<T>,
    v: &Volume<T>,
    patch: Shape3,
    stride: Option<Shape3>,
) -> Result<ProbabilityMap<T>> {
    let stride = stride.unwrap_or_else(|| default_stride(patch));
    sliding_window(&v.data, model.config().num_classes, patch, stride, |crop| {
        let logits = model.predict_primary(&Tensor::from_image(crop))?.into_array4();
        Ok(ProbabilityMap::from_logits(&logits).probs)
    })
}

/// Hard labels from [`sliding_window_predict`].
pub fn predict_mask<T: Scalar>(model: &TDNet<T>, v: &Volume<T>, patch: Shape3, stride: Option<Shape3>) -> Result<SegmentationMask> {
    Ok(argmax_to_mask(&sliding_window_predict(model, v, patch, stride)?))
}
