//! Domain types shared across the pipeline.
//!
//! Every grid uses the axis order (class, depth, height, width); spatial-only grids
//! drop the leading class axis. Depth indexes axial slices.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array3, Array4, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Tolerance on per-voxel probability sums.
pub const SIMPLEX_TOLERANCE: f64 = 1e-5;

/// Spatial shape `[depth, height, width]`.
pub type Shape3 = [usize; 3];

/// A 3D scalar image with physical voxel spacing in millimetres.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume<T> {
    pub data: Array3<T>,
    /// Voxel size along (depth, height, width).
    pub spacing: [f64; 3],
    pub id: String,
}

impl<T: Scalar> Volume<T> {
    pub fn new(data: Array3<T>, spacing: [f64; 3], id: impl Into<String>) -> Result<Self> {
        if data.shape().iter().any(|&s| s == 0) {
            return Err(Error::InvalidArgument(format!(
                "volume dimensions must be >= 1, got {:?}",
                data.shape()
            )));
        }
        if spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "voxel spacing must be positive, got {spacing:?}"
            )));
        }
        let data = if data.is_standard_layout() {
            data
        } else {
            data.as_standard_layout().into_owned()
        };
        Ok(Self {
            data,
            spacing,
            id: id.into(),
        })
    }

    pub fn shape(&self) -> Shape3 {
        let s = self.data.shape();
        [s[0], s[1], s[2]]
    }

    /// True when every intensity lies in `[0, 1]`.
    pub fn is_normalized(&self) -> bool {
        self.data.iter().all(|&v| v >= T::zero() && v <= T::one())
    }
}

/// Sparse per-voxel labels; unlabeled voxels carry [`ScribbleAnnotation::IGNORE`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ScribbleAnnotation {
    pub labels: Array3<u16>,
    pub num_classes: usize,
}

impl ScribbleAnnotation {
    /// In-memory sentinel for unlabeled voxels.
    pub const IGNORE: u16 = u16::MAX;
    /// Code used for unlabeled voxels in 8-bit label files.
    pub const FILE_IGNORE_CODE: u8 = 255;

    pub fn new(labels: Array3<u16>, num_classes: usize) -> Result<Self> {
        check_labels(&labels, num_classes, true)?;
        Ok(Self {
            labels: labels.as_standard_layout().into_owned(),
            num_classes,
        })
    }

    /// An annotation with every voxel unlabeled.
    pub fn unlabeled(shape: Shape3, num_classes: usize) -> Self {
        Self {
            labels: Array3::from_elem(shape, Self::IGNORE),
            num_classes,
        }
    }

    pub fn shape(&self) -> Shape3 {
        let s = self.labels.shape();
        [s[0], s[1], s[2]]
    }

    pub fn is_labeled(&self, index: [usize; 3]) -> bool {
        self.labels[index] != Self::IGNORE
    }

    /// Number of labeled voxels, `|Ω_S|`.
    pub fn num_labeled(&self) -> usize {
        self.labels.iter().filter(|&&l| l != Self::IGNORE).count()
    }

    /// Decodes 8-bit file labels, mapping [`Self::FILE_IGNORE_CODE`] to the sentinel.
    pub fn from_file_codes(codes: &Array3<u8>, num_classes: usize) -> Result<Self> {
        let labels = codes.mapv(|c| {
            if c == Self::FILE_IGNORE_CODE {
                Self::IGNORE
            } else {
                c as u16
            }
        });
        Self::new(labels, num_classes)
    }

    pub fn to_file_codes(&self) -> Array3<u8> {
        self.labels.mapv(|l| {
            if l == Self::IGNORE {
                Self::FILE_IGNORE_CODE
            } else {
                l as u8
            }
        })
    }
}

/// Hard per-voxel labels (0 is background).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SegmentationMask {
    pub labels: Array3<u16>,
    pub num_classes: usize,
}

impl SegmentationMask {
    pub fn new(labels: Array3<u16>, num_classes: usize) -> Result<Self> {
        check_labels(&labels, num_classes, false)?;
        Ok(Self {
            labels: labels.as_standard_layout().into_owned(),
            num_classes,
        })
    }

    pub fn shape(&self) -> Shape3 {
        let s = self.labels.shape();
        [s[0], s[1], s[2]]
    }

    /// Binary foreground indicator for one class.
    pub fn class_mask(&self, class_id: u16) -> Array3<bool> {
        self.labels.mapv(|l| l == class_id)
    }
}

fn check_labels(labels: &Array3<u16>, num_classes: usize, allow_ignore: bool) -> Result<()> {
    if num_classes == 0 {
        return Err(Error::InvalidArgument("num_classes must be >= 1".into()));
    }
    for (index, &value) in labels.iter().enumerate() {
        let ignored = allow_ignore && value == ScribbleAnnotation::IGNORE;
        if !ignored && value as usize >= num_classes {
            return Err(Error::LabelOutOfRange {
                value,
                index,
                num_classes,
            });
        }
    }
    Ok(())
}

/// Per-voxel class probabilities, shape `(C, D, H, W)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbabilityMap<T> {
    pub probs: Array4<T>,
}

impl<T: Scalar> ProbabilityMap<T> {
    /// Validates entries in `[0, 1]` and per-voxel sums of one.
    pub fn new(probs: Array4<T>) -> Result<Self> {
        let tol = T::lit(SIMPLEX_TOLERANCE);
        if probs.iter().any(|&p| !(p >= T::zero() && p <= T::one() + tol)) {
            return Err(Error::InvalidArgument(
                "probabilities must lie in [0, 1]".into(),
            ));
        }
        let sums = probs.sum_axis(Axis(0));
        if let Some(bad) = sums.iter().find(|&&s| (s - T::one()).abs() > tol) {
            return Err(Error::InvalidArgument(format!(
                "per-voxel probabilities sum to {bad}, expected 1"
            )));
        }
        Ok(Self::new_unchecked(probs))
    }

    /// Wraps `probs` without validation; the caller guarantees the simplex invariant.
    pub fn new_unchecked(probs: Array4<T>) -> Self {
        let probs = if probs.is_standard_layout() {
            probs
        } else {
            probs.as_standard_layout().into_owned()
        };
        Self { probs }
    }

    /// Per-voxel softmax over the class axis.
    pub fn from_logits(logits: &Array4<T>) -> Self {
        let mut probs = logits.as_standard_layout().into_owned();
        let c = probs.shape()[0];
        let n = probs.len() / c.max(1);
        softmax_channels(probs.as_slice_mut().expect("standard layout"), c, n);
        Self { probs }
    }

    pub fn num_classes(&self) -> usize {
        self.probs.shape()[0]
    }

    pub fn spatial_shape(&self) -> Shape3 {
        let s = self.probs.shape();
        [s[1], s[2], s[3]]
    }

    pub fn as_slice(&self) -> &[T] {
        self.probs.as_slice().expect("standard layout")
    }
}

/// In-place softmax over `c` channels, each a contiguous run of `n` values.
pub fn softmax_channels<T: Scalar>(data: &mut [T], c: usize, n: usize) {
    debug_assert_eq!(data.len(), c * n);
    for i in 0..n {
        let mut max = T::neg_infinity();
        for k in 0..c {
            max = max.max(data[k * n + i]);
        }
        let mut sum = T::zero();
        for k in 0..c {
            let e = (data[k * n + i] - max).exp();
            data[k * n + i] = e;
            sum += e;
        }
        for k in 0..c {
            data[k * n + i] /= sum;
        }
    }
}

/// Projection direction for class-affinity computation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum View {
    /// Collapses depth.
    Axial,
    /// Collapses width.
    Sagittal,
    /// Collapses height.
    Coronal,
}

impl View {
    pub const ALL: [View; 3] = [View::Axial, View::Sagittal, View::Coronal];

    /// Spatial axis (0 = depth, 1 = height, 2 = width) averaged out by the projection.
    pub fn collapsed_axis(self) -> usize {
        match self {
            View::Axial => 0,
            View::Sagittal => 2,
            View::Coronal => 1,
        }
    }
}

impl fmt::Display for View {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            View::Axial => "axial",
            View::Sagittal => "sagittal",
            View::Coronal => "coronal",
        })
    }
}

impl FromStr for View {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "axial" => Ok(View::Axial),
            "sagittal" => Ok(View::Sagittal),
            "coronal" => Ok(View::Coronal),
            _ => Err(Error::UnknownView(s.to_string())),
        }
    }
}

/// Matrix norm used to normalize raw class affinities.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AffinityNorm {
    /// Sum of all entries; the result is a distribution over class pairs.
    #[default]
    L1,
    Frobenius,
}

/// Normalized `C×C` inter-class co-activation matrix for one view, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassAffinityMatrix<T> {
    pub entries: Vec<T>,
    pub num_classes: usize,
    pub view: View,
    pub normalization: AffinityNorm,
}

impl<T: Scalar> ClassAffinityMatrix<T> {
    pub fn get(&self, row: usize, col: usize) -> T {
        self.entries[row * self.num_classes + col]
    }

    pub fn is_symmetric(&self, tol: T) -> bool {
        let c = self.num_classes;
        (0..c).all(|i| (0..c).all(|j| (self.get(i, j) - self.get(j, i)).abs() <= tol))
    }
}

/// Per-voxel confidence weights derived from pseudo-label entropy.
#[derive(Clone, Debug, PartialEq)]
pub struct UncertaintyWeightMap<T> {
    pub weights: Array3<T>,
}

impl<T: Scalar> UncertaintyWeightMap<T> {
    pub fn as_slice(&self) -> &[T] {
        self.weights.as_slice().expect("standard layout")
    }

    pub fn total(&self) -> T {
        self.weights.iter().copied().sum()
    }
}

/// One-hot channels `(C, D, H, W)` of a scribble plus its labeled-voxel mask.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct OneHotScribble {
    pub channels: Array4<u8>,
    pub mask: Array3<u8>,
}

/// Expands a scribble into one-hot channels; unlabeled voxels get all-zero channels.
pub fn one_hot_encode_scribble(s: &ScribbleAnnotation) -> Result<OneHotScribble> {
    check_labels(&s.labels, s.num_classes, true)?;
    let [d, h, w] = s.shape();
    let mut channels = Array4::zeros((s.num_classes, d, h, w));
    let mut mask = Array3::zeros((d, h, w));
    for ((z, y, x), &label) in s.labels.indexed_iter() {
        if label != ScribbleAnnotation::IGNORE {
            channels[[label as usize, z, y, x]] = 1;
            mask[[z, y, x]] = 1;
        }
    }
    Ok(OneHotScribble { channels, mask })
}

/// Hard labels by per-voxel argmax; ties resolve to the lowest class index.
pub fn argmax_to_mask<T: Scalar>(p: &ProbabilityMap<T>) -> SegmentationMask {
    let c = p.num_classes();
    let shape = p.spatial_shape();
    let n = shape.iter().product::<usize>();
    let data = p.as_slice();
    let labels: Vec<u16> = (0..n)
        .map(|i| {
            let mut best = 0usize;
            for k in 1..c {
                if data[k * n + i] > data[best * n + i] {
                    best = k;
                }
            }
            best as u16
        })
        .collect();
    SegmentationMask {
        labels: Array3::from_shape_vec(shape, labels).expect("shape matches"),
        num_classes: c,
    }
}
