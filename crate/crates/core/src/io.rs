//! NIfTI reading and writing.
//!
//! Files store axes as (x, y, z); in memory everything is (depth, height, width),
//! so axes and spacings are reversed on the way in and out.

use std::path::Path;

use ndarray::{Array3, Ix3};
use nifti::{IntoNdArray, NiftiHeader, NiftiObject, ReaderOptions};

use crate::data::{ScribbleAnnotation, SegmentationMask, Volume};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

fn nifti_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Nifti {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

fn read_raw(path: &Path) -> Result<(Array3<f64>, [f64; 3])> {
    let obj = ReaderOptions::new().read_file(path).map_err(|e| nifti_err(path, e))?;
    let header = obj.header().clone();
    let data = obj
        .into_volume()
        .into_ndarray::<f64>()
        .map_err(|e| nifti_err(path, e))?;
    // drop trailing singleton axes (e.g. a time axis of length 1)
    let mut data = data;
    while data.ndim() > 3 && data.shape()[data.ndim() - 1] == 1 {
        let last = data.ndim() - 1;
        data = data.index_axis_move(ndarray::Axis(last), 0);
    }
    let data = data
        .into_dimensionality::<Ix3>()
        .map_err(|_| nifti_err(path, "expected a three-dimensional image"))?;
    let data = data.reversed_axes().as_standard_layout().into_owned();
    let p = header.pixdim;
    let spacing = [p[3] as f64, p[2] as f64, p[1] as f64].map(|s| if s > 0.0 { s } else { 1.0 });
    Ok((data, spacing))
}

fn case_id(path: &Path) -> String {
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    name.trim_end_matches(".gz").trim_end_matches(".nii").to_string()
}

/// Reads an intensity image; spacing comes from the header.
pub fn read_volume<T: Scalar>(path: impl AsRef<Path>) -> Result<Volume<T>> {
    let path = path.as_ref();
    let (data, spacing) = read_raw(path)?;
    Volume::new(data.mapv(T::lit), spacing, case_id(path))
}

fn read_codes(path: &Path) -> Result<(Array3<u16>, [f64; 3])> {
    let (data, spacing) = read_raw(path)?;
    let mut codes = Array3::zeros(data.raw_dim());
    for (dst, &v) in codes.iter_mut().zip(&data) {
        if v.fract() != 0.0 || !(0.0..=u16::MAX as f64).contains(&v) {
            return Err(nifti_err(path, format!("non-integer label value {v}")));
        }
        *dst = v as u16;
    }
    Ok((codes, spacing))
}

/// Reads a dense label image.
pub fn read_segmentation(path: impl AsRef<Path>, num_classes: usize) -> Result<(SegmentationMask, [f64; 3])> {
    let path = path.as_ref();
    let (codes, spacing) = read_codes(path)?;
    Ok((SegmentationMask::new(codes, num_classes)?, spacing))
}

/// Reads a scribble image where 255 marks unlabeled voxels.
pub fn read_scribble(path: impl AsRef<Path>, num_classes: usize) -> Result<ScribbleAnnotation> {
    let path = path.as_ref();
    let (codes, _) = read_codes(path)?;
    if let Some(&bad) = codes.iter().find(|&&v| v > u8::MAX as u16) {
        return Err(nifti_err(path, format!("scribble code {bad} does not fit in 8 bits")));
    }
    ScribbleAnnotation::from_file_codes(&codes.mapv(|v| v as u8), num_classes)
}

fn header_for(spacing: [f64; 3]) -> NiftiHeader {
    let mut header = NiftiHeader::default();
    header.pixdim[1] = spacing[2] as f32;
    header.pixdim[2] = spacing[1] as f32;
    header.pixdim[3] = spacing[0] as f32;
    header.xyzt_units = 2; // millimetres
    header
}

/// Writes a float32 image. A `.nii.gz` extension selects compression.
pub fn write_volume<T: Scalar>(path: impl AsRef<Path>, v: &Volume<T>) -> Result<()> {
    let path = path.as_ref();
    let data = v.data.mapv(|x| x.as_f64() as f32);
    let header = header_for(v.spacing);
    nifti::writer::WriterOptions::new(path)
        .reference_header(&header)
        .write_nifti(&data.t())
        .map_err(|e| nifti_err(path, e))
}

/// Writes an 8-bit label image.
pub fn write_labels(path: impl AsRef<Path>, labels: &Array3<u8>, spacing: [f64; 3]) -> Result<()> {
    let path = path.as_ref();
    let header = header_for(spacing);
    nifti::writer::WriterOptions::new(path)
        .reference_header(&header)
        .write_nifti(&labels.t())
        .map_err(|e| nifti_err(path, e))
}

pub fn write_segmentation(path: impl AsRef<Path>, mask: &SegmentationMask, spacing: [f64; 3]) -> Result<()> {
    if mask.num_classes > u8::MAX as usize {
        return Err(Error::InvalidArgument("label files hold at most 255 classes".into()));
    }
    write_labels(path, &mask.labels.mapv(|v| v as u8), spacing)
}

pub fn write_scribble(path: impl AsRef<Path>, s: &ScribbleAnnotation, spacing: [f64; 3]) -> Result<()> {
    write_labels(path, &s.to_file_codes(), spacing)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn volume_round_trip_keeps_axes_and_spacing() {
        let dir = tempfile::tempdir().unwrap();
        let data = Array3::from_shape_fn((3, 4, 5), |(z, y, x)| (z * 100 + y * 10 + x) as f64);
        let v = Volume::new(data.clone(), [2.5, 0.8, 0.7], "a").unwrap();
        for name in ["a.nii", "a.nii.gz"] {
            let path = dir.path().join(name);
            write_volume(&path, &v).unwrap();
            let back: Volume<f64> = read_volume(&path).unwrap();
            assert_eq!(back.data, data);
            assert_eq!(back.id, "a");
            for (a, b) in back.spacing.iter().zip(v.spacing) {
                assert!((a - b).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn file_axis_order_is_xyz() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("o.nii");
        let v = Volume::new(Array3::<f32>::zeros((2, 3, 4)), [3.0, 2.0, 1.0], "o").unwrap();
        write_volume(&path, &v).unwrap();
        let header = NiftiHeader::from_file(&path).unwrap();
        assert_eq!(&header.dim[..4], &[3, 4, 3, 2]);
        assert_eq!(&header.pixdim[1..4], &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn scribble_round_trip_maps_ignore() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.nii.gz");
        let mut labels = Array3::from_elem((2, 2, 2), ScribbleAnnotation::IGNORE);
        labels[[0, 1, 1]] = 2;
        labels[[1, 0, 0]] = 0;
        let s = ScribbleAnnotation::new(labels, 3).unwrap();
        write_scribble(&path, &s, [1.0; 3]).unwrap();
        let back = read_scribble(&path, 3).unwrap();
        assert_eq!(back.labels, s.labels);
        let (raw, _) = read_codes(&path).unwrap();
        assert_eq!(raw[[0, 0, 0]], 255);
    }

    #[test]
    fn segmentation_rejects_out_of_range_labels() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("l.nii");
        write_labels(&path, &Array3::from_elem((2, 2, 2), 5u8), [1.0; 3]).unwrap();
        assert!(read_segmentation(&path, 4).is_err());
        assert!(read_segmentation(&path, 6).is_ok());
        assert!(matches!(read_volume::<f32>(dir.path().join("missing.nii")), Err(Error::Nifti { .. })));
    }
}
