//! Overlap and surface-distance metrics for label volumes.
//!
//! Surfaces are foreground voxels with at least one six-connected neighbor that is
//! background or outside the volume. Distances are between voxel centers in mm.

use std::io::Write;

use ndarray::{Array3, ArrayViewMut1, Axis};
use serde::{Deserialize, Serialize};

use crate::data::SegmentationMask;
use crate::error::{Error, Result};

/// `2|A∩B| / (|A|+|B|)` for the masks of `class_id`; 1 when both are empty.
pub fn dice_score(pred: &SegmentationMask, reference: &SegmentationMask, class_id: u16) -> Result<f64> {
    check_shapes(pred, reference)?;
    let (mut inter, mut a, mut b) = (0usize, 0usize, 0usize);
    for (&p, &r) in pred.labels.iter().zip(&reference.labels) {
        let (in_p, in_r) = (p == class_id, r == class_id);
        a += in_p as usize;
        b += in_r as usize;
        inter += (in_p && in_r) as usize;
    }
    Ok(if a + b == 0 { 1.0 } else { 2.0 * inter as f64 / (a + b) as f64 })
}

fn check_shapes(pred: &SegmentationMask, reference: &SegmentationMask) -> Result<()> {
    const NAMES: [&str; 3] = ["depth", "height", "width"];
    for (axis, (&p, &r)) in pred.shape().iter().zip(&reference.shape()).enumerate() {
        if p != r {
            return Err(Error::ShapeMismatch {
                axis: NAMES[axis],
                expected: r,
                actual: p,
            });
        }
    }
    Ok(())
}

/// Which of the two masks was empty, if any.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EmptyFlag {
    EmptyPair,
    EmptyPred,
    EmptyRef,
}

impl EmptyFlag {
    pub fn as_str(self) -> &'static str {
        match self {
            EmptyFlag::EmptyPair => "empty-pair",
            EmptyFlag::EmptyPred => "empty-pred",
            EmptyFlag::EmptyRef => "empty-ref",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SurfaceDistances {
    pub asd: f64,
    pub hd95: f64,
    /// Set when a mask was empty; distances are then 0 (both empty) or the corner sentinel.
    pub flag: Option<EmptyFlag>,
}

/// Foreground voxels touching background or the volume boundary along a face.
pub fn surface_voxels(mask: &Array3<bool>) -> Array3<bool> {
    let (d, h, w) = mask.dim();
    Array3::from_shape_fn((d, h, w), |(z, y, x)| {
        if !mask[[z, y, x]] {
            return false;
        }
        let at = |dz: isize, dy: isize, dx: isize| -> bool {
            let (zz, yy, xx) = (z as isize + dz, y as isize + dy, x as isize + dx);
            if zz < 0 || yy < 0 || xx < 0 || zz >= d as isize || yy >= h as isize || xx >= w as isize {
                return false;
            }
            mask[[zz as usize, yy as usize, xx as usize]]
        };
        !(at(-1, 0, 0) && at(1, 0, 0) && at(0, -1, 0) && at(0, 1, 0) && at(0, 0, -1) && at(0, 0, 1))
    })
}

/// Exact squared Euclidean distance (in mm²) from every voxel to the nearest `true`
/// voxel of `features`; infinite everywhere if there are none.
pub fn squared_distance_transform(features: &Array3<bool>, spacing: [f64; 3]) -> Array3<f64> {
    let mut dist = features.mapv(|f| if f { 0.0 } else { f64::INFINITY });
    let longest = dist.shape().iter().copied().max().unwrap_or(0);
    let mut scratch = LineScratch::new(longest);
    for (axis, &s) in spacing.iter().enumerate() {
        for lane in dist.lanes_mut(Axis(axis)) {
            scratch.transform(lane, s * s);
        }
    }
    dist
}

/// Lower envelope of parabolas along one line (Felzenszwalb and Huttenlocher).
struct LineScratch {
    f: Vec<f64>,
    v: Vec<usize>,
    z: Vec<f64>,
}

impl LineScratch {
    fn new(n: usize) -> Self {
        Self {
            f: vec![0.0; n],
            v: vec![0; n],
            z: vec![0.0; n + 1],
        }
    }

    fn transform(&mut self, mut line: ArrayViewMut1<f64>, s2: f64) {
        let n = line.len();
        for (dst, &src) in self.f.iter_mut().zip(line.iter()) {
            *dst = src;
        }
        let f = &self.f[..n];
        let mut k = 0usize;
        let mut started = false;
        for q in 0..n {
            if f[q].is_infinite() {
                continue;
            }
            if !started {
                self.v[0] = q;
                self.z[0] = f64::NEG_INFINITY;
                self.z[1] = f64::INFINITY;
                started = true;
                continue;
            }
            loop {
                let p = self.v[k];
                let (qf, pf) = (q as f64, p as f64);
                let s = ((f[q] + s2 * qf * qf) - (f[p] + s2 * pf * pf)) / (2.0 * s2 * (qf - pf));
                // z[0] is -inf, so this never pops the first parabola
                if s <= self.z[k] {
                    k -= 1;
                    continue;
                }
                k += 1;
                self.v[k] = q;
                self.z[k] = s;
                self.z[k + 1] = f64::INFINITY;
                break;
            }
        }
        if !started {
            return;
        }
        let mut k = 0usize;
        for (p, out) in line.iter_mut().enumerate() {
            while self.z[k + 1] < p as f64 {
                k += 1;
            }
            let q = self.v[k];
            let d = p as f64 - q as f64;
            *out = f[q] + s2 * (d * d);
        }
    }
}

/// Distances from each surface voxel of `from` to the nearest surface voxel of `to`.
fn directed_distances(from: &Array3<bool>, to_edt: &Array3<f64>) -> Vec<f64> {
    from.iter()
        .zip(to_edt)
        .filter(|(&s, _)| s)
        .map(|(_, &d2)| d2.sqrt())
        .collect()
}

/// Percentile with linear interpolation between closest ranks; `q` in [0, 100].
pub fn percentile(values: &[f64], q: f64) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let rank = q / 100.0 * (sorted.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (rank - lo as f64)
}

/// Distance from a surface to the volume corner farthest from it, used when the
/// other mask is empty.
fn corner_sentinel(surface: &Array3<bool>, spacing: [f64; 3]) -> f64 {
    let (d, h, w) = surface.dim();
    let mut worst = 0.0f64;
    for corner in 0..8 {
        let c = [
            if corner & 4 != 0 { d - 1 } else { 0 },
            if corner & 2 != 0 { h - 1 } else { 0 },
            if corner & 1 != 0 { w - 1 } else { 0 },
        ];
        let nearest = surface
            .indexed_iter()
            .filter(|(_, &s)| s)
            .map(|((z, y, x), _)| {
                let dz = (z as f64 - c[0] as f64) * spacing[0];
                let dy = (y as f64 - c[1] as f64) * spacing[1];
                let dx = (x as f64 - c[2] as f64) * spacing[2];
                (dz * dz + dy * dy + dx * dx).sqrt()
            })
            .fold(f64::INFINITY, f64::min);
        worst = worst.max(nearest);
    }
    worst
}

/// Average surface distance and 95th-percentile Hausdorff distance in mm.
pub fn surface_metrics(
    pred: &SegmentationMask,
    reference: &SegmentationMask,
    class_id: u16,
    spacing: [f64; 3],
) -> Result<SurfaceDistances> {
    check_shapes(pred, reference)?;
    if spacing.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
        return Err(Error::InvalidArgument(format!("spacing must be positive, got {spacing:?}")));
    }
    let a = surface_voxels(&pred.class_mask(class_id));
    let b = surface_voxels(&reference.class_mask(class_id));
    let (a_empty, b_empty) = (!a.iter().any(|&v| v), !b.iter().any(|&v| v));
    match (a_empty, b_empty) {
        (true, true) => {
            return Ok(SurfaceDistances {
                asd: 0.0,
                hd95: 0.0,
                flag: Some(EmptyFlag::EmptyPair),
            })
        }
        (true, false) | (false, true) => {
            let (surface, flag) = if a_empty { (&b, EmptyFlag::EmptyPred) } else { (&a, EmptyFlag::EmptyRef) };
            let s = corner_sentinel(surface, spacing);
            return Ok(SurfaceDistances {
                asd: s,
                hd95: s,
                flag: Some(flag),
            });
        }
        (false, false) => {}
    }
    let ab = directed_distances(&a, &squared_distance_transform(&b, spacing));
    let ba = directed_distances(&b, &squared_distance_transform(&a, spacing));
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    Ok(SurfaceDistances {
        asd: 0.5 * (mean(&ab) + mean(&ba)),
        hd95: percentile(&ab, 95.0).max(percentile(&ba, 95.0)),
        flag: None,
    })
}

/// Metrics of one foreground class in one case.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub class: u16,
    pub dsc: f64,
    pub asd_mm: f64,
    pub hd95_mm: f64,
    pub flag: Option<EmptyFlag>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaseReport {
    pub case_id: String,
    pub classes: Vec<ClassMetrics>,
}

impl CaseReport {
    pub fn mean_dsc(&self) -> f64 {
        mean_of(self.classes.iter().map(|c| c.dsc))
    }

    pub fn mean_asd(&self) -> f64 {
        mean_of(self.classes.iter().map(|c| c.asd_mm))
    }

    pub fn mean_hd95(&self) -> f64 {
        mean_of(self.classes.iter().map(|c| c.hd95_mm))
    }
}

fn mean_of(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        sum / n as f64
    }
}

/// Dice, ASD and HD95 for every foreground class `1..num_classes`.
pub fn evaluate_case(
    case_id: &str,
    pred: &SegmentationMask,
    reference: &SegmentationMask,
    num_classes: usize,
    spacing: [f64; 3],
) -> Result<CaseReport> {
    let classes = (1..num_classes as u16)
        .map(|class| {
            let dsc = dice_score(pred, reference, class)?;
            let s = surface_metrics(pred, reference, class, spacing)?;
            Ok(ClassMetrics {
                class,
                dsc,
                asd_mm: s.asd,
                hd95_mm: s.hd95,
                flag: s.flag,
            })
        })
        .collect::<Result<_>>()?;
    Ok(CaseReport {
        case_id: case_id.to_string(),
        classes,
    })
}

#[derive(Serialize)]
struct CsvRow<'a> {
    case_id: &'a str,
    class: String,
    dsc: f64,
    asd_mm: f64,
    hd95_mm: f64,
    flag: &'a str,
}

/// One row per case and class, then one `mean` row per class and an overall `mean` row.
pub fn write_report_csv<W: Write>(writer: W, reports: &[CaseReport]) -> Result<()> {
    let mut csv = csv::Writer::from_writer(writer);
    for r in reports {
        for c in &r.classes {
            csv.serialize(CsvRow {
                case_id: &r.case_id,
                class: c.class.to_string(),
                dsc: c.dsc,
                asd_mm: c.asd_mm,
                hd95_mm: c.hd95_mm,
                flag: c.flag.map_or("", EmptyFlag::as_str),
            })?;
        }
    }
    let classes: Vec<u16> = reports.first().map(|r| r.classes.iter().map(|c| c.class).collect()).unwrap_or_default();
    let all = || reports.iter().flat_map(|r| r.classes.iter());
    for &class in &classes {
        let of = || all().filter(move |c| c.class == class);
        csv.serialize(CsvRow {
            case_id: "mean",
            class: class.to_string(),
            dsc: mean_of(of().map(|c| c.dsc)),
            asd_mm: mean_of(of().map(|c| c.asd_mm)),
            hd95_mm: mean_of(of().map(|c| c.hd95_mm)),
            flag: "",
        })?;
    }
    if !reports.is_empty() {
        csv.serialize(CsvRow {
            case_id: "mean",
            class: "all".into(),
            dsc: mean_of(all().map(|c| c.dsc)),
            asd_mm: mean_of(all().map(|c| c.asd_mm)),
            hd95_mm: mean_of(all().map(|c| c.hd95_mm)),
            flag: "",
        })?;
    }
    csv.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn mask(shape: (usize, usize, usize), f: impl Fn(usize, usize, usize) -> u16) -> SegmentationMask {
        SegmentationMask::new(Array3::from_shape_fn(shape, |(z, y, x)| f(z, y, x)), 4).unwrap()
    }

    #[test]
    fn dice_examples() {
        let a = mask((1, 1, 3), |_, _, x| (x < 2) as u16);
        let b = mask((1, 1, 3), |_, _, x| (x > 0) as u16);
        assert_eq!(dice_score(&a, &b, 1).unwrap(), 0.5);
        assert_eq!(dice_score(&a, &a, 1).unwrap(), 1.0);
        let c = mask((1, 1, 3), |_, _, x| (x == 2) as u16);
        let d = mask((1, 1, 3), |_, _, x| (x == 0) as u16);
        assert_eq!(dice_score(&c, &d, 1).unwrap(), 0.0);
        assert_eq!(dice_score(&c, &d, 3).unwrap(), 1.0);
    }

    fn slabs(gap: usize) -> (SegmentationMask, SegmentationMask) {
        let shape = (12, 5, 5);
        (mask(shape, |z, _, _| (z == 2) as u16), mask(shape, move |z, _, _| (z == 2 + gap) as u16))
    }

    #[test]
    fn slab_distances() {
        let (a, b) = slabs(3);
        let s = surface_metrics(&a, &b, 1, [1.0, 1.0, 1.0]).unwrap();
        assert_abs_diff_eq!(s.asd, 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(s.hd95, 3.0, epsilon = 1e-12);
        let s = surface_metrics(&a, &b, 1, [2.5, 1.0, 1.0]).unwrap();
        assert_abs_diff_eq!(s.asd, 7.5, epsilon = 1e-12);
        assert_abs_diff_eq!(s.hd95, 7.5, epsilon = 1e-12);
    }

    #[test]
    fn slab_distances_grow_with_separation() {
        let mut last = 0.0;
        for gap in 1..8 {
            let (a, b) = slabs(gap);
            let s = surface_metrics(&a, &b, 1, [1.0; 3]).unwrap();
            assert!(s.asd > last && s.hd95 >= s.asd - 1e-12);
            last = s.asd;
        }
    }

    #[test]
    fn identical_masks_have_zero_distance() {
        let a = mask((6, 6, 6), |z, y, x| ((z + y + x) % 3 == 0) as u16);
        let s = surface_metrics(&a, &a, 1, [1.0, 2.0, 0.5]).unwrap();
        assert_eq!((s.asd, s.hd95, s.flag), (0.0, 0.0, None));
    }

    #[test]
    fn empty_masks_are_flagged() {
        let a = mask((4, 4, 4), |_, _, _| 0);
        let b = mask((4, 4, 4), |z, y, x| (z == 0 && y == 0 && x == 0) as u16);
        assert_eq!(surface_metrics(&a, &a, 1, [1.0; 3]).unwrap().flag, Some(EmptyFlag::EmptyPair));
        let s = surface_metrics(&a, &b, 1, [1.0; 3]).unwrap();
        assert_eq!(s.flag, Some(EmptyFlag::EmptyPred));
        assert_abs_diff_eq!(s.hd95, (27.0f64).sqrt(), epsilon = 1e-12);
        assert_eq!(surface_metrics(&b, &a, 1, [1.0; 3]).unwrap().flag, Some(EmptyFlag::EmptyRef));
    }

    #[test]
    fn percentile_interpolates() {
        assert_eq!(percentile(&[3.0, 1.0, 2.0], 50.0), 2.0);
        assert_abs_diff_eq!(percentile(&[0.0, 10.0], 95.0), 9.5);
        assert_eq!(percentile(&[4.0], 95.0), 4.0);
    }

    #[test]
    fn boundary_voxels_are_surface() {
        let full = Array3::from_elem((3, 3, 3), true);
        let s = surface_voxels(&full);
        assert!(!s[[1, 1, 1]]);
        assert_eq!(s.iter().filter(|&&v| v).count(), 26);
    }

    #[test]
    fn perfect_case_report() {
        let a = mask((5, 5, 5), |z, _, x| if z < 2 { 1 } else if x > 2 { 2 } else { 0 });
        let r = evaluate_case("c", &a, &a, 4, [1.0; 3]).unwrap();
        assert_eq!(r.classes.len(), 3);
        assert_eq!(r.classes[2].flag, Some(EmptyFlag::EmptyPair));
        assert!(r.classes.iter().all(|c| c.dsc == 1.0 && c.asd_mm == 0.0 && c.hd95_mm == 0.0));
        let mut out = Vec::new();
        write_report_csv(&mut out, &[r]).unwrap();
        let text = String::from_utf8(out).unwrap();
        let lines: Vec<_> = text.lines().collect();
        assert_eq!(lines[0], "case_id,class,dsc,asd_mm,hd95_mm,flag");
        assert_eq!(lines.len(), 1 + 3 + 3 + 1);
        assert!(lines[3].ends_with("empty-pair"));
        assert!(lines.last().unwrap().starts_with("mean,all,1.0,0.0,0.0"));
    }
}
