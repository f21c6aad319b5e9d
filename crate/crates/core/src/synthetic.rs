//! Procedural ellipsoid phantoms with exact labels, and scribbles drawn from them.

use ndarray::{s, Array2, Array3};
use rand::seq::SliceRandom;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{ScribbleAnnotation, SegmentationMask, Shape3, Volume};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Parameters of [`generate_phantom_with`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhantomOptions {
    pub size: Shape3,
    pub num_classes: usize,
    pub noise_sigma: f64,
    /// Peak magnitude of the additive low-frequency bias field.
    pub bias_amplitude: f64,
    pub background_intensity: f64,
    /// Organ mean intensities are evenly spaced over this range in class order.
    pub organ_intensity_range: (f64, f64),
    /// Mean radius of the largest and smallest organ as a fraction of the volume size.
    pub radius_fraction_range: (f64, f64),
    pub max_attempts: usize,
}

impl Default for PhantomOptions {
    fn default() -> Self {
        Self {
            size: [64, 64, 64],
            num_classes: 4,
            noise_sigma: 0.1,
            bias_amplitude: 0.08,
            background_intensity: 0.25,
            organ_intensity_range: (0.45, 0.8),
            radius_fraction_range: (0.2, 0.155),
            max_attempts: 500,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Phantom<T> {
    pub volume: Volume<T>,
    pub labels: SegmentationMask,
    /// Mean intensity assigned to each class, background first.
    pub intensities: Vec<f64>,
}

/// Phantom with default shape parameters.
pub fn generate_phantom<T: Scalar>(seed: u64, size: Shape3, num_classes: usize, noise_sigma: f64) -> Result<Phantom<T>> {
    generate_phantom_with(
        seed,
        &PhantomOptions {
            size,
            num_classes,
            noise_sigma,
            ..PhantomOptions::default()
        },
    )
}

struct Ellipsoid {
    center: [f64; 3],
    radii: [f64; 3],
    /// Rows are the ellipsoid axes in volume coordinates.
    axes: [[f64; 3]; 3],
}

impl Ellipsoid {
    fn random(rng: &mut ChaCha8Rng, size: Shape3, mean_radius: f64) -> Self {
        let radii = [0; 3].map(|_| mean_radius * rng.random_range(0.9..1.15));
        let reach = radii.iter().copied().fold(0.0, f64::max) + 1.0;
        let center = [0, 1, 2].map(|a| {
            let lo = reach.min(size[a] as f64 / 2.0);
            let hi = (size[a] as f64 - 1.0 - reach).max(lo);
            rng.random_range(lo..=hi)
        });
        let (a, b, c) = (
            rng.random_range(0.0..std::f64::consts::TAU),
            rng.random_range(0.0..std::f64::consts::PI),
            rng.random_range(0.0..std::f64::consts::TAU),
        );
        Self {
            center,
            radii,
            axes: rotation(a, b, c),
        }
    }

    /// Normalized squared radius of `p`; inside when ≤ 1.
    fn level(&self, p: [f64; 3], grow: f64) -> f64 {
        let d = [p[0] - self.center[0], p[1] - self.center[1], p[2] - self.center[2]];
        (0..3)
            .map(|i| {
                let u = self.axes[i][0] * d[0] + self.axes[i][1] * d[1] + self.axes[i][2] * d[2];
                let r = self.radii[i] + grow;
                (u / r) * (u / r)
            })
            .sum()
    }
}

fn rotation(a: f64, b: f64, c: f64) -> [[f64; 3]; 3] {
    let (sa, ca) = a.sin_cos();
    let (sb, cb) = b.sin_cos();
    let (sc, cc) = c.sin_cos();
    [
        [ca * cc - sa * cb * sc, -ca * sc - sa * cb * cc, sa * sb],
        [sa * cc + ca * cb * sc, -sa * sc + ca * cb * cc, -ca * sb],
        [sb * sc, sb * cc, cb],
    ]
}

/// Places `num_classes − 1` disjoint random ellipsoids of decreasing size with
/// distinct intensities, then adds a smooth bias field and Gaussian noise.
pub fn generate_phantom_with<T: Scalar>(seed: u64, opts: &PhantomOptions) -> Result<Phantom<T>> {
    if opts.num_classes < 2 {
        return Err(Error::InvalidArgument("a phantom needs at least two classes".into()));
    }
    if opts.size.iter().any(|&s| s < 16) {
        return Err(Error::InvalidArgument(format!("phantom size {:?} must be at least 16 per axis", opts.size)));
    }
    if !(opts.noise_sigma >= 0.0) {
        return Err(Error::InvalidArgument("noise_sigma must be non-negative".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let size = opts.size;
    let organs = opts.num_classes - 1;
    let min_size = *size.iter().min().expect("three axes") as f64;
    let mut labels = Array3::<u16>::zeros(size);

    for k in 0..organs {
        let t = if organs > 1 { k as f64 / (organs - 1) as f64 } else { 0.0 };
        let (big, small) = opts.radius_fraction_range;
        let mean_radius = min_size * (big + (small - big) * t);
        let mut placed = false;
        for _ in 0..opts.max_attempts {
            let e = Ellipsoid::random(&mut rng, size, mean_radius);
            if try_place(&mut labels, &e, k as u16 + 1) {
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(Error::PlacementFailed {
                organs,
                attempts: opts.max_attempts,
            });
        }
    }

    let (lo, hi) = opts.organ_intensity_range;
    // class k always gets the k-th rung, so appearance identifies the class
    let ladder = (0..organs).map(|k| if organs > 1 { lo + (hi - lo) * k as f64 / (organs - 1) as f64 } else { 0.5 * (lo + hi) });
    let mut intensities = vec![opts.background_intensity];
    intensities.extend(ladder);

    let bias = bias_field(&mut rng, size, opts.bias_amplitude);
    let noise = Normal::new(0.0, opts.noise_sigma.max(f64::MIN_POSITIVE)).expect("finite sigma");
    let data = Array3::from_shape_fn(size, |idx| {
        let base = intensities[labels[idx] as usize] + bias[idx];
        let n = if opts.noise_sigma > 0.0 { noise.sample(&mut rng) } else { 0.0 };
        T::lit((base + n).clamp(0.0, 1.0))
    });
    Ok(Phantom {
        volume: Volume::new(data, [1.0; 3], format!("phantom-{seed}"))?,
        labels: SegmentationMask::new(labels, opts.num_classes)?,
        intensities,
    })
}

/// Writes `class` into the ellipsoid if it keeps at least a one-voxel gap to other organs.
fn try_place(labels: &mut Array3<u16>, e: &Ellipsoid, class: u16) -> bool {
    let shape = labels.shape().to_vec();
    let reach = e.radii.iter().copied().fold(0.0, f64::max) + 2.0;
    let range = |a: usize| {
        let lo = (e.center[a] - reach).floor().max(0.0) as usize;
        let hi = ((e.center[a] + reach).ceil() as usize + 1).min(shape[a]);
        lo..hi
    };
    let (rz, ry, rx) = (range(0), range(1), range(2));
    let mut inside = Vec::new();
    for z in rz.clone() {
        for y in ry.clone() {
            for x in rx.clone() {
                let p = [z as f64, y as f64, x as f64];
                if e.level(p, 1.5) <= 1.0 && labels[[z, y, x]] != 0 {
                    return false;
                }
                if e.level(p, 0.0) <= 1.0 {
                    inside.push([z, y, x]);
                }
            }
        }
    }
    if inside.is_empty() {
        return false;
    }
    for idx in inside {
        labels[idx] = class;
    }
    true
}

/// Sum of a few random low-frequency cosines scaled to peak magnitude `amplitude`.
fn bias_field(rng: &mut ChaCha8Rng, size: Shape3, amplitude: f64) -> Array3<f64> {
    const TERMS: usize = 3;
    let waves: Vec<([f64; 3], f64)> = (0..TERMS)
        .map(|_| {
            let freq = [0; 3].map(|_| rng.random_range(0.3..1.2));
            (freq, rng.random_range(0.0..std::f64::consts::TAU))
        })
        .collect();
    Array3::from_shape_fn(size, |(z, y, x)| {
        let pos = [z as f64 / size[0] as f64, y as f64 / size[1] as f64, x as f64 / size[2] as f64];
        let sum: f64 = waves
            .iter()
            .map(|(f, phase)| (std::f64::consts::TAU * (f[0] * pos[0] + f[1] * pos[1] + f[2] * pos[2]) + phase).cos())
            .sum();
        amplitude * sum / TERMS as f64
    })
}

/// Parameters of [`synthesize_scribbles_with`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScribbleOptions {
    /// Fraction of the axial slices containing foreground that receive scribbles.
    pub slice_fraction: f64,
    pub min_walk: usize,
    pub max_walk: usize,
    /// In-plane erosion applied to organ regions before walking.
    pub organ_erosion: usize,
    pub background_erosion: usize,
}

impl Default for ScribbleOptions {
    fn default() -> Self {
        Self {
            slice_fraction: 0.3,
            min_walk: 15,
            max_walk: 40,
            organ_erosion: 1,
            background_erosion: 2,
        }
    }
}

/// Scribbles with default walk lengths.
pub fn synthesize_scribbles(dense: &SegmentationMask, seed: u64, slice_fraction: f64) -> Result<ScribbleAnnotation> {
    synthesize_scribbles_with(
        dense,
        seed,
        &ScribbleOptions {
            slice_fraction,
            ..ScribbleOptions::default()
        },
    )
}

/// Random-walk scribbles on a random subset of axial slices: one per foreground class
/// present on the slice and one on the background. Every scribbled voxel carries the
/// dense label beneath it.
pub fn synthesize_scribbles_with(dense: &SegmentationMask, seed: u64, opts: &ScribbleOptions) -> Result<ScribbleAnnotation> {
    if !(0.0..=1.0).contains(&opts.slice_fraction) {
        return Err(Error::InvalidArgument(format!(
            "slice_fraction must be in [0, 1], got {}",
            opts.slice_fraction
        )));
    }
    if opts.min_walk == 0 || opts.max_walk < opts.min_walk {
        return Err(Error::InvalidArgument("walk lengths must satisfy 1 <= min_walk <= max_walk".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c = dense.num_classes;
    let depth = dense.labels.shape()[0];
    let mut out = Array3::from_elem(dense.labels.raw_dim(), ScribbleAnnotation::IGNORE);

    let eligible: Vec<usize> = (0..depth)
        .filter(|&z| dense.labels.slice(s![z, .., ..]).iter().any(|&l| l != 0))
        .collect();
    let count = ((opts.slice_fraction * eligible.len() as f64).ceil() as usize).min(eligible.len());
    let mut chosen = eligible.clone();
    chosen.shuffle(&mut rng);
    chosen.truncate(count);
    chosen.sort_unstable();

    let mut labeled = vec![false; c];
    for &z in &chosen {
        let plane = dense.labels.slice(s![z, .., ..]).to_owned();
        for class in 0..c as u16 {
            let region = plane.mapv(|l| l == class);
            if !region.iter().any(|&v| v) {
                continue;
            }
            let erosion = if class == 0 { opts.background_erosion } else { opts.organ_erosion };
            let mut allowed = erode(&region, erosion);
            if !allowed.iter().any(|&v| v) {
                allowed = longest_run(&region);
            }
            let len = rng.random_range(opts.min_walk..=opts.max_walk);
            for (y, x) in random_walk(&allowed, len, &mut rng) {
                out[[z, y, x]] = class;
            }
            labeled[class as usize] = true;
        }
    }

    // classes missed by the chosen slices get a run on their largest cross-section
    for class in 1..c as u16 {
        if labeled[class as usize] {
            continue;
        }
        let best = (0..depth)
            .map(|z| (dense.labels.slice(s![z, .., ..]).iter().filter(|&&l| l == class).count(), z))
            .max();
        if let Some((area, z)) = best {
            if area == 0 {
                continue;
            }
            let region = dense.labels.slice(s![z, .., ..]).mapv(|l| l == class);
            let mut allowed = erode(&region, opts.organ_erosion);
            if !allowed.iter().any(|&v| v) {
                allowed = longest_run(&region);
            }
            let len = rng.random_range(opts.min_walk..=opts.max_walk);
            for (y, x) in random_walk(&allowed, len, &mut rng) {
                out[[z, y, x]] = class;
            }
        }
    }
    ScribbleAnnotation::new(out, c)
}

/// In-plane erosion with a 4-connected structuring element; the image border counts as outside.
fn erode(region: &Array2<bool>, iterations: usize) -> Array2<bool> {
    let mut cur = region.clone();
    let (h, w) = cur.dim();
    for _ in 0..iterations {
        let prev = cur.clone();
        cur = Array2::from_shape_fn((h, w), |(y, x)| {
            prev[[y, x]]
                && y > 0
                && x > 0
                && y + 1 < h
                && x + 1 < w
                && prev[[y - 1, x]]
                && prev[[y + 1, x]]
                && prev[[y, x - 1]]
                && prev[[y, x + 1]]
        });
    }
    cur
}

/// The longest horizontal run of the region, for cross-sections too thin to erode.
fn longest_run(region: &Array2<bool>) -> Array2<bool> {
    let (h, w) = region.dim();
    let mut best = (0usize, 0usize, 0usize, 0usize);
    for y in 0..h {
        let mut x = 0;
        while x < w {
            if !region[[y, x]] {
                x += 1;
                continue;
            }
            let start = x;
            while x < w && region[[y, x]] {
                x += 1;
            }
            if x - start > best.0 {
                best = (x - start, y, start, x);
            }
        }
    }
    let mut out = Array2::from_elem((h, w), false);
    if best.0 > 0 {
        out.slice_mut(s![best.1, best.2..best.3]).fill(true);
    }
    out
}

const STEPS: [(isize, isize); 8] = [(-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1)];

/// A curve-like walk of at most `len` distinct voxels inside `allowed`, biased to keep
/// its heading.
fn random_walk(allowed: &Array2<bool>, len: usize, rng: &mut ChaCha8Rng) -> Vec<(usize, usize)> {
    let cells: Vec<(usize, usize)> = allowed.indexed_iter().filter(|(_, &v)| v).map(|(i, _)| i).collect();
    let Some(&start) = cells.get(rng.random_range(0..cells.len().max(1))) else {
        return Vec::new();
    };
    let (h, w) = allowed.dim();
    let mut visited = vec![start];
    let mut pos = start;
    let mut heading = rng.random_range(0..STEPS.len());
    while visited.len() < len {
        let mut options: Vec<(usize, (usize, usize))> = Vec::new();
        for (i, &(dy, dx)) in STEPS.iter().enumerate() {
            let (ny, nx) = (pos.0 as isize + dy, pos.1 as isize + dx);
            if ny < 0 || nx < 0 || ny >= h as isize || nx >= w as isize {
                continue;
            }
            let next = (ny as usize, nx as usize);
            if allowed[next] && !visited.contains(&next) {
                options.push((i, next));
            }
        }
        if options.is_empty() {
            break;
        }
        let pick = options
            .iter()
            .position(|&(i, _)| i == heading)
            .filter(|_| rng.random_bool(0.7))
            .unwrap_or_else(|| rng.random_range(0..options.len()));
        heading = options[pick].0;
        pos = options[pick].1;
        visited.push(pos);
    }
    visited
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(seed: u64, sigma: f64) -> Phantom<f64> {
        generate_phantom_with(
            seed,
            &PhantomOptions {
                size: [32, 32, 32],
                noise_sigma: sigma,
                ..PhantomOptions::default()
            },
        )
        .unwrap()
    }

    #[test]
    fn deterministic_from_seed() {
        let a = small(3, 0.1);
        let b = small(3, 0.1);
        assert_eq!(a.volume.data, b.volume.data);
        assert_eq!(a.labels.labels, b.labels.labels);
        let sa = synthesize_scribbles(&a.labels, 9, 0.3).unwrap();
        let sb = synthesize_scribbles(&b.labels, 9, 0.3).unwrap();
        assert_eq!(sa.labels, sb.labels);
        assert_ne!(small(4, 0.1).labels.labels, a.labels.labels);
    }

    #[test]
    fn noise_free_regions_are_constant_plus_bias() {
        let p = small(11, 0.0);
        for ((idx, &v), &l) in p.volume.data.indexed_iter().zip(&p.labels.labels) {
            let residual = v - p.intensities[l as usize];
            assert!(residual.abs() <= 0.08 + 1e-12, "{idx:?}");
        }
        assert!(p.volume.is_normalized());
    }

    #[test]
    fn intensities_are_distinct() {
        let p = small(2, 0.1);
        for i in 0..p.intensities.len() {
            for j in 0..i {
                assert!((p.intensities[i] - p.intensities[j]).abs() > 0.1);
            }
        }
    }

    #[test]
    fn crowded_layouts_are_rejected() {
        let err = generate_phantom_with::<f64>(
            0,
            &PhantomOptions {
                size: [16, 16, 16],
                num_classes: 12,
                radius_fraction_range: (0.4, 0.4),
                max_attempts: 20,
                ..PhantomOptions::default()
            },
        )
        .unwrap_err();
        assert!(matches!(err, Error::PlacementFailed { .. }));
        assert!(generate_phantom::<f64>(0, [8, 16, 16], 4, 0.1).is_err());
        assert!(generate_phantom::<f64>(0, [16, 16, 16], 1, 0.1).is_err());
    }

    #[test]
    fn full_coverage_labels_every_present_class_on_every_slice() {
        let p = small(5, 0.1);
        let opts = ScribbleOptions {
            slice_fraction: 1.0,
            min_walk: 10_000,
            max_walk: 10_000,
            ..ScribbleOptions::default()
        };
        let s = synthesize_scribbles_with(&p.labels, 1, &opts).unwrap();
        for z in 0..32 {
            let dense = p.labels.labels.slice(s![z, .., ..]);
            if dense.iter().all(|&l| l == 0) {
                continue;
            }
            let scr = s.labels.slice(s![z, .., ..]);
            for class in 0..4u16 {
                if dense.iter().any(|&l| l == class) {
                    assert!(scr.iter().any(|&l| l == class), "slice {z} class {class}");
                }
            }
        }
    }

    #[test]
    fn walk_stays_in_region_and_is_connected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let region = Array2::from_shape_fn((10, 10), |(y, x)| (3..7).contains(&y) && x > 1);
        let walk = random_walk(&region, 30, &mut rng);
        assert!(!walk.is_empty() && walk.len() <= 30);
        for w in walk.windows(2) {
            let dy = w[0].0.abs_diff(w[1].0);
            let dx = w[0].1.abs_diff(w[1].1);
            assert!(dy <= 1 && dx <= 1);
        }
        assert!(walk.iter().all(|&p| region[p]));
    }

    #[test]
    fn thin_region_falls_back_to_run() {
        let region = Array2::from_shape_fn((5, 9), |(y, x)| y == 2 && x > 0 && x < 8);
        assert!(!erode(&region, 1).iter().any(|&v| v));
        let run = longest_run(&region);
        assert_eq!(run, region);
    }
}
