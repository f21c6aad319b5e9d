//! All-pairs surface distances on small masks.

pub type Mask = Vec<Vec<Vec<bool>>>;

pub fn dice(a: &Mask, b: &Mask) -> f64 {
    let (mut inter, mut na, mut nb) = (0.0, 0.0, 0.0);
    for z in 0..a.len() {
        for y in 0..a[0].len() {
            for x in 0..a[0][0].len() {
                if a[z][y][x] {
                    na += 1.0;
                }
                if b[z][y][x] {
                    nb += 1.0;
                }
                if a[z][y][x] && b[z][y][x] {
                    inter += 1.0;
                }
            }
        }
    }
    if na + nb == 0.0 {
        1.0
    } else {
        2.0 * inter / (na + nb)
    }
}

pub fn surface(m: &Mask) -> Vec<[usize; 3]> {
    let (d, h, w) = (m.len() as isize, m[0].len() as isize, m[0][0].len() as isize);
    let get = |z: isize, y: isize, x: isize| z >= 0 && y >= 0 && x >= 0 && z < d && y < h && x < w && m[z as usize][y as usize][x as usize];
    let mut out = Vec::new();
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                if !get(z, y, x) {
                    continue;
                }
                let neighbors = [(1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1)];
                if neighbors.iter().any(|&(dz, dy, dx)| !get(z + dz, y + dy, x + dx)) {
                    out.push([z as usize, y as usize, x as usize]);
                }
            }
        }
    }
    out
}

fn dist(a: [usize; 3], b: [usize; 3], s: [f64; 3]) -> f64 {
    let mut sum = 0.0;
    for k in 0..3 {
        let d = (a[k] as f64 - b[k] as f64) * s[k];
        sum += d * d;
    }
    sum.sqrt()
}

fn directed(from: &[[usize; 3]], to: &[[usize; 3]], s: [f64; 3]) -> Vec<f64> {
    from.iter()
        .map(|&p| to.iter().map(|&q| dist(p, q, s)).fold(f64::INFINITY, f64::min))
        .collect()
}

fn pct95(v: &[f64]) -> f64 {
    let mut v = v.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let pos = 0.95 * (v.len() as f64 - 1.0);
    let i = pos as usize;
    if i + 1 >= v.len() {
        v[i]
    } else {
        v[i] * (1.0 - (pos - i as f64)) + v[i + 1] * (pos - i as f64)
    }
}

/// `(asd, hd95, hd100)`, or `None` when either mask is empty.
pub fn surface_distances(a: &Mask, b: &Mask, s: [f64; 3]) -> Option<(f64, f64, f64)> {
    let (sa, sb) = (surface(a), surface(b));
    if sa.is_empty() || sb.is_empty() {
        return None;
    }
    let ab = directed(&sa, &sb, s);
    let ba = directed(&sb, &sa, s);
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let max = |v: &[f64]| v.iter().cloned().fold(0.0, f64::max);
    Some(((mean(&ab) + mean(&ba)) / 2.0, pct95(&ab).max(pct95(&ba)), max(&ab).max(max(&ba))))
}

/// A random mask pair for the metric equivalence checks: blobs of random boxes with
/// sprinkled voxels, occasionally empty, plus a random anisotropic spacing.
pub fn random_pair(seed: u64) -> ((usize, usize, usize), Mask, Mask, [f64; 3]) {
    use rand::{RngExt, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let dims = (rng.random_range(2..=8), rng.random_range(2..=8), rng.random_range(2..=8));
    let make = |rng: &mut rand_chacha::ChaCha8Rng| -> Mask {
        let mut m = vec![vec![vec![false; dims.2]; dims.1]; dims.0];
        if rng.random_bool(0.05) {
            return m;
        }
        for _ in 0..rng.random_range(1..=3) {
            let lo = [rng.random_range(0..dims.0), rng.random_range(0..dims.1), rng.random_range(0..dims.2)];
            let hi = [rng.random_range(lo[0]..dims.0), rng.random_range(lo[1]..dims.1), rng.random_range(lo[2]..dims.2)];
            for z in lo[0]..=hi[0] {
                for y in lo[1]..=hi[1] {
                    for x in lo[2]..=hi[2] {
                        m[z][y][x] = true;
                    }
                }
            }
        }
        for _ in 0..rng.random_range(0..6) {
            m[rng.random_range(0..dims.0)][rng.random_range(0..dims.1)][rng.random_range(0..dims.2)] ^= true;
        }
        m
    };
    let a = make(&mut rng);
    let b = make(&mut rng);
    let spacing = if rng.random_bool(0.3) {
        [1.0; 3]
    } else {
        [rng.random_range(0.3..3.0), rng.random_range(0.3..3.0), rng.random_range(0.3..3.0)]
    };
    (dims, a, b, spacing)
}
