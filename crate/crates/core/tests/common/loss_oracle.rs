//! Scalar loss formulas evaluated voxel by voxel.

/// Probabilities of one branch, indexed `[class][z][y][x]`.
pub type Branch = Vec<Vec<Vec<Vec<f64>>>>;

const EPS: f64 = 1e-8;

fn ln(v: f64) -> f64 {
    v.max(EPS).ln()
}

pub fn dims(b: &Branch) -> (usize, usize, usize, usize) {
    (b.len(), b[0].len(), b[0][0].len(), b[0][0][0].len())
}

pub fn kl(p: &[f64], q: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..p.len() {
        if p[i] > 0.0 {
            s += p[i] * (ln(p[i]) - ln(q[i]));
        }
    }
    s
}

pub fn voxel(b: &Branch, z: usize, y: usize, x: usize) -> Vec<f64> {
    b.iter().map(|c| c[z][y][x]).collect()
}

/// `labels[z][y][x]` with `None` for unlabeled voxels.
pub fn pce(branches: &[Branch], labels: &[Vec<Vec<Option<usize>>>]) -> f64 {
    let mut sum = 0.0;
    let mut count = 0usize;
    for b in branches {
        for (z, plane) in labels.iter().enumerate() {
            for (y, row) in plane.iter().enumerate() {
                for (x, l) in row.iter().enumerate() {
                    if let Some(c) = l {
                        sum -= ln(b[*c][z][y][x]);
                        count += 1;
                    }
                }
            }
        }
    }
    if count == 0 {
        0.0
    } else {
        sum / count as f64
    }
}

pub fn mean_branch(branches: &[Branch]) -> Branch {
    let (c, d, h, w) = dims(&branches[0]);
    let mut out = vec![vec![vec![vec![0.0; w]; h]; d]; c];
    for b in branches {
        for k in 0..c {
            for z in 0..d {
                for y in 0..h {
                    for x in 0..w {
                        out[k][z][y][x] += b[k][z][y][x] / branches.len() as f64;
                    }
                }
            }
        }
    }
    out
}

pub fn weight(p: &[f64]) -> f64 {
    let mut s = 0.0;
    for &v in p {
        if v > 0.0 {
            s += v * v.ln();
        }
    }
    s.exp()
}

/// Weighted KL of every branch against fixed targets.
pub fn uspc_against(branches: &[Branch], pbar: &Branch, weights: &[Vec<Vec<f64>>]) -> f64 {
    let (_, d, h, w) = dims(pbar);
    let mut total = 0.0;
    let mut wsum = 0.0;
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                wsum += weights[z][y][x];
            }
        }
    }
    for b in branches {
        let mut s = 0.0;
        for z in 0..d {
            for y in 0..h {
                for x in 0..w {
                    s += weights[z][y][x] * kl(&voxel(b, z, y, x), &voxel(pbar, z, y, x));
                }
            }
        }
        total += s / wsum;
    }
    total / branches.len() as f64
}

pub fn weight_field(pbar: &Branch) -> Vec<Vec<Vec<f64>>> {
    let (_, d, h, w) = dims(pbar);
    (0..d)
        .map(|z| (0..h).map(|y| (0..w).map(|x| weight(&voxel(pbar, z, y, x))).collect()).collect())
        .collect()
}

pub fn uspc(branches: &[Branch]) -> f64 {
    let pbar = mean_branch(branches);
    uspc_against(branches, &pbar, &weight_field(&pbar))
}

/// Columns of the projection for view 0 (collapse z), 1 (collapse x) or 2 (collapse y).
pub fn project(b: &Branch, view: usize) -> Vec<Vec<f64>> {
    let (c, d, h, w) = dims(b);
    let mut cols = Vec::new();
    match view {
        0 => {
            for y in 0..h {
                for x in 0..w {
                    cols.push((0..c).map(|k| (0..d).map(|z| b[k][z][y][x]).sum::<f64>() / d as f64).collect());
                }
            }
        }
        1 => {
            for z in 0..d {
                for y in 0..h {
                    cols.push((0..c).map(|k| (0..w).map(|x| b[k][z][y][x]).sum::<f64>() / w as f64).collect());
                }
            }
        }
        _ => {
            for z in 0..d {
                for x in 0..w {
                    cols.push((0..c).map(|k| (0..h).map(|y| b[k][z][y][x]).sum::<f64>() / h as f64).collect());
                }
            }
        }
    }
    cols
}

/// L1-normalized `m mᵀ`, flattened row-major.
pub fn affinity(cols: &[Vec<f64>]) -> Vec<f64> {
    let c = cols[0].len();
    let mut q = vec![0.0; c * c];
    for a in 0..c {
        for b in 0..c {
            q[a * c + b] = cols.iter().map(|col| col[a] * col[b]).sum();
        }
    }
    let total: f64 = q.iter().sum();
    q.iter().map(|v| v / total).collect()
}

pub fn mpcc_targets(branches: &[Branch]) -> Vec<Vec<f64>> {
    (0..3)
        .map(|v| {
            let qs: Vec<Vec<f64>> = branches.iter().map(|b| affinity(&project(b, v))).collect();
            (0..qs[0].len()).map(|i| qs.iter().map(|q| q[i]).sum::<f64>() / qs.len() as f64).collect()
        })
        .collect()
}

pub fn mpcc_against(branches: &[Branch], targets: &[Vec<f64>]) -> f64 {
    let mut s = 0.0;
    for (v, target) in targets.iter().enumerate() {
        for b in branches {
            s += kl(&affinity(&project(b, v)), target);
        }
    }
    s / (3 * branches.len()) as f64
}

pub fn mpcc(branches: &[Branch]) -> f64 {
    mpcc_against(branches, &mpcc_targets(branches))
}

pub fn rampup(base: f64, t: f64, t_max: f64) -> f64 {
    base * (-5.0 * (1.0 - t / t_max).powi(2)).exp()
}

/// Softmax over the class index of raw logits laid out like a [`Branch`].
pub fn softmax(logits: &Branch) -> Branch {
    let (c, d, h, w) = dims(logits);
    let mut out = logits.clone();
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let m = (0..c).map(|k| logits[k][z][y][x]).fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = (0..c).map(|k| (logits[k][z][y][x] - m).exp()).collect();
                let s: f64 = e.iter().sum();
                for k in 0..c {
                    out[k][z][y][x] = e[k] / s;
                }
            }
        }
    }
    out
}
