//! Central-difference checks of the analytic logit gradients against the scalar oracles.

use ndarray::{Array3, Array4};
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tdnet::data::{AffinityNorm, ProbabilityMap, ScribbleAnnotation};
use tdnet::losses;

use super::loss_oracle::{self as oracle, Branch};

pub const STEP: f64 = 1e-5;

pub struct Instance {
    pub logits: Vec<Branch>,
    pub labels: Vec<Vec<Vec<Option<usize>>>>,
}

impl Instance {
    /// Random logits in [-2, 2] and roughly a third of the voxels scribbled.
    pub fn random(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = rng.random_range(2..=3);
        let branches = rng.random_range(2..=3);
        let (d, h, w) = (rng.random_range(1..=4), rng.random_range(1..=4), rng.random_range(2..=4));
        let logits = (0..branches)
            .map(|_| {
                (0..c)
                    .map(|_| (0..d).map(|_| (0..h).map(|_| (0..w).map(|_| rng.random_range(-2.0..2.0)).collect()).collect()).collect())
                    .collect()
            })
            .collect();
        let mut labels: Vec<Vec<Vec<Option<usize>>>> = (0..d)
            .map(|_| (0..h).map(|_| (0..w).map(|_| rng.random_bool(0.35).then(|| rng.random_range(0..c))).collect()).collect())
            .collect();
        labels[0][0][0] = Some(0);
        Self { logits, labels }
    }

    pub fn probs(&self) -> Vec<Branch> {
        self.logits.iter().map(oracle::softmax).collect()
    }

    pub fn maps(&self) -> Vec<ProbabilityMap<f64>> {
        self.probs().iter().map(|b| ProbabilityMap::new(to_array(b)).unwrap()).collect()
    }

    pub fn scribble(&self, c: usize) -> ScribbleAnnotation {
        let (d, h, w) = (self.labels.len(), self.labels[0].len(), self.labels[0][0].len());
        let arr = Array3::from_shape_fn((d, h, w), |(z, y, x)| {
            self.labels[z][y][x].map_or(ScribbleAnnotation::IGNORE, |v| v as u16)
        });
        ScribbleAnnotation::new(arr, c).unwrap()
    }
}

pub fn to_array(b: &Branch) -> Array4<f64> {
    let (c, d, h, w) = oracle::dims(b);
    Array4::from_shape_fn((c, d, h, w), |(k, z, y, x)| b[k][z][y][x])
}

fn max_rel_error(analytic: &[Array4<f64>], fd: &[Array4<f64>]) -> f64 {
    let mut worst = 0.0f64;
    for (a, f) in analytic.iter().zip(fd) {
        for (&x, &y) in a.iter().zip(f) {
            let denom = x.abs().max(y.abs()).max(1e-6);
            worst = worst.max((x - y).abs() / denom);
        }
    }
    worst
}

/// Central differences of `f(probs)` with respect to every logit of every branch.
fn finite_differences(inst: &Instance, f: &dyn Fn(&[Branch]) -> f64) -> Vec<Array4<f64>> {
    let mut out = Vec::new();
    for n in 0..inst.logits.len() {
        let (c, d, h, w) = oracle::dims(&inst.logits[n]);
        let g = Array4::from_shape_fn((c, d, h, w), |(k, z, y, x)| {
            let eval = |delta: f64| {
                let mut logits = inst.logits.clone();
                logits[n][k][z][y][x] += delta;
                let probs: Vec<Branch> = logits.iter().map(oracle::softmax).collect();
                f(&probs)
            };
            (eval(STEP) - eval(-STEP)) / (2.0 * STEP)
        });
        out.push(g);
    }
    out
}

fn to_logit_grads(maps: &[ProbabilityMap<f64>], grads: &[Array4<f64>]) -> Vec<Array4<f64>> {
    maps.iter().zip(grads).map(|(p, g)| losses::softmax_backward(p, g)).collect()
}

pub fn check_pce(inst: &Instance) -> f64 {
    let maps = inst.maps();
    let s = inst.scribble(maps[0].num_classes());
    let (_, g) = losses::partial_cross_entropy_with_grad(&maps, &s).unwrap();
    let fd = finite_differences(inst, &|p| oracle::pce(p, &inst.labels));
    max_rel_error(&to_logit_grads(&maps, &g), &fd)
}

/// Targets are frozen at the unperturbed pseudo label and weights.
pub fn check_uspc(inst: &Instance) -> f64 {
    let maps = inst.maps();
    let pbar = losses::mix_soft_pseudo_label(&maps).unwrap();
    let w = losses::uncertainty_weights(&pbar);
    let (_, g) = losses::uspc_loss_with_grad(&maps, &pbar, &w).unwrap();
    let probs = inst.probs();
    let pbar_o = oracle::mean_branch(&probs);
    let w_o = oracle::weight_field(&pbar_o);
    let fd = finite_differences(inst, &|p| oracle::uspc_against(p, &pbar_o, &w_o));
    max_rel_error(&to_logit_grads(&maps, &g), &fd)
}

/// Targets are frozen at the unperturbed mean affinity matrices.
pub fn check_mpcc(inst: &Instance) -> f64 {
    let maps = inst.maps();
    let (_, g) = losses::mpcc_loss_with_grad(&maps, AffinityNorm::L1).unwrap();
    let targets = oracle::mpcc_targets(&inst.probs());
    let fd = finite_differences(inst, &|p| oracle::mpcc_against(p, &targets));
    max_rel_error(&to_logit_grads(&maps, &g), &fd)
}
