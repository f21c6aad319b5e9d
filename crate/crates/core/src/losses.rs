//! Training objectives: partial cross-entropy on scribbled voxels, uncertainty-weighted
//! soft-pseudo-label consistency, and multi-view class-affinity consistency.
//!
//! Every loss comes in a value-only form and a `*_with_grad` form returning the
//! gradient with respect to each branch's probabilities. Pseudo labels, uncertainty
//! weights and mean affinity matrices are treated as constants (no gradient flows
//! through them). [`softmax_backward`] maps probability gradients to logit gradients.

use ndarray::{Array2, Array3, Array4, Axis};
use serde::{Deserialize, Serialize};

use crate::data::{AffinityNorm, ClassAffinityMatrix, ProbabilityMap, ScribbleAnnotation, UncertaintyWeightMap, View};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Lower clamp applied to every argument of a logarithm.
pub const LOG_EPS: f64 = 1e-8;

/// Base weights of the consistency terms and the current position in the schedule.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub t: usize,
    pub t_max: usize,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 10.0,
            beta: 1.0,
            t: 0,
            t_max: 60_000,
        }
    }
}

impl LossWeights {
    pub fn alpha_t(&self) -> f64 {
        rampup_weight(self.alpha, self.t, self.t_max)
    }

    pub fn beta_t(&self) -> f64 {
        rampup_weight(self.beta, self.t, self.t_max)
    }
}

/// Switches for the ablation variants of the objective.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossOptions {
    /// Entropy-based voxel weights in the pseudo-label term; uniform weights when off.
    pub uncertainty_weighting: bool,
    /// Include the class-affinity term.
    pub mpcc: bool,
    pub affinity_norm: AffinityNorm,
}

impl Default for LossOptions {
    fn default() -> Self {
        Self {
            uncertainty_weighting: true,
            mpcc: true,
            affinity_norm: AffinityNorm::L1,
        }
    }
}

#[inline]
fn ln_clamped<T: Scalar>(v: T) -> T {
    v.max(T::lit(LOG_EPS)).ln()
}

fn check_branches<T: Scalar>(probs: &[ProbabilityMap<T>]) -> Result<()> {
    let first = probs
        .first()
        .ok_or_else(|| Error::InvalidArgument("at least one branch is required".into()))?;
    for p in &probs[1..] {
        check_same_shape(first.probs.shape(), p.probs.shape())?;
    }
    Ok(())
}

fn check_same_shape(expected: &[usize], actual: &[usize]) -> Result<()> {
    const NAMES: [&str; 4] = ["class", "depth", "height", "width"];
    for (a, (&e, &g)) in expected.iter().zip(actual).enumerate() {
        if e != g {
            return Err(Error::ShapeMismatch {
                axis: NAMES[a],
                expected: e,
                actual: g,
            });
        }
    }
    Ok(())
}

/// Mean negative log-likelihood of the scribbled class over labeled voxels and branches.
///
/// Returns zero when nothing is labeled.
pub fn partial_cross_entropy<T: Scalar>(probs: &[ProbabilityMap<T>], s: &ScribbleAnnotation) -> Result<T> {
    partial_cross_entropy_impl(probs, s, false).map(|(v, _)| v)
}

pub fn partial_cross_entropy_with_grad<T: Scalar>(
    probs: &[ProbabilityMap<T>],
    s: &ScribbleAnnotation,
) -> Result<(T, Vec<Array4<T>>)> {
    partial_cross_entropy_impl(probs, s, true)
}

fn partial_cross_entropy_impl<T: Scalar>(
    probs: &[ProbabilityMap<T>],
    s: &ScribbleAnnotation,
    want_grad: bool,
) -> Result<(T, Vec<Array4<T>>)> {
    check_branches(probs)?;
    let shape = probs[0].probs.shape().to_vec();
    check_same_shape(&shape[1..], s.labels.shape())?;
    let c = shape[0];
    if s.num_classes != c {
        return Err(Error::ShapeMismatch {
            axis: "class",
            expected: c,
            actual: s.num_classes,
        });
    }
    let labels = s.labels.as_slice().expect("standard layout");
    let n = labels.len();
    let mut grads: Vec<Array4<T>> = if want_grad {
        probs.iter().map(|_| Array4::zeros(probs[0].probs.raw_dim())).collect()
    } else {
        Vec::new()
    };
    let labeled = labels.iter().filter(|&&l| l != ScribbleAnnotation::IGNORE).count();
    if labeled == 0 {
        return Ok((T::zero(), grads));
    }
    let norm = T::from_usize_lossy(probs.len() * labeled);
    let eps = T::lit(LOG_EPS);
    let mut total = T::zero();
    for (b, p) in probs.iter().enumerate() {
        let data = p.as_slice();
        for (i, &l) in labels.iter().enumerate() {
            if l == ScribbleAnnotation::IGNORE {
                continue;
            }
            if l as usize >= c {
                return Err(Error::LabelOutOfRange {
                    value: l,
                    index: i,
                    num_classes: c,
                });
            }
            let idx = l as usize * n + i;
            let pv = data[idx];
            total -= ln_clamped(pv);
            if want_grad && pv > eps {
                grads[b].as_slice_mut().expect("standard layout")[idx] = -T::one() / (norm * pv);
            }
        }
    }
    Ok((total / norm, grads))
}

/// Voxel-wise mean of the branch probability maps.
pub fn mix_soft_pseudo_label<T: Scalar>(probs: &[ProbabilityMap<T>]) -> Result<ProbabilityMap<T>> {
    check_branches(probs)?;
    let mut acc = probs[0].probs.clone();
    for p in &probs[1..] {
        acc += &p.probs;
    }
    let k = T::from_usize_lossy(probs.len());
    acc.mapv_inplace(|v| v / k);
    Ok(ProbabilityMap::new_unchecked(acc))
}

/// `w_i = exp(Σ_c p log p)`: one for a one-hot voxel, `1/C` for a uniform one.
pub fn uncertainty_weights<T: Scalar>(pbar: &ProbabilityMap<T>) -> UncertaintyWeightMap<T> {
    let c = pbar.num_classes();
    let shape = pbar.spatial_shape();
    let n: usize = shape.iter().product();
    let data = pbar.as_slice();
    let weights: Vec<T> = (0..n)
        .map(|i| {
            let neg_entropy: T = (0..c)
                .map(|k| {
                    let p = data[k * n + i];
                    if p > T::zero() {
                        p * p.ln()
                    } else {
                        T::zero()
                    }
                })
                .sum();
            neg_entropy.exp()
        })
        .collect();
    UncertaintyWeightMap {
        weights: Array3::from_shape_vec(shape, weights).expect("shape matches"),
    }
}

/// Unit weights, i.e. the pseudo-label term without uncertainty rectification.
pub fn uniform_weights<T: Scalar>(pbar: &ProbabilityMap<T>) -> UncertaintyWeightMap<T> {
    UncertaintyWeightMap {
        weights: Array3::from_elem(pbar.spatial_shape(), T::one()),
    }
}

/// `Σ_c p^c (log p^c − log q^c)` with both arguments clamped at [`LOG_EPS`] and `0·log 0 = 0`.
pub fn kl_divergence<T: Scalar>(p: &[T], q: &[T]) -> T {
    p.iter()
        .zip(q)
        .map(|(&a, &b)| if a > T::zero() { a * (ln_clamped(a) - ln_clamped(b)) } else { T::zero() })
        .sum()
}

/// Uncertainty-weighted KL between every branch and the pseudo label, averaged over branches.
pub fn uspc_loss<T: Scalar>(probs: &[ProbabilityMap<T>], pbar: &ProbabilityMap<T>, w: &UncertaintyWeightMap<T>) -> Result<T> {
    uspc_impl(probs, pbar, w, false).map(|(v, _)| v)
}

pub fn uspc_loss_with_grad<T: Scalar>(
    probs: &[ProbabilityMap<T>],
    pbar: &ProbabilityMap<T>,
    w: &UncertaintyWeightMap<T>,
) -> Result<(T, Vec<Array4<T>>)> {
    uspc_impl(probs, pbar, w, true)
}

fn uspc_impl<T: Scalar>(
    probs: &[ProbabilityMap<T>],
    pbar: &ProbabilityMap<T>,
    w: &UncertaintyWeightMap<T>,
    want_grad: bool,
) -> Result<(T, Vec<Array4<T>>)> {
    check_branches(probs)?;
    check_same_shape(probs[0].probs.shape(), pbar.probs.shape())?;
    check_same_shape(&pbar.probs.shape()[1..], w.weights.shape())?;
    let c = pbar.num_classes();
    let weights = w.as_slice();
    let n = weights.len();
    let w_sum: T = weights.iter().copied().sum();
    if !(w_sum > T::zero()) {
        return Err(Error::InvalidArgument("uncertainty weights sum to zero".into()));
    }
    let q = pbar.as_slice();
    let branches = T::from_usize_lossy(probs.len());
    let scale = T::one() / (branches * w_sum);
    let eps = T::lit(LOG_EPS);
    let mut total = T::zero();
    let mut grads = Vec::with_capacity(if want_grad { probs.len() } else { 0 });
    for p in probs {
        let data = p.as_slice();
        let mut g = if want_grad { vec![T::zero(); data.len()] } else { Vec::new() };
        for i in 0..n {
            let mut kl = T::zero();
            for k in 0..c {
                let idx = k * n + i;
                let pv = data[idx];
                let diff = ln_clamped(pv) - ln_clamped(q[idx]);
                if pv > T::zero() {
                    kl += pv * diff;
                }
                if want_grad {
                    let d_self = if pv > eps { T::one() } else { T::zero() };
                    g[idx] = weights[i] * scale * (diff + d_self);
                }
            }
            total += weights[i] * kl;
        }
        if want_grad {
            grads.push(Array4::from_shape_vec(p.probs.raw_dim(), g).expect("shape matches"));
        }
    }
    Ok((total * scale, grads))
}

/// Averages the map along the view's collapsed axis and flattens the remaining two
/// spatial axes, giving a `C × K` matrix whose columns are class distributions.
pub fn project_probabilities<T: Scalar>(p: &ProbabilityMap<T>, view: View) -> Array2<T> {
    let c = p.num_classes();
    let projected = p
        .probs
        .mean_axis(Axis(1 + view.collapsed_axis()))
        .expect("non-empty axis");
    let k = projected.len() / c;
    projected
        .as_standard_layout()
        .into_owned()
        .into_shape_with_order((c, k))
        .expect("contiguous projection")
}

/// Parses a view name.
pub fn parse_view(name: &str) -> Result<View> {
    name.parse()
}

/// `Q' = m mᵀ` normalized by the chosen matrix norm.
pub fn class_affinity<T: Scalar>(m: &Array2<T>, view: View, normalization: AffinityNorm) -> Result<ClassAffinityMatrix<T>> {
    let c = m.shape()[0];
    let raw = m.dot(&m.t());
    let norm = affinity_norm_value(raw.iter().copied(), normalization);
    if !(norm > T::zero()) {
        return Err(Error::DegenerateAffinity);
    }
    Ok(ClassAffinityMatrix {
        entries: raw.iter().map(|&v| v / norm).collect(),
        num_classes: c,
        view,
        normalization,
    })
}

fn affinity_norm_value<T: Scalar>(entries: impl Iterator<Item = T>, normalization: AffinityNorm) -> T {
    match normalization {
        AffinityNorm::L1 => entries.map(|v| v.abs()).sum(),
        AffinityNorm::Frobenius => entries.map(|v| v * v).sum::<T>().sqrt(),
    }
}

/// Mean normalized affinity matrix over branches for each view (axial, sagittal, coronal).
pub fn mpcc_targets<T: Scalar>(probs: &[ProbabilityMap<T>], normalization: AffinityNorm) -> Result<Vec<ClassAffinityMatrix<T>>> {
    check_branches(probs)?;
    let k = T::from_usize_lossy(probs.len());
    View::ALL
        .iter()
        .map(|&view| {
            let mut mean: Option<ClassAffinityMatrix<T>> = None;
            for p in probs {
                let q = class_affinity(&project_probabilities(p, view), view, normalization)?;
                match mean.as_mut() {
                    None => mean = Some(q),
                    Some(acc) => acc.entries.iter_mut().zip(&q.entries).for_each(|(a, &b)| *a += b),
                }
            }
            let mut mean = mean.expect("at least one branch");
            mean.entries.iter_mut().for_each(|v| *v /= k);
            Ok(mean)
        })
        .collect()
}

/// KL between each branch's affinity matrix and the branch mean, averaged over the
/// three views and all branches.
pub fn mpcc_loss<T: Scalar>(probs: &[ProbabilityMap<T>], normalization: AffinityNorm) -> Result<T> {
    let targets = mpcc_targets(probs, normalization)?;
    mpcc_impl(probs, &targets, normalization, false).map(|(v, _)| v)
}

pub fn mpcc_loss_with_grad<T: Scalar>(
    probs: &[ProbabilityMap<T>],
    normalization: AffinityNorm,
) -> Result<(T, Vec<Array4<T>>)> {
    let targets = mpcc_targets(probs, normalization)?;
    mpcc_impl(probs, &targets, normalization, true)
}

/// Same as [`mpcc_loss_with_grad`] against caller-supplied mean matrices.
pub fn mpcc_loss_against<T: Scalar>(
    probs: &[ProbabilityMap<T>],
    targets: &[ClassAffinityMatrix<T>],
    normalization: AffinityNorm,
) -> Result<(T, Vec<Array4<T>>)> {
    check_branches(probs)?;
    mpcc_impl(probs, targets, normalization, true)
}

fn mpcc_impl<T: Scalar>(
    probs: &[ProbabilityMap<T>],
    targets: &[ClassAffinityMatrix<T>],
    normalization: AffinityNorm,
    want_grad: bool,
) -> Result<(T, Vec<Array4<T>>)> {
    let c = probs[0].num_classes();
    let scale = T::one() / T::from_usize_lossy(View::ALL.len() * probs.len());
    let eps = T::lit(LOG_EPS);
    let mut total = T::zero();
    let mut grads = Vec::new();
    for p in probs {
        let mut grad = if want_grad { Some(Array4::zeros(p.probs.raw_dim())) } else { None };
        for target in targets {
            let view = target.view;
            let m = project_probabilities(p, view);
            let q = class_affinity(&m, view, normalization)?;
            total += kl_divergence(&q.entries, &target.entries);
            let Some(grad) = grad.as_mut() else { continue };

            // dL/dQ, then through the normalization onto the raw product Q' = m mᵀ
            let g: Vec<T> = q
                .entries
                .iter()
                .zip(&target.entries)
                .map(|(&qv, &tv)| {
                    let d_self = if qv > eps { T::one() } else { T::zero() };
                    ln_clamped(qv) - ln_clamped(tv) + d_self
                })
                .collect();
            let raw_norm = affinity_norm_value(m.dot(&m.t()).iter().copied(), normalization);
            let gq: T = g.iter().zip(&q.entries).map(|(&a, &b)| a * b).sum();
            let g_raw = Array2::from_shape_fn((c, c), |(a, b)| {
                let idx = a * c + b;
                match normalization {
                    AffinityNorm::L1 => (g[idx] - gq) / raw_norm,
                    AffinityNorm::Frobenius => (g[idx] - gq * q.entries[idx]) / raw_norm,
                }
            });
            let g_m = (&g_raw + &g_raw.t()).dot(&m);

            // undo the projection: the mean spreads the gradient evenly along the collapsed axis
            let axis = view.collapsed_axis();
            let len = T::from_usize_lossy(p.probs.shape()[1 + axis]);
            let g_m = g_m.mapv(|v| v * scale / len);
            let spatial = p.spatial_shape();
            let mut reduced = spatial;
            reduced[axis] = 1;
            let g_m = g_m
                .into_shape_with_order((c, reduced[0], reduced[1], reduced[2]))
                .expect("projection shape");
            *grad += &g_m.broadcast(grad.raw_dim()).expect("broadcast along collapsed axis");
        }
        if let Some(g) = grad {
            grads.push(g);
        }
    }
    Ok((total * scale, grads))
}

/// `base · exp(−5 (1 − t/t_max)²)`; `t` beyond `t_max` is clamped.
pub fn rampup_weight(base: f64, t: usize, t_max: usize) -> f64 {
    if t_max == 0 {
        return base;
    }
    let phase = 1.0 - t.min(t_max) as f64 / t_max as f64;
    base * (-5.0 * phase * phase).exp()
}

/// Converts gradients w.r.t. softmax probabilities into gradients w.r.t. logits.
pub fn softmax_backward<T: Scalar>(p: &ProbabilityMap<T>, dp: &Array4<T>) -> Array4<T> {
    let c = p.num_classes();
    let probs = p.as_slice();
    let n = probs.len() / c;
    let dp = dp.as_standard_layout();
    let dps = dp.as_slice().expect("standard layout");
    let mut out = vec![T::zero(); probs.len()];
    for i in 0..n {
        let dot: T = (0..c).map(|k| probs[k * n + i] * dps[k * n + i]).sum();
        for k in 0..c {
            out[k * n + i] = probs[k * n + i] * (dps[k * n + i] - dot);
        }
    }
    Array4::from_shape_vec(p.probs.raw_dim(), out).expect("shape matches")
}

/// Values of every term of the objective at one iteration.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub sup: f64,
    pub uspc: f64,
    pub mpcc: f64,
    pub alpha_t: f64,
    pub beta_t: f64,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        [self.total, self.sup, self.uspc, self.mpcc].iter().all(|v| v.is_finite())
    }
}

/// Objective value with per-branch gradients w.r.t. probabilities.
pub struct TotalLoss<T> {
    pub breakdown: LossBreakdown,
    pub grad_probs: Vec<Array4<T>>,
}

impl<T: Scalar> TotalLoss<T> {
    /// Gradients w.r.t. each branch's logits.
    pub fn grad_logits(&self, probs: &[ProbabilityMap<T>]) -> Vec<Array4<T>> {
        probs
            .iter()
            .zip(&self.grad_probs)
            .map(|(p, g)| softmax_backward(p, g))
            .collect()
    }
}

/// `L_sup + α_t L_USPC + β_t L_MPCC` with ramped weights.
pub fn total_loss<T: Scalar>(
    probs: &[ProbabilityMap<T>],
    scribble: &ScribbleAnnotation,
    weights: &LossWeights,
    options: &LossOptions,
) -> Result<TotalLoss<T>> {
    let alpha_t = weights.alpha_t();
    let beta_t = weights.beta_t();
    let (sup, mut grads) = partial_cross_entropy_with_grad(probs, scribble)?;

    let pbar = mix_soft_pseudo_label(probs)?;
    let w = if options.uncertainty_weighting {
        uncertainty_weights(&pbar)
    } else {
        uniform_weights(&pbar)
    };
    let (uspc, g_uspc) = uspc_loss_with_grad(probs, &pbar, &w)?;
    let a = T::lit(alpha_t);
    for (g, u) in grads.iter_mut().zip(&g_uspc) {
        g.zip_mut_with(u, |x, &y| *x += a * y);
    }

    let mut mpcc = T::zero();
    if options.mpcc {
        let (value, g_mpcc) = mpcc_loss_with_grad(probs, options.affinity_norm)?;
        mpcc = value;
        let b = T::lit(beta_t);
        for (g, m) in grads.iter_mut().zip(&g_mpcc) {
            g.zip_mut_with(m, |x, &y| *x += b * y);
        }
    }

    let (sup, uspc, mpcc) = (sup.as_f64(), uspc.as_f64(), mpcc.as_f64());
    Ok(TotalLoss {
        breakdown: LossBreakdown {
            total: sup + alpha_t * uspc + beta_t * mpcc,
            sup,
            uspc,
            mpcc,
            alpha_t,
            beta_t,
        },
        grad_probs: grads,
    })
}
