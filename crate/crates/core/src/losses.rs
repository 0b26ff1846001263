//! Training objectives: multi-verbalizer classification loss, the
//! hierarchy-aware constraint chain (HCC) and the flat hierarchical
//! contrastive loss (FHC), plus their combination.
//!
//! Every loss comes with an exact gradient with respect to its inputs
//! (probabilities or mask states); parameter gradients are assembled in
//! [`crate::model`].

use ndarray::{Array1, Array2, ArrayView1};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encoding::MaskHiddenStates;
use crate::hierarchy::Hierarchy;
use crate::verbalizer::{LayerProbabilities, Mode};

/// Probabilities are clamped to `[PROB_EPS, 1 - PROB_EPS]` before any log.
pub const PROB_EPS: f64 = 1e-12;
/// Hidden vectors with a smaller norm make cosine similarity undefined.
pub const NORM_FLOOR: f64 = 1e-12;

#[derive(Debug, Error, PartialEq)]
pub enum LossError {
    #[error("no gold label at depth {depth} in single-path mode")]
    MissingGold { depth: usize },
    #[error("gold index {index} outside layer {depth} of size {size}")]
    GoldOutOfRange { depth: usize, index: usize, size: usize },
    #[error("hidden vector of view {view} at depth {depth} has zero norm")]
    ZeroNorm { view: usize, depth: usize },
    #[error("contrastive loss needs an even number (>= 2) of views, got {0}")]
    ViewCount(usize),
    #[error("invalid loss configuration: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FhcVariant {
    /// Sum of masked similarities minus the sum of all similarities.
    #[default]
    AsWritten,
    /// Supervised normalized-temperature contrastive loss.
    Infonce,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HccSource {
    /// Mix in the children's own probabilities.
    #[default]
    Raw,
    /// Mix in the children's already-propagated probabilities, bottom-up.
    Recursive,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub lambda1: f64,
    pub lambda2: f64,
    pub alpha: f64,
    pub beta: f64,
    pub mode: Mode,
    pub fhc_variant: FhcVariant,
    pub hcc_source: HccSource,
    pub fhc_include_self: bool,
    pub tau: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda1: 1.0,
            lambda2: 1e-2,
            alpha: 1.0,
            beta: 1.0,
            mode: Mode::SinglePath,
            fhc_variant: FhcVariant::AsWritten,
            hcc_source: HccSource::Raw,
            fhc_include_self: true,
            tau: 0.05,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<(), LossError> {
        let nonneg = |name: &str, v: f64| {
            if v.is_finite() && v >= 0.0 {
                Ok(())
            } else {
                Err(LossError::Config(format!("{name} must be finite and >= 0, got {v}")))
            }
        };
        nonneg("lambda1", self.lambda1)?;
        nonneg("lambda2", self.lambda2)?;
        nonneg("alpha", self.alpha)?;
        if !(0.0..=1.0).contains(&self.beta) {
            return Err(LossError::Config(format!("beta must lie in [0, 1], got {}", self.beta)));
        }
        if !(self.tau.is_finite() && self.tau > 0.0) {
            return Err(LossError::Config(format!("tau must be > 0, got {}", self.tau)));
        }
        Ok(())
    }
}

/// Per-depth gold labels as layer-local indices.
pub type LayerTargets = Vec<Vec<usize>>;

fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_EPS, 1.0 - PROB_EPS)
}

/// `d clamp(p) / dp`: one strictly inside the clamp range, zero outside.
fn clamp_slope(p: f64) -> f64 {
    if p > PROB_EPS && p < 1.0 - PROB_EPS {
        1.0
    } else {
        0.0
    }
}

/// Classification loss summed over the given layers, together with `dL/dp`.
pub fn classification_loss_grad(
    p: &[Array1<f64>],
    gold: &[Vec<usize>],
    mode: Mode,
) -> Result<(f64, Vec<Array1<f64>>), LossError> {
    let mut loss = 0.0;
    let mut grads = Vec::with_capacity(p.len());
    for (d, (layer, targets)) in p.iter().zip(gold).enumerate() {
        if let Some(&bad) = targets.iter().find(|&&t| t >= layer.len()) {
            return Err(LossError::GoldOutOfRange {
                depth: d + 1,
                index: bad,
                size: layer.len(),
            });
        }
        let mut g = Array1::zeros(layer.len());
        match mode {
            Mode::SinglePath => {
                if targets.is_empty() {
                    return Err(LossError::MissingGold { depth: d + 1 });
                }
                for &t in targets {
                    let q = clamp_prob(layer[t]);
                    loss -= q.ln();
                    g[t] -= clamp_slope(layer[t]) / q;
                }
            }
            Mode::MultiPath => {
                let mut is_gold = vec![false; layer.len()];
                for &t in targets {
                    is_gold[t] = true;
                }
                for (j, &v) in layer.iter().enumerate() {
                    let q = clamp_prob(v);
                    if is_gold[j] {
                        loss -= q.ln();
                        g[j] = -clamp_slope(v) / q;
                    } else {
                        loss -= (1.0 - q).ln();
                        g[j] = clamp_slope(v) / (1.0 - q);
                    }
                }
            }
        }
        grads.push(g);
    }
    Ok((loss, grads))
}

/// Cross-entropy (single-path) or binary cross-entropy (multi-path), summed
/// over labels and depths.
pub fn classification_loss(p: &LayerProbabilities, gold: &[Vec<usize>], mode: Mode) -> Result<f64, LossError> {
    classification_loss_grad(&p.0, gold, mode).map(|(l, _)| l)
}

/// Children of every label of layer `d` (0-based) as indices into layer `d+1`.
pub fn child_index_map(h: &Hierarchy) -> Vec<Vec<Vec<usize>>> {
    (1..h.depth())
        .map(|depth| {
            h.layer(depth)
                .iter()
                .map(|&id| h.children(id).iter().map(|&c| h.layer_index(c)).collect())
                .collect()
        })
        .collect()
}

/// Propagated probabilities for depths `1..D-1`:
/// `p~_j = (1 - beta) p_j + beta * sum(children of j)`.
pub fn hcc_propagate(p: &LayerProbabilities, h: &Hierarchy, beta: f64, source: HccSource) -> Vec<Array1<f64>> {
    let depth = p.0.len();
    if depth < 2 {
        return Vec::new();
    }
    let children = child_index_map(h);
    let mut out: Vec<Array1<f64>> = vec![Array1::zeros(0); depth - 1];
    for d in (0..depth - 1).rev() {
        let below = match source {
            HccSource::Raw => &p.0[d + 1],
            HccSource::Recursive if d + 1 == depth - 1 => &p.0[d + 1],
            HccSource::Recursive => &out[d + 1],
        };
        let mixed: Array1<f64> = p.0[d]
            .iter()
            .zip(&children[d])
            .map(|(&own, kids)| {
                let sum: f64 = kids.iter().map(|&c| below[c]).sum();
                (1.0 - beta) * own + beta * sum
            })
            .collect();
        out[d] = mixed;
    }
    out
}

/// Maps `dL/dp~` (depths `1..D-1`) back to `dL/dp` (all depths).
pub fn hcc_propagate_backward(
    grad_propagated: &[Array1<f64>],
    layer_sizes: &[usize],
    h: &Hierarchy,
    beta: f64,
    source: HccSource,
) -> Vec<Array1<f64>> {
    let depth = layer_sizes.len();
    let mut grad_p: Vec<Array1<f64>> = layer_sizes.iter().map(|&l| Array1::zeros(l)).collect();
    if depth < 2 {
        return grad_p;
    }
    let children = child_index_map(h);
    // Upstream gradient reaching each propagated layer, top-down for the recursive form.
    let mut upstream: Vec<Array1<f64>> = grad_propagated.to_vec();
    for d in 0..depth - 1 {
        let g = upstream[d].clone();
        grad_p[d] += &(&g * (1.0 - beta));
        for (j, kids) in children[d].iter().enumerate() {
            for &c in kids {
                match source {
                    HccSource::Recursive if d + 1 < depth - 1 => upstream[d + 1][c] += beta * g[j],
                    _ => grad_p[d + 1][c] += beta * g[j],
                }
            }
        }
    }
    grad_p
}

/// Classification loss on the propagated layers (depths `1..D-1`).
pub fn hcc_loss(propagated: &[Array1<f64>], gold: &[Vec<usize>], mode: Mode) -> Result<f64, LossError> {
    let n = propagated.len();
    classification_loss_grad(propagated, &gold[..n], mode).map(|(l, _)| l)
}

/// `M_d(a, b) = 1` iff views `a` and `b` share a gold label at depth `d` (0-based).
pub fn lattice_matrix(labels: &[LayerTargets], depth_index: usize) -> Array2<f64> {
    let n = labels.len();
    Array2::from_shape_fn((n, n), |(a, b)| {
        let la = &labels[a][depth_index];
        let lb = &labels[b][depth_index];
        if la.iter().any(|x| lb.contains(x)) {
            1.0
        } else {
            0.0
        }
    })
}

/// `2^{-(D-d) alpha}` for 1-based depth `d`.
pub fn layer_weight(d: usize, depth: usize, alpha: f64) -> f64 {
    (2f64).powf(-((depth - d) as f64) * alpha)
}

pub fn total_loss(classification: f64, hcc: f64, fhc: f64, lambda1: f64, lambda2: f64) -> f64 {
    classification + lambda1 * hcc + lambda2 * fhc
}

pub fn cosine(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    let na = a.dot(&a).sqrt().max(NORM_FLOOR);
    let nb = b.dot(&b).sqrt().max(NORM_FLOOR);
    a.dot(&b) / (na * nb)
}

fn check_views(views: &[MaskHiddenStates]) -> Result<(usize, usize), LossError> {
    if views.len() < 2 || views.len() % 2 != 0 {
        return Err(LossError::ViewCount(views.len()));
    }
    let depth = views[0].depth();
    for (v, s) in views.iter().enumerate() {
        for (d, h) in s.0.iter().enumerate() {
            if h.dot(h).sqrt() < NORM_FLOOR {
                return Err(LossError::ZeroNorm { view: v, depth: d + 1 });
            }
        }
    }
    Ok((views.len() / 2, depth))
}

/// Contrastive options pulled out of [`LossConfig`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FhcOptions {
    pub alpha: f64,
    pub variant: FhcVariant,
    pub include_self: bool,
    pub tau: f64,
}

impl From<&LossConfig> for FhcOptions {
    fn from(c: &LossConfig) -> Self {
        Self {
            alpha: c.alpha,
            variant: c.fhc_variant,
            include_self: c.fhc_include_self,
            tau: c.tau,
        }
    }
}

/// Reference evaluation of the as-written contrastive loss, term by term,
/// including the `log(exp(.)/exp(.))` wrapper.
pub fn fhc_loss_literal(
    views: &[MaskHiddenStates],
    labels: &[LayerTargets],
    alpha: f64,
    include_self: bool,
) -> Result<f64, LossError> {
    let (n, depth) = check_views(views)?;
    let total = views.len();
    let mut acc = 0.0;
    for d in 1..=depth {
        let w = layer_weight(d, depth, alpha);
        for u in 1..=d {
            let m = lattice_matrix(labels, u - 1);
            for a in 0..total {
                let mut masked = 0.0;
                let mut all = 0.0;
                for b in 0..total {
                    if a == b && !include_self {
                        continue;
                    }
                    let s = cosine(views[a].at(u - 1), views[b].at(u - 1));
                    masked += s * m[[a, b]];
                    all += s;
                }
                acc += (masked.exp() / all.exp()).ln() * w;
            }
        }
    }
    Ok(-acc / ((n * n * depth * depth) as f64))
}

/// Flat hierarchical contrastive loss and `dL/dh` for every view and depth.
pub fn fhc_loss_grad(
    views: &[MaskHiddenStates],
    labels: &[LayerTargets],
    opts: FhcOptions,
) -> Result<(f64, Vec<Vec<Array1<f64>>>), LossError> {
    let (n, depth) = check_views(views)?;
    let total = views.len();
    let r = views[0].0[0].len();
    let mut grads: Vec<Vec<Array1<f64>>> = vec![vec![Array1::zeros(r); depth]; total];
    // Summing the d-loop first: depth u collects the weights of every d >= u.
    let effective: Vec<f64> = (1..=depth)
        .map(|u| (u..=depth).map(|d| layer_weight(d, depth, opts.alpha)).sum())
        .collect();
    let scale = match opts.variant {
        FhcVariant::AsWritten => 1.0 / ((n * n * depth * depth) as f64),
        FhcVariant::Infonce => 1.0 / ((total * depth * depth) as f64),
    };
    let mut loss = 0.0;
    for u in 0..depth {
        let m = lattice_matrix(labels, u);
        let norms: Vec<f64> = views.iter().map(|v| v.at(u).dot(&v.at(u)).sqrt()).collect();
        let sim = Array2::from_shape_fn((total, total), |(a, b)| cosine(views[a].at(u), views[b].at(u)));
        // dL/dS for each ordered pair (anchor a, other b).
        let mut grad_sim = Array2::<f64>::zeros((total, total));
        let weight = effective[u] * scale;
        match opts.variant {
            FhcVariant::AsWritten => {
                for a in 0..total {
                    for b in 0..total {
                        if a == b && !opts.include_self {
                            continue;
                        }
                        let coef = 1.0 - m[[a, b]];
                        loss += weight * sim[[a, b]] * coef;
                        grad_sim[[a, b]] += weight * coef;
                    }
                }
            }
            FhcVariant::Infonce => {
                for a in 0..total {
                    let positives: Vec<usize> = (0..total).filter(|&b| b != a && m[[a, b]] == 1.0).collect();
                    if positives.is_empty() {
                        continue;
                    }
                    let others: Vec<usize> = (0..total).filter(|&b| b != a || opts.include_self).collect();
                    let max = others.iter().map(|&b| sim[[a, b]] / opts.tau).fold(f64::NEG_INFINITY, f64::max);
                    let exps: Vec<f64> = others.iter().map(|&b| (sim[[a, b]] / opts.tau - max).exp()).collect();
                    let z: f64 = exps.iter().sum();
                    let log_z = max + z.ln();
                    let inv = 1.0 / positives.len() as f64;
                    for &p in &positives {
                        loss += weight * inv * (log_z - sim[[a, p]] / opts.tau);
                        grad_sim[[a, p]] -= weight * inv / opts.tau;
                    }
                    for (&b, e) in others.iter().zip(&exps) {
                        grad_sim[[a, b]] += weight * (e / z) / opts.tau;
                    }
                }
            }
        }
        for a in 0..total {
            for b in 0..total {
                let g = grad_sim[[a, b]];
                if a == b || g == 0.0 {
                    continue;
                }
                let ha = views[a].at(u);
                let hb = views[b].at(u);
                let s = sim[[a, b]];
                let (na, nb) = (norms[a], norms[b]);
                grads[a][u] += &((&hb / (na * nb) - &ha * (s / (na * na))) * g);
                grads[b][u] += &((&ha / (na * nb) - &hb * (s / (nb * nb))) * g);
            }
        }
    }
    Ok((loss, grads))
}

pub fn fhc_loss(views: &[MaskHiddenStates], labels: &[LayerTargets], opts: FhcOptions) -> Result<f64, LossError> {
    fhc_loss_grad(views, labels, opts).map(|(l, _)| l)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::verbalizer::{probabilities, softmax};
    use ndarray::array;

    fn tree_2x2() -> Hierarchy {
        Hierarchy::from_edges(&[
            (None, "a"),
            (None, "b"),
            (Some("a"), "a1"),
            (Some("a"), "a2"),
            (Some("b"), "b1"),
            (Some("b"), "b2"),
        ])
        .unwrap()
    }

    #[test]
    fn uniform_single_path_loss_is_log_l() {
        let p = LayerProbabilities(vec![array![0.25, 0.25, 0.25, 0.25]]);
        let l = classification_loss(&p, &[vec![2]], Mode::SinglePath).unwrap();
        assert!((l - 1.386294361119890_6).abs() < 1e-12);
    }

    #[test]
    fn perfect_prediction_is_near_zero() {
        let p = LayerProbabilities(vec![array![1.0, 0.0]]);
        let l = classification_loss(&p, &[vec![0]], Mode::SinglePath).unwrap();
        assert!(l.abs() < 1e-11);
        let l = classification_loss(&p, &[vec![0]], Mode::MultiPath).unwrap();
        assert!(l.abs() < 1e-11);
    }

    #[test]
    fn half_sigmoid_bce_is_two_log_two() {
        let p = LayerProbabilities(vec![array![0.5, 0.5]]);
        let l = classification_loss(&p, &[vec![1]], Mode::MultiPath).unwrap();
        assert!((l - 2.0 * 2f64.ln()).abs() < 1e-14);
    }

    #[test]
    fn missing_gold_is_an_error() {
        let p = LayerProbabilities(vec![array![0.5, 0.5]]);
        assert_eq!(
            classification_loss(&p, &[vec![]], Mode::SinglePath).unwrap_err(),
            LossError::MissingGold { depth: 1 }
        );
        assert!(classification_loss(&p, &[vec![5]], Mode::SinglePath).is_err());
    }

    #[test]
    fn hcc_endpoints_and_midpoint() {
        let h = Hierarchy::from_edges(&[(None, "a"), (Some("a"), "x"), (Some("a"), "y")]).unwrap();
        let p = LayerProbabilities(vec![array![0.4], array![0.2, 0.3]]);
        for source in [HccSource::Raw, HccSource::Recursive] {
            assert_eq!(hcc_propagate(&p, &h, 0.0, source)[0], array![0.4]);
            assert!((hcc_propagate(&p, &h, 1.0, source)[0][0] - 0.5).abs() < 1e-15);
            assert!((hcc_propagate(&p, &h, 0.5, source)[0][0] - 0.45).abs() < 1e-15);
        }
    }

    #[test]
    fn recursive_source_uses_propagated_children() {
        let h = Hierarchy::from_edges(&[(None, "a"), (Some("a"), "b"), (Some("b"), "c")]).unwrap();
        let p = LayerProbabilities(vec![array![0.1], array![0.2], array![0.7]]);
        let raw = hcc_propagate(&p, &h, 0.5, HccSource::Raw);
        let rec = hcc_propagate(&p, &h, 0.5, HccSource::Recursive);
        assert!((raw[1][0] - 0.45).abs() < 1e-15);
        assert!((raw[0][0] - 0.15).abs() < 1e-15);
        assert!((rec[0][0] - 0.5 * 0.1 - 0.5 * 0.45).abs() < 1e-15);
    }

    #[test]
    fn hcc_backward_matches_finite_differences() {
        let h = tree_2x2();
        let p0 = LayerProbabilities(vec![array![0.3, 0.7], array![0.1, 0.2, 0.3, 0.4]]);
        let upstream = vec![array![0.9, -1.3]];
        for source in [HccSource::Raw, HccSource::Recursive] {
            let grad = hcc_propagate_backward(&upstream, &[2, 4], &h, 0.3, source);
            for d in 0..2 {
                for j in 0..p0.0[d].len() {
                    let eval = |delta: f64| {
                        let mut p = p0.clone();
                        p.0[d][j] += delta;
                        let t = hcc_propagate(&p, &h, 0.3, source);
                        t[0].dot(&upstream[0])
                    };
                    let fd = (eval(1e-6) - eval(-1e-6)) / 2e-6;
                    assert!((fd - grad[d][j]).abs() < 1e-8);
                }
            }
        }
    }

    #[test]
    fn hcc_beta_zero_equals_classification_on_upper_layers() {
        let h = tree_2x2();
        let p = probabilities(&[array![0.2, -0.1], array![0.5, 0.1, -0.3, 0.0]], Mode::SinglePath);
        let gold = vec![vec![1], vec![3]];
        let t = hcc_propagate(&p, &h, 0.0, HccSource::Raw);
        let lh = hcc_loss(&t, &gold, Mode::SinglePath).unwrap();
        let lc = classification_loss(&LayerProbabilities(vec![p.0[0].clone()]), &gold[..1], Mode::SinglePath).unwrap();
        assert_eq!(lh, lc);
        let flat = Hierarchy::from_edges(&[(None::<&str>, "a"), (None, "b")]).unwrap();
        let p1 = LayerProbabilities(vec![softmax(array![0.0, 1.0].view())]);
        assert!(hcc_propagate(&p1, &flat, 0.5, HccSource::Raw).is_empty());
        assert_eq!(hcc_loss(&[], &[vec![0]], Mode::SinglePath).unwrap(), 0.0);
    }

    #[test]
    fn lattice_examples() {
        let labels = vec![vec![vec![0], vec![1]], vec![vec![0], vec![2]], vec![vec![1], vec![3]]];
        let m1 = lattice_matrix(&labels, 0);
        let m2 = lattice_matrix(&labels, 1);
        assert_eq!(m1[[0, 1]], 1.0);
        assert_eq!(m2[[0, 1]], 0.0);
        assert_eq!(m1[[0, 2]], 0.0);
        for a in 0..3 {
            assert_eq!(m1[[a, a]], 1.0);
            assert_eq!(m2[[a, a]], 1.0);
        }
    }

    #[test]
    fn layer_weights() {
        assert_eq!(layer_weight(3, 3, 1.0), 1.0);
        assert_eq!(layer_weight(1, 3, 1.0), 0.25);
        assert_eq!(layer_weight(1, 3, 0.0), 1.0);
    }

    #[test]
    fn fhc_zero_when_every_pair_is_positive() {
        let views = vec![
            MaskHiddenStates(vec![array![1.0, 0.2], array![0.3, -0.4]]),
            MaskHiddenStates(vec![array![-0.5, 0.9], array![0.1, 0.1]]),
        ];
        let labels = vec![vec![vec![0], vec![0]]; 2];
        let opts = FhcOptions {
            alpha: 1.0,
            variant: FhcVariant::AsWritten,
            include_self: true,
            tau: 0.05,
        };
        assert_eq!(fhc_loss(&views, &labels, opts).unwrap(), 0.0);
        assert_eq!(fhc_loss_literal(&views, &labels, 1.0, true).unwrap(), 0.0);
    }

    #[test]
    fn fhc_rejects_zero_norm_and_odd_views() {
        let views = vec![
            MaskHiddenStates(vec![array![0.0, 0.0]]),
            MaskHiddenStates(vec![array![1.0, 0.0]]),
        ];
        let labels = vec![vec![vec![0]]; 2];
        let opts = FhcOptions::from(&LossConfig::default());
        assert_eq!(
            fhc_loss(&views, &labels, opts).unwrap_err(),
            LossError::ZeroNorm { view: 0, depth: 1 }
        );
        assert_eq!(fhc_loss(&views[..1], &labels[..1], opts).unwrap_err(), LossError::ViewCount(1));
    }

    #[test]
    fn total_loss_weights() {
        assert_eq!(total_loss(1.5, 7.0, 9.0, 0.0, 0.0), 1.5);
        assert_eq!(total_loss(1.0, 2.0, 100.0, 1.0, 1e-2), 4.0);
    }

    #[test]
    fn config_validation() {
        assert!(LossConfig::default().validate().is_ok());
        let bad = LossConfig { beta: 1.5, ..LossConfig::default() };
        assert!(bad.validate().is_err());
        let bad = LossConfig { lambda2: -1.0, ..LossConfig::default() };
        assert!(bad.validate().is_err());
    }
}
