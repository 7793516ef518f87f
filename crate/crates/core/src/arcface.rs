//! Angular-margin classification losses and the metric losses trained next
//! to them.
//!
//! All margin losses share one form: with `cos_j` the cosine between a
//! feature and class center `j`,
//!
//! ```text
//! loss = -mean log( e^{s (cos_y + m)} / (e^{s (cos_y + m)} + sum_{j != y} e^{s cos_j}) )
//! ```
//!
//! The margin is added to the cosine itself. They differ only in how the
//! cosine row is produced: one center per class (ArcFace), max over `k`
//! sub-centers per class (Subcenter-ArcFace), or a hierarchy of levels, each
//! holding every class plus a "continue" center that defers the sample to the
//! next level (hierarchical sub-center ArcFace).

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::tensor::{argmax_first, Element, Graph, Tensor, Var};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ArcMargin {
    /// Additive margin on the true-class cosine.
    pub margin: f64,
    /// Logit scale.
    pub scale: f64,
}

impl Default for ArcMargin {
    fn default() -> Self {
        Self { margin: 0.2, scale: 20.0 }
    }
}

impl ArcMargin {
    pub fn validate(&self) -> Result<()> {
        if !(self.margin >= 0.0) || !(self.scale > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "margin must be >= 0 and scale > 0, got m={} s={}",
                self.margin, self.scale
            )));
        }
        Ok(())
    }
}

fn check_labels(labels: &[usize], batch: usize, classes: usize) -> Result<()> {
    if labels.len() != batch {
        return Err(Error::InvalidArgument(format!("{} labels for batch of {batch}", labels.len())));
    }
    if let Some(&y) = labels.iter().find(|&&y| y >= classes) {
        return Err(Error::InvalidArgument(format!("label {y} out of range for {classes} classes")));
    }
    Ok(())
}

fn normalize<T: Element>(g: &Graph<T>, x: Var, what: &str) -> Result<Var> {
    g.normalize_rows(x).map_err(|e| Error::InvalidArgument(format!("{what}: {e}")))
}

/// Cosines between rows of `features: [B, d]` and `centers: [C, d]`.
pub fn cosine_matrix<T: Element>(g: &Graph<T>, features: Var, centers: Var) -> Result<Var> {
    let f = normalize(g, features, "feature")?;
    let c = normalize(g, centers, "center")?;
    Ok(g.matmul_nt(f, c)?)
}

/// Margin softmax cross-entropy on a `[B, C]` cosine matrix.
pub fn margin_loss<T: Element>(g: &Graph<T>, cos: Var, labels: &[usize], params: ArcMargin) -> Result<Var> {
    params.validate()?;
    let shape = g.shape(cos);
    check_labels(labels, shape[0], shape[1])?;
    let c = shape[1];
    let mut margin = Tensor::<T>::zeros(shape.clone());
    for (b, &y) in labels.iter().enumerate() {
        margin.data_mut()[b * c + y] = T::of(params.margin);
    }
    let shifted = g.add(cos, g.constant(margin))?;
    let logits = g.scale(shifted, T::of(params.scale))?;
    Ok(g.cross_entropy(logits, labels, T::zero())?)
}

/// ArcFace with one center per class, `centers: [C, d]`.
pub fn arcface_loss<T: Element>(
    g: &Graph<T>,
    features: Var,
    labels: &[usize],
    centers: Var,
    params: ArcMargin,
) -> Result<Var> {
    let cos = cosine_matrix(g, features, centers)?;
    margin_loss(g, cos, labels, params)
}

/// Per-class cosine as the max over `k` sub-centers, `centers: [C, k, d]`.
/// The gradient reaches only the winning sub-center.
pub fn subcenter_cos<T: Element>(g: &Graph<T>, features: Var, centers: Var) -> Result<Var> {
    let shape = g.shape(centers);
    if shape.len() != 3 || shape[1] == 0 {
        return Err(Error::InvalidArgument(format!("sub-centers must be [C, k, d], got {shape:?}")));
    }
    let flat = g.reshape(centers, &[shape[0] * shape[1], shape[2]])?;
    let cos = cosine_matrix(g, features, flat)?;
    Ok(g.group_max(cos, shape[1])?)
}

pub fn subcenter_arcface_loss<T: Element>(
    g: &Graph<T>,
    features: Var,
    labels: &[usize],
    centers: Var,
    params: ArcMargin,
) -> Result<Var> {
    let cos = subcenter_cos(g, features, centers)?;
    margin_loss(g, cos, labels, params)
}

/// Centers of the hierarchical loss: `[levels, classes + 1, dim]`. Index
/// `classes` of every level is the continue center.
#[derive(Clone, Debug, PartialEq)]
pub struct HierarchicalCenters<T> {
    weights: Tensor<T>,
}

impl<T: Element> HierarchicalCenters<T> {
    pub fn new(weights: Tensor<T>) -> Result<Self> {
        let s = weights.shape();
        if s.len() != 3 || s[0] == 0 || s[1] < 2 {
            return Err(Error::InvalidArgument(format!(
                "hierarchical centers must be [levels >= 1, classes + 1 >= 2, dim], got {s:?}"
            )));
        }
        Ok(Self { weights })
    }

    pub fn random(levels: usize, classes: usize, dim: usize, rng: &mut impl Rng) -> Result<Self> {
        let normal = Normal::new(0.0, 1.0 / (dim as f64).sqrt()).expect("valid std");
        Self::new(Tensor::from_fn([levels, classes + 1, dim], |_| T::of(normal.sample(rng))))
    }

    pub fn levels(&self) -> usize {
        self.weights.shape()[0]
    }

    /// Real classes, excluding the continue center.
    pub fn classes(&self) -> usize {
        self.weights.shape()[1] - 1
    }

    pub fn dim(&self) -> usize {
        self.weights.shape()[2]
    }

    pub fn weights(&self) -> &Tensor<T> {
        &self.weights
    }

    pub fn into_weights(self) -> Tensor<T> {
        self.weights
    }
}

/// Cosine rows visited while routing one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct RoutingTrace {
    pub level: usize,
    /// One `classes + 1` row per visited level.
    pub visited: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Route {
    pub level: usize,
    /// Cosines at the chosen level; the continue entry is `-inf` at the last
    /// level.
    pub cos_row: Vec<f64>,
    /// Winning class at the chosen level, never the continue center.
    pub class: usize,
    pub trace: RoutingTrace,
}

/// Walks the levels in order and stops at the first whose best center is a
/// real class. The continue center is masked at the last level, so a real
/// class is always chosen.
///
/// `centers` is the raw `[levels, classes + 1, dim]` array; both the feature
/// and the centers are L2-normalized here.
pub fn hs_route<T: Element>(feature: &[T], centers: &Tensor<T>) -> Result<Route> {
    let s = centers.shape();
    if s.len() != 3 || s[2] != feature.len() {
        return Err(Error::InvalidArgument(format!("feature of dim {} against centers {s:?}", feature.len())));
    }
    let (levels, width, d) = (s[0], s[1], s[2]);
    let cont = width - 1;
    let fnorm = feature.iter().map(|v| v.as_f64().powi(2)).sum::<f64>().sqrt();
    if !(fnorm >= 1e-12) {
        return Err(Error::InvalidArgument("zero-norm feature".into()));
    }
    let mut visited = Vec::new();
    for level in 0..levels {
        let mut row = Vec::with_capacity(width);
        for c in 0..width {
            let center = &centers.data()[(level * width + c) * d..][..d];
            let cn = center.iter().map(|v| v.as_f64().powi(2)).sum::<f64>().sqrt();
            if !(cn >= 1e-12) {
                return Err(Error::InvalidArgument(format!("zero-norm center ({level}, {c})")));
            }
            let dot: f64 = center.iter().zip(feature).map(|(a, b)| a.as_f64() * b.as_f64()).sum();
            row.push(dot / (cn * fnorm));
        }
        let last = level + 1 == levels;
        if last {
            row[cont] = f64::NEG_INFINITY;
        }
        let (best, _) = argmax_first(&row);
        visited.push(row.clone());
        if best != cont || last {
            return Ok(Route { level, cos_row: row, class: best, trace: RoutingTrace { level, visited } });
        }
    }
    unreachable!("the last level always stops")
}

/// How `hs_arcface_loss` picks each sample's level.
#[derive(Clone, Copy, Debug)]
pub enum Routing<'a> {
    /// Route on the current feature and center values.
    Compute,
    /// Use the given levels; for gradient checks.
    Frozen(&'a [usize]),
}

/// Hierarchical sub-center ArcFace. Routing is a hard decision made on the
/// forward values; only the chosen level's real-class cosines enter the
/// margin loss, so gradients reach the feature and that level's centers.
///
/// Returns the loss and the level chosen for each sample.
pub fn hs_arcface_loss<T: Element>(
    g: &Graph<T>,
    features: Var,
    labels: &[usize],
    centers: Var,
    params: ArcMargin,
    routing: Routing<'_>,
) -> Result<(Var, Vec<usize>)> {
    let cs = g.shape(centers);
    let fs = g.shape(features);
    if cs.len() != 3 || fs.len() != 2 || cs[2] != fs[1] || cs[1] < 2 {
        return Err(Error::InvalidArgument(format!("features {fs:?} against centers {cs:?}")));
    }
    let (levels, width, d) = (cs[0], cs[1], cs[2]);
    let (batch, classes) = (fs[0], width - 1);
    check_labels(labels, batch, classes)?;

    let chosen: Vec<usize> = match routing {
        Routing::Frozen(l) => {
            if l.len() != batch || l.iter().any(|&v| v >= levels) {
                return Err(Error::InvalidArgument("frozen routing does not fit the batch".into()));
            }
            l.to_vec()
        }
        Routing::Compute => {
            let (fv, cv) = (g.value(features), g.value(centers));
            (0..batch).map(|b| hs_route(fv.row(b), &cv).map(|r| r.level)).collect::<Result<_>>()?
        }
    };

    let flat = g.reshape(centers, &[levels * width, d])?;
    let cos_all = cosine_matrix(g, features, flat)?;
    let cols = levels * width;
    let index: Vec<usize> =
        chosen.iter().enumerate().flat_map(|(b, &lvl)| (0..classes).map(move |c| b * cols + lvl * width + c)).collect();
    let cos = g.gather(cos_all, &index, &[batch, classes])?;
    Ok((margin_loss(g, cos, labels, params)?, chosen))
}

/// Label-smoothed cross-entropy on identity logits.
pub fn id_loss<T: Element>(g: &Graph<T>, logits: Var, labels: &[usize], smoothing: f64) -> Result<Var> {
    let shape = g.shape(logits);
    if shape.len() != 2 {
        return Err(Error::InvalidArgument(format!("id logits must be [B, C], got {shape:?}")));
    }
    check_labels(labels, shape[0], shape[1])?;
    Ok(g.cross_entropy(logits, labels, T::of(smoothing))?)
}

/// Requires at least two identities, each with at least two samples.
pub fn check_pk_batch(labels: &[usize]) -> Result<()> {
    let mut counts = std::collections::BTreeMap::new();
    for &y in labels {
        *counts.entry(y).or_insert(0usize) += 1;
    }
    if counts.len() < 2 {
        return Err(Error::Batch(format!("need >= 2 identities, got {}", counts.len())));
    }
    if let Some((id, n)) = counts.iter().find(|(_, &n)| n < 2) {
        return Err(Error::Batch(format!("identity {id} has {n} sample(s), need >= 2")));
    }
    Ok(())
}

/// Batch-hard triplet loss: per anchor, the farthest same-identity sample and
/// the nearest other-identity sample under Euclidean distance;
/// `mean(max(0, d_ap - d_an + margin))`. Ties go to the lowest index.
pub fn triplet_loss<T: Element>(g: &Graph<T>, features: Var, labels: &[usize], margin: f64) -> Result<Var> {
    let shape = g.shape(features);
    if shape.len() != 2 || shape[0] != labels.len() {
        return Err(Error::InvalidArgument(format!("features {shape:?} for {} labels", labels.len())));
    }
    check_pk_batch(labels)?;
    let n = labels.len();
    let dist = g.pairwise_distance(features)?;
    let (pos, neg) = {
        let dv = g.value(dist);
        let mut pos = Vec::with_capacity(n);
        let mut neg = Vec::with_capacity(n);
        for a in 0..n {
            let row = dv.row(a);
            let mut hp: Option<usize> = None;
            let mut hn: Option<usize> = None;
            for j in 0..n {
                if j == a {
                    continue;
                }
                if labels[j] == labels[a] {
                    if hp.is_none_or(|p| row[j] > row[p]) {
                        hp = Some(j);
                    }
                } else if hn.is_none_or(|q| row[j] < row[q]) {
                    hn = Some(j);
                }
            }
            pos.push(a * n + hp.expect("checked batch"));
            neg.push(a * n + hn.expect("checked batch"));
        }
        (pos, neg)
    };
    let d_ap = g.gather(dist, &pos, &[n])?;
    let d_an = g.gather(dist, &neg, &[n])?;
    let diff = g.sub(d_ap, d_an)?;
    let shifted = g.add(diff, g.constant(Tensor::full([n], T::of(margin))))?;
    let hinge = g.relu(shifted)?;
    Ok(g.mean(hinge)?)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::tensor::{finite_diff_check, TensorError};

    fn rand_tensor(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0))
    }

    fn tensor_err(e: Error) -> TensorError {
        match e {
            Error::Tensor(t) => t,
            other => panic!("{other}"),
        }
    }

    fn scalar<T: Element>(g: &Graph<T>, v: Var) -> f64 {
        g.value(v).item().as_f64()
    }

    fn softplus(x: f64) -> f64 {
        x.exp().ln_1p()
    }

    #[test]
    fn margin_free_unit_scale_is_plain_cross_entropy() {
        let (f, c) = (rand_tensor(&[4, 6], 1), rand_tensor(&[5, 6], 2));
        let labels = [0, 4, 2, 2];
        let g = Graph::new();
        let (fv, cv) = (g.constant(f), g.constant(c));
        let l = arcface_loss(&g, fv, &labels, cv, ArcMargin { margin: 0.0, scale: 1.0 }).unwrap();
        let cos = cosine_matrix(&g, fv, cv).unwrap();
        let ce = g.cross_entropy(cos, &labels, 0.0).unwrap();
        assert!((scalar(&g, l) - scalar(&g, ce)).abs() <= 1e-12);
    }

    #[test]
    fn aligned_feature_reference_value() {
        let g = Graph::<f64>::new();
        let f = g.constant(Tensor::new([1, 2], vec![2.0, 0.0]).unwrap());
        let c = g.constant(Tensor::eye(2));
        let l = arcface_loss(&g, f, &[0], c, ArcMargin::default()).unwrap();
        // log-sum-exp cancellation near 24 leaves ~1e-15 absolute error
        assert!((scalar(&g, l) - softplus(-24.0)).abs() < 1e-14);
    }

    #[test]
    fn arcface_errors() {
        let g = Graph::<f64>::new();
        let f = g.constant(rand_tensor(&[2, 3], 3));
        let c = g.constant(rand_tensor(&[4, 3], 4));
        assert!(arcface_loss(&g, f, &[0, 4], c, ArcMargin::default()).is_err());
        let z = g.constant(Tensor::zeros([2, 3]));
        assert!(arcface_loss(&g, z, &[0, 1], c, ArcMargin::default()).is_err());
        assert!(arcface_loss(&g, f, &[0, 1], c, ArcMargin { margin: -0.1, scale: 1.0 }).is_err());
    }

    #[test]
    fn arcface_gradients() {
        let labels = [0, 3, 1, 3];
        let r = finite_diff_check(
            |g, v| arcface_loss(g, v[0], &labels, v[1], ArcMargin::default()).map_err(tensor_err),
            &[rand_tensor(&[4, 8], 5), rand_tensor(&[5, 8], 6)],
            1e-5,
            1e-6,
        )
        .unwrap();
        assert!(r.passed, "{r:?}");
    }

    #[test]
    fn subcenter_single_and_duplicated() {
        let (f, c) = (rand_tensor(&[3, 5], 7), rand_tensor(&[4, 5], 8));
        let g = Graph::new();
        let fv = g.constant(f);
        let plain = cosine_matrix(&g, fv, g.constant(c.clone())).unwrap();
        let k1 = subcenter_cos(&g, fv, g.constant(c.clone().reshape([4, 1, 5]).unwrap())).unwrap();
        assert_eq!(g.tensor(plain), g.tensor(k1));
        let dup = Tensor::from_fn([4, 3, 5], |i| c.data()[(i / 15) * 5 + i % 5]);
        let k3 = subcenter_cos(&g, fv, g.constant(dup)).unwrap();
        assert_eq!(g.tensor(plain), g.tensor(k3));
    }

    #[test]
    fn subcenter_matches_loop_and_max() {
        let (f, c) = (rand_tensor(&[3, 6], 9), rand_tensor(&[4, 3, 6], 10));
        let g = Graph::new();
        let out = subcenter_cos(&g, g.constant(f.clone()), g.constant(c.clone())).unwrap();
        let ov = g.value(out);
        let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
        for b in 0..3 {
            for cls in 0..4 {
                let mut best = f64::MIN;
                for k in 0..3 {
                    let center = &c.data()[(cls * 3 + k) * 6..][..6];
                    let dot: f64 = center.iter().zip(f.row(b)).map(|(a, x)| a * x).sum();
                    best = best.max(dot / (norm(center) * norm(f.row(b))));
                }
                assert!((ov.at(b, cls) - best).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn subcenter_dominates_single_center() {
        let (f, c) = (rand_tensor(&[5, 4], 11), rand_tensor(&[3, 4, 4], 12));
        let g = Graph::new();
        let fv = g.constant(f);
        let sub = subcenter_cos(&g, fv, g.constant(c.clone())).unwrap();
        let first = Tensor::from_fn([3, 4], |i| c.data()[(i / 4) * 16 + i % 4]);
        let single = cosine_matrix(&g, fv, g.constant(first)).unwrap();
        for (s, p) in g.value(sub).data().iter().zip(g.value(single).data()) {
            assert!(s >= p);
        }
    }

    #[test]
    fn subcenter_loss_gradients() {
        let labels = [0, 2, 1];
        let r = finite_diff_check(
            |g, v| subcenter_arcface_loss(g, v[0], &labels, v[1], ArcMargin::default()).map_err(tensor_err),
            &[rand_tensor(&[3, 5], 13), rand_tensor(&[3, 2, 5], 14)],
            1e-5,
            1e-5,
        )
        .unwrap();
        assert!(r.passed, "{r:?}");
    }

    fn basis(d: usize, i: usize) -> Vec<f64> {
        (0..d).map(|j| if i == j { 1.0 } else { 0.0 }).collect()
    }

    #[test]
    fn single_level_routes_to_level_zero_and_masks_continue() {
        // continue center aligned with the feature: still masked at the only level
        let mut w = vec![];
        w.extend(basis(3, 0));
        w.extend(basis(3, 1));
        w.extend(basis(3, 2));
        let centers = Tensor::new([1, 3, 3], w).unwrap();
        let r = hs_route(&basis(3, 2), &centers).unwrap();
        assert_eq!(r.level, 0);
        assert_eq!(r.cos_row[2], f64::NEG_INFINITY);
        assert!(r.class < 2);
    }

    #[test]
    fn aligned_feature_stops_at_level_zero() {
        let c = HierarchicalCenters::<f64>::new(Tensor::from_fn([3, 4, 4], |i| {
            let (c, j) = ((i / 4) % 4, i % 4);
            if c == j {
                1.0
            } else {
                0.0
            }
        }))
        .unwrap();
        let r = hs_route(&basis(4, 2), c.weights()).unwrap();
        assert_eq!((r.level, r.class), (0, 2));
        assert_eq!(r.trace.visited.len(), 1);
    }

    #[test]
    fn continue_center_defers_to_next_level() {
        // 2 classes + continue, d = 3.
        // level 0: continue center = e2 (aligned with feature); classes e0, e1.
        // level 1: class 1 = e2; class 0 = e0; continue = e1.
        let mut w = vec![];
        for v in [basis(3, 0), basis(3, 1), basis(3, 2), basis(3, 0), basis(3, 2), basis(3, 1)] {
            w.extend(v);
        }
        let centers = Tensor::new([2, 3, 3], w).unwrap();
        let feature = [0.1, 0.0, 1.0];
        let r = hs_route(&feature, &centers).unwrap();
        // hand-stepped: level 0 cosines (0.0995, 0, 0.995) -> argmax 2 = continue -> advance;
        // level 1 cosines (0.0995, 0.995, -inf) -> class 1.
        assert_eq!((r.level, r.class), (1, 1));
        assert_eq!(r.trace.visited.len(), 2);
        let n = (1.01f64).sqrt();
        assert!((r.trace.visited[0][2] - 1.0 / n).abs() < 1e-12);
        assert!((r.cos_row[1] - 1.0 / n).abs() < 1e-12);
    }

    #[test]
    fn routing_is_scale_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let c = HierarchicalCenters::<f64>::random(3, 5, 6, &mut rng).unwrap();
        for s in 0..50 {
            let f = rand_tensor(&[6], 100 + s);
            let scaled: Vec<f64> = f.data().iter().map(|v| v * 7.3).collect();
            let (a, b) = (hs_route(f.data(), c.weights()).unwrap(), hs_route(&scaled, c.weights()).unwrap());
            assert_eq!((a.level, a.class), (b.level, b.class));
        }
    }

    #[test]
    fn single_level_hierarchy_is_arcface() {
        for seed in 0..20 {
            let (f, w) = (rand_tensor(&[5, 6], 200 + seed), rand_tensor(&[1, 4, 6], 300 + seed));
            let labels = [0, 1, 2, 2, 0];
            let g = Graph::new();
            let (fv, wv) = (g.constant(f), g.constant(w.clone()));
            let (hs, levels) = hs_arcface_loss(&g, fv, &labels, wv, ArcMargin::default(), Routing::Compute).unwrap();
            assert!(levels.iter().all(|&l| l == 0));
            let real = Tensor::new([3, 6], w.data()[..18].to_vec()).unwrap();
            let arc = arcface_loss(&g, fv, &labels, g.constant(real), ArcMargin::default()).unwrap();
            assert!((scalar(&g, hs) - scalar(&g, arc)).abs() <= 1e-6);
            let unit = ArcMargin { margin: 0.0, scale: 1.0 };
            let (hs1, _) = hs_arcface_loss(&g, fv, &labels, wv, unit, Routing::Compute).unwrap();
            let cos = cosine_matrix(&g, fv, g.constant(Tensor::new([3, 6], w.data()[..18].to_vec()).unwrap())).unwrap();
            let ce = g.cross_entropy(cos, &labels, 0.0).unwrap();
            assert!((scalar(&g, hs1) - scalar(&g, ce)).abs() <= 1e-12);
        }
    }

    #[test]
    fn hs_arcface_gradients_with_frozen_routing() {
        let labels = [0, 2, 1, 2];
        let levels = [0, 2, 1, 1];
        let r = finite_diff_check(
            |g, v| {
                hs_arcface_loss(g, v[0], &labels, v[1], ArcMargin::default(), Routing::Frozen(&levels))
                    .map(|(l, _)| l)
                    .map_err(tensor_err)
            },
            &[rand_tensor(&[4, 6], 16), rand_tensor(&[3, 4, 6], 17)],
            1e-5,
            1e-5,
        )
        .unwrap();
        assert!(r.passed, "{r:?}");
    }

    #[test]
    fn hs_arcface_gradient_only_reaches_chosen_levels() {
        let g = Graph::<f64>::new();
        let f = g.param(rand_tensor(&[2, 4], 18));
        let w = g.param(rand_tensor(&[3, 3, 4], 19));
        let (l, _) = hs_arcface_loss(&g, f, &[0, 1], w, ArcMargin::default(), Routing::Frozen(&[2, 2])).unwrap();
        let grads = g.backward(l).unwrap();
        let gw = grads.get(w).unwrap();
        assert!(gw[..2 * 12].iter().all(|&v| v == 0.0));
        // the continue center of the chosen level is excluded too
        assert!(gw[2 * 12 + 8..].iter().all(|&v| v == 0.0));
        assert!(gw[2 * 12..2 * 12 + 8].iter().any(|&v| v != 0.0));
    }

    #[test]
    fn arcface_is_non_increasing_in_margin() {
        let (f, c) = (rand_tensor(&[6, 5], 20), rand_tensor(&[4, 5], 21));
        let labels = [0, 1, 2, 3, 0, 1];
        let g = Graph::new();
        let (fv, cv) = (g.constant(f), g.constant(c));
        // the margin is added to the true-class cosine, raising its logit
        let mut prev = f64::MAX;
        for m in [0.0, 0.1, 0.2, 0.5, 1.0] {
            let l = scalar(&g, arcface_loss(&g, fv, &labels, cv, ArcMargin { margin: m, scale: 20.0 }).unwrap());
            assert!(l <= prev);
            prev = l;
        }
    }

    #[test]
    fn losses_are_permutation_equivariant() {
        let f = rand_tensor(&[6, 5], 22);
        let w = rand_tensor(&[2, 4, 5], 23);
        let labels = [0, 1, 2, 0, 1, 2];
        let perm = [3, 5, 0, 1, 4, 2];
        let pf = Tensor::from_fn([6, 5], |i| f.data()[perm[i / 5] * 5 + i % 5]);
        let pl: Vec<usize> = perm.iter().map(|&p| labels[p]).collect();
        let eval = |f: &Tensor<f64>, labels: &[usize]| {
            let g = Graph::new();
            let (fv, wv) = (g.constant(f.clone()), g.constant(w.clone()));
            let (hs, _) = hs_arcface_loss(&g, fv, labels, wv, ArcMargin::default(), Routing::Compute).unwrap();
            let tri = triplet_loss(&g, fv, labels, 0.3).unwrap();
            (scalar(&g, hs), scalar(&g, tri))
        };
        let (a, b) = (eval(&f, &labels), eval(&pf, &pl));
        assert!((a.0 - b.0).abs() < 1e-12 && (a.1 - b.1).abs() < 1e-12);
    }

    #[test]
    fn id_loss_reference_cases() {
        let g = Graph::<f64>::new();
        let sharp = g.constant(Tensor::new([2, 3], vec![500.0, 0.0, 0.0, 0.0, 0.0, 500.0]).unwrap());
        assert!(scalar(&g, id_loss(&g, sharp, &[0, 2], 0.0).unwrap()) < 1e-12);
        let flat = g.constant(Tensor::zeros([3, 7]));
        for eps in [0.0, 0.1] {
            let l = id_loss(&g, flat, &[0, 3, 6], eps).unwrap();
            assert!((scalar(&g, l) - 7f64.ln()).abs() < 1e-12);
        }
        assert!(id_loss(&g, flat, &[0, 3, 7], 0.1).is_err());
    }

    #[test]
    fn id_loss_matches_direct_formula() {
        let x = rand_tensor(&[5, 4], 24);
        let labels = [3, 0, 1, 1, 2];
        let g = Graph::new();
        let l = scalar(&g, id_loss(&g, g.constant(x.clone()), &labels, 0.1).unwrap());
        let mut want = 0.0;
        for (r, &y) in labels.iter().enumerate() {
            let lse = x.row(r).iter().map(|v| v.exp()).sum::<f64>().ln();
            let mean_logp = x.row(r).iter().map(|v| v - lse).sum::<f64>() / 4.0;
            want += -(0.9 * (x.at(r, y) - lse)) - 0.1 * mean_logp;
        }
        assert!((l - want / 5.0).abs() <= 1e-10);
    }

    #[test]
    fn triplet_reference_cases() {
        let g = Graph::<f64>::new();
        let same = g.constant(Tensor::full([4, 3], 0.5));
        let labels = [0, 0, 1, 1];
        assert!((scalar(&g, triplet_loss(&g, same, &labels, 0.3).unwrap()) - 0.3).abs() < 1e-15);
        let sep = g.constant(Tensor::new([4, 1], vec![0.0, 0.1, 5.0, 5.1]).unwrap());
        assert_eq!(scalar(&g, triplet_loss(&g, sep, &labels, 0.3).unwrap()), 0.0);
        assert!(matches!(triplet_loss(&g, same, &[0, 0, 0, 0], 0.3), Err(Error::Batch(_))));
        assert!(matches!(triplet_loss(&g, same, &[0, 0, 1, 2], 0.3), Err(Error::Batch(_))));
    }

    #[test]
    fn triplet_matches_exhaustive_scan() {
        let f = rand_tensor(&[8, 4], 25);
        let labels = [0, 0, 0, 0, 1, 1, 1, 1];
        let g = Graph::new();
        let l = scalar(&g, triplet_loss(&g, g.constant(f.clone()), &labels, 0.3).unwrap());
        let dist = |i: usize, j: usize| f.row(i).iter().zip(f.row(j)).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let mut want = 0.0;
        for a in 0..8 {
            // batch-hard = the worst hinge over all (p, n) triplets for this anchor
            let mut worst = f64::MIN;
            for p in 0..8 {
                for n in 0..8 {
                    if p != a && labels[p] == labels[a] && labels[n] != labels[a] {
                        worst = worst.max(dist(a, p) - dist(a, n));
                    }
                }
            }
            want += (worst + 0.3).max(0.0);
        }
        assert!((l - want / 8.0).abs() <= 1e-10);
    }

    #[test]
    fn triplet_gradients() {
        let labels = [0, 0, 1, 1, 2, 2];
        let r = finite_diff_check(
            |g, v| triplet_loss(g, v[0], &labels, 5.0).map_err(tensor_err),
            &[rand_tensor(&[6, 3], 26)],
            1e-5,
            1e-5,
        )
        .unwrap();
        assert!(r.passed, "{r:?}");
    }
}
