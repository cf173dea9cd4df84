//! Partial cross-entropy, the centroid loss, the normalized-distance regularizer and
//! their weighted combination.
//!
//! Every term exists twice: a plain `f64` version working on the shared output types,
//! and a graph version used for training. Tests check that the two agree.

use serde::{Deserialize, Serialize};

use crate::autodiff::{AutodiffError, Graph, Var};
use crate::error::{Error, Result};
use crate::types::{normalized_rgb, Centroids, Image, LabelMask, PixelFeatures, SegmentationOutput};

/// Probability floor inside every logarithm.
pub const LOG_FLOOR: f64 = 1e-12;

/// Distance sums below this are treated as degenerate and mapped to uniform distances.
pub const DEGENERATE_DISTANCE: f64 = 1e-12;

/// Which loss terms are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Group {
    /// Partial cross-entropy only.
    G1,
    /// Partial cross-entropy plus the centroid loss.
    G2,
    /// All three terms.
    G3,
}

impl Group {
    pub fn uses_centroids(self) -> bool {
        self != Group::G1
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FeatureMode {
    /// Pixel features are the softmax probabilities.
    Softmax,
    /// Softmax probabilities followed by normalized RGB.
    SoftmaxNrgb,
}

impl FeatureMode {
    /// Feature dimension `M` for `class_count` classes.
    pub fn dim(self, class_count: usize) -> usize {
        match self {
            FeatureMode::Softmax => class_count,
            FeatureMode::SoftmaxNrgb => class_count + 3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub lambda_cen: f64,
    pub lambda_mse: f64,
    pub feature_mode: FeatureMode,
    pub group: Group,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda_cen: 1.0,
            lambda_mse: 1.0,
            feature_mode: FeatureMode::Softmax,
            group: Group::G1,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lambda_cen", self.lambda_cen), ("lambda_mse", self.lambda_mse)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("{name} must be finite and non-negative, got {v}")));
            }
        }
        Ok(())
    }

    /// Weighted sum of the terms the group enables.
    pub fn combine(&self, parts: &LossParts) -> f64 {
        match self.group {
            Group::G1 => parts.pce,
            Group::G2 => parts.pce + self.lambda_cen * parts.cen,
            Group::G3 => parts.pce + self.lambda_cen * parts.cen + self.lambda_mse * parts.mse,
        }
    }
}

/// Unweighted loss terms; inactive terms are zero.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub pce: f64,
    pub cen: f64,
    pub mse: f64,
}

/// `−Σ ln p(true class)` over labelled pixels of `target`.
pub fn partial_cross_entropy(seg: &SegmentationOutput, target: &LabelMask) -> Result<f64> {
    if !target.same_size(seg.height(), seg.width()) || target.class_count() != seg.class_count() {
        return Err(Error::DimensionMismatch(
            "partial cross-entropy target does not match the segmentation output".into(),
        ));
    }
    Ok(target
        .labels()
        .iter()
        .enumerate()
        .filter_map(|(p, l)| l.map(|c| -seg.probability(usize::from(c), p).max(LOG_FLOOR).ln()))
        .sum())
}

/// Squared distances from `feature` to every centroid, normalized to sum to one.
pub fn normalized_distances(feature: &[f64], centroids: &Centroids) -> Result<Vec<f64>> {
    if feature.len() != centroids.dim() {
        return Err(Error::DimensionMismatch(format!(
            "feature of dimension {} vs centroids of dimension {}",
            feature.len(),
            centroids.dim()
        )));
    }
    let c = centroids.class_count();
    let sq: Vec<f64> = (0..c)
        .map(|k| feature.iter().zip(centroids.row(k)).map(|(f, m)| (f - m).powi(2)).sum())
        .collect();
    let total: f64 = sq.iter().sum();
    if total < DEGENERATE_DISTANCE {
        return Ok(vec![1.0 / c as f64; c]);
    }
    Ok(sq.into_iter().map(|v| v / total).collect())
}

/// `softmax(−d)` over classes.
pub fn soft_assignment(distances: &[f64]) -> Vec<f64> {
    let max = distances.iter().map(|d| -d).fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = distances.iter().map(|d| (-d - max).exp()).collect();
    let sum: f64 = e.iter().sum();
    e.into_iter().map(|v| v / sum).collect()
}

fn check_features(features: &PixelFeatures, centroids: &Centroids, h: usize, w: usize) -> Result<()> {
    if features.dim() != centroids.dim() || features.height() != h || features.width() != w {
        return Err(Error::DimensionMismatch(format!(
            "features {}x{}x{} vs centroids of dimension {} on a {h}x{w} mask",
            features.dim(),
            features.height(),
            features.width(),
            centroids.dim()
        )));
    }
    Ok(())
}

/// `−Σ ln y*(true class)` over scribble pixels, with `y* = softmax(−d)`.
pub fn centroid_loss(features: &PixelFeatures, centroids: &Centroids, scribbles: &LabelMask) -> Result<f64> {
    check_features(features, centroids, scribbles.height(), scribbles.width())?;
    if scribbles.class_count() != centroids.class_count() {
        return Err(Error::DimensionMismatch("scribble classes vs centroid count".into()));
    }
    let mut total = 0.0;
    for (p, l) in scribbles.labels().iter().enumerate() {
        if let Some(c) = l {
            let y = soft_assignment(&normalized_distances(&features.feature(p), centroids)?);
            total -= y[usize::from(*c)].max(LOG_FLOOR).ln();
        }
    }
    Ok(total)
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: impl IntoIterator<Item = f64>) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, v) in values.into_iter().enumerate() {
        if v > best.1 {
            best = (i, v);
        }
    }
    best.0
}

/// Mean over all pixels of the normalized distance to the centroid of the predicted class.
pub fn mse_regularizer(features: &PixelFeatures, centroids: &Centroids, seg: &SegmentationOutput) -> Result<f64> {
    check_features(features, centroids, seg.height(), seg.width())?;
    if seg.class_count() != centroids.class_count() {
        return Err(Error::DimensionMismatch("segmentation classes vs centroid count".into()));
    }
    let n = features.pixel_count();
    let mut total = 0.0;
    for p in 0..n {
        let c = argmax((0..seg.class_count()).map(|k| seg.probability(k, p)));
        total += normalized_distances(&features.feature(p), centroids)?[c];
    }
    Ok(total / n as f64)
}

/// All terms for one sample, and their weighted sum.
pub fn full_loss(
    config: &LossConfig,
    seg: &SegmentationOutput,
    centroids: &Centroids,
    pce_target: &LabelMask,
    scribbles: &LabelMask,
    image: &Image,
) -> Result<(f64, LossParts)> {
    config.validate()?;
    let mut parts = LossParts {
        pce: partial_cross_entropy(seg, pce_target)?,
        ..LossParts::default()
    };
    if config.group.uses_centroids() {
        let nrgb = (config.feature_mode == FeatureMode::SoftmaxNrgb).then(|| normalized_rgb(image));
        let features = PixelFeatures::from_segmentation(seg, nrgb.as_ref())?;
        parts.cen = centroid_loss(&features, centroids, scribbles)?;
        if config.group == Group::G3 {
            parts.mse = mse_regularizer(&features, centroids, seg)?;
        }
    }
    Ok((config.combine(&parts), parts))
}

/// Per-pixel class targets of a batch, flattened in `(sample, pixel)` order.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchTargets {
    pub pce: Vec<Option<usize>>,
    pub scribbles: Vec<Option<usize>>,
    pub batch: usize,
}

impl BatchTargets {
    pub fn new(pce: &[&LabelMask], scribbles: &[&LabelMask]) -> Result<Self> {
        if pce.len() != scribbles.len() || pce.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "{} pCE targets vs {} scribble masks",
                pce.len(),
                scribbles.len()
            )));
        }
        for (a, b) in pce.iter().zip(scribbles) {
            a.ensure_same_size(b, "scribble mask")?;
            a.ensure_same_size(pce[0], "pCE target")?;
        }
        let flatten = |masks: &[&LabelMask]| {
            masks
                .iter()
                .flat_map(|m| m.labels().iter().map(|l| l.map(usize::from)))
                .collect()
        };
        Ok(Self {
            pce: flatten(pce),
            scribbles: flatten(scribbles),
            batch: pce.len(),
        })
    }
}

/// Graph nodes of the batch loss. Sums are scaled by `1 / batch`.
#[derive(Debug, Clone, Copy)]
pub struct LossNodes {
    pub total: Var,
    pub pce: Var,
    pub cen: Option<Var>,
    pub mse: Option<Var>,
}

/// Builds the batch loss on `graph`.
///
/// `seg` is `N × C × H × W` softmax output, `centroids` is `N × C × M` and `nrgb`
/// (`N × 3 × H × W`) must be present exactly when the feature mode uses it.
pub fn loss_graph(
    graph: &mut Graph,
    config: &LossConfig,
    seg: Var,
    centroids: Var,
    nrgb: Option<Var>,
    targets: &BatchTargets,
) -> Result<LossNodes, AutodiffError> {
    let shape = graph.shape(seg).to_vec();
    let [n, c, h, w] = shape[..] else {
        return Err(AutodiffError::ShapeMismatch {
            op: "loss_graph",
            detail: format!("segmentation output must be 4-D, got {shape:?}"),
        });
    };
    if n != targets.batch {
        return Err(AutodiffError::ShapeMismatch {
            op: "loss_graph",
            detail: format!("batch of {n} vs {} targets", targets.batch),
        });
    }
    let inv_batch = 1.0 / n as f64;
    let pce_sum = graph.masked_nll(seg, targets.pce.clone(), LOG_FLOOR)?;
    let pce = graph.scale(pce_sum, inv_batch)?;
    if !config.group.uses_centroids() {
        return Ok(LossNodes {
            total: pce,
            pce,
            cen: None,
            mse: None,
        });
    }
    let features = match (config.feature_mode, nrgb) {
        (FeatureMode::Softmax, None) => seg,
        (FeatureMode::SoftmaxNrgb, Some(rgb)) => graph.concat(&[seg, rgb])?,
        _ => {
            return Err(AutodiffError::ShapeMismatch {
                op: "loss_graph",
                detail: "normalized RGB must be supplied exactly in the nRGB feature mode".into(),
            })
        }
    };
    let m = config.feature_mode.dim(c);
    let flat = graph.reshape(features, [n, m, h * w])?;
    let sq = graph.pairwise_sq_dist(flat, centroids)?;
    let d = graph.normalize_sum(sq, DEGENERATE_DISTANCE)?;
    let neg = graph.scale(d, -1.0)?;
    let y = graph.softmax(neg)?;
    let cen_sum = graph.masked_nll(y, targets.scribbles.clone(), LOG_FLOOR)?;
    let cen = graph.scale(cen_sum, inv_batch)?;
    let weighted_cen = graph.scale(cen, config.lambda_cen)?;
    let mut total = graph.add(pce, weighted_cen)?;
    let mut mse = None;
    if config.group == Group::G3 {
        let s = h * w;
        let probs = graph.value(seg).data();
        let predicted = (0..n * s)
            .map(|i| {
                let (b, p) = (i / s, i % s);
                argmax((0..c).map(|k| probs[(b * c + k) * s + p]))
            })
            .collect();
        let picked = graph.gather_channel(d, predicted)?;
        let term = graph.mean(picked)?;
        let weighted = graph.scale(term, config.lambda_mse)?;
        total = graph.add(total, weighted)?;
        mse = Some(term);
    }
    Ok(LossNodes {
        total,
        pce,
        cen: Some(cen),
        mse,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::gradcheck::{check_gradients, DEFAULT_STEP};
    use crate::autodiff::Tensor;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn seg_from(c: usize, h: usize, w: usize, probs: Vec<f64>) -> SegmentationOutput {
        SegmentationOutput::new(c, h, w, probs).unwrap()
    }

    #[test]
    fn pce_worked_values() {
        let seg = seg_from(2, 1, 3, vec![0.9, 0.2, 0.5, 0.1, 0.8, 0.5]);
        let none = LabelMask::unlabelled(1, 3, 2).unwrap();
        assert_eq!(partial_cross_entropy(&seg, &none).unwrap(), 0.0);
        let one = LabelMask::new(1, 3, 2, vec![None, None, Some(1)]).unwrap();
        assert_abs_diff_eq!(partial_cross_entropy(&seg, &one).unwrap(), std::f64::consts::LN_2, epsilon = 1e-12);
        let seg3 = seg_from(2, 1, 3, vec![0.9, 0.8, 0.6, 0.1, 0.2, 0.4]);
        let all = LabelMask::new(1, 3, 2, vec![Some(0); 3]).unwrap();
        assert_abs_diff_eq!(partial_cross_entropy(&seg3, &all).unwrap(), 0.8393, epsilon = 1e-4);
    }

    #[test]
    fn normalized_distance_worked_values() {
        let mu = Centroids::new(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        assert_eq!(normalized_distances(&[1.0, 0.0], &mu).unwrap(), vec![0.0, 1.0]);
        assert_eq!(normalized_distances(&[0.5, 0.5], &mu).unwrap(), vec![0.5, 0.5]);
        let same = Centroids::new(3, 2, vec![0.3, 0.7, 0.3, 0.7, 0.3, 0.7]).unwrap();
        let d = normalized_distances(&[0.3, 0.7], &same).unwrap();
        assert!(d.iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-15));

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..100 {
            let mu = Centroids::new(3, 4, (0..12).map(|_| rng.random()).collect()).unwrap();
            let f: Vec<f64> = (0..4).map(|_| rng.random()).collect();
            let d = normalized_distances(&f, &mu).unwrap();
            assert!((d.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            let y = soft_assignment(&d);
            assert!(y.iter().all(|&v| v >= 0.0));
            assert!((y.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    fn features(dim: usize, h: usize, w: usize, values: Vec<f64>) -> PixelFeatures {
        PixelFeatures::new(dim, h, w, values).unwrap()
    }

    #[test]
    fn centroid_loss_worked_values() {
        let mu = Centroids::new(2, 2, vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        // Feature (0, 1) sits on centroid 0: d = (0, 1); label it class 0.
        let f = features(2, 1, 1, vec![0.0, 1.0]);
        let scr = LabelMask::new(1, 1, 2, vec![Some(0)]).unwrap();
        assert_abs_diff_eq!(centroid_loss(&f, &mu, &scr).unwrap(), 0.3133, epsilon = 1e-4);

        let mu4 = Centroids::new(4, 1, vec![0.5; 4]).unwrap();
        let f4 = features(1, 1, 2, vec![0.1, 0.9]);
        let scr4 = LabelMask::new(1, 2, 4, vec![Some(3), Some(1)]).unwrap();
        assert_abs_diff_eq!(centroid_loss(&f4, &mu4, &scr4).unwrap(), 2.0 * 4f64.ln(), epsilon = 1e-12);

        let empty = LabelMask::unlabelled(1, 2, 4).unwrap();
        assert_eq!(centroid_loss(&f4, &mu4, &empty).unwrap(), 0.0);
    }

    #[test]
    fn mse_regularizer_values() {
        let mu = Centroids::new(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let seg = seg_from(2, 1, 2, vec![1.0, 0.0, 0.0, 1.0]);
        let f = PixelFeatures::from_segmentation(&seg, None).unwrap();
        assert_eq!(mse_regularizer(&f, &mu, &seg).unwrap(), 0.0);

        let seg1 = seg_from(2, 1, 1, vec![0.5, 0.5]);
        let f1 = features(2, 1, 1, vec![0.5, 0.5]);
        assert_abs_diff_eq!(mse_regularizer(&f1, &mu, &seg1).unwrap(), 0.5, epsilon = 1e-15);
    }

    #[test]
    fn mse_matches_pixel_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (c, m, n) = (3, 5, 6);
        let seg = random_seg(&mut rng, c, 2, 3);
        let f = features(m, 2, 3, (0..m * n).map(|_| rng.random()).collect());
        let mu = Centroids::new(c, m, (0..c * m).map(|_| rng.random()).collect()).unwrap();
        let mut expect = 0.0;
        for p in 0..n {
            let mut best = 0;
            for k in 1..c {
                if seg.probability(k, p) > seg.probability(best, p) {
                    best = k;
                }
            }
            let sq: Vec<f64> = (0..c)
                .map(|k| (0..m).map(|j| (f.values()[j * n + p] - mu.row(k)[j]).powi(2)).sum())
                .collect();
            expect += sq[best] / sq.iter().sum::<f64>();
        }
        assert_abs_diff_eq!(mse_regularizer(&f, &mu, &seg).unwrap(), expect / n as f64, epsilon = 1e-12);
    }

    #[test]
    fn combine_follows_group() {
        let parts = LossParts {
            pce: 0.5,
            cen: 0.3,
            mse: 0.2,
        };
        let mut cfg = LossConfig::default();
        assert_eq!(cfg.combine(&parts), 0.5);
        cfg.group = Group::G3;
        assert_abs_diff_eq!(cfg.combine(&parts), 1.0, epsilon = 1e-15);
        cfg.lambda_cen = 0.5;
        assert_abs_diff_eq!(cfg.combine(&parts), 0.85, epsilon = 1e-15);
        cfg.group = Group::G2;
        assert_abs_diff_eq!(cfg.combine(&parts), 0.65, epsilon = 1e-15);
        cfg.lambda_mse = -1.0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn scaling_distances_changes_nothing() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (c, m) = (3, 2);
        let f: Vec<f64> = (0..m * 4).map(|_| rng.random()).collect();
        let mu: Vec<f64> = (0..c * m).map(|_| rng.random()).collect();
        let k = 3.7f64;
        let scaled = |v: &[f64]| v.iter().map(|x| x * k.sqrt()).collect::<Vec<_>>();
        let scr = LabelMask::new(2, 2, c, vec![Some(0), None, Some(2), Some(1)]).unwrap();
        let a = centroid_loss(
            &features(m, 2, 2, f.clone()),
            &Centroids::new(c, m, mu.clone()).unwrap(),
            &scr,
        )
        .unwrap();
        let b = centroid_loss(
            &features(m, 2, 2, scaled(&f)),
            &Centroids::new(c, m, scaled(&mu)).unwrap(),
            &scr,
        )
        .unwrap();
        assert_abs_diff_eq!(a, b, epsilon = 1e-12);
    }

    #[test]
    fn moving_towards_true_centroid_never_hurts() {
        // Centroids on separate axes and a feature rotating on a circle in the plane of the
        // true axis and a spare axis: distances to the other centroids stay fixed.
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let scr = LabelMask::new(1, 1, 3, vec![Some(1)]).unwrap();
        for _ in 0..200 {
            let a: Vec<f64> = (0..3).map(|_| rng.random_range(0.1..2.0)).collect();
            let mut mu = vec![0.0; 12];
            for k in 0..3 {
                mu[k * 4 + k] = a[k];
            }
            let mu = Centroids::new(3, 4, mu).unwrap();
            let r: f64 = rng.random_range(0.1..2.0);
            let far: f64 = rng.random_range(0.0..std::f64::consts::PI);
            let near = far * rng.random::<f64>();
            let at = |theta: f64| features(4, 1, 1, vec![0.0, r * theta.cos(), 0.0, r * theta.sin()]);
            let before = centroid_loss(&at(far), &mu, &scr).unwrap();
            let after = centroid_loss(&at(near), &mu, &scr).unwrap();
            assert!(after <= before + 1e-12, "{before} -> {after}");
        }
    }

    fn random_seg(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> SegmentationOutput {
        let s = h * w;
        let raw: Vec<f64> = (0..c * s).map(|_| rng.random_range(0.05..1.0)).collect();
        let mut probs = raw.clone();
        for p in 0..s {
            let total: f64 = (0..c).map(|k| raw[k * s + p]).sum();
            for k in 0..c {
                probs[k * s + p] = raw[k * s + p] / total;
            }
        }
        seg_from(c, h, w, probs)
    }

    struct Case {
        logits: Tensor,
        centroids: Tensor,
        image: Tensor,
        pce: Vec<LabelMask>,
        scribbles: Vec<LabelMask>,
    }

    fn random_case(rng: &mut ChaCha8Rng, n: usize, c: usize, mode: FeatureMode) -> Case {
        let (h, w) = (3, 3);
        let m = mode.dim(c);
        let mask = |rng: &mut ChaCha8Rng, p: f64| {
            let labels = (0..h * w)
                .map(|_| (rng.random::<f64>() < p).then(|| rng.random_range(0..c) as u8))
                .collect();
            LabelMask::new(h, w, c, labels).unwrap()
        };
        Case {
            logits: Tensor::new([n, c, h, w], (0..n * c * h * w).map(|_| rng.random_range(-2.0..2.0)).collect())
                .unwrap(),
            centroids: Tensor::new([n, c, m], (0..n * c * m).map(|_| rng.random_range(-0.2..1.2)).collect()).unwrap(),
            image: Tensor::new([n, 3, h, w], (0..n * 3 * h * w).map(|_| rng.random()).collect()).unwrap(),
            pce: (0..n).map(|_| mask(rng, 0.6)).collect(),
            scribbles: (0..n).map(|_| mask(rng, 0.4)).collect(),
        }
    }

    fn nrgb_tensor(image: &Tensor) -> Tensor {
        let [n, _, h, w] = image.shape()[..] else { unreachable!() };
        let mut out = Vec::new();
        for b in 0..n {
            let img = Image::from_planar(h, w, image.data()[b * 3 * h * w..(b + 1) * 3 * h * w].to_vec()).unwrap();
            out.extend_from_slice(normalized_rgb(&img).planar());
        }
        Tensor::new([n, 3, h, w], out).unwrap()
    }

    fn build(
        g: &mut Graph,
        cfg: &LossConfig,
        logits: Var,
        centroids: Var,
        nrgb: &Tensor,
        targets: &BatchTargets,
    ) -> Result<LossNodes, AutodiffError> {
        let seg = g.softmax(logits)?;
        let rgb = match cfg.feature_mode {
            FeatureMode::Softmax => None,
            FeatureMode::SoftmaxNrgb => Some(g.constant(nrgb.clone())?),
        };
        loss_graph(g, cfg, seg, centroids, rgb, targets)
    }

    #[test]
    fn graph_loss_matches_plain_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for group in [Group::G1, Group::G2, Group::G3] {
            for mode in [FeatureMode::Softmax, FeatureMode::SoftmaxNrgb] {
                let cfg = LossConfig {
                    lambda_cen: 0.7,
                    lambda_mse: 1.3,
                    feature_mode: mode,
                    group,
                };
                let n = 2;
                let case = random_case(&mut rng, n, 3, mode);
                let targets = BatchTargets::new(
                    &case.pce.iter().collect::<Vec<_>>(),
                    &case.scribbles.iter().collect::<Vec<_>>(),
                )
                .unwrap();
                let nrgb = nrgb_tensor(&case.image);
                let mut g = Graph::new();
                let logits = g.constant(case.logits.clone()).unwrap();
                let mu = g.constant(case.centroids.clone()).unwrap();
                let nodes = build(&mut g, &cfg, logits, mu, &nrgb, &targets).unwrap();
                let seg_var = g.softmax(logits).unwrap();
                let seg_v = g.value(seg_var).clone();

                let (c, s, m) = (3, 9, mode.dim(3));
                let mut expect = 0.0;
                for b in 0..n {
                    let seg = seg_from(c, 3, 3, seg_v.data()[b * c * s..(b + 1) * c * s].to_vec());
                    let mu = Centroids::new(c, m, case.centroids.data()[b * c * m..(b + 1) * c * m].to_vec()).unwrap();
                    let img = Image::from_planar(3, 3, case.image.data()[b * 27..(b + 1) * 27].to_vec()).unwrap();
                    expect += full_loss(&cfg, &seg, &mu, &case.pce[b], &case.scribbles[b], &img).unwrap().0;
                }
                let got = g.value(nodes.total).item().unwrap();
                assert_abs_diff_eq!(got, expect / n as f64, epsilon = 1e-10);
                assert_eq!(nodes.cen.is_some(), group != Group::G1);
                assert_eq!(nodes.mse.is_some(), group == Group::G3);
            }
        }
    }

    #[test]
    fn gradients_match_finite_differences_for_every_configuration() {
        let mut rng = ChaCha8Rng::seed_from_u64(34);
        for group in [Group::G1, Group::G2, Group::G3] {
            for mode in [FeatureMode::Softmax, FeatureMode::SoftmaxNrgb] {
                let cfg = LossConfig {
                    feature_mode: mode,
                    group,
                    ..LossConfig::default()
                };
                let case = random_case(&mut rng, 2, 3, mode);
                let targets = BatchTargets::new(
                    &case.pce.iter().collect::<Vec<_>>(),
                    &case.scribbles.iter().collect::<Vec<_>>(),
                )
                .unwrap();
                let nrgb = nrgb_tensor(&case.image);
                let report = check_gradients(&[case.logits, case.centroids], DEFAULT_STEP, |g, v| {
                    Ok(build(g, &cfg, v[0], v[1], &nrgb, &targets)?.total)
                })
                .unwrap();
                assert!(
                    report.max_rel_error < 1e-5,
                    "{group:?} {mode:?}: {:?}",
                    report
                );
            }
        }
    }

    #[test]
    fn graph_loss_rejects_bad_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let case = random_case(&mut rng, 1, 2, FeatureMode::Softmax);
        let targets = BatchTargets::new(&[&case.pce[0]], &[&case.scribbles[0]]).unwrap();
        let mut g = Graph::new();
        let logits = g.constant(case.logits).unwrap();
        let seg = g.softmax(logits).unwrap();
        let mu = g.constant(case.centroids).unwrap();
        let cfg = LossConfig {
            feature_mode: FeatureMode::SoftmaxNrgb,
            group: Group::G2,
            ..LossConfig::default()
        };
        assert!(loss_graph(&mut g, &cfg, seg, mu, None, &targets).is_err());
        let other = LabelMask::unlabelled(2, 2, 2).unwrap();
        assert!(BatchTargets::new(&[&case.pce[0]], &[&other]).is_err());
    }
}
