//! Experiment labels, training configuration, the joint training loop and evaluation.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::annotation::{augment, SCRIBBLE_WIDTHS};
use crate::autodiff::{Graph, Tensor};
use crate::dataset::{pseudo_mask, Dataset};
use crate::error::{Error, Result};
use crate::losses::{loss_graph, BatchTargets, FeatureMode, Group, LossConfig};
use crate::metrics::{confusion, miou, ConfusionMatrix, MetricsReport};
use crate::network::{predict_labels_from_clustering, predict_labels_from_segmentation, Mode, Network, NetworkConfig};
use crate::types::{normalized_rgb, Image, LabelMask, PixelFeatures};

/// Superpixel counts accepted in experiment labels.
pub const SUPERPIXEL_COUNTS: [usize; 3] = [30, 50, 80];

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;
const EVAL_CHUNK: usize = 8;

/// What the partial cross-entropy is trained against.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Supervision {
    /// Full masks with ordinary cross-entropy.
    Full,
    /// Scribbles of the given width, optionally propagated over that many superpixels.
    Scribbles { width: usize, superpixels: Option<usize> },
}

/// Experiment label: `E-FULL` or `E-SCR<w>[-SUP<n>]`, then optionally `-N`/`-NRGB` and `-G1`/`-G2`/`-G3`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ExperimentLabel {
    pub supervision: Supervision,
    pub feature_mode: Option<FeatureMode>,
    pub group: Option<Group>,
}

impl FromStr for ExperimentLabel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = |why: &str| Error::Config(format!("experiment label {s:?}: {why}"));
        let mut parts = s.split('-');
        if parts.next() != Some("E") {
            return Err(bad("must start with 'E-'"));
        }
        let head = parts.next().ok_or_else(|| bad("missing supervision part"))?;
        let mut rest: Vec<&str> = parts.collect();
        let supervision = if head == "FULL" {
            Supervision::Full
        } else if let Some(w) = head.strip_prefix("SCR") {
            let width: usize = w.parse().map_err(|_| bad("scribble width is not a number"))?;
            if !SCRIBBLE_WIDTHS.contains(&width) {
                return Err(bad("scribble width must be 2, 5, 10 or 20"));
            }
            let superpixels = match rest.first().and_then(|p| p.strip_prefix("SUP")) {
                Some(n) => {
                    let n: usize = n.parse().map_err(|_| bad("superpixel count is not a number"))?;
                    if !SUPERPIXEL_COUNTS.contains(&n) {
                        return Err(bad("superpixel count must be 30, 50 or 80"));
                    }
                    rest.remove(0);
                    Some(n)
                }
                None => None,
            };
            Supervision::Scribbles { width, superpixels }
        } else {
            return Err(bad("supervision must be FULL or SCR<width>"));
        };
        let mut feature_mode = None;
        let mut group = None;
        for p in rest {
            match p {
                "N" if feature_mode.is_none() && group.is_none() => feature_mode = Some(FeatureMode::Softmax),
                "NRGB" if feature_mode.is_none() && group.is_none() => feature_mode = Some(FeatureMode::SoftmaxNrgb),
                "G1" if group.is_none() => group = Some(Group::G1),
                "G2" if group.is_none() => group = Some(Group::G2),
                "G3" if group.is_none() => group = Some(Group::G3),
                _ => return Err(bad(&format!("unexpected part {p:?}"))),
            }
        }
        Ok(Self {
            supervision,
            feature_mode,
            group,
        })
    }
}

impl fmt::Display for ExperimentLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.supervision {
            Supervision::Full => write!(f, "E-FULL")?,
            Supervision::Scribbles { width, superpixels } => {
                write!(f, "E-SCR{width}")?;
                if let Some(n) = superpixels {
                    write!(f, "-SUP{n}")?;
                }
            }
        }
        match self.feature_mode {
            Some(FeatureMode::Softmax) => write!(f, "-N")?,
            Some(FeatureMode::SoftmaxNrgb) => write!(f, "-NRGB")?,
            None => {}
        }
        if let Some(g) = self.group {
            write!(f, "-{g:?}")?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossSection {
    pub lambda_cen: f64,
    pub lambda_mse: f64,
    /// Used when the label has no `-N`/`-NRGB` part.
    pub feature_mode: Option<FeatureMode>,
    /// Used when the label has no `-G<k>` part.
    pub group: Option<Group>,
}

impl Default for LossSection {
    fn default() -> Self {
        Self {
            lambda_cen: 1.0,
            lambda_mse: 1.0,
            feature_mode: None,
            group: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkSection {
    pub scales: usize,
    pub base_channels: usize,
    pub f_int: usize,
    pub centroid_hidden: usize,
}

impl Default for NetworkSection {
    fn default() -> Self {
        let d = NetworkConfig::default();
        Self {
            scales: d.scales,
            base_channels: d.base_channels,
            f_int: d.f_int,
            centroid_hidden: d.centroid_hidden,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub experiment_label: String,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Apply one random rotation, scaling or crop to every sample at every step.
    pub augment: bool,
    pub loss: LossSection,
    pub network: NetworkSection,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            experiment_label: "E-SCR20-SUP50-N-G3".into(),
            learning_rate: 1e-4,
            epochs: 30,
            batch_size: 4,
            seed: 0,
            augment: true,
            loss: LossSection::default(),
            network: NetworkSection::default(),
        }
    }
}

/// A label with every choice resolved against the configuration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Experiment {
    pub label: ExperimentLabel,
    pub supervision: Supervision,
    pub loss: LossConfig,
}

impl TrainConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: TrainConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.resolve()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    fn pick<T: PartialEq + fmt::Debug>(&self, from_label: Option<T>, from_config: Option<T>, default: T, what: &str) -> Result<T> {
        match (from_label, from_config) {
            (Some(a), Some(b)) if a != b => Err(Error::Config(format!(
                "{what} {b:?} in [loss] contradicts the experiment label {}",
                self.experiment_label
            ))),
            (Some(a), _) | (None, Some(a)) => Ok(a),
            (None, None) => Ok(default),
        }
    }

    /// Validates numbers and merges the label with the `[loss]` table.
    pub fn resolve(&self) -> Result<Experiment> {
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) || self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config(
                "learning_rate, epochs and batch_size must be positive".into(),
            ));
        }
        let label: ExperimentLabel = self.experiment_label.parse()?;
        let loss = LossConfig {
            lambda_cen: self.loss.lambda_cen,
            lambda_mse: self.loss.lambda_mse,
            feature_mode: self.pick(label.feature_mode, self.loss.feature_mode, FeatureMode::Softmax, "feature_mode")?,
            group: self.pick(label.group, self.loss.group, Group::G1, "group")?,
        };
        loss.validate()?;
        Ok(Experiment {
            label,
            supervision: label.supervision,
            loss,
        })
    }
}

/// One row of the training log. Loss values are per-pixel means over the epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub pce: f64,
    pub cen: Option<f64>,
    pub mse: Option<f64>,
    pub miou_val: Option<f64>,
}

pub const LOG_HEADER: &str = "epoch,L,L_pce,L_cen,L_mse,miou_val";

impl EpochRecord {
    pub fn csv_row(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        format!(
            "{},{},{},{},{},{}",
            self.epoch,
            self.loss,
            self.pce,
            opt(self.cen),
            opt(self.mse),
            opt(self.miou_val)
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub label: String,
    pub group: Group,
    pub feature_mode: FeatureMode,
    /// mIOU of the training targets against the full masks, pooled over the training set.
    pub wmiou: f64,
    pub epochs: usize,
    pub seed: u64,
    pub samples: usize,
    pub final_loss: f64,
}

#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub network: Network,
    pub log: Vec<EpochRecord>,
    pub summary: TrainSummary,
}

/// Kaiming-normal initialization of every convolution and linear weight.
pub fn init_weights(network: &mut Network, seed: u64) {
    network.init_weights(seed);
}

/// Training targets for the partial cross-entropy, one per sample.
pub fn pce_targets(dataset: &Dataset, supervision: Supervision) -> Result<Vec<LabelMask>> {
    dataset
        .samples
        .iter()
        .map(|s| match supervision {
            Supervision::Full => Ok(s.full.clone()),
            Supervision::Scribbles { superpixels: None, .. } => Ok(s.scribbles.clone()),
            Supervision::Scribbles {
                superpixels: Some(n), ..
            } => pseudo_mask(s, n),
        })
        .collect()
}

/// Pooled mIOU of weak masks against the full masks.
pub fn pooled_wmiou(weak: &[LabelMask], dataset: &Dataset) -> Result<f64> {
    let mut cm = ConfusionMatrix::new(dataset.class_count);
    for (w, s) in weak.iter().zip(&dataset.samples) {
        cm.merge(&confusion(w, &s.full)?)?;
    }
    miou(&cm)
}

struct Adam {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
    lr: f64,
}

impl Adam {
    fn new(net: &Network, lr: f64) -> Self {
        let zeros: Vec<Vec<f64>> = net.parameters().iter().map(|p| vec![0.0; p.value.numel()]).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            t: 0,
            lr,
        }
    }

    fn step(&mut self, net: &mut Network, grads: &[Option<&[f64]>]) {
        self.t += 1;
        let c1 = 1.0 - ADAM_BETA1.powi(self.t);
        let c2 = 1.0 - ADAM_BETA2.powi(self.t);
        for (i, p) in net.parameters_mut().iter_mut().enumerate() {
            let Some(g) = grads[i] else { continue };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (((w, &gi), mi), vi) in p.value.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = ADAM_BETA1 * *mi + (1.0 - ADAM_BETA1) * gi;
                *vi = ADAM_BETA2 * *vi + (1.0 - ADAM_BETA2) * gi * gi;
                *w -= self.lr * (*mi / c1) / ((*vi / c2).sqrt() + ADAM_EPS);
            }
        }
    }
}

fn mix(seed: u64, a: u64, b: u64) -> u64 {
    let mut z = seed ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ b.wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// `N × 3 × H × W` normalised-RGB constant for a batch.
pub fn nrgb_tensor(images: &[&Image]) -> Result<Tensor> {
    let (h, w) = (images[0].height(), images[0].width());
    let mut data = Vec::with_capacity(images.len() * 3 * h * w);
    for img in images {
        data.extend_from_slice(normalized_rgb(img).planar());
    }
    Ok(Tensor::new(vec![images.len(), 3, h, w], data)?)
}

/// Builds the network for a dataset and configuration.
pub fn build_network(dataset: &Dataset, config: &TrainConfig, feature_mode: FeatureMode) -> Result<Network> {
    let (h, w) = dataset.image_size()?;
    Network::new(NetworkConfig {
        scales: config.network.scales,
        base_channels: config.network.base_channels,
        class_count: dataset.class_count,
        feature_mode,
        f_int: config.network.f_int,
        input_height: h,
        input_width: w,
        centroid_hidden: config.network.centroid_hidden,
    })
}

/// Trains from scratch. `on_epoch` sees every log row as soon as it is complete.
///
/// Full masks enter the loss only under `E-FULL`; otherwise they are used for the wmIOU summary
/// and, through `val`, for validation mIOU.
pub fn train(
    dataset: &Dataset,
    config: &TrainConfig,
    val: Option<&Dataset>,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainedModel> {
    let exp = config.resolve()?;
    if let (Supervision::Scribbles { width, .. }, Some(data_width)) = (exp.supervision, dataset.scribble_width) {
        if width != data_width {
            return Err(Error::InvalidArgument(format!(
                "label {} asks for width-{width} scribbles but the dataset holds width-{data_width} scribbles",
                config.experiment_label
            )));
        }
    }
    let targets = pce_targets(dataset, exp.supervision)?;
    let wmiou = pooled_wmiou(&targets, dataset)?;
    let mut net = build_network(dataset, config, exp.loss.feature_mode)?;
    init_weights(&mut net, config.seed);
    let mut adam = Adam::new(&net, config.learning_rate);
    let (h, w) = dataset.image_size()?;
    let n = dataset.samples.len();
    let mut log = Vec::with_capacity(config.epochs);

    for epoch in 1..=config.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix(config.seed, epoch as u64, 0)));
        let (mut pce_acc, mut cen_acc, mut mse_acc, mut batches) = (0.0, 0.0, 0.0, 0usize);
        for batch in order.chunks(config.batch_size) {
            let mut images = Vec::with_capacity(batch.len());
            let mut pce_masks = Vec::with_capacity(batch.len());
            let mut scribbles = Vec::with_capacity(batch.len());
            for &i in batch {
                let s = &dataset.samples[i];
                let (img, masks) = if config.augment {
                    let (img, masks) = augment(
                        &s.image,
                        &[targets[i].clone(), s.scribbles.clone()],
                        mix(config.seed, epoch as u64, i as u64 + 1),
                    )?;
                    if img.height() == h && img.width() == w {
                        (img, masks)
                    } else {
                        (s.image.clone(), vec![targets[i].clone(), s.scribbles.clone()])
                    }
                } else {
                    (s.image.clone(), vec![targets[i].clone(), s.scribbles.clone()])
                };
                let [pce_mask, scr]: [LabelMask; 2] = masks.try_into().expect("two masks in, two out");
                images.push(img);
                pce_masks.push(pce_mask);
                scribbles.push(scr);
            }
            let image_refs: Vec<&Image> = images.iter().collect();
            let input = net.batch_tensor(&image_refs)?;
            let batch_targets = BatchTargets::new(
                &pce_masks.iter().collect::<Vec<_>>(),
                &scribbles.iter().collect::<Vec<_>>(),
            )?;
            let mut graph = Graph::new();
            let pass = net.forward_graph(&mut graph, &input, Mode::Train)?;
            let nrgb = match exp.loss.feature_mode {
                FeatureMode::Softmax => None,
                FeatureMode::SoftmaxNrgb => Some(graph.constant(nrgb_tensor(&image_refs)?)?),
            };
            let nodes = loss_graph(&mut graph, &exp.loss, pass.seg, pass.centroids, nrgb, &batch_targets)?;
            let grads = graph.backward(nodes.total)?;
            let param_grads: Vec<Option<&[f64]>> = pass.params.iter().map(|v| v.and_then(|v| grads.get(v))).collect();
            adam.step(&mut net, &param_grads);
            net.update_running_stats(&pass.batch_stats);

            let bsz = batch.len() as f64;
            let labelled = pce_masks.iter().map(|m| m.labelled_count()).sum::<usize>().max(1) as f64;
            let scribbled = scribbles.iter().map(|m| m.labelled_count()).sum::<usize>().max(1) as f64;
            let item = |v| graph.value(v).item().expect("scalar loss");
            pce_acc += item(nodes.pce) * bsz / labelled;
            if let Some(c) = nodes.cen {
                cen_acc += item(c) * bsz / scribbled;
            }
            if let Some(m) = nodes.mse {
                mse_acc += item(m);
            }
            batches += 1;
        }
        let b = batches as f64;
        let pce = pce_acc / b;
        let cen = exp.loss.group.uses_centroids().then_some(cen_acc / b);
        let mse = (exp.loss.group == Group::G3).then_some(mse_acc / b);
        let loss = pce + exp.loss.lambda_cen * cen.unwrap_or(0.0) + exp.loss.lambda_mse * mse.unwrap_or(0.0);
        if !loss.is_finite() {
            return Err(Error::Autodiff(crate::autodiff::AutodiffError::NonFinite { op: "training loss" }));
        }
        let miou_val = match val {
            Some(v) => Some(evaluate(&net, v, false)?.seg.miou),
            None => None,
        };
        let record = EpochRecord {
            epoch,
            loss,
            pce,
            cen,
            mse,
            miou_val,
        };
        on_epoch(&record);
        log.push(record);
    }
    let summary = TrainSummary {
        label: config.experiment_label.clone(),
        group: exp.loss.group,
        feature_mode: exp.loss.feature_mode,
        wmiou,
        epochs: config.epochs,
        seed: config.seed,
        samples: n,
        final_loss: log.last().map_or(f64::NAN, |r| r.loss),
    };
    Ok(TrainedModel {
        network: net,
        log,
        summary,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerImageSummary {
    /// Mean over images of each image's own mIOU.
    pub seg_miou_mean: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub clu_miou_mean: Option<f64>,
}

/// Metrics of the segmentation output and, when requested, of the clustering output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
    pub samples: usize,
    pub seg: MetricsReport,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub clu: Option<MetricsReport>,
    pub per_image: PerImageSummary,
}

/// Evaluates `network` on every sample; metrics are computed on the pooled confusion matrix.
pub fn evaluate(network: &Network, dataset: &Dataset, with_clustering: bool) -> Result<Evaluation> {
    let c = network.config().class_count;
    if dataset.class_count != c {
        return Err(Error::InvalidArgument(format!(
            "checkpoint has {c} classes, dataset has {}",
            dataset.class_count
        )));
    }
    let nrgb_mode = network.config().feature_mode == FeatureMode::SoftmaxNrgb;
    let mut seg_cm = ConfusionMatrix::new(c);
    let mut clu_cm = ConfusionMatrix::new(c);
    let (mut seg_sum, mut clu_sum) = (0.0, 0.0);
    for chunk in dataset.samples.chunks(EVAL_CHUNK) {
        let images: Vec<&Image> = chunk.iter().map(|s| &s.image).collect();
        let outputs = network.forward(&images)?;
        for (s, (seg, centroids)) in chunk.iter().zip(&outputs) {
            let cm = confusion(&predict_labels_from_segmentation(seg), &s.full)?;
            seg_sum += miou(&cm)?;
            seg_cm.merge(&cm)?;
            if with_clustering {
                let nrgb = nrgb_mode.then(|| normalized_rgb(&s.image));
                let features = PixelFeatures::from_segmentation(seg, nrgb.as_ref())?;
                let cm = confusion(&predict_labels_from_clustering(&features, centroids)?, &s.full)?;
                clu_sum += miou(&cm)?;
                clu_cm.merge(&cm)?;
            }
        }
    }
    let n = dataset.samples.len() as f64;
    Ok(Evaluation {
        label: None,
        samples: dataset.samples.len(),
        seg: MetricsReport::from_confusion(&seg_cm)?,
        clu: if with_clustering {
            Some(MetricsReport::from_confusion(&clu_cm)?)
        } else {
            None
        },
        per_image: PerImageSummary {
            seg_miou_mean: seg_sum / n,
            clu_miou_mean: with_clustering.then_some(clu_sum / n),
        },
    })
}

pub const CHECKPOINT_NAME: &str = "final";
pub const LOG_NAME: &str = "train_log.csv";
pub const SUMMARY_NAME: &str = "train_summary.json";
pub const METRICS_NAME: &str = "metrics.json";
pub const CONFIG_NAME: &str = "config.toml";

fn write_file(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Trains and writes the checkpoint, log, summary and resolved config into `out`.
pub fn train_to_dir(
    dataset: &Dataset,
    config: &TrainConfig,
    val: Option<&Dataset>,
    out: &Path,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainedModel> {
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let log_path = out.join(LOG_NAME);
    let mut csv = format!("{LOG_HEADER}\n");
    write_file(&log_path, &csv)?;
    let mut write_error = None;
    let model = train(dataset, config, val, |r| {
        on_epoch(r);
        csv.push_str(&r.csv_row());
        csv.push('\n');
        if let Err(e) = write_file(&log_path, &csv) {
            write_error.get_or_insert(e);
        }
    })?;
    if let Some(e) = write_error {
        return Err(e);
    }
    let meta = BTreeMap::from([
        ("label".to_string(), model.summary.label.clone()),
        ("group".to_string(), format!("{:?}", model.summary.group)),
        ("seed".to_string(), config.seed.to_string()),
        ("epochs".to_string(), config.epochs.to_string()),
    ]);
    model.network.save(&out.join(CHECKPOINT_NAME), &meta)?;
    let summary = serde_json::to_string_pretty(&model.summary).map_err(|e| Error::Config(e.to_string()))?;
    write_file(&out.join(SUMMARY_NAME), &summary)?;
    write_file(&out.join(CONFIG_NAME), &config.to_toml()?)?;
    Ok(model)
}

/// Evaluates a checkpoint written by [`train_to_dir`]. Clustering metrics are included for G2/G3
/// runs, and the training wmIOU is attached when the run summary sits next to the checkpoint.
pub fn evaluate_checkpoint(checkpoint: &Path, dataset: &Dataset) -> Result<Evaluation> {
    let (net, meta) = Network::load(checkpoint)?;
    let clustering = matches!(meta.get("group").map(String::as_str), Some("G2" | "G3"));
    let mut eval = evaluate(&net, dataset, clustering)?;
    eval.label = meta.get("label").cloned();
    let summary_path = checkpoint.with_file_name(SUMMARY_NAME);
    if summary_path.exists() {
        let text = std::fs::read_to_string(&summary_path).map_err(|e| Error::io(&summary_path, e))?;
        let summary: TrainSummary = serde_json::from_str(&text).map_err(|e| Error::Manifest {
            path: summary_path.clone(),
            message: e.to_string(),
        })?;
        eval.seg.wmiou = Some(summary.wmiou);
    }
    Ok(eval)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::annotation::SceneSpec;
    use crate::dataset::{synth_dataset, SynthSpec};

    #[test]
    fn label_round_trip() {
        for s in [
            "E-FULL",
            "E-SCR20",
            "E-SCR2-SUP30",
            "E-SCR20-SUP50-N",
            "E-SCR10-SUP80-NRGB-G2",
            "E-SCR5-G3",
            "E-FULL-G1",
        ] {
            let l: ExperimentLabel = s.parse().unwrap();
            assert_eq!(l.to_string(), s);
        }
        let l: ExperimentLabel = "E-SCR20-SUP50-N".parse().unwrap();
        assert_eq!(
            l.supervision,
            Supervision::Scribbles {
                width: 20,
                superpixels: Some(50)
            }
        );
        assert_eq!(l.feature_mode, Some(FeatureMode::Softmax));
        assert_eq!(l.group, None);
    }

    #[test]
    fn bad_labels() {
        for s in [
            "SCR20",
            "E-SCR3",
            "E-SCR20-SUP40",
            "E-SCR20-X",
            "E-SCR20-G2-N",
            "E-SCR20-N-N",
            "E-",
            "E-SCRx",
        ] {
            assert!(s.parse::<ExperimentLabel>().is_err(), "{s}");
        }
    }

    #[test]
    fn config_resolution() {
        let cfg = TrainConfig::from_toml(
            r#"
experiment_label = "E-SCR20-SUP50-NRGB"
epochs = 3
[loss]
lambda_cen = 0.5
group = "G2"
[network]
base_channels = 8
"#,
        )
        .unwrap();
        let exp = cfg.resolve().unwrap();
        assert_eq!(exp.loss.group, Group::G2);
        assert_eq!(exp.loss.feature_mode, FeatureMode::SoftmaxNrgb);
        assert_eq!(exp.loss.lambda_cen, 0.5);
        assert_eq!(cfg.network.base_channels, 8);
        assert_eq!(cfg.learning_rate, 1e-4);
        assert_eq!(TrainConfig::from_toml(&cfg.to_toml().unwrap()).unwrap(), cfg);

        let conflict = "experiment_label = \"E-SCR20-G3\"\n[loss]\ngroup = \"G1\"\n";
        assert!(matches!(TrainConfig::from_toml(conflict), Err(Error::Config(_))));
        assert!(TrainConfig::from_toml("epochs = 0\n").is_err());
        assert!(TrainConfig::from_toml("unknown_key = 1\n").is_err());
    }

    fn tiny_data(count: usize, seed: u64) -> Dataset {
        synth_dataset(&SynthSpec {
            scene: SceneSpec::new(16, 16, 2),
            count,
            scribble_width: 2,
            seed,
        })
        .unwrap()
    }

    fn tiny_config(label: &str) -> TrainConfig {
        TrainConfig {
            experiment_label: label.into(),
            learning_rate: 1e-2,
            epochs: 2,
            batch_size: 2,
            seed: 3,
            augment: true,
            loss: LossSection::default(),
            network: NetworkSection {
                scales: 2,
                base_channels: 2,
                f_int: 1,
                centroid_hidden: 4,
            },
        }
    }

    #[test]
    fn g1_log_has_no_centroid_columns() {
        let data = tiny_data(4, 1);
        let model = train(&data, &tiny_config("E-SCR2-G1"), None, |_| {}).unwrap();
        assert_eq!(model.log.len(), 2);
        for r in &model.log {
            assert!(r.cen.is_none() && r.mse.is_none() && r.miou_val.is_none());
            assert!(r.csv_row().ends_with(",,,"));
        }
        let g3 = train(&data, &tiny_config("E-SCR2-SUP30-G3"), Some(&data), |_| {}).unwrap();
        assert!(g3.log.iter().all(|r| r.cen.is_some() && r.mse.is_some() && r.miou_val.is_some()));
    }

    #[test]
    fn training_is_deterministic() {
        let data = tiny_data(3, 2);
        let cfg = tiny_config("E-SCR2-SUP30-NRGB-G3");
        let a = train(&data, &cfg, None, |_| {}).unwrap();
        let b = train(&data, &cfg, None, |_| {}).unwrap();
        assert_eq!(a.log, b.log);
        assert_eq!(a.network, b.network);
    }

    #[test]
    fn full_masks_do_not_leak_into_weak_training() {
        let data = tiny_data(3, 4);
        let mut scrambled = data.clone();
        for s in &mut scrambled.samples {
            let flipped = s.full.labels().iter().map(|l| l.map(|c| 1 - c)).collect();
            s.full = LabelMask::new(16, 16, 2, flipped).unwrap();
        }
        let cfg = tiny_config("E-SCR2-G2");
        let a = train(&data, &cfg, None, |_| {}).unwrap();
        let b = train(&scrambled, &cfg, None, |_| {}).unwrap();
        assert_eq!(a.network, b.network);
        let full = tiny_config("E-FULL");
        assert_ne!(
            train(&data, &full, None, |_| {}).unwrap().network,
            train(&scrambled, &full, None, |_| {}).unwrap().network
        );
    }

    #[test]
    fn one_step_moves_the_centroid_subnet() {
        let data = tiny_data(2, 5);
        let mut cfg = tiny_config("E-SCR2-G2");
        cfg.epochs = 1;
        cfg.batch_size = 2;
        let model = train(&data, &cfg, None, |_| {}).unwrap();
        let mut fresh = build_network(&data, &cfg, FeatureMode::Softmax).unwrap();
        init_weights(&mut fresh, cfg.seed);
        for name in ["cen0.weight", "cen2.weight", "cen2.bn.beta"] {
            assert_ne!(
                model.network.parameter(name).unwrap().value,
                fresh.parameter(name).unwrap().value,
                "{name}"
            );
        }
    }

    #[test]
    fn width_mismatch_is_rejected() {
        let data = tiny_data(2, 6);
        assert!(matches!(
            train(&data, &tiny_config("E-SCR20"), None, |_| {}),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn run_directory_round_trip() {
        let data = tiny_data(3, 7);
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_config("E-SCR2-SUP30-N-G3");
        let model = train_to_dir(&data, &cfg, None, dir.path(), |_| {}).unwrap();
        let log = std::fs::read_to_string(dir.path().join(LOG_NAME)).unwrap();
        assert_eq!(log.lines().next(), Some(LOG_HEADER));
        assert_eq!(log.lines().count(), cfg.epochs + 1);
        let eval = evaluate_checkpoint(&dir.path().join(CHECKPOINT_NAME), &data).unwrap();
        assert!(eval.clu.is_some());
        assert_eq!(eval.seg.wmiou, Some(model.summary.wmiou));
        assert_eq!(eval.label.as_deref(), Some("E-SCR2-SUP30-N-G3"));
        assert_eq!(evaluate_checkpoint(&dir.path().join(CHECKPOINT_NAME), &data).unwrap(), eval);
        assert_eq!(evaluate(&model.network, &data, true).unwrap().seg, {
            let mut s = eval.seg.clone();
            s.wmiou = None;
            s
        });
    }
}
