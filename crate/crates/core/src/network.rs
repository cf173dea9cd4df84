//! Attention-gated U-Net with a centroid sub-network, its parameter store and checkpoint format.
//!
//! Encoder level `l` works at resolution `H / 2^l` with `base · 2^l` channels. Each level is a
//! conv-skip block: two 3×3 conv + batch-norm + relu layers plus a 1×1 projection of the block
//! input added to the result. The decoder upsamples, refines with conv + batch-norm + relu, gates
//! the encoder skip features with an attention gate driven by the upsampled signal, concatenates
//! and applies another conv-skip block. A 1×1 head and softmax give `P_seg`.
//!
//! The centroid sub-network global-average-pools the deepest encoder features and applies three
//! linear + batch-norm + relu layers; the last one emits `C · M` values reshaped to `C × M`.
//!
//! # Checkpoint layout
//!
//! ```text
//! WSSS-CHECKPOINT v1
//! config <NetworkConfig as one-line JSON>
//! meta <key> <value>            (zero or more)
//! param <name> <d0,d1,...|scalar> <byte offset>
//! ...
//! end
//! <little-endian f64 data; offsets are relative to the first byte after "end\n">
//! ```

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{AutodiffError, BatchStats, Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::losses::{argmax, FeatureMode};
use crate::types::{Centroids, Image, LabelMask, PixelFeatures, SegmentationOutput};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;
const CHECKPOINT_MAGIC: &str = "WSSS-CHECKPOINT v1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetworkConfig {
    pub scales: usize,
    pub base_channels: usize,
    pub class_count: usize,
    pub feature_mode: FeatureMode,
    /// Intermediate width of the attention gates.
    pub f_int: usize,
    pub input_height: usize,
    pub input_width: usize,
    /// Width of the two hidden layers of the centroid sub-network.
    pub centroid_hidden: usize,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            scales: 3,
            base_channels: 16,
            class_count: 4,
            feature_mode: FeatureMode::Softmax,
            f_int: 1,
            input_height: 64,
            input_width: 64,
            centroid_hidden: 64,
        }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        let step = 1usize
            .checked_shl(self.scales.saturating_sub(1) as u32)
            .unwrap_or(0);
        if self.scales < 2
            || self.base_channels == 0
            || self.f_int == 0
            || self.centroid_hidden == 0
            || !(2..=255).contains(&self.class_count)
        {
            return Err(Error::Config(format!(
                "invalid network configuration: {self:?} (scales ≥ 2, positive widths, 2 to 255 classes)"
            )));
        }
        if step == 0
            || self.input_height == 0
            || self.input_width == 0
            || !self.input_height.is_multiple_of(step)
            || !self.input_width.is_multiple_of(step)
        {
            return Err(Error::Config(format!(
                "input {}x{} must be divisible by 2^(scales-1) = {step}",
                self.input_height, self.input_width
            )));
        }
        Ok(())
    }

    /// Centroid dimension `M`.
    pub fn centroid_dim(&self) -> usize {
        self.feature_mode.dim(self.class_count)
    }

    pub fn channels(&self, level: usize) -> usize {
        self.base_channels << level
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics in batch norm; parameters are differentiable leaves.
    Train,
    /// Running statistics in batch norm; parameters are constants.
    Eval,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    /// Kaiming-normal weight with the given fan-in.
    Weight { fan_in: usize },
    Bias,
    BnScale,
    BnShift,
    RunningMean,
    RunningVar,
}

impl ParamKind {
    pub fn trainable(self) -> bool {
        !matches!(self, ParamKind::RunningMean | ParamKind::RunningVar)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub kind: ParamKind,
    pub value: Tensor,
}

/// Graph handles of the attention-gate parameters.
#[derive(Debug, Clone, Copy)]
pub struct GateVars {
    /// `F_int × F_l × 1 × 1`, no bias.
    pub w_x: Var,
    /// `F_int × F_g × 1 × 1`.
    pub w_g: Var,
    /// `F_int`.
    pub b_g: Var,
    /// `1 × F_int × 1 × 1`.
    pub w_phi: Var,
    /// `1`.
    pub b_phi: Var,
}

/// Gates skip features `x` with the gating signal `g` (already at `x`'s resolution).
///
/// Returns the gated features and the `N × 1 × H × W` coefficients
/// `α = sigmoid(W_phi · relu(W_x · x + W_g · g + b_g) + b_phi)`.
pub fn attention_gate(graph: &mut Graph, x: Var, g: Var, p: &GateVars) -> Result<(Var, Var), AutodiffError> {
    let (sx, sg) = (graph.shape(x), graph.shape(g));
    if sx.len() != 4 || sg.len() != 4 || sx[0] != sg[0] || sx[2..] != sg[2..] {
        return Err(AutodiffError::ShapeMismatch {
            op: "attention_gate",
            detail: format!("skip {sx:?} vs gating {sg:?}"),
        });
    }
    let theta = graph.conv2d(x, p.w_x, None)?;
    let phi = graph.conv2d(g, p.w_g, Some(p.b_g))?;
    let sum = graph.add(theta, phi)?;
    let act = graph.relu(sum)?;
    let psi = graph.conv2d(act, p.w_phi, Some(p.b_phi))?;
    let alpha = graph.sigmoid(psi)?;
    let gated = graph.mul(x, alpha)?;
    Ok((gated, alpha))
}

/// Graph nodes produced by one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardPass {
    /// `N × C × H × W` softmax probabilities.
    pub seg: Var,
    /// `N × C × M` centroids.
    pub centroids: Var,
    /// One handle per parameter, aligned with [`Network::parameters`]; running statistics have none.
    pub params: Vec<Option<Var>>,
    /// Batch statistics of every batch norm in train mode, keyed by the running-mean parameter index.
    pub batch_stats: Vec<(usize, BatchStats)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    config: NetworkConfig,
    params: Vec<Parameter>,
    index: BTreeMap<String, usize>,
}

struct Builder<'a> {
    params: &'a mut Vec<Parameter>,
}

impl Builder<'_> {
    fn add(&mut self, name: String, kind: ParamKind, shape: Vec<usize>) {
        let value = match kind {
            ParamKind::BnScale | ParamKind::RunningVar => Tensor::filled(shape, 1.0),
            _ => Tensor::zeros(shape),
        };
        self.params.push(Parameter { name, kind, value });
    }

    fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize, bias: bool) {
        self.add(
            format!("{name}.weight"),
            ParamKind::Weight { fan_in: cin * k * k },
            vec![cout, cin, k, k],
        );
        if bias {
            self.add(format!("{name}.bias"), ParamKind::Bias, vec![cout]);
        }
    }

    fn linear(&mut self, name: &str, fin: usize, fout: usize) {
        self.add(format!("{name}.weight"), ParamKind::Weight { fan_in: fin }, vec![fout, fin]);
    }

    fn bn(&mut self, name: &str, c: usize) {
        self.add(format!("{name}.gamma"), ParamKind::BnScale, vec![c]);
        self.add(format!("{name}.beta"), ParamKind::BnShift, vec![c]);
        self.add(format!("{name}.running_mean"), ParamKind::RunningMean, vec![c]);
        self.add(format!("{name}.running_var"), ParamKind::RunningVar, vec![c]);
    }

    fn conv_skip(&mut self, name: &str, cin: usize, cout: usize) {
        self.conv(&format!("{name}.conv1"), cin, cout, 3, false);
        self.bn(&format!("{name}.bn1"), cout);
        self.conv(&format!("{name}.conv2"), cout, cout, 3, false);
        self.bn(&format!("{name}.bn2"), cout);
        self.conv(&format!("{name}.proj"), cin, cout, 1, true);
    }

    fn gate(&mut self, name: &str, fl: usize, fg: usize, f_int: usize) {
        self.add(format!("{name}.w_x"), ParamKind::Weight { fan_in: fl }, vec![f_int, fl, 1, 1]);
        self.add(format!("{name}.w_g"), ParamKind::Weight { fan_in: fg }, vec![f_int, fg, 1, 1]);
        self.add(format!("{name}.b_g"), ParamKind::Bias, vec![f_int]);
        self.add(format!("{name}.w_phi"), ParamKind::Weight { fan_in: f_int }, vec![1, f_int, 1, 1]);
        self.add(format!("{name}.b_phi"), ParamKind::Bias, vec![1]);
    }
}

/// Forward-pass state: the graph plus parameter handles.
struct Pass<'a> {
    net: &'a Network,
    graph: &'a mut Graph,
    mode: Mode,
    vars: Vec<Option<Var>>,
    stats: Vec<(usize, BatchStats)>,
}

impl Pass<'_> {
    fn var(&self, name: &str) -> Var {
        let i = self.net.index[name];
        self.vars[i].expect("trainable parameter registered")
    }

    fn conv(&mut self, name: &str, x: Var, bias: bool) -> Result<Var, AutodiffError> {
        let w = self.var(&format!("{name}.weight"));
        let b = bias.then(|| self.var(&format!("{name}.bias")));
        self.graph.conv2d(x, w, b)
    }

    fn bn(&mut self, name: &str, x: Var) -> Result<Var, AutodiffError> {
        let gamma = self.var(&format!("{name}.gamma"));
        let beta = self.var(&format!("{name}.beta"));
        let mean_idx = self.net.index[&format!("{name}.running_mean")];
        match self.mode {
            Mode::Train => {
                let (out, stats) = self.graph.batch_norm_train(x, gamma, beta, BN_EPS)?;
                self.stats.push((mean_idx, stats));
                Ok(out)
            }
            Mode::Eval => {
                let mean = self.net.params[mean_idx].value.data();
                let var = self.net.params[mean_idx + 1].value.data();
                self.graph.batch_norm_eval(x, gamma, beta, mean, var, BN_EPS)
            }
        }
    }

    fn conv_bn_relu(&mut self, conv: &str, bn: &str, x: Var) -> Result<Var, AutodiffError> {
        let c = self.conv(conv, x, false)?;
        let b = self.bn(bn, c)?;
        self.graph.relu(b)
    }

    fn conv_skip(&mut self, name: &str, x: Var) -> Result<Var, AutodiffError> {
        let h = self.conv_bn_relu(&format!("{name}.conv1"), &format!("{name}.bn1"), x)?;
        let h = self.conv_bn_relu(&format!("{name}.conv2"), &format!("{name}.bn2"), h)?;
        let proj = self.conv(&format!("{name}.proj"), x, true)?;
        self.graph.add(h, proj)
    }

    fn gate_vars(&self, name: &str) -> GateVars {
        GateVars {
            w_x: self.var(&format!("{name}.w_x")),
            w_g: self.var(&format!("{name}.w_g")),
            b_g: self.var(&format!("{name}.b_g")),
            w_phi: self.var(&format!("{name}.w_phi")),
            b_phi: self.var(&format!("{name}.b_phi")),
        }
    }
}

impl Network {
    /// Builds the parameter layout with zero weights, unit batch-norm scales and unit running variances.
    pub fn new(config: NetworkConfig) -> Result<Self> {
        config.validate()?;
        let mut params = Vec::new();
        let mut b = Builder { params: &mut params };
        let levels = config.scales;
        for l in 0..levels {
            let cin = if l == 0 { 3 } else { config.channels(l - 1) };
            b.conv_skip(&format!("enc{l}"), cin, config.channels(l));
        }
        for l in (0..levels - 1).rev() {
            let (fl, fc) = (config.channels(l), config.channels(l + 1));
            b.conv(&format!("dec{l}.up"), fc, fl, 3, false);
            b.bn(&format!("dec{l}.up_bn"), fl);
            b.gate(&format!("dec{l}.gate"), fl, fl, config.f_int);
            b.conv_skip(&format!("dec{l}.block"), 2 * fl, fl);
        }
        b.conv("head", config.channels(0), config.class_count, 1, true);
        let deepest = config.channels(levels - 1);
        let out = config.class_count * config.centroid_dim();
        let widths = [deepest, config.centroid_hidden, config.centroid_hidden, out];
        for i in 0..3 {
            b.linear(&format!("cen{i}"), widths[i], widths[i + 1]);
            b.bn(&format!("cen{i}.bn"), widths[i + 1]);
        }
        let index = params.iter().enumerate().map(|(i, p)| (p.name.clone(), i)).collect();
        Ok(Self { config, params, index })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn parameters(&self) -> &[Parameter] {
        &self.params
    }

    pub fn parameters_mut(&mut self) -> &mut [Parameter] {
        &mut self.params
    }

    pub fn parameter(&self, name: &str) -> Option<&Parameter> {
        self.index.get(name).map(|&i| &self.params[i])
    }

    pub fn trainable_count(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.kind.trainable())
            .map(|p| p.value.numel())
            .sum()
    }

    /// Kaiming-normal weights (std `sqrt(2 / fan_in)`), zero biases and shifts, unit scales,
    /// and reset running statistics.
    pub fn init_weights(&mut self, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for p in &mut self.params {
            let fill = match p.kind {
                ParamKind::Weight { fan_in } => {
                    let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
                    p.value.data_mut().iter_mut().for_each(|v| *v = normal.sample(&mut rng));
                    continue;
                }
                ParamKind::BnScale | ParamKind::RunningVar => 1.0,
                ParamKind::Bias | ParamKind::BnShift | ParamKind::RunningMean => 0.0,
            };
            p.value.data_mut().iter_mut().for_each(|v| *v = fill);
        }
    }

    /// Folds training-mode batch statistics into the running statistics.
    pub fn update_running_stats(&mut self, stats: &[(usize, BatchStats)]) {
        for (mean_idx, s) in stats {
            for (r, b) in self.params[*mean_idx].value.data_mut().iter_mut().zip(&s.mean) {
                *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b;
            }
            for (r, b) in self.params[mean_idx + 1].value.data_mut().iter_mut().zip(&s.var) {
                *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b;
            }
        }
    }

    /// Stacks images into an `N × 3 × H × W` tensor after checking the configured input size.
    pub fn batch_tensor(&self, images: &[&Image]) -> Result<Tensor> {
        if images.is_empty() {
            return Err(Error::InvalidArgument("empty image batch".into()));
        }
        let (h, w) = (self.config.input_height, self.config.input_width);
        let mut data = Vec::with_capacity(images.len() * 3 * h * w);
        for img in images {
            if img.height() != h || img.width() != w {
                return Err(Error::DimensionMismatch(format!(
                    "network expects {h}x{w} input, got {}x{}",
                    img.height(),
                    img.width()
                )));
            }
            data.extend_from_slice(img.planar());
        }
        Ok(Tensor::new(vec![images.len(), 3, h, w], data)?)
    }

    /// Records the forward pass of `input` (`N × 3 × H × W`) on `graph`.
    pub fn forward_graph(&self, graph: &mut Graph, input: &Tensor, mode: Mode) -> Result<ForwardPass, AutodiffError> {
        let cfg = &self.config;
        let shape = input.shape();
        if shape.len() != 4 || shape[1] != 3 || shape[2] != cfg.input_height || shape[3] != cfg.input_width {
            return Err(AutodiffError::ShapeMismatch {
                op: "forward",
                detail: format!(
                    "input {shape:?} vs expected [N, 3, {}, {}]",
                    cfg.input_height, cfg.input_width
                ),
            });
        }
        let n = shape[0];
        let mut vars = Vec::with_capacity(self.params.len());
        for p in &self.params {
            vars.push(match (p.kind.trainable(), mode) {
                (false, _) => None,
                (true, Mode::Train) => Some(graph.param(p.value.clone())?),
                (true, Mode::Eval) => Some(graph.constant(p.value.clone())?),
            });
        }
        let mut pass = Pass {
            net: self,
            graph,
            mode,
            vars,
            stats: Vec::new(),
        };

        let x = pass.graph.constant(input.clone())?;
        let mut skips = Vec::with_capacity(cfg.scales);
        let mut h = x;
        for l in 0..cfg.scales {
            if l > 0 {
                h = pass.graph.max_pool2(h)?;
            }
            h = pass.conv_skip(&format!("enc{l}"), h)?;
            skips.push(h);
        }
        let deepest = h;
        for l in (0..cfg.scales - 1).rev() {
            let up = pass.graph.upsample2(h)?;
            let up = pass.conv_bn_relu(&format!("dec{l}.up"), &format!("dec{l}.up_bn"), up)?;
            let gate = pass.gate_vars(&format!("dec{l}.gate"));
            let (gated, _) = attention_gate(pass.graph, skips[l], up, &gate)?;
            let cat = pass.graph.concat(&[gated, up])?;
            h = pass.conv_skip(&format!("dec{l}.block"), cat)?;
        }
        let logits = pass.conv("head", h, true)?;
        let seg = pass.graph.softmax(logits)?;

        let mut c = pass.graph.global_avg_pool(deepest)?;
        for i in 0..3 {
            let w = pass.var(&format!("cen{i}.weight"));
            let lin = pass.graph.linear(c, w, None)?;
            let bn = pass.bn(&format!("cen{i}.bn"), lin)?;
            c = pass.graph.relu(bn)?;
        }
        let centroids = pass.graph.reshape(c, [n, cfg.class_count, cfg.centroid_dim()])?;
        Ok(ForwardPass {
            seg,
            centroids,
            params: pass.vars,
            batch_stats: pass.stats,
        })
    }

    /// Eval-mode inference, one `(P_seg, P_cen)` pair per image.
    pub fn forward(&self, images: &[&Image]) -> Result<Vec<(SegmentationOutput, Centroids)>> {
        let input = self.batch_tensor(images)?;
        let mut graph = Graph::new();
        let pass = self.forward_graph(&mut graph, &input, Mode::Eval)?;
        let (c, m) = (self.config.class_count, self.config.centroid_dim());
        let (h, w) = (self.config.input_height, self.config.input_width);
        let seg = graph.value(pass.seg).data();
        let cen = graph.value(pass.centroids).data();
        let per = c * h * w;
        (0..images.len())
            .map(|i| {
                let seg = SegmentationOutput::new(c, h, w, renormalize(&seg[i * per..(i + 1) * per], c))?;
                let cen = Centroids::new(c, m, cen[i * c * m..(i + 1) * c * m].to_vec())?;
                Ok((seg, cen))
            })
            .collect()
    }

    pub fn save(&self, path: &Path, meta: &BTreeMap<String, String>) -> Result<()> {
        let mut header = format!("{CHECKPOINT_MAGIC}\n");
        let config = serde_json::to_string(&self.config).map_err(|e| Error::Checkpoint(e.to_string()))?;
        header.push_str(&format!("config {config}\n"));
        for (k, v) in meta {
            if k.contains(char::is_whitespace) || v.contains('\n') {
                return Err(Error::Checkpoint(format!("meta entry {k:?} cannot be written on one line")));
            }
            header.push_str(&format!("meta {k} {v}\n"));
        }
        let mut offset = 0;
        for p in &self.params {
            let dims = if p.value.shape().is_empty() {
                "scalar".to_string()
            } else {
                p.value.shape().iter().map(|d| d.to_string()).collect::<Vec<_>>().join(",")
            };
            header.push_str(&format!("param {} {dims} {offset}\n", p.name));
            offset += p.value.numel() * 8;
        }
        header.push_str("end\n");
        let mut bytes = header.into_bytes();
        bytes.reserve(offset);
        for p in &self.params {
            for v in p.value.data() {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        file.write_all(&bytes).map_err(|e| Error::io(path, e))
    }

    /// Loads a checkpoint and its metadata; names and shapes must match the stored configuration.
    pub fn load(path: &Path) -> Result<(Self, BTreeMap<String, String>)> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut reader = BufReader::new(file);
        let bad = |msg: String| Error::Checkpoint(format!("{}: {msg}", path.display()));
        let mut line = String::new();
        let mut next_line = |reader: &mut BufReader<std::fs::File>| -> Result<String> {
            line.clear();
            let n = reader.read_line(&mut line).map_err(|e| Error::io(path, e))?;
            if n == 0 {
                return Err(Error::Checkpoint(format!("{}: truncated header", path.display())));
            }
            Ok(line.trim_end_matches('\n').to_string())
        };
        if next_line(&mut reader)? != CHECKPOINT_MAGIC {
            return Err(bad("not a checkpoint file".into()));
        }
        let cfg_line = next_line(&mut reader)?;
        let cfg_json = cfg_line
            .strip_prefix("config ")
            .ok_or_else(|| bad("missing config line".into()))?;
        let config: NetworkConfig = serde_json::from_str(cfg_json).map_err(|e| bad(e.to_string()))?;
        let mut net = Network::new(config)?;
        let mut meta = BTreeMap::new();
        let mut entries = Vec::new();
        loop {
            let l = next_line(&mut reader)?;
            if l == "end" {
                break;
            }
            let mut parts = l.splitn(3, ' ');
            match parts.next() {
                Some("meta") => {
                    let k = parts.next().ok_or_else(|| bad("empty meta line".into()))?;
                    meta.insert(k.to_string(), parts.next().unwrap_or("").to_string());
                }
                Some("param") => {
                    let fields: Vec<&str> = l.split(' ').collect();
                    let [_, name, dims, offset] = fields[..] else {
                        return Err(bad(format!("malformed param line {l:?}")));
                    };
                    let shape: Vec<usize> = if dims == "scalar" {
                        Vec::new()
                    } else {
                        dims.split(',')
                            .map(|d| d.parse().map_err(|_| bad(format!("bad dimension in {l:?}"))))
                            .collect::<Result<_>>()?
                    };
                    let offset: usize = offset.parse().map_err(|_| bad(format!("bad offset in {l:?}")))?;
                    entries.push((name.to_string(), shape, offset));
                }
                _ => return Err(bad(format!("unexpected header line {l:?}"))),
            }
        }
        let mut data = Vec::new();
        reader.read_to_end(&mut data).map_err(|e| Error::io(path, e))?;
        if entries.len() != net.params.len() {
            return Err(bad(format!(
                "{} parameters stored, configuration needs {}",
                entries.len(),
                net.params.len()
            )));
        }
        for (name, shape, offset) in entries {
            let idx = *net
                .index
                .get(&name)
                .ok_or_else(|| bad(format!("unknown parameter {name}")))?;
            let p = &mut net.params[idx];
            if p.value.shape() != shape.as_slice() {
                return Err(bad(format!("parameter {name} has shape {shape:?}, expected {:?}", p.value.shape())));
            }
            let end = offset + p.value.numel() * 8;
            let raw = data
                .get(offset..end)
                .ok_or_else(|| bad(format!("data for {name} is truncated")))?;
            for (v, chunk) in p.value.data_mut().iter_mut().zip(raw.chunks_exact(8)) {
                *v = f64::from_le_bytes(chunk.try_into().expect("8-byte chunk"));
                if !v.is_finite() {
                    return Err(bad(format!("non-finite value in {name}")));
                }
            }
        }
        Ok((net, meta))
    }
}

/// Removes rounding drift so every pixel sums to one within the output tolerance.
fn renormalize(probs: &[f64], c: usize) -> Vec<f64> {
    let s = probs.len() / c;
    let mut out = probs.to_vec();
    for p in 0..s {
        let total: f64 = (0..c).map(|k| out[k * s + p]).sum();
        for k in 0..c {
            out[k * s + p] /= total;
        }
    }
    out
}

/// Per-pixel argmax of the class probabilities; ties go to the lowest class id.
pub fn predict_labels_from_segmentation(seg: &SegmentationOutput) -> LabelMask {
    let (c, s) = (seg.class_count(), seg.height() * seg.width());
    let labels = (0..s)
        .map(|p| Some(argmax((0..c).map(|k| seg.probability(k, p))) as u8))
        .collect();
    LabelMask::new(seg.height(), seg.width(), c, labels).expect("argmax is below the class count")
}

/// Label of the nearest centroid for every pixel feature; ties go to the lowest class id.
pub fn predict_labels_from_clustering(features: &PixelFeatures, centroids: &Centroids) -> Result<LabelMask> {
    if features.dim() != centroids.dim() {
        return Err(Error::DimensionMismatch(format!(
            "features of dimension {} vs centroids of dimension {}",
            features.dim(),
            centroids.dim()
        )));
    }
    let c = centroids.class_count();
    let labels = (0..features.pixel_count())
        .map(|p| {
            let f = features.feature(p);
            let dist = (0..c).map(|k| {
                -f.iter()
                    .zip(centroids.row(k))
                    .map(|(a, b)| (a - b).powi(2))
                    .sum::<f64>()
            });
            Some(argmax(dist) as u8)
        })
        .collect();
    LabelMask::new(features.height(), features.width(), c, labels)
}
