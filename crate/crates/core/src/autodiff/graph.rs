use super::kernels::{col2im, gemm, im2col};
use super::{AutodiffError, Tensor};

type Result<T> = std::result::Result<T, AutodiffError>;

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Per-channel statistics of one training-mode batch normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Unbiased variance, as folded into running statistics.
    pub var: Vec<f64>,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        kernel: usize,
    },
    Linear {
        input: Var,
        weight: Var,
        bias: Option<Var>,
    },
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        inv_std: Vec<f64>,
        normalized: Vec<f64>,
        train: bool,
    },
    Relu(Var),
    Sigmoid(Var),
    Softmax(Var),
    MaxPool2 {
        input: Var,
        argmax: Vec<usize>,
    },
    Upsample2(Var),
    Concat(Vec<Var>),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    GlobalAvgPool(Var),
    PairwiseSqDist {
        features: Var,
        centroids: Var,
    },
    NormalizeSum {
        input: Var,
        sums: Vec<f64>,
    },
    Gather {
        input: Var,
        index: Vec<usize>,
    },
    MaskedNll {
        probs: Var,
        labels: Vec<Option<usize>>,
        floor: f64,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients of a scalar with respect to every leaf that requires them.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient for `var`, or `None` when `var` is not a differentiable leaf reached by the loss.
    pub fn get(&self, var: Var) -> Option<&[f64]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }
}

/// Reverse-mode computation graph.
///
/// Nodes are appended in evaluation order, so a reverse sweep over the node list
/// visits every node after all of its consumers.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn ensure_finite(op: &'static str, data: &[f64]) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(AutodiffError::NonFinite { op })
    }
}

fn mismatch(op: &'static str, detail: String) -> AutodiffError {
    AutodiffError::ShapeMismatch { op, detail }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    fn push(&mut self, op_name: &'static str, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        ensure_finite(op_name, value.data())?;
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Differentiable leaf.
    pub fn param(&mut self, value: Tensor) -> Result<Var> {
        self.leaf(value, true)
    }

    /// Leaf excluded from differentiation.
    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.leaf(value, false)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Result<Var> {
        ensure_finite("leaf", value.data())?;
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// 2-D convolution, stride 1, zero padding `kernel / 2`, for odd kernel sizes.
    ///
    /// `input` is `N × Cin × H × W`, `weight` is `Cout × Cin × k × k`, `bias` is `Cout`.
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let (n, cin, h, w) = match *self.shape(input) {
            [n, c, h, w] => (n, c, h, w),
            ref s => return Err(mismatch("conv2d", format!("input must be 4-D, got {s:?}"))),
        };
        let (cout, k) = match *self.shape(weight) {
            [co, ci, k1, k2] if ci == cin && k1 == k2 && k1 % 2 == 1 => (co, k1),
            ref s => {
                return Err(mismatch(
                    "conv2d",
                    format!("weight {s:?} incompatible with {cin} input channels"),
                ))
            }
        };
        if let Some(b) = bias {
            if self.shape(b) != [cout] {
                return Err(mismatch("conv2d", format!("bias must be [{cout}]")));
            }
        }
        let hw = h * w;
        let patch = cin * k * k;
        let mut out = vec![0.0; n * cout * hw];
        let mut cols = if k == 1 { Vec::new() } else { vec![0.0; patch * hw] };
        {
            let x = self.data(input);
            let wt = self.data(weight);
            for s in 0..n {
                let xs = &x[s * cin * hw..(s + 1) * cin * hw];
                let b_mat: &[f64] = if k == 1 {
                    xs
                } else {
                    im2col(xs, cin, h, w, k, &mut cols);
                    &cols
                };
                gemm(cout, patch, hw, wt, false, b_mat, false, &mut out[s * cout * hw..(s + 1) * cout * hw], false);
            }
            if let Some(b) = bias {
                let bv = self.data(b);
                for s in 0..n {
                    for (co, &bias_v) in bv.iter().enumerate() {
                        let base = (s * cout + co) * hw;
                        out[base..base + hw].iter_mut().for_each(|v| *v += bias_v);
                    }
                }
            }
        }
        let value = Tensor::new(vec![n, cout, h, w], out)?;
        let mut inputs = vec![input, weight];
        inputs.extend(bias);
        self.push("conv2d", value, Op::Conv2d { input, weight, bias, kernel: k }, &inputs)
    }

    /// Fully connected layer: `input` is `N × in`, `weight` is `out × in`, `bias` is `out`.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let (n, fin) = match *self.shape(input) {
            [n, f] => (n, f),
            ref s => return Err(mismatch("linear", format!("input must be 2-D, got {s:?}"))),
        };
        let fout = match *self.shape(weight) {
            [o, i] if i == fin => o,
            ref s => return Err(mismatch("linear", format!("weight {s:?} vs {fin} inputs"))),
        };
        if let Some(b) = bias {
            if self.shape(b) != [fout] {
                return Err(mismatch("linear", format!("bias must be [{fout}]")));
            }
        }
        let mut out = vec![0.0; n * fout];
        gemm(n, fin, fout, self.data(input), false, self.data(weight), true, &mut out, false);
        if let Some(b) = bias {
            let bv = self.data(b);
            for row in out.chunks_mut(fout) {
                row.iter_mut().zip(bv).for_each(|(v, b)| *v += b);
            }
        }
        let value = Tensor::new(vec![n, fout], out)?;
        let mut inputs = vec![input, weight];
        inputs.extend(bias);
        self.push("linear", value, Op::Linear { input, weight, bias }, &inputs)
    }

    /// Batch normalization over every axis except the channel axis (axis 1), using batch statistics.
    pub fn batch_norm_train(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> Result<(Var, BatchStats)> {
        let (n, c, s) = self.bn_dims(input, gamma, beta)?;
        let m = (n * s) as f64;
        let x = self.data(input);
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for b in 0..n {
            for (ch, mu) in mean.iter_mut().enumerate() {
                let base = (b * c + ch) * s;
                *mu += x[base..base + s].iter().sum::<f64>();
            }
        }
        mean.iter_mut().for_each(|v| *v /= m);
        for b in 0..n {
            for (ch, (v2, mu)) in var.iter_mut().zip(&mean).enumerate() {
                let base = (b * c + ch) * s;
                *v2 += x[base..base + s].iter().map(|v| (v - mu).powi(2)).sum::<f64>();
            }
        }
        var.iter_mut().for_each(|v| *v /= m);
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let unbiased = var
            .iter()
            .map(|v| if m > 1.0 { v * m / (m - 1.0) } else { *v })
            .collect();
        let stats = BatchStats {
            mean: mean.clone(),
            var: unbiased,
        };
        let v = self.bn_apply(input, gamma, beta, &mean, inv_std, true, (n, c, s))?;
        Ok((v, stats))
    }

    /// Batch normalization with fixed (running) statistics.
    pub fn batch_norm_eval(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[f64],
        running_var: &[f64],
        eps: f64,
    ) -> Result<Var> {
        let dims = self.bn_dims(input, gamma, beta)?;
        if running_mean.len() != dims.1 || running_var.len() != dims.1 {
            return Err(mismatch("batch_norm", "running statistics length".into()));
        }
        let inv_std = running_var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        self.bn_apply(input, gamma, beta, running_mean, inv_std, false, dims)
    }

    fn bn_dims(&self, input: Var, gamma: Var, beta: Var) -> Result<(usize, usize, usize)> {
        let (n, c, s) = self
            .value(input)
            .dims3()
            .ok_or_else(|| mismatch("batch_norm", "input needs at least 2 axes".into()))?;
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(mismatch("batch_norm", format!("affine parameters must be [{c}]")));
        }
        Ok((n, c, s))
    }

    #[allow(clippy::too_many_arguments)]
    fn bn_apply(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        mean: &[f64],
        inv_std: Vec<f64>,
        train: bool,
        (n, c, s): (usize, usize, usize),
    ) -> Result<Var> {
        let x = self.data(input);
        let g = self.data(gamma);
        let bt = self.data(beta);
        let mut normalized = vec![0.0; x.len()];
        let mut out = vec![0.0; x.len()];
        for b in 0..n {
            for ch in 0..c {
                let base = (b * c + ch) * s;
                for i in base..base + s {
                    let xh = (x[i] - mean[ch]) * inv_std[ch];
                    normalized[i] = xh;
                    out[i] = g[ch] * xh + bt[ch];
                }
            }
        }
        let value = Tensor::new(self.shape(input).to_vec(), out)?;
        self.push(
            "batch_norm",
            value,
            Op::BatchNorm {
                input,
                gamma,
                beta,
                inv_std,
                normalized,
                train,
            },
            &[input, gamma, beta],
        )
    }

    fn map_unary(&mut self, name: &'static str, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        let out: Vec<f64> = self.data(x).iter().map(|&v| f(v)).collect();
        let value = Tensor::new(self.shape(x).to_vec(), out)?;
        self.push(name, value, op, &[x])
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.map_unary("relu", x, |v| v.max(0.0), Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.map_unary("sigmoid", x, stable_sigmoid, Op::Sigmoid(x))
    }

    /// Softmax along axis 1 of an `N × C × ...` tensor, with max subtraction.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let (n, c, s) = self
            .value(x)
            .dims3()
            .ok_or_else(|| mismatch("softmax", "input needs at least 2 axes".into()))?;
        let src = self.data(x);
        let mut out = vec![0.0; src.len()];
        for b in 0..n {
            let base = b * c * s;
            for p in 0..s {
                let mut max = f64::NEG_INFINITY;
                for ch in 0..c {
                    max = max.max(src[base + ch * s + p]);
                }
                let mut sum = 0.0;
                for ch in 0..c {
                    let e = (src[base + ch * s + p] - max).exp();
                    out[base + ch * s + p] = e;
                    sum += e;
                }
                for ch in 0..c {
                    out[base + ch * s + p] /= sum;
                }
            }
        }
        let value = Tensor::new(self.shape(x).to_vec(), out)?;
        self.push("softmax", value, Op::Softmax(x), &[x])
    }

    /// 2×2 max pooling with stride 2; ties resolve to the first element in raster order.
    pub fn max_pool2(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = match *self.shape(x) {
            [n, c, h, w] if h % 2 == 0 && w % 2 == 0 => (n, c, h, w),
            ref s => return Err(mismatch("max_pool2", format!("need 4-D even spatial size, got {s:?}"))),
        };
        let (oh, ow) = (h / 2, w / 2);
        let src = self.data(x);
        let mut out = vec![0.0; n * c * oh * ow];
        let mut argmax = vec![0; out.len()];
        for plane in 0..n * c {
            let ib = plane * h * w;
            let ob = plane * oh * ow;
            for y in 0..oh {
                for xx in 0..ow {
                    let mut best = ib + 2 * y * w + 2 * xx;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let j = ib + (2 * y + dy) * w + 2 * xx + dx;
                        if src[j] > src[best] {
                            best = j;
                        }
                    }
                    out[ob + y * ow + xx] = src[best];
                    argmax[ob + y * ow + xx] = best;
                }
            }
        }
        let value = Tensor::new(vec![n, c, oh, ow], out)?;
        self.push("max_pool2", value, Op::MaxPool2 { input: x, argmax }, &[x])
    }

    /// Nearest-neighbour 2× spatial upsampling.
    pub fn upsample2(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = match *self.shape(x) {
            [n, c, h, w] => (n, c, h, w),
            ref s => return Err(mismatch("upsample2", format!("need 4-D input, got {s:?}"))),
        };
        let (oh, ow) = (2 * h, 2 * w);
        let src = self.data(x);
        let mut out = vec![0.0; n * c * oh * ow];
        for plane in 0..n * c {
            for y in 0..oh {
                let srow = &src[plane * h * w + (y / 2) * w..][..w];
                let orow = &mut out[plane * oh * ow + y * ow..][..ow];
                for (xx, o) in orow.iter_mut().enumerate() {
                    *o = srow[xx / 2];
                }
            }
        }
        let value = Tensor::new(vec![n, c, oh, ow], out)?;
        self.push("upsample2", value, Op::Upsample2(x), &[x])
    }

    /// Concatenation along axis 1; all inputs must agree on every other axis.
    pub fn concat(&mut self, inputs: &[Var]) -> Result<Var> {
        let first = *inputs
            .first()
            .ok_or_else(|| mismatch("concat", "no inputs".into()))?;
        let shape0 = self.shape(first).to_vec();
        if shape0.len() < 2 {
            return Err(mismatch("concat", "inputs need at least 2 axes".into()));
        }
        let mut channels = 0;
        for &v in inputs {
            let s = self.shape(v);
            if s.len() != shape0.len() || s[0] != shape0[0] || s[2..] != shape0[2..] {
                return Err(mismatch("concat", format!("{s:?} vs {shape0:?}")));
            }
            channels += s[1];
        }
        let n = shape0[0];
        let rest: usize = shape0[2..].iter().product();
        let mut out = Vec::with_capacity(n * channels * rest);
        for b in 0..n {
            for &v in inputs {
                let c = self.shape(v)[1];
                out.extend_from_slice(&self.data(v)[b * c * rest..(b + 1) * c * rest]);
            }
        }
        let mut shape = shape0;
        shape[1] = channels;
        let value = Tensor::new(shape, out)?;
        self.push("concat", value, Op::Concat(inputs.to_vec()), inputs)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(mismatch("add", format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        let out = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x + y).collect();
        let value = Tensor::new(self.shape(a).to_vec(), out)?;
        self.push("add", value, Op::Add(a, b), &[a, b])
    }

    /// Elementwise product; `b` may have a single channel (axis 1) broadcast across `a`'s channels.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b);
        let out: Vec<f64> = if sa == sb {
            self.data(a).iter().zip(self.data(b)).map(|(x, y)| x * y).collect()
        } else if sa.len() >= 2 && sb.len() == sa.len() && sb[1] == 1 && sb[0] == sa[0] && sb[2..] == sa[2..] {
            let (n, c, s) = self.value(a).dims3().expect("checked rank");
            let (x, y) = (self.data(a), self.data(b));
            let mut out = vec![0.0; x.len()];
            for bi in 0..n {
                for ch in 0..c {
                    let base = (bi * c + ch) * s;
                    for p in 0..s {
                        out[base + p] = x[base + p] * y[bi * s + p];
                    }
                }
            }
            out
        } else {
            return Err(mismatch("mul", format!("{sa:?} vs {sb:?}")));
        };
        let value = Tensor::new(sa, out)?;
        self.push("mul", value, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        self.map_unary("scale", x, |v| v * factor, Op::Scale(x, factor))
    }

    pub fn add_scalar(&mut self, x: Var, offset: f64) -> Result<Var> {
        self.map_unary("add_scalar", x, |v| v + offset, Op::AddScalar(x))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let total = self.data(x).iter().sum();
        self.push("sum", Tensor::scalar(total), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let d = self.data(x);
        if d.is_empty() {
            return Err(mismatch("mean", "empty tensor".into()));
        }
        let m = d.iter().sum::<f64>() / d.len() as f64;
        self.push("mean", Tensor::scalar(m), Op::Mean(x), &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let value = Tensor::new(shape, self.data(x).to_vec())?;
        self.push("reshape", value, Op::Reshape(x), &[x])
    }

    /// Spatial mean of an `N × C × H × W` tensor, giving `N × C`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let (n, c, s) = match self.value(x).dims3() {
            Some(d) if self.shape(x).len() == 4 => d,
            _ => return Err(mismatch("global_avg_pool", format!("need 4-D input, got {:?}", self.shape(x)))),
        };
        let out = self
            .data(x)
            .chunks(s)
            .map(|plane| plane.iter().sum::<f64>() / s as f64)
            .collect();
        let value = Tensor::new(vec![n, c], out)?;
        self.push("global_avg_pool", value, Op::GlobalAvgPool(x), &[x])
    }

    /// Squared Euclidean distances between pixel features and class centroids.
    ///
    /// `features` is `N × M × S`, `centroids` is `N × C × M`; the result is `N × C × S`.
    pub fn pairwise_sq_dist(&mut self, features: Var, centroids: Var) -> Result<Var> {
        let (n, m, s) = match *self.shape(features) {
            [n, m, s] => (n, m, s),
            ref sh => return Err(mismatch("pairwise_sq_dist", format!("features must be 3-D, got {sh:?}"))),
        };
        let c = match *self.shape(centroids) {
            [nn, c, mm] if nn == n && mm == m => c,
            ref sh => {
                return Err(mismatch(
                    "pairwise_sq_dist",
                    format!("centroids {sh:?} vs features [{n}, {m}, {s}]"),
                ))
            }
        };
        let f = self.data(features);
        let mu = self.data(centroids);
        let mut out = vec![0.0; n * c * s];
        for b in 0..n {
            for k in 0..c {
                let o = &mut out[(b * c + k) * s..(b * c + k + 1) * s];
                for d in 0..m {
                    let centre = mu[(b * c + k) * m + d];
                    let fr = &f[(b * m + d) * s..(b * m + d + 1) * s];
                    for (acc, &fv) in o.iter_mut().zip(fr) {
                        let diff = fv - centre;
                        *acc += diff * diff;
                    }
                }
            }
        }
        let value = Tensor::new(vec![n, c, s], out)?;
        self.push(
            "pairwise_sq_dist",
            value,
            Op::PairwiseSqDist { features, centroids },
            &[features, centroids],
        )
    }

    /// Divides each `(n, ·, s)` fibre by its sum over axis 1.
    ///
    /// Fibres whose sum falls below `degenerate_below` become uniform `1 / C` and pass no gradient.
    pub fn normalize_sum(&mut self, x: Var, degenerate_below: f64) -> Result<Var> {
        let (n, c, s) = self
            .value(x)
            .dims3()
            .ok_or_else(|| mismatch("normalize_sum", "input needs at least 2 axes".into()))?;
        let src = self.data(x);
        let mut out = vec![0.0; src.len()];
        let mut sums = vec![0.0; n * s];
        for b in 0..n {
            for p in 0..s {
                let total: f64 = (0..c).map(|ch| src[(b * c + ch) * s + p]).sum();
                sums[b * s + p] = total;
                for ch in 0..c {
                    out[(b * c + ch) * s + p] = if total < degenerate_below {
                        1.0 / c as f64
                    } else {
                        src[(b * c + ch) * s + p] / total
                    };
                }
            }
        }
        if degenerate_below > 0.0 {
            sums.iter_mut()
                .filter(|t| **t < degenerate_below)
                .for_each(|t| *t = 0.0);
        }
        let value = Tensor::new(self.shape(x).to_vec(), out)?;
        self.push("normalize_sum", value, Op::NormalizeSum { input: x, sums }, &[x])
    }

    /// Picks `x[n, index[n·S + s], s]` for every `(n, s)`, giving `N × 1 × ...`.
    pub fn gather_channel(&mut self, x: Var, index: Vec<usize>) -> Result<Var> {
        let (n, c, s) = self
            .value(x)
            .dims3()
            .ok_or_else(|| mismatch("gather_channel", "input needs at least 2 axes".into()))?;
        if index.len() != n * s || index.iter().any(|&i| i >= c) {
            return Err(mismatch("gather_channel", format!("index must hold {} values below {c}", n * s)));
        }
        let src = self.data(x);
        let out = (0..n * s)
            .map(|i| src[((i / s) * c + index[i]) * s + i % s])
            .collect();
        let mut shape = self.shape(x).to_vec();
        shape[1] = 1;
        let value = Tensor::new(shape, out)?;
        self.push("gather_channel", value, Op::Gather { input: x, index }, &[x])
    }

    /// `−Σ ln max(p[n, label, s], floor)` over positions with a label; unlabelled positions add nothing.
    ///
    /// `probs` is `N × C × ...`; `labels` has one entry per `(n, s)`.
    pub fn masked_nll(&mut self, probs: Var, labels: Vec<Option<usize>>, floor: f64) -> Result<Var> {
        let (n, c, s) = self
            .value(probs)
            .dims3()
            .ok_or_else(|| mismatch("masked_nll", "input needs at least 2 axes".into()))?;
        if labels.len() != n * s || labels.iter().flatten().any(|&l| l >= c) {
            return Err(mismatch("masked_nll", format!("labels must hold {} entries below {c}", n * s)));
        }
        let p = self.data(probs);
        let mut total = 0.0;
        for (i, l) in labels.iter().enumerate() {
            if let Some(l) = *l {
                total -= p[((i / s) * c + l) * s + i % s].max(floor).ln();
            }
        }
        self.push(
            "masked_nll",
            Tensor::scalar(total),
            Op::MaskedNll { probs, labels, floor },
            &[probs],
        )
    }

    /// Back-propagates from a one-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let shape = self.shape(loss);
        if self.value(loss).numel() != 1 {
            return Err(AutodiffError::NotScalar(shape.to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                grads[i] = None;
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
            if matches!(node.op, Op::Leaf) {
                ensure_finite("backward", &g)?;
                grads[i] = Some(g);
            }
        }
        Ok(Gradients { grads })
    }

    fn slot<'a>(&self, grads: &'a mut [Option<Vec<f64>>], v: Var) -> Option<&'a mut Vec<f64>> {
        let node = &self.nodes[v.0];
        if !node.requires_grad {
            return None;
        }
        let len = node.value.numel();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; len]))
    }

    fn backprop_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                weight,
                bias,
                kernel,
            } => {
                let (n, cin, h, w) = match *self.shape(*input) {
                    [n, c, h, w] => (n, c, h, w),
                    _ => unreachable!(),
                };
                let cout = self.shape(*weight)[0];
                let k = *kernel;
                let hw = h * w;
                let patch = cin * k * k;
                let x = self.data(*input);
                if let Some(gb) = bias.and_then(|b| self.slot(grads, b)) {
                    for s in 0..n {
                        for (co, acc) in gb.iter_mut().enumerate() {
                            let base = (s * cout + co) * hw;
                            *acc += g[base..base + hw].iter().sum::<f64>();
                        }
                    }
                }
                let need_w = self.nodes[weight.0].requires_grad;
                let need_x = self.nodes[input.0].requires_grad;
                let mut cols = vec![0.0; if k == 1 { 0 } else { patch * hw }];
                if need_w {
                    let mut gw = vec![0.0; cout * patch];
                    for s in 0..n {
                        let xs = &x[s * cin * hw..(s + 1) * cin * hw];
                        let b_mat: &[f64] = if k == 1 {
                            xs
                        } else {
                            im2col(xs, cin, h, w, k, &mut cols);
                            &cols
                        };
                        let gs = &g[s * cout * hw..(s + 1) * cout * hw];
                        gemm(cout, hw, patch, gs, false, b_mat, true, &mut gw, true);
                    }
                    let slot = self.slot(grads, *weight).expect("weight requires grad");
                    slot.iter_mut().zip(&gw).for_each(|(a, b)| *a += b);
                }
                if need_x {
                    let wt = self.data(*weight);
                    let mut gx = vec![0.0; x.len()];
                    let mut dcols = vec![0.0; patch * hw];
                    for s in 0..n {
                        let gs = &g[s * cout * hw..(s + 1) * cout * hw];
                        let dst = &mut gx[s * cin * hw..(s + 1) * cin * hw];
                        if k == 1 {
                            gemm(cin, cout, hw, wt, true, gs, false, dst, true);
                        } else {
                            gemm(patch, cout, hw, wt, true, gs, false, &mut dcols, false);
                            col2im(&dcols, cin, h, w, k, dst);
                        }
                    }
                    let slot = self.slot(grads, *input).expect("input requires grad");
                    slot.iter_mut().zip(&gx).for_each(|(a, b)| *a += b);
                }
            }
            Op::Linear {
                input,
                weight,
                bias,
            } => {
                let (n, fin) = (self.shape(*input)[0], self.shape(*input)[1]);
                let fout = self.shape(*weight)[0];
                if let Some(gb) = bias.and_then(|b| self.slot(grads, b)) {
                    for row in g.chunks(fout) {
                        gb.iter_mut().zip(row).for_each(|(a, b)| *a += b);
                    }
                }
                if self.nodes[weight.0].requires_grad {
                    let x = self.data(*input);
                    let gw = self.slot(grads, *weight).expect("weight requires grad");
                    gemm(fout, n, fin, g, true, x, false, gw, true);
                }
                if self.nodes[input.0].requires_grad {
                    let wt = self.data(*weight);
                    let gx = self.slot(grads, *input).expect("input requires grad");
                    gemm(n, fout, fin, g, false, wt, false, gx, true);
                }
            }
            Op::BatchNorm {
                input,
                gamma,
                beta,
                inv_std,
                normalized,
                train,
            } => {
                let (n, c, s) = self.value(*input).dims3().expect("checked at forward");
                let gam = self.data(*gamma);
                let mut sum_g = vec![0.0; c];
                let mut sum_gx = vec![0.0; c];
                for b in 0..n {
                    for ch in 0..c {
                        let base = (b * c + ch) * s;
                        for i in base..base + s {
                            sum_g[ch] += g[i];
                            sum_gx[ch] += g[i] * normalized[i];
                        }
                    }
                }
                if let Some(gg) = self.slot(grads, *gamma) {
                    gg.iter_mut().zip(&sum_gx).for_each(|(a, b)| *a += b);
                }
                if let Some(gb) = self.slot(grads, *beta) {
                    gb.iter_mut().zip(&sum_g).for_each(|(a, b)| *a += b);
                }
                if let Some(gx) = self.slot(grads, *input) {
                    let m = (n * s) as f64;
                    for b in 0..n {
                        for ch in 0..c {
                            let base = (b * c + ch) * s;
                            let scale = gam[ch] * inv_std[ch];
                            if *train {
                                let mean_g = sum_g[ch] / m;
                                let mean_gx = sum_gx[ch] / m;
                                for i in base..base + s {
                                    gx[i] += scale * (g[i] - mean_g - normalized[i] * mean_gx);
                                }
                            } else {
                                for i in base..base + s {
                                    gx[i] += scale * g[i];
                                }
                            }
                        }
                    }
                }
            }
            Op::Relu(x) => {
                let xv = self.data(*x);
                if let Some(gx) = self.slot(grads, *x) {
                    for ((a, &gi), &xi) in gx.iter_mut().zip(g).zip(xv) {
                        if xi > 0.0 {
                            *a += gi;
                        }
                    }
                }
            }
            Op::Sigmoid(x) => {
                let y = node.value.data();
                if let Some(gx) = self.slot(grads, *x) {
                    for ((a, &gi), &yi) in gx.iter_mut().zip(g).zip(y) {
                        *a += gi * yi * (1.0 - yi);
                    }
                }
            }
            Op::Softmax(x) => {
                let (n, c, s) = node.value.dims3().expect("checked at forward");
                let y = node.value.data();
                if let Some(gx) = self.slot(grads, *x) {
                    for b in 0..n {
                        let base = b * c * s;
                        for p in 0..s {
                            let dot: f64 = (0..c).map(|ch| g[base + ch * s + p] * y[base + ch * s + p]).sum();
                            for ch in 0..c {
                                let i = base + ch * s + p;
                                gx[i] += y[i] * (g[i] - dot);
                            }
                        }
                    }
                }
            }
            Op::MaxPool2 { input, argmax } => {
                if let Some(gx) = self.slot(grads, *input) {
                    for (&src, &gi) in argmax.iter().zip(g) {
                        gx[src] += gi;
                    }
                }
            }
            Op::Upsample2(x) => {
                let (h, w) = (self.shape(*x)[2], self.shape(*x)[3]);
                let (oh, ow) = (2 * h, 2 * w);
                if let Some(gx) = self.slot(grads, *x) {
                    let planes = gx.len() / (h * w);
                    for plane in 0..planes {
                        for y in 0..oh {
                            for xx in 0..ow {
                                gx[plane * h * w + (y / 2) * w + xx / 2] += g[plane * oh * ow + y * ow + xx];
                            }
                        }
                    }
                }
            }
            Op::Concat(inputs) => {
                let n = node.value.shape()[0];
                let total_c = node.value.shape()[1];
                let rest: usize = node.value.shape()[2..].iter().product();
                let mut offset = 0;
                for &v in inputs {
                    let c = self.shape(v)[1];
                    if let Some(gx) = self.slot(grads, v) {
                        for b in 0..n {
                            let src = &g[(b * total_c + offset) * rest..(b * total_c + offset + c) * rest];
                            gx[b * c * rest..(b + 1) * c * rest]
                                .iter_mut()
                                .zip(src)
                                .for_each(|(a, s)| *a += s);
                        }
                    }
                    offset += c;
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(gx) = self.slot(grads, v) {
                        gx.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                    }
                }
            }
            Op::Mul(a, b) => {
                let av = self.data(*a);
                let bv = self.data(*b);
                if av.len() == bv.len() {
                    if let Some(ga) = self.slot(grads, *a) {
                        for i in 0..ga.len() {
                            ga[i] += g[i] * bv[i];
                        }
                    }
                    if let Some(gb) = self.slot(grads, *b) {
                        for i in 0..gb.len() {
                            gb[i] += g[i] * av[i];
                        }
                    }
                } else {
                    let (n, c, s) = self.value(*a).dims3().expect("checked at forward");
                    if let Some(ga) = self.slot(grads, *a) {
                        for bi in 0..n {
                            for ch in 0..c {
                                let base = (bi * c + ch) * s;
                                for p in 0..s {
                                    ga[base + p] += g[base + p] * bv[bi * s + p];
                                }
                            }
                        }
                    }
                    if let Some(gb) = self.slot(grads, *b) {
                        for bi in 0..n {
                            for ch in 0..c {
                                let base = (bi * c + ch) * s;
                                for p in 0..s {
                                    gb[bi * s + p] += g[base + p] * av[base + p];
                                }
                            }
                        }
                    }
                }
            }
            Op::Scale(x, factor) => {
                if let Some(gx) = self.slot(grads, *x) {
                    gx.iter_mut().zip(g).for_each(|(a, b)| *a += factor * b);
                }
            }
            Op::AddScalar(x) | Op::Reshape(x) => {
                if let Some(gx) = self.slot(grads, *x) {
                    gx.iter_mut().zip(g).for_each(|(a, b)| *a += b);
                }
            }
            Op::Sum(x) => {
                if let Some(gx) = self.slot(grads, *x) {
                    gx.iter_mut().for_each(|a| *a += g[0]);
                }
            }
            Op::Mean(x) => {
                if let Some(gx) = self.slot(grads, *x) {
                    let share = g[0] / gx.len() as f64;
                    gx.iter_mut().for_each(|a| *a += share);
                }
            }
            Op::GlobalAvgPool(x) => {
                let s = self.shape(*x)[2] * self.shape(*x)[3];
                if let Some(gx) = self.slot(grads, *x) {
                    for (plane, &gi) in gx.chunks_mut(s).zip(g) {
                        let share = gi / s as f64;
                        plane.iter_mut().for_each(|a| *a += share);
                    }
                }
            }
            Op::PairwiseSqDist { features, centroids } => {
                let (n, m, s) = match *self.shape(*features) {
                    [n, m, s] => (n, m, s),
                    _ => unreachable!(),
                };
                let c = self.shape(*centroids)[1];
                let f = self.data(*features);
                let mu = self.data(*centroids);
                if let Some(gf) = self.slot(grads, *features) {
                    for b in 0..n {
                        for k in 0..c {
                            let gr = &g[(b * c + k) * s..(b * c + k + 1) * s];
                            for d in 0..m {
                                let centre = mu[(b * c + k) * m + d];
                                let base = (b * m + d) * s;
                                for p in 0..s {
                                    gf[base + p] += 2.0 * gr[p] * (f[base + p] - centre);
                                }
                            }
                        }
                    }
                }
                if let Some(gm) = self.slot(grads, *centroids) {
                    for b in 0..n {
                        for k in 0..c {
                            let gr = &g[(b * c + k) * s..(b * c + k + 1) * s];
                            for d in 0..m {
                                let centre = mu[(b * c + k) * m + d];
                                let fr = &f[(b * m + d) * s..(b * m + d + 1) * s];
                                let acc: f64 = gr.iter().zip(fr).map(|(gi, fv)| gi * (fv - centre)).sum();
                                gm[(b * c + k) * m + d] -= 2.0 * acc;
                            }
                        }
                    }
                }
            }
            Op::NormalizeSum { input, sums } => {
                let (n, c, s) = node.value.dims3().expect("checked at forward");
                let y = node.value.data();
                if let Some(gx) = self.slot(grads, *input) {
                    for b in 0..n {
                        for p in 0..s {
                            let total = sums[b * s + p];
                            if total == 0.0 {
                                continue;
                            }
                            let dot: f64 = (0..c)
                                .map(|ch| g[(b * c + ch) * s + p] * y[(b * c + ch) * s + p])
                                .sum();
                            for ch in 0..c {
                                let i = (b * c + ch) * s + p;
                                gx[i] += (g[i] - dot) / total;
                            }
                        }
                    }
                }
            }
            Op::Gather { input, index } => {
                let (_, c, s) = self.value(*input).dims3().expect("checked at forward");
                if let Some(gx) = self.slot(grads, *input) {
                    for (i, &k) in index.iter().enumerate() {
                        gx[((i / s) * c + k) * s + i % s] += g[i];
                    }
                }
            }
            Op::MaskedNll {
                probs,
                labels,
                floor,
            } => {
                let (_, c, s) = self.value(*probs).dims3().expect("checked at forward");
                let p = self.data(*probs);
                if let Some(gp) = self.slot(grads, *probs) {
                    for (i, l) in labels.iter().enumerate() {
                        if let Some(l) = *l {
                            let j = ((i / s) * c + l) * s + i % s;
                            if p[j] > *floor {
                                gp[j] -= g[0] / p[j];
                            }
                        }
                    }
                }
            }
        }
    }
}

fn stable_sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}
