//! Define-by-run reverse-mode automatic differentiation.
//!
//! A [`Tape`] owns every value produced during one forward pass. Operations
//! append a node holding the output value and what is needed to run its
//! backward rule; [`Tape::backward`] walks the nodes in reverse insertion
//! order, which is a valid topological order because a node can only refer
//! to nodes that already exist.
//!
//! A fresh tape is built for every forward pass. Attack steps and training
//! steps never share a tape, so input gradients for the attack and parameter
//! gradients for the optimizer never interfere.

mod gradcheck;
pub(crate) mod kernels;
pub(crate) mod ops;

pub use gradcheck::{finite_diff_check, FiniteDiffReport, Probe, GRAD_FLOOR};
pub use ops::PROB_FLOOR;

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use kernels::ConvGeom;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

type CustomBackward = Box<dyn Fn(&[&Tensor], &[f64]) -> Vec<Vec<f64>> + Send + Sync>;

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    SliceRows { x: Var, offset: usize },
    Affine { x: Var, w: Var, b: Var },
    ChannelBias { x: Var, b: Var },
    Conv2d { x: Var, k: Var, geom: ConvGeom, cols: Vec<f64> },
    AvgPool2d { x: Var, window: usize },
    GlobalAvgPool(Var),
    LogSoftmax(Var),
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<f64> },
    KlDiv { log_p: Var, log_q: Var },
    Jsd { inputs: Vec<Var>, classes: usize, probs: Vec<Vec<f64>>, log_p: Vec<Vec<f64>>, log_mean: Vec<f64> },
    Custom { inputs: Vec<Var>, backward: CustomBackward },
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Recorded computation graph for one forward pass.
pub struct Tape {
    nodes: Vec<Node>,
    kink_signature: u64,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            kink_signature: FNV_OFFSET,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records an input tensor. Its `requires_grad` flag decides whether
    /// backward populates a gradient for it.
    pub fn leaf(&mut self, mut value: Tensor) -> Var {
        value.grad = None;
        self.push(value, Op::Leaf)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value.with_requires_grad(false))
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value.with_requires_grad(true))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Gradient stored on a leaf by the last [`Tape::backward`] call.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad.as_deref()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].value.requires_grad
    }

    /// Hash of every ReLU activation pattern recorded so far. Two forward
    /// passes with equal signatures took the same linear piece of the
    /// network, which finite-difference checks use to skip kink crossings.
    pub fn kink_signature(&self) -> u64 {
        self.kink_signature
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    fn push_derived(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let rg = inputs.iter().any(|&v| self.requires_grad(v));
        self.push(value.with_requires_grad(rg), op)
    }

    /// Records an operation whose backward rule is supplied by the caller.
    /// `backward` receives the input values and the upstream gradient and
    /// returns one gradient per input.
    pub fn custom(
        &mut self,
        inputs: &[Var],
        output: Tensor,
        backward: impl Fn(&[&Tensor], &[f64]) -> Vec<Vec<f64>> + Send + Sync + 'static,
    ) -> Var {
        self.push_derived(
            output,
            Op::Custom {
                inputs: inputs.to_vec(),
                backward: Box::new(backward),
            },
            inputs,
        )
    }

    /// Back-propagates from a single-element `loss`, storing gradients on
    /// every leaf that requires them. Intermediate gradients are discarded.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let numel = self.value(loss).numel();
        if numel != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        for node in &mut self.nodes {
            node.value.grad = None;
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].value.requires_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[i].op {
                self.nodes[i].value.grad = Some(g);
                continue;
            }
            self.backward_node(i, &g, &mut grads);
        }
        Ok(())
    }

    fn backward_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.acc(grads, *a, |d| add_into(d, g));
                self.acc(grads, *b, |d| add_into(d, g));
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, |d| add_into(d, g));
                self.acc(grads, *b, |d| d.iter_mut().zip(g).for_each(|(d, g)| *d -= g));
            }
            Op::Mul(a, b) => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                self.acc(grads, *a, |d| {
                    for ((d, g), b) in d.iter_mut().zip(g).zip(bv) {
                        *d += g * b;
                    }
                });
                self.acc(grads, *b, |d| {
                    for ((d, g), a) in d.iter_mut().zip(g).zip(av) {
                        *d += g * a;
                    }
                });
            }
            Op::Scale(x, c) => self.acc(grads, *x, |d| {
                d.iter_mut().zip(g).for_each(|(d, g)| *d += c * g)
            }),
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                self.acc(grads, *x, |d| {
                    for ((d, g), x) in d.iter_mut().zip(g).zip(xv) {
                        if *x > 0.0 {
                            *d += g;
                        }
                    }
                });
            }
            Op::Sum(x) => self.acc(grads, *x, |d| d.iter_mut().for_each(|d| *d += g[0])),
            Op::Mean(x) => {
                let n = self.value(*x).numel() as f64;
                self.acc(grads, *x, |d| d.iter_mut().for_each(|d| *d += g[0] / n));
            }
            Op::Reshape(x) => self.acc(grads, *x, |d| add_into(d, g)),
            Op::SliceRows { x, offset } => {
                self.acc(grads, *x, |d| add_into(&mut d[*offset..*offset + g.len()], g))
            }
            Op::ChannelBias { x, b } => {
                self.acc(grads, *x, |d| add_into(d, g));
                let channels = self.value(*b).numel();
                let plane = out.shape()[2] * out.shape()[3];
                self.acc(grads, *b, |d| {
                    for (i, chunk) in g.chunks(plane).enumerate() {
                        d[i % channels] += chunk.iter().sum::<f64>();
                    }
                });
            }
            Op::Affine { x, w, b } => {
                let xs = self.value(*x).shape();
                let (rows, inner) = (xs[0], xs[1]);
                let outer = out.shape()[1];
                let wv = self.value(*w).data();
                let xv = self.value(*x).data();
                // dx = g * w^T
                self.acc(grads, *x, |d| {
                    kernels::gemm(rows, outer, inner, g, (outer, 1), wv, (1, outer), 1.0, d, (inner, 1))
                });
                // dw = x^T * g
                self.acc(grads, *w, |d| {
                    kernels::gemm(inner, rows, outer, xv, (1, inner), g, (outer, 1), 1.0, d, (outer, 1))
                });
                self.acc(grads, *b, |d| {
                    for row in g.chunks_exact(outer) {
                        add_into(d, row);
                    }
                });
            }
            Op::Conv2d { x, k, geom, cols } => {
                let n = geom.positions();
                let p = geom.patch_len();
                let plane = geom.out_h * geom.out_w;
                // upstream gradient as a [F, B*H'*W'] matrix
                let mut gmat = vec![0.0; geom.filters * n];
                for b in 0..geom.batch {
                    for f in 0..geom.filters {
                        let src = &g[(b * geom.filters + f) * plane..][..plane];
                        gmat[f * n + b * plane..][..plane].copy_from_slice(src);
                    }
                }
                self.acc(grads, *k, |d| {
                    kernels::gemm(geom.filters, n, p, &gmat, (n, 1), cols, (1, n), 1.0, d, (p, 1))
                });
                if self.requires_grad(*x) {
                    let kv = self.value(*k).data();
                    let mut dcols = vec![0.0; p * n];
                    kernels::gemm(p, geom.filters, n, kv, (1, p), &gmat, (n, 1), 0.0, &mut dcols, (n, 1));
                    self.acc(grads, *x, |d| kernels::col2im_add(&dcols, geom, d));
                }
            }
            Op::AvgPool2d { x, window } => {
                let s = self.value(*x).shape();
                let (h, w) = (s[2], s[3]);
                let (oh, ow) = (h / window, w / window);
                let scale = 1.0 / (window * window) as f64;
                self.acc(grads, *x, |d| {
                    for (plane_idx, gp) in g.chunks_exact(oh * ow).enumerate() {
                        let dp = &mut d[plane_idx * h * w..][..h * w];
                        for i in 0..h {
                            for j in 0..w {
                                dp[i * w + j] += gp[(i / window) * ow + j / window] * scale;
                            }
                        }
                    }
                });
            }
            Op::GlobalAvgPool(x) => {
                let s = self.value(*x).shape();
                let area = s[2] * s[3];
                let scale = 1.0 / area as f64;
                self.acc(grads, *x, |d| {
                    for (dp, gv) in d.chunks_exact_mut(area).zip(g) {
                        dp.iter_mut().for_each(|v| *v += gv * scale);
                    }
                });
            }
            Op::LogSoftmax(x) => {
                let k = out.shape()[1];
                let ov = out.data();
                self.acc(grads, *x, |d| {
                    for ((drow, grow), orow) in d.chunks_exact_mut(k).zip(g.chunks_exact(k)).zip(ov.chunks_exact(k)) {
                        let gsum: f64 = grow.iter().sum();
                        for ((d, g), o) in drow.iter_mut().zip(grow).zip(orow) {
                            *d += g - o.exp() * gsum;
                        }
                    }
                });
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let k = self.value(*logits).shape()[1];
                let scale = g[0] / labels.len() as f64;
                self.acc(grads, *logits, |d| {
                    for (b, &y) in labels.iter().enumerate() {
                        for c in 0..k {
                            let onehot = if c == y { 1.0 } else { 0.0 };
                            d[b * k + c] += scale * (probs[b * k + c] - onehot);
                        }
                    }
                });
            }
            Op::KlDiv { log_p, log_q } => {
                let rows = self.value(*log_p).shape()[0] as f64;
                let lp = self.value(*log_p).data();
                let lq = self.value(*log_q).data();
                let scale = g[0] / rows;
                self.acc(grads, *log_p, |d| {
                    for ((d, p), q) in d.iter_mut().zip(lp).zip(lq) {
                        *d += scale * p.exp() * (p - q + 1.0);
                    }
                });
                self.acc(grads, *log_q, |d| {
                    for (d, p) in d.iter_mut().zip(lp) {
                        *d -= scale * p.exp();
                    }
                });
            }
            Op::Jsd { inputs, classes, probs, log_p, log_mean } => {
                let k = *classes;
                let m = inputs.len() as f64;
                let rows = log_mean.len() / k;
                let scale = g[0] / (m * rows as f64);
                for (j, &input) in inputs.iter().enumerate() {
                    let (pj, lpj) = (&probs[j], &log_p[j]);
                    self.acc(grads, input, |d| {
                        let mut dp = vec![0.0; k];
                        for r in 0..rows {
                            let base = r * k;
                            let mut dot = 0.0;
                            for c in 0..k {
                                dp[c] = scale * (lpj[base + c] - log_mean[base + c]);
                                dot += dp[c] * pj[base + c];
                            }
                            for c in 0..k {
                                d[base + c] += pj[base + c] * (dp[c] - dot);
                            }
                        }
                    });
                }
            }
            Op::Custom { inputs, backward } => {
                let values: Vec<&Tensor> = inputs.iter().map(|&v| self.value(v)).collect();
                let local = backward(&values, g);
                for (&input, lg) in inputs.iter().zip(local) {
                    self.acc(grads, input, |d| add_into(d, &lg));
                }
            }
        }
    }

    fn acc(&self, grads: &mut [Option<Vec<f64>>], v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.requires_grad(v) {
            return;
        }
        let n = self.value(v).numel();
        let slot = grads[v.0].get_or_insert_with(|| vec![0.0; n]);
        f(slot);
    }
}

fn add_into(d: &mut [f64], g: &[f64]) {
    d.iter_mut().zip(g).for_each(|(d, g)| *d += g);
}
