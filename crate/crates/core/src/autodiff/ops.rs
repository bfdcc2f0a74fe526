use super::kernels::{self, ConvGeom};
use super::{Op, Tape, Var, FNV_PRIME};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Floor applied to probabilities before taking logarithms.
pub const PROB_FLOOR: f64 = 1e-12;

fn dim_err(op: &'static str, axis: impl Into<String>, expected: usize, actual: usize) -> Error {
    Error::Dimension {
        op,
        axis: axis.into(),
        expected,
        actual,
    }
}

fn tensor(shape: Vec<usize>, data: Vec<f64>) -> Tensor {
    Tensor::new(shape, data).expect("kernel produced a consistent shape")
}

impl Tape {
    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(dim_err(op, format!("shape {sa:?} vs {sb:?}"), self.value(a).numel(), self.value(b).numel()));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| x + y).collect();
        let out = tensor(self.value(a).shape().to_vec(), data);
        Ok(self.push_derived(out, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| x - y).collect();
        let out = tensor(self.value(a).shape().to_vec(), data);
        Ok(self.push_derived(out, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| x * y).collect();
        let out = tensor(self.value(a).shape().to_vec(), data);
        Ok(self.push_derived(out, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let out = self.value(x).map(|v| v * c);
        self.push_derived(out, Op::Scale(x, c), &[x])
    }

    /// Element-wise `max(0, x)`; the derivative at 0 is taken as 0.
    pub fn relu(&mut self, x: Var) -> Var {
        let mut sig = self.kink_signature;
        let out = self.value(x).map(|v| v.max(0.0));
        for &v in self.value(x).data() {
            sig = (sig ^ u64::from(v > 0.0)).wrapping_mul(FNV_PRIME);
        }
        self.kink_signature = sig;
        self.push_derived(out, Op::Relu(x), &[x])
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.push_derived(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s = v.data().iter().sum::<f64>() / v.numel() as f64;
        self.push_derived(Tensor::scalar(s), Op::Mean(x), &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let out = self.value(x).clone().with_requires_grad(false).reshape(shape)?;
        Ok(self.push_derived(out, Op::Reshape(x), &[x]))
    }

    /// Rows `[start, start + len)` along axis 0.
    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let v = self.value(x);
        let rows = v.shape()[0];
        if len == 0 || start + len > rows {
            return Err(dim_err("slice_rows", "axis 0", rows, start + len));
        }
        let stride: usize = v.shape()[1..].iter().product();
        let mut shape = v.shape().to_vec();
        shape[0] = len;
        let out = tensor(shape, v.data()[start * stride..(start + len) * stride].to_vec());
        Ok(self.push_derived(out, Op::SliceRows { x, offset: start * stride }, &[x]))
    }

    /// `x[B, I] * w[I, O] + b[O]`.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xs, ws, bs) = (self.value(x).shape(), self.value(w).shape(), self.value(b).shape());
        if xs.len() != 2 {
            return Err(dim_err("affine", "input rank", 2, xs.len()));
        }
        if ws.len() != 2 {
            return Err(dim_err("affine", "weight rank", 2, ws.len()));
        }
        if xs[1] != ws[0] {
            return Err(dim_err("affine", "input features (axis 1 of x vs axis 0 of W)", ws[0], xs[1]));
        }
        if bs != [ws[1]] {
            return Err(dim_err("affine", "bias length (axis 1 of W)", ws[1], bs.iter().product()));
        }
        let (rows, inner, outer) = (xs[0], xs[1], ws[1]);
        let bias = self.value(b).data();
        let mut data: Vec<f64> = Vec::with_capacity(rows * outer);
        for _ in 0..rows {
            data.extend_from_slice(bias);
        }
        kernels::gemm(rows, inner, outer, self.value(x).data(), (inner, 1), self.value(w).data(), (outer, 1), 1.0, &mut data, (outer, 1));
        let out = tensor(vec![rows, outer], data);
        Ok(self.push_derived(out, Op::Affine { x, w, b }, &[x, w, b]))
    }

    /// `x[B, C, H, W] + b[C]`, broadcasting the bias over batch and space.
    pub fn channel_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (xs, bs) = (self.value(x).shape(), self.value(b).shape());
        if xs.len() != 4 {
            return Err(dim_err("channel_bias", "input rank", 4, xs.len()));
        }
        if bs != [xs[1]] {
            return Err(dim_err("channel_bias", "bias length (axis 1 of x)", xs[1], bs.iter().product()));
        }
        let plane = xs[2] * xs[3];
        let bias = self.value(b).data();
        let mut data = self.value(x).data().to_vec();
        for (i, chunk) in data.chunks_mut(plane).enumerate() {
            let c = bias[i % xs[1]];
            chunk.iter_mut().for_each(|v| *v += c);
        }
        let out = tensor(xs.to_vec(), data);
        Ok(self.push_derived(out, Op::ChannelBias { x, b }, &[x, b]))
    }

    /// Cross-correlation of `x[B, C, H, W]` with `k[F, C, Kh, Kw]`.
    pub fn conv2d(&mut self, x: Var, k: Var, stride: usize, padding: usize) -> Result<Var> {
        let (xs, ks) = (self.value(x).shape(), self.value(k).shape());
        if xs.len() != 4 {
            return Err(dim_err("conv2d", "input rank", 4, xs.len()));
        }
        if ks.len() != 4 {
            return Err(dim_err("conv2d", "kernel rank", 4, ks.len()));
        }
        if xs[1] != ks[1] {
            return Err(dim_err("conv2d", "channels (axis 1)", ks[1], xs[1]));
        }
        if stride == 0 {
            return Err(Error::config("conv2d.stride", "stride must be positive"));
        }
        let out_dim = |size: usize, kernel: usize, axis: &str| -> Result<usize> {
            let padded = size + 2 * padding;
            if padded < kernel || (padded - kernel) % stride != 0 {
                return Err(Error::config(
                    format!("conv2d.{axis}"),
                    format!("({size} + 2*{padding} - {kernel}) / {stride} + 1 is not a positive integer"),
                ));
            }
            Ok((padded - kernel) / stride + 1)
        };
        let geom = ConvGeom {
            batch: xs[0],
            channels: xs[1],
            height: xs[2],
            width: xs[3],
            filters: ks[0],
            kh: ks[2],
            kw: ks[3],
            stride,
            padding,
            out_h: out_dim(xs[2], ks[2], "height")?,
            out_w: out_dim(xs[3], ks[3], "width")?,
        };
        let cols = kernels::im2col(self.value(x).data(), &geom);
        let n = geom.positions();
        let p = geom.patch_len();
        let mut mat = vec![0.0; geom.filters * n];
        kernels::gemm(geom.filters, p, n, self.value(k).data(), (p, 1), &cols, (n, 1), 0.0, &mut mat, (n, 1));
        let plane = geom.out_h * geom.out_w;
        let mut data = vec![0.0; geom.batch * geom.filters * plane];
        for b in 0..geom.batch {
            for f in 0..geom.filters {
                data[(b * geom.filters + f) * plane..][..plane].copy_from_slice(&mat[f * n + b * plane..][..plane]);
            }
        }
        let out = tensor(vec![geom.batch, geom.filters, geom.out_h, geom.out_w], data);
        // the patch matrix is only needed for the kernel gradient
        let cols = if self.requires_grad(k) { cols } else { Vec::new() };
        Ok(self.push_derived(out, Op::Conv2d { x, k, geom, cols }, &[x, k]))
    }

    /// Non-overlapping mean pooling with a square window.
    pub fn avg_pool2d(&mut self, x: Var, window: usize) -> Result<Var> {
        let xs = self.value(x).shape();
        if xs.len() != 4 {
            return Err(dim_err("avg_pool2d", "input rank", 4, xs.len()));
        }
        if window == 0 || xs[2] % window != 0 || xs[3] % window != 0 {
            return Err(Error::config(
                "avg_pool2d.window",
                format!("spatial dims {}x{} are not divisible by window {window}", xs[2], xs[3]),
            ));
        }
        let (h, w) = (xs[2], xs[3]);
        let (oh, ow) = (h / window, w / window);
        let planes = xs[0] * xs[1];
        let scale = 1.0 / (window * window) as f64;
        let src = self.value(x).data();
        let mut data = vec![0.0; planes * oh * ow];
        for (pl, dst) in data.chunks_exact_mut(oh * ow).enumerate() {
            let sp = &src[pl * h * w..][..h * w];
            for i in 0..h {
                for j in 0..w {
                    dst[(i / window) * ow + j / window] += sp[i * w + j];
                }
            }
            dst.iter_mut().for_each(|v| *v *= scale);
        }
        let out = tensor(vec![xs[0], xs[1], oh, ow], data);
        Ok(self.push_derived(out, Op::AvgPool2d { x, window }, &[x]))
    }

    /// Mean over the spatial axes: `[B, C, H, W] -> [B, C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let xs = self.value(x).shape();
        if xs.len() != 4 {
            return Err(dim_err("global_avg_pool", "input rank", 4, xs.len()));
        }
        let area = xs[2] * xs[3];
        let data = self.value(x).data().chunks_exact(area).map(|c| c.iter().sum::<f64>() / area as f64).collect();
        let out = tensor(vec![xs[0], xs[1]], data);
        Ok(self.push_derived(out, Op::GlobalAvgPool(x), &[x]))
    }

    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let k = self.matrix_classes("log_softmax", x)?;
        let data = kernels::log_softmax_rows(self.value(x).data(), k);
        let out = tensor(self.value(x).shape().to_vec(), data);
        Ok(self.push_derived(out, Op::LogSoftmax(x), &[x]))
    }

    /// Batch mean of `-log softmax(logits)[b, labels[b]]`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let k = self.matrix_classes("cross_entropy", logits)?;
        let rows = self.value(logits).shape()[0];
        if labels.len() != rows {
            return Err(dim_err("cross_entropy", "labels vs batch (axis 0)", rows, labels.len()));
        }
        if let Some((i, &y)) = labels.iter().enumerate().find(|(_, &y)| y >= k) {
            return Err(Error::Data(format!("label {y} at index {i} is outside [0, {k})")));
        }
        let lp = kernels::log_softmax_rows(self.value(logits).data(), k);
        let loss = -labels.iter().enumerate().map(|(b, &y)| lp[b * k + y]).sum::<f64>() / rows as f64;
        let probs = lp.iter().map(|v| v.exp()).collect();
        let op = Op::CrossEntropy {
            logits,
            labels: labels.to_vec(),
            probs,
        };
        Ok(self.push_derived(Tensor::scalar(loss), op, &[logits]))
    }

    /// Batch mean of `sum_k exp(log_p) * (log_p - log_q)` over `[B, K]`
    /// log-probability matrices.
    pub fn kl_div(&mut self, log_p: Var, log_q: Var) -> Result<Var> {
        self.matrix_classes("kl_div", log_p)?;
        self.same_shape("kl_div", log_p, log_q)?;
        let rows = self.value(log_p).shape()[0] as f64;
        let total: f64 = self
            .value(log_p)
            .data()
            .iter()
            .zip(self.value(log_q).data())
            .map(|(p, q)| p.exp() * (p - q))
            .sum();
        Ok(self.push_derived(Tensor::scalar(total / rows), Op::KlDiv { log_p, log_q }, &[log_p, log_q]))
    }

    /// Batch mean of the per-sample Jensen-Shannon divergence between the
    /// softmax distributions of every `[B, K]` logit matrix in `logits`:
    /// `(1/m) * sum_j KL(p_j || M)` with `M` the mean of the `p_j`.
    pub fn jsd(&mut self, logits: &[Var]) -> Result<Var> {
        if logits.len() < 2 {
            return Err(Error::Usage(format!("jsd needs at least two views, got {}", logits.len())));
        }
        let k = self.matrix_classes("jsd", logits[0])?;
        for &v in &logits[1..] {
            self.same_shape("jsd", logits[0], v)?;
        }
        let rows = self.value(logits[0]).shape()[0];
        let m = logits.len() as f64;
        let log_p: Vec<Vec<f64>> = logits.iter().map(|&v| kernels::log_softmax_rows(self.value(v).data(), k)).collect();
        let probs: Vec<Vec<f64>> = log_p.iter().map(|lp| lp.iter().map(|v| v.exp()).collect()).collect();
        let mut log_mean = vec![0.0; rows * k];
        for (i, lm) in log_mean.iter_mut().enumerate() {
            let mean = probs.iter().map(|p| p[i]).sum::<f64>() / m;
            *lm = mean.max(PROB_FLOOR).ln();
        }
        let mut total = 0.0;
        for (p, lp) in probs.iter().zip(&log_p) {
            for i in 0..rows * k {
                total += p[i] * (lp[i] - log_mean[i]);
            }
        }
        let value = total / (m * rows as f64);
        let op = Op::Jsd {
            inputs: logits.to_vec(),
            classes: k,
            probs,
            log_p,
            log_mean,
        };
        Ok(self.push_derived(Tensor::scalar(value), op, logits))
    }

    fn matrix_classes(&self, op: &'static str, x: Var) -> Result<usize> {
        let s = self.value(x).shape();
        if s.len() != 2 {
            return Err(dim_err(op, "rank", 2, s.len()));
        }
        if s[1] < 2 {
            return Err(dim_err(op, "classes (axis 1) must be at least", 2, s[1]));
        }
        Ok(s[1])
    }
}
