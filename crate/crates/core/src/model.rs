//! Compact residual convolutional classifier and its SGD optimizer.
//!
//! Layout for `stage_widths = [w0, w1, ...]`:
//!
//! ```text
//! stem: conv3x3(C -> w0) + relu
//! stage s: avgpool2 -> [conv1x1(w{s-1} -> ws) if s > 0] -> blocks
//! block: x = relu(x + 0.5 * conv3x3(relu(conv3x3(x))))
//! head: global average pool -> affine(w_last -> K)
//! ```
//!
//! Every convolution carries a per-channel bias; the fixed residual scale
//! stands in for normalization layers.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::rng::{self, tags};
use crate::tensor::Tensor;

pub const RESIDUAL_SCALE: f64 = 0.5;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub input_channels: usize,
    pub input_size: usize,
    pub num_classes: usize,
    pub stage_widths: Vec<usize>,
    pub blocks_per_stage: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            input_channels: 1,
            input_size: 16,
            num_classes: 2,
            stage_widths: vec![8, 16],
            blocks_per_stage: 1,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_channels == 0 {
            return Err(Error::config("model.input_channels", "must be at least 1"));
        }
        if self.num_classes < 2 {
            return Err(Error::config("model.num_classes", "must be at least 2"));
        }
        if self.input_size < 8 {
            return Err(Error::config("model.input_size", "must be at least 8"));
        }
        if self.stage_widths.is_empty() || self.stage_widths.contains(&0) {
            return Err(Error::config("model.stage_widths", "must be a nonempty list of positive widths"));
        }
        let pool = 1usize << self.stage_widths.len();
        if self.input_size % pool != 0 {
            return Err(Error::config(
                "model.input_size",
                format!("{} is not divisible by the cumulative pooling factor {pool}", self.input_size),
            ));
        }
        Ok(())
    }
}

/// Named model parameters (θ).
#[derive(Clone, Debug, PartialEq)]
pub struct ParameterSet {
    tensors: BTreeMap<String, Tensor>,
    pub init_seed: u64,
}

/// Gradients keyed by parameter name.
pub type Gradients = BTreeMap<String, Vec<f64>>;

/// Parameters registered on a tape.
#[derive(Clone, Debug, Default)]
pub struct BoundParams {
    vars: BTreeMap<String, Var>,
}

impl BoundParams {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Usage(format!("parameter `{name}` is not bound on this tape")))
    }

    /// Points `name` at a different tape variable, e.g. a probe leaf in a
    /// gradient check.
    pub fn rebind(&mut self, name: &str, var: Var) -> Result<()> {
        let slot = self
            .vars
            .get_mut(name)
            .ok_or_else(|| Error::Usage(format!("parameter `{name}` is not bound on this tape")))?;
        *slot = var;
        Ok(())
    }

    /// Collects the gradients left on the tape by `Tape::backward`.
    /// Parameters the loss does not depend on get zero gradients.
    pub fn gradients(&self, tape: &Tape) -> Gradients {
        self.vars
            .iter()
            .map(|(name, &v)| {
                let g = tape
                    .grad(v)
                    .map(<[f64]>::to_vec)
                    .unwrap_or_else(|| vec![0.0; tape.value(v).numel()]);
                (name.clone(), g)
            })
            .collect()
    }
}

impl ParameterSet {
    pub fn new(init_seed: u64) -> Self {
        ParameterSet {
            tensors: BTreeMap::new(),
            init_seed,
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.tensors.insert(name.into(), tensor.with_requires_grad(true));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    /// Registers every tensor on `tape`, as trainable leaves or constants.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundParams {
        let vars = self
            .tensors
            .iter()
            .map(|(name, t)| {
                let v = tape.leaf(t.clone().with_requires_grad(trainable));
                (name.clone(), v)
            })
            .collect();
        BoundParams { vars }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
enum Layer {
    Conv { prefix: String, padding: usize },
    Relu,
    Pool,
    Block { conv1: String, conv2: String },
    Head,
}

/// The network architecture; holds no parameter values.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Model {
    config: ModelConfig,
    layers: Vec<Layer>,
    shapes: Vec<(String, Vec<usize>)>,
}

/// Builds the architecture and a freshly initialized parameter set.
/// Initialization depends only on `config.seed`.
pub fn build_model(config: &ModelConfig) -> Result<(Model, ParameterSet)> {
    let model = Model::new(config)?;
    let params = model.init_params(config.seed);
    Ok((model, params))
}

impl Model {
    pub fn new(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut layers = Vec::new();
        let mut shapes = Vec::new();
        let mut conv = |prefix: String, out: usize, inp: usize, k: usize| {
            shapes.push((format!("{prefix}.weight"), vec![out, inp, k, k]));
            shapes.push((format!("{prefix}.bias"), vec![out]));
            prefix
        };
        let w0 = config.stage_widths[0];
        layers.push(Layer::Conv {
            prefix: conv("stem".into(), w0, config.input_channels, 3),
            padding: 1,
        });
        layers.push(Layer::Relu);
        let mut prev = w0;
        for (s, &width) in config.stage_widths.iter().enumerate() {
            layers.push(Layer::Pool);
            if s > 0 {
                layers.push(Layer::Conv {
                    prefix: conv(format!("stage{s}.proj"), width, prev, 1),
                    padding: 0,
                });
            }
            for b in 0..config.blocks_per_stage {
                layers.push(Layer::Block {
                    conv1: conv(format!("stage{s}.block{b}.conv1"), width, width, 3),
                    conv2: conv(format!("stage{s}.block{b}.conv2"), width, width, 3),
                });
            }
            prev = width;
        }
        shapes.push(("head.weight".into(), vec![prev, config.num_classes]));
        shapes.push(("head.bias".into(), vec![config.num_classes]));
        layers.push(Layer::Head);
        Ok(Model {
            config: config.clone(),
            layers,
            shapes,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Parameter names and shapes in architecture order.
    pub fn parameter_shapes(&self) -> &[(String, Vec<usize>)] {
        &self.shapes
    }

    /// Fan-in scaled uniform weights (He bound `sqrt(6 / fan_in)` for
    /// convolutions, `1 / sqrt(fan_in)` for the head) and zero biases.
    pub fn init_params(&self, seed: u64) -> ParameterSet {
        let mut params = ParameterSet::new(seed);
        for (i, (name, shape)) in self.shapes.iter().enumerate() {
            let n: usize = shape.iter().product();
            let data = if name.ends_with(".bias") {
                vec![0.0; n]
            } else {
                let (fan_in, bound_num) = if shape.len() == 4 {
                    (shape[1] * shape[2] * shape[3], 6.0)
                } else {
                    (shape[0], 1.0)
                };
                let bound = (bound_num / fan_in as f64).sqrt();
                let mut rng = rng::stream(seed, &[tags::INIT, i as u64]);
                (0..n).map(|_| rng.random_range(-bound..bound)).collect()
            };
            params.insert(name.clone(), Tensor::new(shape.clone(), data).expect("shape product matches"));
        }
        params
    }

    /// Checks that `params` has exactly this model's names and shapes.
    pub fn check_params(&self, params: &ParameterSet) -> Result<()> {
        if params.len() != self.shapes.len() {
            return Err(Error::config(
                "params",
                format!("expected {} tensors, found {}", self.shapes.len(), params.len()),
            ));
        }
        for (name, shape) in &self.shapes {
            let t = params
                .get(name)
                .ok_or_else(|| Error::config(format!("params.{name}"), "missing"))?;
            if t.shape() != shape.as_slice() {
                return Err(Error::config(
                    format!("params.{name}"),
                    format!("shape {:?} does not match model shape {:?}", t.shape(), shape),
                ));
            }
        }
        Ok(())
    }

    /// Logits `[B, K]` for an input batch `[B, C, H, W]`.
    pub fn forward(&self, tape: &mut Tape, params: &BoundParams, x: Var) -> Result<Var> {
        let c = &self.config;
        let s = tape.value(x).shape();
        let expected = [c.input_channels, c.input_size, c.input_size];
        if s.len() != 4 {
            return Err(Error::Dimension {
                op: "forward",
                axis: "input rank".into(),
                expected: 4,
                actual: s.len(),
            });
        }
        for (axis, (&want, &got)) in expected.iter().zip(&s[1..]).enumerate() {
            if want != got {
                return Err(Error::Dimension {
                    op: "forward",
                    axis: format!("input axis {}", axis + 1),
                    expected: want,
                    actual: got,
                });
            }
        }
        let mut h = x;
        for layer in &self.layers {
            h = match layer {
                Layer::Conv { prefix, padding } => conv_layer(tape, params, h, prefix, *padding)?,
                Layer::Relu => tape.relu(h),
                Layer::Pool => tape.avg_pool2d(h, 2)?,
                Layer::Block { conv1, conv2 } => {
                    let a = conv_layer(tape, params, h, conv1, 1)?;
                    let a = tape.relu(a);
                    let a = conv_layer(tape, params, a, conv2, 1)?;
                    let a = tape.scale(a, RESIDUAL_SCALE);
                    let sum = tape.add(h, a)?;
                    tape.relu(sum)
                }
                Layer::Head => {
                    let pooled = tape.global_avg_pool(h)?;
                    tape.affine(pooled, params.var("head.weight")?, params.var("head.bias")?)?
                }
            };
        }
        Ok(h)
    }

    /// Logits for `x` with parameters held constant.
    pub fn predict(&self, params: &ParameterSet, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape, false);
        let xv = tape.constant(x.clone());
        let out = self.forward(&mut tape, &bound, xv)?;
        Ok(tape.value(out).clone())
    }
}

fn conv_layer(tape: &mut Tape, params: &BoundParams, x: Var, prefix: &str, padding: usize) -> Result<Var> {
    let y = tape.conv2d(x, params.var(&format!("{prefix}.weight"))?, 1, padding)?;
    tape.channel_bias(y, params.var(&format!("{prefix}.bias"))?)
}

/// Anything that maps an input batch to logits on a tape.
pub trait Classifier {
    fn logits(&self, tape: &mut Tape, x: Var) -> Result<Var>;
}

/// A model paired with frozen parameters.
#[derive(Clone, Copy)]
pub struct Network<'a> {
    pub model: &'a Model,
    pub params: &'a ParameterSet,
}

impl<'a> Network<'a> {
    pub fn new(model: &'a Model, params: &'a ParameterSet) -> Self {
        Network { model, params }
    }
}

impl Classifier for Network<'_> {
    fn logits(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let bound = self.params.bind(tape, false);
        self.model.forward(tape, &bound, x)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SgdConfig {
    pub learning_rate: f64,
    pub decay_factor: f64,
    pub decay_every_epochs: usize,
    pub epochs: usize,
    pub batch_size: usize,
    /// Heavy-ball momentum; 0 gives plain SGD.
    pub momentum: f64,
    /// Training attacks grow linearly to their full epsilon over this many
    /// epochs: epoch `e` (from 0) uses `(e + 1) / (warmup + 1)` of it.
    pub epsilon_warmup_epochs: usize,
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig {
            learning_rate: 0.02,
            decay_factor: 10.0,
            decay_every_epochs: 8,
            epochs: 12,
            batch_size: 32,
            momentum: 0.9,
            epsilon_warmup_epochs: 4,
        }
    }
}

impl SgdConfig {
    /// Fraction of the training epsilon used during `epoch`.
    pub fn epsilon_scale(&self, epoch: usize) -> f64 {
        ((epoch + 1) as f64 / (self.epsilon_warmup_epochs + 1) as f64).min(1.0)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("sgd.learning_rate", "must be a positive finite number"));
        }
        if !(self.decay_factor >= 1.0 && self.decay_factor.is_finite()) {
            return Err(Error::config("sgd.decay_factor", "must be at least 1"));
        }
        if self.decay_every_epochs == 0 {
            return Err(Error::config("sgd.decay_every_epochs", "must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("sgd.batch_size", "must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("sgd.momentum", "must lie in [0, 1)"));
        }
        Ok(())
    }
}

/// Step decay: `lr / decay_factor ^ floor(epoch / decay_every_epochs)`.
pub fn lr_at_epoch(config: &SgdConfig, epoch: usize) -> f64 {
    let steps = epoch / config.decay_every_epochs.max(1);
    config.learning_rate / config.decay_factor.powi(steps as i32)
}

/// `θ <- θ - lr * ∇θ` for every parameter.
pub fn sgd_step(params: &mut ParameterSet, grads: &Gradients, lr: f64) -> Result<()> {
    for name in params.tensors.keys() {
        let g = grads
            .get(name)
            .ok_or_else(|| Error::Usage(format!("missing gradient for parameter `{name}`")))?;
        if g.len() != params.tensors[name].numel() {
            return Err(Error::Dimension {
                op: "sgd_step",
                axis: format!("gradient length of `{name}`"),
                expected: params.tensors[name].numel(),
                actual: g.len(),
            });
        }
    }
    for (name, t) in params.tensors.iter_mut() {
        for (w, g) in t.data_mut().iter_mut().zip(&grads[name]) {
            *w -= lr * g;
        }
    }
    Ok(())
}

/// SGD with the configured step-decay schedule and optional momentum.
#[derive(Clone, Debug)]
pub struct Sgd {
    config: SgdConfig,
    velocity: Gradients,
}

impl Sgd {
    pub fn new(config: SgdConfig) -> Self {
        Sgd {
            config,
            velocity: Gradients::new(),
        }
    }

    pub fn step(&mut self, params: &mut ParameterSet, grads: &Gradients, epoch: usize) -> Result<()> {
        let lr = lr_at_epoch(&self.config, epoch);
        if self.config.momentum == 0.0 {
            return sgd_step(params, grads, lr);
        }
        let mu = self.config.momentum;
        for (name, g) in grads {
            let v = self
                .velocity
                .entry(name.clone())
                .or_insert_with(|| vec![0.0; g.len()]);
            for (v, g) in v.iter_mut().zip(g) {
                *v = mu * *v + g;
            }
        }
        sgd_step(params, &self.velocity, lr)
    }
}

/// Metadata written next to a parameter file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamSidecar {
    pub names: Vec<String>,
    pub shapes: Vec<Vec<usize>>,
    pub config: ModelConfig,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub method: Option<String>,
    /// Perturbation budget the model was trained against, if any.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_epsilon: Option<f64>,
}

/// Path of the JSON sidecar belonging to a parameter file.
pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

/// Writes the tensors as concatenated `RTNS` records in name order plus a
/// JSON sidecar.
pub fn save_params(
    path: &Path,
    params: &ParameterSet,
    config: &ModelConfig,
    method: Option<&str>,
    train_epsilon: Option<f64>,
) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for (_, t) in params.iter() {
        t.write_rtns(&mut w).map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    let sidecar = ParamSidecar {
        names: params.names().map(str::to_string).collect(),
        shapes: params.iter().map(|(_, t)| t.shape().to_vec()).collect(),
        config: config.clone(),
        seed: params.init_seed,
        method: method.map(str::to_string),
        train_epsilon,
    };
    let sc = sidecar_path(path);
    let json = serde_json::to_string_pretty(&sidecar)?;
    fs::write(&sc, json + "\n").map_err(|e| Error::io(sc, e))
}

pub fn load_params(path: &Path) -> Result<(ParameterSet, ParamSidecar)> {
    let sc = sidecar_path(path);
    let text = fs::read_to_string(&sc).map_err(|e| Error::io(&sc, e))?;
    let sidecar: ParamSidecar = serde_json::from_str(&text)?;
    if sidecar.names.len() != sidecar.shapes.len() {
        return Err(Error::Format("sidecar lists different numbers of names and shapes".into()));
    }
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let mut params = ParameterSet::new(sidecar.seed);
    for (name, shape) in sidecar.names.iter().zip(&sidecar.shapes) {
        let t = Tensor::read_rtns(&mut r)?
            .ok_or_else(|| Error::Format(format!("file ends before tensor `{name}`")))?;
        if t.shape() != shape.as_slice() {
            return Err(Error::Format(format!(
                "tensor `{name}` has shape {:?}, sidecar says {shape:?}",
                t.shape()
            )));
        }
        params.insert(name.clone(), t);
    }
    if Tensor::read_rtns(&mut r)?.is_some() {
        return Err(Error::Format("trailing tensors after the last sidecar entry".into()));
    }
    Ok((params, sidecar))
}
