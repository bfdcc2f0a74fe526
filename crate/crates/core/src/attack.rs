//! Projected gradient descent on the input, maximizing cross-entropy inside
//! an L2 or L-infinity ball intersected with the `[0, 1]` pixel box.

use std::fmt;
use std::str::FromStr;

use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::model::Classifier;
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Extra room allowed on the budget check for rounding.
pub const BUDGET_SLACK: f64 = 1e-6;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Norm {
    #[default]
    L2,
    Linf,
}

impl fmt::Display for Norm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Norm::L2 => "l2",
            Norm::Linf => "linf",
        })
    }
}

impl FromStr for Norm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "l2" => Ok(Norm::L2),
            "linf" => Ok(Norm::Linf),
            _ => Err(Error::config("attack.norm", format!("unknown norm `{s}` (expected l2 or linf)"))),
        }
    }
}

/// PGD step length: a fixed value, or `2.5 * epsilon / steps`.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub enum StepSize {
    #[default]
    Auto,
    Fixed(f64),
}

impl Serialize for StepSize {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            StepSize::Auto => s.serialize_str("auto"),
            StepSize::Fixed(v) => s.serialize_f64(*v),
        }
    }
}

impl<'de> Deserialize<'de> for StepSize {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            Value(f64),
            Name(String),
        }
        match Repr::deserialize(d)? {
            Repr::Value(v) => Ok(StepSize::Fixed(v)),
            Repr::Name(s) if s == "auto" => Ok(StepSize::Auto),
            Repr::Name(s) => Err(serde::de::Error::custom(format!(
                "step_size must be a number or \"auto\", got \"{s}\""
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackSpec {
    #[serde(default)]
    pub norm: Norm,
    pub epsilon: f64,
    pub steps: usize,
    #[serde(default)]
    pub step_size: StepSize,
    #[serde(default)]
    pub random_start: bool,
}

impl AttackSpec {
    pub fn new(norm: Norm, epsilon: f64, steps: usize) -> Self {
        AttackSpec {
            norm,
            epsilon,
            steps,
            step_size: StepSize::Auto,
            random_start: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon.is_finite() && self.epsilon >= 0.0) {
            return Err(Error::config("attack.epsilon", "must be a finite number >= 0"));
        }
        if let StepSize::Fixed(a) = self.step_size {
            if !(a.is_finite() && a > 0.0) {
                return Err(Error::config("attack.step_size", "must be positive or \"auto\""));
            }
        }
        Ok(())
    }

    pub fn resolved_step_size(&self) -> f64 {
        match self.step_size {
            StepSize::Fixed(a) => a,
            StepSize::Auto => 2.5 * self.epsilon / self.steps.max(1) as f64,
        }
    }

    /// True when the attack cannot move the input.
    pub fn is_identity(&self) -> bool {
        self.epsilon == 0.0 || (self.steps == 0 && !self.random_start)
    }
}

/// Rows of `t` along axis 0 (the whole tensor when rank is 1).
fn image_len(t: &Tensor) -> usize {
    if t.rank() <= 1 {
        t.numel()
    } else {
        t.numel() / t.shape()[0]
    }
}

/// Per-image norm of a perturbation batch.
pub fn perturbation_norms(delta: &Tensor, norm: Norm) -> Vec<f64> {
    delta
        .data()
        .chunks(image_len(delta))
        .map(|img| match norm {
            Norm::L2 => img.iter().map(|v| v * v).sum::<f64>().sqrt(),
            Norm::Linf => img.iter().fold(0.0f64, |m, v| m.max(v.abs())),
        })
        .collect()
}

fn project_in_place(data: &mut [f64], per_image: usize, norm: Norm, epsilon: f64) {
    match norm {
        Norm::L2 => {
            for img in data.chunks_mut(per_image) {
                let n = img.iter().map(|v| v * v).sum::<f64>().sqrt();
                if n > epsilon {
                    let s = epsilon / n;
                    img.iter_mut().for_each(|v| *v *= s);
                }
            }
        }
        Norm::Linf => data.iter_mut().for_each(|v| *v = v.clamp(-epsilon, epsilon)),
    }
}

/// Projects each image of `delta` onto the epsilon ball.
pub fn project_ball(delta: &Tensor, norm: Norm, epsilon: f64) -> Tensor {
    let mut out = delta.clone();
    let per = image_len(delta);
    project_in_place(out.data_mut(), per, norm, epsilon);
    out
}

fn random_start(shape: &[usize], per_image: usize, norm: Norm, epsilon: f64, rng: &mut Rng) -> Vec<f64> {
    let n: usize = shape.iter().product();
    match norm {
        Norm::Linf => (0..n).map(|_| rng.random_range(-epsilon..=epsilon)).collect(),
        Norm::L2 => {
            let mut out = Vec::with_capacity(n);
            for _ in 0..n / per_image {
                let dir: Vec<f64> = (0..per_image).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
                let len = dir.iter().map(|v| v * v).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
                let radius = epsilon * rng.random::<f64>().powf(1.0 / per_image as f64);
                out.extend(dir.iter().map(|v| v * radius / len));
            }
            out
        }
    }
}

/// PGD against cross-entropy. `rng` is only consumed for the random start.
pub fn pgd_attack<C: Classifier + ?Sized>(
    model: &C,
    x: &Tensor,
    labels: &[usize],
    spec: &AttackSpec,
    rng: &mut Rng,
) -> Result<Tensor> {
    pgd_attack_with(model, x, labels, spec, rng, |tape, logits, y| tape.cross_entropy(logits, y))
}

/// PGD ascending an arbitrary scalar `loss(tape, logits, labels)`.
/// Parameters are never differentiated; only the input is.
pub fn pgd_attack_with<C, L>(
    model: &C,
    x: &Tensor,
    labels: &[usize],
    spec: &AttackSpec,
    rng: &mut Rng,
    loss: L,
) -> Result<Tensor>
where
    C: Classifier + ?Sized,
    L: Fn(&mut Tape, Var, &[usize]) -> Result<Var>,
{
    spec.validate()?;
    if spec.is_identity() {
        return Ok(x.clone());
    }
    let per = image_len(x);
    let clamp_box = |delta: &mut [f64]| {
        for (d, xv) in delta.iter_mut().zip(x.data()) {
            *d = (xv + *d).clamp(0.0, 1.0) - xv;
        }
    };
    let mut delta = if spec.random_start {
        random_start(x.shape(), per, spec.norm, spec.epsilon, rng)
    } else {
        vec![0.0; x.numel()]
    };
    clamp_box(&mut delta);
    let alpha = spec.resolved_step_size();
    for step in 1..=spec.steps {
        let mut tape = Tape::new();
        let adv: Vec<f64> = x.data().iter().zip(&delta).map(|(a, b)| a + b).collect();
        let xv = tape.param(Tensor::new(x.shape().to_vec(), adv)?);
        let logits = model.logits(&mut tape, xv)?;
        let l = loss(&mut tape, logits, labels)?;
        tape.backward(l)?;
        let g = tape.grad(xv).ok_or_else(|| Error::Usage("attack loss does not depend on the input".into()))?;
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("non-finite input gradient at PGD step {step}")));
        }
        match spec.norm {
            Norm::L2 => {
                for (d, gi) in delta.chunks_mut(per).zip(g.chunks(per)) {
                    let n = gi.iter().map(|v| v * v).sum::<f64>().sqrt();
                    if n > 0.0 {
                        d.iter_mut().zip(gi).for_each(|(d, g)| *d += alpha * g / n);
                    }
                }
            }
            Norm::Linf => {
                for (d, gi) in delta.iter_mut().zip(g) {
                    if *gi != 0.0 {
                        *d += alpha * gi.signum();
                    }
                }
            }
        }
        project_in_place(&mut delta, per, spec.norm, spec.epsilon);
        clamp_box(&mut delta);
    }
    let adv = x.data().iter().zip(&delta).map(|(a, b)| a + b).collect();
    Tensor::new(x.shape().to_vec(), adv)
}
