//! Training objectives. Each objective is evaluated in two phases: views of
//! the batch (adversarial, augmented, contrast-shifted) are built with the
//! parameters frozen, then the loss over those fixed views is differentiated
//! with respect to the parameters.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::attack::{pgd_attack, AttackSpec};
use crate::augment::{augmix_sample, contrast_shift, AugmixSpec, ContrastSpec};
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::model::{BoundParams, Gradients, Model, Network, ParameterSet};
use crate::rng::{self, tags};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ObjectiveKind {
    Standard,
    #[serde(rename = "at")]
    AT,
    AdvL,
    DataAug,
    AugMix,
    RobustAugMix,
    #[serde(rename = "rtda")]
    RTDA,
}

impl ObjectiveKind {
    pub const ALL: [ObjectiveKind; 7] = [
        ObjectiveKind::Standard,
        ObjectiveKind::AT,
        ObjectiveKind::AdvL,
        ObjectiveKind::DataAug,
        ObjectiveKind::AugMix,
        ObjectiveKind::RobustAugMix,
        ObjectiveKind::RTDA,
    ];

    pub fn label(self) -> &'static str {
        match self {
            ObjectiveKind::Standard => "Standard",
            ObjectiveKind::AT => "AT",
            ObjectiveKind::AdvL => "AdvL",
            ObjectiveKind::DataAug => "DataAug",
            ObjectiveKind::AugMix => "AugMix",
            ObjectiveKind::RobustAugMix => "RobustAugMix",
            ObjectiveKind::RTDA => "RTDA",
        }
    }

    pub fn needs_attack(self) -> bool {
        matches!(
            self,
            ObjectiveKind::AT | ObjectiveKind::AdvL | ObjectiveKind::RobustAugMix | ObjectiveKind::RTDA
        )
    }

    pub fn needs_augmix(self) -> bool {
        matches!(self, ObjectiveKind::AugMix | ObjectiveKind::RobustAugMix | ObjectiveKind::RTDA)
    }

    /// Kinds that accept a `contrast` list.
    pub fn uses_contrast(self) -> bool {
        matches!(self, ObjectiveKind::DataAug | ObjectiveKind::RobustAugMix | ObjectiveKind::RTDA)
    }

    pub fn has_jsd(self) -> bool {
        self.needs_augmix()
    }

    pub fn default_lambda(self) -> f64 {
        match self {
            ObjectiveKind::Standard | ObjectiveKind::AT => 0.0,
            ObjectiveKind::AdvL | ObjectiveKind::DataAug => 1.0,
            ObjectiveKind::AugMix | ObjectiveKind::RobustAugMix | ObjectiveKind::RTDA => 12.0,
        }
    }
}

impl fmt::Display for ObjectiveKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for ObjectiveKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ObjectiveKind::ALL
            .into_iter()
            .find(|k| k.label().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::config("objective.kind", format!("unknown objective `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectiveSpec {
    pub kind: ObjectiveKind,
    /// Defaults to 12 for objectives with a consistency term, 1 for AdvL and
    /// DataAug.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attack: Option<AttackSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub augmix: Option<AugmixSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub contrast: Option<Vec<ContrastSpec>>,
    /// Display name; defaults to the kind's label.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
}

impl ObjectiveSpec {
    pub fn new(kind: ObjectiveKind) -> Self {
        ObjectiveSpec {
            kind,
            lambda: None,
            attack: None,
            augmix: None,
            contrast: None,
            name: None,
        }
    }

    pub fn with_lambda(mut self, lambda: f64) -> Self {
        self.lambda = Some(lambda);
        self
    }

    pub fn with_attack(mut self, attack: AttackSpec) -> Self {
        self.attack = Some(attack);
        self
    }

    pub fn with_augmix(mut self, augmix: AugmixSpec) -> Self {
        self.augmix = Some(augmix);
        self
    }

    pub fn with_contrast(mut self, contrast: Vec<ContrastSpec>) -> Self {
        self.contrast = Some(contrast);
        self
    }

    pub fn lambda(&self) -> f64 {
        self.lambda.unwrap_or_else(|| self.kind.default_lambda())
    }

    pub fn display_name(&self) -> &str {
        self.name.as_deref().unwrap_or_else(|| self.kind.label())
    }

    pub fn validate(&self) -> Result<()> {
        let kind = self.kind;
        if let Some(l) = self.lambda {
            if !(l.is_finite() && l >= 0.0) {
                return Err(Error::config("objective.lambda", "must be a finite number >= 0"));
            }
        }
        match (&self.attack, kind.needs_attack()) {
            (None, true) => return Err(Error::config("objective.attack", format!("{kind} requires an attack"))),
            (Some(a), _) => a.validate()?,
            _ => {}
        }
        match (&self.augmix, kind.needs_augmix()) {
            (None, true) => return Err(Error::config("objective.augmix", format!("{kind} requires augmix settings"))),
            (Some(a), _) => a.validate()?,
            _ => {}
        }
        match &self.contrast {
            None if kind == ObjectiveKind::DataAug => {
                return Err(Error::config("objective.contrast", "DataAug requires at least one contrast view"))
            }
            Some(c) if !kind.uses_contrast() => {
                if !c.is_empty() {
                    return Err(Error::config("objective.contrast", format!("{kind} does not use contrast views")));
                }
            }
            Some(c) => {
                if kind == ObjectiveKind::DataAug && c.is_empty() {
                    return Err(Error::config("objective.contrast", "DataAug requires at least one contrast view"));
                }
                for (i, spec) in c.iter().enumerate() {
                    spec.validate(&format!("objective.contrast[{i}]"))?;
                }
            }
            None => {}
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViewTag {
    Clean,
    #[serde(rename = "augmented_1")]
    Augmented1,
    #[serde(rename = "augmented_2")]
    Augmented2,
    Adversarial,
    ShiftedHigh,
    ShiftedLow,
}

impl ViewTag {
    fn shifted(spec: &ContrastSpec) -> Self {
        if spec.factor >= 1.0 {
            ViewTag::ShiftedHigh
        } else {
            ViewTag::ShiftedLow
        }
    }
}

impl fmt::Display for ViewTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ViewTag::Clean => "clean",
            ViewTag::Augmented1 => "augmented_1",
            ViewTag::Augmented2 => "augmented_2",
            ViewTag::Adversarial => "adversarial",
            ViewTag::ShiftedHigh => "shifted_high",
            ViewTag::ShiftedLow => "shifted_low",
        })
    }
}

/// The input batches an objective is evaluated on, built with the
/// parameters frozen. `views[0]` is always the clean batch.
#[derive(Clone, Debug, PartialEq)]
pub struct Views {
    pub tags: Vec<ViewTag>,
    pub views: Vec<Tensor>,
    pub labels: Vec<usize>,
}

impl Views {
    pub fn get(&self, tag: ViewTag) -> Option<&Tensor> {
        self.tags.iter().position(|&t| t == tag).map(|i| &self.views[i])
    }

    fn index(&self, tag: ViewTag) -> usize {
        self.tags.iter().position(|&t| t == tag).expect("view prepared")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LossBreakdown {
    pub total: f64,
    /// Leading cross-entropy term.
    pub ce_term: f64,
    /// The term weighted by lambda: the JSD for consistency objectives, the
    /// second cross-entropy for AdvL and DataAug, 0 otherwise.
    pub consistency_term: f64,
    pub lambda: f64,
    pub views_used: Vec<ViewTag>,
}

fn augment_batch(x: &Tensor, spec: &AugmixSpec, seed: u64, draw: u64) -> Result<Tensor> {
    let b = x.shape()[0];
    let imgs: Vec<Tensor> = (0..b)
        .map(|i| {
            let mut r = rng::stream(seed, &[tags::AUGMENT, spec.seed, draw, i as u64]);
            augmix_sample(&x.row(i), spec, &mut r)
        })
        .collect();
    Tensor::stack(&imgs)
}

fn shift_batch(x: &Tensor, spec: &ContrastSpec) -> Result<Tensor> {
    let imgs: Vec<Tensor> = (0..x.shape()[0]).map(|i| contrast_shift(&x.row(i), spec)).collect();
    Tensor::stack(&imgs)
}

/// Builds every view `spec` needs for the batch `(x, labels)`. All
/// randomness comes from streams derived from `seed`; the attack runs
/// against `params` held constant.
pub fn prepare_views(
    spec: &ObjectiveSpec,
    model: &Model,
    params: &ParameterSet,
    x: &Tensor,
    labels: &[usize],
    seed: u64,
) -> Result<Views> {
    spec.validate()?;
    if x.rank() != 4 || x.shape()[0] != labels.len() {
        return Err(Error::Dimension {
            op: "objective",
            axis: "batch (axis 0 of x vs labels)".into(),
            expected: labels.len(),
            actual: x.shape().first().copied().unwrap_or(0),
        });
    }
    let kind = spec.kind;
    let mut tags_out = vec![ViewTag::Clean];
    let mut views = vec![x.clone()];
    if let (Some(aug), true) = (&spec.augmix, kind.needs_augmix()) {
        tags_out.push(ViewTag::Augmented1);
        views.push(augment_batch(x, aug, seed, 1)?);
        if kind == ObjectiveKind::AugMix {
            tags_out.push(ViewTag::Augmented2);
            views.push(augment_batch(x, aug, seed, 2)?);
        }
    }
    if let (Some(attack), true) = (&spec.attack, kind.needs_attack()) {
        let net = Network::new(model, params);
        let mut r = rng::stream(seed, &[tags::ATTACK]);
        tags_out.push(ViewTag::Adversarial);
        views.push(pgd_attack(&net, x, labels, attack, &mut r)?);
    }
    if kind.uses_contrast() {
        for c in spec.contrast.iter().flatten() {
            tags_out.push(ViewTag::shifted(c));
            views.push(shift_batch(x, c)?);
        }
    }
    Ok(Views {
        tags: tags_out,
        views,
        labels: labels.to_vec(),
    })
}

/// Differentiable objective over prepared views. Returns the scalar total
/// and the breakdown of its terms.
pub fn loss_on_views(
    tape: &mut Tape,
    spec: &ObjectiveSpec,
    model: &Model,
    params: &BoundParams,
    views: &Views,
) -> Result<(Var, LossBreakdown)> {
    let b = views.labels.len();
    let stacked: Vec<&Tensor> = views.views.iter().collect();
    let x = tape.constant(Tensor::concat_rows(&stacked)?);
    let all = model.forward(tape, params, x)?;
    let logits: Vec<Var> = (0..views.views.len())
        .map(|i| tape.slice_rows(all, i * b, b))
        .collect::<Result<_>>()?;
    let y = &views.labels;
    let lambda = spec.lambda();
    let clean = logits[0];
    let (ce, second) = match spec.kind {
        ObjectiveKind::Standard => (tape.cross_entropy(clean, y)?, None),
        ObjectiveKind::AT => (tape.cross_entropy(logits[views.index(ViewTag::Adversarial)], y)?, None),
        ObjectiveKind::AdvL => {
            let adv = tape.cross_entropy(logits[views.index(ViewTag::Adversarial)], y)?;
            (tape.cross_entropy(clean, y)?, Some(adv))
        }
        ObjectiveKind::DataAug => {
            let mut terms = Vec::new();
            for i in 1..logits.len() {
                terms.push(tape.cross_entropy(logits[i], y)?);
            }
            let mut sum = terms[0];
            for &t in &terms[1..] {
                sum = tape.add(sum, t)?;
            }
            let mean = tape.scale(sum, 1.0 / terms.len() as f64);
            (tape.cross_entropy(clean, y)?, Some(mean))
        }
        ObjectiveKind::AugMix | ObjectiveKind::RobustAugMix => (tape.cross_entropy(clean, y)?, Some(tape.jsd(&logits)?)),
        ObjectiveKind::RTDA => {
            let ce = tape.cross_entropy(logits[views.index(ViewTag::Adversarial)], y)?;
            (ce, Some(tape.jsd(&logits)?))
        }
    };
    let ce_value = tape.value(ce).data()[0];
    let (total, consistency) = match second {
        Some(s) => {
            let weighted = tape.scale(s, lambda);
            (tape.add(ce, weighted)?, tape.value(s).data()[0])
        }
        None => (ce, 0.0),
    };
    let breakdown = LossBreakdown {
        total: tape.value(total).data()[0],
        ce_term: ce_value,
        consistency_term: consistency,
        lambda: if second.is_some() { lambda } else { 0.0 },
        views_used: views.tags.clone(),
    };
    Ok((total, breakdown))
}

/// Loss of `spec` on one batch without gradients.
pub fn objective_loss(
    spec: &ObjectiveSpec,
    model: &Model,
    params: &ParameterSet,
    x: &Tensor,
    labels: &[usize],
    seed: u64,
) -> Result<LossBreakdown> {
    let views = prepare_views(spec, model, params, x, labels, seed)?;
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, false);
    Ok(loss_on_views(&mut tape, spec, model, &bound, &views)?.1)
}

/// Loss and parameter gradients of `spec` on one batch. The views are
/// constants, so no gradient flows through the attack's construction.
pub fn objective_gradients(
    spec: &ObjectiveSpec,
    model: &Model,
    params: &ParameterSet,
    x: &Tensor,
    labels: &[usize],
    seed: u64,
) -> Result<(LossBreakdown, Gradients)> {
    let views = prepare_views(spec, model, params, x, labels, seed)?;
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, true);
    let (total, breakdown) = loss_on_views(&mut tape, spec, model, &bound, &views)?;
    if !breakdown.total.is_finite() {
        return Err(Error::Numeric(format!("{} loss is not finite ({})", spec.kind, breakdown.total)));
    }
    tape.backward(total)?;
    Ok((breakdown, bound.gradients(&tape)))
}
