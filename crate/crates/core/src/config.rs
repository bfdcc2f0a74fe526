//! JSON run configuration shared by the `train`, `eval` and `bench`
//! commands. Unknown keys are rejected everywhere.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::attack::{AttackSpec, Norm, StepSize};
use crate::augment::{AugmixSpec, ContrastSpec};
use crate::data::{generate_synthetic, load_dataset, split_dataset, LabeledDataset, SyntheticSpec};
use crate::error::{Error, Result};
use crate::eval::{check_eps_list, BrierMode, ShiftView};
use crate::model::{ModelConfig, SgdConfig};
use crate::objective::{ObjectiveKind, ObjectiveSpec};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetConfig {
    Synthetic(SyntheticSpec),
    Directory {
        image_dir: PathBuf,
        manifest: PathBuf,
        num_classes: usize,
    },
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig::Synthetic(SyntheticSpec::default())
    }
}

impl DatasetConfig {
    pub fn num_classes(&self) -> usize {
        match self {
            DatasetConfig::Synthetic(s) => s.num_classes,
            DatasetConfig::Directory { num_classes, .. } => *num_classes,
        }
    }

    /// Relative paths are resolved against `base`.
    pub fn load(&self, base: &Path) -> Result<LabeledDataset> {
        match self {
            DatasetConfig::Synthetic(s) => generate_synthetic(s),
            DatasetConfig::Directory {
                image_dir,
                manifest,
                num_classes,
            } => load_dataset(&base.join(image_dir), &base.join(manifest), *num_classes),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitConfig {
    pub train_fraction: f64,
    pub seed: u64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig {
            train_fraction: 0.8,
            seed: 0,
        }
    }
}

/// Training perturbation budget: a number, or `"select"` to pick it from
/// the Standard model's epsilon sweep.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum EpsilonSetting {
    Fixed(f64),
    Select,
}

impl Serialize for EpsilonSetting {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            EpsilonSetting::Fixed(v) => s.serialize_f64(*v),
            EpsilonSetting::Select => s.serialize_str("select"),
        }
    }
}

impl<'de> Deserialize<'de> for EpsilonSetting {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            Value(f64),
            Name(String),
        }
        match Repr::deserialize(d)? {
            Repr::Value(v) => Ok(EpsilonSetting::Fixed(v)),
            Repr::Name(s) if s == "select" => Ok(EpsilonSetting::Select),
            Repr::Name(s) => Err(serde::de::Error::custom(format!(
                "epsilon must be a number or \"select\", got \"{s}\""
            ))),
        }
    }
}

/// Attack used inside training objectives that do not carry their own.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainAttackConfig {
    pub norm: Norm,
    pub epsilon: EpsilonSetting,
    pub steps: usize,
    pub step_size: StepSize,
    pub random_start: bool,
}

impl Default for TrainAttackConfig {
    fn default() -> Self {
        TrainAttackConfig {
            norm: Norm::L2,
            epsilon: EpsilonSetting::Select,
            steps: 7,
            step_size: StepSize::Auto,
            random_start: true,
        }
    }
}

impl TrainAttackConfig {
    pub fn with_epsilon(&self, epsilon: f64) -> AttackSpec {
        AttackSpec {
            norm: self.norm,
            epsilon,
            steps: self.steps,
            step_size: self.step_size,
            random_start: self.random_start,
        }
    }
}

/// How the training epsilon is chosen when it is `"select"`: the smallest
/// grid value at which the Standard models' mean adversarial accuracy on
/// the test split has fallen at least `drop` below their mean clean
/// accuracy, i.e. where it starts to decrease.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EpsilonSelection {
    pub grid: Vec<f64>,
    pub drop: f64,
}

impl Default for EpsilonSelection {
    fn default() -> Self {
        EpsilonSelection {
            grid: vec![0.0, 0.25, 0.5, 0.75, 1.0, 1.5, 2.0, 3.0],
            drop: 0.05,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalAttackConfig {
    pub norm: Norm,
    pub steps: usize,
    pub step_size: StepSize,
}

impl Default for EvalAttackConfig {
    fn default() -> Self {
        EvalAttackConfig {
            norm: Norm::L2,
            steps: 20,
            step_size: StepSize::Auto,
        }
    }
}

impl EvalAttackConfig {
    pub fn spec(&self) -> AttackSpec {
        AttackSpec {
            norm: self.norm,
            epsilon: 0.0,
            steps: self.steps,
            step_size: self.step_size,
            random_start: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Ascending, starting at 0. The training epsilon is added when known.
    pub eps_list: Vec<f64>,
    pub attack: EvalAttackConfig,
    pub views: Vec<ShiftView>,
    pub bins: usize,
    pub brier_mode: BrierMode,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            eps_list: vec![0.0, 0.5, 1.0, 2.0],
            attack: EvalAttackConfig::default(),
            views: ShiftView::defaults(),
            bins: 10,
            brier_mode: BrierMode::Auto,
        }
    }
}

fn default_objectives() -> Vec<ObjectiveSpec> {
    ObjectiveKind::ALL.into_iter().map(ObjectiveSpec::new).collect()
}

fn default_seeds() -> Vec<u64> {
    (0..5).collect()
}

fn default_output() -> PathBuf {
    PathBuf::from("runs/default")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub split: SplitConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub sgd: SgdConfig,
    /// Objectives to run; each is trained once per seed.
    #[serde(default = "default_objectives")]
    pub objectives: Vec<ObjectiveSpec>,
    #[serde(default)]
    pub train_attack: TrainAttackConfig,
    #[serde(default)]
    pub epsilon_selection: EpsilonSelection,
    /// AugMix settings for objectives that do not carry their own.
    #[serde(default)]
    pub augmix: AugmixSpec,
    /// Contrast views for DataAug, RobustAugMix and RTDA objectives that do
    /// not carry their own.
    #[serde(default = "default_train_contrast")]
    pub train_contrast: Vec<ContrastSpec>,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_output")]
    pub output_dir: PathBuf,
    /// Worker threads for (method, seed) cells; all cores when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub threads: Option<usize>,
}

fn default_train_contrast() -> Vec<ContrastSpec> {
    vec![ContrastSpec::high()]
}

impl Default for RunConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all fields have defaults")
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::config("config", e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        RunConfig::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Objective with run-level defaults filled in and the training
    /// epsilon applied where the attack was inherited.
    pub fn resolve_objective(&self, spec: &ObjectiveSpec, train_eps: f64) -> ObjectiveSpec {
        let mut s = spec.clone();
        if s.kind.needs_attack() && s.attack.is_none() {
            s.attack = Some(self.train_attack.with_epsilon(train_eps));
        }
        if s.kind.needs_augmix() && s.augmix.is_none() {
            s.augmix = Some(self.augmix.clone());
        }
        if s.kind.uses_contrast() && s.contrast.is_none() {
            s.contrast = Some(self.train_contrast.clone());
        }
        s
    }

    /// True when some objective takes its attack from `train_attack`.
    pub fn inherits_train_attack(&self) -> bool {
        self.objectives.iter().any(|o| o.kind.needs_attack() && o.attack.is_none())
    }

    pub fn validate(&self) -> Result<()> {
        if let DatasetConfig::Synthetic(s) = &self.dataset {
            s.validate()?;
        }
        if self.dataset.num_classes() != self.model.num_classes {
            return Err(Error::config(
                "model.num_classes",
                format!(
                    "is {} but the dataset has {} classes",
                    self.model.num_classes,
                    self.dataset.num_classes()
                ),
            ));
        }
        if !(self.split.train_fraction > 0.0 && self.split.train_fraction < 1.0) {
            return Err(Error::config("split.train_fraction", "must lie strictly between 0 and 1"));
        }
        self.model.validate()?;
        self.sgd.validate()?;
        if self.objectives.is_empty() {
            return Err(Error::config("objectives", "must list at least one objective"));
        }
        let mut names: Vec<&str> = self.objectives.iter().map(ObjectiveSpec::display_name).collect();
        names.sort_unstable();
        if let Some(w) = names.windows(2).find(|w| w[0] == w[1]) {
            return Err(Error::config(
                "objectives",
                format!("name `{}` appears twice; give one a distinct `name`", w[0]),
            ));
        }
        if let Some(n) = names.iter().find(|n| n.is_empty() || n.contains(['/', '\\', ','])) {
            return Err(Error::config("objectives", format!("name `{n}` must be nonempty without `/`, `\\` or `,`")));
        }
        let probe_eps = match self.train_attack.epsilon {
            EpsilonSetting::Fixed(e) => e,
            EpsilonSetting::Select => 1.0,
        };
        self.train_attack.with_epsilon(probe_eps).validate().map_err(|e| retarget(e, "train_attack", "attack"))?;
        for (i, o) in self.objectives.iter().enumerate() {
            self.resolve_objective(o, probe_eps)
                .validate()
                .map_err(|e| retarget(e, &format!("objectives[{i}]"), "objective"))?;
        }
        if self.train_attack.epsilon == EpsilonSetting::Select && self.inherits_train_attack() {
            check_eps_list(&self.epsilon_selection.grid).map_err(|e| Error::config("epsilon_selection.grid", e.to_string()))?;
            if !(0.0..=1.0).contains(&self.epsilon_selection.drop) {
                return Err(Error::config("epsilon_selection.drop", "must lie in [0, 1]"));
            }
        }
        check_eps_list(&self.eval.eps_list).map_err(|e| Error::config("eval.eps_list", e.to_string()))?;
        self.eval.attack.spec().validate().map_err(|e| retarget(e, "eval.attack", "attack"))?;
        if self.eval.views.is_empty() {
            return Err(Error::config("eval.views", "must list at least one view"));
        }
        for (i, v) in self.eval.views.iter().enumerate() {
            ContrastSpec::new(v.factor).validate(&format!("eval.views[{i}].factor"))?;
        }
        if self.eval.bins < 2 {
            return Err(Error::config("eval.bins", "must be at least 2"));
        }
        if self.seeds.is_empty() {
            return Err(Error::config("seeds", "must list at least one seed"));
        }
        let mut seeds = self.seeds.clone();
        seeds.sort_unstable();
        seeds.dedup();
        if seeds.len() != self.seeds.len() {
            return Err(Error::config("seeds", "must not repeat"));
        }
        if self.threads == Some(0) {
            return Err(Error::config("threads", "must be at least 1"));
        }
        Ok(())
    }

    /// Loads the dataset and splits it; the split does not depend on the
    /// training seeds.
    pub fn load_split(&self, base: &Path) -> Result<(LabeledDataset, LabeledDataset)> {
        let ds = self.dataset.load(base)?;
        if ds.num_classes != self.model.num_classes {
            return Err(Error::config("model.num_classes", "does not match the dataset"));
        }
        if let Some(shape) = ds.image_shape() {
            let want = [self.model.input_channels, self.model.input_size, self.model.input_size];
            if shape != want {
                return Err(Error::Data(format!("images have shape {shape:?}, model expects {want:?}")));
            }
        }
        split_dataset(&ds, self.split.train_fraction, self.split.seed)
    }
}

/// Rewrites the field path of a configuration error: a leading `segment`
/// is replaced by `prefix`, anything else is nested under it.
fn retarget(e: Error, prefix: &str, segment: &str) -> Error {
    match e {
        Error::Config { field, message } => {
            let field = match field.strip_prefix(segment) {
                Some(rest) if rest.is_empty() || rest.starts_with('.') => format!("{prefix}{rest}"),
                _ => format!("{prefix}.{field}"),
            };
            Error::Config { field, message }
        }
        other => other,
    }
}
