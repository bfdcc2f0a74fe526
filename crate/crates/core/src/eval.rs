//! Evaluation metrics: clean and adversarial accuracy, epsilon sweeps,
//! Brier scores under contrast shift, contrast histograms and seed
//! aggregation.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::attack::{pgd_attack, AttackSpec};
use crate::augment::shift_testset;
use crate::autodiff::Tape;
use crate::data::LabeledDataset;
use crate::divergence::Distribution;
use crate::error::{Error, Result};
use crate::model::Classifier;
use crate::rng;
use crate::tensor::Tensor;

/// Images per forward pass during evaluation.
pub const EVAL_BATCH: usize = 100;

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn chunks(n: usize) -> impl Iterator<Item = Vec<usize>> {
    (0..n).step_by(EVAL_BATCH).map(move |s| (s..(s + EVAL_BATCH).min(n)).collect())
}

fn logits_of<C: Classifier + ?Sized>(model: &C, x: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let v = tape.constant(x.clone());
    let out = model.logits(&mut tape, v)?;
    Ok(tape.value(out).clone())
}

fn require_nonempty(ds: &LabeledDataset) -> Result<()> {
    if ds.is_empty() {
        return Err(Error::Usage(format!("dataset `{}` is empty", ds.name)));
    }
    Ok(())
}

/// Accuracy and mean cross-entropy of a model on attacked inputs.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdversarialMetrics {
    pub accuracy: f64,
    pub mean_cross_entropy: f64,
}

/// Attacks every image of `ds` (deterministically: the random start is
/// disabled) and scores the model on the result.
pub fn adversarial_metrics<C: Classifier + ?Sized>(
    model: &C,
    ds: &LabeledDataset,
    spec: &AttackSpec,
) -> Result<AdversarialMetrics> {
    require_nonempty(ds)?;
    let spec = AttackSpec {
        random_start: false,
        ..spec.clone()
    };
    let mut correct = 0usize;
    let mut ce = 0.0;
    // unused: no random start
    let mut unused = rng::stream(0, &[]);
    for idx in chunks(ds.len()) {
        let (x, y) = ds.batch(&idx)?;
        let adv = pgd_attack(model, &x, &y, &spec, &mut unused)?;
        let logits = logits_of(model, &adv)?;
        let k = logits.shape()[1];
        for (row, &label) in logits.data().chunks(k).zip(&y) {
            if argmax(row) == label {
                correct += 1;
            }
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            ce += lse - row[label];
        }
    }
    let n = ds.len() as f64;
    Ok(AdversarialMetrics {
        accuracy: correct as f64 / n,
        mean_cross_entropy: ce / n,
    })
}

/// Fraction of `ds` classified correctly after a PGD attack.
pub fn adversarial_accuracy<C: Classifier + ?Sized>(model: &C, ds: &LabeledDataset, spec: &AttackSpec) -> Result<f64> {
    Ok(adversarial_metrics(model, ds, spec)?.accuracy)
}

/// Clean accuracy (the attack path with epsilon 0).
pub fn clean_accuracy<C: Classifier + ?Sized>(model: &C, ds: &LabeledDataset) -> Result<f64> {
    adversarial_accuracy(model, ds, &AttackSpec::new(Default::default(), 0.0, 0))
}

/// Adversarial accuracy at each epsilon of an ascending list starting at 0.
pub fn epsilon_sweep<C: Classifier + ?Sized>(
    model: &C,
    ds: &LabeledDataset,
    base: &AttackSpec,
    eps_list: &[f64],
) -> Result<Vec<(f64, f64)>> {
    check_eps_list(eps_list)?;
    eps_list
        .iter()
        .map(|&eps| {
            let spec = AttackSpec {
                epsilon: eps,
                ..base.clone()
            };
            Ok((eps, adversarial_accuracy(model, ds, &spec)?))
        })
        .collect()
}

pub fn check_eps_list(eps_list: &[f64]) -> Result<()> {
    match eps_list.first() {
        None => return Err(Error::Usage("epsilon list is empty".into())),
        Some(&e) if e != 0.0 => return Err(Error::Usage(format!("epsilon list must start at 0, found {e}"))),
        _ => {}
    }
    if eps_list.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(Error::Usage(format!("epsilon list {eps_list:?} is not strictly ascending")));
    }
    Ok(())
}

/// Softmax outputs for every image of `ds`.
pub fn predict_distributions<C: Classifier + ?Sized>(model: &C, ds: &LabeledDataset) -> Result<Vec<Distribution>> {
    let mut out = Vec::with_capacity(ds.len());
    for idx in chunks(ds.len()) {
        let (x, _) = ds.batch(&idx)?;
        let logits = logits_of(model, &x)?;
        let k = logits.shape()[1];
        for row in logits.data().chunks(k) {
            out.push(Distribution::from_logits(row)?);
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BrierMode {
    /// Binary for two classes, multiclass otherwise.
    #[default]
    Auto,
    Binary,
    Multiclass,
}

impl BrierMode {
    pub fn resolve(self, num_classes: usize) -> BrierMode {
        match self {
            BrierMode::Auto if num_classes == 2 => BrierMode::Binary,
            BrierMode::Auto => BrierMode::Multiclass,
            m => m,
        }
    }
}

impl fmt::Display for BrierMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BrierMode::Auto => "auto",
            BrierMode::Binary => "binary",
            BrierMode::Multiclass => "multiclass",
        })
    }
}

/// Binary: mean of `(p_1 - y)^2`. Multiclass: mean over samples of the
/// squared distance between the distribution and the one-hot label.
pub fn brier_score(probs: &[Distribution], labels: &[usize], mode: BrierMode) -> Result<f64> {
    if probs.is_empty() || probs.len() != labels.len() {
        return Err(Error::Usage(format!(
            "brier score needs equal, nonzero counts of predictions ({}) and labels ({})",
            probs.len(),
            labels.len()
        )));
    }
    let k = probs[0].classes();
    if let Some(p) = probs.iter().find(|p| p.classes() != k) {
        return Err(Error::Dimension {
            op: "brier_score",
            axis: "classes".into(),
            expected: k,
            actual: p.classes(),
        });
    }
    if let Some(&y) = labels.iter().find(|&&y| y >= k) {
        return Err(Error::Data(format!("label {y} is outside [0, {k})")));
    }
    let total: f64 = match mode.resolve(k) {
        BrierMode::Binary => {
            if k != 2 {
                return Err(Error::Usage(format!("binary brier score needs 2 classes, got {k}")));
            }
            probs
                .iter()
                .zip(labels)
                .map(|(p, &y)| (p.probs()[1] - if y == 1 { 1.0 } else { 0.0 }).powi(2))
                .sum()
        }
        _ => probs
            .iter()
            .zip(labels)
            .map(|(p, &y)| {
                p.probs()
                    .iter()
                    .enumerate()
                    .map(|(c, &pc)| (pc - if c == y { 1.0 } else { 0.0 }).powi(2))
                    .sum::<f64>()
            })
            .sum(),
    };
    Ok(total / probs.len() as f64)
}

/// A named contrast-shifted evaluation view.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShiftView {
    pub name: String,
    pub factor: f64,
}

impl ShiftView {
    pub fn new(name: impl Into<String>, factor: f64) -> Self {
        ShiftView {
            name: name.into(),
            factor,
        }
    }

    pub fn defaults() -> Vec<ShiftView> {
        vec![
            ShiftView::new("clean", 1.0),
            ShiftView::new("high_contrast", crate::augment::HIGH_CONTRAST),
            ShiftView::new("low_contrast", crate::augment::LOW_CONTRAST),
        ]
    }
}

/// Brier score on each contrast-shifted copy of `ds`.
pub fn shifted_brier<C: Classifier + ?Sized>(
    model: &C,
    ds: &LabeledDataset,
    views: &[ShiftView],
    mode: BrierMode,
) -> Result<Vec<(String, f64)>> {
    require_nonempty(ds)?;
    views
        .iter()
        .map(|v| {
            let shifted = shift_testset(ds, v.factor)?;
            let probs = predict_distributions(model, &shifted)?;
            Ok((v.name.clone(), brier_score(&probs, shifted.labels(), mode)?))
        })
        .collect()
}

/// Pixel standard deviation of one image.
pub fn rms_contrast(image: &Tensor) -> f64 {
    let n = image.numel() as f64;
    let mean = image.data().iter().sum::<f64>() / n;
    (image.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct HistogramRow {
    pub view: String,
    pub bin_low: f64,
    pub bin_high: f64,
    pub count: usize,
}

/// Upper edge of the RMS-contrast histogram.
pub const CONTRAST_RANGE: f64 = 0.5;

/// Histogram of per-image RMS contrast over `[0, 0.5]` for each view;
/// values at or above the top edge land in the last bin.
pub fn contrast_histogram(ds: &LabeledDataset, views: &[ShiftView], bins: usize) -> Result<Vec<HistogramRow>> {
    if bins < 2 {
        return Err(Error::config("eval.bins", "must be at least 2"));
    }
    let width = CONTRAST_RANGE / bins as f64;
    let mut rows = Vec::with_capacity(views.len() * bins);
    for v in views {
        let shifted = shift_testset(ds, v.factor)?;
        let mut counts = vec![0usize; bins];
        for img in shifted.images() {
            let b = ((rms_contrast(img) / width) as usize).min(bins - 1);
            counts[b] += 1;
        }
        rows.extend(counts.into_iter().enumerate().map(|(i, count)| HistogramRow {
            view: v.name.clone(),
            bin_low: i as f64 * width,
            bin_high: (i + 1) as f64 * width,
            count,
        }));
    }
    Ok(rows)
}

/// Metrics of one trained model.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SeedResult {
    pub seed: u64,
    pub clean_accuracy: f64,
    /// `(epsilon, accuracy)` in ascending epsilon order.
    pub adv_accuracy: Vec<(f64, f64)>,
    /// `(view, brier)` in view order.
    pub brier: Vec<(String, f64)>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AggregateRow {
    pub metric: String,
    pub key: String,
    pub mean: f64,
    pub stddev: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SeedFailure {
    pub seed: u64,
    pub error: String,
}

/// Per-seed results of one method plus their mean and population
/// standard deviation.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub method: String,
    pub per_seed: Vec<SeedResult>,
    pub failures: Vec<SeedFailure>,
    pub aggregate: Vec<AggregateRow>,
}

/// Mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Formats an epsilon the same way everywhere it is used as a key.
pub fn eps_key(eps: f64) -> String {
    format!("{eps}")
}

impl EvalReport {
    /// Sorts results by seed and computes the aggregate rows.
    pub fn new(method: impl Into<String>, mut per_seed: Vec<SeedResult>, mut failures: Vec<SeedFailure>) -> Self {
        per_seed.sort_by_key(|r| r.seed);
        failures.sort_by_key(|f| f.seed);
        let mut groups: BTreeMap<(String, String), Vec<f64>> = BTreeMap::new();
        let mut order: Vec<(String, String)> = Vec::new();
        let mut push = |metric: &str, key: String, v: f64| {
            let k = (metric.to_string(), key);
            if !groups.contains_key(&k) {
                order.push(k.clone());
            }
            groups.entry(k).or_default().push(v);
        };
        for r in &per_seed {
            push("clean_accuracy", String::new(), r.clean_accuracy);
            for &(eps, acc) in &r.adv_accuracy {
                push("adv_accuracy", eps_key(eps), acc);
            }
            for (view, b) in &r.brier {
                push("brier", view.clone(), *b);
            }
        }
        let aggregate = order
            .into_iter()
            .map(|k| {
                let (mean, stddev) = mean_std(&groups[&k]);
                AggregateRow {
                    metric: k.0,
                    key: k.1,
                    mean,
                    stddev,
                }
            })
            .collect();
        EvalReport {
            method: method.into(),
            per_seed,
            failures,
            aggregate,
        }
    }

    pub fn mean(&self, metric: &str, key: &str) -> Option<f64> {
        self.aggregate
            .iter()
            .find(|r| r.metric == metric && r.key == key)
            .map(|r| r.mean)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attack::Norm;
    use crate::autodiff::Var;
    use proptest::prelude::*;

    /// Logits `x W + b` on flattened images.
    struct Linear {
        w: Vec<f64>,
        b: Vec<f64>,
        k: usize,
    }

    impl Classifier for Linear {
        fn logits(&self, tape: &mut Tape, x: Var) -> Result<Var> {
            let s = tape.value(x).shape().to_vec();
            let d = s[1..].iter().product();
            let flat = tape.reshape(x, vec![s[0], d])?;
            let w = tape.constant(Tensor::new(vec![d, self.k], self.w.clone())?);
            let b = tape.constant(Tensor::from_vec(self.b.clone()));
            tape.affine(flat, w, b)
        }
    }

    fn points(xs: &[(f64, f64)], labels: Vec<usize>) -> LabeledDataset {
        let imgs = xs.iter().map(|&(a, b)| Tensor::new(vec![1, 1, 2], vec![a, b]).unwrap()).collect();
        LabeledDataset::new("points", 2, imgs, labels).unwrap()
    }

    fn d(v: &[f64]) -> Distribution {
        Distribution::new(v.to_vec()).unwrap()
    }

    #[test]
    fn argmax_breaks_ties_low() {
        assert_eq!(argmax(&[1.0, 1.0, 0.0]), 0);
        assert_eq!(argmax(&[0.0, 2.0, 2.0]), 1);
    }

    #[test]
    fn hand_placed_points_under_attack() {
        // class-1 logit minus class-0 logit is x0 - 0.5; margins along the
        // L2 direction are |x0 - 0.5|
        let model = Linear {
            w: vec![-0.5, 0.5, 0.0, 0.0],
            b: vec![0.25, -0.25],
            k: 2,
        };
        let ds = points(&[(0.9, 0.5), (0.55, 0.5), (0.1, 0.5), (0.45, 0.5)], vec![1, 1, 0, 0]);
        assert_eq!(clean_accuracy(&model, &ds).unwrap(), 1.0);
        let spec = AttackSpec::new(Norm::L2, 0.1, 20);
        // eps 0.1 exceeds the two 0.05 margins but not the two 0.4 margins
        assert_eq!(adversarial_accuracy(&model, &ds, &spec).unwrap(), 0.5);
        let zero = AttackSpec::new(Norm::L2, 0.0, 20);
        assert_eq!(adversarial_accuracy(&model, &ds, &zero).unwrap(), 1.0);
    }

    #[test]
    fn constant_model_scores_chance() {
        let model = Linear {
            w: vec![0.0; 4],
            b: vec![0.0, 0.0],
            k: 2,
        };
        let ds = points(&[(0.1, 0.2), (0.3, 0.4), (0.5, 0.6), (0.7, 0.8)], vec![0, 1, 0, 1]);
        let sweep = epsilon_sweep(&model, &ds, &AttackSpec::new(Norm::Linf, 0.0, 5), &[0.0, 0.1, 0.5]).unwrap();
        assert!(sweep.iter().all(|&(_, a)| a == 0.5));
        let empty = LabeledDataset::new("e", 2, vec![], vec![]).unwrap();
        assert!(matches!(clean_accuracy(&model, &empty), Err(Error::Usage(_))));
    }

    #[test]
    fn sweep_list_validation() {
        assert!(check_eps_list(&[0.0, 0.5, 1.0]).is_ok());
        assert!(check_eps_list(&[0.0, 1.0, 0.5]).is_err());
        assert!(check_eps_list(&[0.5]).is_err());
        assert!(check_eps_list(&[]).is_err());
    }

    #[test]
    fn brier_examples() {
        let half = vec![d(&[0.5, 0.5]); 4];
        assert_eq!(brier_score(&half, &[0, 1, 1, 0], BrierMode::Binary).unwrap(), 0.25);
        let v = brier_score(&[d(&[0.1, 0.9]), d(&[0.8, 0.2])], &[1, 0], BrierMode::Binary).unwrap();
        assert!((v - 0.025).abs() < 1e-12);
        assert_eq!(brier_score(&[d(&[0.0, 1.0, 0.0])], &[1], BrierMode::Auto).unwrap(), 0.0);
        assert!(matches!(
            brier_score(&[d(&[0.2, 0.3, 0.5])], &[1], BrierMode::Binary),
            Err(Error::Usage(_))
        ));
        assert!(brier_score(&[], &[], BrierMode::Auto).is_err());
        assert_eq!(brier_score(&[d(&[0.0, 1.0])], &[0], BrierMode::Multiclass).unwrap(), 2.0);
    }

    #[test]
    fn histogram_examples() {
        let flat = vec![Tensor::full(&[1, 2, 2], 0.4); 3];
        let ds = LabeledDataset::new("flat", 2, flat, vec![0, 1, 0]).unwrap();
        let rows = contrast_histogram(&ds, &[ShiftView::new("clean", 1.0)], 5).unwrap();
        assert_eq!(rows.iter().map(|r| r.count).collect::<Vec<_>>(), vec![3, 0, 0, 0, 0]);
        assert!((rows[4].bin_high - 0.5).abs() < 1e-15);
        assert!(contrast_histogram(&ds, &[], 1).is_err());
    }

    #[test]
    fn aggregation_matches_recomputation() {
        let mk = |seed, a: f64| SeedResult {
            seed,
            clean_accuracy: a,
            adv_accuracy: vec![(0.0, a), (0.5, a / 2.0)],
            brier: vec![("clean".into(), 1.0 - a)],
        };
        let r = EvalReport::new("m", vec![mk(3, 0.9), mk(1, 0.7), mk(2, 0.8)], vec![]);
        assert_eq!(r.per_seed.iter().map(|s| s.seed).collect::<Vec<_>>(), vec![1, 2, 3]);
        let row = r.aggregate.iter().find(|a| a.metric == "adv_accuracy" && a.key == "0.5").unwrap();
        assert!((row.mean - 0.4).abs() < 1e-12);
        let want = ((0.05f64.powi(2) * 2.0) / 3.0).sqrt();
        assert!((row.stddev - want).abs() < 1e-12);
        let single = EvalReport::new("m", vec![mk(1, 0.7)], vec![]);
        assert_eq!(single.mean("clean_accuracy", ""), Some(0.7));
        assert!(single.aggregate.iter().all(|a| a.stddev == 0.0));
    }

    fn dist2() -> impl Strategy<Value = Distribution> {
        (0.0f64..=1.0).prop_map(|p| d(&[1.0 - p, p]))
    }

    proptest! {
        #[test]
        fn brier_bounds_and_binary_identity(ps in proptest::collection::vec(dist2(), 1..20), seed in any::<u64>()) {
            let labels: Vec<usize> = (0..ps.len()).map(|i| ((seed >> (i % 64)) & 1) as usize).collect();
            let b = brier_score(&ps, &labels, BrierMode::Binary).unwrap();
            let m = brier_score(&ps, &labels, BrierMode::Multiclass).unwrap();
            prop_assert!((0.0..=1.0).contains(&b));
            prop_assert!((0.0..=2.0).contains(&m));
            prop_assert!((m - 2.0 * b).abs() < 1e-12);
        }

        #[test]
        fn aggregate_is_order_invariant(vals in proptest::collection::vec(0.0f64..1.0, 1..6)) {
            let rows: Vec<SeedResult> = vals.iter().enumerate().map(|(i, &v)| SeedResult {
                seed: i as u64, clean_accuracy: v, adv_accuracy: vec![(0.0, v)], brier: vec![],
            }).collect();
            let mut rev = rows.clone();
            rev.reverse();
            prop_assert_eq!(EvalReport::new("m", rows, vec![]), EvalReport::new("m", rev, vec![]));
        }
    }
}
