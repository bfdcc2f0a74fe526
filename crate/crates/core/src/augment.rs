//! Contrast shift and AugMix-style stochastic augmentation of `[C, H, W]`
//! images with pixels in `[0, 1]`.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::Rng as _;
use rand_distr::{Distribution as _, Gamma};
use serde::{Deserialize, Serialize};

use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const HIGH_CONTRAST: f64 = 1.8;
pub const LOW_CONTRAST: f64 = 0.4;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pivot {
    /// Mean of each image (over all channels and pixels).
    #[default]
    Mean,
    /// Mid-grey, 0.5.
    Fixed,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContrastSpec {
    pub factor: f64,
    #[serde(default)]
    pub pivot: Pivot,
}

impl ContrastSpec {
    pub fn new(factor: f64) -> Self {
        ContrastSpec {
            factor,
            pivot: Pivot::Mean,
        }
    }

    pub fn high() -> Self {
        ContrastSpec::new(HIGH_CONTRAST)
    }

    pub fn low() -> Self {
        ContrastSpec::new(LOW_CONTRAST)
    }

    pub fn validate(&self, field: &str) -> Result<()> {
        if !(self.factor.is_finite() && self.factor >= 0.0) {
            return Err(Error::config(field, format!("contrast factor {} must be finite and nonnegative", self.factor)));
        }
        Ok(())
    }
}

/// `clamp(pivot + factor * (x - pivot), 0, 1)`.
pub fn contrast_shift(x: &Tensor, spec: &ContrastSpec) -> Tensor {
    let pivot = match spec.pivot {
        Pivot::Mean => x.data().iter().sum::<f64>() / x.numel() as f64,
        Pivot::Fixed => 0.5,
    };
    x.map(|v| (pivot + spec.factor * (v - pivot)).clamp(0.0, 1.0))
}

/// Copy of `ds` with every image contrast-shifted by `factor`.
pub fn shift_testset(ds: &LabeledDataset, factor: f64) -> Result<LabeledDataset> {
    let spec = ContrastSpec::new(factor);
    spec.validate("contrast")?;
    ds.map_images(format!("{}-contrast{factor}", ds.name), |img| contrast_shift(img, &spec))
}

/// Primitive operations available inside augmentation chains.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugOp {
    Identity,
    /// Rotation about the image centre, severity in degrees.
    Rotate,
    /// Horizontal shift, severity in pixels (rounded).
    TranslateX,
    /// Vertical shift, severity in pixels (rounded).
    TranslateY,
    /// `x' = x + s (y - c)`.
    ShearX,
    /// `y' = y + s (x - c)`.
    ShearY,
    /// Quantize to `2^bits` levels, severity is `bits` (rounded).
    Posterize,
    /// Invert pixels at or above the severity threshold.
    Solarize,
}

impl AugOp {
    pub const ALL: [AugOp; 8] = [
        AugOp::Identity,
        AugOp::Rotate,
        AugOp::TranslateX,
        AugOp::TranslateY,
        AugOp::ShearX,
        AugOp::ShearY,
        AugOp::Posterize,
        AugOp::Solarize,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AugOp::Identity => "identity",
            AugOp::Rotate => "rotate",
            AugOp::TranslateX => "translate_x",
            AugOp::TranslateY => "translate_y",
            AugOp::ShearX => "shear_x",
            AugOp::ShearY => "shear_y",
            AugOp::Posterize => "posterize",
            AugOp::Solarize => "solarize",
        }
    }

    pub fn default_range(self) -> [f64; 2] {
        match self {
            AugOp::Identity => [0.0, 0.0],
            AugOp::Rotate => [-30.0, 30.0],
            AugOp::TranslateX | AugOp::TranslateY => [-3.0, 3.0],
            AugOp::ShearX | AugOp::ShearY => [-0.3, 0.3],
            AugOp::Posterize => [3.0, 6.0],
            AugOp::Solarize => [0.6, 1.0],
        }
    }
}

impl fmt::Display for AugOp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AugOp {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        AugOp::ALL
            .into_iter()
            .find(|op| op.name() == s)
            .ok_or_else(|| Error::config("augmix.op_set", format!("unknown augmentation op `{s}`")))
    }
}

/// Nearest-neighbour resampling: `source(row, col)` gives the (row, col)
/// to read for each output pixel; outside reads are 0.
fn resample(x: &Tensor, source: impl Fn(f64, f64) -> (f64, f64)) -> Tensor {
    let s = x.shape();
    let (c, h, w) = (s[0], s[1], s[2]);
    let mut out = vec![0.0; x.numel()];
    let data = x.data();
    for i in 0..h {
        for j in 0..w {
            let (si, sj) = source(i as f64, j as f64);
            let (si, sj) = (si.round(), sj.round());
            if si < 0.0 || sj < 0.0 || si >= h as f64 || sj >= w as f64 {
                continue;
            }
            let (si, sj) = (si as usize, sj as usize);
            for ch in 0..c {
                out[(ch * h + i) * w + j] = data[(ch * h + si) * w + sj];
            }
        }
    }
    Tensor::new(s.to_vec(), out).expect("shape preserved")
}

/// Applies one op with the given severity.
pub fn apply_op(x: &Tensor, op: AugOp, severity: f64) -> Tensor {
    let s = x.shape();
    let (cy, cx) = ((s[1] as f64 - 1.0) / 2.0, (s[2] as f64 - 1.0) / 2.0);
    let out = match op {
        AugOp::Identity => x.clone(),
        AugOp::Rotate => {
            let (sin, cos) = severity.to_radians().sin_cos();
            resample(x, |i, j| {
                let (dy, dx) = (i - cy, j - cx);
                (cy + cos * dy - sin * dx, cx + sin * dy + cos * dx)
            })
        }
        AugOp::TranslateX => {
            let d = severity.round();
            resample(x, |i, j| (i, j - d))
        }
        AugOp::TranslateY => {
            let d = severity.round();
            resample(x, |i, j| (i - d, j))
        }
        AugOp::ShearX => resample(x, |i, j| (i, j - severity * (i - cy))),
        AugOp::ShearY => resample(x, |i, j| (i - severity * (j - cx), j)),
        AugOp::Posterize => {
            let levels = 2f64.powi(severity.round().clamp(1.0, 8.0) as i32) - 1.0;
            x.map(|v| (v * levels).round() / levels)
        }
        AugOp::Solarize => x.map(|v| if v >= severity { 1.0 - v } else { v }),
    };
    out.map(|v| v.clamp(0.0, 1.0))
}

/// Applies `(op, severity)` pairs left to right.
pub fn apply_chain(x: &Tensor, chain: &[(AugOp, f64)]) -> Tensor {
    chain.iter().fold(x.map(|v| v.clamp(0.0, 1.0)), |acc, &(op, sev)| apply_op(&acc, op, sev))
}

fn default_op_set() -> Vec<AugOp> {
    vec![
        AugOp::Rotate,
        AugOp::TranslateX,
        AugOp::TranslateY,
        AugOp::ShearX,
        AugOp::ShearY,
        AugOp::Posterize,
        AugOp::Solarize,
    ]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmixSpec {
    pub width: usize,
    pub max_depth: usize,
    pub dirichlet_alpha: f64,
    pub beta_alpha: f64,
    pub op_set: Vec<AugOp>,
    /// Overrides of the per-op `[low, high]` severity range.
    pub severity_ranges: BTreeMap<AugOp, [f64; 2]>,
    /// Mixed into every augmentation stream.
    pub seed: u64,
}

impl Default for AugmixSpec {
    fn default() -> Self {
        AugmixSpec {
            width: 3,
            max_depth: 3,
            dirichlet_alpha: 1.0,
            beta_alpha: 1.0,
            op_set: default_op_set(),
            severity_ranges: BTreeMap::new(),
            seed: 0,
        }
    }
}

impl AugmixSpec {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 {
            return Err(Error::config("augmix.width", "must be at least 1"));
        }
        if self.max_depth == 0 {
            return Err(Error::config("augmix.max_depth", "must be at least 1"));
        }
        if !(self.dirichlet_alpha > 0.0 && self.dirichlet_alpha.is_finite()) {
            return Err(Error::config("augmix.dirichlet_alpha", "must be positive"));
        }
        if !(self.beta_alpha > 0.0 && self.beta_alpha.is_finite()) {
            return Err(Error::config("augmix.beta_alpha", "must be positive"));
        }
        if self.op_set.is_empty() {
            return Err(Error::config("augmix.op_set", "must name at least one op"));
        }
        for (op, [lo, hi]) in &self.severity_ranges {
            if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
                return Err(Error::config(
                    "augmix.severity_ranges",
                    format!("range for {op} must be finite with low <= high"),
                ));
            }
        }
        Ok(())
    }

    pub fn severity_range(&self, op: AugOp) -> [f64; 2] {
        self.severity_ranges.get(&op).copied().unwrap_or_else(|| op.default_range())
    }

    /// Draws a random chain of 1..=max_depth ops with severities.
    pub fn sample_chain(&self, rng: &mut Rng) -> Vec<(AugOp, f64)> {
        let depth = rng.random_range(1..=self.max_depth);
        (0..depth)
            .map(|_| {
                let op = self.op_set[rng.random_range(0..self.op_set.len())];
                let [lo, hi] = self.severity_range(op);
                let sev = if hi > lo { rng.random_range(lo..=hi) } else { lo };
                (op, sev)
            })
            .collect()
    }
}

fn gamma(shape: f64, rng: &mut Rng) -> f64 {
    Gamma::new(shape, 1.0).expect("validated shape").sample(rng)
}

/// Dirichlet(alpha * 1_n) via normalized Gamma draws.
pub fn sample_dirichlet(alpha: f64, n: usize, rng: &mut Rng) -> Vec<f64> {
    loop {
        let g: Vec<f64> = (0..n).map(|_| gamma(alpha, rng)).collect();
        let total: f64 = g.iter().sum();
        if total > 0.0 {
            return g.into_iter().map(|v| v / total).collect();
        }
    }
}

/// Beta(a, a) via two Gamma draws.
pub fn sample_beta(a: f64, rng: &mut Rng) -> f64 {
    loop {
        let (u, v) = (gamma(a, rng), gamma(a, rng));
        if u + v > 0.0 {
            return u / (u + v);
        }
    }
}

/// `m x + (1 - m) sum_i w_i chain_i`, clamped to `[0, 1]`.
pub fn augmix_combine(x: &Tensor, chains: &[Tensor], weights: &[f64], m: f64) -> Tensor {
    let mut out: Vec<f64> = x.data().iter().map(|v| m * v).collect();
    for (chain, w) in chains.iter().zip(weights) {
        let c = (1.0 - m) * w;
        for (o, v) in out.iter_mut().zip(chain.data()) {
            *o += c * v;
        }
    }
    Tensor::new(x.shape().to_vec(), out.into_iter().map(|v| v.clamp(0.0, 1.0)).collect()).expect("shape preserved")
}

/// One AugMix draw for a single image.
pub fn augmix_sample(x: &Tensor, spec: &AugmixSpec, rng: &mut Rng) -> Tensor {
    let weights = sample_dirichlet(spec.dirichlet_alpha, spec.width, rng);
    let chains: Vec<Tensor> = (0..spec.width)
        .map(|_| {
            let chain = spec.sample_chain(rng);
            apply_chain(x, &chain)
        })
        .collect();
    let m = sample_beta(spec.beta_alpha, rng);
    augmix_combine(x, &chains, &weights, m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use proptest::prelude::*;

    fn img(h: usize, w: usize, data: Vec<f64>) -> Tensor {
        Tensor::new(vec![1, h, w], data).unwrap()
    }

    #[test]
    fn contrast_examples() {
        let x = img(1, 2, vec![0.2, 0.8]);
        assert_eq!(contrast_shift(&x, &ContrastSpec::new(1.0)), x);
        assert_eq!(contrast_shift(&x, &ContrastSpec::new(0.0)).data(), &[0.5, 0.5]);
        assert_eq!(contrast_shift(&x, &ContrastSpec::new(1.8)).data(), &[0.0, 1.0]);
        let fixed = ContrastSpec {
            factor: 2.0,
            pivot: Pivot::Fixed,
        };
        let y = contrast_shift(&img(1, 2, vec![0.4, 0.4]), &fixed);
        assert!((y.data()[0] - 0.3).abs() < 1e-15);
        assert!(ContrastSpec::new(f64::NAN).validate("c").is_err());
    }

    #[test]
    fn shift_testset_preserves_labels_and_source() {
        let ds = crate::data::generate_synthetic(&crate::data::SyntheticSpec {
            samples_per_class: 5,
            noise_sigma: 0.0,
            ..Default::default()
        })
        .unwrap();
        let before = ds.clone();
        assert_eq!(shift_testset(&ds, 1.0).unwrap().images(), ds.images());
        let high = shift_testset(&ds, 1.8).unwrap();
        assert_eq!(ds, before);
        assert_eq!(high.labels(), ds.labels());
        let std = |t: &Tensor| {
            let m = t.data().iter().sum::<f64>() / t.numel() as f64;
            (t.data().iter().map(|v| (v - m).powi(2)).sum::<f64>() / t.numel() as f64).sqrt()
        };
        for (a, b) in ds.images().iter().zip(high.images()) {
            assert!(std(b) > std(a));
        }
    }

    #[test]
    fn chain_examples() {
        let x = img(4, 4, (0..16).map(|v| v as f64 / 16.0).collect());
        assert_eq!(apply_chain(&x, &[]), x);
        let y = apply_chain(&x, &[(AugOp::Rotate, 0.0), (AugOp::TranslateX, 0.0)]);
        assert!(y.data().iter().zip(x.data()).all(|(a, b)| (a - b).abs() < 1e-9));

        let mut delta = vec![0.0; 25];
        delta[2 * 5 + 1] = 1.0;
        let moved = apply_op(&img(5, 5, delta), AugOp::TranslateX, 2.0);
        let mut want = vec![0.0; 25];
        want[2 * 5 + 3] = 1.0;
        assert_eq!(moved.data(), &want[..]);
        let gone = apply_op(&moved, AugOp::TranslateX, 2.0);
        assert!(gone.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rotation_by_quarter_turn_permutes_pixels() {
        let x = img(3, 3, (0..9).map(|v| v as f64 / 9.0).collect());
        let r = apply_op(&x, AugOp::Rotate, 90.0);
        let mut a = x.data().to_vec();
        let mut b = r.data().to_vec();
        a.sort_by(f64::total_cmp);
        b.sort_by(f64::total_cmp);
        assert_eq!(a, b);
        assert_ne!(r, x);
        let back = apply_op(&apply_op(&r, AugOp::Rotate, 90.0), AugOp::Rotate, 180.0);
        assert_eq!(back, x);
    }

    #[test]
    fn posterize_and_solarize() {
        let x = img(1, 3, vec![0.1, 0.5, 0.9]);
        assert_eq!(apply_op(&x, AugOp::Posterize, 1.0).data(), &[0.0, 1.0, 1.0]);
        let s = apply_op(&x, AugOp::Solarize, 0.6);
        assert_eq!(s.data()[..2], [0.1, 0.5]);
        assert!((s.data()[2] - 0.1).abs() < 1e-15);
    }

    #[test]
    fn op_names_round_trip() {
        for op in AugOp::ALL {
            assert_eq!(op.name().parse::<AugOp>().unwrap(), op);
        }
        assert!(matches!("blur".parse::<AugOp>(), Err(Error::Config { .. })));
        let spec: AugmixSpec = serde_json::from_str(r#"{"op_set":["rotate","shear_x"]}"#).unwrap();
        assert_eq!(spec.op_set, vec![AugOp::Rotate, AugOp::ShearX]);
        assert!(serde_json::from_str::<AugmixSpec>(r#"{"op_set":["blur"]}"#).is_err());
    }

    #[test]
    fn augmix_special_cases() {
        let x = img(4, 4, (0..16).map(|v| (v as f64 / 15.0) * 0.8 + 0.1).collect());
        let spec = AugmixSpec {
            width: 1,
            ..Default::default()
        };
        let chain = apply_chain(&x, &spec.sample_chain(&mut stream(1, &[])));
        assert_eq!(augmix_combine(&x, &[chain], &[1.0], 1.0), x);

        let identity = AugmixSpec {
            op_set: vec![AugOp::Identity],
            ..Default::default()
        };
        let y = augmix_sample(&x, &identity, &mut stream(2, &[]));
        assert!(y.data().iter().zip(x.data()).all(|(a, b)| (a - b).abs() < 1e-15));

        let a = augmix_sample(&x, &AugmixSpec::default(), &mut stream(3, &[]));
        let b = augmix_sample(&x, &AugmixSpec::default(), &mut stream(3, &[]));
        assert_eq!(a, b);
        let c = augmix_sample(&x, &AugmixSpec::default(), &mut stream(4, &[]));
        assert_ne!(a, c);
    }

    #[test]
    fn invalid_augmix_specs() {
        for bad in [
            AugmixSpec { width: 0, ..Default::default() },
            AugmixSpec { max_depth: 0, ..Default::default() },
            AugmixSpec { dirichlet_alpha: 0.0, ..Default::default() },
            AugmixSpec { beta_alpha: -1.0, ..Default::default() },
            AugmixSpec { op_set: vec![], ..Default::default() },
        ] {
            assert!(bad.validate().is_err());
        }
    }

    #[test]
    fn dirichlet_and_beta_moments() {
        let mut rng = stream(5, &[]);
        let n = 20_000;
        let mut first = 0.0;
        let mut beta = 0.0;
        for _ in 0..n {
            let w = sample_dirichlet(1.0, 3, &mut rng);
            assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            first += w[0];
            beta += sample_beta(1.0, &mut rng);
        }
        assert!((first / n as f64 - 1.0 / 3.0).abs() < 0.01);
        assert!((beta / n as f64 - 0.5).abs() < 0.01);
    }

    fn image_strategy() -> impl Strategy<Value = Tensor> {
        proptest::collection::vec(0.0f64..=1.0, 36).prop_map(|v| img(6, 6, v))
    }

    proptest! {
        #[test]
        fn contrast_keeps_mean_without_clamping(v in proptest::collection::vec(0.3f64..0.7, 16), g in 0.0f64..1.2) {
            let x = img(4, 4, v);
            let y = contrast_shift(&x, &ContrastSpec::new(g));
            let mean = |t: &Tensor| t.data().iter().sum::<f64>() / 16.0;
            prop_assert!((mean(&x) - mean(&y)).abs() < 1e-12);
        }

        #[test]
        fn outputs_stay_in_unit_interval(x in image_strategy(), seed in any::<u64>(), g in 0.0f64..4.0) {
            let spec = AugmixSpec::default();
            let mut rng = stream(seed, &[]);
            let a = augmix_sample(&x, &spec, &mut rng);
            let c = contrast_shift(&x, &ContrastSpec::new(g));
            let ch = apply_chain(&x, &spec.sample_chain(&mut rng));
            for t in [a, c, ch] {
                prop_assert!(t.data().iter().all(|v| (0.0..=1.0).contains(v)));
            }
        }

        #[test]
        fn combine_is_convex(x in image_strategy(), seed in any::<u64>(), m in 0.0f64..=1.0) {
            let spec = AugmixSpec::default();
            let mut rng = stream(seed, &[]);
            let chains: Vec<Tensor> = (0..3).map(|_| apply_chain(&x, &spec.sample_chain(&mut rng))).collect();
            let w = sample_dirichlet(1.0, 3, &mut rng);
            let out = augmix_combine(&x, &chains, &w, m);
            for p in 0..36 {
                let vals = std::iter::once(x.data()[p]).chain(chains.iter().map(|c| c.data()[p]));
                let (lo, hi) = vals.fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), v| (l.min(v), h.max(v)));
                prop_assert!(out.data()[p] >= lo - 1e-12 && out.data()[p] <= hi + 1e-12);
            }
        }
    }
}
