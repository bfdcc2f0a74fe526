//! Labeled image datasets: synthetic generation, PGM ingestion and export,
//! and stratified splitting.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution as _, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, tags};
use crate::tensor::Tensor;

/// Images in `[0, 1]` (each `[C, H, W]`) with integer class labels.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledDataset {
    pub name: String,
    pub num_classes: usize,
    images: Vec<Tensor>,
    labels: Vec<usize>,
}

impl LabeledDataset {
    pub fn new(name: impl Into<String>, num_classes: usize, images: Vec<Tensor>, labels: Vec<usize>) -> Result<Self> {
        if images.len() != labels.len() {
            return Err(Error::Data(format!("{} images but {} labels", images.len(), labels.len())));
        }
        if let Some(first) = images.first() {
            if first.rank() != 3 {
                return Err(Error::Data(format!("images must be [C, H, W], got {:?}", first.shape())));
            }
            for (i, img) in images.iter().enumerate() {
                if img.shape() != first.shape() {
                    return Err(Error::Data(format!(
                        "image {i} has shape {:?}, expected {:?}",
                        img.shape(),
                        first.shape()
                    )));
                }
                if img.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
                    return Err(Error::Data(format!("image {i} has pixels outside [0, 1]")));
                }
            }
        }
        if let Some((i, &y)) = labels.iter().enumerate().find(|(_, &y)| y >= num_classes) {
            return Err(Error::Data(format!("label {y} of sample {i} is outside [0, {num_classes})")));
        }
        Ok(LabeledDataset {
            name: name.into(),
            num_classes,
            images,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn images(&self) -> &[Tensor] {
        &self.images
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// `[C, H, W]` of every image, if any.
    pub fn image_shape(&self) -> Option<&[usize]> {
        self.images.first().map(Tensor::shape)
    }

    /// Stacks the selected samples into a `[B, C, H, W]` batch.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        let imgs: Vec<Tensor> = indices.iter().map(|&i| self.images[i].clone()).collect();
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        Ok((Tensor::stack(&imgs)?, labels))
    }

    /// New dataset with every image mapped through `f`; labels unchanged.
    pub fn map_images(&self, name: impl Into<String>, f: impl Fn(&Tensor) -> Tensor) -> Result<Self> {
        LabeledDataset::new(name, self.num_classes, self.images.iter().map(f).collect(), self.labels.clone())
    }

    pub fn subset(&self, name: impl Into<String>, indices: &[usize]) -> Self {
        LabeledDataset {
            name: name.into(),
            num_classes: self.num_classes,
            images: indices.iter().map(|&i| self.images[i].clone()).collect(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &y in &self.labels {
            counts[y] += 1;
        }
        counts
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    pub samples_per_class: usize,
    pub size: usize,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            num_classes: 2,
            samples_per_class: 1250,
            size: 16,
            noise_sigma: 0.15,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::config("dataset.synthetic.num_classes", "must be at least 2"));
        }
        if self.size < 8 {
            return Err(Error::config("dataset.synthetic.size", "must be at least 8"));
        }
        if self.samples_per_class == 0 {
            return Err(Error::config("dataset.synthetic.samples_per_class", "must be at least 1"));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::config("dataset.synthetic.noise_sigma", "must be a nonnegative number"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
enum Template {
    Bar,
    Disc,
    Ring,
    Cross,
}

/// Soft inside-indicator for a signed distance (negative inside).
fn coverage(signed_distance: f64) -> f64 {
    (0.5 - signed_distance).clamp(0.0, 1.0)
}

fn segment_distance(px: f64, py: f64, half_len: f64, angle: f64) -> f64 {
    let (s, c) = angle.sin_cos();
    let along = (px * c + py * s).clamp(-half_len, half_len);
    let (qx, qy) = (along * c, along * s);
    ((px - qx).powi(2) + (py - qy).powi(2)).sqrt()
}

/// Generates a balanced set of structured grayscale patterns: class `k`
/// draws template `k mod 4` (bar, disc, ring, cross), rotated by a random
/// angle plus `45 deg * (k div 4)` and shifted by up to one pixel, on a random
/// background/foreground intensity pair, plus Gaussian pixel noise. Even
/// classes draw their foreground from a dimmer band than odd classes, so
/// intensity level is a second, contrast-dependent cue alongside shape.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<LabeledDataset> {
    spec.validate()?;
    let n = spec.size;
    let scale = n as f64 / 16.0;
    let centre = (n as f64 - 1.0) / 2.0;
    let noise = Normal::new(0.0, spec.noise_sigma.max(f64::MIN_POSITIVE))
        .map_err(|e| Error::config("dataset.synthetic.noise_sigma", e.to_string()))?;
    let mut images = Vec::with_capacity(spec.num_classes * spec.samples_per_class);
    let mut labels = Vec::with_capacity(images.capacity());
    for i in 0..spec.samples_per_class {
        for k in 0..spec.num_classes {
            let index = (i * spec.num_classes + k) as u64;
            let mut rng = rng::stream(spec.seed, &[tags::DATA, index]);
            let template = [Template::Bar, Template::Disc, Template::Ring, Template::Cross][k % 4];
            let angle = rng.random_range(0.0..std::f64::consts::PI) + std::f64::consts::FRAC_PI_4 * (k / 4) as f64;
            let cx = centre + rng.random_range(-1.0..1.0) * scale;
            let cy = centre + rng.random_range(-1.0..1.0) * scale;
            let background = rng.random_range(0.15..0.35);
            let foreground = if k % 2 == 0 {
                rng.random_range(0.5..0.65)
            } else {
                rng.random_range(0.7..0.85)
            };
            let size_draw: f64 = rng.random_range(0.0..1.0);
            let mut data = Vec::with_capacity(n * n);
            for y in 0..n {
                for x in 0..n {
                    let (px, py) = (x as f64 - cx, y as f64 - cy);
                    let r = (px * px + py * py).sqrt();
                    let m = match template {
                        Template::Bar => coverage(segment_distance(px, py, 4.8 * scale, angle) - 1.0 * scale),
                        Template::Disc => coverage(r - (2.9 + 0.9 * size_draw) * scale),
                        Template::Ring => coverage((r - (4.5 + 0.9 * size_draw) * scale).abs() - 0.8 * scale),
                        Template::Cross => {
                            let a = segment_distance(px, py, 4.0 * scale, angle);
                            let b = segment_distance(px, py, 4.0 * scale, angle + std::f64::consts::FRAC_PI_2);
                            coverage(a.min(b) - 0.8 * scale)
                        }
                    };
                    let mut v = background + (foreground - background) * m;
                    if spec.noise_sigma > 0.0 {
                        v += noise.sample(&mut rng);
                    }
                    data.push(v.clamp(0.0, 1.0));
                }
            }
            images.push(Tensor::new(vec![1, n, n], data)?);
            labels.push(k);
        }
    }
    LabeledDataset::new("synthetic", spec.num_classes, images, labels)
}

/// Stratified split: each class keeps `round(n_c * train_fraction)` samples
/// (at least one on each side) for training. Both outputs preserve the
/// original sample order.
pub fn split_dataset(ds: &LabeledDataset, train_fraction: f64, seed: u64) -> Result<(LabeledDataset, LabeledDataset)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::config("split.train_fraction", "must lie strictly between 0 and 1"));
    }
    let mut train_idx = Vec::new();
    let mut test_idx = Vec::new();
    for class in 0..ds.num_classes {
        let mut members: Vec<usize> = (0..ds.len()).filter(|&i| ds.labels[i] == class).collect();
        if members.is_empty() {
            continue;
        }
        if members.len() < 2 {
            return Err(Error::Data(format!("class {class} has {} sample(s); need at least 2 to split", members.len())));
        }
        members.shuffle(&mut rng::stream(seed, &[tags::SPLIT, class as u64]));
        let n_train = ((members.len() as f64 * train_fraction).round() as usize).clamp(1, members.len() - 1);
        train_idx.extend_from_slice(&members[..n_train]);
        test_idx.extend_from_slice(&members[n_train..]);
    }
    train_idx.sort_unstable();
    test_idx.sort_unstable();
    Ok((
        ds.subset(format!("{}-train", ds.name), &train_idx),
        ds.subset(format!("{}-test", ds.name), &test_idx),
    ))
}

/// Parses a binary (P5) PGM with maxval 255 into a `[1, H, W]` tensor
/// scaled by 1/255.
pub fn parse_pgm(bytes: &[u8]) -> Result<Tensor> {
    let mut pos = 0;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
        // skip whitespace and comments
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(|b| !b.is_ascii_whitespace()) {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Data("truncated PGM header".into()));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| Error::Data("PGM header is not ASCII".into()))?);
    }
    if fields[0] != "P5" {
        return Err(Error::Data(format!("expected PGM magic P5, found `{}`", fields[0])));
    }
    let num = |s: &str, what: &str| -> Result<usize> {
        s.parse::<usize>()
            .map_err(|_| Error::Data(format!("PGM {what} `{s}` is not a positive integer")))
    };
    let (w, h, maxval) = (num(fields[1], "width")?, num(fields[2], "height")?, num(fields[3], "maxval")?);
    if w == 0 || h == 0 {
        return Err(Error::Data("PGM has a zero dimension".into()));
    }
    if maxval != 255 {
        return Err(Error::Data(format!("PGM maxval {maxval} is not supported (need 255)")));
    }
    // exactly one whitespace byte separates header and raster
    pos += 1;
    let raster = bytes
        .get(pos..pos + w * h)
        .ok_or_else(|| Error::Data(format!("PGM raster truncated: need {} bytes", w * h)))?;
    Tensor::new(vec![1, h, w], raster.iter().map(|&b| f64::from(b) / 255.0).collect())
}

/// Encodes a single-channel image as binary PGM, rounding to 8 bits.
pub fn encode_pgm(image: &Tensor) -> Result<Vec<u8>> {
    let s = image.shape();
    if s.len() != 3 || s[0] != 1 {
        return Err(Error::Data(format!("PGM export needs a [1, H, W] image, got {s:?}")));
    }
    let mut out = format!("P5\n{} {}\n255\n", s[2], s[1]).into_bytes();
    out.extend(image.data().iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    Ok(out)
}

/// Loads images listed in a manifest of `relative_path<TAB>label` lines.
/// Paths are relative to `image_dir`; blank lines are ignored.
pub fn load_dataset(image_dir: &Path, manifest: &Path, num_classes: usize) -> Result<LabeledDataset> {
    let text = fs::read_to_string(manifest).map_err(|e| Error::io(manifest, e))?;
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let lineno = lineno + 1;
        if line.trim().is_empty() {
            continue;
        }
        let (rel, label) = line
            .split_once('\t')
            .ok_or_else(|| Error::Data(format!("manifest line {lineno}: expected `path<TAB>label`")))?;
        let label: usize = label
            .trim()
            .parse()
            .map_err(|_| Error::Data(format!("manifest line {lineno}: label `{}` is not an integer", label.trim())))?;
        if label >= num_classes {
            return Err(Error::Data(format!(
                "manifest line {lineno}: label {label} is outside [0, {num_classes})"
            )));
        }
        let path = image_dir.join(rel);
        let bytes = fs::read(&path).map_err(|e| Error::Data(format!("manifest line {lineno}: cannot read {}: {e}", path.display())))?;
        let img = parse_pgm(&bytes).map_err(|e| Error::Data(format!("manifest line {lineno}: {e}")))?;
        if let Some(first) = images.first().map(Tensor::shape) {
            if first != img.shape() {
                return Err(Error::Data(format!(
                    "manifest line {lineno}: image shape {:?} differs from {:?}",
                    img.shape(),
                    first
                )));
            }
        }
        images.push(img);
        labels.push(label);
    }
    let name = manifest
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "dataset".into());
    LabeledDataset::new(name, num_classes, images, labels)
}

/// Writes every image as `img_NNNNN.pgm` plus `manifest.tsv` into `dir`.
pub fn export_pgm(ds: &LabeledDataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifest = String::new();
    for (i, (img, &y)) in ds.images.iter().zip(&ds.labels).enumerate() {
        let name = format!("img_{i:05}.pgm");
        let path = dir.join(&name);
        fs::write(&path, encode_pgm(img)?).map_err(|e| Error::io(&path, e))?;
        manifest.push_str(&format!("{name}\t{y}\n"));
    }
    let path = dir.join("manifest.tsv");
    let mut f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    f.write_all(manifest.as_bytes()).map_err(|e| Error::io(&path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec() -> SyntheticSpec {
        SyntheticSpec {
            num_classes: 3,
            samples_per_class: 20,
            size: 16,
            noise_sigma: 0.15,
            seed: 9,
        }
    }

    #[test]
    fn synthetic_is_deterministic_balanced_and_bounded() {
        let a = generate_synthetic(&spec()).unwrap();
        let b = generate_synthetic(&spec()).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.class_counts(), vec![20, 20, 20]);
        assert!(a.images().iter().all(|t| t.data().iter().all(|v| (0.0..=1.0).contains(v))));
        let c = generate_synthetic(&SyntheticSpec { seed: 10, ..spec() }).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn noiseless_images_are_clean_templates() {
        let ds = generate_synthetic(&SyntheticSpec { noise_sigma: 0.0, ..spec() }).unwrap();
        for img in ds.images() {
            // background corners are untouched by the pattern
            let corner = img.data()[0];
            assert!((0.15..0.35).contains(&corner));
            assert!(img.data().iter().all(|&v| v >= corner - 1e-12));
        }
    }

    #[test]
    fn split_is_stratified_disjoint_and_exhaustive() {
        let ds = generate_synthetic(&SyntheticSpec {
            num_classes: 2,
            samples_per_class: 50,
            ..spec()
        })
        .unwrap();
        let (train, test) = split_dataset(&ds, 0.8, 3).unwrap();
        assert_eq!((train.len(), test.len()), (80, 20));
        assert_eq!(test.class_counts(), vec![10, 10]);
        let (train2, test2) = split_dataset(&ds, 0.8, 3).unwrap();
        assert_eq!((&train, &test), (&train2, &test2));
        let (train3, _) = split_dataset(&ds, 0.8, 4).unwrap();
        assert_ne!(train, train3);

        let mut seen: Vec<&Tensor> = train.images().iter().chain(test.images()).collect();
        assert_eq!(seen.len(), ds.len());
        seen.dedup_by(|a, b| a == b);
        for img in ds.images() {
            let hits = train.images().iter().chain(test.images()).filter(|t| *t == img).count();
            assert_eq!(hits, 1);
        }
    }

    #[test]
    fn split_rejects_singleton_class() {
        let imgs = vec![Tensor::zeros(&[1, 2, 2]); 3];
        let ds = LabeledDataset::new("tiny", 2, imgs, vec![0, 0, 1]).unwrap();
        assert!(matches!(split_dataset(&ds, 0.8, 0), Err(Error::Data(_))));
        assert!(split_dataset(&ds, 1.0, 0).is_err());
    }

    #[test]
    fn pgm_parse_and_errors() {
        let img = parse_pgm(b"P5\n# comment\n1 1\n255\n\xff").unwrap();
        assert_eq!(img.shape(), &[1, 1, 1]);
        assert_eq!(img.data(), &[1.0]);
        assert!(parse_pgm(b"P2\n1 1\n255\n1").is_err());
        assert!(parse_pgm(b"P5\n2 2\n255\n\x00").is_err());
        assert!(parse_pgm(b"P5\n1 1\n65535\n\x00\x00").is_err());
    }

    #[test]
    fn manifest_loading() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("a.pgm"), b"P5 1 1 255\n\xff").unwrap();
        fs::write(dir.path().join("empty.tsv"), "").unwrap();
        let ds = load_dataset(dir.path(), &dir.path().join("empty.tsv"), 2).unwrap();
        assert!(ds.is_empty());

        fs::write(dir.path().join("m.tsv"), "a.pgm\t0\n").unwrap();
        let ds = load_dataset(dir.path(), &dir.path().join("m.tsv"), 2).unwrap();
        assert_eq!(ds.images()[0].data(), &[1.0]);

        fs::write(dir.path().join("bad.tsv"), "a.pgm\t0\na.pgm\t2\n").unwrap();
        let err = load_dataset(dir.path(), &dir.path().join("bad.tsv"), 2).unwrap_err();
        assert!(err.to_string().contains("line 2"), "{err}");

        fs::write(dir.path().join("nan.tsv"), "a.pgm\tx\n").unwrap();
        assert!(load_dataset(dir.path(), &dir.path().join("nan.tsv"), 2).is_err());
        fs::write(dir.path().join("missing.tsv"), "nope.pgm\t0\n").unwrap();
        assert!(load_dataset(dir.path(), &dir.path().join("missing.tsv"), 2).is_err());
    }

    #[test]
    fn export_then_load_matches_within_quantization() {
        let ds = generate_synthetic(&SyntheticSpec {
            samples_per_class: 4,
            ..spec()
        })
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        export_pgm(&ds, dir.path()).unwrap();
        let back = load_dataset(dir.path(), &dir.path().join("manifest.tsv"), 3).unwrap();
        assert_eq!(back.labels(), ds.labels());
        for (a, b) in ds.images().iter().zip(back.images()) {
            for (x, y) in a.data().iter().zip(b.data()) {
                assert_eq!(*y, (x * 255.0).round() / 255.0);
            }
        }
    }
}
