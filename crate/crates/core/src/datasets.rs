//! Data generation, IDX ingestion and label/image corruption.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fs;
use std::io::Read;
use std::path::Path;

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::container::Container;
use crate::error::{Error, Result};
use crate::loss::Targets;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// One step of the ordered log of how a dataset was produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Corruption {
    pub operation: String,
    pub parameters: BTreeMap<String, Value>,
    pub seed: Option<u64>,
}

impl Corruption {
    fn new(operation: &str, parameters: Value, seed: Option<u64>) -> Self {
        let parameters = match parameters {
            Value::Object(m) => m.into_iter().collect(),
            _ => BTreeMap::new(),
        };
        Self {
            operation: operation.to_string(),
            parameters,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub inputs: Tensor,
    pub targets: Targets,
    pub split: Split,
    pub provenance: Vec<Corruption>,
}

impl Dataset {
    pub fn new(inputs: Tensor, targets: Targets, split: Split) -> Result<Self> {
        if inputs.rows() != targets.len() {
            return Err(Error::DimensionMismatch {
                what: "targets per input",
                expected: inputs.rows(),
                found: targets.len(),
            });
        }
        if let Targets::Classes { labels, num_classes } = &targets {
            if let Some(&bad) = labels.iter().find(|&&l| l >= *num_classes) {
                return Err(Error::invalid(format!(
                    "label {bad} out of range for {num_classes} classes"
                )));
            }
        }
        Ok(Self {
            inputs,
            targets,
            split,
            provenance: Vec::new(),
        })
    }

    pub fn len(&self) -> usize {
        self.inputs.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Shape of one sample.
    pub fn input_shape(&self) -> &[usize] {
        &self.inputs.shape()[1..]
    }

    pub fn num_classes(&self) -> Option<usize> {
        self.targets.num_classes()
    }

    /// Model outputs needed: the class count or the target width.
    pub fn output_dim(&self) -> usize {
        match &self.targets {
            Targets::Classes { num_classes, .. } => *num_classes,
            Targets::Values(t) => t.row_len(),
        }
    }

    pub fn labels(&self) -> Option<&[usize]> {
        self.targets.labels()
    }

    /// Rows `idx`, in order. Provenance is kept.
    pub fn select(&self, idx: &[usize]) -> Dataset {
        Dataset {
            inputs: self.inputs.select_rows(idx),
            targets: self.targets.select(idx),
            split: self.split,
            provenance: self.provenance.clone(),
        }
    }

    pub fn with_provenance(mut self, step: Corruption) -> Self {
        self.provenance.push(step);
        self
    }

    /// Relabels a random subset of the training labels. Test data is never
    /// corrupted.
    pub fn flip_labels(mut self, fraction: f64, seed: u64) -> Result<Self> {
        if self.split == Split::Test {
            return Err(Error::invalid("refusing to flip labels of a test split"));
        }
        let Targets::Classes { labels, num_classes } = &self.targets else {
            return Err(Error::invalid("label flipping needs class targets"));
        };
        let flipped = flip_labels(labels, fraction, *num_classes, seed)?;
        self.targets = Targets::Classes {
            labels: flipped,
            num_classes: *num_classes,
        };
        Ok(self.with_provenance(Corruption::new(
            "flip_labels",
            json!({"fraction": fraction}),
            Some(seed),
        )))
    }

    pub fn motion_blur(mut self, length: usize, angle_deg: f64) -> Result<Self> {
        self.inputs = motion_blur(&self.inputs, length, angle_deg)?;
        Ok(self.with_provenance(Corruption::new(
            "motion_blur",
            json!({"length": length, "angle_deg": angle_deg}),
            None,
        )))
    }

    pub fn to_container(&self) -> Container {
        let (targets, kind, num_classes) = match &self.targets {
            Targets::Classes { labels, num_classes } => (
                Tensor::new(vec![labels.len()], labels.iter().map(|&l| l as f64).collect())
                    .expect("one entry per label"),
                "classes",
                Some(*num_classes),
            ),
            Targets::Values(t) => (t.clone(), "values", None),
        };
        Container {
            arrays: vec![("inputs".into(), self.inputs.clone()), ("targets".into(), targets)],
            metadata: json!({
                "split": self.split,
                "targets": kind,
                "num_classes": num_classes,
                "provenance": self.provenance,
            }),
        }
    }

    pub fn from_container(c: &Container, path: &Path) -> Result<Self> {
        let bad = |detail: &str| Error::Format {
            kind: "dataset",
            path: path.to_path_buf(),
            detail: detail.to_string(),
        };
        let inputs = c.get("inputs").ok_or_else(|| bad("missing `inputs` array"))?.clone();
        let raw = c.get("targets").ok_or_else(|| bad("missing `targets` array"))?;
        let split: Split = serde_json::from_value(c.metadata["split"].clone())?;
        let targets = match c.metadata["targets"].as_str() {
            Some("classes") => {
                let num_classes = c.metadata["num_classes"]
                    .as_u64()
                    .ok_or_else(|| bad("missing num_classes"))? as usize;
                let labels = raw
                    .data()
                    .iter()
                    .map(|&v| {
                        if v >= 0.0 && v.fract() == 0.0 {
                            Ok(v as usize)
                        } else {
                            Err(bad("class labels must be non-negative integers"))
                        }
                    })
                    .collect::<Result<_>>()?;
                Targets::Classes { labels, num_classes }
            }
            Some("values") => Targets::Values(raw.clone()),
            _ => return Err(bad("unknown target kind")),
        };
        let mut d = Dataset::new(inputs, targets, split)?;
        d.provenance = serde_json::from_value(c.metadata["provenance"].clone())?;
        Ok(d)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(&Container::load(path)?, path)
    }
}

/// Two noisy concentric circles. The first `n/2` points lie on the inner
/// circle (label 0), the rest on the outer circle (label 1).
pub fn two_circles(n: usize, radius_inner: f64, radius_outer: f64, noise_std: f64, seed: u64) -> Result<Dataset> {
    if !n.is_multiple_of(2) {
        return Err(Error::invalid(format!("two_circles needs an even n, got {n}")));
    }
    if !(radius_inner > 0.0 && radius_outer > 0.0) {
        return Err(Error::invalid("circle radii must be positive"));
    }
    if !(noise_std >= 0.0 && noise_std.is_finite()) {
        return Err(Error::invalid("noise_std must be finite and >= 0"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, noise_std).map_err(|e| Error::invalid(e.to_string()))?;
    let mut data = Vec::with_capacity(2 * n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let (r, label) = if i < n / 2 {
            (radius_inner, 0)
        } else {
            (radius_outer, 1)
        };
        let t = rng.random::<f64>() * 2.0 * PI;
        let (dx, dy) = if noise_std > 0.0 {
            (noise.sample(&mut rng), noise.sample(&mut rng))
        } else {
            (0.0, 0.0)
        };
        data.push(r * t.cos() + dx);
        data.push(r * t.sin() + dy);
        labels.push(label);
    }
    let d = Dataset::new(
        Tensor::new(vec![n, 2], data)?,
        Targets::Classes { labels, num_classes: 2 },
        Split::Train,
    )?;
    Ok(d.with_provenance(Corruption::new(
        "two_circles",
        json!({"n": n, "radius_inner": radius_inner, "radius_outer": radius_outer, "noise_std": noise_std}),
        Some(seed),
    )))
}

fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let raw = fs::read(path)?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        flate2::read::GzDecoder::new(raw.as_slice())
            .read_to_end(&mut out)
            .map_err(|e| Error::Format {
                kind: "IDX",
                path: path.to_path_buf(),
                detail: format!("gzip: {e}"),
            })?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn idx_payload<'a>(bytes: &'a [u8], path: &Path, magic: u32, rank: usize) -> Result<(Vec<usize>, &'a [u8])> {
    let header = 4 + 4 * rank;
    if bytes.len() < header {
        return Err(Error::Truncated {
            kind: "IDX",
            path: path.to_path_buf(),
            expected: header,
            actual: bytes.len(),
        });
    }
    let word = |i: usize| u32::from_be_bytes(bytes[4 * i..4 * i + 4].try_into().expect("4 bytes"));
    if word(0) != magic {
        return Err(Error::Format {
            kind: "IDX",
            path: path.to_path_buf(),
            detail: format!("magic {:#010x}, expected {magic:#010x}", word(0)),
        });
    }
    let dims: Vec<usize> = (1..=rank).map(|i| word(i) as usize).collect();
    let expected = header + dims.iter().product::<usize>();
    if bytes.len() < expected {
        return Err(Error::Truncated {
            kind: "IDX",
            path: path.to_path_buf(),
            expected,
            actual: bytes.len(),
        });
    }
    Ok((dims, &bytes[header..expected]))
}

/// Reads an IDX image file (`0x00000803`) and label file (`0x00000801`),
/// optionally gzip-compressed. Pixels are scaled to `[0, 1]`; images have
/// shape `N x H x W`.
pub fn load_idx(images_path: &Path, labels_path: &Path, split: Split) -> Result<Dataset> {
    let ib = read_maybe_gz(images_path)?;
    let lb = read_maybe_gz(labels_path)?;
    let (idims, pixels) = idx_payload(&ib, images_path, 0x0803, 3)?;
    let (ldims, labels) = idx_payload(&lb, labels_path, 0x0801, 1)?;
    if idims[0] != ldims[0] {
        return Err(Error::DimensionMismatch {
            what: "IDX label count vs image count",
            expected: idims[0],
            found: ldims[0],
        });
    }
    let labels: Vec<usize> = labels.iter().map(|&b| b as usize).collect();
    let num_classes = labels.iter().max().map_or(0, |&m| m + 1).max(10);
    let data = pixels.iter().map(|&b| f64::from(b) / 255.0).collect();
    let d = Dataset::new(
        Tensor::new(idims.clone(), data)?,
        Targets::Classes { labels, num_classes },
        split,
    )?;
    Ok(d.with_provenance(Corruption::new(
        "load_idx",
        json!({"images": images_path.display().to_string(), "labels": labels_path.display().to_string()}),
        None,
    )))
}

/// Normalised 1-pixel-wide line kernel of `length` taps at `angle_deg`,
/// returned as `(dy, dx, weight)` offsets from the centre. Taps advance one
/// pixel per step along the dominant axis, so each lands on its own pixel.
pub fn motion_blur_kernel(length: usize, angle_deg: f64) -> Vec<(isize, isize, f64)> {
    let (s, c) = angle_deg.to_radians().sin_cos();
    let m = s.abs().max(c.abs());
    let (s, c) = (s / m, c / m);
    let half = (length as f64 - 1.0) / 2.0;
    let mut taps: BTreeMap<(isize, isize), f64> = BTreeMap::new();
    for k in 0..length {
        let t = k as f64 - half;
        let dx = (t * c).round() as isize;
        let dy = (-t * s).round() as isize;
        *taps.entry((dy, dx)).or_default() += 1.0 / length as f64;
    }
    taps.into_iter().map(|((dy, dx), w)| (dy, dx, w)).collect()
}

fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    if m < n as isize {
        m as usize
    } else {
        (period - m) as usize
    }
}

/// Convolves every image (`N x H x W` or `N x H x W x C`) with a line kernel
/// using mirror padding at the borders.
pub fn motion_blur(images: &Tensor, length: usize, angle_deg: f64) -> Result<Tensor> {
    if length == 0 {
        return Err(Error::invalid("blur length must be at least 1"));
    }
    let (h, w, ch) = match *images.shape() {
        [_, h, w] => (h, w, 1),
        [_, h, w, c] => (h, w, c),
        _ => {
            return Err(Error::invalid(format!(
                "motion blur needs N x H x W[ x C] images, got {:?}",
                images.shape()
            )))
        }
    };
    let taps = motion_blur_kernel(length, angle_deg);
    let mut out = vec![0.0; images.len()];
    for n in 0..images.rows() {
        let src = images.row(n);
        let dst = &mut out[n * h * w * ch..(n + 1) * h * w * ch];
        for y in 0..h {
            for x in 0..w {
                for c in 0..ch {
                    let mut acc = 0.0;
                    for &(dy, dx, wt) in &taps {
                        let sy = reflect(y as isize + dy, h);
                        let sx = reflect(x as isize + dx, w);
                        acc += wt * src[(sy * w + sx) * ch + c];
                    }
                    dst[(y * w + x) * ch + c] = acc;
                }
            }
        }
    }
    Tensor::new(images.shape().to_vec(), out)
}

/// Replaces the labels of a uniformly chosen `⌊fraction·N⌋` subset by a
/// uniform draw from the other classes.
pub fn flip_labels(labels: &[usize], fraction: f64, num_classes: usize, seed: u64) -> Result<Vec<usize>> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::invalid(format!(
            "flip fraction must be in [0, 1], got {fraction}"
        )));
    }
    let count = (fraction * labels.len() as f64).floor() as usize;
    if count == 0 {
        return Ok(labels.to_vec());
    }
    if num_classes < 2 {
        return Err(Error::invalid("label flipping needs at least two classes"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked = index::sample(&mut rng, labels.len(), count).into_vec();
    picked.sort_unstable();
    let mut out = labels.to_vec();
    for i in picked {
        let r = rng.random_range(0..num_classes - 1);
        out[i] = if r >= labels[i] { r + 1 } else { r };
    }
    Ok(out)
}

/// Per-class sample counts proportional to `counts` summing to `n`, by the
/// largest-remainder rule (ties to the lower class).
pub fn proportional_counts(counts: &[usize], n: usize) -> Vec<usize> {
    let total: usize = counts.iter().sum();
    if total == 0 {
        return vec![0; counts.len()];
    }
    let mut alloc: Vec<usize> = counts.iter().map(|&c| c * n / total).collect();
    let mut rem: Vec<(usize, usize)> = counts.iter().enumerate().map(|(k, &c)| (c * n % total, k)).collect();
    rem.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    let short = n - alloc.iter().sum::<usize>();
    for &(_, k) in rem.iter().take(short) {
        alloc[k] += 1;
    }
    alloc
}

/// Draws `n` samples with class frequencies matching the source, in a
/// seeded random order.
pub fn stratified_sample(dataset: &Dataset, n: usize, seed: u64) -> Result<Dataset> {
    let (Some(labels), Some(num_classes)) = (dataset.labels(), dataset.num_classes()) else {
        return Err(Error::invalid("stratified sampling needs class targets"));
    };
    if n > dataset.len() {
        return Err(Error::invalid(format!("cannot sample {n} of {} points", dataset.len())));
    }
    let present = {
        let mut seen = vec![false; num_classes];
        labels.iter().for_each(|&l| seen[l] = true);
        seen.iter().filter(|&&s| s).count()
    };
    if n < present {
        return Err(Error::invalid(format!(
            "sample size {n} is below the {present} classes present"
        )));
    }
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); num_classes];
    for (i, &l) in labels.iter().enumerate() {
        by_class[l].push(i);
    }
    let counts: Vec<usize> = by_class.iter().map(Vec::len).collect();
    let alloc = proportional_counts(&counts, n);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = Vec::with_capacity(n);
    for (members, &k) in by_class.iter().zip(&alloc) {
        let chosen = index::sample(&mut rng, members.len(), k);
        idx.extend(chosen.iter().map(|j| members[j]));
    }
    idx.shuffle(&mut rng);
    Ok(dataset
        .select(&idx)
        .with_provenance(Corruption::new("stratified_sample", json!({"n": n}), Some(seed))))
}

/// Inputs uniform on `[-1, 1]^d`; targets a fixed smooth function plus
/// `N(0, noise_scale²)` noise.
pub fn synthetic_regression(n: usize, d: usize, q: usize, noise_scale: f64, seed: u64) -> Result<Dataset> {
    if q == 0 || d == 0 {
        return Err(Error::invalid("synthetic regression needs d >= 1 and q >= 1"));
    }
    if !(noise_scale >= 0.0 && noise_scale.is_finite()) {
        return Err(Error::invalid("noise_scale must be finite and >= 0"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // separate stream so inputs do not depend on the noise scale
    let mut noise_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6e6f_6973_6500_0000);
    let noise = Normal::new(0.0, noise_scale).map_err(|e| Error::invalid(e.to_string()))?;
    let mut xs = Vec::with_capacity(n * d);
    let mut ys = Vec::with_capacity(n * q);
    for _ in 0..n {
        let x: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..=1.0)).collect();
        for c in 0..q {
            let mut phase = 0.0;
            let mut lin = 0.0;
            for (j, &xj) in x.iter().enumerate() {
                phase += xj * (c + 1) as f64 / (j + 1) as f64;
                lin += if (j + c) % 2 == 0 { xj } else { -xj };
            }
            let e = noise.sample(&mut noise_rng);
            ys.push(phase.sin() + 0.5 * lin / d as f64 + e);
        }
        xs.extend(x);
    }
    let ds = Dataset::new(
        Tensor::new(vec![n, d], xs)?,
        Targets::Values(Tensor::new(vec![n, q], ys)?),
        Split::Train,
    )?;
    Ok(ds.with_provenance(Corruption::new(
        "synthetic_regression",
        json!({"n": n, "d": d, "q": q, "noise_scale": noise_scale}),
        Some(seed),
    )))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reflect_mirrors_without_repeating_edges() {
        let got: Vec<usize> = (-3..7).map(|i| reflect(i, 4)).collect();
        assert_eq!(got, vec![3, 2, 1, 0, 1, 2, 3, 2, 1, 0]);
    }

    #[test]
    fn blur_kernel_is_normalised_line() {
        let k = motion_blur_kernel(5, 45.0);
        assert_eq!(k.len(), 5);
        assert!((k.iter().map(|t| t.2).sum::<f64>() - 1.0).abs() < 1e-15);
        assert!(k.iter().all(|&(dy, dx, _)| dy == -dx));
        assert_eq!(motion_blur_kernel(1, 30.0), vec![(0, 0, 1.0)]);
    }

    #[test]
    fn proportional_counts_use_largest_remainder() {
        assert_eq!(proportional_counts(&[10, 10, 10], 3), vec![1, 1, 1]);
        assert_eq!(proportional_counts(&[1, 1, 1], 2), vec![1, 1, 0]);
        assert_eq!(proportional_counts(&[70, 20, 10], 9), vec![6, 2, 1]);
    }
}
