//! Datasets in `[0,1]^d`: ingestion of 8-bit record files, the `SATD`
//! float format, the synthetic Gaussian-blob generator used at desk
//! scale, stratified splits and the augmentation that produces views for
//! contrastive pretraining.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

pub const F32_MAGIC: &[u8; 4] = b"SATD";

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    examples: Vec<f64>,
    labels: Vec<usize>,
    num_classes: usize,
    dim: usize,
    provenance: String,
}

impl Dataset {
    pub fn new(
        examples: Vec<f64>,
        labels: Vec<usize>,
        num_classes: usize,
        dim: usize,
        provenance: impl Into<String>,
    ) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Data("dimension must be positive".into()));
        }
        if examples.len() != labels.len() * dim {
            return Err(Error::Data(format!(
                "{} values do not form {} rows of width {dim}",
                examples.len(),
                labels.len()
            )));
        }
        if let Some(pos) = examples.iter().position(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Data(format!(
                "example {} has value {} outside [0,1]",
                pos / dim,
                examples[pos]
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::Data(format!(
                "label {bad} out of range for {num_classes} classes"
            )));
        }
        Ok(Self {
            examples,
            labels,
            num_classes,
            dim,
            provenance: provenance.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn provenance(&self) -> &str {
        &self.provenance
    }

    pub fn examples(&self) -> &[f64] {
        &self.examples
    }

    pub fn example(&self, i: usize) -> &[f64] {
        &self.examples[i * self.dim..(i + 1) * self.dim]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    /// Same examples, different labels.
    pub fn with_labels(&self, labels: Vec<usize>) -> Result<Self> {
        Dataset::new(
            self.examples.clone(),
            labels,
            self.num_classes,
            self.dim,
            self.provenance.clone(),
        )
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let mut examples = Vec::with_capacity(indices.len() * self.dim);
        for &i in indices {
            examples.extend_from_slice(self.example(i));
        }
        Dataset {
            examples,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
            dim: self.dim,
            provenance: self.provenance.clone(),
        }
    }

    /// Rows `indices` as an `[n, d]` matrix.
    pub fn batch(&self, indices: &[usize]) -> Tensor {
        let mut data = Vec::with_capacity(indices.len() * self.dim);
        for &i in indices {
            data.extend_from_slice(self.example(i));
        }
        Tensor::matrix(indices.len(), self.dim, data).expect("rows have width dim")
    }

    /// All rows as an `[n, d]` matrix.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::matrix(self.len(), self.dim, self.examples.clone()).expect("rows have width dim")
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }
}

/// Parses 8-bit records: one label byte followed by `dim` pixel bytes.
pub fn parse_raw8(bytes: &[u8], dim: usize, num_classes: usize) -> Result<Dataset> {
    if dim == 0 {
        return Err(Error::Data("dimension must be positive".into()));
    }
    let record = dim + 1;
    if !bytes.len().is_multiple_of(record) {
        let offset = bytes.len() - bytes.len() % record;
        return Err(Error::Format(format!(
            "truncated record at byte offset {offset}: {} trailing bytes, records are {record} bytes",
            bytes.len() - offset
        )));
    }
    let n = bytes.len() / record;
    let mut examples = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    for (r, chunk) in bytes.chunks_exact(record).enumerate() {
        let label = chunk[0] as usize;
        if label >= num_classes {
            return Err(Error::Data(format!(
                "label {label} at byte offset {} is not below {num_classes}",
                r * record
            )));
        }
        labels.push(label);
        examples.extend(chunk[1..].iter().map(|&v| f64::from(v) / 255.0));
    }
    Dataset::new(examples, labels, num_classes, dim, "raw8")
}

pub fn load_raw8(path: impl AsRef<Path>, dim: usize, num_classes: usize) -> Result<Dataset> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut ds = parse_raw8(&bytes, dim, num_classes)?;
    ds.provenance = format!("raw8:{}", path.display());
    Ok(ds)
}

pub fn encode_f32(ds: &Dataset) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + ds.len() * (4 + 4 * ds.dim));
    out.extend_from_slice(F32_MAGIC);
    for v in [ds.len(), ds.dim, ds.num_classes] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    for i in 0..ds.len() {
        out.extend_from_slice(&(ds.labels[i] as u32).to_le_bytes());
        for &v in ds.example(i) {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

pub fn decode_f32(bytes: &[u8]) -> Result<Dataset> {
    if bytes.len() < 16 || &bytes[..4] != F32_MAGIC {
        return Err(Error::Format("missing SATD header".into()));
    }
    let word = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap()) as usize;
    let (n, dim, classes) = (word(4), word(8), word(12));
    let record = 4 * (1 + dim);
    let expected = 16 + n * record;
    if bytes.len() != expected {
        return Err(Error::Format(format!(
            "SATD body is {} bytes, header promises {expected}",
            bytes.len()
        )));
    }
    let mut examples = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    for chunk in bytes[16..].chunks_exact(record) {
        labels.push(u32::from_le_bytes(chunk[..4].try_into().unwrap()) as usize);
        examples.extend(
            chunk[4..]
                .chunks_exact(4)
                .map(|b| f64::from(f32::from_le_bytes(b.try_into().unwrap()))),
        );
    }
    Dataset::new(examples, labels, classes, dim, "satd")
}

pub fn write_f32(ds: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_f32(ds)).map_err(|e| Error::io(path, e))
}

pub fn read_f32(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut ds = decode_f32(&bytes)?;
    ds.provenance = format!("satd:{}", path.display());
    Ok(ds)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub seed: u64,
    pub classes: usize,
    pub dim: usize,
    pub per_class: usize,
    pub spread: f64,
}

/// Class means are drawn from this box. Its width sets class separation
/// relative to the attack budgets, which are absolute.
const MEAN_RANGE: (f64, f64) = (0.38, 0.62);

/// Isotropic Gaussian blobs, one per class, clipped to `[0,1]^d`.
///
/// Rows are interleaved by class (`label(i) == i % classes`) so any prefix
/// of the dataset is close to balanced.
pub fn gen_synthetic(spec: &SyntheticSpec) -> Result<Dataset> {
    let SyntheticSpec {
        seed,
        classes,
        dim,
        per_class,
        spread,
    } = *spec;
    if classes < 2 || dim < 2 || !(spread > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "synthetic data needs classes >= 2, dim >= 2, spread > 0 (got {classes}, {dim}, {spread})"
        )));
    }
    let mut rng = rng::from_seed(seed);
    let means: Vec<Vec<f64>> = (0..classes)
        .map(|_| {
            (0..dim)
                .map(|_| rng.gen_range(MEAN_RANGE.0..MEAN_RANGE.1))
                .collect()
        })
        .collect();
    let n = classes * per_class;
    let mut examples = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % classes;
        labels.push(c);
        for &mu in &means[c] {
            let noise: f64 = StandardNormal.sample(&mut rng);
            examples.push((mu + spread * noise).clamp(0.0, 1.0));
        }
    }
    Dataset::new(
        examples,
        labels,
        classes,
        dim,
        format!("synthetic(seed={seed},classes={classes},dim={dim},per_class={per_class},spread={spread})"),
    )
}

/// Stochastic view generator: uniform jitter, coordinate masking and an
/// optional mirror of each row of width `row_width` (the whole vector when
/// `row_width` is 0).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentationPolicy {
    pub jitter: f64,
    pub mask_prob: f64,
    pub flip: bool,
    pub row_width: usize,
}

impl AugmentationPolicy {
    pub fn identity() -> Self {
        Self {
            jitter: 0.0,
            mask_prob: 0.0,
            flip: false,
            row_width: 0,
        }
    }
}

impl Default for AugmentationPolicy {
    fn default() -> Self {
        Self {
            jitter: 0.1,
            mask_prob: 0.1,
            flip: false,
            row_width: 0,
        }
    }
}

pub fn augment(x: &[f64], policy: &AugmentationPolicy, draw: u64) -> Vec<f64> {
    let mut rng = rng::from_seed(draw);
    let mut out: Vec<f64> = x
        .iter()
        .map(|&v| {
            let jittered = if policy.jitter > 0.0 {
                v + rng.gen_range(-policy.jitter..=policy.jitter)
            } else {
                v
            };
            if policy.mask_prob > 0.0 && rng.gen_bool(policy.mask_prob.min(1.0)) {
                0.0
            } else {
                jittered
            }
        })
        .collect();
    if policy.flip && rng.gen_bool(0.5) {
        let width = if policy.row_width == 0 {
            out.len()
        } else {
            policy.row_width
        };
        for row in out.chunks_mut(width) {
            row.reverse();
        }
    }
    for v in &mut out {
        *v = v.clamp(0.0, 1.0);
    }
    out
}

/// Label-stratified two-way split. Within each part, rows keep their
/// original relative order.
pub fn split(ds: &Dataset, fractions: (f64, f64), seed: u64) -> Result<(Dataset, Dataset)> {
    let (a, b) = fractions;
    if a < 0.0 || b < 0.0 || ((a + b) - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidArgument(format!(
            "split fractions must be non-negative and sum to 1, got ({a}, {b})"
        )));
    }
    let mut first = Vec::new();
    let mut second = Vec::new();
    for c in 0..ds.num_classes {
        let mut members: Vec<usize> = (0..ds.len()).filter(|&i| ds.labels[i] == c).collect();
        if members.is_empty() {
            continue;
        }
        if members.len() < 2 {
            return Err(Error::Data(format!(
                "class {c} has {} example(s), fewer than the 2 split parts",
                members.len()
            )));
        }
        members.shuffle(&mut rng::from_seed(rng::derive(seed, &[c as u64])));
        let take = (a * members.len() as f64).round() as usize;
        first.extend_from_slice(&members[..take]);
        second.extend_from_slice(&members[take..]);
    }
    first.sort_unstable();
    second.sort_unstable();
    let mut p1 = ds.subset(&first);
    let mut p2 = ds.subset(&second);
    p1.provenance = format!("{}/split(seed={seed},part=0)", ds.provenance);
    p2.provenance = format!("{}/split(seed={seed},part=1)", ds.provenance);
    Ok((p1, p2))
}
