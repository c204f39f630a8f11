//! Labeled image datasets: synthetic power-law images, CIFAR-10 binaries,
//! channel normalization, high-pass filtering and STC1 persistence.

use std::fs;
use std::path::Path;

use num_complex::Complex64;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::container::{Payload, TensorContainer};
use crate::error::{invalid, shape_err, Error, Result};
use crate::rng::stream_rng;
use crate::spectral::{dft, freq_magnitude, idft};
use crate::tensor::{mirror, RealKernel, Shape3, SpatialTensor, SpectralTensor};

/// Spectral variance law `tau(i, j) = gamma / (|i|^alpha + |j|^beta)` with an
/// explicit variance for the zero frequency, where the law is undefined.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PowerLawParams {
    pub gamma: f64,
    pub alpha: f64,
    pub beta: f64,
    #[serde(default)]
    pub dc_variance: f64,
}

impl PowerLawParams {
    pub fn new(gamma: f64, alpha: f64, beta: f64, dc_variance: f64) -> Result<Self> {
        let p = Self {
            gamma,
            alpha,
            beta,
            dc_variance,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.alpha > 0.0 && self.beta > 0.0) {
            return invalid(format!(
                "power law needs gamma, alpha, beta > 0 (got {}, {}, {})",
                self.gamma, self.alpha, self.beta
            ));
        }
        if !(self.dc_variance >= 0.0) {
            return invalid("dc_variance must be nonnegative");
        }
        Ok(())
    }

    /// Variance at frequency `(i, j)` of an `height x width` grid, using modular magnitudes.
    pub fn tau(&self, i: usize, j: usize, height: usize, width: usize) -> f64 {
        let di = freq_magnitude(i, height) as f64;
        let dj = freq_magnitude(j, width) as f64;
        if di == 0.0 && dj == 0.0 {
            return self.dc_variance;
        }
        self.gamma / (di.powf(self.alpha) + dj.powf(self.beta))
    }

    /// `tau` replicated over channels, as a `C x H x W` map.
    pub fn tau_map(&self, shape: Shape3) -> SpatialTensor {
        SpatialTensor::from_fn(shape, |_, i, j| self.tau(i, j, shape.height, shape.width))
    }
}

/// Class indices or real-valued regression targets, one entry per image.
#[derive(Debug, Clone, PartialEq)]
pub enum Labels {
    Classes { classes: Vec<usize>, num_classes: usize },
    Targets { values: Vec<f64>, dim: usize },
}

impl Labels {
    pub fn len(&self) -> usize {
        match self {
            Labels::Classes { classes, .. } => classes.len(),
            Labels::Targets { values, dim } => values.len() / (*dim).max(1),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Number of model outputs these labels call for.
    pub fn output_dim(&self) -> usize {
        match self {
            Labels::Classes { num_classes, .. } => *num_classes,
            Labels::Targets { dim, .. } => *dim,
        }
    }

    pub fn target(&self, n: usize) -> Option<&[f64]> {
        match self {
            Labels::Targets { values, dim } => Some(&values[n * dim..(n + 1) * dim]),
            Labels::Classes { .. } => None,
        }
    }

    pub fn class(&self, n: usize) -> Option<usize> {
        match self {
            Labels::Classes { classes, .. } => Some(classes[n]),
            Labels::Targets { .. } => None,
        }
    }

    fn select(&self, idx: &[usize]) -> Labels {
        match self {
            Labels::Classes { classes, num_classes } => Labels::Classes {
                classes: idx.iter().map(|&i| classes[i]).collect(),
                num_classes: *num_classes,
            },
            Labels::Targets { values, dim } => Labels::Targets {
                values: idx
                    .iter()
                    .flat_map(|&i| values[i * dim..(i + 1) * dim].iter().copied())
                    .collect(),
                dim: *dim,
            },
        }
    }
}

/// Images of one common shape with their labels and channel statistics.
///
/// `channel_mean`/`channel_std` are the statistics that were subtracted and
/// divided out; they stay `0`/`1` until [`normalize`] or [`apply_normalization`] runs.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    pub images: Vec<SpatialTensor>,
    pub labels: Labels,
    pub channel_mean: Vec<f64>,
    pub channel_std: Vec<f64>,
}

impl LabeledDataset {
    pub fn new(images: Vec<SpatialTensor>, labels: Labels) -> Result<Self> {
        if images.is_empty() {
            return invalid("dataset must contain at least one image");
        }
        if images.len() != labels.len() {
            return shape_err(format!("{} images but {} labels", images.len(), labels.len()));
        }
        let shape = images[0].shape();
        if let Some(bad) = images.iter().position(|x| x.shape() != shape) {
            return shape_err(format!(
                "image {bad} has shape {} but image 0 has shape {shape}",
                images[bad].shape()
            ));
        }
        let c = shape.channels;
        Ok(Self {
            images,
            labels,
            channel_mean: vec![0.0; c],
            channel_std: vec![1.0; c],
        })
    }

    pub fn shape(&self) -> Shape3 {
        self.images[0].shape()
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn subset(&self, idx: &[usize]) -> Result<Self> {
        let mut out = Self::new(
            idx.iter().map(|&i| self.images[i].clone()).collect(),
            self.labels.select(idx),
        )?;
        out.channel_mean = self.channel_mean.clone();
        out.channel_std = self.channel_std.clone();
        Ok(out)
    }

    pub fn spectra(&self) -> Vec<SpectralTensor> {
        self.images.iter().map(dft).collect()
    }

    pub fn map_images(&self, f: impl Fn(&SpatialTensor) -> Result<SpatialTensor>) -> Result<Self> {
        let images = self.images.iter().map(f).collect::<Result<Vec<_>>>()?;
        Ok(Self {
            images,
            labels: self.labels.clone(),
            channel_mean: self.channel_mean.clone(),
            channel_std: self.channel_std.clone(),
        })
    }
}

/// How synthetic labels are produced from the teacher outputs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LabelRule {
    /// Real targets `v*^T x + noise`.
    #[default]
    Regression,
    /// Class index: sign of the single output, or argmax over several.
    Classes,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TeacherSpec {
    #[serde(default = "TeacherSpec::default_outputs")]
    pub outputs: usize,
    /// Standard deviation of each spatial teacher weight.
    #[serde(default = "TeacherSpec::default_scale")]
    pub scale: f64,
    #[serde(default = "TeacherSpec::default_noise")]
    pub noise_std: f64,
    #[serde(default)]
    pub rule: LabelRule,
}

impl TeacherSpec {
    fn default_outputs() -> usize {
        1
    }
    fn default_scale() -> f64 {
        1.0
    }
    fn default_noise() -> f64 {
        0.1
    }
}

impl Default for TeacherSpec {
    fn default() -> Self {
        Self {
            outputs: 1,
            scale: 1.0,
            noise_std: 0.1,
            rule: LabelRule::Regression,
        }
    }
}

/// Fixed random linear map `x -> w^T x` used to label synthetic images.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearTeacher {
    pub weights: RealKernel,
    pub noise_std: f64,
    pub rule: LabelRule,
}

impl LinearTeacher {
    pub fn clean_output(&self, x: &SpatialTensor) -> Result<Vec<f64>> {
        crate::spectral::spatial_contract(&self.weights, x)
    }
}

const NOISE_STREAM_BASE: u64 = 1 << 40;

/// Deterministic sampler of power-law images; sample `n` depends only on `(seed, n)`.
#[derive(Debug, Clone)]
pub struct PowerLawGenerator {
    pub params: PowerLawParams,
    pub shape: Shape3,
    pub seed: u64,
    pub teacher: LinearTeacher,
}

impl PowerLawGenerator {
    pub fn new(params: PowerLawParams, shape: Shape3, seed: u64, spec: TeacherSpec) -> Result<Self> {
        params.validate()?;
        if shape.is_empty() {
            return invalid("image shape must be nonempty");
        }
        if spec.outputs == 0 {
            return invalid("teacher needs at least one output");
        }
        let mut rng = stream_rng(seed, 0);
        let n = spec.outputs * shape.len();
        let data = (0..n)
            .map(|_| spec.scale * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let weights = RealKernel::new(spec.outputs, shape.height, shape.width, shape.channels, data)?;
        Ok(Self {
            params,
            shape,
            seed,
            teacher: LinearTeacher {
                weights,
                noise_std: spec.noise_std,
                rule: spec.rule,
            },
        })
    }

    /// The `n`-th image: inverse DFT of a conjugate-symmetric complex Gaussian
    /// spectrum with independent coefficients of variance `tau`.
    pub fn image(&self, n: usize) -> SpatialTensor {
        let s = self.shape;
        let mut rng = stream_rng(self.seed, n as u64 + 1);
        let mut spec = SpectralTensor::zeros(s);
        for c in 0..s.channels {
            for i in 0..s.height {
                for j in 0..s.width {
                    let (pi, pj) = mirror(i, j, s.height, s.width);
                    let here = i * s.width + j;
                    let there = pi * s.width + pj;
                    if here > there {
                        continue;
                    }
                    let tau = self.params.tau(i, j, s.height, s.width);
                    let a: f64 = rng.sample(StandardNormal);
                    if here == there {
                        spec.set(c, i, j, Complex64::new(a * tau.sqrt(), 0.0));
                    } else {
                        let b: f64 = rng.sample(StandardNormal);
                        let z = Complex64::new(a, b) * (tau / 2.0).sqrt();
                        spec.set(c, i, j, z);
                        spec.set(c, pi, pj, z.conj());
                    }
                }
            }
        }
        idft(&spec).real_part()
    }

    fn label_values(&self, n: usize, x: &SpatialTensor) -> Result<Vec<f64>> {
        let mut y = self.teacher.clean_output(x)?;
        if self.teacher.noise_std > 0.0 {
            let mut rng = stream_rng(self.seed, NOISE_STREAM_BASE + n as u64);
            for v in &mut y {
                *v += self.teacher.noise_std * rng.sample::<f64, _>(StandardNormal);
            }
        }
        Ok(y)
    }

    /// Samples with indices `start..start + count`.
    pub fn dataset(&self, start: usize, count: usize) -> Result<LabeledDataset> {
        if count == 0 {
            return invalid("need at least one sample");
        }
        let mut images = Vec::with_capacity(count);
        let mut values = Vec::new();
        let mut classes = Vec::new();
        let k = self.teacher.weights.c_out();
        for n in start..start + count {
            let x = self.image(n);
            let y = self.label_values(n, &x)?;
            match self.teacher.rule {
                LabelRule::Regression => values.extend(y),
                LabelRule::Classes => classes.push(if k == 1 {
                    usize::from(y[0] > 0.0)
                } else {
                    argmax(&y)
                }),
            }
            images.push(x);
        }
        let labels = match self.teacher.rule {
            LabelRule::Regression => Labels::Targets { values, dim: k },
            LabelRule::Classes => Labels::Classes {
                classes,
                num_classes: k.max(2),
            },
        };
        LabeledDataset::new(images, labels)
    }
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// `n` power-law images labeled by a seeded linear teacher.
pub fn generate_powerlaw(
    params: PowerLawParams,
    shape: Shape3,
    n: usize,
    seed: u64,
    teacher: TeacherSpec,
) -> Result<LabeledDataset> {
    PowerLawGenerator::new(params, shape, seed, teacher)?.dataset(0, n)
}

/// Zeroes every DFT coefficient whose modular per-axis frequency magnitudes are
/// both at most `threshold`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HighPassSpec {
    pub threshold: usize,
}

impl HighPassSpec {
    pub fn new(threshold: usize) -> Self {
        Self { threshold }
    }

    pub fn validate(&self, height: usize, width: usize) -> Result<()> {
        if 2 * self.threshold >= height.min(width) {
            return invalid(format!(
                "high-pass threshold {} must be below min(H, W)/2 for a {height}x{width} image",
                self.threshold
            ));
        }
        Ok(())
    }

    pub fn is_masked(&self, i: usize, j: usize, height: usize, width: usize) -> bool {
        freq_magnitude(i, height) <= self.threshold && freq_magnitude(j, width) <= self.threshold
    }

    pub fn removed_count(&self, height: usize, width: usize) -> usize {
        let mut n = 0;
        for i in 0..height {
            for j in 0..width {
                n += usize::from(self.is_masked(i, j, height, width));
            }
        }
        n
    }

    /// Exact fraction of frequency indices the mask removes.
    pub fn removed_fraction(&self, height: usize, width: usize) -> f64 {
        self.removed_count(height, width) as f64 / (height * width) as f64
    }

    pub fn report(&self, height: usize, width: usize) -> HighPassReport {
        HighPassReport {
            threshold: self.threshold,
            removed_indices: self.removed_count(height, width),
            total_indices: height * width,
            removed_fraction: self.removed_fraction(height, width),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HighPassReport {
    pub threshold: usize,
    pub removed_indices: usize,
    pub total_indices: usize,
    pub removed_fraction: f64,
}

pub fn high_pass_filter(x: &SpatialTensor, spec: HighPassSpec) -> Result<SpatialTensor> {
    let s = x.shape();
    spec.validate(s.height, s.width)?;
    let mut xh = dft(x);
    for c in 0..s.channels {
        for i in 0..s.height {
            for j in 0..s.width {
                if spec.is_masked(i, j, s.height, s.width) {
                    xh.set(c, i, j, Complex64::new(0.0, 0.0));
                }
            }
        }
    }
    idft(&xh).to_real(1e-10)
}

pub fn high_pass_dataset(ds: &LabeledDataset, spec: HighPassSpec) -> Result<(LabeledDataset, HighPassReport)> {
    let s = ds.shape();
    spec.validate(s.height, s.width)?;
    let out = ds.map_images(|x| high_pass_filter(x, spec))?;
    Ok((out, spec.report(s.height, s.width)))
}

/// Per-channel scalar statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizationStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// Channel means and population standard deviations over every pixel of every image.
pub fn fit_normalization(ds: &LabeledDataset) -> Result<NormalizationStats> {
    let s = ds.shape();
    let count = (ds.len() * s.plane()) as f64;
    let mut mean = vec![0.0; s.channels];
    let mut std = vec![0.0; s.channels];
    for (c, m) in mean.iter_mut().enumerate() {
        *m = ds.images.iter().map(|x| x.channel(c).iter().sum::<f64>()).sum::<f64>() / count;
    }
    for (c, sd) in std.iter_mut().enumerate() {
        let var = ds
            .images
            .iter()
            .map(|x| x.channel(c).iter().map(|v| (v - mean[c]).powi(2)).sum::<f64>())
            .sum::<f64>()
            / count;
        *sd = var.sqrt();
        if !(*sd > 0.0) {
            return invalid(format!("channel {c} has zero standard deviation"));
        }
    }
    Ok(NormalizationStats { mean, std })
}

/// Subtracts `stats.mean` and divides by `stats.std` per channel; records the statistics.
pub fn apply_normalization(ds: &LabeledDataset, stats: &NormalizationStats) -> Result<LabeledDataset> {
    let s = ds.shape();
    if stats.mean.len() != s.channels || stats.std.len() != s.channels {
        return shape_err(format!(
            "statistics for {} channels applied to {} channels",
            stats.mean.len(),
            s.channels
        ));
    }
    if let Some(c) = stats.std.iter().position(|v| !(*v > 0.0)) {
        return invalid(format!("channel {c} has zero standard deviation"));
    }
    let mut out = ds.map_images(|x| {
        let mut y = x.clone();
        let p = s.plane();
        for (k, v) in y.data_mut().iter_mut().enumerate() {
            let c = k / p;
            *v = (*v - stats.mean[c]) / stats.std[c];
        }
        Ok(y)
    })?;
    out.channel_mean = stats.mean.clone();
    out.channel_std = stats.std.clone();
    Ok(out)
}

/// Fits channel statistics on `ds` and applies them.
pub fn normalize(ds: &LabeledDataset) -> Result<(LabeledDataset, NormalizationStats)> {
    let stats = fit_normalization(ds)?;
    Ok((apply_normalization(ds, &stats)?, stats))
}

pub const CIFAR10_SIDE: usize = 32;
pub const CIFAR10_RECORD: usize = 1 + 3 * CIFAR10_SIDE * CIFAR10_SIDE;

/// Parses CIFAR-10 binary records (label byte, then planar R, G, B rows); pixels scaled to `[0, 1]`.
pub fn parse_cifar10(bytes: &[u8]) -> Result<LabeledDataset> {
    if bytes.is_empty() || bytes.len() % CIFAR10_RECORD != 0 {
        let records = bytes.len() / CIFAR10_RECORD;
        return Err(Error::Format(format!(
            "CIFAR-10 binary must be a positive multiple of {CIFAR10_RECORD} bytes: expected {} bytes for {} records, got {}",
            records.max(1) * CIFAR10_RECORD,
            records.max(1),
            bytes.len()
        )));
    }
    let shape = Shape3::new(3, CIFAR10_SIDE, CIFAR10_SIDE);
    let mut images = Vec::new();
    let mut classes = Vec::new();
    for rec in bytes.chunks_exact(CIFAR10_RECORD) {
        let label = rec[0] as usize;
        if label > 9 {
            return Err(Error::Format(format!("label byte {label} outside 0..=9")));
        }
        classes.push(label);
        let data = rec[1..].iter().map(|&b| f64::from(b) / 255.0).collect();
        images.push(SpatialTensor::new(shape, data)?);
    }
    LabeledDataset::new(
        images,
        Labels::Classes {
            classes,
            num_classes: 10,
        },
    )
}

pub fn load_cifar10_binary(path: impl AsRef<Path>) -> Result<LabeledDataset> {
    parse_cifar10(&fs::read(path)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Cifar10Split {
    Train,
    Test,
}

/// Loads `data_batch_1..5.bin` or `test_batch.bin` from a CIFAR-10 binary directory.
pub fn load_cifar10(dir: impl AsRef<Path>, split: Cifar10Split) -> Result<LabeledDataset> {
    let dir = dir.as_ref();
    let files: Vec<String> = match split {
        Cifar10Split::Train => (1..=5).map(|i| format!("data_batch_{i}.bin")).collect(),
        Cifar10Split::Test => vec!["test_batch.bin".to_string()],
    };
    let mut bytes = Vec::new();
    for f in files {
        bytes.extend(fs::read(dir.join(f))?);
    }
    parse_cifar10(&bytes)
}

/// Writes `<dir>/<name>_images.stc` and `<dir>/<name>_labels.stc`.
pub fn save_dataset(ds: &LabeledDataset, dir: impl AsRef<Path>, name: &str, extra: Value) -> Result<()> {
    let dir = dir.as_ref();
    let s = ds.shape();
    let mut data = Vec::with_capacity(ds.len() * s.len());
    for x in &ds.images {
        data.extend_from_slice(x.data());
    }
    let (label_kind, num_classes) = match &ds.labels {
        Labels::Classes { num_classes, .. } => ("classes", *num_classes),
        Labels::Targets { dim, .. } => ("targets", *dim),
    };
    let meta = json!({
        "channel_mean": ds.channel_mean,
        "channel_std": ds.channel_std,
        "labels": label_kind,
        "output_dim": num_classes,
        "extra": extra,
    });
    TensorContainer::f64(vec![ds.len(), s.channels, s.height, s.width], data, meta)?
        .save(dir.join(format!("{name}_images.stc")))?;
    let labels = match &ds.labels {
        Labels::Classes { classes, .. } => {
            let bytes = classes
                .iter()
                .map(|&c| u8::try_from(c).map_err(|_| Error::Format(format!("class {c} exceeds u8"))))
                .collect::<Result<Vec<u8>>>()?;
            TensorContainer::new(vec![ds.len()], Payload::U8(bytes), json!({"num_classes": num_classes}))?
        }
        Labels::Targets { values, dim } => {
            TensorContainer::f64(vec![ds.len(), *dim], values.clone(), json!({}))?
        }
    };
    labels.save(dir.join(format!("{name}_labels.stc")))?;
    Ok(())
}

pub fn load_dataset(dir: impl AsRef<Path>, name: &str) -> Result<LabeledDataset> {
    let dir = dir.as_ref();
    let imgs = TensorContainer::load(dir.join(format!("{name}_images.stc")))?;
    if imgs.shape.len() != 4 {
        return Err(Error::Format(format!("image container must be 4-D, got {:?}", imgs.shape)));
    }
    let shape = Shape3::new(imgs.shape[1], imgs.shape[2], imgs.shape[3]);
    let data = imgs.as_f64()?;
    let images = data
        .chunks_exact(shape.len().max(1))
        .map(|c| SpatialTensor::new(shape, c.to_vec()))
        .collect::<Result<Vec<_>>>()?;
    let lab = TensorContainer::load(dir.join(format!("{name}_labels.stc")))?;
    let labels = match &lab.payload {
        Payload::U8(b) => Labels::Classes {
            classes: b.iter().map(|&v| v as usize).collect(),
            num_classes: lab.metadata["num_classes"]
                .as_u64()
                .ok_or_else(|| Error::Format("labels missing num_classes".into()))? as usize,
        },
        Payload::F64(v) => Labels::Targets {
            values: v.clone(),
            dim: *lab.shape.get(1).unwrap_or(&1),
        },
        Payload::C128(_) => return Err(Error::Format("complex labels are not supported".into())),
    };
    let mut ds = LabeledDataset::new(images, labels)?;
    let vec_of = |key: &str| -> Result<Vec<f64>> {
        serde_json::from_value(imgs.metadata[key].clone())
            .map_err(|e| Error::Format(format!("metadata field {key}: {e}")))
    };
    ds.channel_mean = vec_of("channel_mean")?;
    ds.channel_std = vec_of("channel_std")?;
    Ok(ds)
}
