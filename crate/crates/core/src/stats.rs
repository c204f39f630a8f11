//! Spectral statistics of image datasets: per-frequency standard deviations,
//! Hermitian covariance with distance-decay diagnostics, radial averages,
//! power-law fits and curve post-processing.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::dataset::LabeledDataset;
use crate::error::{invalid, shape_err, Error, Result};
use crate::spectral::{dft, freq_magnitude};
use crate::tensor::{Shape3, SpatialTensor, SpectralTensor};

/// Largest `C*H*W` for which the full covariance matrix is materialized.
pub const COVARIANCE_MAX_DIM: usize = 4096;

#[derive(Debug, Clone, PartialEq)]
pub struct SpectralStdMap {
    pub values: SpatialTensor,
    pub sample_count: usize,
}

fn check_spectra(spectra: &[SpectralTensor], min: usize) -> Result<Shape3> {
    if spectra.len() < min {
        return invalid(format!("need at least {min} samples, got {}", spectra.len()));
    }
    let shape = spectra[0].shape();
    if let Some(k) = spectra.iter().position(|x| x.shape() != shape) {
        return shape_err(format!("sample {k} has shape {} but sample 0 has {shape}", spectra[k].shape()));
    }
    Ok(shape)
}

pub fn mean_spectrum(spectra: &[SpectralTensor]) -> Result<SpectralTensor> {
    let shape = check_spectra(spectra, 1)?;
    let mut acc = vec![Complex64::new(0.0, 0.0); shape.len()];
    for x in spectra {
        for (a, v) in acc.iter_mut().zip(x.data()) {
            *a += v;
        }
    }
    let n = spectra.len() as f64;
    SpectralTensor::new(shape, acc.into_iter().map(|a| a / n).collect())
}

/// Population standard deviation of every complex DFT coefficient,
/// `sqrt(mean |x - mean x|^2)`.
pub fn std_map_from_spectra(spectra: &[SpectralTensor]) -> Result<SpectralStdMap> {
    let shape = check_spectra(spectra, 2)?;
    let mu = mean_spectrum(spectra)?;
    let mut acc = vec![0.0; shape.len()];
    for x in spectra {
        for ((a, v), m) in acc.iter_mut().zip(x.data()).zip(mu.data()) {
            *a += (v - m).norm_sqr();
        }
    }
    let n = spectra.len() as f64;
    Ok(SpectralStdMap {
        values: SpatialTensor::new(shape, acc.into_iter().map(|a| (a / n).sqrt()).collect())?,
        sample_count: spectra.len(),
    })
}

/// Per-frequency standard deviations of the dataset's images as given; callers
/// normalize channels first when comparing against trained models.
pub fn spectral_std_map(ds: &LabeledDataset) -> Result<SpectralStdMap> {
    std_map_from_spectra(&ds.spectra())
}

/// Wrap-around distance between indices `a` and `b` on a cycle of length `n`.
pub fn modular_distance(a: usize, b: usize, n: usize) -> usize {
    let d = (a + n - b) % n;
    d.min(n - d)
}

/// Distance between coefficient positions `(c, h, w)`; spatial axes optionally on the torus.
pub fn index_distance(a: (usize, usize, usize), b: (usize, usize, usize), shape: Shape3, modular: bool) -> f64 {
    (index_distance_sq(a, b, shape, modular) as f64).sqrt()
}

fn index_distance_sq(a: (usize, usize, usize), b: (usize, usize, usize), shape: Shape3, modular: bool) -> usize {
    let dc = a.0.abs_diff(b.0);
    let (dh, dw) = if modular {
        (modular_distance(a.1, b.1, shape.height), modular_distance(a.2, b.2, shape.width))
    } else {
        (a.1.abs_diff(b.1), a.2.abs_diff(b.2))
    };
    dc * dc + dh * dh + dw * dw
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovarianceDecayCurve {
    pub distances: Vec<f64>,
    /// Mean `|Sigma|` over index pairs at each distance.
    pub values: Vec<f64>,
    pub counts: Vec<usize>,
    pub modular: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CovarianceEstimate {
    pub shape: Shape3,
    /// Row-major `(CHW) x (CHW)` Hermitian matrix.
    pub matrix: Vec<Complex64>,
    pub sample_count: usize,
    pub modular: CovarianceDecayCurve,
    pub plain: CovarianceDecayCurve,
}

impl CovarianceEstimate {
    pub fn dim(&self) -> usize {
        self.shape.len()
    }

    pub fn get(&self, a: usize, b: usize) -> Complex64 {
        self.matrix[a * self.dim() + b]
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.dim()).map(|k| self.get(k, k).re).collect()
    }
}

/// Full covariance `E[(x - mu)(x - mu)^H]` of the DFT coefficients, accumulated in
/// batches of `batch_size` around the global mean and weighted by true batch sizes.
pub fn covariance_batched(spectra: &[SpectralTensor], batch_size: usize) -> Result<CovarianceEstimate> {
    if batch_size < 2 {
        return invalid("batch size must be at least 2");
    }
    let shape = check_spectra(spectra, 2)?;
    let n = shape.len();
    if n > COVARIANCE_MAX_DIM {
        return invalid(format!(
            "full covariance for shape {shape} needs a {n}x{n} matrix (limit C*H*W <= {COVARIANCE_MAX_DIM}); use the std-map path instead"
        ));
    }
    let mu = mean_spectrum(spectra)?;
    let total = spectra.len() as f64;
    let mut matrix = vec![Complex64::new(0.0, 0.0); n * n];
    let mut centered = vec![Complex64::new(0.0, 0.0); n];
    for batch in spectra.chunks(batch_size) {
        let mut part = vec![Complex64::new(0.0, 0.0); n * n];
        for x in batch {
            for ((z, v), m) in centered.iter_mut().zip(x.data()).zip(mu.data()) {
                *z = v - m;
            }
            for a in 0..n {
                let za = centered[a];
                let row = &mut part[a * n..(a + 1) * n];
                for (p, zb) in row.iter_mut().zip(&centered) {
                    *p += za * zb.conj();
                }
            }
        }
        let b = batch.len() as f64;
        let weight = b / total;
        for (m, p) in matrix.iter_mut().zip(&part) {
            *m += weight * (p / b);
        }
    }
    let modular = decay_curve(&matrix, shape, true);
    let plain = decay_curve(&matrix, shape, false);
    Ok(CovarianceEstimate {
        shape,
        matrix,
        sample_count: spectra.len(),
        modular,
        plain,
    })
}

fn decay_curve(matrix: &[Complex64], shape: Shape3, modular: bool) -> CovarianceDecayCurve {
    let n = shape.len();
    let coords: Vec<(usize, usize, usize)> = (0..shape.channels)
        .flat_map(|c| (0..shape.height).flat_map(move |h| (0..shape.width).map(move |w| (c, h, w))))
        .collect();
    let mut groups: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
    for a in 0..n {
        for b in 0..n {
            let key = index_distance_sq(coords[a], coords[b], shape, modular);
            let e = groups.entry(key).or_insert((0.0, 0));
            e.0 += matrix[a * n + b].norm();
            e.1 += 1;
        }
    }
    let mut out = CovarianceDecayCurve {
        distances: Vec::new(),
        values: Vec::new(),
        counts: Vec::new(),
        modular,
    };
    for (k, (sum, count)) in groups {
        out.distances.push((k as f64).sqrt());
        out.values.push(sum / count as f64);
        out.counts.push(count);
    }
    out
}

/// A per-radius curve over distinct frequency radii.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrequencyCurve {
    pub radii: Vec<f64>,
    pub values: Vec<f64>,
    pub counts: Vec<usize>,
    pub stderr: Option<Vec<f64>>,
    pub modular: bool,
}

impl FrequencyCurve {
    pub fn len(&self) -> usize {
        self.radii.len()
    }

    pub fn is_empty(&self) -> bool {
        self.radii.is_empty()
    }

    pub fn same_grid(&self, other: &FrequencyCurve) -> bool {
        self.radii == other.radii
    }

    /// Keeps the points with `keep(r)` true.
    pub fn restrict(&self, keep: impl Fn(f64) -> bool) -> FrequencyCurve {
        let idx: Vec<usize> = (0..self.len()).filter(|&k| keep(self.radii[k])).collect();
        FrequencyCurve {
            radii: idx.iter().map(|&k| self.radii[k]).collect(),
            values: idx.iter().map(|&k| self.values[k]).collect(),
            counts: idx.iter().map(|&k| self.counts[k]).collect(),
            stderr: self.stderr.as_ref().map(|s| idx.iter().map(|&k| s[k]).collect()),
            modular: self.modular,
        }
    }
}

/// Frequency magnitude of index `i` on an axis of length `n`.
pub fn axis_frequency(i: usize, n: usize, modular: bool) -> usize {
    if modular {
        freq_magnitude(i, n)
    } else {
        i
    }
}

/// Averages over channels, then over all `(i, j)` sharing a radius
/// `sqrt(d(i)^2 + d(j)^2)`. `stderr` is the standard error of that mean.
pub fn radial_average(map: &SpatialTensor, modular: bool) -> FrequencyCurve {
    let s = map.shape();
    let mut groups: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for i in 0..s.height {
        for j in 0..s.width {
            let di = axis_frequency(i, s.height, modular);
            let dj = axis_frequency(j, s.width, modular);
            let v = (0..s.channels).map(|c| map.get(c, i, j)).sum::<f64>() / s.channels as f64;
            groups.entry(di * di + dj * dj).or_default().push(v);
        }
    }
    let mut curve = FrequencyCurve {
        radii: Vec::new(),
        values: Vec::new(),
        counts: Vec::new(),
        stderr: Some(Vec::new()),
        modular,
    };
    for (k, vals) in groups {
        let n = vals.len() as f64;
        let mean = vals.iter().sum::<f64>() / n;
        let se = if vals.len() > 1 {
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
            (var / n).sqrt()
        } else {
            0.0
        };
        curve.radii.push((k as f64).sqrt());
        curve.values.push(mean);
        curve.counts.push(vals.len());
        if let Some(s) = curve.stderr.as_mut() {
            s.push(se);
        }
    }
    curve
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PowerLawFit {
    pub alpha: f64,
    pub gamma: f64,
    /// RMS residual of the log-log fit.
    pub residual: f64,
    pub points: usize,
    pub r_min: f64,
    pub r_max: f64,
}

/// Least-squares fit of `log value = log gamma - alpha log r` over `r` in `[2, r_max]`.
pub fn fit_power_law(curve: &FrequencyCurve, r_max: Option<f64>) -> Result<PowerLawFit> {
    let r_hi = r_max.unwrap_or(f64::INFINITY);
    let pts: Vec<(f64, f64)> = curve
        .radii
        .iter()
        .zip(&curve.values)
        .filter(|(r, _)| **r >= 2.0 && **r <= r_hi)
        .map(|(r, v)| (*r, *v))
        .collect();
    if pts.len() < 4 {
        return invalid(format!("power-law fit needs at least 4 radii in [2, {r_hi}], got {}", pts.len()));
    }
    if let Some((r, v)) = pts.iter().find(|(_, v)| !(*v > 0.0)) {
        return invalid(format!("nonpositive value {v} at radius {r} in fit range"));
    }
    let xs: Vec<f64> = pts.iter().map(|(r, _)| r.ln()).collect();
    let ys: Vec<f64> = pts.iter().map(|(_, v)| v.ln()).collect();
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let residual = (xs
        .iter()
        .zip(&ys)
        .map(|(x, y)| (y - intercept - slope * x).powi(2))
        .sum::<f64>()
        / n)
        .sqrt();
    Ok(PowerLawFit {
        alpha: -slope,
        gamma: intercept.exp(),
        residual,
        points: pts.len(),
        r_min: pts[0].0,
        r_max: pts[pts.len() - 1].0,
    })
}

/// Trapezoidal integral of the curve over `r`.
pub fn trapezoid_integral(curve: &FrequencyCurve) -> f64 {
    curve
        .radii
        .windows(2)
        .zip(curve.values.windows(2))
        .map(|(r, v)| (r[1] - r[0]) * (v[0] + v[1]) / 2.0)
        .sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PostprocessOptions {
    #[serde(default = "PostprocessOptions::default_halfwidth")]
    pub smooth_halfwidth: usize,
    #[serde(default = "yes")]
    pub normalize: bool,
    #[serde(default = "yes")]
    pub log: bool,
}

fn yes() -> bool {
    true
}

impl PostprocessOptions {
    fn default_halfwidth() -> usize {
        3
    }
}

impl Default for PostprocessOptions {
    fn default() -> Self {
        Self {
            smooth_halfwidth: 3,
            normalize: true,
            log: true,
        }
    }
}

/// Moving average over `[k - h, k + h]`, windows truncated at the ends.
pub fn smooth(values: &[f64], halfwidth: usize) -> Vec<f64> {
    let n = values.len();
    (0..n)
        .map(|k| {
            let lo = k.saturating_sub(halfwidth);
            let hi = (k + halfwidth).min(n - 1);
            values[lo..=hi].iter().sum::<f64>() / (hi - lo + 1) as f64
        })
        .collect()
}

/// Normalize by the integral, smooth, then take logs, each step optional.
pub fn postprocess_curve(curve: &FrequencyCurve, opts: PostprocessOptions) -> Result<FrequencyCurve> {
    let mut out = curve.clone();
    if opts.normalize {
        let area = trapezoid_integral(curve);
        if !(area > 0.0 && area.is_finite()) {
            return invalid(format!("cannot normalize a curve with integral {area}"));
        }
        for v in &mut out.values {
            *v /= area;
        }
        if let Some(s) = out.stderr.as_mut() {
            for v in s {
                *v /= area;
            }
        }
    }
    if opts.smooth_halfwidth > 0 && !out.is_empty() {
        out.values = smooth(&out.values, opts.smooth_halfwidth);
        out.stderr = None;
    }
    if opts.log {
        if let Some(k) = out.values.iter().position(|v| !(*v > 0.0)) {
            return invalid(format!(
                "log of nonpositive value {} at radius {}",
                out.values[k], out.radii[k]
            ));
        }
        for v in &mut out.values {
            *v = v.ln();
        }
        out.stderr = None;
    }
    Ok(out)
}

/// Formats a float with 17 significant digits.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

/// CSV with header `r,value,count,stderr`; a missing stderr is left empty.
pub fn curve_to_csv(curve: &FrequencyCurve) -> String {
    let mut s = String::from("r,value,count,stderr\n");
    for k in 0..curve.len() {
        let se = curve.stderr.as_ref().map(|e| fmt_f64(e[k])).unwrap_or_default();
        let _ = writeln!(
            s,
            "{},{},{},{}",
            fmt_f64(curve.radii[k]),
            fmt_f64(curve.values[k]),
            curve.counts[k],
            se
        );
    }
    s
}

pub fn write_curve_csv(curve: &FrequencyCurve, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, curve_to_csv(curve))?;
    Ok(())
}

pub fn curve_from_csv(text: &str, modular: bool) -> Result<FrequencyCurve> {
    let mut lines = text.lines();
    if lines.next() != Some("r,value,count,stderr") {
        return Err(Error::Format("curve CSV must start with r,value,count,stderr".into()));
    }
    let mut curve = FrequencyCurve {
        radii: Vec::new(),
        values: Vec::new(),
        counts: Vec::new(),
        stderr: Some(Vec::new()),
        modular,
    };
    let bad = |line: &str| Error::Format(format!("malformed curve row: {line}"));
    for line in lines.filter(|l| !l.is_empty()) {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 4 {
            return Err(bad(line));
        }
        curve.radii.push(f[0].parse().map_err(|_| bad(line))?);
        curve.values.push(f[1].parse().map_err(|_| bad(line))?);
        curve.counts.push(f[2].parse().map_err(|_| bad(line))?);
        if f[3].is_empty() {
            curve.stderr = None;
        } else if let Some(s) = curve.stderr.as_mut() {
            s.push(f[3].parse().map_err(|_| bad(line))?);
        }
    }
    Ok(curve)
}

/// Std map of `ds`, radially averaged.
pub fn data_std_curve(ds: &LabeledDataset, modular: bool) -> Result<FrequencyCurve> {
    Ok(radial_average(&spectral_std_map(ds)?.values, modular))
}

/// Spectrum of `x` as a real magnitude map, for quick inspection.
pub fn magnitude_map(x: &SpatialTensor) -> SpatialTensor {
    let xh = dft(x);
    SpatialTensor::from_fn(x.shape(), |c, i, j| xh.get(c, i, j).norm())
}
