//! Convolutional networks with full-size circular kernels, stored and evaluated
//! in the Fourier domain.
//!
//! Layer `l < L` holds, at every frequency `(i, j)`, the `C_l x C_{l-1}` matrix that
//! maps `dft(x)` to `dft(w^l * x)`; the last layer holds `K x C_{L-1}` matrices whose
//! unconjugated contraction with the spectrum equals the spatial contraction
//! `w^{L,T} x`. Both are related to real spatial kernels by
//! [`conv_transfer`](crate::spectral::conv_transfer) and
//! [`contraction_transfer`](crate::spectral::contraction_transfer).

mod checkpoint;
mod train;

pub use checkpoint::{load_checkpoint, load_weights, save_checkpoint, save_weights};
pub use train::{
    evaluate_metric, history_csv, train, EpochRecord, TrainConfig, TrainState,
};

use num_complex::Complex64;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dataset::{LabeledDataset, Labels};
use crate::error::{invalid, shape_err, Error, Result};
use crate::linalg::{svd, CMatrix};
use crate::rng::stream_rng;
use crate::spectral::{
    circular_conv, contraction_transfer, conv_transfer, dft, idft, kernel_from_contraction_transfer,
    kernel_from_conv_transfer, spatial_contract, spectral_pointwise,
};
use crate::tensor::{ComplexKernel, RealKernel, Shape3, SpatialTensor, SpectralTensor};

/// Tolerance on weight conjugate asymmetry accepted by [`SpectralWeights::forward`].
pub const SYMMETRY_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Linear,
    Relu,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Loss {
    #[default]
    SquaredError,
    CrossEntropy,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpectralLayer {
    pub weights: ComplexKernel,
    pub bias: Option<Vec<f64>>,
}

/// Per-layer spectral weights plus the activation used between layers.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralWeights {
    height: usize,
    width: usize,
    activation: Activation,
    layers: Vec<SpectralLayer>,
}

fn czero() -> Complex64 {
    Complex64::new(0.0, 0.0)
}

impl SpectralWeights {
    pub fn new(height: usize, width: usize, activation: Activation, layers: Vec<SpectralLayer>) -> Result<Self> {
        if layers.is_empty() {
            return invalid("a network needs at least one layer");
        }
        for (l, layer) in layers.iter().enumerate() {
            let w = &layer.weights;
            if w.height() != height || w.width() != width {
                return shape_err(format!(
                    "layer {l} has spatial size {}x{}, expected {height}x{width}",
                    w.height(),
                    w.width()
                ));
            }
            if l > 0 && w.c_in() != layers[l - 1].weights.c_out() {
                return shape_err(format!(
                    "layer {l} expects {} input channels but layer {} produces {}",
                    w.c_in(),
                    l - 1,
                    layers[l - 1].weights.c_out()
                ));
            }
            if let Some(b) = &layer.bias {
                if b.len() != w.c_out() {
                    return shape_err(format!("layer {l} bias has length {}, expected {}", b.len(), w.c_out()));
                }
            }
        }
        Ok(Self {
            height,
            width,
            activation,
            layers,
        })
    }

    /// Builds spectral weights from real spatial kernels; the last kernel is the contraction.
    pub fn from_spatial(kernels: &[RealKernel], biases: Vec<Option<Vec<f64>>>, activation: Activation) -> Result<Self> {
        if kernels.is_empty() || biases.len() != kernels.len() {
            return invalid("need one bias entry per kernel");
        }
        let n = kernels.len();
        let layers = kernels
            .iter()
            .zip(biases)
            .enumerate()
            .map(|(l, (k, b))| SpectralLayer {
                weights: if l + 1 == n { contraction_transfer(k) } else { conv_transfer(k) },
                bias: b,
            })
            .collect();
        Self::new(kernels[0].height(), kernels[0].width(), activation, layers)
    }

    /// Real spatial kernels and biases equivalent to these weights.
    pub fn to_spatial(&self, tol: f64) -> Result<(Vec<RealKernel>, Vec<Option<Vec<f64>>>)> {
        let n = self.layers.len();
        let mut kernels = Vec::with_capacity(n);
        for (l, layer) in self.layers.iter().enumerate() {
            kernels.push(if l + 1 == n {
                kernel_from_contraction_transfer(&layer.weights, tol)?
            } else {
                kernel_from_conv_transfer(&layer.weights, tol)?
            });
        }
        Ok((kernels, self.layers.iter().map(|l| l.bias.clone()).collect()))
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn layers(&self) -> &[SpectralLayer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [SpectralLayer] {
        &mut self.layers
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    /// `(C, C_1, ..., C_{L-1}, K)`.
    pub fn widths(&self) -> Vec<usize> {
        std::iter::once(self.layers[0].weights.c_in())
            .chain(self.layers.iter().map(|l| l.weights.c_out()))
            .collect()
    }

    pub fn input_shape(&self) -> Shape3 {
        Shape3::new(self.layers[0].weights.c_in(), self.height, self.width)
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].weights.c_out()
    }

    pub fn has_bias(&self) -> bool {
        self.layers.iter().any(|l| l.bias.is_some())
    }

    /// `sum_l ||w_hat^l||_2^2`; biases are not penalized.
    pub fn penalty(&self) -> f64 {
        self.layers.iter().map(|l| l.weights.norm_sqr()).sum()
    }

    pub fn max_conjugate_asymmetry(&self) -> f64 {
        self.layers.iter().map(|l| l.weights.max_conjugate_asymmetry()).fold(0.0, f64::max)
    }

    pub fn symmetrize(&mut self) {
        for l in &mut self.layers {
            l.weights.symmetrize();
        }
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for l in &mut z.layers {
            l.weights.data_mut().iter_mut().for_each(|v| *v = czero());
            if let Some(b) = &mut l.bias {
                b.iter_mut().for_each(|v| *v = 0.0);
            }
        }
        z
    }

    /// `self += alpha * other` over weights and biases.
    pub fn axpy(&mut self, alpha: f64, other: &SpectralWeights) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            for (x, y) in a.weights.data_mut().iter_mut().zip(b.weights.data()) {
                *x += y * alpha;
            }
            if let (Some(x), Some(y)) = (&mut a.bias, &b.bias) {
                for (p, q) in x.iter_mut().zip(y) {
                    *p += alpha * q;
                }
            }
        }
    }

    pub fn scale(&mut self, alpha: f64) {
        for l in &mut self.layers {
            l.weights.data_mut().iter_mut().for_each(|v| *v *= alpha);
            if let Some(b) = &mut l.bias {
                b.iter_mut().for_each(|v| *v *= alpha);
            }
        }
    }

    /// Real inner product `sum Re(conj(a) b)` over all parameters.
    pub fn dot(&self, other: &SpectralWeights) -> f64 {
        let mut s = 0.0;
        for (a, b) in self.layers.iter().zip(&other.layers) {
            s += a.weights.data().iter().zip(b.weights.data()).map(|(x, y)| (x.conj() * y).re).sum::<f64>();
            if let (Some(x), Some(y)) = (&a.bias, &b.bias) {
                s += x.iter().zip(y).map(|(p, q)| p * q).sum::<f64>();
            }
        }
        s
    }

    pub fn param_norm_sqr(&self) -> f64 {
        self.dot(self)
    }

    fn check_input(&self, x: &SpectralTensor) -> Result<()> {
        if x.shape() != self.input_shape() {
            return shape_err(format!(
                "network expects input {} but got {}",
                self.input_shape(),
                x.shape()
            ));
        }
        Ok(())
    }

    /// Network outputs on a DFT input, after checking weight symmetry and that the
    /// discarded imaginary part of the output is negligible.
    pub fn forward(&self, x: &SpectralTensor) -> Result<Vec<f64>> {
        let asym = self.max_conjugate_asymmetry();
        if asym > SYMMETRY_TOL {
            return Err(Error::Numerical(format!(
                "weights violate conjugate symmetry by {asym:e} (tolerance {SYMMETRY_TOL:e})"
            )));
        }
        let (out, raw, _) = self.run(x, false)?;
        let resid = raw.iter().map(|z| z.im.abs()).fold(0.0, f64::max);
        let scale = raw.iter().map(|z| z.norm()).fold(1.0, f64::max);
        if resid > 1e-8 * scale {
            return Err(Error::Numerical(format!(
                "output has imaginary residue {resid:e}; is the input the DFT of a real image?"
            )));
        }
        Ok(out)
    }

    /// Outputs without symmetry or realness checks, for arbitrary complex inputs and weights.
    pub fn forward_unchecked(&self, x: &SpectralTensor) -> Result<Vec<f64>> {
        Ok(self.run(x, false)?.0)
    }

    fn run(&self, x: &SpectralTensor, keep: bool) -> Result<(Vec<f64>, Vec<Complex64>, Option<Trace>)> {
        self.check_input(x)?;
        let n = self.layers.len();
        let root = ((self.height * self.width) as f64).sqrt();
        let mut trace = Trace {
            inputs: Vec::with_capacity(n),
            pre: Vec::with_capacity(n),
        };
        let mut z = x.clone();
        for layer in &self.layers[..n - 1] {
            let mut u = spectral_pointwise(&layer.weights, &z)?;
            let pre = match self.activation {
                Activation::Linear => {
                    if let Some(b) = &layer.bias {
                        for (c, bc) in b.iter().enumerate() {
                            let v = u.get(c, 0, 0) + bc * root;
                            u.set(c, 0, 0, v);
                        }
                    }
                    None
                }
                Activation::Relu => {
                    let mut s = idft(&u).real_part();
                    let plane = self.height * self.width;
                    if let Some(b) = &layer.bias {
                        for (k, v) in s.data_mut().iter_mut().enumerate() {
                            *v += b[k / plane];
                        }
                    }
                    let mut a = s.clone();
                    a.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
                    u = dft(&a);
                    Some(s)
                }
            };
            if keep {
                trace.inputs.push(z);
                trace.pre.push(pre);
            }
            z = u;
        }
        let last = &self.layers[n - 1];
        let raw = crate::spectral::spectral_contract(&last.weights, &z)?;
        let out = raw
            .iter()
            .enumerate()
            .map(|(k, v)| v.re + last.bias.as_ref().map_or(0.0, |b| b[k]))
            .collect();
        if keep {
            trace.inputs.push(z);
        }
        Ok((out, raw, keep.then_some(trace)))
    }

    /// Accumulates into `grads` the gradient of `sum_k g_k o_k` at input `x` and
    /// returns the gradient with respect to the input spectrum.
    ///
    /// Complex gradients follow `d/dRe + i d/dIm`, so `w - lr * g` descends.
    pub fn backward(&self, x: &SpectralTensor, g: &[f64], grads: Option<&mut SpectralWeights>) -> Result<SpectralTensor> {
        let (_, _, trace) = self.run(x, true)?;
        let trace = trace.expect("trace kept");
        let n = self.layers.len();
        let (h, w) = (self.height, self.width);
        let root = ((h * w) as f64).sqrt();
        let mut grads = grads;

        let last = &self.layers[n - 1];
        let z = &trace.inputs[n - 1];
        let cz = z.shape().channels;
        let mut gz = SpectralTensor::zeros(z.shape());
        for (k, gk) in g.iter().enumerate() {
            if *gk == 0.0 {
                continue;
            }
            for i in 0..h {
                for j in 0..w {
                    for d in 0..cz {
                        let v = gz.get(d, i, j) + last.weights.get(k, i, j, d).conj() * *gk;
                        gz.set(d, i, j, v);
                    }
                }
            }
        }
        if let Some(gr) = grads.as_deref_mut() {
            let gl = &mut gr.layers[n - 1];
            for (k, gk) in g.iter().enumerate() {
                for i in 0..h {
                    for j in 0..w {
                        for d in 0..cz {
                            let v = gl.weights.get(k, i, j, d) + z.get(d, i, j).conj() * *gk;
                            gl.weights.set(k, i, j, d, v);
                        }
                    }
                }
            }
            if let Some(b) = &mut gl.bias {
                for (bk, gk) in b.iter_mut().zip(g) {
                    *bk += gk;
                }
            }
        }

        for l in (0..n - 1).rev() {
            let layer = &self.layers[l];
            // gz is the gradient w.r.t. this layer's output spectrum.
            let gu = match self.activation {
                Activation::Linear => {
                    if let Some(gr) = grads.as_deref_mut() {
                        if let Some(b) = &mut gr.layers[l].bias {
                            for (c, bc) in b.iter_mut().enumerate() {
                                *bc += root * gz.get(c, 0, 0).re;
                            }
                        }
                    }
                    gz
                }
                Activation::Relu => {
                    let s = trace.pre[l].as_ref().expect("relu trace");
                    let ga = idft(&gz).real_part();
                    let mut gs = ga;
                    for (v, sv) in gs.data_mut().iter_mut().zip(s.data()) {
                        if *sv <= 0.0 {
                            *v = 0.0;
                        }
                    }
                    if let Some(gr) = grads.as_deref_mut() {
                        if let Some(b) = &mut gr.layers[l].bias {
                            for (c, bc) in b.iter_mut().enumerate() {
                                *bc += gs.channel(c).iter().sum::<f64>();
                            }
                        }
                    }
                    dft(&gs)
                }
            };
            let zin = &trace.inputs[l];
            let (co, ci) = (layer.weights.c_out(), layer.weights.c_in());
            if let Some(gr) = grads.as_deref_mut() {
                let gw = &mut gr.layers[l].weights;
                for c in 0..co {
                    for i in 0..h {
                        for j in 0..w {
                            let guc = gu.get(c, i, j);
                            for d in 0..ci {
                                let v = gw.get(c, i, j, d) + guc * zin.get(d, i, j).conj();
                                gw.set(c, i, j, d, v);
                            }
                        }
                    }
                }
            }
            let mut gzin = SpectralTensor::zeros(zin.shape());
            for c in 0..co {
                for i in 0..h {
                    for j in 0..w {
                        let guc = gu.get(c, i, j);
                        for d in 0..ci {
                            let v = gzin.get(d, i, j) + layer.weights.get(c, i, j, d).conj() * guc;
                            gzin.set(d, i, j, v);
                        }
                    }
                }
            }
            gz = gzin;
        }
        Ok(gz)
    }

    /// Jacobian rows `d o_k / d x_hat` (as `d/dRe + i d/dIm`), one tensor per output.
    pub fn input_jacobian(&self, x: &SpectralTensor) -> Result<Vec<SpectralTensor>> {
        let k = self.output_dim();
        (0..k)
            .map(|o| {
                let mut g = vec![0.0; k];
                g[o] = 1.0;
                self.backward(x, &g, None)
            })
            .collect()
    }

    /// Reference evaluation through spatial circular convolutions.
    pub fn forward_spatial(&self, x: &SpatialTensor) -> Result<Vec<f64>> {
        let (kernels, biases) = self.to_spatial(1e-8)?;
        let n = kernels.len();
        let mut a = x.clone();
        for l in 0..n - 1 {
            let mut s = circular_conv(&kernels[l], &a)?;
            let plane = s.shape().plane();
            if let Some(b) = &biases[l] {
                for (k, v) in s.data_mut().iter_mut().enumerate() {
                    *v += b[k / plane];
                }
            }
            if self.activation == Activation::Relu {
                s.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
            }
            a = s;
        }
        let mut out = spatial_contract(&kernels[n - 1], &a)?;
        if let Some(b) = &biases[n - 1] {
            for (o, bk) in out.iter_mut().zip(b) {
                *o += bk;
            }
        }
        Ok(out)
    }

    /// Per-frequency product `w^L_ij ... w^1_ij`; only defined for bias-free linear nets.
    pub fn effective_predictor(&self) -> Result<EffectivePredictor> {
        if self.activation != Activation::Linear {
            return Err(Error::Unsupported("effective predictor of a relu network".into()));
        }
        if self.has_bias() {
            return Err(Error::Unsupported("effective predictor of a network with biases".into()));
        }
        let (h, w) = (self.height, self.width);
        let k = self.output_dim();
        let c = self.input_shape().channels;
        let mut v = ComplexKernel::zeros(k, h, w, c);
        for i in 0..h {
            for j in 0..w {
                let mut p = block_matrix(&self.layers[0].weights, i, j);
                for layer in &self.layers[1..] {
                    p = block_matrix(&layer.weights, i, j) * p;
                }
                for a in 0..k {
                    for b in 0..c {
                        v.set(a, i, j, b, p[(a, b)]);
                    }
                }
            }
        }
        Ok(EffectivePredictor { v })
    }

    pub fn predict(&self, data: &SpectralDataset) -> Result<Vec<Vec<f64>>> {
        data.spectra.iter().map(|x| self.forward_unchecked(x)).collect()
    }
}

struct Trace {
    inputs: Vec<SpectralTensor>,
    pre: Vec<Option<SpatialTensor>>,
}

/// The `(i, j)` channel block of a kernel as a matrix.
pub fn block_matrix(w: &ComplexKernel, i: usize, j: usize) -> CMatrix {
    CMatrix::from_row_slice(w.c_out(), w.c_in(), &w.block(i, j))
}

/// Single linear map `o = Re(sum_ij v_ij x_ij)` given by a `K x C` matrix per frequency.
#[derive(Debug, Clone, PartialEq)]
pub struct EffectivePredictor {
    pub v: ComplexKernel,
}

impl EffectivePredictor {
    pub fn output_dim(&self) -> usize {
        self.v.c_out()
    }

    pub fn input_shape(&self) -> Shape3 {
        Shape3::new(self.v.c_in(), self.v.height(), self.v.width())
    }

    pub fn apply(&self, x: &SpectralTensor) -> Result<Vec<Complex64>> {
        crate::spectral::spectral_contract(&self.v, x)
    }

    pub fn output(&self, x: &SpectralTensor) -> Result<Vec<f64>> {
        Ok(self.apply(x)?.iter().map(|z| z.re).collect())
    }

    pub fn block(&self, i: usize, j: usize) -> CMatrix {
        block_matrix(&self.v, i, j)
    }

    /// Largest numerical rank over frequencies, counting singular values above `rtol * s_max`.
    pub fn max_rank(&self, rtol: f64) -> Result<usize> {
        let mut r = 0;
        for i in 0..self.v.height() {
            for j in 0..self.v.width() {
                r = r.max(svd(&self.block(i, j))?.rank(rtol));
            }
        }
        Ok(r)
    }

    /// As a single-layer network with the same outputs.
    pub fn to_weights(&self) -> Result<SpectralWeights> {
        SpectralWeights::new(
            self.v.height(),
            self.v.width(),
            Activation::Linear,
            vec![SpectralLayer {
                weights: self.v.clone(),
                bias: None,
            }],
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum InitScheme {
    /// Spatial Gaussian with variance `gain^2 * 2 / fan_in`, `fan_in = C_in * H * W`.
    He { gain: f64 },
    Zeros,
}

impl Default for InitScheme {
    fn default() -> Self {
        InitScheme::He { gain: 1.0 }
    }
}

/// Real spatial kernels drawn per layer from `(seed, layer)` and mapped to the spectral domain.
pub fn init_spatial_kernels(widths: &[usize], height: usize, width: usize, seed: u64, scheme: InitScheme) -> Result<Vec<RealKernel>> {
    if widths.len() < 2 {
        return invalid("widths must list at least input and output channels");
    }
    if widths.contains(&0) || height == 0 || width == 0 {
        return invalid("widths and spatial size must be positive");
    }
    let mut kernels = Vec::with_capacity(widths.len() - 1);
    for l in 0..widths.len() - 1 {
        let (ci, co) = (widths[l], widths[l + 1]);
        let n = co * height * width * ci;
        let data = match scheme {
            InitScheme::Zeros => vec![0.0; n],
            InitScheme::He { gain } => {
                let sd = gain * (2.0 / (ci * height * width) as f64).sqrt();
                let mut rng = stream_rng(seed, l as u64);
                (0..n).map(|_| sd * rng.sample::<f64, _>(StandardNormal)).collect()
            }
        };
        kernels.push(RealKernel::new(co, height, width, ci, data)?);
    }
    Ok(kernels)
}

pub fn init_weights(
    widths: &[usize],
    height: usize,
    width: usize,
    seed: u64,
    scheme: InitScheme,
    activation: Activation,
    bias: bool,
) -> Result<SpectralWeights> {
    let kernels = init_spatial_kernels(widths, height, width, seed, scheme)?;
    let biases = widths[1..].iter().map(|&c| bias.then(|| vec![0.0; c])).collect();
    SpectralWeights::from_spatial(&kernels, biases, activation)
}

/// Dataset with precomputed spectra.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralDataset {
    pub spectra: Vec<SpectralTensor>,
    pub labels: Labels,
}

impl SpectralDataset {
    pub fn from_dataset(ds: &LabeledDataset) -> Self {
        Self {
            spectra: ds.spectra(),
            labels: ds.labels.clone(),
        }
    }

    pub fn len(&self) -> usize {
        self.spectra.len()
    }

    pub fn is_empty(&self) -> bool {
        self.spectra.is_empty()
    }
}

/// Loss function and weight decay of the penalized objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Objective {
    pub loss: Loss,
    pub weight_decay: f64,
}

/// Loss of one sample and its gradient with respect to the outputs.
pub fn sample_loss(loss: Loss, out: &[f64], labels: &Labels, n: usize) -> Result<(f64, Vec<f64>)> {
    match (loss, labels) {
        (Loss::SquaredError, Labels::Targets { .. }) => {
            let y = labels.target(n).expect("targets");
            if y.len() != out.len() {
                return shape_err(format!("{} outputs but targets have length {}", out.len(), y.len()));
            }
            let l = out.iter().zip(y).map(|(o, t)| (o - t).powi(2)).sum();
            Ok((l, out.iter().zip(y).map(|(o, t)| 2.0 * (o - t)).collect()))
        }
        (Loss::SquaredError, Labels::Classes { .. }) => {
            let cls = labels.class(n).expect("classes");
            let y: Vec<f64> = (0..out.len()).map(|k| f64::from(u8::from(k == cls))).collect();
            let l = out.iter().zip(&y).map(|(o, t)| (o - t).powi(2)).sum();
            Ok((l, out.iter().zip(&y).map(|(o, t)| 2.0 * (o - t)).collect()))
        }
        (Loss::CrossEntropy, Labels::Classes { .. }) => {
            let cls = labels.class(n).expect("classes");
            if cls >= out.len() {
                return shape_err(format!("class {cls} but only {} outputs", out.len()));
            }
            let m = out.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = out.iter().map(|o| (o - m).exp()).sum();
            let lse = m + z.ln();
            let g = out
                .iter()
                .enumerate()
                .map(|(k, o)| (o - lse).exp() - f64::from(u8::from(k == cls)))
                .collect();
            Ok((lse - out[cls], g))
        }
        (Loss::CrossEntropy, Labels::Targets { .. }) => invalid("cross-entropy needs class labels"),
    }
}

#[derive(Debug, Clone)]
pub struct GradientResult {
    /// Mean data loss plus `lambda * penalty`.
    pub objective: f64,
    pub data_loss: f64,
    pub grads: SpectralWeights,
}

/// Exact gradient of `(1/N) sum_n loss_n + lambda sum_l ||w_hat^l||^2` over the samples `idx`.
pub fn gradients(
    w: &SpectralWeights,
    data: &SpectralDataset,
    idx: &[usize],
    objective: Objective,
    batch_index: usize,
) -> Result<GradientResult> {
    if idx.is_empty() {
        return invalid("gradient batch is empty");
    }
    let mut grads = w.zeros_like();
    let mut total = 0.0;
    for &n in idx {
        let out = w.forward_unchecked(&data.spectra[n])?;
        let (l, g) = sample_loss(objective.loss, &out, &data.labels, n)?;
        total += l;
        w.backward(&data.spectra[n], &g, Some(&mut grads))?;
    }
    let inv = 1.0 / idx.len() as f64;
    let data_loss = total * inv;
    if !data_loss.is_finite() {
        return Err(Error::NonFiniteLoss {
            batch: batch_index,
            value: data_loss,
        });
    }
    grads.scale(inv);
    let lambda = objective.weight_decay;
    if lambda != 0.0 {
        for (g, l) in grads.layers.iter_mut().zip(&w.layers) {
            for (a, b) in g.weights.data_mut().iter_mut().zip(l.weights.data()) {
                *a += b * (2.0 * lambda);
            }
        }
    }
    Ok(GradientResult {
        objective: data_loss + lambda * w.penalty(),
        data_loss,
        grads,
    })
}

/// Full-dataset penalized objective and mean data loss.
pub fn objective_value(w: &SpectralWeights, data: &SpectralDataset, objective: Objective) -> Result<(f64, f64)> {
    let mut total = 0.0;
    for (n, x) in data.spectra.iter().enumerate() {
        let out = w.forward_unchecked(x)?;
        total += sample_loss(objective.loss, &out, &data.labels, n)?.0;
    }
    let data_loss = total / data.len() as f64;
    Ok((data_loss + objective.weight_decay * w.penalty(), data_loss))
}
