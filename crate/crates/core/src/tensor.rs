//! Dense real and complex tensors in channel-first, row-major layout.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape_err, Result};

/// Channel count and spatial extent of an image-like tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Shape3 {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl Shape3 {
    pub fn new(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
        }
    }

    pub fn len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn plane(&self) -> usize {
        self.height * self.width
    }

    #[inline]
    pub fn index(&self, c: usize, h: usize, w: usize) -> usize {
        (c * self.height + h) * self.width + w
    }
}

impl std::fmt::Display for Shape3 {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}", self.channels, self.height, self.width)
    }
}

/// Real `C x H x W` array: an image, or any per-coefficient real map.
#[derive(Debug, Clone, PartialEq)]
pub struct SpatialTensor {
    shape: Shape3,
    data: Vec<f64>,
}

impl SpatialTensor {
    pub fn new(shape: Shape3, data: Vec<f64>) -> Result<Self> {
        if data.len() != shape.len() {
            return shape_err(format!(
                "tensor of shape {shape} needs {} values, got {}",
                shape.len(),
                data.len()
            ));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return invalid(format!("non-finite value at flat index {pos}"));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Shape3) -> Self {
        Self {
            shape,
            data: vec![0.0; shape.len()],
        }
    }

    pub fn from_fn(shape: Shape3, mut f: impl FnMut(usize, usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(shape.len());
        for c in 0..shape.channels {
            for h in 0..shape.height {
                for w in 0..shape.width {
                    data.push(f(c, h, w));
                }
            }
        }
        Self { shape, data }
    }

    pub fn shape(&self) -> Shape3 {
        self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, c: usize, h: usize, w: usize) -> f64 {
        self.data[self.shape.index(c, h, w)]
    }

    pub fn set(&mut self, c: usize, h: usize, w: usize, v: f64) {
        let i = self.shape.index(c, h, w);
        self.data[i] = v;
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let p = self.shape.plane();
        &self.data[c * p..(c + 1) * p]
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn to_complex(&self) -> SpectralTensor {
        SpectralTensor {
            shape: self.shape,
            data: self.data.iter().map(|&v| Complex64::new(v, 0.0)).collect(),
        }
    }
}

/// Complex `C x H x W` array, typically the DFT of a [`SpatialTensor`].
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralTensor {
    shape: Shape3,
    data: Vec<Complex64>,
}

impl SpectralTensor {
    pub fn new(shape: Shape3, data: Vec<Complex64>) -> Result<Self> {
        if data.len() != shape.len() {
            return shape_err(format!(
                "tensor of shape {shape} needs {} values, got {}",
                shape.len(),
                data.len()
            ));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Shape3) -> Self {
        Self {
            shape,
            data: vec![Complex64::new(0.0, 0.0); shape.len()],
        }
    }

    pub fn shape(&self) -> Shape3 {
        self.shape
    }

    pub fn data(&self) -> &[Complex64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [Complex64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<Complex64> {
        self.data
    }

    pub fn get(&self, c: usize, i: usize, j: usize) -> Complex64 {
        self.data[self.shape.index(c, i, j)]
    }

    pub fn set(&mut self, c: usize, i: usize, j: usize, v: Complex64) {
        let k = self.shape.index(c, i, j);
        self.data[k] = v;
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v.norm_sqr()).sum::<f64>().sqrt()
    }

    /// Largest `|x[c,i,j] - conj(x[c,-i,-j])|` over the tensor.
    pub fn max_conjugate_asymmetry(&self) -> f64 {
        let s = self.shape;
        let mut worst: f64 = 0.0;
        for c in 0..s.channels {
            for i in 0..s.height {
                for j in 0..s.width {
                    let (pi, pj) = mirror(i, j, s.height, s.width);
                    let d = (self.get(c, i, j) - self.get(c, pi, pj).conj()).norm();
                    worst = worst.max(d);
                }
            }
        }
        worst
    }

    pub fn is_conjugate_symmetric(&self, tol: f64) -> bool {
        self.max_conjugate_asymmetry() <= tol
    }

    pub fn max_imag(&self) -> f64 {
        self.data.iter().fold(0.0_f64, |m, v| m.max(v.im.abs()))
    }

    /// Drops imaginary parts after checking they are below `tol`.
    pub fn to_real(&self, tol: f64) -> Result<SpatialTensor> {
        let worst = self.max_imag();
        if worst > tol {
            return invalid(format!(
                "imaginary residue {worst:e} exceeds tolerance {tol:e}"
            ));
        }
        Ok(self.real_part())
    }

    pub fn real_part(&self) -> SpatialTensor {
        SpatialTensor {
            shape: self.shape,
            data: self.data.iter().map(|v| v.re).collect(),
        }
    }
}

/// Index of the frequency `(-i mod H, -j mod W)`.
#[inline]
pub fn mirror(i: usize, j: usize, height: usize, width: usize) -> (usize, usize) {
    ((height - i) % height, (width - j) % width)
}

/// Convolution or contraction weights laid out as `(c_out, h, w, c_in)`.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelTensor<T> {
    c_out: usize,
    height: usize,
    width: usize,
    c_in: usize,
    data: Vec<T>,
}

pub type RealKernel = KernelTensor<f64>;
pub type ComplexKernel = KernelTensor<Complex64>;

impl<T: Copy + Default> KernelTensor<T> {
    pub fn new(c_out: usize, height: usize, width: usize, c_in: usize, data: Vec<T>) -> Result<Self> {
        let n = c_out * height * width * c_in;
        if data.len() != n {
            return shape_err(format!(
                "kernel {c_out}x{height}x{width}x{c_in} needs {n} values, got {}",
                data.len()
            ));
        }
        Ok(Self {
            c_out,
            height,
            width,
            c_in,
            data,
        })
    }

    pub fn zeros(c_out: usize, height: usize, width: usize, c_in: usize) -> Self {
        Self {
            c_out,
            height,
            width,
            c_in,
            data: vec![T::default(); c_out * height * width * c_in],
        }
    }

    pub fn c_out(&self) -> usize {
        self.c_out
    }

    pub fn c_in(&self) -> usize {
        self.c_in
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> [usize; 4] {
        [self.c_out, self.height, self.width, self.c_in]
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn index(&self, c: usize, h: usize, w: usize, d: usize) -> usize {
        ((c * self.height + h) * self.width + w) * self.c_in + d
    }

    pub fn get(&self, c: usize, h: usize, w: usize, d: usize) -> T {
        self.data[self.index(c, h, w, d)]
    }

    pub fn set(&mut self, c: usize, h: usize, w: usize, d: usize, v: T) {
        let k = self.index(c, h, w, d);
        self.data[k] = v;
    }

    pub fn map<U: Copy + Default>(&self, f: impl Fn(T) -> U) -> KernelTensor<U> {
        KernelTensor {
            c_out: self.c_out,
            height: self.height,
            width: self.width,
            c_in: self.c_in,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }
}

impl KernelTensor<Complex64> {
    pub fn norm_sqr(&self) -> f64 {
        self.data.iter().map(|v| v.norm_sqr()).sum()
    }

    /// The `c_out x c_in` channel matrix at spatial/frequency index `(i, j)`, row-major.
    pub fn block(&self, i: usize, j: usize) -> Vec<Complex64> {
        let mut out = Vec::with_capacity(self.c_out * self.c_in);
        for c in 0..self.c_out {
            let base = self.index(c, i, j, 0);
            out.extend_from_slice(&self.data[base..base + self.c_in]);
        }
        out
    }

    pub fn set_block(&mut self, i: usize, j: usize, block: &[Complex64]) {
        debug_assert_eq!(block.len(), self.c_out * self.c_in);
        for c in 0..self.c_out {
            let base = self.index(c, i, j, 0);
            self.data[base..base + self.c_in].copy_from_slice(&block[c * self.c_in..(c + 1) * self.c_in]);
        }
    }

    /// Largest `|w[c,i,j,d] - conj(w[c,-i,-j,d])|`.
    pub fn max_conjugate_asymmetry(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for c in 0..self.c_out {
            for i in 0..self.height {
                for j in 0..self.width {
                    let (pi, pj) = mirror(i, j, self.height, self.width);
                    for d in 0..self.c_in {
                        let diff = (self.get(c, i, j, d) - self.get(c, pi, pj, d).conj()).norm();
                        worst = worst.max(diff);
                    }
                }
            }
        }
        worst
    }

    /// Projects onto the conjugate-symmetric subspace.
    pub fn symmetrize(&mut self) {
        let src = self.data.clone();
        for c in 0..self.c_out {
            for i in 0..self.height {
                for j in 0..self.width {
                    let (pi, pj) = mirror(i, j, self.height, self.width);
                    for d in 0..self.c_in {
                        let a = src[self.index(c, i, j, d)];
                        let b = src[self.index(c, pi, pj, d)];
                        let k = self.index(c, i, j, d);
                        self.data[k] = (a + b.conj()) * 0.5;
                    }
                }
            }
        }
    }
}
