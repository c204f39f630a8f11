//! Unitary two-dimensional DFT over the spatial axes, circular convolution and
//! the frequency-domain products that replace it.
//!
//! Every transform here carries the symmetric `1/sqrt(HW)` factor, so `dft` and
//! `idft` are mutually inverse isometries. Frequency index 0 is the zero
//! frequency; nothing is shifted.
//!
//! With that normalization the spatial operations relate to spectral ones as
//!
//! * `dft(w * x) = conv_transfer(w) . dft(x)` where
//!   `conv_transfer(w) = sqrt(HW) * dft_kernel(w)`,
//! * `w^T x = contraction_transfer(w)^T dft(x)` where
//!   `contraction_transfer(w) = conj(dft_kernel(w))`.

use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;
use std::sync::Arc;

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use crate::error::{shape_err, Result};
use crate::tensor::{ComplexKernel, RealKernel, Shape3, SpatialTensor, SpectralTensor};

/// Row/column FFT plans for one `H x W` plane size.
pub struct Dft2 {
    height: usize,
    width: usize,
    rows_fwd: Arc<dyn Fft<f64>>,
    rows_inv: Arc<dyn Fft<f64>>,
    cols_fwd: Arc<dyn Fft<f64>>,
    cols_inv: Arc<dyn Fft<f64>>,
    scale: f64,
}

impl Dft2 {
    pub fn new(height: usize, width: usize) -> Self {
        let mut planner = FftPlanner::new();
        Self {
            height,
            width,
            rows_fwd: planner.plan_fft_forward(width),
            rows_inv: planner.plan_fft_inverse(width),
            cols_fwd: planner.plan_fft_forward(height),
            cols_inv: planner.plan_fft_inverse(height),
            scale: 1.0 / ((height * width) as f64).sqrt(),
        }
    }

    pub fn forward(&self, plane: &mut [Complex64]) {
        self.run(plane, true);
    }

    pub fn inverse(&self, plane: &mut [Complex64]) {
        self.run(plane, false);
    }

    fn run(&self, plane: &mut [Complex64], forward: bool) {
        let (h, w) = (self.height, self.width);
        debug_assert_eq!(plane.len(), h * w);
        let (rows, cols) = if forward {
            (&self.rows_fwd, &self.cols_fwd)
        } else {
            (&self.rows_inv, &self.cols_inv)
        };
        rows.process(plane);
        let mut column = vec![Complex64::new(0.0, 0.0); h];
        for j in 0..w {
            for i in 0..h {
                column[i] = plane[i * w + j];
            }
            cols.process(&mut column);
            for i in 0..h {
                plane[i * w + j] = column[i] * self.scale;
            }
        }
    }
}

thread_local! {
    static PLANS: RefCell<HashMap<(usize, usize), Rc<Dft2>>> = RefCell::new(HashMap::new());
}

/// Cached plans for the given plane size (per thread).
pub fn plan(height: usize, width: usize) -> Rc<Dft2> {
    PLANS.with(|cache| {
        cache
            .borrow_mut()
            .entry((height, width))
            .or_insert_with(|| Rc::new(Dft2::new(height, width)))
            .clone()
    })
}

fn transform_planes(shape: Shape3, data: &mut [Complex64], forward: bool) {
    if shape.is_empty() {
        return;
    }
    let p = plan(shape.height, shape.width);
    for chunk in data.chunks_exact_mut(shape.plane()) {
        if forward {
            p.forward(chunk);
        } else {
            p.inverse(chunk);
        }
    }
}

/// Unitary DFT of a real multichannel image.
pub fn dft(x: &SpatialTensor) -> SpectralTensor {
    let mut out = x.to_complex();
    let shape = out.shape();
    transform_planes(shape, out.data_mut(), true);
    out
}

/// Unitary DFT of a complex multichannel array.
pub fn dft_complex(x: &SpectralTensor) -> SpectralTensor {
    let mut out = x.clone();
    let shape = out.shape();
    transform_planes(shape, out.data_mut(), true);
    out
}

/// Inverse of [`dft`]; the result is complex in general.
pub fn idft(x: &SpectralTensor) -> SpectralTensor {
    let mut out = x.clone();
    let shape = out.shape();
    transform_planes(shape, out.data_mut(), false);
    out
}

/// Inverse DFT of a conjugate-symmetric spectrum, checked to be real within `tol`.
pub fn idft_real(x: &SpectralTensor, tol: f64) -> Result<SpatialTensor> {
    idft(x).to_real(tol)
}

fn kernel_transform(w: &ComplexKernel, forward: bool) -> ComplexKernel {
    let (co, h, wd, ci) = (w.c_out(), w.height(), w.width(), w.c_in());
    let mut out = w.clone();
    if h * wd == 0 {
        return out;
    }
    let p = plan(h, wd);
    let mut plane = vec![Complex64::new(0.0, 0.0); h * wd];
    for c in 0..co {
        for d in 0..ci {
            for i in 0..h {
                for j in 0..wd {
                    plane[i * wd + j] = w.get(c, i, j, d);
                }
            }
            if forward {
                p.forward(&mut plane);
            } else {
                p.inverse(&mut plane);
            }
            for i in 0..h {
                for j in 0..wd {
                    out.set(c, i, j, d, plane[i * wd + j]);
                }
            }
        }
    }
    out
}

/// Unitary DFT of a kernel over its two spatial indices only.
pub fn dft_kernel(w: &RealKernel) -> ComplexKernel {
    kernel_transform(&w.map(|v| Complex64::new(v, 0.0)), true)
}

pub fn dft_kernel_complex(w: &ComplexKernel) -> ComplexKernel {
    kernel_transform(w, true)
}

pub fn idft_kernel(w: &ComplexKernel) -> ComplexKernel {
    kernel_transform(w, false)
}

/// Per-frequency channel matrices that act on `dft(x)` exactly as `w * x` acts on `x`.
pub fn conv_transfer(w: &RealKernel) -> ComplexKernel {
    let s = ((w.height() * w.width()) as f64).sqrt();
    dft_kernel(w).map(|v| v * s)
}

/// Spatial kernel whose [`conv_transfer`] is `w_hat`; imaginary residue must stay below `tol`.
pub fn kernel_from_conv_transfer(w_hat: &ComplexKernel, tol: f64) -> Result<RealKernel> {
    let s = ((w_hat.height() * w_hat.width()) as f64).sqrt();
    real_kernel(&idft_kernel(w_hat).map(|v| v / s), tol)
}

/// Spectral weights whose [`spectral_contract`] with `dft(x)` equals `w^T x`.
pub fn contraction_transfer(w: &RealKernel) -> ComplexKernel {
    dft_kernel(w).map(|v| v.conj())
}

pub fn kernel_from_contraction_transfer(w_hat: &ComplexKernel, tol: f64) -> Result<RealKernel> {
    real_kernel(&idft_kernel(&w_hat.map(|v| v.conj())), tol)
}

fn real_kernel(w: &ComplexKernel, tol: f64) -> Result<RealKernel> {
    let worst = w.data().iter().fold(0.0_f64, |m, v| m.max(v.im.abs()));
    if worst > tol {
        return Err(crate::Error::InvalidArgument(format!(
            "kernel has imaginary residue {worst:e} above {tol:e}"
        )));
    }
    Ok(w.map(|v| v.re))
}

/// Full circular convolution `(w * x)_{cij} = sum_{m+m'=i, n+n'=j} sum_d w_{cmnd} x_{dm'n'}`.
pub fn circular_conv(w: &RealKernel, x: &SpatialTensor) -> Result<SpatialTensor> {
    let s = x.shape();
    if w.c_in() != s.channels || w.height() != s.height || w.width() != s.width {
        return shape_err(format!(
            "kernel {:?} (c_out, h, w, c_in) cannot convolve tensor {s}",
            w.dims()
        ));
    }
    let (h, wd) = (s.height, s.width);
    let out_shape = Shape3::new(w.c_out(), h, wd);
    let mut out = SpatialTensor::zeros(out_shape);
    for c in 0..w.c_out() {
        for i in 0..h {
            for j in 0..wd {
                let mut acc = 0.0;
                for m in 0..h {
                    let mp = (i + h - m) % h;
                    for n in 0..wd {
                        let np = (j + wd - n) % wd;
                        for d in 0..w.c_in() {
                            acc += w.get(c, m, n, d) * x.get(d, mp, np);
                        }
                    }
                }
                out.set(c, i, j, acc);
            }
        }
    }
    Ok(out)
}

/// Spatial contraction `(w^T x)_k = sum_{d,m,n} w_{kmnd} x_{dmn}`.
pub fn spatial_contract(w: &RealKernel, x: &SpatialTensor) -> Result<Vec<f64>> {
    let s = x.shape();
    if w.c_in() != s.channels || w.height() != s.height || w.width() != s.width {
        return shape_err(format!(
            "kernel {:?} (c_out, h, w, c_in) cannot contract tensor {s}",
            w.dims()
        ));
    }
    let mut out = vec![0.0; w.c_out()];
    for (k, o) in out.iter_mut().enumerate() {
        for m in 0..s.height {
            for n in 0..s.width {
                for d in 0..s.channels {
                    *o += w.get(k, m, n, d) * x.get(d, m, n);
                }
            }
        }
    }
    Ok(out)
}

fn check_spectral(w: &ComplexKernel, s: Shape3, what: &str) -> Result<()> {
    if w.c_in() != s.channels || w.height() != s.height || w.width() != s.width {
        return shape_err(format!(
            "spectral weights {:?} (c_out, h, w, c_in) cannot {what} tensor {s}",
            w.dims()
        ));
    }
    Ok(())
}

/// `(w . x)_{cij} = sum_d w_{cijd} x_{dij}`: a channel-mixing matrix product per frequency.
pub fn spectral_pointwise(w: &ComplexKernel, x: &SpectralTensor) -> Result<SpectralTensor> {
    let s = x.shape();
    check_spectral(w, s, "multiply")?;
    let out_shape = Shape3::new(w.c_out(), s.height, s.width);
    let mut out = SpectralTensor::zeros(out_shape);
    let xd = x.data();
    let wd = w.data();
    let plane = s.plane();
    let ci = w.c_in();
    let od = out.data_mut();
    for c in 0..w.c_out() {
        for p in 0..plane {
            let base = (c * plane + p) * ci;
            let mut acc = Complex64::new(0.0, 0.0);
            for d in 0..ci {
                acc += wd[base + d] * xd[d * plane + p];
            }
            od[c * plane + p] = acc;
        }
    }
    Ok(out)
}

/// `(w^T x)_c = sum_{d,i,j} w_{cijd} x_{dij}` (no conjugation).
pub fn spectral_contract(w: &ComplexKernel, x: &SpectralTensor) -> Result<Vec<Complex64>> {
    let s = x.shape();
    check_spectral(w, s, "contract")?;
    let xd = x.data();
    let wd = w.data();
    let plane = s.plane();
    let ci = w.c_in();
    let mut out = vec![Complex64::new(0.0, 0.0); w.c_out()];
    for (c, o) in out.iter_mut().enumerate() {
        for p in 0..plane {
            let base = (c * plane + p) * ci;
            for d in 0..ci {
                *o += wd[base + d] * xd[d * plane + p];
            }
        }
    }
    Ok(out)
}

/// Frequency magnitude on the discrete circle of length `n`: `min(i, n - i)`.
#[inline]
pub fn freq_magnitude(i: usize, n: usize) -> usize {
    let i = i % n;
    i.min(n - i)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_tensor(shape: Shape3, rng: &mut ChaCha8Rng) -> SpatialTensor {
        SpatialTensor::from_fn(shape, |_, _, _| rng.random_range(-1.0..1.0))
    }

    fn random_kernel(dims: [usize; 4], rng: &mut ChaCha8Rng) -> RealKernel {
        let n = dims.iter().product();
        let data = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        RealKernel::new(dims[0], dims[1], dims[2], dims[3], data).unwrap()
    }

    /// Direct evaluation of the defining double sum.
    fn naive_dft_kernel(w: &RealKernel) -> ComplexKernel {
        let (h, wd) = (w.height(), w.width());
        let mut out = ComplexKernel::zeros(w.c_out(), h, wd, w.c_in());
        let norm = 1.0 / ((h * wd) as f64).sqrt();
        for c in 0..w.c_out() {
            for d in 0..w.c_in() {
                for i in 0..h {
                    for j in 0..wd {
                        let mut acc = Complex64::new(0.0, 0.0);
                        for m in 0..h {
                            for n in 0..wd {
                                let phase = -2.0 * std::f64::consts::PI
                                    * ((m * i) as f64 / h as f64 + (n * j) as f64 / wd as f64);
                                acc += Complex64::from_polar(w.get(c, m, n, d), phase);
                            }
                        }
                        out.set(c, i, j, d, acc * norm);
                    }
                }
            }
        }
        out
    }

    #[test]
    fn constant_image_has_only_dc() {
        let shape = Shape3::new(1, 6, 10);
        let x = SpatialTensor::from_fn(shape, |_, _, _| 2.5);
        let xh = dft(&x);
        for i in 0..6 {
            for j in 0..10 {
                let v = xh.get(0, i, j);
                if i == 0 && j == 0 {
                    assert!((v.re - 2.5 * 60f64.sqrt()).abs() < 1e-12);
                    assert!(v.im.abs() < 1e-12);
                } else {
                    assert!(v.norm() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn delta_image_has_flat_spectrum() {
        let shape = Shape3::new(1, 8, 5);
        let mut x = SpatialTensor::zeros(shape);
        x.set(0, 0, 0, 1.0);
        let xh = dft(&x);
        let expect = 1.0 / 40f64.sqrt();
        for v in xh.data() {
            assert!((v - Complex64::new(expect, 0.0)).norm() < 1e-12);
        }
    }

    #[test]
    fn round_trip_and_unitarity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random_tensor(Shape3::new(3, 8, 8), &mut rng);
        let xh = dft(&x);
        assert!((xh.norm() - x.norm()).abs() < 1e-10 * x.norm());
        let back = idft(&xh);
        for (a, b) in back.data().iter().zip(x.data()) {
            assert!((a.re - b).abs() < 1e-12 && a.im.abs() < 1e-12);
        }
    }

    #[test]
    fn idft_of_single_dc_is_ones() {
        let shape = Shape3::new(1, 4, 6);
        let mut xh = SpectralTensor::zeros(shape);
        xh.set(0, 0, 0, Complex64::new(24f64.sqrt(), 0.0));
        let x = idft_real(&xh, 1e-12).unwrap();
        assert!(x.data().iter().all(|v| (v - 1.0).abs() < 1e-12));
    }

    #[test]
    fn dft_after_idft_is_identity_on_complex_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let shape = Shape3::new(2, 5, 7);
        let data = (0..shape.len())
            .map(|_| Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
            .collect();
        let xh = SpectralTensor::new(shape, data).unwrap();
        let again = dft_complex(&idft(&xh));
        for (a, b) in again.data().iter().zip(xh.data()) {
            assert!((a - b).norm() < 1e-12);
        }
    }

    #[test]
    fn real_input_gives_symmetric_spectrum_and_real_inverse() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random_tensor(Shape3::new(2, 7, 6), &mut rng);
        let xh = dft(&x);
        assert!(xh.is_conjugate_symmetric(1e-10));
        assert!(idft(&xh).max_imag() < 1e-10);
    }

    #[test]
    fn kernel_dft_of_spatial_delta() {
        let m = [1.0, -2.0, 0.5, 3.0, 4.0, -1.0];
        let mut w = RealKernel::zeros(2, 4, 4, 3);
        for c in 0..2 {
            for d in 0..3 {
                w.set(c, 0, 0, d, m[c * 3 + d]);
            }
        }
        let wh = dft_kernel(&w);
        for i in 0..4 {
            for j in 0..4 {
                for c in 0..2 {
                    for d in 0..3 {
                        let v = wh.get(c, i, j, d);
                        assert!((v - Complex64::new(m[c * 3 + d] / 4.0, 0.0)).norm() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn kernel_dft_matches_naive_sum_and_round_trips() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let w = random_kernel([2, 4, 4, 3], &mut rng);
        let fast = dft_kernel(&w);
        let slow = naive_dft_kernel(&w);
        for (a, b) in fast.data().iter().zip(slow.data()) {
            assert!((a - b).norm() < 1e-12);
        }
        let back = idft_kernel(&fast);
        for (a, b) in back.data().iter().zip(w.data()) {
            assert!((a.re - b).abs() < 1e-12 && a.im.abs() < 1e-12);
        }
    }

    #[test]
    fn identity_delta_kernel_convolves_to_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random_tensor(Shape3::new(3, 4, 5), &mut rng);
        let mut w = RealKernel::zeros(3, 4, 5, 3);
        for c in 0..3 {
            w.set(c, 0, 0, c, 1.0);
        }
        let y = circular_conv(&w, &x).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn convolution_theorem_single_and_multichannel() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for (ci, co) in [(1, 1), (2, 3)] {
            let w = random_kernel([co, 4, 4, ci], &mut rng);
            let x = random_tensor(Shape3::new(ci, 4, 4), &mut rng);
            let lhs = dft(&circular_conv(&w, &x).unwrap());
            let rhs = spectral_pointwise(&conv_transfer(&w), &dft(&x)).unwrap();
            for (a, b) in lhs.data().iter().zip(rhs.data()) {
                assert!((a - b).norm() < 1e-10);
            }
        }
    }

    #[test]
    fn pointwise_identity_and_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let xh = dft(&random_tensor(Shape3::new(2, 3, 3), &mut rng));
        let mut eye = ComplexKernel::zeros(2, 3, 3, 2);
        for i in 0..3 {
            for j in 0..3 {
                for c in 0..2 {
                    eye.set(c, i, j, c, Complex64::new(1.0, 0.0));
                }
            }
        }
        assert_eq!(spectral_pointwise(&eye, &xh).unwrap(), xh);
        let zero = ComplexKernel::zeros(4, 3, 3, 2);
        let out = spectral_pointwise(&zero, &xh).unwrap();
        assert!(out.data().iter().all(|v| v.norm() == 0.0));
    }

    #[test]
    fn parseval_with_conjugate_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = random_tensor(Shape3::new(2, 5, 4), &mut rng);
        let xh = dft(&x);
        let mut w = ComplexKernel::zeros(1, 5, 4, 2);
        for d in 0..2 {
            for i in 0..5 {
                for j in 0..4 {
                    w.set(0, i, j, d, xh.get(d, i, j).conj());
                }
            }
        }
        let out = spectral_contract(&w, &xh).unwrap();
        let n2 = x.norm().powi(2);
        assert!((out[0].re - n2).abs() < 1e-10 * n2 && out[0].im.abs() < 1e-10);
    }

    #[test]
    fn spectral_contraction_matches_spatial_einstein_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let w = random_kernel([3, 6, 4, 2], &mut rng);
        let x = random_tensor(Shape3::new(2, 6, 4), &mut rng);
        let spatial = spatial_contract(&w, &x).unwrap();
        let spectral = spectral_contract(&contraction_transfer(&w), &dft(&x)).unwrap();
        for (a, b) in spatial.iter().zip(&spectral) {
            assert!((a - b.re).abs() < 1e-10 && b.im.abs() < 1e-10);
        }
        let zero = spectral_contract(&contraction_transfer(&w), &SpectralTensor::zeros(x.shape())).unwrap();
        assert!(zero.iter().all(|v| v.norm() == 0.0));
    }

    #[test]
    fn shape_mismatch_names_both_shapes() {
        let w = RealKernel::zeros(2, 4, 4, 3);
        let x = SpatialTensor::zeros(Shape3::new(2, 4, 4));
        let err = circular_conv(&w, &x).unwrap_err().to_string();
        assert!(err.contains("[2, 4, 4, 3]") && err.contains("2x4x4"), "{err}");
    }

    #[test]
    fn transfer_inverses_recover_kernels() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let w = random_kernel([2, 5, 3, 2], &mut rng);
        let a = kernel_from_conv_transfer(&conv_transfer(&w), 1e-10).unwrap();
        let b = kernel_from_contraction_transfer(&contraction_transfer(&w), 1e-10).unwrap();
        for ((x, y), z) in a.data().iter().zip(b.data()).zip(w.data()) {
            assert!((x - z).abs() < 1e-12 && (y - z).abs() < 1e-12);
        }
    }

    #[test]
    fn modular_magnitude() {
        assert_eq!(freq_magnitude(0, 32), 0);
        assert_eq!(freq_magnitude(31, 32), 1);
        assert_eq!(freq_magnitude(16, 32), 16);
        assert_eq!(freq_magnitude(9, 16), 7);
    }
}
