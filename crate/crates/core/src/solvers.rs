//! Linear predictors in frequency space: least squares, ridge, LASSO, their
//! diagonal-covariance closed forms and the gradient-flow path.
//!
//! Coefficients live on the flattened `(c, i, j)` grid and act on spectra by
//! unconjugated contraction, `o = Re(sum_p v_p x_p)`, so the normal equations read
//! `(1/N) X^H X v = (1/N) X^H Y`.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::dataset::Labels;
use crate::error::{invalid, shape_err, Error, Result};
use crate::freqnet::{EffectivePredictor, SpectralDataset};
use crate::linalg::{hermitian_eigh, CMatrix};
use crate::tensor::{ComplexKernel, Shape3, SpatialTensor, SpectralTensor};

/// Largest coefficient count for which dense normal equations are formed.
pub const SOLVER_MAX_DIM: usize = 4096;
const JITTER_CONDITION: f64 = 1e12;

/// Per-frequency input variances `tau_{cij} >= 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct DiagonalSpectrum {
    pub tau: SpatialTensor,
}

impl DiagonalSpectrum {
    pub fn new(tau: SpatialTensor) -> Result<Self> {
        if let Some(k) = tau.data().iter().position(|v| *v < 0.0) {
            return invalid(format!("negative variance at flat index {k}"));
        }
        Ok(Self { tau })
    }

    /// `(1/N) sum_n |x_n|^2` per coefficient: the diagonal of the normal-equation Gram matrix.
    pub fn from_data(data: &SpectralDataset) -> Result<Self> {
        let shape = data.spectra[0].shape();
        let mut acc = vec![0.0; shape.len()];
        for x in &data.spectra {
            for (a, v) in acc.iter_mut().zip(x.data()) {
                *a += v.norm_sqr();
            }
        }
        let n = data.len() as f64;
        Self::new(SpatialTensor::new(shape, acc.into_iter().map(|a| a / n).collect())?)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SolveReport {
    pub method: String,
    pub lambda: f64,
    pub samples: usize,
    pub dim: usize,
    pub condition_number: Option<f64>,
    pub jitter: Option<f64>,
    pub iterations: Option<usize>,
    pub residual: Option<f64>,
    pub converged: bool,
}

/// Gram matrix `G = (1/N) X^H X` and right-hand sides `B = (1/N) X^H Y`.
#[derive(Debug, Clone)]
pub struct NormalEquations {
    pub shape: Shape3,
    pub samples: usize,
    pub gram: CMatrix,
    pub rhs: CMatrix,
    eig: Option<(Vec<f64>, CMatrix)>,
}

fn target_matrix(labels: &Labels) -> Result<DMatrix<f64>> {
    match labels {
        Labels::Targets { values, dim } => Ok(DMatrix::from_row_slice(values.len() / dim, *dim, values)),
        Labels::Classes { .. } => invalid("linear solvers need real-valued targets"),
    }
}

impl NormalEquations {
    pub fn from_data(data: &SpectralDataset) -> Result<Self> {
        if data.is_empty() {
            return invalid("empty dataset");
        }
        let shape = data.spectra[0].shape();
        let p = shape.len();
        if p > SOLVER_MAX_DIM {
            return invalid(format!("{p} coefficients exceed the dense solver limit {SOLVER_MAX_DIM}"));
        }
        let n = data.len();
        let y = target_matrix(&data.labels)?;
        let x = CMatrix::from_fn(n, p, |r, c| data.spectra[r].data()[c]);
        let xh = x.adjoint();
        let inv = Complex64::new(1.0 / n as f64, 0.0);
        let gram = &xh * &x * inv;
        let yc = y.map(|v| Complex64::new(v, 0.0));
        let rhs = &xh * yc * inv;
        Ok(Self {
            shape,
            samples: n,
            gram,
            rhs,
            eig: None,
        })
    }

    pub fn dim(&self) -> usize {
        self.gram.nrows()
    }

    pub fn outputs(&self) -> usize {
        self.rhs.ncols()
    }

    fn eigen(&mut self) -> &(Vec<f64>, CMatrix) {
        if self.eig.is_none() {
            let mut g = self.gram.clone();
            // Exact Hermitian symmetry for the eigensolver.
            for i in 0..g.nrows() {
                for j in 0..i {
                    let v = (g[(i, j)] + g[(j, i)].conj()) * 0.5;
                    g[(i, j)] = v;
                    g[(j, i)] = v.conj();
                }
                g[(i, i)].im = 0.0;
            }
            self.eig = Some(hermitian_eigh(&g));
        }
        self.eig.as_ref().expect("computed")
    }

    /// Solves `(shift + G) v = B` through the eigendecomposition of `G`.
    fn solve_shifted(&mut self, shift: f64) -> CMatrix {
        let rhs = self.rhs.clone();
        let (d, v) = self.eigen();
        let mut t = v.adjoint() * rhs;
        for (i, di) in d.iter().enumerate() {
            t.row_mut(i).scale_mut(1.0 / (di + shift));
        }
        v * t
    }

    pub fn predictor(&self, sol: &CMatrix) -> EffectivePredictor {
        let s = self.shape;
        let k = sol.ncols();
        let mut v = ComplexKernel::zeros(k, s.height, s.width, s.channels);
        for o in 0..k {
            for c in 0..s.channels {
                for i in 0..s.height {
                    for j in 0..s.width {
                        v.set(o, i, j, c, sol[(s.index(c, i, j), o)]);
                    }
                }
            }
        }
        v_fix(v)
    }

    pub fn coefficients(&self, pred: &EffectivePredictor) -> CMatrix {
        flatten(pred, self.shape)
    }
}

fn v_fix(v: ComplexKernel) -> EffectivePredictor {
    EffectivePredictor { v }
}

/// Predictor coefficients as a `(C*H*W) x K` matrix in `(c, i, j)` order.
pub fn flatten(pred: &EffectivePredictor, s: Shape3) -> CMatrix {
    let k = pred.output_dim();
    CMatrix::from_fn(s.len(), k, |p, o| {
        let c = p / s.plane();
        let i = (p % s.plane()) / s.width;
        let j = p % s.width;
        pred.v.get(o, i, j, c)
    })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LeastSquaresOptions {
    /// Permit a `1e-12 * trace / n` ridge when the Gram matrix is numerically singular.
    pub allow_jitter: bool,
}

/// Unpenalized least squares `v = (X^H X)^{-1} X^H Y`.
pub fn least_squares(data: &SpectralDataset, opts: LeastSquaresOptions) -> Result<(EffectivePredictor, SolveReport)> {
    let mut ne = NormalEquations::from_data(data)?;
    least_squares_from(&mut ne, opts)
}

pub fn least_squares_from(ne: &mut NormalEquations, opts: LeastSquaresOptions) -> Result<(EffectivePredictor, SolveReport)> {
    let p = ne.dim();
    if ne.samples < p && !opts.allow_jitter {
        return invalid(format!(
            "least squares is underdetermined: {} samples for {p} coefficients",
            ne.samples
        ));
    }
    let (dmax, dmin) = {
        let (d, _) = ne.eigen();
        (d.iter().copied().fold(f64::MIN, f64::max), d.iter().copied().fold(f64::MAX, f64::min))
    };
    let condition = if dmin > 0.0 { dmax / dmin } else { f64::INFINITY };
    let mut jitter = None;
    if !(condition <= JITTER_CONDITION) {
        if !opts.allow_jitter {
            return Err(Error::Numerical(format!(
                "normal equations are rank-deficient (condition number {condition:e})"
            )));
        }
        let trace: f64 = (0..p).map(|i| ne.gram[(i, i)].re).sum();
        jitter = Some(1e-12 * trace / p as f64);
    }
    let sol = ne.solve_shifted(jitter.unwrap_or(0.0));
    let report = SolveReport {
        method: "least_squares".into(),
        lambda: 0.0,
        samples: ne.samples,
        dim: p,
        condition_number: Some(condition),
        jitter,
        converged: true,
        ..Default::default()
    };
    Ok((ne.predictor(&sol), report))
}

/// Ridge solution of `(lambda + (1/N) X^H X) v = (1/N) X^H Y`; `lambda = 0` is least squares.
pub fn ridge_closed_form(data: &SpectralDataset, lambda: f64) -> Result<(EffectivePredictor, SolveReport)> {
    let mut ne = NormalEquations::from_data(data)?;
    ridge_from(&mut ne, lambda)
}

pub fn ridge_from(ne: &mut NormalEquations, lambda: f64) -> Result<(EffectivePredictor, SolveReport)> {
    if lambda < 0.0 {
        return invalid("ridge parameter must be nonnegative");
    }
    if lambda == 0.0 {
        return least_squares_from(ne, LeastSquaresOptions::default());
    }
    let sol = ne.solve_shifted(lambda);
    let report = SolveReport {
        method: "ridge".into(),
        lambda,
        samples: ne.samples,
        dim: ne.dim(),
        converged: true,
        ..Default::default()
    };
    Ok((ne.predictor(&sol), report))
}

fn check_diag(v: &EffectivePredictor, tau: &DiagonalSpectrum) -> Result<()> {
    if v.input_shape() != tau.tau.shape() {
        return shape_err(format!(
            "predictor input shape {} does not match variance map {}",
            v.input_shape(),
            tau.tau.shape()
        ));
    }
    Ok(())
}

fn map_coefficients(v: &EffectivePredictor, tau: &DiagonalSpectrum, f: impl Fn(Complex64, f64) -> Complex64) -> Result<EffectivePredictor> {
    check_diag(v, tau)?;
    let mut out = v.v.clone();
    let (k, h, w, c) = (out.c_out(), out.height(), out.width(), out.c_in());
    for o in 0..k {
        for i in 0..h {
            for j in 0..w {
                for d in 0..c {
                    out.set(o, i, j, d, f(v.v.get(o, i, j, d), tau.tau.get(d, i, j)));
                }
            }
        }
    }
    Ok(EffectivePredictor { v: out })
}

/// `v_{cij} = tau / (lambda + tau) * v_LS`, and `0` where `tau = 0`.
pub fn ridge_diagonal(v_ls: &EffectivePredictor, tau: &DiagonalSpectrum, lambda: f64) -> Result<EffectivePredictor> {
    if lambda < 0.0 {
        return invalid("ridge parameter must be nonnegative");
    }
    map_coefficients(v_ls, tau, |v, t| if t == 0.0 { Complex64::new(0.0, 0.0) } else { v * (t / (lambda + t)) })
}

/// Complex soft threshold: shrink `|z|` by `t`, clamp at zero, keep the phase.
pub fn soft_threshold(z: Complex64, t: f64) -> Complex64 {
    let m = z.norm();
    if m <= t {
        Complex64::new(0.0, 0.0)
    } else {
        z * ((m - t) / m)
    }
}

/// `|v_{cij}| = max(0, |v_LS| - lambda / tau)` with the phase of `v_LS`; `0` where `tau = 0`.
pub fn lasso_diagonal(v_ls: &EffectivePredictor, tau: &DiagonalSpectrum, lambda: f64) -> Result<EffectivePredictor> {
    if lambda < 0.0 {
        return invalid("LASSO parameter must be nonnegative");
    }
    map_coefficients(v_ls, tau, |v, t| {
        if t == 0.0 {
            if lambda > 0.0 {
                Complex64::new(0.0, 0.0)
            } else {
                v
            }
        } else {
            soft_threshold(v, lambda / t)
        }
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LassoOptions {
    pub max_iters: usize,
    pub tol: f64,
}

impl Default for LassoOptions {
    fn default() -> Self {
        Self {
            max_iters: 100_000,
            tol: 1e-8,
        }
    }
}

#[derive(Debug, Clone)]
pub struct LassoResult {
    pub v: Vec<Complex64>,
    pub objective: f64,
    pub iterations: usize,
    pub residual: f64,
    pub converged: bool,
    /// Objective after every accepted iteration.
    pub trace: Vec<f64>,
}

/// `v^H G v - 2 Re(b^H v) + 2 lambda |v|_1`, equal to the LASSO objective up to a constant.
pub fn lasso_gram_objective(gram: &CMatrix, rhs: &[Complex64], lambda: f64, v: &[Complex64]) -> f64 {
    let (smooth, _) = smooth_part(gram, rhs, v);
    smooth + 2.0 * lambda * v.iter().map(|z| z.norm()).sum::<f64>()
}

fn smooth_part(gram: &CMatrix, rhs: &[Complex64], v: &[Complex64]) -> (f64, Vec<Complex64>) {
    let n = v.len();
    let mut gv = vec![Complex64::new(0.0, 0.0); n];
    for (i, g) in gv.iter_mut().enumerate() {
        for (j, vj) in v.iter().enumerate() {
            *g += gram[(i, j)] * vj;
        }
    }
    let quad: f64 = v.iter().zip(&gv).map(|(a, b)| (a.conj() * b).re).sum();
    let lin: f64 = rhs.iter().zip(v).map(|(b, a)| (b.conj() * a).re).sum();
    (quad - 2.0 * lin, gv)
}

/// Largest violation of the LASSO subgradient conditions:
/// `|(Gv - b)_p + lambda v_p/|v_p||` on the support and `|(Gv - b)_p| - lambda` off it.
pub fn lasso_optimality_residual(gram: &CMatrix, rhs: &[Complex64], lambda: f64, v: &[Complex64]) -> f64 {
    let (_, gv) = smooth_part(gram, rhs, v);
    let mut worst: f64 = 0.0;
    for p in 0..v.len() {
        let r = gv[p] - rhs[p];
        let viol = if v[p].norm() > 0.0 {
            (r + v[p] / v[p].norm() * lambda).norm()
        } else {
            (r.norm() - lambda).max(0.0)
        };
        worst = worst.max(viol);
    }
    worst
}

/// ISTA with backtracking on the Gram form of the LASSO.
pub fn lasso_gram(gram: &CMatrix, rhs: &[Complex64], lambda: f64, opts: LassoOptions) -> Result<LassoResult> {
    let n = rhs.len();
    if gram.nrows() != n || gram.ncols() != n {
        return shape_err(format!("Gram matrix {}x{} for {n} coefficients", gram.nrows(), gram.ncols()));
    }
    if lambda < 0.0 {
        return invalid("LASSO parameter must be nonnegative");
    }
    let mut v = vec![Complex64::new(0.0, 0.0); n];
    let (mut f, mut gv) = smooth_part(gram, rhs, &v);
    let l1 = |v: &[Complex64]| v.iter().map(|z| z.norm()).sum::<f64>();
    let mut step = 1.0 / (2.0 * (0..n).map(|i| gram[(i, i)].re).fold(1e-300, f64::max));
    let mut trace = vec![f + 2.0 * lambda * l1(&v)];
    let mut residual = lasso_optimality_residual(gram, rhs, lambda, &v);
    let mut iterations = 0;
    while residual >= opts.tol && iterations < opts.max_iters {
        iterations += 1;
        let grad: Vec<Complex64> = gv.iter().zip(rhs).map(|(g, b)| (g - b) * 2.0).collect();
        step *= 1.5;
        loop {
            let cand: Vec<Complex64> = v
                .iter()
                .zip(&grad)
                .map(|(x, g)| soft_threshold(x - g * step, 2.0 * lambda * step))
                .collect();
            // For a quadratic the majorization test reduces to d^H G d <= |d|^2 / (2 step),
            // which avoids cancellation in objective differences.
            let diff: Vec<Complex64> = cand.iter().zip(&v).map(|(a, b)| a - b).collect();
            let (curv, _) = smooth_part(gram, &vec![Complex64::new(0.0, 0.0); n], &diff);
            let bound = diff.iter().map(|d| d.norm_sqr()).sum::<f64>() / (2.0 * step);
            if curv <= bound || step < 1e-300 {
                let (fc, gvc) = smooth_part(gram, rhs, &cand);
                v = cand;
                f = fc;
                gv = gvc;
                break;
            }
            step *= 0.5;
        }
        trace.push(f + 2.0 * lambda * l1(&v));
        residual = lasso_optimality_residual(gram, rhs, lambda, &v);
    }
    Ok(LassoResult {
        objective: f + 2.0 * lambda * l1(&v),
        v,
        iterations,
        residual,
        converged: residual < opts.tol,
        trace,
    })
}

/// LASSO `min (1/N)|Y - X v|^2 + 2 lambda |v|_1`, solved independently per output.
pub fn lasso(data: &SpectralDataset, lambda: f64, opts: LassoOptions) -> Result<(EffectivePredictor, SolveReport)> {
    let ne = NormalEquations::from_data(data)?;
    let mut sol = CMatrix::zeros(ne.dim(), ne.outputs());
    let mut iterations = 0;
    let mut residual: f64 = 0.0;
    let mut converged = true;
    for k in 0..ne.outputs() {
        let rhs: Vec<Complex64> = ne.rhs.column(k).iter().copied().collect();
        let r = lasso_gram(&ne.gram, &rhs, lambda, opts)?;
        for (p, z) in r.v.iter().enumerate() {
            sol[(p, k)] = *z;
        }
        iterations = iterations.max(r.iterations);
        residual = residual.max(r.residual);
        converged &= r.converged;
    }
    let report = SolveReport {
        method: "lasso".into(),
        lambda,
        samples: ne.samples,
        dim: ne.dim(),
        iterations: Some(iterations),
        residual: Some(residual),
        converged,
        ..Default::default()
    };
    Ok((ne.predictor(&sol), report))
}

/// Gradient flow `d beta/dt = X^T (Y - X beta)` from `beta(0) = 0`, in closed form
/// `beta(t) = V (I - exp(-Lambda t)) V^T beta_inf`.
#[derive(Debug, Clone)]
pub struct GradientFlow {
    pub eigenvalues: Vec<f64>,
    pub eigenvectors: DMatrix<f64>,
    pub beta_inf: DVector<f64>,
}

impl GradientFlow {
    pub fn new(x: &DMatrix<f64>, y: &DVector<f64>) -> Result<Self> {
        if x.nrows() != y.len() {
            return shape_err(format!("{} rows in X but {} targets", x.nrows(), y.len()));
        }
        let xtx = x.transpose() * x;
        let eig = SymmetricEigen::new(xtx);
        if eig.eigenvalues.iter().any(|v| !(*v > 0.0)) {
            return Err(Error::Numerical("X^T X must be positive definite".into()));
        }
        let xty = x.transpose() * y;
        let coords = eig.eigenvectors.transpose() * xty;
        let scaled = DVector::from_iterator(coords.len(), coords.iter().zip(eig.eigenvalues.iter()).map(|(c, l)| c / l));
        let beta_inf = &eig.eigenvectors * scaled;
        Ok(Self {
            eigenvalues: eig.eigenvalues.iter().copied().collect(),
            eigenvectors: eig.eigenvectors,
            beta_inf,
        })
    }

    pub fn at(&self, t: f64) -> DVector<f64> {
        let c = self.eigenvectors.transpose() * &self.beta_inf;
        let damped = DVector::from_iterator(
            c.len(),
            c.iter().zip(&self.eigenvalues).map(|(ci, l)| ci * (1.0 - (-l * t).exp())),
        );
        &self.eigenvectors * damped
    }

    /// `|V^T (beta - beta_inf)|_i / |V^T beta_inf|_i` per eigen-direction.
    pub fn relative_errors(&self, beta: &DVector<f64>) -> Vec<f64> {
        let e = self.eigenvectors.transpose() * (beta - &self.beta_inf);
        let b = self.eigenvectors.transpose() * &self.beta_inf;
        e.iter().zip(b.iter()).map(|(a, b)| a.abs() / b.abs()).collect()
    }
}

pub fn gradient_flow_path(x: &DMatrix<f64>, y: &DVector<f64>, t: f64) -> Result<DVector<f64>> {
    Ok(GradientFlow::new(x, y)?.at(t))
}

/// Applies a predictor to every spectrum: `N x K` outputs.
pub fn predict(pred: &EffectivePredictor, spectra: &[SpectralTensor]) -> Result<Vec<Vec<f64>>> {
    spectra.iter().map(|x| pred.output(x)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate_powerlaw, PowerLawGenerator, PowerLawParams, TeacherSpec};
    use crate::linalg::{c, random_complex_matrix};
    use crate::rng::stream_rng;
    use crate::spectral::{contraction_transfer, dft};
    use proptest::prelude::*;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn pl_data(n: usize, shape: Shape3, noise: f64, seed: u64) -> (SpectralDataset, PowerLawGenerator) {
        let p = PowerLawParams::new(1.0, 1.0, 1.0, 1.0).unwrap();
        let spec = TeacherSpec {
            noise_std: noise,
            ..TeacherSpec::default()
        };
        let g = PowerLawGenerator::new(p, shape, seed, spec).unwrap();
        (SpectralDataset::from_dataset(&g.dataset(0, n).unwrap()), g)
    }

    #[test]
    fn noiseless_least_squares_recovers_teacher() {
        let (data, g) = pl_data(60, Shape3::new(2, 4, 4), 0.0, 3);
        let (v, rep) = least_squares(&data, LeastSquaresOptions::default()).unwrap();
        assert!(rep.jitter.is_none());
        let want = contraction_transfer(&g.teacher.weights);
        for (a, b) in v.v.data().iter().zip(want.data()) {
            assert!((a - b).norm() < 1e-8, "{a} vs {b}");
        }
    }

    #[test]
    fn underdetermined_least_squares_needs_jitter() {
        let (data, _) = pl_data(10, Shape3::new(1, 4, 4), 0.1, 3);
        assert!(least_squares(&data, LeastSquaresOptions::default()).is_err());
        let (_, rep) = least_squares(&data, LeastSquaresOptions { allow_jitter: true }).unwrap();
        assert!(rep.jitter.is_some());
    }

    #[test]
    fn least_squares_residual_is_orthogonal_to_columns() {
        let (data, _) = pl_data(50, Shape3::new(1, 4, 4), 0.3, 8);
        let (v, _) = least_squares(&data, LeastSquaresOptions::default()).unwrap();
        let s = data.spectra[0].shape();
        let y = target_matrix(&data.labels).unwrap();
        let mut xr = vec![Complex64::new(0.0, 0.0); s.len()];
        for (n, x) in data.spectra.iter().enumerate() {
            let r = y[(n, 0)] - v.apply(x).unwrap()[0];
            for (a, xv) in xr.iter_mut().zip(x.data()) {
                *a += xv.conj() * r;
            }
        }
        assert!(xr.iter().all(|z| z.norm() / 50.0 < 1e-8));
    }

    #[test]
    fn heavy_ridge_approaches_scaled_correlation() {
        let (data, _) = pl_data(30, Shape3::new(1, 4, 4), 0.1, 2);
        let lambda = 1e6;
        let (v, _) = ridge_closed_form(&data, lambda).unwrap();
        let ne = NormalEquations::from_data(&data).unwrap();
        let want = ne.rhs.norm() / lambda;
        let got = flatten(&v, ne.shape).norm();
        assert!((got - want).abs() < 0.01 * want);
    }

    #[test]
    fn duplicated_samples_do_not_change_ridge() {
        let (data, _) = pl_data(20, Shape3::new(1, 4, 4), 0.1, 4);
        let mut twice = data.clone();
        twice.spectra.extend(data.spectra.clone());
        if let (Labels::Targets { values, .. }, Labels::Targets { values: orig, .. }) = (&mut twice.labels, &data.labels) {
            values.extend(orig.clone());
        }
        let (a, _) = ridge_closed_form(&data, 0.5).unwrap();
        let (b, _) = ridge_closed_form(&twice, 0.5).unwrap();
        for (x, y) in a.v.data().iter().zip(b.v.data()) {
            assert!((x - y).norm() < 1e-10);
        }
    }

    /// All cyclic shifts of one image: the Gram matrix is exactly diagonal.
    fn shift_design(seed: u64, lambda_teacher: f64) -> SpectralDataset {
        let s = Shape3::new(1, 4, 4);
        let mut rng = stream_rng(seed, 0);
        let base = SpatialTensor::from_fn(s, |_, _, _| rng.sample::<f64, _>(StandardNormal));
        let teacher = SpatialTensor::from_fn(s, |_, _, _| lambda_teacher * rng.sample::<f64, _>(StandardNormal));
        let mut spectra = Vec::new();
        let mut values = Vec::new();
        for di in 0..4 {
            for dj in 0..4 {
                let x = SpatialTensor::from_fn(s, |_, h, w| base.get(0, (h + di) % 4, (w + dj) % 4));
                values.push(x.data().iter().zip(teacher.data()).map(|(a, b)| a * b).sum::<f64>() + 0.1 * rng.sample::<f64, _>(StandardNormal));
                spectra.push(dft(&x));
            }
        }
        SpectralDataset { spectra, labels: Labels::Targets { values, dim: 1 } }
    }

    #[test]
    fn ridge_matches_diagonal_form_on_shift_designs() {
        let data = shift_design(1, 1.0);
        let ne = NormalEquations::from_data(&data).unwrap();
        for i in 0..16 {
            for j in 0..16 {
                if i != j {
                    assert!(ne.gram[(i, j)].norm() < 1e-12);
                }
            }
        }
        let tau = DiagonalSpectrum::from_data(&data).unwrap();
        let (ls, _) = least_squares(&data, LeastSquaresOptions::default()).unwrap();
        let (r, _) = ridge_closed_form(&data, 1.0).unwrap();
        let d = ridge_diagonal(&ls, &tau, 1.0).unwrap();
        for (a, b) in r.v.data().iter().zip(d.v.data()) {
            assert!((a - b).norm() < 1e-8);
        }
        let (l, rep) = lasso(&data, 0.3, LassoOptions { tol: 1e-10, ..Default::default() }).unwrap();
        assert!(rep.converged);
        let ld = lasso_diagonal(&ls, &tau, 0.3).unwrap();
        for (a, b) in l.v.data().iter().zip(ld.v.data()) {
            assert!((a - b).norm() < 1e-6);
        }
    }

    fn scalar_pred(z: Complex64) -> (EffectivePredictor, DiagonalSpectrum) {
        let s = Shape3::new(1, 1, 1);
        let mut v = ComplexKernel::zeros(1, 1, 1, 1);
        v.set(0, 0, 0, 0, z);
        (EffectivePredictor { v }, DiagonalSpectrum::new(SpatialTensor::new(s, vec![1.0]).unwrap()).unwrap())
    }

    #[test]
    fn diagonal_closed_forms() {
        let (v, tau) = scalar_pred(c(2.0, 0.0));
        assert!((ridge_diagonal(&v, &tau, 1.0).unwrap().v.get(0, 0, 0, 0) - c(1.0, 0.0)).norm() < 1e-15);
        assert_eq!(ridge_diagonal(&v, &tau, 0.0).unwrap(), v);
        let z = Complex64::from_polar(3.0, 0.7);
        let (v, tau) = scalar_pred(z);
        let out = lasso_diagonal(&v, &tau, 1.0).unwrap().v.get(0, 0, 0, 0);
        assert!((out.norm() - 2.0).abs() < 1e-14 && (out.arg() - 0.7).abs() < 1e-14);
        let (v, tau) = scalar_pred(c(0.5, 0.0));
        assert_eq!(lasso_diagonal(&v, &tau, 1.0).unwrap().v.get(0, 0, 0, 0), c(0.0, 0.0));
        let zero_tau = DiagonalSpectrum::new(SpatialTensor::new(Shape3::new(1, 1, 1), vec![0.0]).unwrap()).unwrap();
        assert_eq!(ridge_diagonal(&v, &zero_tau, 1.0).unwrap().v.get(0, 0, 0, 0), c(0.0, 0.0));
        assert_eq!(lasso_diagonal(&v, &zero_tau, 1.0).unwrap().v.get(0, 0, 0, 0), c(0.0, 0.0));
    }

    #[test]
    fn lasso_on_orthogonal_scalar_design() {
        let gram = CMatrix::from_element(1, 1, c(1.0, 0.0));
        let r = lasso_gram(&gram, &[c(3.0, 0.0)], 1.0, LassoOptions::default()).unwrap();
        assert!((r.v[0] - c(2.0, 0.0)).norm() < 1e-8);
        let r = lasso_gram(&gram, &[c(0.5, 0.0)], 1.0, LassoOptions::default()).unwrap();
        assert_eq!(r.v[0], c(0.0, 0.0));
    }

    /// Cyclic complex coordinate descent, run to a fixed point.
    fn coordinate_descent(gram: &CMatrix, rhs: &[Complex64], lambda: f64) -> Vec<Complex64> {
        let n = rhs.len();
        let mut v = vec![c(0.0, 0.0); n];
        for _ in 0..200_000 {
            let mut delta: f64 = 0.0;
            for p in 0..n {
                let mut r = rhs[p];
                for q in 0..n {
                    if q != p {
                        r -= gram[(p, q)] * v[q];
                    }
                }
                let new = soft_threshold(r, lambda) / gram[(p, p)].re;
                delta = delta.max((new - v[p]).norm());
                v[p] = new;
            }
            if delta < 1e-15 {
                break;
            }
        }
        v
    }

    fn random_problem(seed: u64, n: usize) -> (CMatrix, Vec<Complex64>) {
        let mut rng = stream_rng(seed, 0);
        let x = random_complex_matrix(3 * n, n, &mut rng);
        let y = random_complex_matrix(3 * n, 1, &mut rng);
        let inv = c(1.0 / (3 * n) as f64, 0.0);
        let gram = x.adjoint() * &x * inv;
        let rhs = (x.adjoint() * y * inv).iter().copied().collect();
        (gram, rhs)
    }

    #[test]
    fn ista_matches_coordinate_descent() {
        for seed in 0..5 {
            let (gram, rhs) = random_problem(seed, 10);
            let lambda = 0.2;
            let ista = lasso_gram(&gram, &rhs, lambda, LassoOptions { tol: 1e-10, max_iters: 200_000 }).unwrap();
            assert!(ista.converged, "{} {}", ista.iterations, ista.residual);
            let cd = coordinate_descent(&gram, &rhs, lambda);
            let f_cd = lasso_gram_objective(&gram, &rhs, lambda, &cd);
            assert!((ista.objective - f_cd).abs() < 1e-8, "{} vs {f_cd}", ista.objective);
            assert!(ista.trace.windows(2).all(|w| w[1] <= w[0] + 1e-12));
        }
    }

    #[test]
    fn lasso_reports_non_convergence() {
        let (gram, rhs) = random_problem(3, 10);
        let r = lasso_gram(&gram, &rhs, 0.1, LassoOptions { tol: 1e-14, max_iters: 3 }).unwrap();
        assert!(!r.converged && r.iterations == 3);
    }

    #[test]
    fn gradient_flow_limits() {
        let mut rng = stream_rng(9, 0);
        let x = DMatrix::from_fn(40, 6, |_, _| rng.sample::<f64, _>(StandardNormal));
        let y = DVector::from_fn(40, |_, _| rng.sample::<f64, _>(StandardNormal));
        let gf = GradientFlow::new(&x, &y).unwrap();
        assert_eq!(gf.at(0.0).norm(), 0.0);
        let lmin = gf.eigenvalues.iter().copied().fold(f64::MAX, f64::min);
        let end = gf.at(1e3 / lmin);
        assert!((end - &gf.beta_inf).norm() < 1e-6 * gf.beta_inf.norm());
        let ls = (x.transpose() * &x).cholesky().unwrap().solve(&(x.transpose() * &y));
        assert!((ls - &gf.beta_inf).norm() < 1e-10);
    }

    #[test]
    fn ridge_diagonal_shrinkage_formula_for_power_laws() {
        let (gamma, alpha, lambda) = (2.0, 1.5, 0.3);
        let p = PowerLawParams::new(gamma, alpha, alpha, 1.0).unwrap();
        let s = Shape3::new(1, 8, 8);
        let tau = DiagonalSpectrum::new(p.tau_map(s)).unwrap();
        let mut v = ComplexKernel::zeros(1, 8, 8, 1);
        v.data_mut().iter_mut().for_each(|z| *z = c(1.0, 0.0));
        let r = ridge_diagonal(&EffectivePredictor { v }, &tau, lambda).unwrap();
        for i in 0..8 {
            for j in 0..8 {
                if (i, j) == (0, 0) {
                    continue;
                }
                let (di, dj) = (i.min(8 - i) as f64, j.min(8 - j) as f64);
                let want = 1.0 / (1.0 + (lambda / gamma) * (di.powf(alpha) + dj.powf(alpha)));
                assert!((r.v.get(0, i, j, 0).re - want).abs() < 1e-12);
            }
        }
    }

    /// `ridge - shrink(LS) = (lambda + D)^{-1} (G - D) (LS - ridge)` holds exactly.
    #[test]
    fn ridge_departure_from_diagonal_form_is_the_off_diagonal_gram() {
        let p = PowerLawParams::new(1.0, 2.0, 2.0, 1.0).unwrap();
        let ds = generate_powerlaw(p, Shape3::new(1, 8, 8), 500, 5, TeacherSpec::default()).unwrap();
        let data = SpectralDataset::from_dataset(&ds);
        let tau = DiagonalSpectrum::from_data(&data).unwrap();
        let mut ne = NormalEquations::from_data(&data).unwrap();
        let (ls, _) = least_squares_from(&mut ne, LeastSquaresOptions::default()).unwrap();
        let lambda = 0.3;
        let (r, _) = ridge_from(&mut ne, lambda).unwrap();
        let d = ridge_diagonal(&ls, &tau, lambda).unwrap();
        let rv = flatten(&r, ne.shape);
        let dv = flatten(&d, ne.shape);
        let mut off = ne.gram.clone();
        for i in 0..off.nrows() {
            off[(i, i)] = c(0.0, 0.0);
        }
        let e = off * (flatten(&ls, ne.shape) - &rv);
        for p in 0..rv.nrows() {
            let t = ne.gram[(p, p)].re;
            let want = e[(p, 0)] / (lambda + t);
            assert!((rv[(p, 0)] - dv[(p, 0)] - want).norm() < 1e-9, "{p}");
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn ridge_shrinkage_is_monotone(mag in 0.01f64..10.0, t1 in 0.0f64..5.0, dt in 0.0f64..5.0, l1 in 0.0f64..5.0, dl in 0.0f64..5.0) {
            let (v, _) = scalar_pred(c(mag, 0.0));
            let at = |t: f64, l: f64| {
                let tau = DiagonalSpectrum::new(SpatialTensor::new(Shape3::new(1, 1, 1), vec![t]).unwrap()).unwrap();
                ridge_diagonal(&v, &tau, l).unwrap().v.get(0, 0, 0, 0).norm()
            };
            prop_assert!(at(t1 + dt, l1) >= at(t1, l1) - 1e-15);
            prop_assert!(at(t1, l1 + dl) <= at(t1, l1) + 1e-15);
        }

        #[test]
        fn lasso_shrinks_small_coefficients_harder_than_ridge(mag in 0.0f64..1.0, t in 0.01f64..10.0, l in 0.0f64..5.0) {
            let (v, _) = scalar_pred(c(mag, 0.0));
            let tau = DiagonalSpectrum::new(SpatialTensor::new(Shape3::new(1, 1, 1), vec![t]).unwrap()).unwrap();
            let r = ridge_diagonal(&v, &tau, l).unwrap().v.get(0, 0, 0, 0).norm();
            let s = lasso_diagonal(&v, &tau, l).unwrap().v.get(0, 0, 0, 0).norm();
            prop_assert!(s <= r + 1e-15);
        }

        #[test]
        fn ista_objective_never_increases(seed in any::<u64>(), lambda in 0.0f64..1.0) {
            let (gram, rhs) = random_problem(seed, 6);
            let r = lasso_gram(&gram, &rhs, lambda, LassoOptions { tol: 1e-9, max_iters: 5000 }).unwrap();
            prop_assert!(r.trace.windows(2).all(|w| w[1] <= w[0] + 1e-12 * w[0].abs().max(1.0)));
        }
    }
}
