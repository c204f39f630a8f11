//! Small dense complex linear algebra: one-sided Jacobi SVD, pseudo-inverse,
//! Hermitian eigendecomposition and random test matrices.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

pub type CMatrix = DMatrix<Complex64>;
pub type CVector = DVector<Complex64>;

pub const SVD_MAX_SWEEPS: usize = 100;

/// Thin SVD `A = U diag(s) V^H` with `k = min(m, n)` columns in `U` and `V`.
#[derive(Debug, Clone)]
pub struct Svd {
    pub u: CMatrix,
    pub s: Vec<f64>,
    pub v: CMatrix,
}

impl Svd {
    pub fn reconstruct(&self) -> CMatrix {
        let mut us = self.u.clone();
        for (k, s) in self.s.iter().enumerate() {
            us.column_mut(k).scale_mut(*s);
        }
        us * self.v.adjoint()
    }

    /// Number of singular values above `rtol * s_max`.
    pub fn rank(&self, rtol: f64) -> usize {
        let smax = self.s.first().copied().unwrap_or(0.0);
        self.s.iter().filter(|&&v| v > rtol * smax).count()
    }
}

fn col_dot(g: &CMatrix, p: usize, q: usize) -> Complex64 {
    g.column(p).iter().zip(g.column(q).iter()).map(|(a, b)| a.conj() * b).sum()
}

fn col_norm_sqr(g: &CMatrix, p: usize) -> f64 {
    g.column(p).iter().map(|z| z.norm_sqr()).sum()
}

/// Applies the complex plane rotation to columns `p` and `q` of `m`.
fn rotate(m: &mut CMatrix, p: usize, q: usize, c: f64, s: f64, phase: Complex64) {
    for r in 0..m.nrows() {
        let a = m[(r, p)];
        let b = m[(r, q)] * phase;
        m[(r, p)] = a * c - b * s;
        m[(r, q)] = a * s + b * c;
    }
}

fn jacobi_tall(a: &CMatrix) -> Result<Svd> {
    let (m, n) = a.shape();
    let mut g = a.clone();
    let mut v = CMatrix::identity(n, n);
    let mut converged = n < 2;
    for _ in 0..SVD_MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..n {
            for q in p + 1..n {
                let alpha = col_norm_sqr(&g, p);
                let beta = col_norm_sqr(&g, q);
                let gamma = col_dot(&g, p, q);
                let mag = gamma.norm();
                if mag == 0.0 || mag <= 1e-15 * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let phase = (gamma / mag).conj();
                let zeta = (beta - alpha) / (2.0 * mag);
                let t = if zeta >= 0.0 { 1.0 } else { -1.0 } / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate(&mut g, p, q, c, s, phase);
                rotate(&mut v, p, q, c, s, phase);
            }
        }
        if !rotated {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::Numerical(format!(
            "Jacobi SVD of a {m}x{n} matrix did not converge in {SVD_MAX_SWEEPS} sweeps"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    let norms: Vec<f64> = (0..n).map(|k| col_norm_sqr(&g, k).sqrt()).collect();
    order.sort_by(|&x, &y| norms[y].total_cmp(&norms[x]));
    let smax = norms[order[0]];
    let mut u = CMatrix::zeros(m, n);
    let mut vs = CMatrix::zeros(n, n);
    let mut s = Vec::with_capacity(n);
    let mut filled = Vec::with_capacity(n);
    for (k, &j) in order.iter().enumerate() {
        s.push(norms[j]);
        vs.set_column(k, &v.column(j));
        if norms[j] > smax * 1e-13 * (m.max(n) as f64) && norms[j] > 0.0 {
            u.set_column(k, &(g.column(j) / Complex64::new(norms[j], 0.0)));
            filled.push(true);
        } else {
            filled.push(false);
        }
    }
    complete_orthonormal(&mut u, &filled);
    Ok(Svd { u, s, v: vs })
}

/// Fills the columns marked `false` with unit vectors orthogonal to all others.
fn complete_orthonormal(u: &mut CMatrix, filled: &[bool]) {
    let m = u.nrows();
    let mut have: Vec<usize> = (0..filled.len()).filter(|&k| filled[k]).collect();
    let mut basis = 0;
    for k in 0..filled.len() {
        if filled[k] {
            continue;
        }
        while basis < m {
            let mut cand = CVector::zeros(m);
            cand[basis] = Complex64::new(1.0, 0.0);
            basis += 1;
            for _ in 0..2 {
                for &h in &have {
                    let col = u.column(h).clone_owned();
                    let proj = col.dotc(&cand);
                    cand -= col * proj;
                }
            }
            let nrm = cand.norm();
            if nrm > 0.5 {
                u.set_column(k, &(cand / Complex64::new(nrm, 0.0)));
                have.push(k);
                break;
            }
        }
    }
}

/// Thin SVD by one-sided (Hestenes) Jacobi rotations; singular values nonincreasing.
pub fn svd(a: &CMatrix) -> Result<Svd> {
    let (m, n) = a.shape();
    if m == 0 || n == 0 {
        return Ok(Svd {
            u: CMatrix::zeros(m, 0),
            s: Vec::new(),
            v: CMatrix::zeros(n, 0),
        });
    }
    if a.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
        return Err(Error::Numerical("SVD input has non-finite entries".into()));
    }
    if m >= n {
        jacobi_tall(a)
    } else {
        let t = jacobi_tall(&a.adjoint())?;
        Ok(Svd { u: t.v, s: t.s, v: t.u })
    }
}

pub fn singular_values(a: &CMatrix) -> Result<Vec<f64>> {
    Ok(svd(a)?.s)
}

/// Schatten `p`-(quasi-)norm `(sum s_i^p)^(1/p)`.
pub fn schatten_norm(a: &CMatrix, p: f64) -> Result<f64> {
    if !(p > 0.0) {
        return Err(Error::InvalidArgument(format!("Schatten exponent must be positive, got {p}")));
    }
    Ok(schatten_from_values(&singular_values(a)?, p))
}

pub fn schatten_from_values(s: &[f64], p: f64) -> f64 {
    let smax = s.iter().fold(0.0_f64, |m, v| m.max(*v));
    if smax == 0.0 {
        return 0.0;
    }
    // Scale out the largest value so large p cannot overflow.
    smax * s.iter().map(|v| (v / smax).powf(p)).sum::<f64>().powf(1.0 / p)
}

pub fn frobenius_sqr(a: &CMatrix) -> f64 {
    a.iter().map(|z| z.norm_sqr()).sum()
}

/// Moore-Penrose pseudo-inverse, dropping singular values below `rtol * s_max`.
pub fn pinv(a: &CMatrix, rtol: f64) -> Result<CMatrix> {
    let d = svd(a)?;
    let smax = d.s.first().copied().unwrap_or(0.0);
    let mut vs = d.v.clone();
    for (k, s) in d.s.iter().enumerate() {
        let inv = if *s > rtol * smax && *s > 0.0 { 1.0 / s } else { 0.0 };
        vs.column_mut(k).scale_mut(inv);
    }
    Ok(vs * d.u.adjoint())
}

/// Eigen-decomposition of a Hermitian matrix: real eigenvalues and unitary eigenvectors.
pub fn hermitian_eigh(a: &CMatrix) -> (Vec<f64>, CMatrix) {
    let e = nalgebra::SymmetricEigen::new(a.clone());
    (e.eigenvalues.iter().copied().collect(), e.eigenvectors)
}

pub fn random_complex_matrix<R: Rng>(rows: usize, cols: usize, rng: &mut R) -> CMatrix {
    CMatrix::from_fn(rows, cols, |_, _| {
        Complex64::new(rng.sample(StandardNormal), rng.sample(StandardNormal)) / std::f64::consts::SQRT_2
    })
}

/// Haar-like random unitary from Gram-Schmidt on a complex Gaussian matrix.
pub fn random_unitary<R: Rng>(n: usize, rng: &mut R) -> CMatrix {
    let mut q = random_complex_matrix(n, n, rng);
    for k in 0..n {
        for _ in 0..2 {
            for j in 0..k {
                let qj = q.column(j).clone_owned();
                let proj = qj.dotc(&q.column(k));
                let upd = q.column(k) - qj * proj;
                q.set_column(k, &upd);
            }
        }
        let nrm = q.column(k).norm();
        q.column_mut(k).unscale_mut(nrm);
    }
    q
}

pub fn c(re: f64, im: f64) -> Complex64 {
    Complex64::new(re, im)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream_rng;
    use proptest::prelude::*;

    fn check_svd(a: &CMatrix) {
        let d = svd(a).unwrap();
        let scale = d.s.first().copied().unwrap_or(0.0).max(1e-300);
        let resid = (d.reconstruct() - a).norm();
        assert!(resid <= 1e-10 * scale.max(1.0), "residual {resid}");
        let k = d.s.len();
        let eye = CMatrix::identity(k, k);
        assert!((d.u.adjoint() * &d.u - &eye).norm() < 1e-10);
        assert!((d.v.adjoint() * &d.v - &eye).norm() < 1e-10);
        assert!(d.s.windows(2).all(|w| w[0] >= w[1]));
        assert!(d.s.iter().all(|v| *v >= 0.0));
    }

    #[test]
    fn diagonal_singular_values_sorted() {
        let a = CMatrix::from_row_slice(2, 2, &[c(3.0, 0.0), c(0.0, 0.0), c(0.0, 0.0), c(4.0, 0.0)]);
        let s = singular_values(&a).unwrap();
        assert!((s[0] - 4.0).abs() < 1e-14 && (s[1] - 3.0).abs() < 1e-14);
        assert!((schatten_norm(&a, 2.0).unwrap() - 5.0).abs() < 1e-12);
    }

    #[test]
    fn rank_one_outer_product() {
        let mut rng = stream_rng(1, 0);
        let u = random_complex_matrix(4, 1, &mut rng);
        let v = random_complex_matrix(3, 1, &mut rng);
        let u = &u / Complex64::new(u.norm(), 0.0);
        let v = &v / Complex64::new(v.norm(), 0.0);
        let a = &u * v.adjoint();
        let s = singular_values(&a).unwrap();
        assert!((s[0] - 1.0).abs() < 1e-12);
        assert!(s[1..].iter().all(|x| x.abs() < 1e-12));
        check_svd(&a);
    }

    #[test]
    fn identity_schatten_norms() {
        let eye = CMatrix::identity(5, 5);
        for p in [0.5, 1.0, 2.0, 3.0] {
            assert!((schatten_norm(&eye, p).unwrap() - 5f64.powf(1.0 / p)).abs() < 1e-12);
        }
        assert!(schatten_norm(&eye, 0.0).is_err());
    }

    #[test]
    fn zero_and_rank_deficient_matrices() {
        check_svd(&CMatrix::zeros(3, 2));
        let mut rng = stream_rng(2, 0);
        let a = random_complex_matrix(5, 2, &mut rng) * random_complex_matrix(2, 4, &mut rng);
        check_svd(&a);
        assert_eq!(svd(&a).unwrap().rank(1e-9), 2);
    }

    #[test]
    fn pinv_satisfies_penrose_identity() {
        let mut rng = stream_rng(3, 0);
        let a = random_complex_matrix(4, 2, &mut rng) * random_complex_matrix(2, 3, &mut rng);
        let p = pinv(&a, 1e-12).unwrap();
        assert!((&a * &p * &a - &a).norm() < 1e-10);
        assert!((&p * &a * &p - &p).norm() < 1e-10);
    }

    #[test]
    fn hermitian_eigh_reconstructs() {
        let mut rng = stream_rng(4, 0);
        let x = random_complex_matrix(4, 4, &mut rng);
        let h = &x * x.adjoint();
        let (vals, vecs) = hermitian_eigh(&h);
        let d = CMatrix::from_diagonal(&CVector::from_iterator(4, vals.iter().map(|v| c(*v, 0.0))));
        assert!((&vecs * d * vecs.adjoint() - &h).norm() < 1e-10);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn svd_reconstructs_random(m in 1usize..8, n in 1usize..8, seed in any::<u64>()) {
            let a = random_complex_matrix(m, n, &mut stream_rng(seed, 0));
            check_svd(&a);
        }

        #[test]
        fn schatten_is_unitarily_invariant(n in 1usize..6, p in 0.3f64..4.0, seed in any::<u64>()) {
            let mut rng = stream_rng(seed, 0);
            let a = random_complex_matrix(n, n, &mut rng);
            let u = random_unitary(n, &mut rng);
            let v = random_unitary(n, &mut rng);
            let lhs = schatten_norm(&(&u * &a * v.adjoint()), p).unwrap();
            let rhs = schatten_norm(&a, p).unwrap();
            prop_assert!((lhs - rhs).abs() <= 1e-10 * rhs.max(1.0));
        }

        #[test]
        fn schatten_two_is_frobenius(seed in any::<u64>()) {
            let a = random_complex_matrix(4, 4, &mut stream_rng(seed, 0));
            prop_assert!((schatten_norm(&a, 2.0).unwrap() - frobenius_sqr(&a).sqrt()).abs() < 1e-10);
        }

        #[test]
        fn zero_padding_preserves_schatten(m in 1usize..5, n in 1usize..5, pad in 1usize..4, p in 0.3f64..3.0, seed in any::<u64>()) {
            let a = random_complex_matrix(m, n, &mut stream_rng(seed, 0));
            let mut big = CMatrix::zeros(m + pad, n + pad + 1);
            big.view_mut((0, 0), (m, n)).copy_from(&a);
            let x = schatten_norm(&a, p).unwrap();
            let y = schatten_norm(&big, p).unwrap();
            prop_assert!((x - y).abs() <= 1e-12 * x.max(1.0));
        }
    }
}
