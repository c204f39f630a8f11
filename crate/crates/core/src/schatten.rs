//! Composable matrix chains, the generalized Hölder inequality for Schatten
//! norms, balanced factorizations and numerical representation costs.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape_err, Result};
use crate::linalg::{frobenius_sqr, hermitian_eigh, pinv, random_complex_matrix, schatten_from_values, svd, CMatrix};
use crate::rng::stream_rng;

/// Matrices `A_1, ..., A_L` with `rows(A_l) = cols(A_{l+1})`; the product is `A_L ... A_1`.
#[derive(Debug, Clone, PartialEq)]
pub struct ComposableChain {
    factors: Vec<CMatrix>,
}

impl ComposableChain {
    pub fn new(factors: Vec<CMatrix>) -> Result<Self> {
        if factors.is_empty() {
            return invalid("a chain needs at least one matrix");
        }
        for (l, pair) in factors.windows(2).enumerate() {
            if pair[0].nrows() != pair[1].ncols() {
                return shape_err(format!(
                    "factor {} is {}x{} but factor {} is {}x{}: not composable",
                    l + 1,
                    pair[0].nrows(),
                    pair[0].ncols(),
                    l + 2,
                    pair[1].nrows(),
                    pair[1].ncols()
                ));
            }
        }
        Ok(Self { factors })
    }

    pub fn factors(&self) -> &[CMatrix] {
        &self.factors
    }

    pub fn depth(&self) -> usize {
        self.factors.len()
    }

    pub fn product(&self) -> CMatrix {
        let mut p = self.factors[0].clone();
        for a in &self.factors[1..] {
            p = a * p;
        }
        p
    }

    /// `(1/L) sum_l ||A_l||_2^2`.
    pub fn cost(&self) -> f64 {
        self.factors.iter().map(frobenius_sqr).sum::<f64>() / self.depth() as f64
    }

    /// Dimensions `(n_1, m_1, m_2, ..., m_L)`.
    pub fn widths(&self) -> Vec<usize> {
        std::iter::once(self.factors[0].ncols())
            .chain(self.factors.iter().map(|a| a.nrows()))
            .collect()
    }
}

/// `(||B||_{2/L})^{2/L} = sum_i s_i^{2/L}`, the minimal `L`-layer representation cost.
pub fn schatten_cost(b: &CMatrix, depth: usize) -> Result<f64> {
    if depth == 0 {
        return invalid("depth must be at least 1");
    }
    let p = 2.0 / depth as f64;
    Ok(svd(b)?.s.iter().map(|s| s.powf(p)).sum())
}

/// Factors `B = U S V^H` as `(S^{1/L} V^H, S^{1/L}, ..., S^{1/L}, U S^{1/L})`.
pub fn balanced_factorization(b: &CMatrix, depth: usize) -> Result<ComposableChain> {
    if depth == 0 {
        return invalid("depth must be at least 1");
    }
    if depth == 1 {
        return ComposableChain::new(vec![b.clone()]);
    }
    let d = svd(b)?;
    let k = d.s.len();
    let root: Vec<Complex64> = d.s.iter().map(|s| Complex64::new(s.powf(1.0 / depth as f64), 0.0)).collect();
    let mut first = d.v.adjoint();
    let mut last = d.u.clone();
    for (i, r) in root.iter().enumerate() {
        first.row_mut(i).scale_mut(r.re);
        last.column_mut(i).scale_mut(r.re);
    }
    let middle = CMatrix::from_fn(k, k, |i, j| if i == j { root[i] } else { Complex64::new(0.0, 0.0) });
    let mut factors = vec![first];
    factors.extend(std::iter::repeat_n(middle, depth - 2));
    factors.push(last);
    ComposableChain::new(factors)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HolderCheck {
    pub lhs: f64,
    pub rhs: f64,
    pub holds: bool,
}

/// Singular values above `1e-12 * s_max`. Rounding-level values of a rank-deficient
/// matrix would otherwise dominate quasi-norms with small exponents.
fn numerical_spectrum(a: &CMatrix) -> Result<Vec<f64>> {
    let s = svd(a)?.s;
    let cut = 1e-12 * s.first().copied().unwrap_or(0.0);
    Ok(s.into_iter().filter(|&v| v > cut).collect())
}

/// Checks `||A_L ... A_1||_r <= prod_i ||A_i||_{p_i}` for `1/r = sum_i 1/p_i`.
pub fn holder_check(chain: &ComposableChain, exponents: &[f64], r: f64) -> Result<HolderCheck> {
    if exponents.len() != chain.depth() {
        return invalid(format!("{} exponents for a chain of {} matrices", exponents.len(), chain.depth()));
    }
    if exponents.iter().any(|p| !(*p > 0.0)) || !(r > 0.0) {
        return invalid("exponents must be positive");
    }
    let sum: f64 = exponents.iter().map(|p| 1.0 / p).sum();
    if (sum - 1.0 / r).abs() > 1e-12 {
        return invalid(format!("sum of 1/p_i is {sum} but 1/r is {}", 1.0 / r));
    }
    let lhs = schatten_from_values(&numerical_spectrum(&chain.product())?, r);
    let mut rhs = 1.0;
    for (a, p) in chain.factors().iter().zip(exponents) {
        rhs *= schatten_from_values(&numerical_spectrum(a)?, *p);
    }
    Ok(HolderCheck {
        lhs,
        rhs,
        holds: lhs <= rhs * (1.0 + 1e-10),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RepresentationOptions {
    pub restarts: usize,
    pub steps: usize,
    pub seed: u64,
    /// Inner widths `m_1, ..., m_{L-1}`; defaults to `min(rows, cols)` each.
    #[serde(default)]
    pub widths: Option<Vec<usize>>,
}

impl Default for RepresentationOptions {
    fn default() -> Self {
        Self {
            restarts: 20,
            steps: 2000,
            seed: 0,
            widths: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct RepresentationCost {
    /// `min(searched_cost, balanced cost)`.
    pub min_cost: f64,
    pub argmin: ComposableChain,
    /// Best cost found by the randomized search alone.
    pub searched_cost: f64,
    pub searched_residual: f64,
    /// `(||B||_{2/L})^{2/L}`.
    pub lower_bound: f64,
    pub best_restart: usize,
}

const MU_START: f64 = 10.0;
const MU_END: f64 = 1e9;

fn chain_range(factors: &[CMatrix], lo: usize, hi: usize, identity_dim: usize) -> CMatrix {
    let mut p = CMatrix::identity(identity_dim, identity_dim);
    for a in &factors[lo..hi] {
        p = a * p;
    }
    p
}

/// Minimizes `(1/L) ||A||^2 + mu ||B - P A Q||^2` exactly over one factor `A`.
fn als_update(b: &CMatrix, p: &CMatrix, q: &CMatrix, mu: f64, depth: usize) -> CMatrix {
    let (d1, e1) = hermitian_eigh(&(p.adjoint() * p));
    let (d2, e2) = hermitian_eigh(&(q * q.adjoint()));
    let rhs = e1.adjoint() * p.adjoint() * b * q.adjoint() * &e2;
    let inv_l = 1.0 / depth as f64;
    let scaled = CMatrix::from_fn(rhs.nrows(), rhs.ncols(), |i, j| {
        rhs[(i, j)] * (mu / (mu * d1[i].max(0.0) * d2[j].max(0.0) + inv_l))
    });
    &e1 * scaled * e2.adjoint()
}

fn search_once(b: &CMatrix, dims: &[usize], depth: usize, steps: usize, seed: u64, restart: usize) -> Result<ComposableChain> {
    let mut rng = stream_rng(seed, restart as u64);
    let bnorm = frobenius_sqr(b).sqrt().max(1e-12);
    let scale = bnorm.powf(1.0 / depth as f64);
    // Penalty weight in units where the two terms scale alike under B -> sB.
    let unit = bnorm.powf(2.0 / depth as f64 - 2.0);
    let mut factors: Vec<CMatrix> = (0..depth)
        .map(|l| {
            let a = random_complex_matrix(dims[l + 1], dims[l], &mut rng);
            a * Complex64::new(scale / (dims[l] as f64).sqrt(), 0.0)
        })
        .collect();
    let ramp = (steps * 4 / 5).max(1);
    for step in 0..steps {
        let t = (step.min(ramp) as f64) / ramp as f64;
        let mu = unit * MU_START * (MU_END / MU_START).powf(t);
        for l in 0..depth {
            let q = chain_range(&factors, 0, l, dims[0]);
            let p = chain_range(&factors, l + 1, depth, dims[l + 1]);
            factors[l] = als_update(b, &p, &q, mu, depth);
        }
    }
    // Close the remaining constraint gap on the last factor.
    let q = chain_range(&factors, 0, depth - 1, dims[0]);
    let gap = b - &factors[depth - 1] * &q;
    factors[depth - 1] += gap * pinv(&q, 1e-12)?;
    ComposableChain::new(factors)
}

/// Searches over chains of the given widths whose product is `B` for the smallest
/// `(1/L) sum ||A_l||^2`: penalty continuation with exact per-factor updates,
/// a final projection onto the constraint, and seeded random restarts.
pub fn representation_cost(b: &CMatrix, depth: usize, opts: &RepresentationOptions) -> Result<RepresentationCost> {
    if depth == 0 {
        return invalid("depth must be at least 1");
    }
    if opts.restarts == 0 {
        return invalid("need at least one restart");
    }
    let lower_bound = schatten_cost(b, depth)?;
    let balanced = balanced_factorization(b, depth)?;
    if depth == 1 {
        let cost = balanced.cost();
        return Ok(RepresentationCost {
            min_cost: cost,
            argmin: balanced,
            searched_cost: cost,
            searched_residual: 0.0,
            lower_bound,
            best_restart: 0,
        });
    }
    let k = b.nrows().min(b.ncols());
    let inner = match &opts.widths {
        Some(w) if w.len() == depth - 1 => w.clone(),
        Some(w) => return invalid(format!("{} inner widths given for depth {depth}", w.len())),
        None => vec![k; depth - 1],
    };
    let mut dims = vec![b.ncols()];
    dims.extend(inner);
    dims.push(b.nrows());
    let mut best: Option<(f64, f64, usize, ComposableChain)> = None;
    let bnorm = frobenius_sqr(b).sqrt().max(1e-300);
    for restart in 0..opts.restarts {
        let chain = search_once(b, &dims, depth, opts.steps, opts.seed, restart)?;
        let resid = (chain.product() - b).norm() / bnorm;
        // Infeasible chains (product off by more than roundoff) never win.
        let cost = if resid < 1e-8 { chain.cost() } else { f64::INFINITY };
        if best.as_ref().is_none_or(|(c, _, _, _)| cost < *c) {
            best = Some((cost, resid, restart, chain));
        }
    }
    let (searched_cost, searched_residual, best_restart, chain) = best.expect("at least one restart");
    let bal_cost = balanced.cost();
    let (min_cost, argmin) = if searched_cost <= bal_cost {
        (searched_cost, chain)
    } else {
        (bal_cost, balanced)
    };
    Ok(RepresentationCost {
        min_cost,
        argmin,
        searched_cost,
        searched_residual,
        lower_bound,
        best_restart,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::c;
    use proptest::prelude::*;
    use rand::Rng;

    fn diag(v: &[f64]) -> CMatrix {
        CMatrix::from_fn(v.len(), v.len(), |i, j| if i == j { c(v[i], 0.0) } else { c(0.0, 0.0) })
    }

    #[test]
    fn scalar_balanced_factorization() {
        let b = diag(&[4.0]);
        let ch = balanced_factorization(&b, 2).unwrap();
        assert!((ch.factors()[0][(0, 0)] - c(2.0, 0.0)).norm() < 1e-12);
        assert!((ch.factors()[1][(0, 0)] - c(2.0, 0.0)).norm() < 1e-12);
        assert!((ch.cost() - 4.0).abs() < 1e-12);
        let ch = balanced_factorization(&diag(&[1.0, 4.0]), 2).unwrap();
        assert!((ch.cost() - 5.0).abs() < 1e-12);
    }

    #[test]
    fn incomposable_chain_is_rejected() {
        let err = ComposableChain::new(vec![CMatrix::zeros(3, 2), CMatrix::zeros(2, 2)]).unwrap_err();
        assert!(err.to_string().contains("not composable"));
    }

    #[test]
    fn holder_equality_and_zero_cases() {
        let eye = CMatrix::identity(2, 2);
        let ch = ComposableChain::new(vec![eye.clone(), eye.clone()]).unwrap();
        let h = holder_check(&ch, &[2.0, 2.0], 1.0).unwrap();
        assert!((h.lhs - 2.0).abs() < 1e-12 && (h.rhs - 2.0).abs() < 1e-12 && h.holds);
        let ch = ComposableChain::new(vec![CMatrix::zeros(2, 2), eye]).unwrap();
        let h = holder_check(&ch, &[3.0, 1.5], 1.0).unwrap();
        assert_eq!(h.lhs, 0.0);
        assert!(h.holds);
        assert!(holder_check(&ch, &[2.0, 2.0], 2.0).is_err());
    }

    #[test]
    fn balanced_beats_random_feasible_factorizations() {
        let mut rng = stream_rng(17, 0);
        let b = random_complex_matrix(3, 2, &mut rng);
        let bal = balanced_factorization(&b, 3).unwrap();
        assert!((bal.product() - &b).norm() < 1e-9 * b.norm());
        let bound = schatten_cost(&b, 3).unwrap();
        assert!((bal.cost() - bound).abs() < 1e-8 * bound);
        for _ in 0..200 {
            let a1 = random_complex_matrix(2, 2, &mut rng);
            let a2 = random_complex_matrix(2, 2, &mut rng);
            let q = &a2 * &a1;
            let a3 = &b * pinv(&q, 1e-14).unwrap();
            let ch = ComposableChain::new(vec![a1, a2, a3]).unwrap();
            assert!((ch.product() - &b).norm() < 1e-8 * b.norm());
            assert!(bal.cost() <= ch.cost() + 1e-12);
        }
    }

    #[test]
    fn representation_cost_small_cases() {
        let mut rng = stream_rng(5, 0);
        let b = random_complex_matrix(3, 2, &mut rng);
        let r = representation_cost(&b, 1, &RepresentationOptions::default()).unwrap();
        assert_eq!(r.min_cost, frobenius_sqr(&b));
        let opts = RepresentationOptions {
            restarts: 3,
            steps: 300,
            ..Default::default()
        };
        let r = representation_cost(&diag(&[4.0]), 2, &opts).unwrap();
        assert!((r.min_cost - 4.0).abs() < 1e-9);
    }

    #[test]
    fn representation_search_reaches_schatten_bound() {
        let mut rng = stream_rng(6, 0);
        let b = random_complex_matrix(2, 2, &mut rng);
        let opts = RepresentationOptions {
            restarts: 20,
            steps: 400,
            seed: 3,
            widths: None,
        };
        let r = representation_cost(&b, 3, &opts).unwrap();
        assert!(r.searched_cost.is_finite());
        assert!(r.searched_cost >= r.lower_bound * (1.0 - 1e-9));
        assert!((r.searched_cost - r.lower_bound) / r.lower_bound < 0.01, "{} vs {}", r.searched_cost, r.lower_bound);
        assert!(r.min_cost <= balanced_factorization(&b, 3).unwrap().cost() + 1e-8);
        assert!((r.argmin.product() - &b).norm() < 1e-8 * b.norm());
    }

    fn random_chain(rng: &mut impl Rng, depth: usize) -> ComposableChain {
        let dims: Vec<usize> = (0..=depth).map(|_| rng.random_range(1..=6)).collect();
        let factors = (0..depth).map(|l| random_complex_matrix(dims[l + 1], dims[l], rng)).collect();
        ComposableChain::new(factors).unwrap()
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn holder_holds_on_random_chains(seed in any::<u64>(), depth in 2usize..5) {
            let mut rng = stream_rng(seed, 0);
            let chain = random_chain(&mut rng, depth);
            let exps: Vec<f64> = (0..depth).map(|_| rng.random_range(0.5..6.0)).collect();
            let r = 1.0 / exps.iter().map(|p| 1.0 / p).sum::<f64>();
            prop_assert!(holder_check(&chain, &exps, r).unwrap().holds);
        }

        #[test]
        fn am_gm_on_factor_norms(seed in any::<u64>(), depth in 1usize..5) {
            let chain = random_chain(&mut stream_rng(seed, 0), depth);
            let geo = chain.factors().iter().map(frobenius_sqr).product::<f64>().powf(1.0 / depth as f64);
            prop_assert!(geo <= chain.cost() * (1.0 + 1e-12));
        }

        #[test]
        fn balanced_factorization_is_exact(seed in any::<u64>(), m in 1usize..7, n in 1usize..7, depth in 1usize..6) {
            let b = random_complex_matrix(m, n, &mut stream_rng(seed, 0));
            let ch = balanced_factorization(&b, depth).unwrap();
            let bound = schatten_cost(&b, depth).unwrap();
            prop_assert!((ch.product() - &b).norm() <= 1e-9 * b.norm().max(1.0));
            prop_assert!((ch.cost() - bound).abs() <= 1e-9 * bound);
        }

        #[test]
        fn chain_product_rank_is_bounded_by_widths(seed in any::<u64>(), depth in 2usize..5) {
            let chain = random_chain(&mut stream_rng(seed, 0), depth);
            let bottleneck = *chain.widths().iter().min().unwrap();
            let d = svd(&chain.product()).unwrap();
            prop_assert!(d.rank(1e-9) <= bottleneck);
        }
    }
}
