//! Randomized verification suites with per-trial margins, shared by the CLI and the
//! acceptance tests. A trial passes when its margin is nonnegative.

use num_complex::Complex64;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::dataset::{generate_powerlaw, Labels, PowerLawParams, TeacherSpec};
use crate::error::{invalid, Result};
use crate::experiments::{thm1_dual_path, Thm1Config};
use crate::freqnet::{gradients, init_weights, Activation, InitScheme, Loss, Objective, SpectralDataset, SpectralWeights};
use crate::linalg::{random_complex_matrix, singular_values, CMatrix};
use crate::rng::stream_rng;
use crate::schatten::{balanced_factorization, holder_check, ComposableChain};
use crate::solvers::{
    lasso, lasso_diagonal, lasso_gram, lasso_optimality_residual, least_squares_from, ridge_diagonal, ridge_from,
    DiagonalSpectrum, LassoOptions, LeastSquaresOptions, NormalEquations,
};
use crate::spectral::dft;
use crate::tensor::{Shape3, SpatialTensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub trial: usize,
    pub margin: f64,
    pub passed: bool,
    /// Inputs needed to replay the trial.
    pub detail: Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub suite: String,
    pub seed: u64,
    pub passed: bool,
    pub min_margin: f64,
    pub failures: usize,
    pub trials: Vec<TrialRecord>,
    pub summary: Value,
}

impl VerifyReport {
    fn new(suite: &str, seed: u64, trials: Vec<TrialRecord>, summary: Value) -> Self {
        let failures = trials.iter().filter(|t| !t.passed).count();
        let min_margin = trials.iter().map(|t| t.margin).fold(f64::INFINITY, f64::min);
        Self {
            suite: suite.into(),
            seed,
            passed: failures == 0 && !trials.is_empty(),
            min_margin,
            failures,
            trials,
            summary,
        }
    }
}

fn record(trial: usize, margin: f64, detail: Value) -> TrialRecord {
    TrialRecord {
        trial,
        margin,
        passed: margin >= 0.0,
        detail,
    }
}

fn trial_rng(seed: u64, trial: usize) -> ChaCha8Rng {
    stream_rng(seed, trial as u64)
}

fn gaussian_image(shape: Shape3, rng: &mut ChaCha8Rng) -> SpatialTensor {
    SpatialTensor::from_fn(shape, |_, _, _| rng.sample::<f64, _>(StandardNormal))
}

fn max_rel_diff(a: &[f64], b: &[f64]) -> f64 {
    let scale = b.iter().map(|v| v.abs()).fold(0.0, f64::max).max(1e-300);
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max) / scale
}

/// Spectral against spatial forward passes of random networks, Parseval, and the effective
/// predictor of bias-free linear networks.
pub fn lemmas(seed: u64, trials: usize, tol: f64) -> Result<VerifyReport> {
    let mut out = Vec::with_capacity(trials);
    for t in 0..trials {
        let mut rng = trial_rng(seed, t);
        let depth = rng.random_range(1..=3usize);
        let mut widths = vec![rng.random_range(1..=3usize)];
        widths.extend((0..depth).map(|_| rng.random_range(1..=4usize)));
        let act = if rng.random_bool(0.5) { Activation::Relu } else { Activation::Linear };
        let bias = act == Activation::Relu && rng.random_bool(0.5);
        let wseed: u64 = rng.random();
        let mut w = init_weights(&widths, 8, 8, wseed, InitScheme::default(), act, bias)?;
        if let Some(layers) = bias.then(|| w.layers_mut()) {
            for layer in layers.iter_mut() {
                for b in layer.bias.as_mut().expect("bias").iter_mut() {
                    *b = 0.1 * rng.sample::<f64, _>(StandardNormal);
                }
            }
        }
        let x = gaussian_image(Shape3::new(widths[0], 8, 8), &mut rng);
        let xh = dft(&x);
        let spectral = w.forward(&xh)?;
        let spatial = w.forward_spatial(&x)?;
        let mut worst = max_rel_diff(&spectral, &spatial);
        let parseval = (xh.norm() - x.norm()).abs() / x.norm();
        worst = worst.max(parseval);
        if act == Activation::Linear {
            let v = w.effective_predictor()?;
            worst = worst.max(max_rel_diff(&v.output(&xh)?, &spatial));
        }
        out.push(record(
            t,
            tol - worst,
            json!({"widths": widths, "activation": act, "bias": bias, "weight_seed": wseed, "max_rel_error": worst}),
        ));
    }
    Ok(VerifyReport::new("lemmas", seed, out, json!({"tolerance": tol})))
}

/// Generalized Hoelder inequality on random composable chains with mixed exponents.
pub fn holder(seed: u64, trials: usize, slack: f64) -> Result<VerifyReport> {
    let mut out = Vec::with_capacity(trials);
    for t in 0..trials {
        let mut rng = trial_rng(seed, t);
        let depth = rng.random_range(2..=4usize);
        let dims: Vec<usize> = (0..=depth).map(|_| rng.random_range(1..=6usize)).collect();
        let factors: Vec<CMatrix> = (0..depth)
            .map(|l| {
                let mut a = random_complex_matrix(dims[l + 1], dims[l], &mut rng);
                if rng.random_bool(0.25) && a.ncols() > 1 {
                    // Rank-deficient factor: repeat a column.
                    let c0 = a.column(0).into_owned();
                    a.set_column(1, &c0);
                }
                a
            })
            .collect();
        let r: f64 = rng.random_range(0.25..4.0);
        let weights: Vec<f64> = (0..depth).map(|_| rng.random_range(0.1..1.0)).collect();
        let total: f64 = weights.iter().sum();
        let exps: Vec<f64> = weights.iter().map(|w| r * total / w).collect();
        let chain = ComposableChain::new(factors)?;
        let h = holder_check(&chain, &exps, r)?;
        let margin = (h.rhs * (1.0 + slack) - h.lhs) / h.rhs.max(1e-300);
        out.push(record(t, margin, json!({"dims": dims, "exponents": exps, "r": r, "lhs": h.lhs, "rhs": h.rhs})));
    }
    Ok(VerifyReport::new("holder", seed, out, json!({"slack": slack})))
}

/// Balanced factorizations reconstruct `B` and attain `||B||_{2/L}^{2/L}`.
pub fn factorization(seed: u64, trials: usize, tol: f64) -> Result<VerifyReport> {
    let depths = [1usize, 2, 3, 5];
    let mut out = Vec::with_capacity(trials);
    for t in 0..trials {
        let mut rng = trial_rng(seed, t);
        let (m, n) = (rng.random_range(1..=6usize), rng.random_range(1..=6usize));
        let rank = rng.random_range(1..=m.min(n));
        let b = random_complex_matrix(m, rank, &mut rng) * random_complex_matrix(rank, n, &mut rng);
        let depth = depths[t % depths.len()];
        let chain = balanced_factorization(&b, depth)?;
        let s = singular_values(&b)?;
        let spec_norm = s.first().copied().unwrap_or(0.0);
        let recon = (chain.product() - &b).norm() / spec_norm.max(1e-300);
        let want: f64 = s.iter().map(|v| v.powf(2.0 / depth as f64)).sum();
        let cost_err = (chain.cost() - want).abs() / want.max(1e-300);
        out.push(record(
            t,
            tol - recon.max(cost_err),
            json!({"shape": [m, n], "rank": rank, "depth": depth, "reconstruction_error": recon, "cost_error": cost_err}),
        ));
    }
    Ok(VerifyReport::new("factorization", seed, out, json!({"tolerance": tol})))
}

/// Deep against Schatten objective minima; one trial per data seed.
pub fn thm1(cfg: &Thm1Config, trials: usize, tol: f64) -> Result<VerifyReport> {
    let mut out = Vec::with_capacity(trials);
    for t in 0..trials {
        let c = Thm1Config {
            seed: cfg.seed.wrapping_add(t as u64),
            ..cfg.clone()
        };
        let r = thm1_dual_path(&c)?;
        out.push(record(t, tol - r.relative_gap, serde_json::to_value(&r)?));
    }
    Ok(VerifyReport::new("thm1", cfg.seed, out, json!({"tolerance": tol, "config": cfg})))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RidgeSuiteConfig {
    pub samples: usize,
    pub size: usize,
    pub alpha: f64,
    pub gamma: f64,
    pub dc_variance: f64,
    pub lambdas: Vec<f64>,
    /// Coefficients with `tau >= cutoff * max tau` are compared.
    pub cutoff: f64,
    pub tolerance: f64,
}

impl Default for RidgeSuiteConfig {
    fn default() -> Self {
        Self {
            samples: 4000,
            size: 16,
            alpha: 2.0,
            gamma: 1.0,
            dc_variance: 1.0,
            lambdas: vec![0.01, 0.1, 1.0],
            cutoff: 0.1,
            tolerance: 0.05,
        }
    }
}

/// Full ridge solutions against the diagonal shrinkage of least squares, per coefficient, and
/// monotone shrinkage in lambda. One trial per lambda plus one for monotonicity.
pub fn ridge(seed: u64, cfg: &RidgeSuiteConfig) -> Result<VerifyReport> {
    let p = PowerLawParams::new(cfg.gamma, cfg.alpha, cfg.alpha, cfg.dc_variance)?;
    let ds = generate_powerlaw(p, Shape3::new(1, cfg.size, cfg.size), cfg.samples, seed, TeacherSpec::default())?;
    let data = SpectralDataset::from_dataset(&ds);
    let tau = DiagonalSpectrum::from_data(&data)?;
    let mut ne = NormalEquations::from_data(&data)?;
    let (ls, _) = least_squares_from(&mut ne, LeastSquaresOptions::default())?;
    let tmax = tau.tau.data().iter().copied().fold(0.0, f64::max);
    let coords: Vec<(usize, usize)> = (0..cfg.size)
        .flat_map(|i| (0..cfg.size).map(move |j| (i, j)))
        .filter(|&(i, j)| tau.tau.get(0, i, j) >= cfg.cutoff * tmax)
        .collect();
    let mut out = Vec::new();
    let mut mags: Vec<Vec<f64>> = Vec::new();
    for (t, &lambda) in cfg.lambdas.iter().enumerate() {
        let (r, _) = ridge_from(&mut ne, lambda)?;
        let d = ridge_diagonal(&ls, &tau, lambda)?;
        let mut worst: f64 = 0.0;
        let mut worst_at = (0, 0);
        let mut m = Vec::with_capacity(coords.len());
        for &(i, j) in &coords {
            let (a, b) = (r.v.get(0, i, j, 0).norm(), d.v.get(0, i, j, 0).norm());
            let rel = (a - b).abs() / b.max(1e-300);
            if rel > worst {
                worst = rel;
                worst_at = (i, j);
            }
            m.push(a);
        }
        mags.push(m);
        out.push(record(
            t,
            cfg.tolerance - worst,
            json!({"lambda": lambda, "max_rel_deviation": worst, "worst_frequency": [worst_at.0, worst_at.1], "compared": coords.len()}),
        ));
    }
    let mut violations = Vec::new();
    let mut mono_margin = f64::INFINITY;
    for k in 0..coords.len() {
        for l in 1..mags.len() {
            let drop = mags[l - 1][k] - mags[l][k];
            mono_margin = mono_margin.min(drop / mags[l - 1][k].max(1e-300));
            if drop < 0.0 {
                violations.push(json!([coords[k].0, coords[k].1, l]));
            }
        }
    }
    out.push(record(cfg.lambdas.len(), mono_margin, json!({"monotonicity_violations": violations})));
    Ok(VerifyReport::new("ridge", seed, out, serde_json::to_value(cfg)?))
}

/// Dataset of every cyclic shift of one random image: its Gram matrix is exactly diagonal.
pub fn cyclic_shift_design(size: usize, noise: f64, rng: &mut ChaCha8Rng) -> SpectralDataset {
    let s = Shape3::new(1, size, size);
    let base = gaussian_image(s, rng);
    let teacher = gaussian_image(s, rng);
    let mut spectra = Vec::with_capacity(size * size);
    let mut values = Vec::with_capacity(size * size);
    for di in 0..size {
        for dj in 0..size {
            let x = SpatialTensor::from_fn(s, |_, h, w| base.get(0, (h + di) % size, (w + dj) % size));
            let y: f64 = x.data().iter().zip(teacher.data()).map(|(a, b)| a * b).sum();
            values.push(y + noise * rng.sample::<f64, _>(StandardNormal));
            spectra.push(dft(&x));
        }
    }
    SpectralDataset {
        spectra,
        labels: Labels::Targets { values, dim: 1 },
    }
}

/// ISTA optimality on random designs, and agreement with the diagonal closed form on
/// orthogonal (cyclic-shift) designs. Even trials are orthogonal, odd trials random.
pub fn lasso_suite(seed: u64, trials: usize, tol: f64) -> Result<VerifyReport> {
    let opts = LassoOptions {
        tol: tol * 1e-2,
        max_iters: 200_000,
    };
    let mut out = Vec::with_capacity(trials);
    for t in 0..trials {
        let mut rng = trial_rng(seed, t);
        let lambda: f64 = rng.random_range(0.01..1.0);
        if t % 2 == 0 {
            let data = cyclic_shift_design(4, 0.1, &mut rng);
            let tau = DiagonalSpectrum::from_data(&data)?;
            let mut ne = NormalEquations::from_data(&data)?;
            let (ls, _) = least_squares_from(&mut ne, LeastSquaresOptions::default())?;
            let (v, rep) = lasso(&data, lambda, opts)?;
            let closed = lasso_diagonal(&ls, &tau, lambda)?;
            let gap = v.v.data().iter().zip(closed.v.data()).map(|(a, b)| (a - b).norm()).fold(0.0, f64::max);
            let residual = rep.residual.unwrap_or(f64::INFINITY);
            out.push(record(
                t,
                tol - gap.max(residual),
                json!({"design": "cyclic_shift", "lambda": lambda, "closed_form_gap": gap, "residual": residual, "iterations": rep.iterations}),
            ));
        } else {
            let n = 12;
            let x = random_complex_matrix(3 * n, n, &mut rng);
            let y = random_complex_matrix(3 * n, 1, &mut rng);
            let inv = Complex64::new(1.0 / (3 * n) as f64, 0.0);
            let gram = x.adjoint() * &x * inv;
            let rhs: Vec<Complex64> = (x.adjoint() * y * inv).iter().copied().collect();
            let r = lasso_gram(&gram, &rhs, lambda, opts)?;
            let residual = lasso_optimality_residual(&gram, &rhs, lambda, &r.v);
            out.push(record(
                t,
                tol - residual,
                json!({"design": "random", "lambda": lambda, "residual": residual, "iterations": r.iterations}),
            ));
        }
    }
    Ok(VerifyReport::new("lasso", seed, out, json!({"tolerance": tol})))
}

/// Largest relative error between analytic gradients and central differences over every
/// weight coordinate (real and imaginary parts) and bias, with a `1e-6` floor on the scale.
pub fn finite_difference_error(w: &SpectralWeights, data: &SpectralDataset, obj: Objective, h: f64) -> Result<f64> {
    let idx: Vec<usize> = (0..data.len()).collect();
    let g = gradients(w, data, &idx, obj, 0)?.grads;
    let f = |w: &SpectralWeights| -> Result<f64> { Ok(gradients(w, data, &idx, obj, 0)?.objective) };
    let mut worst: f64 = 0.0;
    let mut check = |fd: f64, an: f64| {
        worst = worst.max((fd - an).abs() / an.abs().max(fd.abs()).max(1e-6));
    };
    for l in 0..w.depth() {
        for k in 0..w.layers()[l].weights.data().len() {
            for part in [Complex64::new(1.0, 0.0), Complex64::new(0.0, 1.0)] {
                let mut p = w.clone();
                p.layers_mut()[l].weights.data_mut()[k] += part * h;
                let mut m = w.clone();
                m.layers_mut()[l].weights.data_mut()[k] -= part * h;
                let fd = (f(&p)? - f(&m)?) / (2.0 * h);
                let gv = g.layers()[l].weights.data()[k];
                check(fd, if part.re == 1.0 { gv.re } else { gv.im });
            }
        }
        if let Some(b) = &w.layers()[l].bias {
            for k in 0..b.len() {
                let mut p = w.clone();
                p.layers_mut()[l].bias.as_mut().expect("bias")[k] += h;
                let mut m = w.clone();
                m.layers_mut()[l].bias.as_mut().expect("bias")[k] -= h;
                let fd = (f(&p)? - f(&m)?) / (2.0 * h);
                check(fd, g.layers()[l].bias.as_ref().expect("bias")[k]);
            }
        }
    }
    Ok(worst)
}

/// Finite-difference checks of the training gradient for both activations and both losses.
pub fn gradient_suite(seed: u64, tol: f64) -> Result<VerifyReport> {
    let mut out = Vec::new();
    let mut t = 0;
    for act in [Activation::Linear, Activation::Relu] {
        for loss in [Loss::SquaredError, Loss::CrossEntropy] {
            let p = PowerLawParams::new(1.0, 1.0, 1.0, 0.5)?;
            let spec = TeacherSpec {
                outputs: 2,
                rule: if loss == Loss::CrossEntropy {
                    crate::dataset::LabelRule::Classes
                } else {
                    crate::dataset::LabelRule::Regression
                },
                ..TeacherSpec::default()
            };
            let ds = generate_powerlaw(p, Shape3::new(2, 4, 4), 6, seed.wrapping_add(t as u64), spec)?;
            let data = SpectralDataset::from_dataset(&ds);
            let bias = act == Activation::Relu;
            let mut w = init_weights(&[2, 3, 2], 4, 4, seed.wrapping_add(100 + t as u64), InitScheme::default(), act, bias)?;
            if bias {
                let mut rng = trial_rng(seed, t);
                for layer in w.layers_mut() {
                    for b in layer.bias.as_mut().expect("bias").iter_mut() {
                        *b = 0.1 * rng.sample::<f64, _>(StandardNormal);
                    }
                }
            }
            let obj = Objective { loss, weight_decay: 0.05 };
            let err = finite_difference_error(&w, &data, obj, 1e-5)?;
            out.push(record(t, tol - err, json!({"activation": act, "loss": loss, "max_rel_error": err})));
            t += 1;
        }
    }
    Ok(VerifyReport::new("gradients", seed, out, json!({"tolerance": tol, "step": 1e-5})))
}

/// Runs a suite by name with its default tolerances.
pub fn run_suite(name: &str, seed: u64, trials: Option<usize>, thm1_cfg: Option<&Thm1Config>) -> Result<VerifyReport> {
    match name {
        "holder" => holder(seed, trials.unwrap_or(1000), 1e-10),
        "factorization" => factorization(seed, trials.unwrap_or(200), 1e-9),
        "lemmas" => lemmas(seed, trials.unwrap_or(200), 1e-9),
        "lasso" => lasso_suite(seed, trials.unwrap_or(20), 1e-6),
        "ridge" => ridge(seed, &RidgeSuiteConfig::default()),
        "gradients" => gradient_suite(seed, 1e-5),
        "thm1" => {
            let cfg = thm1_cfg.cloned().unwrap_or(Thm1Config { seed, ..Thm1Config::default() });
            thm1(&cfg, trials.unwrap_or(1), 0.02)
        }
        other => invalid(format!(
            "unknown suite {other:?}; expected holder, factorization, thm1, ridge, lasso, lemmas or gradients"
        )),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_suites_pass() {
        for (name, trials) in [("holder", 50), ("factorization", 40), ("lemmas", 20), ("lasso", 6)] {
            let r = run_suite(name, 3, Some(trials), None).unwrap();
            assert!(r.passed, "{name}: {:?}", r.trials.iter().find(|t| !t.passed));
            assert_eq!(r.trials.len(), trials);
        }
        assert!(gradient_suite(1, 1e-5).unwrap().passed);
    }

    #[test]
    fn failures_are_reported_with_replay_details() {
        let r = lemmas(1, 3, -1.0).unwrap();
        assert!(!r.passed && r.failures == 3);
        assert!(r.trials[0].detail.get("weight_seed").is_some());
        assert!(run_suite("nope", 0, None, None).is_err());
    }

    #[test]
    fn suites_are_deterministic() {
        assert_eq!(holder(9, 20, 1e-10).unwrap(), holder(9, 20, 1e-10).unwrap());
    }
}
