//! Frequency sensitivity: mean magnitude of the model's directional derivative
//! along each Fourier basis vector, and its radial curve.

use std::path::Path;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::container::TensorContainer;
use crate::dataset::LabeledDataset;
use crate::error::{invalid, shape_err, Error, Result};
use crate::freqnet::{Activation, EffectivePredictor, SpectralWeights};
use crate::spectral::dft;
use crate::stats::{postprocess_curve, radial_average, FrequencyCurve, PostprocessOptions};
use crate::tensor::{Shape3, SpatialTensor, SpectralTensor};

pub const DEFAULT_MAX_IMAGES: usize = 5000;

/// Anything with a Jacobian with respect to spectral input coordinates.
pub trait SpectralModel {
    fn input_shape(&self) -> Shape3;
    fn output_dim(&self) -> usize;
    /// `d o_k / d x_hat` as `d/dRe + i d/dIm`, one tensor per output.
    fn input_jacobian(&self, x: &SpectralTensor) -> Result<Vec<SpectralTensor>>;
    /// True when the Jacobian does not depend on the input.
    fn is_affine(&self) -> bool;
}

impl SpectralModel for SpectralWeights {
    fn input_shape(&self) -> Shape3 {
        SpectralWeights::input_shape(self)
    }
    fn output_dim(&self) -> usize {
        SpectralWeights::output_dim(self)
    }
    fn input_jacobian(&self, x: &SpectralTensor) -> Result<Vec<SpectralTensor>> {
        SpectralWeights::input_jacobian(self, x)
    }
    fn is_affine(&self) -> bool {
        self.activation() == Activation::Linear
    }
}

impl SpectralModel for EffectivePredictor {
    fn input_shape(&self) -> Shape3 {
        EffectivePredictor::input_shape(self)
    }
    fn output_dim(&self) -> usize {
        EffectivePredictor::output_dim(self)
    }
    fn input_jacobian(&self, x: &SpectralTensor) -> Result<Vec<SpectralTensor>> {
        let s = self.input_shape();
        if x.shape() != s {
            return shape_err(format!("input shape {} does not match predictor {}", x.shape(), s));
        }
        (0..self.output_dim())
            .map(|k| {
                let data: Vec<Complex64> = (0..s.len())
                    .map(|p| {
                        let c = p / s.plane();
                        let i = (p % s.plane()) / s.width;
                        self.v.get(k, i, p % s.width, c).conj()
                    })
                    .collect();
                SpectralTensor::new(s, data)
            })
            .collect()
    }
    fn is_affine(&self) -> bool {
        true
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SensitivityMap {
    pub values: SpatialTensor,
    pub n_images: usize,
}

impl SensitivityMap {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let s = self.values.shape();
        TensorContainer::f64(
            vec![s.channels, s.height, s.width],
            self.values.data().to_vec(),
            json!({
                "kind": "sensitivity_map",
                "n_images": self.n_images,
                "norm": "complex directional derivative, l2 over outputs",
            }),
        )?
        .save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let c = TensorContainer::load(path)?;
        if c.shape.len() != 3 {
            return Err(Error::Format(format!("sensitivity map must be 3-D, got {:?}", c.shape)));
        }
        let n_images = c.metadata.get("n_images").and_then(|v| v.as_u64()).unwrap_or(0) as usize;
        let values = SpatialTensor::new(Shape3::new(c.shape[0], c.shape[1], c.shape[2]), c.as_f64()?.to_vec())?;
        Ok(Self { values, n_images })
    }
}

fn jacobian_norms(model: &dyn SpectralModel, x: &SpectralTensor) -> Result<Vec<f64>> {
    let jac = model.input_jacobian(x)?;
    let mut acc = vec![0.0; x.shape().len()];
    for row in &jac {
        for (a, g) in acc.iter_mut().zip(row.data()) {
            *a += g.norm_sqr();
        }
    }
    Ok(acc.into_iter().map(f64::sqrt).collect())
}

/// Mean over the first `min(|ds|, max_images)` images of `sqrt(sum_k |d o_k / d x_cij|^2)`.
pub fn sensitivity_map(model: &dyn SpectralModel, ds: &LabeledDataset, max_images: usize) -> Result<SensitivityMap> {
    let s = model.input_shape();
    if ds.shape() != s {
        return shape_err(format!("dataset shape {} does not match model input {}", ds.shape(), s));
    }
    let n = ds.len().min(max_images);
    if n == 0 {
        return invalid("sensitivity needs at least one image");
    }
    let mut acc = vec![0.0; s.len()];
    if model.is_affine() {
        acc = jacobian_norms(model, &dft(&ds.images[0]))?;
    } else {
        for img in &ds.images[..n] {
            for (a, v) in acc.iter_mut().zip(jacobian_norms(model, &dft(img))?) {
                *a += v;
            }
        }
        acc.iter_mut().for_each(|a| *a /= n as f64);
    }
    Ok(SensitivityMap {
        values: SpatialTensor::new(s, acc)?,
        n_images: n,
    })
}

/// Radial average followed by the shared curve post-processing.
pub fn sensitivity_curve(map: &SensitivityMap, modular: bool, opts: PostprocessOptions) -> Result<FrequencyCurve> {
    postprocess_curve(&radial_average(&map.values, modular), opts)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Alignment {
    pub spearman: f64,
    pub distance: f64,
}

/// Ranks starting at 1, ties sharing their average rank.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut k = 0;
    while k < idx.len() {
        let mut e = k;
        while e + 1 < idx.len() && values[idx[e + 1]] == values[idx[k]] {
            e += 1;
        }
        let r = (k + e) as f64 / 2.0 + 1.0;
        for &i in &idx[k..=e] {
            ranks[i] = r;
        }
        k = e + 1;
    }
    ranks
}

/// Spearman correlation; `NaN` when either side is constant.
pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    let (ra, rb) = (average_ranks(a), average_ranks(b));
    let n = ra.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let mut sab = 0.0;
    let mut saa = 0.0;
    let mut sbb = 0.0;
    for (x, y) in ra.iter().zip(&rb) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma).powi(2);
        sbb += (y - mb).powi(2);
    }
    sab / (saa * sbb).sqrt()
}

/// Spearman correlation and Euclidean distance between two curves on one grid.
pub fn curve_alignment(model_curve: &FrequencyCurve, data_curve: &FrequencyCurve) -> Result<Alignment> {
    if !model_curve.same_grid(data_curve) {
        return shape_err("curves are on different radius grids");
    }
    if model_curve.len() < 2 {
        return invalid("alignment needs at least two radii");
    }
    let distance = model_curve
        .values
        .iter()
        .zip(&data_curve.values)
        .map(|(a, b)| (a - b).powi(2))
        .sum::<f64>()
        .sqrt();
    Ok(Alignment {
        spearman: spearman(&model_curve.values, &data_curve.values),
        distance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate_powerlaw, PowerLawParams, TeacherSpec};
    use crate::freqnet::{init_weights, InitScheme};
    use crate::rng::stream_rng;
    use crate::solvers::{ridge_diagonal, DiagonalSpectrum};
    use crate::tensor::ComplexKernel;
    use proptest::prelude::*;
    use rand::seq::SliceRandom;
    use rand::Rng;

    fn data(n: usize, s: Shape3, seed: u64) -> LabeledDataset {
        let p = PowerLawParams::new(1.0, 2.0, 2.0, 1.0).unwrap();
        let spec = TeacherSpec {
            outputs: 3,
            ..TeacherSpec::default()
        };
        generate_powerlaw(p, s, n, seed, spec).unwrap()
    }

    fn net(act: Activation, seed: u64) -> SpectralWeights {
        init_weights(&[2, 3, 3], 4, 4, seed, InitScheme::default(), act, act == Activation::Relu).unwrap()
    }

    #[test]
    fn linear_map_is_the_effective_predictor_column_norm() {
        let w = net(Activation::Linear, 1);
        let ds = data(5, Shape3::new(2, 4, 4), 2);
        let m = sensitivity_map(&w, &ds, 100).unwrap();
        let v = w.effective_predictor().unwrap();
        for c in 0..2 {
            for i in 0..4 {
                for j in 0..4 {
                    let want = (0..3).map(|k| v.v.get(k, i, j, c).norm_sqr()).sum::<f64>().sqrt();
                    assert!((m.values.get(c, i, j) - want).abs() < 1e-9 * want.max(1.0));
                }
            }
        }
        let mp = sensitivity_map(&v, &ds, 100).unwrap();
        for (a, b) in m.values.data().iter().zip(mp.values.data()) {
            assert!((a - b).abs() < 1e-9 * b.max(1.0));
        }
        let other = data(7, Shape3::new(2, 4, 4), 99);
        let m2 = sensitivity_map(&w, &other, 100).unwrap();
        for (a, b) in m.values.data().iter().zip(m2.values.data()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let eps = 1e-5;
        for act in [Activation::Linear, Activation::Relu] {
            let w = net(act, 3);
            let ds = data(2, Shape3::new(2, 4, 4), 4);
            let x = dft(&ds.images[0]);
            let jac = SpectralModel::input_jacobian(&w, &x).unwrap();
            let base = w.forward_unchecked(&x).unwrap();
            let mut rng = stream_rng(5, 0);
            for _ in 0..12 {
                let p = rng.random_range(0..x.shape().len());
                for dir in [Complex64::new(1.0, 0.0), Complex64::new(0.0, 1.0)] {
                    let mut xp = x.clone();
                    xp.data_mut()[p] += dir * eps;
                    let out = w.forward_unchecked(&xp).unwrap();
                    for k in 0..3 {
                        let fd = (out[k] - base[k]) / eps;
                        let g = jac[k].data()[p];
                        let an = if dir.re != 0.0 { g.re } else { g.im };
                        let scale = an.abs().max(fd.abs()).max(1e-3);
                        assert!((fd - an).abs() < 1e-4 * scale, "{act:?} p={p} k={k}: {fd} vs {an}");
                    }
                }
            }
        }
    }

    #[test]
    fn zero_network_has_zero_map() {
        let w = init_weights(&[2, 3, 3], 4, 4, 0, InitScheme::Zeros, Activation::Relu, true).unwrap();
        let m = sensitivity_map(&w, &data(4, Shape3::new(2, 4, 4), 1), 10).unwrap();
        assert!(m.values.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn relu_map_is_shuffle_invariant_and_respects_max_images() {
        let w = net(Activation::Relu, 7);
        let ds = data(9, Shape3::new(2, 4, 4), 8);
        let m = sensitivity_map(&w, &ds, 100).unwrap();
        assert_eq!(m.n_images, 9);
        let mut order: Vec<usize> = (0..9).collect();
        order.shuffle(&mut stream_rng(1, 1));
        let shuffled = ds.subset(&order).unwrap();
        let m2 = sensitivity_map(&w, &shuffled, 100).unwrap();
        for (a, b) in m.values.data().iter().zip(m2.values.data()) {
            assert!((a - b).abs() < 1e-12 * a.max(1.0));
        }
        assert_eq!(sensitivity_map(&w, &ds, 4).unwrap().n_images, 4);
        assert!(sensitivity_map(&net(Activation::Relu, 1), &data(2, Shape3::new(1, 4, 4), 1), 10).is_err());
    }

    #[test]
    fn map_round_trips_through_container() {
        let w = net(Activation::Linear, 2);
        let m = sensitivity_map(&w, &data(3, Shape3::new(2, 4, 4), 3), 10).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.stc");
        m.save(&p).unwrap();
        assert_eq!(SensitivityMap::load(&p).unwrap(), m);
    }

    #[test]
    fn constant_map_gives_constant_curve() {
        let s = Shape3::new(1, 8, 8);
        let m = SensitivityMap {
            values: SpatialTensor::from_fn(s, |_, _, _| 2.5),
            n_images: 1,
        };
        let curve = sensitivity_curve(&m, true, PostprocessOptions::default()).unwrap();
        let r = &curve.radii;
        let want = (1.0 / (r[r.len() - 1] - r[0])).ln();
        assert!(curve.values.iter().all(|v| (v - want).abs() < 1e-12));
    }

    #[test]
    fn ridge_shrinkage_curve_decreases() {
        let s = Shape3::new(1, 16, 16);
        let p = PowerLawParams::new(1.0, 2.0, 2.0, 1.0).unwrap();
        let tau = DiagonalSpectrum::new(p.tau_map(s)).unwrap();
        let mut v = ComplexKernel::zeros(1, 16, 16, 1);
        v.data_mut().iter_mut().for_each(|z| *z = Complex64::new(1.0, 0.0));
        let pred = ridge_diagonal(&EffectivePredictor { v }, &tau, 0.1).unwrap();
        let m = sensitivity_map(&pred, &data(1, s, 0), 1).unwrap();
        let curve = sensitivity_curve(&m, true, PostprocessOptions::default()).unwrap();
        let part = curve.restrict(|r| (1.0..=4.0).contains(&r));
        assert!(part.values.windows(2).all(|w| w[1] <= w[0] + 1e-12), "{:?}", part.values);
        let again = sensitivity_curve(&m, true, PostprocessOptions::default()).unwrap();
        assert_eq!(curve, again);
    }

    #[test]
    fn alignment_extremes() {
        let grid = |values: Vec<f64>| FrequencyCurve {
            radii: (0..values.len()).map(|r| r as f64).collect(),
            counts: vec![1; values.len()],
            values,
            stderr: None,
            modular: true,
        };
        let a = grid(vec![3.0, 1.0, 2.0, 5.0]);
        let al = curve_alignment(&a, &a).unwrap();
        assert_eq!(al.spearman, 1.0);
        assert_eq!(al.distance, 0.0);
        let b = grid(vec![-3.0, -1.0, -2.0, -5.0]);
        assert!((curve_alignment(&a, &b).unwrap().spearman + 1.0).abs() < 1e-15);
        let c = grid(vec![1.0, 2.0]);
        assert!(curve_alignment(&a, &c).is_err());
        assert_eq!(average_ranks(&[2.0, 1.0, 2.0, 3.0]), vec![2.5, 1.0, 2.5, 4.0]);
    }

    /// With 40 radii, |rho| for independent random orderings stays below 0.35 in at least 95% of draws.
    #[test]
    fn permutation_null() {
        let mut rng = stream_rng(11, 0);
        let n = 40;
        let base: Vec<f64> = (0..n).map(|k| k as f64).collect();
        let trials = 2000;
        let mut inside = 0;
        for _ in 0..trials {
            let mut p = base.clone();
            p.shuffle(&mut rng);
            inside += usize::from(spearman(&base, &p).abs() < 0.35);
        }
        assert!(inside as f64 / trials as f64 >= 0.95, "{inside}");
    }

    proptest! {
        #[test]
        fn spearman_is_invariant_to_monotone_maps(v in proptest::collection::vec(-10.0f64..10.0, 3..30), seed in any::<u64>()) {
            let mut rng = stream_rng(seed, 0);
            let w: Vec<f64> = (0..v.len()).map(|_| rng.random::<f64>()).collect();
            let r1 = spearman(&v, &w);
            let vt: Vec<f64> = v.iter().map(|x| x.exp() * 3.0 + 1.0).collect();
            let r2 = spearman(&vt, &w);
            if r1.is_finite() {
                prop_assert!((r1 - r2).abs() < 1e-12);
                prop_assert!(r1.abs() <= 1.0 + 1e-12);
            }
        }
    }
}
