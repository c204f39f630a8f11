use freqsens::dataset::{
    generate_powerlaw, high_pass_dataset, load_dataset, normalize, save_dataset, HighPassSpec, PowerLawParams, TeacherSpec,
};
use freqsens::freqnet::{init_weights, Activation, InitScheme};
use freqsens::sensitivity::sensitivity_map;
use freqsens::stats::spectral_std_map;
use freqsens::tensor::Shape3;

fn data(n: usize, seed: u64) -> freqsens::dataset::LabeledDataset {
    let p = PowerLawParams::new(1.0, 2.0, 2.0, 0.5).unwrap();
    generate_powerlaw(p, Shape3::new(1, 8, 8), n, seed, TeacherSpec::default()).unwrap()
}

#[test]
fn saved_datasets_load_back_identically() {
    let dir = tempfile::tempdir().unwrap();
    let ds = data(12, 3);
    save_dataset(&ds, dir.path(), "train", serde_json::json!({"note": "x"})).unwrap();
    let back = load_dataset(dir.path(), "train").unwrap();
    assert_eq!(back.images, ds.images);
    assert_eq!(back.labels, ds.labels);
}

#[test]
fn high_pass_then_normalize_keeps_the_mask_empty() {
    let ds = data(64, 1);
    let spec = HighPassSpec::new(1);
    let (hp, report) = high_pass_dataset(&ds, spec).unwrap();
    assert_eq!(report.removed_indices, 9);
    let (norm, _) = normalize(&hp).unwrap();
    let std = spectral_std_map(&norm).unwrap().values;
    for i in 0..8 {
        for j in 0..8 {
            let v = std.get(0, i, j);
            if spec.is_masked(i, j, 8, 8) {
                assert!(v < 1e-12, "({i},{j}) = {v}");
            } else {
                assert!(v > 1e-3, "({i},{j}) = {v}");
            }
        }
    }
}

#[test]
fn linear_net_sensitivity_is_its_predictor_magnitude() {
    let ds = data(5, 2);
    let w = init_weights(&[1, 3, 2], 8, 8, 9, InitScheme::default(), Activation::Linear, false).unwrap();
    let v = w.effective_predictor().unwrap();
    let map = sensitivity_map(&w, &ds, 100).unwrap();
    assert_eq!(map.n_images, 5);
    for i in 0..8 {
        for j in 0..8 {
            let want = (0..2).map(|k| v.v.get(k, i, j, 0).norm_sqr()).sum::<f64>().sqrt();
            let got = map.values.get(0, i, j);
            assert!((got - want).abs() <= 1e-10 * want.max(1.0), "({i},{j}): {got} vs {want}");
        }
    }
}
