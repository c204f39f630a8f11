use std::fs;
use std::path::{Path, PathBuf};

use freqsens::dataset::{
    apply_normalization, fit_normalization, high_pass_dataset, load_cifar10, load_dataset, save_dataset, Cifar10Split,
    HighPassSpec, LabeledDataset, PowerLawGenerator,
};
use freqsens::experiments::{curve_distance, rank_alignment, Thm1Config};
use freqsens::freqnet::{
    history_csv, init_weights, load_checkpoint, load_weights, save_checkpoint, SpectralDataset, SpectralWeights,
    TrainConfig, TrainState,
};
use freqsens::sensitivity::{sensitivity_map, SensitivityMap};
use freqsens::stats::{
    covariance_batched, data_std_curve, fit_power_law, fmt_f64, postprocess_curve, radial_average, spectral_std_map,
    write_curve_csv, CovarianceDecayCurve, PostprocessOptions,
};
use freqsens::container::TensorContainer;
use freqsens::verify::{run_suite, VerifyReport};
use serde_json::{json, Value};

use crate::config::{self, Loaded, RunConfig, Source};
use crate::{json as jsonout, CliError, CliResult};

fn create_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

fn write_text(path: &Path, text: &str) -> CliResult<()> {
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

pub fn run_dir(cfg: &RunConfig) -> PathBuf {
    cfg.outputs.dir.join(&cfg.outputs.name)
}

/// Processed train/validation splits and the sidecar describing how they were made.
pub struct Splits {
    pub train: LabeledDataset,
    pub val: LabeledDataset,
    pub sidecar: Value,
    teacher: Option<TensorContainer>,
}

fn leading(ds: LabeledDataset, n: Option<usize>) -> CliResult<LabeledDataset> {
    match n {
        Some(n) if n < ds.len() => Ok(ds.subset(&(0..n).collect::<Vec<_>>())?),
        _ => Ok(ds),
    }
}

/// Builds the configured splits, applies the high-pass mask, then normalizes with
/// statistics fit on the training split.
pub fn build_dataset(cfg: &RunConfig) -> CliResult<Splits> {
    let (mut train, mut val, mut sidecar, teacher) = match &cfg.dataset.source {
        Source::Powerlaw(p) => {
            let shape = freqsens::tensor::Shape3::new(p.channels, p.height, p.width);
            let gen = PowerLawGenerator::new(p.params()?, shape, cfg.seed, p.teacher)?;
            let train = gen.dataset(0, p.n_train)?;
            let val = gen.dataset(p.n_train, p.n_val)?;
            let w = &gen.teacher.weights;
            let [k, h, wd, c] = w.dims();
            let teacher = TensorContainer::f64(vec![k, h, wd, c], w.data().to_vec(), json!({"kind": "linear_teacher"}))?;
            let sidecar = json!({
                "source": "powerlaw",
                "seed": cfg.seed,
                "shape": [p.channels, p.height, p.width],
                "tau_law": p.params()?,
                "teacher": p.teacher,
                "n_train": p.n_train,
                "n_val": p.n_val,
            });
            (train, val, sidecar, Some(teacher))
        }
        Source::Cifar10(c) => {
            let train = leading(load_cifar10(&c.dir, Cifar10Split::Train)?, c.n_train)?;
            let val = leading(load_cifar10(&c.dir, Cifar10Split::Test)?, c.n_val)?;
            let sidecar = json!({"source": "cifar10", "seed": cfg.seed, "n_train": train.len(), "n_val": val.len()});
            (train, val, sidecar, None)
        }
        Source::Files(f) => {
            let train = load_dataset(&f.dir, "train")?;
            let val = load_dataset(&f.dir, "val")?;
            let sidecar = json!({"source": "files", "seed": cfg.seed, "n_train": train.len(), "n_val": val.len()});
            (train, val, sidecar, None)
        }
    };
    if let Some(t) = cfg.dataset.highpass {
        let hp = HighPassSpec::new(t);
        let (tr, report) = high_pass_dataset(&train, hp)?;
        train = tr;
        val = high_pass_dataset(&val, hp)?.0;
        sidecar["highpass"] = serde_json::to_value(report).expect("plain struct");
    }
    if cfg.dataset.normalize {
        let stats = fit_normalization(&train)?;
        train = apply_normalization(&train, &stats)?;
        val = apply_normalization(&val, &stats)?;
        sidecar["normalization"] = serde_json::to_value(stats).expect("plain struct");
    }
    Ok(Splits {
        train,
        val,
        sidecar,
        teacher,
    })
}

fn save_splits(s: &Splits, dir: &Path) -> CliResult<()> {
    create_dir(dir)?;
    save_dataset(&s.train, dir, "train", s.sidecar.clone())?;
    save_dataset(&s.val, dir, "val", s.sidecar.clone())?;
    if let Some(t) = &s.teacher {
        t.save(dir.join("teacher.stc"))?;
    }
    jsonout::write(&dir.join("dataset.json"), &s.sidecar)
}

/// Writes `<run>/data/{train,val}_{images,labels}.stc`, `teacher.stc` and `dataset.json`.
pub fn gen(loaded: &Loaded) -> CliResult<PathBuf> {
    let cfg = &loaded.config;
    let splits = build_dataset(cfg)?;
    let dir = run_dir(cfg).join("data");
    save_splits(&splits, &dir)?;
    Ok(dir)
}

pub struct StatsArgs {
    pub dataset: PathBuf,
    pub split: String,
    pub modular: bool,
    pub highpass: Option<usize>,
    pub covariance: Option<usize>,
    pub fit_r_max: Option<f64>,
    pub out: Option<PathBuf>,
}

fn decay_csv(c: &CovarianceDecayCurve) -> String {
    let mut s = String::from("distance,value,count\n");
    for k in 0..c.distances.len() {
        s += &format!("{},{},{}\n", fmt_f64(c.distances[k]), fmt_f64(c.values[k]), c.counts[k]);
    }
    s
}

/// Std map, radial curve, power-law fit and optional covariance decay curves of one split.
pub fn stats(a: &StatsArgs) -> CliResult<PathBuf> {
    let mut ds = load_dataset(&a.dataset, &a.split)?;
    let mut summary = json!({"split": a.split, "modular": a.modular, "images": ds.len()});
    if let Some(t) = a.highpass {
        let (hp, report) = high_pass_dataset(&ds, HighPassSpec::new(t))?;
        ds = hp;
        summary["highpass"] = serde_json::to_value(report).expect("plain struct");
    }
    let out = a.out.clone().unwrap_or_else(|| a.dataset.join(format!("stats_{}", a.split)));
    create_dir(&out)?;
    let map = spectral_std_map(&ds)?;
    let s = map.values.shape();
    TensorContainer::f64(
        vec![s.channels, s.height, s.width],
        map.values.data().to_vec(),
        json!({"kind": "spectral_std_map", "sample_count": map.sample_count}),
    )?
    .save(out.join("std_map.stc"))?;
    let curve = radial_average(&map.values, a.modular);
    write_curve_csv(&curve, out.join("std_curve.csv"))?;
    summary["power_law_fit"] = match fit_power_law(&curve, a.fit_r_max) {
        Ok(fit) => serde_json::to_value(fit).expect("plain struct"),
        Err(e) => json!({"error": e.to_string()}),
    };
    if let Some(batch) = a.covariance {
        let cov = covariance_batched(&ds.spectra(), batch)?;
        write_text(&out.join("covariance_decay_modular.csv"), &decay_csv(&cov.modular))?;
        write_text(&out.join("covariance_decay_plain.csv"), &decay_csv(&cov.plain))?;
        summary["covariance_samples"] = json!(cov.sample_count);
    }
    jsonout::write(&out.join("stats.json"), &summary)?;
    Ok(out)
}

fn train_config(cfg: &RunConfig) -> CliResult<TrainConfig> {
    cfg.train
        .clone()
        .ok_or_else(|| CliError::Config("the config has no train section".into()))
}

/// Trains in `<run>/` from the configured data: `checkpoint/`, `history.csv`, `metrics.json`.
/// With `resume`, continues from an existing checkpoint whose training config matches.
pub fn train(loaded: &Loaded, resume: bool, until_epoch: Option<usize>) -> CliResult<(PathBuf, SpectralWeights)> {
    let cfg = &loaded.config;
    let tcfg = train_config(cfg)?;
    let splits = build_dataset(cfg)?;
    train_on(cfg, &tcfg, &splits, resume, until_epoch)
}

fn train_on(
    cfg: &RunConfig,
    tcfg: &TrainConfig,
    splits: &Splits,
    resume: bool,
    until_epoch: Option<usize>,
) -> CliResult<(PathBuf, SpectralWeights)> {
    let dir = run_dir(cfg);
    let ckpt = dir.join("checkpoint");
    let shape = splits.train.shape();
    let widths = cfg.model.channel_widths(shape.channels, splits.train.labels.output_dim())?;
    let mut state = if resume && ckpt.join("state.json").exists() {
        let (state, saved) = load_checkpoint(&ckpt)?;
        if &saved != tcfg {
            return Err(CliError::Config(format!(
                "checkpoint in {} was written with a different train section",
                ckpt.display()
            )));
        }
        if state.weights.widths() != widths {
            return Err(CliError::Config("checkpoint widths differ from the model section".into()));
        }
        state
    } else {
        let w0 = init_weights(
            &widths,
            shape.height,
            shape.width,
            cfg.seed,
            cfg.model.init,
            tcfg.activation,
            tcfg.use_bias(),
        )?;
        TrainState::new(w0, tcfg)?
    };
    let train = SpectralDataset::from_dataset(&splits.train);
    let val = SpectralDataset::from_dataset(&splits.val);
    state.run(&train, &val, tcfg, until_epoch, &mut |_| Ok(()))?;
    create_dir(&dir)?;
    save_checkpoint(&state, tcfg, &ckpt)?;
    write_text(&dir.join("history.csv"), &history_csv(&state.history))?;
    let last = state.history.last();
    jsonout::write(
        &dir.join("metrics.json"),
        &json!({
            "widths": widths,
            "epochs": state.epoch,
            "finished": state.finished,
            "final_val_metric": last.map(|r| r.val_metric),
            "final_objective": last.map(|r| r.objective),
            "best_val_metric": state.best,
            "lr": state.lr,
            "resymmetrized": state.resymmetrized,
        }),
    )?;
    Ok((dir, state.weights))
}

fn load_model(path: &Path) -> CliResult<SpectralWeights> {
    if path.join("state.json").exists() {
        Ok(load_checkpoint(path)?.0.weights)
    } else {
        Ok(load_weights(path)?)
    }
}

pub struct SenseArgs {
    pub checkpoint: PathBuf,
    pub dataset: PathBuf,
    pub split: String,
    pub max_images: usize,
    pub modular: bool,
    pub smooth: usize,
    pub align: bool,
    pub out: Option<PathBuf>,
}

/// Sensitivity map and curves of `w` on `ds`, aligned against `data_curve_from` when given.
fn sense_into(
    w: &SpectralWeights,
    ds: &LabeledDataset,
    align_with: Option<&LabeledDataset>,
    max_images: usize,
    modular: bool,
    post: PostprocessOptions,
    out: &Path,
) -> CliResult<Value> {
    create_dir(out)?;
    let map: SensitivityMap = sensitivity_map(w, ds, max_images)?;
    map.save(out.join("sensitivity_map.stc"))?;
    let raw = radial_average(&map.values, modular);
    write_curve_csv(&raw, out.join("sensitivity_curve.csv"))?;
    let mut summary = json!({"n_images": map.n_images, "modular": modular, "postprocess": post});
    match postprocess_curve(&raw, post) {
        Ok(c) => write_curve_csv(&c, out.join("sensitivity_curve_post.csv"))?,
        Err(e) => summary["postprocess_error"] = json!(e.to_string()),
    }
    if let Some(data) = align_with {
        let data_curve = data_std_curve(data, modular)?;
        write_curve_csv(&data_curve, out.join("data_std_curve.csv"))?;
        summary["alignment"] = json!({
            "spearman": rank_alignment(&raw, &data_curve)?,
            "distance": curve_distance(&raw, &data_curve).ok(),
        });
    }
    jsonout::write(&out.join("sensitivity.json"), &summary)?;
    Ok(summary)
}

/// Writes `sensitivity_map.stc`, raw and post-processed curve CSVs and `sensitivity.json`;
/// alignment is against the std curve of the dataset's training split.
pub fn sense(a: &SenseArgs) -> CliResult<PathBuf> {
    let w = load_model(&a.checkpoint)?;
    let ds = load_dataset(&a.dataset, &a.split)?;
    let train = if a.align { Some(load_dataset(&a.dataset, "train")?) } else { None };
    let out = a.out.clone().unwrap_or_else(|| a.checkpoint.join(format!("sensitivity_{}", a.split)));
    let post = PostprocessOptions {
        smooth_halfwidth: a.smooth,
        ..PostprocessOptions::default()
    };
    sense_into(&w, &ds, train.as_ref(), a.max_images, a.modular, post, &out)?;
    Ok(out)
}

pub struct VerifyArgs {
    pub suite: String,
    pub seed: u64,
    pub trials: Option<usize>,
    pub dims: Option<Vec<usize>>,
    pub depth: Option<usize>,
    pub out: Option<PathBuf>,
}

fn thm1_config(a: &VerifyArgs) -> CliResult<Option<Thm1Config>> {
    if a.dims.is_none() && a.depth.is_none() {
        return Ok(None);
    }
    let mut cfg = Thm1Config {
        seed: a.seed,
        ..Thm1Config::default()
    };
    if let Some(d) = a.depth {
        cfg.depth = d;
    }
    if let Some(dims) = &a.dims {
        match dims.as_slice() {
            [c, h, k] => {
                cfg.channels = *c;
                cfg.hidden = *h;
                cfg.outputs = *k;
            }
            _ => return Err(CliError::Config("--dims expects C,C1,K".into())),
        }
    }
    if cfg.depth == 0 {
        return Err(CliError::Config("--L must be positive".into()));
    }
    Ok(Some(cfg))
}

/// Runs a suite and writes its report; a failed suite is an error carrying the report path.
pub fn verify(a: &VerifyArgs) -> CliResult<VerifyReport> {
    let thm1 = thm1_config(a)?;
    if thm1.is_some() && a.suite != "thm1" {
        return Err(CliError::Config("--dims and --L only apply to the thm1 suite".into()));
    }
    let report = run_suite(&a.suite, a.seed, a.trials, thm1.as_ref())?;
    let text = jsonout::to_string(&report).map_err(|e| CliError::Io(e.to_string()))?;
    match &a.out {
        Some(p) => write_text(p, &text)?,
        None => print!("{text}"),
    }
    if report.passed {
        Ok(report)
    } else {
        let worst = report.trials.iter().filter(|t| !t.passed).min_by(|x, y| x.margin.total_cmp(&y.margin));
        Err(CliError::Verify(format!(
            "suite {} failed {} of {} trials (seed {}); worst: {}",
            report.suite,
            report.failures,
            report.trials.len(),
            report.seed,
            worst.map_or_else(|| "no trials".to_string(), |t| format!("trial {} {}", t.trial, t.detail))
        )))
    }
}

/// Runs every point of the sweep: data, training and sensitivity under `<dir>/<point>/`,
/// plus `<dir>/sweep.json` listing the points and their results.
pub fn sweep(path: &Path, ov: &config::Overrides) -> CliResult<PathBuf> {
    let base = config::load(path, ov)?;
    let raw = base.raw.clone();
    let points = config::expand_sweep(&raw, &base.config.sweep, &base.config.outputs.name)?;
    let mut rows = Vec::with_capacity(points.len());
    for (point, doc) in points {
        let loaded = config::parse(doc, path, ov)?;
        let cfg = &loaded.config;
        let tcfg = train_config(cfg)?;
        let splits = build_dataset(cfg)?;
        let dir = run_dir(cfg);
        save_splits(&splits, &dir.join("data"))?;
        let (_, w) = train_on(cfg, &tcfg, &splits, false, None)?;
        let ds = match cfg.sensitivity.split.as_str() {
            "train" => &splits.train,
            "val" => &splits.val,
            other => return Err(CliError::Config(format!("sensitivity.split must be train or val, got {other:?}"))),
        };
        let s = sense_into(
            &w,
            ds,
            Some(&splits.train),
            cfg.sensitivity.max_images,
            cfg.sensitivity.modular,
            cfg.sensitivity.postprocess,
            &dir.join("sensitivity"),
        )?;
        let metrics: Value = serde_json::from_str(
            &fs::read_to_string(dir.join("metrics.json")).map_err(|e| CliError::io(&dir, e))?,
        )
        .map_err(|e| CliError::Io(e.to_string()))?;
        rows.push(json!({"name": point.name, "overrides": point.overrides, "metrics": metrics, "sensitivity": s}));
    }
    let out = base.config.outputs.dir.clone();
    create_dir(&out)?;
    jsonout::write(&out.join("sweep.json"), &rows)?;
    Ok(out)
}
