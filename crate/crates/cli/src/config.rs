//! Run configuration: parsing, path resolution, seed and output overrides, sweep expansion.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use freqsens::dataset::{PowerLawParams, TeacherSpec};
use freqsens::freqnet::{InitScheme, TrainConfig};
use freqsens::stats::PostprocessOptions;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::{CliError, CliResult};

/// Overrides `outputs.dir` when set.
pub const OUTPUT_DIR_ENV: &str = "FREQSENS_OUTPUT_DIR";

/// Command-line seed and the output directory taken from [`OUTPUT_DIR_ENV`].
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub output_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub model: ModelConfig,
    pub train: Option<TrainConfig>,
    #[serde(default)]
    pub sensitivity: SensitivityConfig,
    pub outputs: OutputsConfig,
    /// Dotted config path to a list of values, or to `{"logspace"|"linspace": [lo, hi, n]}`.
    #[serde(default)]
    pub sweep: BTreeMap<String, Value>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub source: Source,
    /// High-pass threshold applied before normalization.
    #[serde(default)]
    pub highpass: Option<usize>,
    #[serde(default = "yes")]
    pub normalize: bool,
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    Powerlaw(PowerlawSource),
    Cifar10(Cifar10Source),
    /// Splits written earlier by `gen`.
    Files(FilesSource),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PowerlawSource {
    pub height: usize,
    pub width: usize,
    #[serde(default = "one")]
    pub channels: usize,
    pub gamma: f64,
    pub alpha: f64,
    pub beta: f64,
    #[serde(default)]
    pub dc_variance: f64,
    pub n_train: usize,
    pub n_val: usize,
    #[serde(default)]
    pub teacher: TeacherSpec,
}

fn one() -> usize {
    1
}

impl PowerlawSource {
    pub fn params(&self) -> freqsens::Result<PowerLawParams> {
        PowerLawParams::new(self.gamma, self.alpha, self.beta, self.dc_variance)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Cifar10Source {
    pub dir: PathBuf,
    /// Leading images of the training batches; the rest of the 50000 are dropped.
    #[serde(default)]
    pub n_train: Option<usize>,
    /// Leading images of the test batch used for validation.
    #[serde(default)]
    pub n_val: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FilesSource {
    pub dir: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(default = "two")]
    pub depth: usize,
    /// Width of every hidden layer, unless `widths` lists them individually.
    #[serde(default = "four")]
    pub hidden: usize,
    #[serde(default)]
    pub widths: Option<Vec<usize>>,
    #[serde(default)]
    pub init: InitScheme,
}

fn two() -> usize {
    2
}
fn four() -> usize {
    4
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            depth: 2,
            hidden: 4,
            widths: None,
            init: InitScheme::default(),
        }
    }
}

impl ModelConfig {
    /// Full channel list `[C, hidden..., K]`.
    pub fn channel_widths(&self, channels: usize, outputs: usize) -> CliResult<Vec<usize>> {
        if self.depth == 0 {
            return Err(CliError::Config("model.depth must be positive".into()));
        }
        let hidden = match &self.widths {
            Some(w) if w.len() + 1 != self.depth => {
                return Err(CliError::Config(format!(
                    "model.widths lists {} hidden widths but depth {} needs {}",
                    w.len(),
                    self.depth,
                    self.depth - 1
                )))
            }
            Some(w) => w.clone(),
            None => vec![self.hidden; self.depth - 1],
        };
        let mut out = vec![channels];
        out.extend(hidden);
        out.push(outputs);
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SensitivityConfig {
    #[serde(default = "max_images")]
    pub max_images: usize,
    #[serde(default = "yes")]
    pub modular: bool,
    #[serde(default)]
    pub postprocess: PostprocessOptions,
    /// Split whose images are averaged over.
    #[serde(default = "val")]
    pub split: String,
}

fn max_images() -> usize {
    freqsens::sensitivity::DEFAULT_MAX_IMAGES
}
fn val() -> String {
    "val".into()
}

impl Default for SensitivityConfig {
    fn default() -> Self {
        Self {
            max_images: max_images(),
            modular: true,
            postprocess: PostprocessOptions::default(),
            split: val(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputsConfig {
    pub dir: PathBuf,
    #[serde(default = "run_name")]
    pub name: String,
}

fn run_name() -> String {
    "run".into()
}

/// A parsed config plus the raw document it came from, for sweeps and sidecars.
#[derive(Debug, Clone)]
pub struct Loaded {
    pub config: RunConfig,
    pub raw: Value,
}

pub fn read_document(path: &Path) -> CliResult<Value> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let de = &mut serde_json::Deserializer::from_str(&text);
    serde_path_to_error::deserialize(de).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

/// Parses a document, naming the offending field path on failure, then applies the seed
/// override, resolves relative paths against the config's directory and applies the
/// output-dir override.
pub fn parse(raw: Value, origin: &Path, ov: &Overrides) -> CliResult<Loaded> {
    let mut raw = raw;
    if raw.pointer("/train/seed").is_some() {
        return Err(CliError::Config(format!(
            "{}: train.seed is not accepted; set the top-level seed instead",
            origin.display()
        )));
    }
    if let Some(s) = ov.seed {
        raw.as_object_mut()
            .ok_or_else(|| CliError::Config(format!("{}: config must be a JSON object", origin.display())))?
            .insert("seed".into(), Value::from(s));
    }
    let mut config: RunConfig = serde_path_to_error::deserialize(raw.clone())
        .map_err(|e| CliError::Config(format!("{}: at `{}`: {}", origin.display(), e.path(), e.inner())))?;
    let base = origin.parent().unwrap_or(Path::new("."));
    let resolve = |p: &mut PathBuf| {
        if p.is_relative() {
            *p = base.join(&*p);
        }
    };
    match &mut config.dataset.source {
        Source::Cifar10(c) => resolve(&mut c.dir),
        Source::Files(f) => resolve(&mut f.dir),
        Source::Powerlaw(_) => {}
    }
    resolve(&mut config.outputs.dir);
    if let Some(dir) = &ov.output_dir {
        config.outputs.dir = dir.clone();
    }
    if let Some(t) = config.train.as_mut() {
        t.seed = config.seed;
    }
    Ok(Loaded { config, raw })
}

pub fn load(path: &Path, ov: &Overrides) -> CliResult<Loaded> {
    parse(read_document(path)?, path, ov)
}

/// One point of a sweep: the overrides applied and the run name they produce.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepPoint {
    pub name: String,
    pub overrides: BTreeMap<String, Value>,
}

fn expand_values(key: &str, spec: &Value) -> CliResult<Vec<Value>> {
    let bad = |msg: &str| CliError::Config(format!("sweep.{key}: {msg}"));
    match spec {
        Value::Array(v) if !v.is_empty() => Ok(v.clone()),
        Value::Array(_) => Err(bad("empty value list")),
        Value::Object(m) if m.len() == 1 => {
            let (kind, args) = m.iter().next().expect("one entry");
            let args: [f64; 3] =
                serde_json::from_value(args.clone()).map_err(|_| bad("expects [lo, hi, count]"))?;
            let n = args[2];
            if !(n >= 1.0 && n.fract() == 0.0) {
                return Err(bad("count must be a positive integer"));
            }
            let n = n as usize;
            let lin = |k: usize| {
                if n == 1 {
                    args[0]
                } else {
                    args[0] + (args[1] - args[0]) * k as f64 / (n - 1) as f64
                }
            };
            match kind.as_str() {
                "linspace" => Ok((0..n).map(|k| Value::from(lin(k))).collect()),
                "logspace" => Ok((0..n).map(|k| Value::from(10f64.powf(lin(k)))).collect()),
                other => Err(bad(&format!("unknown generator {other:?}; use linspace or logspace"))),
            }
        }
        _ => Err(bad("expects a list of values or {\"logspace\": [lo, hi, n]}")),
    }
}

fn set_path(doc: &mut Value, key: &str, value: Value) -> CliResult<()> {
    let mut cur = doc;
    let parts: Vec<&str> = key.split('.').collect();
    for (k, part) in parts.iter().enumerate() {
        let obj = cur
            .as_object_mut()
            .ok_or_else(|| CliError::Config(format!("sweep.{key}: `{}` is not an object", parts[..k].join("."))))?;
        if k + 1 == parts.len() {
            obj.insert((*part).into(), value);
            return Ok(());
        }
        cur = obj.entry(*part).or_insert_with(|| Value::Object(Default::default()));
    }
    Ok(())
}

fn label(v: &Value) -> String {
    match v {
        Value::Number(n) => match n.as_f64() {
            // Twelve significant digits keep names short; `10^-5` reads `1e-5`.
            Some(f) if n.is_f64() => format!("{:e}", format!("{f:.11e}").parse::<f64>().unwrap_or(f)),
            _ => n.to_string(),
        },
        Value::String(s) => s.clone(),
        other => other.to_string(),
    }
    .chars()
    .map(|c| if c.is_ascii_alphanumeric() || "+-.".contains(c) { c } else { '_' })
    .collect()
}

/// Cartesian product of the sweep section in key order, each point as a standalone config
/// document with the sweep removed and the name suffixed by `_{leaf}{value}` per key.
pub fn expand_sweep(raw: &Value, sweep: &BTreeMap<String, Value>, base_name: &str) -> CliResult<Vec<(SweepPoint, Value)>> {
    let mut doc = raw.clone();
    if let Some(obj) = doc.as_object_mut() {
        obj.remove("sweep");
    }
    let axes: Vec<(&String, Vec<Value>)> = sweep
        .iter()
        .map(|(k, v)| expand_values(k, v).map(|vals| (k, vals)))
        .collect::<CliResult<_>>()?;
    let mut points = vec![(
        SweepPoint {
            name: base_name.to_string(),
            overrides: BTreeMap::new(),
        },
        doc,
    )];
    for (key, values) in axes {
        let leaf = key.rsplit('.').next().unwrap_or(key);
        let mut next = Vec::with_capacity(points.len() * values.len());
        for (point, doc) in &points {
            for v in &values {
                let mut d = doc.clone();
                set_path(&mut d, key, v.clone())?;
                let mut p = point.clone();
                p.name = format!("{}_{leaf}{}", p.name, label(v));
                p.overrides.insert(key.clone(), v.clone());
                next.push((p, d));
            }
        }
        points = next;
    }
    for (p, d) in &mut points {
        set_path(d, "outputs.name", Value::from(p.name.clone()))?;
    }
    Ok(points)
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn base() -> Value {
        json!({
            "seed": 3,
            "dataset": {"source": {"powerlaw": {"height": 8, "width": 8, "gamma": 1.0, "alpha": 1.0, "beta": 1.0, "n_train": 10, "n_val": 5}}},
            "train": {"weight_decay": 0.001, "lr": 0.01},
            "outputs": {"dir": "out"}
        })
    }

    #[test]
    fn parses_and_resolves_relative_paths() {
        let l = parse(base(), Path::new("/cfg/run.json"), &Overrides::default()).unwrap();
        assert_eq!(l.config.outputs.dir, PathBuf::from("/cfg/out"));
        assert_eq!(l.config.train.unwrap().seed, 3);
        assert_eq!(l.config.model.depth, 2);
    }

    #[test]
    fn seed_flag_and_output_dir_override_config() {
        let ov = Overrides {
            seed: Some(9),
            output_dir: Some(PathBuf::from("/elsewhere")),
        };
        let l = parse(base(), Path::new("/cfg/run.json"), &ov).unwrap();
        assert_eq!(l.config.seed, 9);
        assert_eq!(l.config.train.unwrap().seed, 9);
        assert_eq!(l.config.outputs.dir, PathBuf::from("/elsewhere"));
    }

    #[test]
    fn unknown_and_missing_keys_name_the_path() {
        let mut d = base();
        d["train"]["lrr"] = json!(1);
        let e = parse(d, Path::new("c.json"), &Overrides::default()).unwrap_err().to_string();
        assert!(e.contains("train") && e.contains("lrr"), "{e}");
        let mut d = base();
        d["dataset"]["source"]["powerlaw"].as_object_mut().unwrap().remove("alpha");
        let e = parse(d, Path::new("c.json"), &Overrides::default()).unwrap_err().to_string();
        assert!(e.contains("dataset.source.powerlaw") && e.contains("alpha"), "{e}");
        let mut d = base();
        d["train"]["seed"] = json!(1);
        assert!(parse(d, Path::new("c.json"), &Overrides::default()).is_err());
    }

    #[test]
    fn sweep_is_a_cartesian_product_with_suffixed_names() {
        let sweep: BTreeMap<String, Value> = serde_json::from_value(json!({
            "model.depth": [1, 2, 4],
            "train.weight_decay": {"logspace": [-5, -1, 4]}
        }))
        .unwrap();
        let pts = expand_sweep(&base(), &sweep, "run").unwrap();
        assert_eq!(pts.len(), 12);
        assert_eq!(pts[0].0.name, "run_depth1_weight_decay1e-5");
        let wd: Vec<f64> = pts[..4].iter().map(|(_, d)| d["train"]["weight_decay"].as_f64().unwrap()).collect();
        assert!((wd[1] - 10f64.powf(-5.0 + 4.0 / 3.0)).abs() < 1e-18);
        assert!((wd[3] - 0.1).abs() < 1e-16);
        for (p, d) in &pts {
            assert_eq!(d["outputs"]["name"], json!(p.name));
            assert!(d.get("sweep").is_none());
            parse(d.clone(), Path::new("c.json"), &Overrides::default()).unwrap();
        }
        let names: std::collections::BTreeSet<_> = pts.iter().map(|(p, _)| p.name.clone()).collect();
        assert_eq!(names.len(), 12);
    }

    #[test]
    fn bad_sweep_specs_are_config_errors() {
        for spec in [json!([]), json!({"geomspace": [1, 2, 3]}), json!({"linspace": [1, 2, 0]}), json!(3)] {
            let sweep = BTreeMap::from([("model.depth".to_string(), spec)]);
            assert!(matches!(expand_sweep(&base(), &sweep, "r"), Err(CliError::Config(_))));
        }
    }
}
