//! Checkpoint directories: one STC1 container per weight, bias and momentum
//! tensor, plus `state.json` with the schedule state, config and history.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::json;

use super::{Activation, EpochRecord, SpectralLayer, SpectralWeights, TrainConfig, TrainState};
use crate::container::TensorContainer;
use crate::error::{Error, Result};
use crate::tensor::ComplexKernel;

#[derive(Serialize, Deserialize)]
struct StateFile {
    activation: Activation,
    height: usize,
    width: usize,
    depth: usize,
    lr: f64,
    best: Option<f64>,
    bad_epochs: usize,
    epoch: usize,
    finished: bool,
    resymmetrized: usize,
    config: TrainConfig,
    history: Vec<EpochRecord>,
}

fn save_layers(w: &SpectralWeights, dir: &Path, prefix: &str) -> Result<()> {
    let n = w.depth();
    for (l, layer) in w.layers().iter().enumerate() {
        let k = &layer.weights;
        let kind = if l + 1 == n { "contraction" } else { "conv" };
        TensorContainer::c128(
            k.dims().to_vec(),
            k.data().to_vec(),
            json!({"layer": l, "kind": kind, "layout": "c_out,h,w,c_in"}),
        )?
        .save(dir.join(format!("{prefix}w{l}.stc")))?;
        if let Some(b) = &layer.bias {
            TensorContainer::f64(vec![b.len()], b.clone(), json!({"layer": l}))?
                .save(dir.join(format!("{prefix}b{l}.stc")))?;
        }
    }
    Ok(())
}

fn load_layers(dir: &Path, prefix: &str, depth: usize, height: usize, width: usize, activation: Activation) -> Result<SpectralWeights> {
    let mut layers = Vec::with_capacity(depth);
    for l in 0..depth {
        let c = TensorContainer::load(dir.join(format!("{prefix}w{l}.stc")))?;
        if c.shape.len() != 4 {
            return Err(Error::Format(format!("layer {l} weights must be 4-D, got {:?}", c.shape)));
        }
        let weights = ComplexKernel::new(c.shape[0], c.shape[1], c.shape[2], c.shape[3], c.as_c128()?.to_vec())?;
        let bpath = dir.join(format!("{prefix}b{l}.stc"));
        let bias = if bpath.exists() {
            Some(TensorContainer::load(bpath)?.as_f64()?.to_vec())
        } else {
            None
        };
        layers.push(SpectralLayer { weights, bias });
    }
    SpectralWeights::new(height, width, activation, layers)
}

/// Writes weights only (`w{l}.stc`, `b{l}.stc`) into `dir`.
pub fn save_weights(w: &SpectralWeights, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    save_layers(w, dir, "")?;
    let meta = json!({
        "activation": w.activation(),
        "height": w.height(),
        "width": w.width(),
        "depth": w.depth(),
    });
    fs::write(dir.join("weights.json"), serde_json::to_string_pretty(&meta)?)?;
    Ok(())
}

pub fn load_weights(dir: impl AsRef<Path>) -> Result<SpectralWeights> {
    let dir = dir.as_ref();
    #[derive(Deserialize)]
    struct Meta {
        activation: Activation,
        height: usize,
        width: usize,
        depth: usize,
    }
    let m: Meta = serde_json::from_str(&fs::read_to_string(dir.join("weights.json"))?)?;
    load_layers(dir, "", m.depth, m.height, m.width, m.activation)
}

pub fn save_checkpoint(state: &TrainState, cfg: &TrainConfig, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    save_layers(&state.weights, dir, "")?;
    save_layers(&state.velocity, dir, "momentum_")?;
    let w = &state.weights;
    let file = StateFile {
        activation: w.activation(),
        height: w.height(),
        width: w.width(),
        depth: w.depth(),
        lr: state.lr,
        best: state.best,
        bad_epochs: state.bad_epochs,
        epoch: state.epoch,
        finished: state.finished,
        resymmetrized: state.resymmetrized,
        config: cfg.clone(),
        history: state.history.clone(),
    };
    fs::write(dir.join("state.json"), serde_json::to_string_pretty(&file)?)?;
    Ok(())
}

pub fn load_checkpoint(dir: impl AsRef<Path>) -> Result<(TrainState, TrainConfig)> {
    let dir = dir.as_ref();
    let f: StateFile = serde_json::from_str(&fs::read_to_string(dir.join("state.json"))?)?;
    let weights = load_layers(dir, "", f.depth, f.height, f.width, f.activation)?;
    let velocity = load_layers(dir, "momentum_", f.depth, f.height, f.width, f.activation)?;
    Ok((
        TrainState {
            weights,
            velocity,
            lr: f.lr,
            best: f.best,
            bad_epochs: f.bad_epochs,
            epoch: f.epoch,
            finished: f.finished,
            history: f.history,
            resymmetrized: f.resymmetrized,
        },
        f.config,
    ))
}
