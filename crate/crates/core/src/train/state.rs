//! Training state and its on-disk checkpoint form.
//!
//! A checkpoint is a directory holding `manifest.json` and one little-endian
//! `f32` file per tensor under `params/`, plus the optimizer moments under
//! `adam_m/` and `adam_v/`. File names are the canonical tensor paths.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::optim::AdamW;
use crate::config::{model_hash, RunConfig, SCHEMA_VERSION};
use crate::controller::DimensionSet;
use crate::error::{MiaError, Result};
use crate::params::{init_model, ParamStore};

/// Pipeline position. `Backbone` trains the dense network the controller is
/// later attached to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Backbone,
    ControllerPretrain,
    Cotrain,
    RlFinetune,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Backbone => "backbone",
            Stage::ControllerPretrain => "controller_pretrain",
            Stage::Cotrain => "cotrain",
            Stage::RlFinetune => "rl_finetune",
        }
    }
}

/// One row of the per-epoch metrics CSV. Columns that do not apply to a
/// stage are left empty.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub stage: String,
    pub epoch: usize,
    pub task_loss: f64,
    pub cost_loss: Option<f64>,
    pub alpha: Option<f64>,
    pub exec_ratio_mean: Option<f64>,
    pub exec_ratio_std: Option<f64>,
    pub reward_mean: Option<f64>,
    pub clean_acc: f64,
    pub val_exec_ratio: f64,
    pub pretrain_hard_loss: Option<f64>,
    pub backbone_grad_norm: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub run: RunConfig,
    pub stage: Stage,
    pub stage_complete: bool,
    pub params: ParamStore<f32>,
    pub opt: AdamW,
    /// Epochs finished in the current stage.
    pub epoch: usize,
    pub global_step: u64,
    pub tau: f64,
    pub seed: u64,
    pub dims: DimensionSet,
    pub history: Vec<MetricsRow>,
}

impl TrainState {
    /// Fresh weights; nothing trained yet.
    pub fn new(run: RunConfig) -> Result<Self> {
        let cfg = run.model.validate()?;
        let seed = run.model.seed;
        Ok(Self {
            params: init_model(&cfg, seed),
            opt: AdamW::new(0.0),
            stage: Stage::Backbone,
            stage_complete: false,
            epoch: 0,
            global_step: 0,
            tau: run.model.gumbel_tau_start,
            seed,
            dims: DimensionSet::ALL,
            history: Vec::new(),
            run,
        })
    }

    /// Moves to `next`, resetting the epoch counter and optimizer. Stages
    /// only advance, and only from a completed stage; re-entering an
    /// unfinished stage resumes it.
    pub fn enter(&mut self, next: Stage, opt: AdamW) -> Result<()> {
        if next == self.stage && !self.stage_complete {
            return Ok(());
        }
        if next <= self.stage {
            return Err(MiaError::Stage(format!(
                "cannot enter {} from {}",
                next.name(),
                self.stage.name()
            )));
        }
        if !self.stage_complete {
            return Err(MiaError::Stage(format!(
                "{} has not completed; cannot start {}",
                self.stage.name(),
                next.name()
            )));
        }
        let direct = matches!(
            (self.stage, next),
            (Stage::Backbone, Stage::ControllerPretrain)
                | (Stage::ControllerPretrain, Stage::Cotrain)
                | (Stage::Cotrain, Stage::RlFinetune)
        );
        if !direct {
            return Err(MiaError::Stage(format!(
                "{} must follow the stage before it, not {}",
                next.name(),
                self.stage.name()
            )));
        }
        self.stage = next;
        self.stage_complete = false;
        self.epoch = 0;
        self.opt = opt;
        Ok(())
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| MiaError::io(dir, e))?;
        let params = write_tensors(dir, "params", &self.params)?;
        let adam_m = write_tensors(dir, "adam_m", &self.opt.m)?;
        let adam_v = write_tensors(dir, "adam_v", &self.opt.v)?;
        let manifest = Manifest {
            schema_version: SCHEMA_VERSION,
            stage: self.stage,
            stage_complete: self.stage_complete,
            epoch: self.epoch,
            global_step: self.global_step,
            tau: self.tau,
            seed: self.seed,
            dims: self.dims.to_string(),
            config_hash: self.run.hash(),
            model_hash: model_hash(&self.run.model),
            config: self.run.clone(),
            optimizer: OptimizerEntry {
                weight_decay: self.opt.weight_decay,
                step: self.opt.step,
                adam_m,
                adam_v,
            },
            params,
            history: self.history.clone(),
        };
        let path = dir.join("manifest.json");
        let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        fs::write(&path, text).map_err(|e| MiaError::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("manifest.json");
        let text = fs::read_to_string(&path).map_err(|e| MiaError::io(&path, e))?;
        let m: Manifest = serde_json::from_str(&text)
            .map_err(|e| MiaError::Checkpoint(format!("{}: {e}", path.display())))?;
        if m.schema_version != SCHEMA_VERSION {
            return Err(MiaError::Checkpoint(format!(
                "schema_version {} (expected {SCHEMA_VERSION})",
                m.schema_version
            )));
        }
        if m.config_hash != m.config.hash() {
            return Err(MiaError::Checkpoint("config hash does not match the stored config".into()));
        }
        let cfg = m.config.model.validate()?;
        let params = read_tensors(dir, &m.params)?;
        let expected = init_model::<f32>(&cfg, 0);
        for (name, t) in expected.iter() {
            match params.try_get(name) {
                Some(p) if p.dim() == t.dim() => {}
                Some(p) => return Err(MiaError::Checkpoint(format!("{name}: shape {:?}, expected {:?}", p.dim(), t.dim()))),
                None if crate::params::BRANCH_FINALS.iter().any(|f| name.contains(&format!(".{f}."))) => {}
                None => return Err(MiaError::Checkpoint(format!("tensor {name} missing"))),
            }
        }
        let mut opt = AdamW::new(m.optimizer.weight_decay);
        opt.step = m.optimizer.step;
        opt.m = read_tensors(dir, &m.optimizer.adam_m)?;
        opt.v = read_tensors(dir, &m.optimizer.adam_v)?;
        Ok(Self {
            run: m.config,
            stage: m.stage,
            stage_complete: m.stage_complete,
            params,
            opt,
            epoch: m.epoch,
            global_step: m.global_step,
            tau: m.tau,
            seed: m.seed,
            dims: m.dims.parse().map_err(|e| MiaError::Checkpoint(format!("dims: {e}")))?,
            history: m.history,
        })
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    schema_version: u32,
    stage: Stage,
    stage_complete: bool,
    epoch: usize,
    global_step: u64,
    tau: f64,
    seed: u64,
    dims: String,
    config_hash: String,
    model_hash: String,
    config: RunConfig,
    optimizer: OptimizerEntry,
    params: Vec<TensorEntry>,
    history: Vec<MetricsRow>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct OptimizerEntry {
    weight_decay: f64,
    step: u64,
    adam_m: Vec<TensorEntry>,
    adam_v: Vec<TensorEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    file: String,
    shape: [usize; 2],
}

fn write_tensors(dir: &Path, sub: &str, store: &ParamStore<f32>) -> Result<Vec<TensorEntry>> {
    let base = dir.join(sub);
    fs::create_dir_all(&base).map_err(|e| MiaError::io(&base, e))?;
    let mut out = Vec::new();
    for (name, t) in store.iter() {
        let file = format!("{sub}/{name}.bin");
        let path: PathBuf = dir.join(&file);
        let bytes: Vec<u8> = t.iter().flat_map(|v| v.to_le_bytes()).collect();
        fs::write(&path, bytes).map_err(|e| MiaError::io(&path, e))?;
        out.push(TensorEntry {
            name: name.clone(),
            file,
            shape: [t.nrows(), t.ncols()],
        });
    }
    Ok(out)
}

fn read_tensors(dir: &Path, entries: &[TensorEntry]) -> Result<ParamStore<f32>> {
    let mut store = ParamStore::new();
    for e in entries {
        let path = dir.join(&e.file);
        let bytes = fs::read(&path).map_err(|err| MiaError::io(&path, err))?;
        let n = e.shape[0] * e.shape[1];
        if bytes.len() != 4 * n {
            return Err(MiaError::Checkpoint(format!(
                "{}: {} bytes, expected {}",
                path.display(),
                bytes.len(),
                4 * n
            )));
        }
        let vals: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let arr = Array2::from_shape_vec((e.shape[0], e.shape[1]), vals).expect("length checked");
        store.insert(e.name.clone(), arr);
    }
    Ok(store)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stage_order_enforced() {
        let mut s = TrainState::new(RunConfig::default()).unwrap();
        assert!(s.enter(Stage::Cotrain, AdamW::new(0.0)).is_err());
        assert!(s.enter(Stage::ControllerPretrain, AdamW::new(0.0)).is_err());
        s.stage_complete = true;
        assert!(s.enter(Stage::Cotrain, AdamW::new(0.0)).is_err());
        s.enter(Stage::ControllerPretrain, AdamW::new(0.0)).unwrap();
        assert!(s.enter(Stage::Backbone, AdamW::new(0.0)).is_err());
        s.stage_complete = true;
        s.enter(Stage::Cotrain, AdamW::new(0.0)).unwrap();
        assert!(s.enter(Stage::RlFinetune, AdamW::new(0.0)).is_err());
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = TrainState::new(RunConfig::default()).unwrap();
        s.opt = AdamW::new(0.01);
        let g = s.params.mapped(|v| v * 0.5 + 0.25);
        let mut p = s.params.clone();
        s.opt.update(&mut p, &g, &|_| 1e-3);
        s.params = p;
        s.global_step = 17;
        s.history.push(MetricsRow {
            stage: "cotrain".into(),
            epoch: 0,
            task_loss: 1.25,
            cost_loss: None,
            alpha: Some(-0.1),
            exec_ratio_mean: Some(0.7),
            exec_ratio_std: None,
            reward_mean: None,
            clean_acc: 0.5,
            val_exec_ratio: 0.9,
            pretrain_hard_loss: None,
            backbone_grad_norm: None,
        });
        s.save(dir.path()).unwrap();
        let r = TrainState::load(dir.path()).unwrap();
        assert_eq!(r, s);
    }
}
