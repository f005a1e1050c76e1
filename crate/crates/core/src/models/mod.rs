//! The three trainable systems: the single-stream bottleneck baseline
//! (`dvib`), the state-space baseline (`dpcca`) and the two-step
//! shared/private model (`infodpcca`).
//!
//! A model is a [`ModelSpec`] plus a [`ParameterStore`]; the network wiring is
//! rebuilt deterministically from the spec, so a checkpoint only has to carry
//! the spec, the tensors and bookkeeping.

mod checkpoint;
mod infer;
mod train;
mod wiring;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nets::Activation;
use crate::objectives::{IbWeights, LossBreakdown};
use crate::par::Parallelism;
use crate::params::ParameterStore;

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_FORMAT_VERSION};
pub use infer::{
    extract_latents, extract_latents_with, predict_all, predict_next, read_latents, write_latents, ExtractStage,
    LatentExtraction, LatentSeries, PredictMode, Prediction,
};
pub use train::{objective_gradient, train_full, train_step1, train_step2, train_step2_only};
pub use wiring::Objective;
pub use wiring::{step1_components, Model};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Dvib,
    Dpcca,
    Infodpcca,
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ModelKind::Dvib => "dvib",
            ModelKind::Dpcca => "dpcca",
            ModelKind::Infodpcca => "infodpcca",
        })
    }
}

impl std::str::FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dvib" => Ok(ModelKind::Dvib),
            "dpcca" => Ok(ModelKind::Dpcca),
            "infodpcca" => Ok(ModelKind::Infodpcca),
            other => Err(Error::InvalidSpec(format!("unknown model kind {other:?}"))),
        }
    }
}

/// Training stage a checkpoint has completed. The bottleneck baseline only
/// has a `step1`; the state-space baseline only a `step2`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Step1,
    Step2,
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Stage::Step1 => "step1",
            Stage::Step2 => "step2",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub dx: usize,
    pub dy: usize,
    pub dz0: usize,
    pub dz1: usize,
    pub dz2: usize,
    pub rnn_hidden: usize,
    /// Hidden widths of every emitter trunk.
    pub mlp_hidden: Vec<usize>,
    /// Step-II emitters mix the frozen Step-I emitter mean in through a gate.
    pub residual_connection: bool,
    /// Step II reads the frozen Step-I RNN states instead of training its own.
    pub reuse_rnn: bool,
    /// Residual emitters also mix the Step-I standard deviation.
    pub reuse_sigma1: bool,
    pub emitter_output: Activation,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self {
            kind: ModelKind::Infodpcca,
            dx: 120,
            dy: 120,
            dz0: 2,
            dz1: 2,
            dz2: 2,
            rnn_hidden: 64,
            mlp_hidden: vec![64, 64],
            residual_connection: true,
            reuse_rnn: true,
            reuse_sigma1: false,
            emitter_output: Activation::Identity,
        }
    }
}

impl ModelSpec {
    pub fn new(kind: ModelKind, dx: usize, dy: usize) -> Self {
        Self { kind, dx, dy, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [self.dx, self.dy, self.dz0, self.dz1, self.dz2, self.rnn_hidden];
        if dims.contains(&0) {
            return Err(Error::InvalidSpec(format!("dimensions must be positive: {self:?}")));
        }
        if self.mlp_hidden.is_empty() || self.mlp_hidden.contains(&0) {
            return Err(Error::InvalidSpec("mlp_hidden needs at least one positive width".into()));
        }
        Ok(())
    }

    pub fn dz_total(&self) -> usize {
        self.dz0 + self.dz1 + self.dz2
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub weights: IbWeights,
    pub learning_rate: f64,
    /// Epoch cap for each training stage.
    pub max_epochs: usize,
    pub batch_size: usize,
    pub grad_clip_norm: f64,
    pub seed: u64,
    /// Stop once the epoch loss has not improved by `min_rel_improvement`
    /// (relative) for this many epochs.
    pub patience: usize,
    pub min_rel_improvement: f64,
    /// Rows per independently evaluated slice of a mini-batch. Results do not
    /// depend on it beyond floating-point summation order, which is fixed.
    pub chunk_size: usize,
    /// Runtime only; never serialized so outputs do not depend on it.
    #[serde(skip)]
    pub parallelism: Parallelism,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            weights: IbWeights::default(),
            learning_rate: 1e-3,
            max_epochs: 200,
            batch_size: 16,
            grad_clip_norm: 10.0,
            seed: 0,
            patience: 20,
            min_rel_improvement: 1e-4,
            chunk_size: 8,
            parallelism: Parallelism::Sequential,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        let pos = |name: &str, v: f64| {
            if v.is_finite() && v > 0.0 {
                Ok(())
            } else {
                Err(Error::InvalidParams(format!("{name} must be positive, got {v}")))
            }
        };
        pos("learning_rate", self.learning_rate)?;
        pos("grad_clip_norm", self.grad_clip_norm)?;
        if self.max_epochs == 0 || self.batch_size == 0 || self.patience == 0 || self.chunk_size == 0 {
            return Err(Error::InvalidParams(
                "max_epochs, batch_size, patience and chunk_size must be positive".into(),
            ));
        }
        if !(self.min_rel_improvement >= 0.0 && self.min_rel_improvement.is_finite()) {
            return Err(Error::InvalidParams("min_rel_improvement must be finite and non-negative".into()));
        }
        Ok(())
    }
}

/// One epoch summary.
#[derive(Clone, Debug, PartialEq)]
pub struct HistoryEntry {
    pub stage: Stage,
    pub epoch: u64,
    /// Optimizer steps taken in this stage so far.
    pub step: u64,
    /// Epoch mean of the objective; for ELBO stages `total` is the ELBO.
    pub breakdown: LossBreakdown,
    pub cmi: Option<f64>,
}

impl HistoryEntry {
    pub fn to_json(&self) -> serde_json::Value {
        let mut v = self.breakdown.to_json(self.step, self.epoch);
        let m = v.as_object_mut().expect("breakdown serializes to an object");
        m.insert("stage".into(), self.stage.to_string().into());
        m.insert("cmi".into(), self.cmi.map_or(serde_json::Value::Null, Into::into));
        v
    }

    pub fn from_json(v: &serde_json::Value) -> Result<Self> {
        let bad = |what: &str| Error::Format(format!("history line: missing or invalid {what}"));
        let m = v.as_object().ok_or_else(|| bad("object"))?;
        let num = |k: &str| m.get(k).and_then(|x| x.as_f64()).ok_or_else(|| bad(k));
        let stage: Stage =
            serde_json::from_value(m.get("stage").cloned().ok_or_else(|| bad("stage"))?).map_err(|_| bad("stage"))?;
        let weights = m.get("weights").and_then(|w| w.as_array()).ok_or_else(|| bad("weights"))?;
        let mut terms = Vec::new();
        for w in weights {
            let name = w.get("name").and_then(|n| n.as_str()).ok_or_else(|| bad("weights"))?;
            terms.push(crate::objectives::Term {
                name: name.to_string(),
                value: num(name)?,
                weight: w.get("weight").and_then(|x| x.as_f64()).ok_or_else(|| bad(name))?,
            });
        }
        Ok(Self {
            stage,
            epoch: m.get("epoch").and_then(|x| x.as_u64()).ok_or_else(|| bad("epoch"))?,
            step: m.get("step").and_then(|x| x.as_u64()).ok_or_else(|| bad("step"))?,
            breakdown: LossBreakdown { total: num("total")?, terms, alpha: num("alpha")?, beta: num("beta")? },
            cmi: m.get("cmi").and_then(|x| x.as_f64()),
        })
    }
}

/// Everything needed to draw the next training noise deterministically.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub step1_epochs: u64,
    pub step2_epochs: u64,
}

/// A trained (or partially trained) model with its provenance.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub spec: ModelSpec,
    pub store: ParameterStore,
    pub config: TrainConfig,
    pub history: Vec<HistoryEntry>,
    pub stage: Stage,
    pub rng: RngState,
}

impl Checkpoint {
    /// Rebuilds the network wiring around the stored parameters.
    pub fn model(&self) -> Result<Model> {
        Model::from_store(&self.spec, self.store.clone())
    }
}
