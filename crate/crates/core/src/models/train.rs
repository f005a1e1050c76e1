use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::wiring::Batch;
use super::{Checkpoint, HistoryEntry, Model, ModelKind, ModelSpec, RngState, Stage, TrainConfig};
use crate::data::SequencePairDataset;
use crate::error::{Error, Result};
use crate::objectives::{cmi_from_breakdown, IbWeights, LossBreakdown};
use crate::optim::{clip_global_norm, Adam};
use crate::tape::Tape;

pub use super::wiring::Objective;

const SHUFFLE_STREAM: u64 = 0x5348_5546;

/// SplitMix64 fold of several words into one seed.
pub(crate) fn derive_seed(parts: &[u64]) -> u64 {
    let mut x: u64 = 0x9E37_79B9_7F4A_7C15;
    for &p in parts {
        x ^= p;
        x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = x;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        x = z ^ (z >> 31);
    }
    x
}

/// Standard-normal draws for one sequence, independent of batching.
pub(crate) fn sequence_noise(seed: u64, index: usize, len: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64 + 1);
    (0..len)
        .map(|_| {
            let e: f64 = StandardNormal.sample(&mut rng);
            e
        })
        .collect()
}

/// Dataset upcast once to `f64`, one vector per sequence.
pub(crate) struct Upcast {
    pub t: usize,
    pub dx: usize,
    pub dy: usize,
    pub x1: Vec<Vec<f64>>,
    pub x2: Vec<Vec<f64>>,
}

impl Upcast {
    pub fn new(ds: &SequencePairDataset) -> Self {
        let up = |s: &[f32]| s.iter().map(|&v| v as f64).collect::<Vec<f64>>();
        Self {
            t: ds.t(),
            dx: ds.dx(),
            dy: ds.dy(),
            x1: (0..ds.n()).map(|i| up(ds.x1_seq(i))).collect(),
            x2: (0..ds.n()).map(|i| up(ds.x2_seq(i))).collect(),
        }
    }

    pub fn batch(&self, tape: &mut Tape, idx: &[usize]) -> Batch {
        let x1: Vec<&[f64]> = idx.iter().map(|&i| self.x1[i].as_slice()).collect();
        let x2: Vec<&[f64]> = idx.iter().map(|&i| self.x2[i].as_slice()).collect();
        Batch::new(tape, self.t, self.dx, self.dy, &x1, &x2)
    }
}

pub(crate) fn check_data(spec: &ModelSpec, ds: &SequencePairDataset) -> Result<()> {
    if ds.dx() != spec.dx || ds.dy() != spec.dy {
        return Err(Error::ShapeMismatch(format!(
            "model expects dx={}, dy={}; data has dx={}, dy={}",
            spec.dx,
            spec.dy,
            ds.dx(),
            ds.dy()
        )));
    }
    Ok(())
}

struct Progress {
    history: Vec<HistoryEntry>,
    rng: RngState,
}

fn checkpoint(model: &Model, cfg: &TrainConfig, p: &Progress, stage: Stage) -> Checkpoint {
    Checkpoint {
        spec: model.spec.clone(),
        store: model.store.clone(),
        config: cfg.clone(),
        history: p.history.clone(),
        stage,
        rng: p.rng,
    }
}

/// Objective value and parameter gradient of one slice of a mini-batch.
/// With `descend`, ELBOs are negated so the gradient points uphill in loss.
#[allow(clippy::too_many_arguments)]
fn chunk_gradient(
    model: &Model,
    data: &Upcast,
    idx: &[usize],
    objective: Objective,
    weights: &IbWeights,
    noise_seed: u64,
    norm: f64,
    descend: bool,
) -> Result<(LossBreakdown, Vec<f64>)> {
    let mut tape = Tape::new();
    let b = data.batch(&mut tape, idx);
    let (steps, dim) = model.noise_shape(objective, data.t);
    let noise: Vec<Vec<f64>> = idx.iter().map(|&i| sequence_noise(noise_seed, i, steps * dim)).collect();
    let obj = model.objective(&mut tape, &b, &noise, objective, weights, norm)?;
    let out = if descend && objective.is_elbo() { tape.scale(obj.total, -1.0) } else { obj.total };
    let grads = tape.backward(out);
    let mut flat = vec![0.0; model.store.num_values()];
    grads.accumulate_params(&tape, &model.store, &mut flat);
    Ok((obj.breakdown(&tape), flat))
}

/// Objective over the sequences `idx` of `ds` and its gradient with respect to
/// every unfrozen parameter (zero for frozen ones), normalized per sequence
/// and step. Noise for sequence `i` is the training draw for `noise_seed`.
pub fn objective_gradient(
    model: &Model,
    ds: &SequencePairDataset,
    idx: &[usize],
    objective: Objective,
    weights: &IbWeights,
    noise_seed: u64,
) -> Result<(LossBreakdown, Vec<f64>)> {
    check_data(&model.spec, ds)?;
    model.check_objective(objective)?;
    if ds.t() < 2 || idx.is_empty() {
        return Err(Error::ShapeMismatch("objective needs sequences of length ≥ 2 and a non-empty batch".into()));
    }
    if let Some(&bad) = idx.iter().find(|&&i| i >= ds.n()) {
        return Err(Error::ShapeMismatch(format!("sequence index {bad} out of range for {} sequences", ds.n())));
    }
    let data = Upcast::new(ds);
    let norm = 1.0 / (idx.len() * model.objective_steps(objective, data.t)) as f64;
    chunk_gradient(model, &data, idx, objective, weights, noise_seed, norm, false)
}

fn run(
    model: &mut Model,
    ds: &SequencePairDataset,
    cfg: &TrainConfig,
    objective: Objective,
    p: &mut Progress,
) -> Result<()> {
    cfg.validate()?;
    check_data(&model.spec, ds)?;
    model.check_objective(objective)?;
    if ds.t() < 2 {
        return Err(Error::ShapeMismatch("training needs sequences of length ≥ 2".into()));
    }
    let data = Upcast::new(ds);
    let n = ds.n();
    let steps = model.objective_steps(objective, data.t);
    let stage = objective.stage();
    let mut opt = Adam::new(cfg.learning_rate, model.store.num_values());
    let mut best = f64::INFINITY;
    let mut stale = 0;
    for epoch in 0..cfg.max_epochs as u64 {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(&[cfg.seed, objective.tag(), epoch, SHUFFLE_STREAM])));
        let noise_seed = derive_seed(&[cfg.seed, objective.tag(), epoch]);
        let mut epoch_sum: Option<LossBreakdown> = None;
        for batch in order.chunks(cfg.batch_size) {
            let norm = 1.0 / (batch.len() * steps) as f64;
            let chunks: Vec<&[usize]> = batch.chunks(cfg.chunk_size).collect();
            let m: &Model = model;
            let results = cfg.parallelism.map(chunks.len(), |c| {
                chunk_gradient(m, &data, chunks[c], objective, &cfg.weights, noise_seed, norm, true)
            });
            let mut grad = vec![0.0; model.store.num_values()];
            let mut batch_sum: Option<LossBreakdown> = None;
            for r in results {
                let (b, g) = r.map_err(|e| match e {
                    Error::NonFiniteLoss { message, .. } => Error::NonFiniteLoss {
                        message: format!("epoch {epoch}: {message}"),
                        last_good: Some(Box::new(checkpoint(model, cfg, p, stage))),
                    },
                    other => other,
                })?;
                grad.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
                match &mut batch_sum {
                    None => batch_sum = Some(b),
                    Some(s) => s.accumulate(&b),
                }
            }
            if grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::NonFiniteLoss {
                    message: format!("epoch {epoch}: non-finite gradient"),
                    last_good: Some(Box::new(checkpoint(model, cfg, p, stage))),
                });
            }
            clip_global_norm(&mut grad, cfg.grad_clip_norm);
            opt.update(&mut model.store, &grad);
            model.store.round_to_f32();
            let weighted = batch_sum.expect("non-empty batch").scaled(batch.len() as f64);
            match &mut epoch_sum {
                None => epoch_sum = Some(weighted),
                Some(s) => s.accumulate(&weighted),
            }
        }
        let mean = epoch_sum.expect("non-empty epoch").scaled(1.0 / n as f64);
        let cmi = if objective.is_elbo() { None } else { cmi_from_breakdown(&mean) };
        let loss = if objective.is_elbo() { -mean.total } else { mean.total };
        p.history.push(HistoryEntry { stage, epoch, step: opt.steps(), breakdown: mean, cmi });
        match stage {
            Stage::Step1 => p.rng.step1_epochs = epoch + 1,
            Stage::Step2 => p.rng.step2_epochs = epoch + 1,
        }
        if !best.is_finite() || loss < best - cfg.min_rel_improvement * best.abs() {
            best = loss;
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                break;
            }
        }
    }
    Ok(())
}

fn require_kind(spec: &ModelSpec, kind: ModelKind, what: &str) -> Result<()> {
    if spec.kind != kind {
        return Err(Error::InvalidSpec(format!("{what} needs a {kind} model, got {}", spec.kind)));
    }
    Ok(())
}

/// Shared-latent stage: minimizes the information objective over the Step-I
/// components of a two-step model.
pub fn train_step1(mut model: Model, train: &SequencePairDataset, cfg: &TrainConfig) -> Result<Checkpoint> {
    require_kind(&model.spec, ModelKind::Infodpcca, "step-1 training")?;
    let mut p = Progress { history: Vec::new(), rng: RngState { seed: cfg.seed, ..RngState::default() } };
    run(&mut model, train, cfg, Objective::Step1, &mut p)?;
    Ok(checkpoint(&model, cfg, &p, Stage::Step1))
}

/// Generative stage: freezes every Step-I component, then maximizes the ELBO
/// over the rest.
pub fn train_step2(ckpt: Checkpoint, train: &SequencePairDataset, cfg: &TrainConfig) -> Result<Checkpoint> {
    require_kind(&ckpt.spec, ModelKind::Infodpcca, "step-2 training")?;
    if ckpt.stage != Stage::Step1 {
        return Err(Error::StageMismatch(format!("step-2 training needs a step1 checkpoint, got {}", ckpt.stage)));
    }
    let mut model = ckpt.model()?;
    model.freeze_step1();
    let mut p = Progress { history: ckpt.history.clone(), rng: RngState { seed: cfg.seed, ..ckpt.rng } };
    run(&mut model, train, cfg, Objective::Step2, &mut p)?;
    Ok(checkpoint(&model, cfg, &p, Stage::Step2))
}

/// Ablation: the generative stage on top of randomly initialized, frozen
/// Step-I components, with no shared-latent objective.
pub fn train_step2_only(spec: &ModelSpec, train: &SequencePairDataset, cfg: &TrainConfig) -> Result<Checkpoint> {
    require_kind(spec, ModelKind::Infodpcca, "step-2 training")?;
    let mut model = Model::build(spec, cfg.seed)?;
    model.freeze_step1();
    let mut p = Progress { history: Vec::new(), rng: RngState { seed: cfg.seed, ..RngState::default() } };
    run(&mut model, train, cfg, Objective::Step2, &mut p)?;
    Ok(checkpoint(&model, cfg, &p, Stage::Step2))
}

/// Both stages for the two-step model; the single objective for baselines.
pub fn train_full(spec: &ModelSpec, train: &SequencePairDataset, cfg: &TrainConfig) -> Result<Checkpoint> {
    let mut model = Model::build(spec, cfg.seed)?;
    let objective = match spec.kind {
        ModelKind::Infodpcca => {
            let s1 = train_step1(model, train, cfg)?;
            return train_step2(s1, train, cfg);
        }
        ModelKind::Dvib => Objective::Dvib,
        ModelKind::Dpcca => Objective::Dpcca,
    };
    let mut p = Progress { history: Vec::new(), rng: RngState { seed: cfg.seed, ..RngState::default() } };
    run(&mut model, train, cfg, objective, &mut p)?;
    Ok(checkpoint(&model, cfg, &p, objective.stage()))
}
