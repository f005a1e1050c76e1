use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::train::{derive_seed, sequence_noise, Upcast};
use super::wiring::{Batch, LatentStep};
use super::{Checkpoint, Model, ModelKind, Stage};
use crate::data::{read_f32, write_f32, SequencePairDataset, FORMAT_VERSION};
use crate::error::{Error, Result};
use crate::nets::{DiagGaussian, GaussVar};
use crate::par::Parallelism;
use crate::tape::Tape;

const EXTRACT_CHUNK: usize = 16;
const PREDICT_STREAM: u64 = 0x5052_4544;

/// Which latent read-out to extract.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExtractStage {
    /// `z⁰` from the shared-latent encoder on `x_{≤t}`.
    Step1Prior,
    /// `z⁰, z¹, z²` from the generative-stage posterior.
    Step2Posterior,
}

impl ExtractStage {
    pub fn stage(self) -> Stage {
        match self {
            ExtractStage::Step1Prior => Stage::Step1,
            ExtractStage::Step2Posterior => Stage::Step2,
        }
    }
}

impl std::str::FromStr for ExtractStage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "step1" | "step1_prior" => Ok(ExtractStage::Step1Prior),
            "step2" | "step2_posterior" => Ok(ExtractStage::Step2Posterior),
            other => Err(Error::InvalidSpec(format!("unknown extraction stage {other:?}"))),
        }
    }
}

/// Means and stds of one latent block, `[N][steps][dim]` row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentSeries {
    pub dim: usize,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl LatentSeries {
    fn empty(dim: usize) -> Self {
        Self { dim, mean: Vec::new(), std: Vec::new() }
    }
}

/// Latent trajectories for every sequence of a dataset, `T − 1` steps each.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentExtraction {
    pub stage: ExtractStage,
    pub n: usize,
    pub steps: usize,
    pub z0: LatentSeries,
    pub z1: Option<LatentSeries>,
    pub z2: Option<LatentSeries>,
}

impl LatentExtraction {
    /// `[steps][dz0]` block of `z⁰` means for sequence `n`.
    pub fn z0_mean_seq(&self, n: usize) -> &[f64] {
        let len = self.steps * self.z0.dim;
        &self.z0.mean[n * len..(n + 1) * len]
    }
}

/// Stages a checkpoint can serve: the shared-latent read-outs exist once
/// Step I has run; the generative read-outs only after Step II.
fn check_stage(ckpt: &Checkpoint, stage: Stage) -> Result<()> {
    let ok = match (ckpt.spec.kind, stage) {
        (ModelKind::Infodpcca, Stage::Step1) => true,
        (ModelKind::Infodpcca, Stage::Step2) => ckpt.stage == Stage::Step2,
        (ModelKind::Dvib, Stage::Step1) => true,
        (ModelKind::Dpcca, Stage::Step2) => true,
        _ => false,
    };
    if ok {
        Ok(())
    } else {
        Err(Error::StageMismatch(format!(
            "{} checkpoint at stage {} cannot serve {stage} outputs",
            ckpt.spec.kind, ckpt.stage
        )))
    }
}

fn check_dims(ckpt: &Checkpoint, ds: &SequencePairDataset) -> Result<()> {
    super::train::check_data(&ckpt.spec, ds)?;
    if ds.t() < 2 {
        return Err(Error::ShapeMismatch("sequences need at least two steps".into()));
    }
    Ok(())
}

/// Latent means and stds for positions `0..T−1` of every sequence.
/// Deterministic: no sampling.
pub fn extract_latents(ckpt: &Checkpoint, ds: &SequencePairDataset, stage: ExtractStage) -> Result<LatentExtraction> {
    extract_latents_with(ckpt, ds, stage, Parallelism::Sequential)
}

pub fn extract_latents_with(
    ckpt: &Checkpoint,
    ds: &SequencePairDataset,
    stage: ExtractStage,
    par: Parallelism,
) -> Result<LatentExtraction> {
    check_stage(ckpt, stage.stage())?;
    check_dims(ckpt, ds)?;
    let model = ckpt.model()?;
    let data = Upcast::new(ds);
    let steps = ds.t() - 1;
    let idx: Vec<usize> = (0..ds.n()).collect();
    let chunks: Vec<&[usize]> = idx.chunks(EXTRACT_CHUNK).collect();
    let parts = par.map(chunks.len(), |c| -> Result<[LatentSeries; 3]> {
        let mut tape = Tape::new();
        let b = data.batch(&mut tape, chunks[c]);
        let out = model.latents(&mut tape, &b, stage.stage(), steps)?;
        Ok(collect_rows(&tape, &out, chunks[c].len(), &model))
    });
    let s = &model.spec;
    let mut acc = [LatentSeries::empty(s.dz0), LatentSeries::empty(s.dz1), LatentSeries::empty(s.dz2)];
    for p in parts {
        for (a, q) in acc.iter_mut().zip(p?) {
            a.mean.extend(q.mean);
            a.std.extend(q.std);
        }
    }
    let [z0, z1, z2] = acc;
    let private = stage == ExtractStage::Step2Posterior;
    Ok(LatentExtraction { stage, n: ds.n(), steps, z0, z1: private.then_some(z1), z2: private.then_some(z2) })
}

/// Reorders per-step batch outputs into per-row `[steps][dim]` blocks.
fn collect_rows(tape: &Tape, out: &[LatentStep], rows: usize, model: &Model) -> [LatentSeries; 3] {
    let s = &model.spec;
    let mut res = [LatentSeries::empty(s.dz0), LatentSeries::empty(s.dz1), LatentSeries::empty(s.dz2)];
    for (k, series) in res.iter_mut().enumerate() {
        if out.first().is_none_or(|o| o[k].is_none()) {
            continue;
        }
        for r in 0..rows {
            for step in out {
                let g = step[k].expect("consistent latent layout").row(tape, r);
                series.mean.extend(g.mean);
                series.std.extend(g.std);
            }
        }
    }
    res
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LatentMeta {
    format_version: u32,
    stage: ExtractStage,
    n: usize,
    steps: usize,
    dz0: usize,
    dz1: Option<usize>,
    dz2: Option<usize>,
}

/// `meta.json` plus `{z0,z1,z2}_{mean,std}.bin` (`f32` little-endian).
pub fn write_latents(ex: &LatentExtraction, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let meta = LatentMeta {
        format_version: FORMAT_VERSION,
        stage: ex.stage,
        n: ex.n,
        steps: ex.steps,
        dz0: ex.z0.dim,
        dz1: ex.z1.as_ref().map(|z| z.dim),
        dz2: ex.z2.as_ref().map(|z| z.dim),
    };
    fs::write(dir.join("meta.json"), serde_json::to_vec_pretty(&meta)?)?;
    let f32s = |v: &[f64]| v.iter().map(|&x| x as f32).collect::<Vec<f32>>();
    for (name, z) in [("z0", Some(&ex.z0)), ("z1", ex.z1.as_ref()), ("z2", ex.z2.as_ref())] {
        if let Some(z) = z {
            write_f32(&dir.join(format!("{name}_mean.bin")), &f32s(&z.mean))?;
            write_f32(&dir.join(format!("{name}_std.bin")), &f32s(&z.std))?;
        }
    }
    Ok(())
}

pub fn read_latents(dir: &Path) -> Result<LatentExtraction> {
    let raw = fs::read(dir.join("meta.json")).map_err(|e| Error::Format(format!("latents meta: {e}")))?;
    let meta: LatentMeta = serde_json::from_slice(&raw).map_err(|e| Error::Format(format!("latents meta: {e}")))?;
    if meta.format_version != FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported format_version {}", meta.format_version)));
    }
    let load = |name: &str, dim: usize| -> Result<LatentSeries> {
        let len = meta.n * meta.steps * dim;
        let up = |v: Vec<f32>| v.into_iter().map(f64::from).collect();
        Ok(LatentSeries {
            dim,
            mean: up(read_f32(&dir.join(format!("{name}_mean.bin")), len, &format!("{name}_mean"))?),
            std: up(read_f32(&dir.join(format!("{name}_std.bin")), len, &format!("{name}_std"))?),
        })
    };
    Ok(LatentExtraction {
        stage: meta.stage,
        n: meta.n,
        steps: meta.steps,
        z0: load("z0", meta.dz0)?,
        z1: meta.dz1.map(|d| load("z1", d)).transpose()?,
        z2: meta.dz2.map(|d| load("z2", d)).transpose()?,
    })
}

/// Latent means (deterministic) or seeded latent samples.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PredictMode {
    Mean,
    Sample { seed: u64 },
}

/// Predictive Gaussians for the next pair of observations.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub x1: DiagGaussian,
    pub x2: DiagGaussian,
}

fn to_prediction(tape: &Tape, g: (GaussVar, GaussVar)) -> Prediction {
    Prediction { x1: g.0.row(tape, 0), x2: g.1.row(tape, 0) }
}

fn check_prefix(ckpt: &Checkpoint, x1: &[f64], x2: &[f64]) -> Result<usize> {
    let (dx, dy) = (ckpt.spec.dx, ckpt.spec.dy);
    if x1.is_empty() || !x1.len().is_multiple_of(dx) || !x2.len().is_multiple_of(dy) || x1.len() / dx != x2.len() / dy {
        return Err(Error::ShapeMismatch(format!(
            "prefixes of {} and {} values do not form equal-length [t][{dx}] and [t][{dy}] blocks",
            x1.len(),
            x2.len()
        )));
    }
    Ok(x1.len() / dx)
}

/// Predictions for `x_{t+1}` at every position `t < len` of one sequence.
fn predict_prefixes(
    ckpt: &Checkpoint,
    model: &Model,
    x1: &[f64],
    x2: &[f64],
    len: usize,
    positions: std::ops::Range<usize>,
    stage: Stage,
    mode: PredictMode,
) -> Result<Vec<Prediction>> {
    let s = &ckpt.spec;
    let dim = model.predict_noise_dim(stage);
    let noise_seed = |seed| derive_seed(&[seed, PREDICT_STREAM]);
    if model.is_filtering() {
        let mut tape = Tape::new();
        let b = Batch::new(&mut tape, len, s.dx, s.dy, &[x1], &[x2]);
        let noise = match mode {
            PredictMode::Mean => None,
            PredictMode::Sample { seed } => Some(vec![sequence_noise(noise_seed(seed), 0, len * dim)]),
        };
        let out = model.predict_causal(&mut tape, &b, stage, len, noise.as_deref())?;
        return Ok(out[positions].iter().map(|g| to_prediction(&tape, *g)).collect());
    }
    positions
        .map(|t| {
            let mut tape = Tape::new();
            let l = t + 1;
            let b = Batch::new(&mut tape, l, s.dx, s.dy, &[&x1[..l * s.dx]], &[&x2[..l * s.dy]]);
            let noise = match mode {
                PredictMode::Mean => None,
                PredictMode::Sample { seed } => Some(vec![sequence_noise(noise_seed(seed), t, dim)]),
            };
            let g = model.dpcca_predict_last(&mut tape, &b, noise.as_deref())?;
            Ok(to_prediction(&tape, g))
        })
        .collect()
}

/// One-step-ahead prediction after a prefix `[t][dx]`, `[t][dy]` (flattened).
pub fn predict_next(
    ckpt: &Checkpoint,
    x1_prefix: &[f64],
    x2_prefix: &[f64],
    stage: Stage,
    mode: PredictMode,
) -> Result<Prediction> {
    check_stage(ckpt, stage)?;
    let len = check_prefix(ckpt, x1_prefix, x2_prefix)?;
    let model = ckpt.model()?;
    let mut out = predict_prefixes(ckpt, &model, x1_prefix, x2_prefix, len, len - 1..len, stage, mode)?;
    Ok(out.pop().expect("one prediction"))
}

/// Predictions of `x_{t+1}` for `t = 0..T−1` of sequence `seq`.
pub fn predict_all(
    ckpt: &Checkpoint,
    ds: &SequencePairDataset,
    seq: usize,
    stage: Stage,
    mode: PredictMode,
) -> Result<Vec<Prediction>> {
    check_stage(ckpt, stage)?;
    check_dims(ckpt, ds)?;
    if seq >= ds.n() {
        return Err(Error::IndexOutOfRange(format!("sequence {seq} of {}", ds.n())));
    }
    let model = ckpt.model()?;
    let up = |s: &[f32]| s.iter().map(|&v| v as f64).collect::<Vec<f64>>();
    let (x1, x2) = (up(ds.x1_seq(seq)), up(ds.x2_seq(seq)));
    let t = ds.t();
    predict_prefixes(ckpt, &model, &x1, &x2, t, 0..t - 1, stage, mode)
}
