use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{ModelKind, ModelSpec, Stage};
use crate::error::{Error, Result};
use crate::nets::{reparam, Activation, Emitter, GateMode, GatedResidualEmitter, GaussVar, GaussianHead, Gru};
use crate::objectives::{
    dpcca_elbo, dvib_loss, step1_loss, step2_elbo, DvibOutputs, ElboOutputs, IbWeights, ObjectiveValue, Step1Outputs,
};
use crate::params::ParameterStore;
use crate::tape::{Tape, Var};

/// Components trained by the shared-latent stage and frozen afterwards.
pub fn step1_components() -> [&'static str; 7] {
    ["d1", "d2", "q0_12", "q0_1", "q0_2", "p1_0", "p2_0"]
}

/// Which objective a training run optimizes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Objective {
    Dvib,
    Step1,
    Step2,
    Dpcca,
}

impl Objective {
    pub fn stage(self) -> Stage {
        match self {
            Objective::Dvib | Objective::Step1 => Stage::Step1,
            Objective::Step2 | Objective::Dpcca => Stage::Step2,
        }
    }

    /// ELBOs are maximized; the trainer negates them.
    pub fn is_elbo(self) -> bool {
        matches!(self, Objective::Step2 | Objective::Dpcca)
    }

    pub(crate) fn tag(self) -> u64 {
        match self {
            Objective::Dvib => 1,
            Objective::Step1 => 2,
            Objective::Step2 => 3,
            Objective::Dpcca => 4,
        }
    }
}

/// Observations of a batch on a tape: one `rows × d` matrix per time step.
pub(crate) struct Batch {
    pub rows: usize,
    pub t: usize,
    pub x1: Vec<Var>,
    pub x2: Vec<Var>,
}

impl Batch {
    /// `x1[r]` is the `[T][dx]` block of row `r`, likewise `x2[r]`.
    pub fn new(tape: &mut Tape, t: usize, dx: usize, dy: usize, x1: &[&[f64]], x2: &[&[f64]]) -> Self {
        let rows = x1.len();
        let gather = |tape: &mut Tape, src: &[&[f64]], d: usize, step: usize| {
            let mut v = Vec::with_capacity(rows * d);
            for r in src {
                v.extend_from_slice(&r[step * d..(step + 1) * d]);
            }
            tape.constant(rows, d, v)
        };
        let x1v = (0..t).map(|s| gather(tape, x1, dx, s)).collect();
        let x2v = (0..t).map(|s| gather(tape, x2, dy, s)).collect();
        Self { rows, t, x1: x1v, x2: x2v }
    }
}

/// Per-row noise, `[steps][dim]` flattened, assembled into one matrix per step.
fn noise_at(tape: &mut Tape, noise: Option<&[Vec<f64>]>, step: usize, dim: usize) -> Option<Var> {
    let noise = noise?;
    let mut v = Vec::with_capacity(noise.len() * dim);
    for r in noise {
        v.extend_from_slice(&r[step * dim..(step + 1) * dim]);
    }
    Some(tape.constant(noise.len(), dim, v))
}

fn draw(tape: &mut Tape, g: GaussVar, noise: Option<Var>) -> Result<Var> {
    match noise {
        Some(e) => reparam(tape, g, e),
        None => Ok(g.mean),
    }
}

#[derive(Clone, Debug)]
enum Step2Emitter {
    Scratch(Emitter),
    Residual(GatedResidualEmitter),
}

impl Step2Emitter {
    fn forward(&self, tape: &mut Tape, store: &ParameterStore, z0: Var, zi: Var) -> Result<GaussVar> {
        match self {
            Step2Emitter::Scratch(e) => {
                let z = tape.concat(z0, zi);
                e.forward(tape, store, z)
            }
            Step2Emitter::Residual(e) => e.forward(tape, store, z0, zi, GateMode::Learned),
        }
    }
}

#[derive(Clone, Debug)]
struct DvibNets {
    enc: Gru,
    q_z: GaussianHead,
    dec: Emitter,
}

#[derive(Clone, Debug)]
struct DpccaNets {
    enc: Gru,
    q_post: GaussianHead,
    trans: [Emitter; 3],
    emit: [Emitter; 2],
}

#[derive(Clone, Debug)]
struct InfoNets {
    d: [Gru; 2],
    q012: GaussianHead,
    q0: [GaussianHead; 2],
    p0: [Emitter; 2],
    /// Fresh Step-II RNNs when the Step-I states are not reused.
    gen_rnn: Option<[Gru; 2]>,
    prior: [GaussianHead; 2],
    q_phi: GaussianHead,
    emit: [Step2Emitter; 2],
}

#[derive(Clone, Debug)]
enum Nets {
    Dvib(DvibNets),
    Dpcca(Box<DpccaNets>),
    Info(Box<InfoNets>),
}

/// A model's spec, parameters and wiring.
#[derive(Clone, Debug)]
pub struct Model {
    pub spec: ModelSpec,
    pub store: ParameterStore,
    nets: Nets,
}

fn build_nets(spec: &ModelSpec, store: &mut ParameterStore, rng: &mut ChaCha8Rng) -> Result<Nets> {
    spec.validate()?;
    let (dx, dy, h) = (spec.dx, spec.dy, spec.rnn_hidden);
    let id = Activation::Identity;
    let out = spec.emitter_output;
    let hidden = &spec.mlp_hidden;
    Ok(match spec.kind {
        ModelKind::Dvib => Nets::Dvib(DvibNets {
            enc: Gru::build(store, "enc", dx + dy, h, rng)?,
            q_z: GaussianHead::build(store, "q_z", h, spec.dz0, id, rng)?,
            dec: Emitter::build(store, "dec", spec.dz0, hidden, dx + dy, out, rng)?,
        }),
        ModelKind::Dpcca => {
            let dz = [spec.dz0, spec.dz1, spec.dz2];
            let enc = Gru::build(store, "enc", dx + dy, h, rng)?;
            let q_post = GaussianHead::build(store, "q_post", h + spec.dz_total(), spec.dz_total(), id, rng)?;
            let mut trans = Vec::new();
            for (i, d) in dz.iter().enumerate() {
                trans.push(Emitter::build(store, &format!("trans_z{i}"), *d, &hidden[..1], *d, id, rng)?);
            }
            let e1 = Emitter::build(store, "emit_x1", spec.dz0 + spec.dz1, hidden, dx, out, rng)?;
            let e2 = Emitter::build(store, "emit_x2", spec.dz0 + spec.dz2, hidden, dy, out, rng)?;
            let [t0, t1, t2]: [Emitter; 3] = trans.try_into().expect("three transitions");
            Nets::Dpcca(Box::new(DpccaNets { enc, q_post, trans: [t0, t1, t2], emit: [e1, e2] }))
        }
        ModelKind::Infodpcca => {
            let d1 = Gru::build(store, "d1", dx, h, rng)?;
            let d2 = Gru::build(store, "d2", dy, h, rng)?;
            let q012 = GaussianHead::build(store, "q0_12", 2 * h, spec.dz0, id, rng)?;
            let q01 = GaussianHead::build(store, "q0_1", h, spec.dz0, id, rng)?;
            let q02 = GaussianHead::build(store, "q0_2", h, spec.dz0, id, rng)?;
            let p10 = Emitter::build(store, "p1_0", spec.dz0, hidden, dx, out, rng)?;
            let p20 = Emitter::build(store, "p2_0", spec.dz0, hidden, dy, out, rng)?;
            let gen_rnn = if spec.reuse_rnn {
                None
            } else {
                Some([Gru::build(store, "g1", dx, h, rng)?, Gru::build(store, "g2", dy, h, rng)?])
            };
            let prior = [
                GaussianHead::build(store, "prior_z1", h, spec.dz1, id, rng)?,
                GaussianHead::build(store, "prior_z2", h, spec.dz2, id, rng)?,
            ];
            let q_phi = GaussianHead::build(store, "q_phi", 2 * h, spec.dz_total(), id, rng)?;
            let emit = if spec.residual_connection {
                // The frozen base supplies the first hidden layer's worth of
                // structure, so the fresh branch is one layer shallower.
                let branch: &[usize] = if hidden.len() > 1 { &hidden[1..] } else { hidden };
                let mk = |store: &mut ParameterStore, rng: &mut ChaCha8Rng, name: &str, base: &Emitter, dzi| {
                    GatedResidualEmitter::build(
                        store,
                        name,
                        base.clone(),
                        dzi,
                        branch,
                        hidden[0],
                        out,
                        spec.reuse_sigma1,
                        rng,
                    )
                    .map(Step2Emitter::Residual)
                };
                [mk(store, rng, "emit_x1", &p10, spec.dz1)?, mk(store, rng, "emit_x2", &p20, spec.dz2)?]
            } else {
                [
                    Step2Emitter::Scratch(Emitter::build(store, "emit_x1", spec.dz0 + spec.dz1, hidden, dx, out, rng)?),
                    Step2Emitter::Scratch(Emitter::build(store, "emit_x2", spec.dz0 + spec.dz2, hidden, dy, out, rng)?),
                ]
            };
            Nets::Info(Box::new(InfoNets {
                d: [d1, d2],
                q012,
                q0: [q01, q02],
                p0: [p10, p20],
                gen_rnn,
                prior,
                q_phi,
                emit,
            }))
        }
    })
}

/// Per-step outputs of a latent read-out: `z⁰`, and `z¹`, `z²` when present.
pub(crate) type LatentStep = [Option<GaussVar>; 3];

impl Model {
    /// Fresh parameters, deterministic in `seed`.
    pub fn build(spec: &ModelSpec, seed: u64) -> Result<Model> {
        let mut store = ParameterStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let nets = build_nets(spec, &mut store, &mut rng)?;
        store.round_to_f32();
        Ok(Model { spec: spec.clone(), store, nets })
    }

    /// Wires `spec` around existing parameters, checking that the tensor
    /// index matches what the spec builds.
    pub fn from_store(spec: &ModelSpec, store: ParameterStore) -> Result<Model> {
        let mut scratch = ParameterStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let nets = build_nets(spec, &mut scratch, &mut rng)?;
        let want = scratch.tensors();
        let have = store.tensors();
        if want.len() != have.len() {
            return Err(Error::Format(format!("spec builds {} tensors, parameters hold {}", want.len(), have.len())));
        }
        for (w, h) in want.iter().zip(have) {
            if w.name != h.name || w.shape != h.shape {
                return Err(Error::Format(format!(
                    "tensor {} {:?} does not match spec tensor {} {:?}",
                    h.name, h.shape, w.name, w.shape
                )));
            }
        }
        Ok(Model { spec: spec.clone(), store, nets })
    }

    /// Freezes every Step-I component; returns the number of tensors frozen.
    pub fn freeze_step1(&mut self) -> usize {
        step1_components().iter().map(|c| self.store.freeze_component(c)).sum()
    }

    /// Fresh Step-II emitter parameter count (scratch emitter, or residual
    /// branch plus gate).
    pub fn step2_emitter_params(&self) -> usize {
        ["emit_x1", "emit_x2", "emit_x1_branch", "emit_x2_branch", "emit_x1_gate", "emit_x2_gate"]
            .iter()
            .map(|c| self.store.count_component(c))
            .sum()
    }

    /// `(steps, dim)` of the noise one sequence needs for `objective`.
    pub(crate) fn noise_shape(&self, objective: Objective, t: usize) -> (usize, usize) {
        let s = &self.spec;
        match objective {
            Objective::Dvib | Objective::Step1 => (t - 1, s.dz0),
            Objective::Step2 => (t - 1, s.dz_total()),
            Objective::Dpcca => (t, s.dz_total()),
        }
    }

    /// Number of summed time steps per sequence, for normalization.
    pub(crate) fn objective_steps(&self, objective: Objective, t: usize) -> usize {
        self.noise_shape(objective, t).0
    }

    pub(crate) fn check_objective(&self, objective: Objective) -> Result<()> {
        let ok = matches!(
            (self.spec.kind, objective),
            (ModelKind::Dvib, Objective::Dvib)
                | (ModelKind::Dpcca, Objective::Dpcca)
                | (ModelKind::Infodpcca, Objective::Step1 | Objective::Step2)
        );
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidSpec(format!("{:?} objective does not apply to a {} model", objective, self.spec.kind)))
        }
    }

    /// Records `objective` for a batch on `tape`.
    pub(crate) fn objective(
        &self,
        tape: &mut Tape,
        b: &Batch,
        noise: &[Vec<f64>],
        objective: Objective,
        weights: &IbWeights,
        norm: f64,
    ) -> Result<ObjectiveValue> {
        self.check_objective(objective)?;
        if b.t < 2 {
            return Err(Error::ShapeMismatch("training needs sequences of length ≥ 2".into()));
        }
        match (&self.nets, objective) {
            (Nets::Dvib(n), Objective::Dvib) => {
                let out = self.dvib_forward(tape, n, b, b.t - 1, Some(noise))?;
                let targets: Vec<Var> = (1..b.t).map(|t| tape.concat(b.x1[t], b.x2[t])).collect();
                dvib_loss(tape, &out, &targets, weights.dvib_beta, norm)
            }
            (Nets::Info(n), Objective::Step1) => {
                let (out, _) = self.step1_forward(tape, n, b, b.t - 1, Some(noise))?;
                step1_loss(tape, &out, &b.x1[1..], &b.x2[1..], weights, norm)
            }
            (Nets::Info(n), Objective::Step2) => {
                let out = self.step2_forward(tape, n, b, Some(noise))?;
                step2_elbo(tape, &out, &b.x1[1..], &b.x2[1..], norm)
            }
            (Nets::Dpcca(n), Objective::Dpcca) => {
                let (out, _) = self.dpcca_forward(tape, n, b, b.t, Some(noise))?;
                dpcca_elbo(tape, &out, &b.x1, &b.x2, norm)
            }
            _ => unreachable!("checked above"),
        }
    }

    fn dvib_forward(
        &self,
        tape: &mut Tape,
        n: &DvibNets,
        b: &Batch,
        steps: usize,
        noise: Option<&[Vec<f64>]>,
    ) -> Result<DvibOutputs> {
        let st = &self.store;
        let xs: Vec<Var> = (0..steps).map(|t| tape.concat(b.x1[t], b.x2[t])).collect();
        let h = n.enc.run(tape, st, &xs)?;
        let mut out = DvibOutputs { encoder: Vec::new(), decoder: Vec::new() };
        for (t, &ht) in h.iter().enumerate() {
            let q = n.q_z.forward(tape, st, ht)?;
            let e = noise_at(tape, noise, t, self.spec.dz0);
            let z = draw(tape, q, e)?;
            out.decoder.push(n.dec.forward(tape, st, z)?);
            out.encoder.push(q);
        }
        Ok(out)
    }

    /// Shared-latent stage over positions `0..steps`; also returns the latent
    /// fed to the emitters at each step.
    fn step1_forward(
        &self,
        tape: &mut Tape,
        n: &InfoNets,
        b: &Batch,
        steps: usize,
        noise: Option<&[Vec<f64>]>,
    ) -> Result<(Step1Outputs, Vec<Var>)> {
        let st = &self.store;
        let h1 = n.d[0].run(tape, st, &b.x1[..steps])?;
        let h2 = n.d[1].run(tape, st, &b.x2[..steps])?;
        let mut out = Step1Outputs { q012: vec![], q01: vec![], q02: vec![], p10: vec![], p20: vec![] };
        let mut zs = Vec::with_capacity(steps);
        for t in 0..steps {
            let joint = tape.concat(h1[t], h2[t]);
            let q = n.q012.forward(tape, st, joint)?;
            let e = noise_at(tape, noise, t, self.spec.dz0);
            let z = draw(tape, q, e)?;
            out.q01.push(n.q0[0].forward(tape, st, h1[t])?);
            out.q02.push(n.q0[1].forward(tape, st, h2[t])?);
            out.p10.push(n.p0[0].forward(tape, st, z)?);
            out.p20.push(n.p0[1].forward(tape, st, z)?);
            out.q012.push(q);
            zs.push(z);
        }
        Ok((out, zs))
    }

    /// Hidden states feeding the private priors and the posterior.
    fn step2_states(&self, tape: &mut Tape, n: &InfoNets, b: &Batch, steps: usize) -> Result<[Vec<Var>; 2]> {
        let rnn = n.gen_rnn.as_ref().unwrap_or(&n.d);
        Ok([rnn[0].run(tape, &self.store, &b.x1[..steps])?, rnn[1].run(tape, &self.store, &b.x2[..steps])?])
    }

    fn step2_forward(
        &self,
        tape: &mut Tape,
        n: &InfoNets,
        b: &Batch,
        noise: Option<&[Vec<f64>]>,
    ) -> Result<ElboOutputs> {
        let st = &self.store;
        let s = &self.spec;
        let steps = b.t - 1;
        let d1 = n.d[0].run(tape, st, &b.x1[..steps])?;
        let d2 = n.d[1].run(tape, st, &b.x2[..steps])?;
        let [g1, g2] = if n.gen_rnn.is_some() {
            self.step2_states(tape, n, b, b.t)?
        } else {
            // Reused states: extend the Step-I runs by the final position.
            let mut a = d1.clone();
            let mut c = d2.clone();
            let last1 = n.d[0].step(tape, st, *d1.last().unwrap(), b.x1[steps])?;
            let last2 = n.d[1].step(tape, st, *d2.last().unwrap(), b.x2[steps])?;
            a.push(last1);
            c.push(last2);
            [a, c]
        };
        let mut out = ElboOutputs {
            posterior: [vec![], vec![], vec![]],
            prior: [vec![], vec![], vec![]],
            emit1: vec![],
            emit2: vec![],
        };
        for t in 0..steps {
            let joint_t = tape.concat(d1[t], d2[t]);
            let prior0 = n.q012.forward(tape, st, joint_t)?;
            let prior1 = n.prior[0].forward(tape, st, g1[t])?;
            let prior2 = n.prior[1].forward(tape, st, g2[t])?;
            let joint_next = tape.concat(g1[t + 1], g2[t + 1]);
            let post = n.q_phi.forward(tape, st, joint_next)?;
            let e = noise_at(tape, noise, t, s.dz_total());
            let z = draw(tape, post, e)?;
            let z0 = tape.slice_cols(z, 0, s.dz0);
            let z1 = tape.slice_cols(z, s.dz0, s.dz1);
            let z2 = tape.slice_cols(z, s.dz0 + s.dz1, s.dz2);
            out.emit1.push(n.emit[0].forward(tape, st, z0, z1)?);
            out.emit2.push(n.emit[1].forward(tape, st, z0, z2)?);
            out.posterior[0].push(post.slice(tape, 0, s.dz0));
            out.posterior[1].push(post.slice(tape, s.dz0, s.dz1));
            out.posterior[2].push(post.slice(tape, s.dz0 + s.dz1, s.dz2));
            out.prior[0].push(prior0);
            out.prior[1].push(prior1);
            out.prior[2].push(prior2);
        }
        Ok(out)
    }

    /// Backward-RNN smoothing posterior over positions `0..steps`; also
    /// returns the latent used at each step.
    fn dpcca_forward(
        &self,
        tape: &mut Tape,
        n: &DpccaNets,
        b: &Batch,
        steps: usize,
        noise: Option<&[Vec<f64>]>,
    ) -> Result<(ElboOutputs, Vec<Var>)> {
        let st = &self.store;
        let s = &self.spec;
        let dz = [s.dz0, s.dz1, s.dz2];
        let offs = [0, s.dz0, s.dz0 + s.dz1];
        let rev: Vec<Var> = (0..steps).rev().map(|t| tape.concat(b.x1[t], b.x2[t])).collect();
        let mut hb = n.enc.run(tape, st, &rev)?;
        hb.reverse();
        let mut z_prev = tape.zeros(b.rows, s.dz_total());
        let mut out = ElboOutputs {
            posterior: [vec![], vec![], vec![]],
            prior: [vec![], vec![], vec![]],
            emit1: vec![],
            emit2: vec![],
        };
        let mut zs = Vec::with_capacity(steps);
        for (t, &h) in hb.iter().enumerate() {
            let inp = tape.concat(h, z_prev);
            let post = n.q_post.forward(tape, st, inp)?;
            let e = noise_at(tape, noise, t, s.dz_total());
            let z = draw(tape, post, e)?;
            let parts: Vec<Var> = (0..3).map(|i| tape.slice_cols(z, offs[i], dz[i])).collect();
            for i in 0..3 {
                let prior = if t == 0 {
                    GaussVar::standard(tape, b.rows, dz[i])
                } else {
                    let prev = tape.slice_cols(z_prev, offs[i], dz[i]);
                    n.trans[i].forward(tape, st, prev)?
                };
                out.prior[i].push(prior);
                out.posterior[i].push(post.slice(tape, offs[i], dz[i]));
            }
            let a = tape.concat(parts[0], parts[1]);
            let c = tape.concat(parts[0], parts[2]);
            out.emit1.push(n.emit[0].forward(tape, st, a)?);
            out.emit2.push(n.emit[1].forward(tape, st, c)?);
            z_prev = z;
            zs.push(z);
        }
        Ok((out, zs))
    }

    /// Latent read-out for `steps` positions using means only.
    pub(crate) fn latents(&self, tape: &mut Tape, b: &Batch, stage: Stage, steps: usize) -> Result<Vec<LatentStep>> {
        let st = &self.store;
        let s = &self.spec;
        match (&self.nets, stage) {
            (Nets::Dvib(n), Stage::Step1) => {
                let out = self.dvib_forward(tape, n, b, steps, None)?;
                Ok(out.encoder.into_iter().map(|q| [Some(q), None, None]).collect())
            }
            (Nets::Info(n), Stage::Step1) => {
                let h1 = n.d[0].run(tape, st, &b.x1[..steps])?;
                let h2 = n.d[1].run(tape, st, &b.x2[..steps])?;
                (0..steps)
                    .map(|t| {
                        let joint = tape.concat(h1[t], h2[t]);
                        Ok([Some(n.q012.forward(tape, st, joint)?), None, None])
                    })
                    .collect()
            }
            (Nets::Info(n), Stage::Step2) => {
                if steps + 1 > b.t {
                    return Err(Error::ShapeMismatch("posterior at t needs observation t+1".into()));
                }
                let [g1, g2] = self.step2_states(tape, n, b, steps + 1)?;
                (0..steps)
                    .map(|t| {
                        let joint = tape.concat(g1[t + 1], g2[t + 1]);
                        let post = n.q_phi.forward(tape, st, joint)?;
                        Ok([
                            Some(post.slice(tape, 0, s.dz0)),
                            Some(post.slice(tape, s.dz0, s.dz1)),
                            Some(post.slice(tape, s.dz0 + s.dz1, s.dz2)),
                        ])
                    })
                    .collect()
            }
            (Nets::Dpcca(n), Stage::Step2) => {
                let (out, _) = self.dpcca_forward(tape, n, b, b.t, None)?;
                Ok((0..steps)
                    .map(|t| [Some(out.posterior[0][t]), Some(out.posterior[1][t]), Some(out.posterior[2][t])])
                    .collect())
            }
            _ => Err(Error::StageMismatch(format!("{} model has no {stage} latents", s.kind))),
        }
    }

    /// Latent dimensions the predictive path samples at each step.
    pub(crate) fn predict_noise_dim(&self, stage: Stage) -> usize {
        match stage {
            Stage::Step1 => self.spec.dz0,
            Stage::Step2 => self.spec.dz_total(),
        }
    }

    /// One-step-ahead predictive Gaussians of `(x¹_{t+1}, x²_{t+1})` for
    /// every position `t < steps`, built causally from `x_{≤t}`. Only the
    /// filtering models (`dvib`, `infodpcca`) support this batch form.
    pub(crate) fn predict_causal(
        &self,
        tape: &mut Tape,
        b: &Batch,
        stage: Stage,
        steps: usize,
        noise: Option<&[Vec<f64>]>,
    ) -> Result<Vec<(GaussVar, GaussVar)>> {
        let st = &self.store;
        let s = &self.spec;
        match (&self.nets, stage) {
            (Nets::Dvib(n), Stage::Step1) => {
                let out = self.dvib_forward(tape, n, b, steps, noise)?;
                Ok(out.decoder.into_iter().map(|g| (g.slice(tape, 0, s.dx), g.slice(tape, s.dx, s.dy))).collect())
            }
            (Nets::Info(n), Stage::Step1) => {
                let (out, _) = self.step1_forward(tape, n, b, steps, noise)?;
                Ok(out.p10.into_iter().zip(out.p20).collect())
            }
            (Nets::Info(n), Stage::Step2) => {
                let h1 = n.d[0].run(tape, st, &b.x1[..steps])?;
                let h2 = n.d[1].run(tape, st, &b.x2[..steps])?;
                let [g1, g2] = self.step2_states(tape, n, b, steps)?;
                let mut preds = Vec::with_capacity(steps);
                for t in 0..steps {
                    let joint = tape.concat(h1[t], h2[t]);
                    let p0 = n.q012.forward(tape, st, joint)?;
                    let p1 = n.prior[0].forward(tape, st, g1[t])?;
                    let p2 = n.prior[1].forward(tape, st, g2[t])?;
                    let e = noise_at(tape, noise, t, s.dz_total());
                    let (e0, e1, e2) = match e {
                        Some(e) => (
                            Some(tape.slice_cols(e, 0, s.dz0)),
                            Some(tape.slice_cols(e, s.dz0, s.dz1)),
                            Some(tape.slice_cols(e, s.dz0 + s.dz1, s.dz2)),
                        ),
                        None => (None, None, None),
                    };
                    let z0 = draw(tape, p0, e0)?;
                    let z1 = draw(tape, p1, e1)?;
                    let z2 = draw(tape, p2, e2)?;
                    preds.push((n.emit[0].forward(tape, st, z0, z1)?, n.emit[1].forward(tape, st, z0, z2)?));
                }
                Ok(preds)
            }
            (Nets::Dpcca(_), Stage::Step2) => {
                Err(Error::InvalidSpec("the state-space baseline predicts one prefix at a time".into()))
            }
            _ => Err(Error::StageMismatch(format!("{} model cannot predict at {stage}", s.kind))),
        }
    }

    /// State-space baseline: predictive Gaussians for the step after the last
    /// position of the batch, from the smoothed posterior mean (or a sample)
    /// at that position pushed through the transitions.
    pub(crate) fn dpcca_predict_last(
        &self,
        tape: &mut Tape,
        b: &Batch,
        noise: Option<&[Vec<f64>]>,
    ) -> Result<(GaussVar, GaussVar)> {
        let Nets::Dpcca(n) = &self.nets else {
            return Err(Error::InvalidSpec("not a state-space baseline".into()));
        };
        let st = &self.store;
        let s = &self.spec;
        let (out, _) = self.dpcca_forward(tape, n, b, b.t, None)?;
        let dz = [s.dz0, s.dz1, s.dz2];
        let mut z = Vec::new();
        let e = noise_at(tape, noise, 0, s.dz_total());
        let mut off = 0;
        for i in 0..3 {
            let last = *out.posterior[i].last().expect("non-empty prefix");
            let prior = n.trans[i].forward(tape, st, last.mean)?;
            let ei = e.map(|e| tape.slice_cols(e, off, dz[i]));
            z.push(draw(tape, prior, ei)?);
            off += dz[i];
        }
        let a = tape.concat(z[0], z[1]);
        let c = tape.concat(z[0], z[2]);
        Ok((n.emit[0].forward(tape, st, a)?, n.emit[1].forward(tape, st, c)?))
    }

    pub(crate) fn is_filtering(&self) -> bool {
        !matches!(self.nets, Nets::Dpcca(_))
    }

    /// Residual emitters of the generative stage, for gate-forcing checks.
    pub fn residual_emitters(&self) -> Option<[&GatedResidualEmitter; 2]> {
        match &self.nets {
            Nets::Info(n) => match (&n.emit[0], &n.emit[1]) {
                (Step2Emitter::Residual(a), Step2Emitter::Residual(b)) => Some([a, b]),
                _ => None,
            },
            _ => None,
        }
    }
}
