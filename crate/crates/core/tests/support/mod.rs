//! Finite-difference gradient checks and a closed-form linear-Gaussian
//! model, shared by the test targets that need them.
#![allow(dead_code)]

use std::f64::consts::PI;

use infodpcca::data::{generate_henon, HenonParams};
use infodpcca::models::{objective_gradient, Model, ModelKind, ModelSpec, Objective};
use infodpcca::nets::{
    gated_residual_emit, gaussian_head, gru_step, mlp_forward, Activation, DiagGaussian, Emitter, GateMode,
    GatedResidualEmitter, GaussVar, GaussianHead, Gru, Mlp, MlpSpec, RnnState,
};
use infodpcca::objectives::{dpcca_elbo, ElboOutputs, IbWeights};
use infodpcca::params::ParameterStore;
use infodpcca::tape::{Tape, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const INSTANCES: u64 = 20;
const TOL: f64 = 1e-4;
const H: f64 = 1e-5;

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nb).max(1e-8)
}

fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.5..1.5)).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Central differences of `f` over every store value and every input entry.
fn numeric(store: &ParameterStore, input: &[f64], f: impl Fn(&ParameterStore, &[f64]) -> f64) -> (Vec<f64>, Vec<f64>) {
    let mut s = store.clone();
    let mut gp = vec![0.0; s.num_values()];
    for i in 0..gp.len() {
        let v = s.flat()[i];
        s.flat_mut()[i] = v + H;
        let up = f(&s, input);
        s.flat_mut()[i] = v - H;
        let down = f(&s, input);
        s.flat_mut()[i] = v;
        gp[i] = (up - down) / (2.0 * H);
    }
    let mut x = input.to_vec();
    let mut gx = vec![0.0; x.len()];
    for i in 0..x.len() {
        let v = x[i];
        x[i] = v + H;
        let up = f(store, &x);
        x[i] = v - H;
        let down = f(store, &x);
        x[i] = v;
        gx[i] = (up - down) / (2.0 * H);
    }
    (gp, gx)
}

/// `Σ c ⊙ y` recorded on the tape, with its parameter and input gradients.
fn analytic(
    store: &ParameterStore,
    input: &[f64],
    c: &[f64],
    forward: impl Fn(&mut Tape, Var) -> Var,
) -> (Vec<f64>, Vec<f64>) {
    let mut tape = Tape::new();
    let x = tape.input(1, input.len(), input.to_vec());
    let y = forward(&mut tape, x);
    let cv = tape.constant(1, c.len(), c.to_vec());
    let p = tape.mul(y, cv);
    let s = tape.sum(p);
    let g = tape.backward(s);
    let mut gp = vec![0.0; store.num_values()];
    g.accumulate_params(&tape, store, &mut gp);
    let gx = g.wrt(x).map_or_else(|| vec![0.0; input.len()], <[f64]>::to_vec);
    (gp, gx)
}

fn assert_close(what: &str, i: u64, a: (Vec<f64>, Vec<f64>), n: (Vec<f64>, Vec<f64>)) {
    let ep = rel_err(&a.0, &n.0);
    let ex = rel_err(&a.1, &n.1);
    assert!(ep < TOL && ex < TOL, "{what} instance {i}: param rel err {ep:.3e}, input rel err {ex:.3e}");
}

fn random_activation(rng: &mut ChaCha8Rng) -> Activation {
    [Activation::Relu, Activation::Sigmoid, Activation::Tanh, Activation::Softplus, Activation::Identity]
        [rng.random_range(0..5)]
}

pub fn mlp_forward_gradients() {
    for i in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + i);
        let depth = rng.random_range(1..4);
        let widths: Vec<usize> = (0..=depth).map(|_| rng.random_range(1..5)).collect();
        let acts = (0..depth).map(|_| random_activation(&mut rng)).collect();
        let mut store = ParameterStore::new();
        let mlp = Mlp::build(&mut store, "m", &MlpSpec::new(widths.clone(), acts).unwrap(), &mut rng).unwrap();
        let x = rand_vec(&mut rng, widths[0]);
        let c = rand_vec(&mut rng, *widths.last().unwrap());
        let a = analytic(&store, &x, &c, |t, x| mlp.forward(t, &store, x).unwrap());
        let n = numeric(&store, &x, |s, x| dot(&mlp_forward(s, &mlp, x).unwrap(), &c));
        assert_close("mlp", i, a, n);
    }
}

pub fn gru_step_gradients() {
    for i in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(200 + i);
        let (din, dh) = (rng.random_range(1..5), rng.random_range(1..5));
        let mut store = ParameterStore::new();
        let gru = Gru::build(&mut store, "g", din, dh, &mut rng).unwrap();
        // biases start at zero; move them off so their gradients are generic
        for v in store.flat_mut() {
            *v += rng.random_range(-0.3..0.3);
        }
        // input is [h, x] so both get checked
        let hx = rand_vec(&mut rng, dh + din);
        let c = rand_vec(&mut rng, dh);
        let a = analytic(&store, &hx, &c, |t, v| {
            let h = t.slice_cols(v, 0, dh);
            let x = t.slice_cols(v, dh, din);
            gru.step(t, &store, h, x).unwrap()
        });
        let n = numeric(&store, &hx, |s, v| {
            let h = RnnState { h: v[..dh].to_vec() };
            dot(&gru_step(s, &gru, &h, &v[dh..]).unwrap().h, &c)
        });
        assert_close("gru", i, a, n);
    }
}

pub fn gaussian_head_gradients() {
    for i in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(300 + i);
        let (din, dout) = (rng.random_range(1..5), rng.random_range(1..4));
        let act = random_activation(&mut rng);
        let mut store = ParameterStore::new();
        let head = GaussianHead::build(&mut store, "q", din, dout, act, &mut rng).unwrap();
        let x = rand_vec(&mut rng, din);
        let c = rand_vec(&mut rng, 2 * dout);
        let a = analytic(&store, &x, &c, |t, x| {
            let g = head.forward(t, &store, x).unwrap();
            t.concat(g.mean, g.std)
        });
        let n = numeric(&store, &x, |s, x| {
            let g = gaussian_head(s, &head, x).unwrap();
            dot(&g.mean, &c[..dout]) + dot(&g.std, &c[dout..])
        });
        assert_close("gaussian head", i, a, n);
    }
}

pub fn gated_residual_emit_gradients() {
    for i in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(400 + i);
        let (d0, di, dout) = (rng.random_range(1..4), rng.random_range(1..4), rng.random_range(1..4));
        let hidden = [rng.random_range(2..5), rng.random_range(2..5)];
        let reuse_sigma1 = rng.random_bool(0.5);
        let act = random_activation(&mut rng);
        let mut store = ParameterStore::new();
        let base = Emitter::build(&mut store, "p", d0, &hidden, dout, act, &mut rng).unwrap();
        let emitter = GatedResidualEmitter::build(
            &mut store,
            "e",
            base,
            di,
            &hidden[1..],
            hidden[0],
            act,
            reuse_sigma1,
            &mut rng,
        )
        .unwrap();
        let z = rand_vec(&mut rng, d0 + di);
        let c = rand_vec(&mut rng, 2 * dout);
        let a = analytic(&store, &z, &c, |t, v| {
            let z0 = t.slice_cols(v, 0, d0);
            let zi = t.slice_cols(v, d0, di);
            let g = emitter.forward(t, &store, z0, zi, GateMode::Learned).unwrap();
            t.concat(g.mean, g.std)
        });
        let n = numeric(&store, &z, |s, v| {
            let g = gated_residual_emit(s, &emitter, &v[..d0], &v[d0..], GateMode::Learned).unwrap();
            dot(&g.mean, &c[..dout]) + dot(&g.std, &c[dout..])
        });
        assert_close("gated residual emitter", i, a, n);
    }
}

/// A random tiny model and data set, and the objective it trains.
fn objective_instance(kind: ModelKind, seed: u64) -> (Model, infodpcca::data::SequencePairDataset) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (dx, dy) = (rng.random_range(1..4), rng.random_range(1..4));
    let spec = ModelSpec {
        dz0: rng.random_range(1..3),
        dz1: rng.random_range(1..3),
        dz2: rng.random_range(1..3),
        rnn_hidden: rng.random_range(2..4),
        mlp_hidden: vec![rng.random_range(2..4), rng.random_range(2..4)],
        residual_connection: rng.random_bool(0.5),
        reuse_rnn: rng.random_bool(0.5),
        reuse_sigma1: rng.random_bool(0.5),
        emitter_output: if rng.random_bool(0.5) { Activation::Identity } else { Activation::Tanh },
        ..ModelSpec::new(kind, dx, dy)
    };
    let data = generate_henon(&HenonParams {
        t_len: rng.random_range(2..5),
        n_seq: 3,
        dx,
        dy,
        seed,
        ..HenonParams::default()
    })
    .unwrap();
    let mut model = Model::build(&spec, seed).unwrap();
    for v in model.store.flat_mut() {
        *v += rng.random_range(-0.2..0.2);
    }
    (model, data)
}

fn check_objective(kind: ModelKind, objective: Objective, base_seed: u64) {
    for i in 0..INSTANCES {
        let (model, data) = objective_instance(kind, base_seed + i);
        let weights = IbWeights { alpha: 0.7, beta: 0.3, dvib_beta: 0.5, ..IbWeights::default() };
        let idx = [0, 2];
        let (_, analytic) = objective_gradient(&model, &data, &idx, objective, &weights, 9).unwrap();
        let (numeric, _) = numeric(&model.store, &[], |s, _| {
            let m = Model::from_store(&model.spec, s.clone()).unwrap();
            objective_gradient(&m, &data, &idx, objective, &weights, 9).unwrap().0.total
        });
        let e = rel_err(&analytic, &numeric);
        assert!(e < TOL, "{objective:?} instance {i} ({:?}): rel err {e:.3e}", model.spec);
    }
}

pub fn dvib_loss_gradients() {
    check_objective(ModelKind::Dvib, Objective::Dvib, 500);
}

pub fn step1_loss_gradients() {
    check_objective(ModelKind::Infodpcca, Objective::Step1, 600);
}

pub fn step2_elbo_gradients() {
    check_objective(ModelKind::Infodpcca, Objective::Step2, 700);
}

pub fn dpcca_elbo_gradients() {
    check_objective(ModelKind::Dpcca, Objective::Dpcca, 800);
}

/// Standard-normal latents, `x¹ = a·z⁰ + N(0, s₁²)`, `x² = c·z² + N(0, s₂²)`,
/// `z¹` unused: one step of a linear-Gaussian state-space model whose exact
/// posterior is diagonal.
pub struct LinearGaussian {
    pub a: f64,
    pub s1: f64,
    pub c: f64,
    pub s2: f64,
}

impl LinearGaussian {
    pub fn log_marginal(&self, x1: f64, x2: f64) -> f64 {
        let lp = |x: f64, var: f64| -0.5 * (x * x / var + (2.0 * PI * var).ln());
        lp(x1, self.a * self.a + self.s1 * self.s1) + lp(x2, self.c * self.c + self.s2 * self.s2)
    }

    pub fn posterior(w: f64, s: f64, x: f64) -> (f64, f64) {
        let prec = 1.0 + w * w / (s * s);
        (w * x / (s * s) / prec, (1.0 / prec).sqrt())
    }

    /// Single-sample ELBO under `q = N(m, sd²)` per latent with noise `e`.
    pub fn elbo(&self, x1: f64, x2: f64, q: [(f64, f64); 3], e: [f64; 3]) -> f64 {
        let mut t = Tape::new();
        let g = |t: &mut Tape, m: f64, s: f64| GaussVar::from_plain(t, &DiagGaussian::new(vec![m], vec![s]).unwrap());
        let z: Vec<f64> = (0..3).map(|i| q[i].0 + q[i].1 * e[i]).collect();
        let posterior =
            [vec![g(&mut t, q[0].0, q[0].1)], vec![g(&mut t, q[1].0, q[1].1)], vec![g(&mut t, q[2].0, q[2].1)]];
        let prior = [vec![g(&mut t, 0.0, 1.0)], vec![g(&mut t, 0.0, 1.0)], vec![g(&mut t, 0.0, 1.0)]];
        let out = ElboOutputs {
            posterior,
            prior,
            emit1: vec![g(&mut t, self.a * z[0], self.s1)],
            emit2: vec![g(&mut t, self.c * z[2], self.s2)],
        };
        let x1v = t.constant(1, 1, vec![x1]);
        let x2v = t.constant(1, 1, vec![x2]);
        let v = dpcca_elbo(&mut t, &out, &[x1v], &[x2v], 1.0).unwrap();
        t.scalar(v.total)
    }
}
