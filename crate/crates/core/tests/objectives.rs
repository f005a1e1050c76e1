mod support;

use infodpcca::data::{generate_henon, HenonParams, SequencePairDataset};
use infodpcca::models::{
    objective_gradient, train_full, train_step1, Model, ModelKind, ModelSpec, Objective, TrainConfig,
};
use infodpcca::nets::DiagGaussian;
use infodpcca::objectives::{gauss_logpdf, IbWeights, LossBreakdown};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use support::LinearGaussian;

fn small_data() -> SequencePairDataset {
    generate_henon(&HenonParams { t_len: 8, n_seq: 6, dx: 4, dy: 3, seed: 2, ..HenonParams::default() }).unwrap()
}

fn toy_data() -> SequencePairDataset {
    generate_henon(&HenonParams { t_len: 20, n_seq: 16, dx: 6, dy: 6, seed: 0, ..HenonParams::default() }).unwrap()
}

fn spec(kind: ModelKind, dx: usize, dy: usize) -> ModelSpec {
    ModelSpec { rnn_hidden: 8, mlp_hidden: vec![8, 8], ..ModelSpec::new(kind, dx, dy) }
}

fn assert_identity(b: &LossBreakdown) {
    let r = b.recompute();
    assert!((b.total - r).abs() <= 1e-6 * r.abs().max(1.0), "total {} vs recomputed {r}", b.total);
}

#[test]
fn breakdown_totals_match_weighted_sums() {
    let data = small_data();
    let idx = [0, 1, 5];
    let w = IbWeights { alpha: 0.4, beta: 0.9, dvib_beta: 0.3, ..IbWeights::default() };
    for (kind, obj) in [
        (ModelKind::Dvib, Objective::Dvib),
        (ModelKind::Infodpcca, Objective::Step1),
        (ModelKind::Infodpcca, Objective::Step2),
        (ModelKind::Dpcca, Objective::Dpcca),
    ] {
        let m = Model::build(&spec(kind, 4, 3), 1).unwrap();
        let (b, _) = objective_gradient(&m, &data, &idx, obj, &w, 3).unwrap();
        assert_identity(&b);
    }
}

#[test]
fn step1_loss_is_affine_in_beta() {
    let data = small_data();
    let m = Model::build(&spec(ModelKind::Infodpcca, 4, 3), 2).unwrap();
    let at = |beta: f64| {
        let w = IbWeights { alpha: 0.5, beta, ..IbWeights::default() };
        objective_gradient(&m, &data, &[0, 2, 3], Objective::Step1, &w, 5).unwrap().0
    };
    let (l0, l1, l3) = (at(0.0), at(1.0), at(3.0));
    // L(β) = L(0) + β (2·compression − regularizer_x1 − regularizer_x2)
    let slope =
        2.0 * l0.term("compression").unwrap() - l0.term("regularizer_x1").unwrap() - l0.term("regularizer_x2").unwrap();
    assert!((l1.total - (l0.total + slope)).abs() < 1e-6);
    assert!((l3.total - (l0.total + 3.0 * slope)).abs() < 1e-6);
    assert!(((l3.total - l0.total) - 3.0 * (l1.total - l0.total)).abs() < 1e-6);
}

#[test]
fn zero_weights_reduce_step1_to_prediction_likelihood() {
    let data = small_data();
    let m = Model::build(&spec(ModelKind::Infodpcca, 4, 3), 3).unwrap();
    let w = IbWeights { alpha: 0.0, beta: 0.0, ..IbWeights::default() };
    let (b, g) = objective_gradient(&m, &data, &[1, 4], Objective::Step1, &w, 8).unwrap();
    let likelihood = b.term("recon_x1").unwrap() + b.term("recon_x2").unwrap();
    assert!((b.total + likelihood).abs() < 1e-6);
    // only the predictive path carries gradient: the single-view heads are untouched
    let untouched = ["q0_1/", "q0_2/"];
    for (i, info) in m.store.tensors().iter().enumerate() {
        if untouched.iter().any(|p| info.name.starts_with(p)) {
            let r = info.offset..info.offset + info.numel();
            assert!(g[r].iter().all(|v| *v == 0.0), "tensor {i} {} has gradient", info.name);
        }
    }
    // a zero-weight training run logs pure likelihood totals
    let cfg = TrainConfig { weights: w, max_epochs: 4, batch_size: 3, ..TrainConfig::default() };
    let ck = train_step1(m, &data, &cfg).unwrap();
    for h in &ck.history {
        let lik = h.breakdown.term("recon_x1").unwrap() + h.breakdown.term("recon_x2").unwrap();
        assert!((h.breakdown.total + lik).abs() < 1e-6);
    }
}

#[test]
fn single_step_elbo_bounds_the_marginal_likelihood() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for _ in 0..20 {
        let lg = LinearGaussian {
            a: rng.random_range(-2.0..2.0),
            s1: rng.random_range(0.3..1.5),
            c: rng.random_range(-2.0..2.0),
            s2: rng.random_range(0.3..1.5),
        };
        let (x1, x2) = (rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0));
        let log_px = lg.log_marginal(x1, x2);
        let draw = |rng: &mut ChaCha8Rng| -> [f64; 3] { std::array::from_fn(|_| StandardNormal.sample(rng)) };

        // Each reconstruction is quadratic in its own noise coordinate, so the
        // antithetic pair e = ±1 averages to the exact expectation.
        let expected = |q| 0.5 * (lg.elbo(x1, x2, q, [1.0; 3]) + lg.elbo(x1, x2, q, [-1.0; 3]));
        let exact =
            [LinearGaussian::posterior(lg.a, lg.s1, x1), (0.0, 1.0), LinearGaussian::posterior(lg.c, lg.s2, x2)];
        let tight = expected(exact);
        assert!((tight - log_px).abs() < 1e-9, "exact posterior: {tight} vs {log_px}");

        // any other posterior: the Monte Carlo average stays below log p(x)
        let q: [(f64, f64); 3] = std::array::from_fn(|_| (rng.random_range(-1.0..1.0), rng.random_range(0.3..1.5)));
        assert!(expected(q) < log_px);
        let n = 4000;
        let vals: Vec<f64> = (0..n).map(|_| lg.elbo(x1, x2, q, draw(&mut rng))).collect();
        let mean = vals.iter().sum::<f64>() / n as f64;
        let sd = (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt();
        assert!(mean <= log_px + 4.0 * sd / (n as f64).sqrt(), "MC ELBO {mean} > log p(x) {log_px}");
    }
}

#[test]
fn inflated_emission_std_lowers_reconstruction() {
    let mean = vec![0.2, -0.4, 1.0];
    let x: Vec<f64> = mean.iter().map(|m| m + 0.05).collect();
    let tight = gauss_logpdf(&DiagGaussian::new(mean.clone(), vec![0.3; 3]).unwrap(), &x).unwrap();
    let wide = gauss_logpdf(&DiagGaussian::new(mean, vec![3.0; 3]).unwrap(), &x).unwrap();
    assert!(wide < tight);
}

/// Epoch totals, oriented so that larger is better.
fn scores(history: &[infodpcca::models::HistoryEntry], stage: infodpcca::models::Stage) -> Vec<f64> {
    history
        .iter()
        .filter(|h| h.stage == stage)
        .map(|h| if stage == infodpcca::models::Stage::Step1 { -h.breakdown.total } else { h.breakdown.total })
        .collect()
}

/// Relative improvement from the first epoch to the best one.
fn improvement(s: &[f64]) -> f64 {
    let best = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    (best - s[0]) / s[0].abs()
}

/// Five-epoch moving averages never dip by more than 1% of the largest
/// magnitude they reach (the totals may cross zero).
fn assert_nearly_monotone(s: &[f64]) {
    let ma: Vec<f64> = s.windows(5).map(|w| w.iter().sum::<f64>() / 5.0).collect();
    let scale = ma.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    for w in ma.windows(2) {
        assert!(w[1] >= w[0] - 0.01 * scale, "moving average dipped {} → {} (scale {scale})", w[0], w[1]);
    }
}

#[test]
fn toy_training_improves_both_stages() {
    let data = toy_data();
    let spec = spec(ModelKind::Infodpcca, 6, 6);
    let cfg = TrainConfig { max_epochs: 200, batch_size: 16, seed: 0, learning_rate: 3e-3, ..TrainConfig::default() };
    let ck = train_full(&spec, &data, &cfg).unwrap();
    for stage in [infodpcca::models::Stage::Step1, infodpcca::models::Stage::Step2] {
        let s = scores(&ck.history, stage);
        assert!(improvement(&s) >= 0.10, "{stage}: improvement {:.3} over {} epochs", improvement(&s), s.len());
        assert_nearly_monotone(&s);
    }
    for h in &ck.history {
        assert_identity(&h.breakdown);
    }
}

#[test]
fn toy_training_improves_baselines() {
    let data = toy_data();
    let cfg = TrainConfig { max_epochs: 200, batch_size: 16, seed: 0, learning_rate: 3e-3, ..TrainConfig::default() };
    for kind in [ModelKind::Dvib, ModelKind::Dpcca] {
        let ck = train_full(&spec(kind, 6, 6), &data, &cfg).unwrap();
        let s = scores(&ck.history, ck.stage);
        assert!(improvement(&s) >= 0.10, "{kind}: improvement {:.3}", improvement(&s));
    }
}
