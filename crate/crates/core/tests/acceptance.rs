//! Acceptance checks for the whole pipeline. Every test prints one
//! `PASS`/`FAIL` line (run with `--nocapture` to see them). The Hénon and
//! grouped benchmarks train real models and take tens of minutes on one core;
//! the full-scale run (N = 1000, T = 300, d = 120) is opt-in (`-- --ignored`).

mod support;

use std::any::Any;
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::sync::OnceLock;
use std::time::Instant;

use infodpcca::data::{
    generate_grouped, generate_henon, read_dataset, split, write_dataset, HenonParams, SequencePairDataset, SplitSpec,
};
use infodpcca::eval::{
    cluster_report, corr_for_extraction, coverage, global_mean_corr, nmi, pca_features, pool_features, recon_report,
    silhouette,
};
use infodpcca::models::{
    extract_latents, load_checkpoint, objective_gradient, save_checkpoint, step1_components, train_full, train_step1,
    train_step2, train_step2_only, write_latents, Checkpoint, ExtractStage, Model, ModelKind, ModelSpec, Objective,
    Stage, TrainConfig,
};
use infodpcca::nets::{gated_residual_emit, Activation, DiagGaussian, Emitter, GateMode, GatedResidualEmitter};
use infodpcca::objectives::{gauss_cross_entropy, gauss_entropy, kl_diag_gauss, IbWeights};
use infodpcca::params::ParameterStore;
use infodpcca::tape::Tape;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use support::LinearGaussian;

const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

type Outcome = Result<String, String>;

fn panic_text(p: Box<dyn Any + Send>) -> String {
    p.downcast_ref::<String>()
        .cloned()
        .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
        .unwrap_or_else(|| "panic".into())
}

/// Runs one criterion, prints its verdict line and fails the test on `Err`.
fn criterion(name: &str, check: impl FnOnce() -> Outcome) {
    let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| Err(panic_text(p)));
    match outcome {
        Ok(detail) => println!("PASS {name}: {detail}"),
        Err(detail) => {
            println!("FAIL {name}: {detail}");
            panic!("{name}: {detail}");
        }
    }
}

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

// ---- Hénon benchmark ---------------------------------------------------

fn desk_spec() -> ModelSpec {
    ModelSpec { dx: 30, dy: 30, rnn_hidden: 32, mlp_hidden: vec![32, 32], ..ModelSpec::default() }
}

fn desk_config(seed: u64) -> TrainConfig {
    TrainConfig { seed, max_epochs: 200, learning_rate: 1e-3, ..TrainConfig::default() }
}

struct HenonRun {
    seed: u64,
    full: f64,
    ablation: f64,
    coverage: f64,
    minutes: f64,
}

fn henon_desk(seed: u64) -> (SequencePairDataset, SequencePairDataset) {
    let p = HenonParams { n_seq: 200, t_len: 100, dx: 30, dy: 30, seed, ..HenonParams::default() };
    split(&generate_henon(&p).unwrap(), &SplitSpec { train_fraction: 0.8, seed }).unwrap()
}

fn posterior_rho(ckpt: &Checkpoint, test: &SequencePairDataset) -> f64 {
    corr_for_extraction(test, &extract_latents(ckpt, test, ExtractStage::Step2Posterior).unwrap()).unwrap().rho_hat
}

/// Full two-step training and the Step-II-only ablation on every seed,
/// scored on the held-out split. Shared by the correlation and coverage checks.
fn henon_runs() -> &'static [HenonRun] {
    static RUNS: OnceLock<Vec<HenonRun>> = OnceLock::new();
    RUNS.get_or_init(|| {
        SEEDS
            .iter()
            .map(|&seed| {
                let (train, test) = henon_desk(seed);
                let start = Instant::now();
                let full = train_full(&desk_spec(), &train, &desk_config(seed)).unwrap();
                let ablation = train_step2_only(&desk_spec(), &train, &desk_config(seed)).unwrap();
                let run = HenonRun {
                    seed,
                    full: posterior_rho(&full, &test),
                    ablation: posterior_rho(&ablation, &test),
                    coverage: coverage(&full, &test, Stage::Step2).unwrap(),
                    minutes: start.elapsed().as_secs_f64() / 60.0,
                };
                println!(
                    "  seed {}: rho full {:.3}, step-2 only {:.3}, coverage {:.3}, {:.1} min",
                    run.seed, run.full, run.ablation, run.coverage, run.minutes
                );
                run
            })
            .collect()
    })
}

#[test]
fn henon_shared_latents_correlate_and_beat_step2_only() {
    criterion("Hénon desk-scale correlation", || {
        let runs = henon_runs();
        let low: Vec<_> = runs.iter().filter(|r| r.full < 0.60).map(|r| (r.seed, r.full)).collect();
        let wins = runs.iter().filter(|r| r.full > r.ablation).count();
        let slowest = runs.iter().map(|r| r.minutes).fold(0.0, f64::max);
        let mean = runs.iter().map(|r| r.full).sum::<f64>() / runs.len() as f64;
        let detail = format!(
            "mean rho {mean:.3}, every seed >= 0.60: {}, beats step-2 only in {wins}/5, slowest seed {slowest:.1} min",
            low.is_empty()
        );
        ensure(low.is_empty(), || format!("{detail}; below 0.60: {low:?}"))?;
        ensure(wins >= 3, || detail.clone())?;
        ensure(slowest <= 30.0, || detail.clone())?;
        Ok(detail)
    });
}

#[test]
fn henon_predictions_cover_held_out_observations() {
    criterion("held-out reconstruction coverage", || {
        let runs = henon_runs();
        let worst = runs.iter().map(|r| r.coverage).fold(1.0, f64::min);
        let detail = format!("lowest coverage over seeds {worst:.3} (need >= 0.90)");
        ensure(worst >= 0.90, || detail.clone())?;
        Ok(detail)
    });
}

#[test]
#[ignore = "full-scale run: days on a single core"]
fn henon_full_scale_replication() {
    criterion("Hénon full-scale correlation", || {
        let p = HenonParams::default();
        let (train, test) = split(&generate_henon(&p).unwrap(), &SplitSpec::default()).unwrap();
        let spec = ModelSpec { dx: p.dx, dy: p.dy, ..ModelSpec::default() };
        let ckpt = train_full(&spec, &train, &TrainConfig::default()).unwrap();
        let rho = posterior_rho(&ckpt, &test);
        let detail = format!("rho {rho:.3} (need 0.72 ± 0.08)");
        ensure((rho - 0.72).abs() <= 0.08, || detail.clone())?;
        Ok(detail)
    });
}

// ---- grouped clustering ------------------------------------------------

#[test]
fn grouped_step1_features_cluster_regimes_better_than_pca() {
    criterion("grouped clustering", || {
        let mut lines = Vec::new();
        let mut wins = 0;
        let mut worst: f64 = 1.0;
        for seed in SEEDS {
            let base = HenonParams { t_len: 100, dx: 30, dy: 30, ..HenonParams::default() };
            let ds =
                generate_grouped(&HenonParams { a: 1.4, ..base.clone() }, &HenonParams { a: 1.2, ..base }, 40, seed)
                    .unwrap();
            let truth: Vec<usize> = ds.labels.as_ref().unwrap().iter().map(|&l| l as usize).collect();
            let cfg = TrainConfig { max_epochs: 100, ..desk_config(seed) };
            let s1 = train_step1(Model::build(&desk_spec(), seed).unwrap(), &ds, &cfg).unwrap();
            let ex = extract_latents(&s1, &ds, ExtractStage::Step1Prior).unwrap();
            let latent = cluster_report(&pool_features(&ex), &truth, 2, seed, 10, "step1").unwrap().nmi;
            let pca = cluster_report(&pca_features(&ds, 2).unwrap(), &truth, 2, seed, 10, "pca").unwrap().nmi;
            println!("  seed {seed}: NMI step-1 {latent:.3}, PCA {pca:.3}");
            worst = worst.min(latent);
            wins += usize::from(pca < latent);
            lines.push(format!("{latent:.3}/{pca:.3}"));
        }
        let detail =
            format!("NMI step-1/PCA per seed [{}], lowest step-1 {worst:.3}, PCA lower in {wins}/5", lines.join(", "));
        ensure(worst >= 0.8 && wins >= 3, || detail.clone())?;
        Ok(detail)
    });
}

// ---- gradients, algebra, invariants, metrics, determinism ---------------

#[test]
fn analytic_gradients_match_finite_differences() {
    criterion("finite-difference gradients", || {
        support::mlp_forward_gradients();
        support::gru_step_gradients();
        support::gaussian_head_gradients();
        support::gated_residual_emit_gradients();
        support::dvib_loss_gradients();
        support::step1_loss_gradients();
        support::step2_elbo_gradients();
        support::dpcca_elbo_gradients();
        Ok("8 functions × 20 random instances, relative error < 1e-4".into())
    });
}

fn random_gaussian(rng: &mut ChaCha8Rng, d: usize) -> DiagGaussian {
    DiagGaussian::new(
        (0..d).map(|_| rng.random_range(-3.0..3.0)).collect(),
        (0..d).map(|_| rng.random_range(0.05..4.0)).collect(),
    )
    .unwrap()
}

fn tiny_data() -> SequencePairDataset {
    generate_henon(&HenonParams { t_len: 12, n_seq: 10, dx: 4, dy: 3, seed: 1, ..HenonParams::default() }).unwrap()
}

fn tiny_spec(kind: ModelKind) -> ModelSpec {
    ModelSpec { rnn_hidden: 6, mlp_hidden: vec![6, 5], ..ModelSpec::new(kind, 4, 3) }
}

fn tiny_config() -> TrainConfig {
    TrainConfig { max_epochs: 3, batch_size: 4, chunk_size: 2, seed: 11, ..TrainConfig::default() }
}

#[test]
fn objective_algebra_holds() {
    criterion("objective algebra", || {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut worst_ce: f64 = 0.0;
        for _ in 0..500 {
            let d = rng.random_range(1..6);
            let (q, p) = (random_gaussian(&mut rng, d), random_gaussian(&mut rng, d));
            let ce = gauss_cross_entropy(&q, &p).unwrap();
            worst_ce = worst_ce.max((ce - gauss_entropy(&q) - kl_diag_gauss(&q, &p).unwrap()).abs());
        }
        ensure(worst_ce < 1e-8, || format!("CE − H − KL reached {worst_ce:.2e}"))?;

        let data = tiny_data();
        let idx = [0, 3, 7];
        let w = IbWeights { alpha: 0.4, beta: 0.9, dvib_beta: 0.3, ..IbWeights::default() };
        let mut worst_total: f64 = 0.0;
        for (kind, obj) in [
            (ModelKind::Dvib, Objective::Dvib),
            (ModelKind::Infodpcca, Objective::Step1),
            (ModelKind::Infodpcca, Objective::Step2),
            (ModelKind::Dpcca, Objective::Dpcca),
        ] {
            let m = Model::build(&tiny_spec(kind), 1).unwrap();
            let (b, _) = objective_gradient(&m, &data, &idx, obj, &w, 3).unwrap();
            worst_total = worst_total.max((b.total - b.recompute()).abs());
        }
        ensure(worst_total < 1e-6, || format!("breakdown total off by {worst_total:.2e}"))?;

        let m = Model::build(&tiny_spec(ModelKind::Infodpcca), 2).unwrap();
        let at = |alpha: f64, beta: f64| {
            let w = IbWeights { alpha, beta, ..IbWeights::default() };
            objective_gradient(&m, &data, &idx, Objective::Step1, &w, 5).unwrap().0
        };
        let (l0, l1, l3) = (at(0.5, 0.0), at(0.5, 1.0), at(0.5, 3.0));
        let linearity = ((l3.total - l0.total) - 3.0 * (l1.total - l0.total)).abs();
        ensure(linearity < 1e-6, || format!("β-linearity residual {linearity:.2e}"))?;

        let z = at(0.0, 0.0);
        let recon = z.term("recon_x1").unwrap() + z.term("recon_x2").unwrap();
        let reduction = (z.total + recon).abs();
        ensure(reduction < 1e-6, || format!("α=β=0 total differs from −reconstruction by {reduction:.2e}"))?;
        Ok(format!(
            "CE=H+KL within {worst_ce:.1e}, totals within {worst_total:.1e}, β-linearity {linearity:.1e}, \
             α=β=0 reduction {reduction:.1e}"
        ))
    });
}

fn perturb_from(ds: &SequencePairDataset, from: usize) -> SequencePairDataset {
    let mut out = ds.clone();
    let (t, dx, dy) = (ds.t(), ds.dx(), ds.dy());
    for n in 0..ds.n() {
        for s in from..t {
            out.x1[(n * t + s) * dx..(n * t + s + 1) * dx].iter_mut().for_each(|v| *v += 0.9);
            out.x2[(n * t + s) * dy..(n * t + s + 1) * dy].iter_mut().for_each(|v| *v -= 1.1);
        }
    }
    out
}

/// All latent means of sequence `n` up to and including step `last`.
fn prefix(ex: &infodpcca::models::LatentExtraction, n: usize, last: usize) -> Vec<f64> {
    let mut out = Vec::new();
    for z in [Some(&ex.z0), ex.z1.as_ref(), ex.z2.as_ref()].into_iter().flatten() {
        let row = n * ex.steps * z.dim;
        out.extend_from_slice(&z.mean[row..row + (last + 1) * z.dim]);
    }
    out
}

#[test]
fn structural_invariants_hold() {
    criterion("structural invariants", || {
        let data = tiny_data();
        let spec = tiny_spec(ModelKind::Infodpcca);
        let s1 = train_step1(Model::build(&spec, 0).unwrap(), &data, &tiny_config()).unwrap();
        let s2 = train_step2(s1.clone(), &data, &tiny_config()).unwrap();
        let steps = data.t() - 1;

        let prior = extract_latents(&s2, &data, ExtractStage::Step1Prior).unwrap();
        let post = extract_latents(&s2, &data, ExtractStage::Step2Posterior).unwrap();
        for t in 0..steps {
            let p = extract_latents(&s2, &perturb_from(&data, t + 1), ExtractStage::Step1Prior).unwrap();
            for n in 0..data.n() {
                ensure(prefix(&prior, n, t) == prefix(&p, n, t), || format!("step-1 z⁰ at t={t} saw the future"))?;
            }
            if t + 2 < data.t() {
                let q = extract_latents(&s2, &perturb_from(&data, t + 2), ExtractStage::Step2Posterior).unwrap();
                for n in 0..data.n() {
                    ensure(prefix(&post, n, t) == prefix(&q, n, t), || {
                        format!("step-2 posterior at t={t} saw beyond one step ahead")
                    })?;
                }
            }
        }

        let is_step1 = |name: &str| step1_components().iter().any(|c| name.starts_with(&format!("{c}/")));
        let mut frozen = 0;
        for (i, info) in s1.store.tensors().iter().enumerate() {
            let id = s1.store.ids().nth(i).unwrap();
            if is_step1(&info.name) {
                let same = s1.store.values(id).iter().zip(s2.store.values(id)).all(|(a, b)| a.to_bits() == b.to_bits());
                ensure(same, || format!("{} changed during step 2", info.name))?;
                frozen += 1;
            }
        }

        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for reuse_sigma1 in [false, true] {
            let mut store = ParameterStore::new();
            let base = Emitter::build(&mut store, "p", 2, &[6, 6], 3, Activation::Identity, &mut rng).unwrap();
            store.freeze_component("p");
            let em = GatedResidualEmitter::build(
                &mut store,
                "e",
                base,
                2,
                &[6],
                6,
                Activation::Identity,
                reuse_sigma1,
                &mut rng,
            )
            .unwrap();
            for _ in 0..10 {
                let z0: Vec<f64> = (0..2).map(|_| rng.random_range(-2.0..2.0)).collect();
                let zi: Vec<f64> = (0..2).map(|_| rng.random_range(-2.0..2.0)).collect();
                let mut t = Tape::new();
                let a = t.constant(1, 2, z0.clone());
                let b = em.base.forward(&mut t, &store, a).unwrap().row(&t, 0);
                let j = t.constant(1, 4, [z0.clone(), zi.clone()].concat());
                let f = em.branch.forward(&mut t, &store, j).unwrap().row(&t, 0);
                let g0 = gated_residual_emit(&store, &em, &z0, &zi, GateMode::Zeros).unwrap();
                let g1 = gated_residual_emit(&store, &em, &z0, &zi, GateMode::Ones).unwrap();
                ensure(g0.mean == b.mean, || "g=0 mean differs from the step-1 mean".into())?;
                ensure(g1.mean == f.mean && g1.std == f.std, || "g=1 differs from the fresh branch".into())?;
            }
        }
        Ok(format!(
            "causal prefixes exact for all {steps} steps, {frozen} step-1 tensors bitwise frozen, gate identities exact"
        ))
    });
}

#[test]
fn metric_properties_hold() {
    criterion("metric properties", || {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let (n, t) = (6, 20);
        for _ in 0..50 {
            let z: Vec<f64> = (0..n * t * 2).map(|_| rng.random_range(-2.0..2.0)).collect();
            let zh: Vec<f64> = (0..n * t * 3).map(|_| rng.random_range(-2.0..2.0)).collect();
            let own = global_mean_corr(&z, 2, &z, 2, n, t).unwrap().rho_hat;
            ensure((own - 1.0).abs() < 1e-12, || format!("ρ̂(z, z) = {own}"))?;
            let base = global_mean_corr(&z, 2, &zh, 3, n, t).unwrap().rho_hat;
            ensure((0.0..=1.0).contains(&base), || format!("ρ̂ = {base} out of range"))?;
            let s: Vec<f64> =
                (0..3).map(|_| rng.random_range(0.2..3.0) * if rng.random_bool(0.5) { -1.0 } else { 1.0 }).collect();
            let c: Vec<f64> = (0..3).map(|_| rng.random_range(-5.0..5.0)).collect();
            // permute columns (2, 0, 1) and apply a per-dimension affine map with random signs
            let mapped: Vec<f64> =
                zh.chunks_exact(3).flat_map(|r| [s[0] * r[2] + c[0], s[1] * r[0] + c[1], s[2] * r[1] + c[2]]).collect();
            let other = global_mean_corr(&z, 2, &mapped, 3, n, t).unwrap().rho_hat;
            ensure((base - other).abs() < 1e-9, || format!("ρ̂ changed {base} → {other} under affine/permutation"))?;

            let a: Vec<usize> = (0..40).map(|_| rng.random_range(0..3)).collect();
            let b: Vec<usize> = (0..40).map(|_| rng.random_range(0..3)).collect();
            let v = nmi(&a, &b).unwrap();
            ensure((0.0..=1.0).contains(&v), || format!("NMI {v} out of range"))?;
            let relabeled: Vec<usize> = b.iter().map(|&l| (l + 1) % 3).collect();
            ensure((nmi(&a, &relabeled).unwrap() - v).abs() < 1e-12, || "NMI depends on label names".into())?;
            ensure((nmi(&b, &a).unwrap() - v).abs() < 1e-12, || "NMI is not symmetric".into())?;
            ensure((nmi(&a, &a).unwrap() - 1.0).abs() < 1e-12, || "NMI(a, a) != 1".into())?;
            let features: Vec<Vec<f64>> =
                (0..40).map(|_| vec![rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]).collect();
            let sil = silhouette(&features, &a).unwrap();
            ensure((-1.0..=1.0).contains(&sil), || format!("silhouette {sil} out of range"))?;
            ensure(
                (silhouette(&features, &relabeled).unwrap() - silhouette(&features, &b).unwrap()).abs() < 1e-12,
                || "silhouette depends on label names".into(),
            )?;
        }
        Ok("ρ̂ self = 1, bounded, sign/affine/permutation invariant; NMI and silhouette bounded and label-free".into())
    });
}

fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.is_file())
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()))
        .collect();
    files.sort();
    files
}

/// Runs generation, training, extraction and every report into `dir`.
fn pipeline(dir: &Path) -> Checkpoint {
    let data = tiny_data();
    write_dataset(&data, &dir.join("data")).unwrap();
    let grouped = generate_grouped(
        &HenonParams { t_len: 12, dx: 4, dy: 3, ..HenonParams::default() },
        &HenonParams { a: 1.2, t_len: 12, dx: 4, dy: 3, ..HenonParams::default() },
        5,
        3,
    )
    .unwrap();
    write_dataset(&grouped, &dir.join("grouped")).unwrap();
    let ckpt = train_full(&tiny_spec(ModelKind::Infodpcca), &data, &tiny_config()).unwrap();
    save_checkpoint(&ckpt, &dir.join("ckpt")).unwrap();
    let ex = extract_latents(&ckpt, &data, ExtractStage::Step2Posterior).unwrap();
    write_latents(&ex, &dir.join("latents")).unwrap();
    let reports = dir.join("reports");
    fs::create_dir_all(&reports).unwrap();
    let corr = corr_for_extraction(&data, &ex).unwrap();
    fs::write(reports.join("corr.json"), serde_json::to_vec(&corr).unwrap()).unwrap();
    let truth: Vec<usize> = grouped.labels.as_ref().unwrap().iter().map(|&l| l as usize).collect();
    let cluster = cluster_report(&pca_features(&grouped, 2).unwrap(), &truth, 2, 0, 5, "pca").unwrap();
    fs::write(reports.join("cluster.json"), serde_json::to_vec(&cluster).unwrap()).unwrap();
    let recon = recon_report(&ckpt, &data, 2, &[0, 5], Stage::Step2).unwrap();
    fs::write(reports.join("recon.csv"), recon.to_csv()).unwrap();
    ckpt
}

#[test]
fn pipeline_is_byte_reproducible() {
    criterion("engineering determinism", || {
        let tmp = tempfile::tempdir().unwrap();
        let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
        let ckpt = pipeline(&a);
        pipeline(&b);
        for sub in ["data", "grouped", "ckpt", "latents", "reports"] {
            ensure(dir_bytes(&a.join(sub)) == dir_bytes(&b.join(sub)), || format!("{sub} differs between runs"))?;
        }

        let back = load_checkpoint(&a.join("ckpt")).unwrap();
        ensure(back == ckpt, || "checkpoint round trip changed the checkpoint".into())?;
        save_checkpoint(&back, &tmp.path().join("again")).unwrap();
        ensure(dir_bytes(&a.join("ckpt")) == dir_bytes(&tmp.path().join("again")), || {
            "re-saved checkpoint differs".into()
        })?;
        ensure(read_dataset(&a.join("data")).unwrap() == tiny_data(), || "dataset round trip is not exact".into())?;

        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..20 {
            let lg = LinearGaussian {
                a: rng.random_range(-2.0..2.0),
                s1: rng.random_range(0.3..1.5),
                c: rng.random_range(-2.0..2.0),
                s2: rng.random_range(0.3..1.5),
            };
            let (x1, x2) = (rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0));
            let q: [(f64, f64); 3] = std::array::from_fn(|_| (rng.random_range(-1.0..1.0), rng.random_range(0.3..1.5)));
            // antithetic noise gives the exact expectation of this ELBO
            let elbo = 0.5 * (lg.elbo(x1, x2, q, [1.0; 3]) + lg.elbo(x1, x2, q, [-1.0; 3]));
            let log_px = lg.log_marginal(x1, x2);
            ensure(elbo <= log_px + 1e-12, || format!("ELBO {elbo} above log p(x) {log_px}"))?;
        }
        Ok("data, checkpoints, latents and reports byte-identical; round trips exact; ELBO ≤ log p(x)".into())
    });
}
