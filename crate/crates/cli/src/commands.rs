use std::fs;
use std::path::Path;

use infodpcca::data::{
    generate_grouped_with, generate_henon_with, read_dataset, split, write_dataset, SequencePairDataset, SplitSpec,
    FORMAT_VERSION,
};
use infodpcca::eval::{cluster_report, corr_for_extraction, pca_features, pool_features, recon_report};
use infodpcca::models::{
    extract_latents_with, load_checkpoint, read_latents, save_checkpoint, train_full, train_step1, train_step2,
    train_step2_only, write_latents, Checkpoint, ExtractStage, Model, ModelKind, Stage,
};
use infodpcca::par::{init_threads, Parallelism};
use infodpcca::Error;
use serde_json::json;

use crate::config::{echo, load, CliResult, Failure, GroupedRun, HenonRun, TrainFile};
use crate::{
    Cli, Command, EvalClusterArgs, EvalCommand, EvalCorrArgs, EvalReconArgs, ExtractArgs, GenCommand, GenGroupedArgs,
    GenHenonArgs, StageArg, TrainArgs,
};

pub fn run(cli: Cli) -> CliResult<()> {
    if cli.threads == 0 {
        return Err(Failure::Config("--threads must be at least 1".into()));
    }
    init_threads(cli.threads);
    let par = Parallelism::from_threads(cli.threads);
    match cli.command {
        Command::Gen(GenCommand::Henon(a)) => gen_henon(a, par),
        Command::Gen(GenCommand::Grouped(a)) => gen_grouped(a, par),
        Command::Train(a) => train(a, par),
        Command::Extract(a) => extract(a, par),
        Command::Eval(EvalCommand::Corr(a)) => eval_corr(a),
        Command::Eval(EvalCommand::Cluster(a)) => eval_cluster(a),
        Command::Eval(EvalCommand::Recon(a)) => eval_recon(a),
    }
}

fn print(v: &serde_json::Value) -> CliResult<()> {
    println!("{}", serde_json::to_string(v)?);
    Ok(())
}

fn summary(ds: &SequencePairDataset, out: &Path) -> serde_json::Value {
    json!({
        "format_version": FORMAT_VERSION,
        "generator": ds.meta.generator,
        "out": out.display().to_string(),
        "n": ds.n(),
        "t": ds.t(),
        "dx": ds.dx(),
        "dy": ds.dy(),
        "dz": ds.dz(),
        "seed": ds.meta.seed,
        "has_labels": ds.meta.has_labels,
    })
}

fn gen_henon(a: GenHenonArgs, par: Parallelism) -> CliResult<()> {
    let mut run: HenonRun = load(a.config.as_deref())?;
    let p = &mut run.henon;
    macro_rules! set {
        ($($flag:ident => $field:ident),*) => { $(if let Some(v) = a.$flag { p.$field = v; })* };
    }
    set!(seed => seed, n_seq => n_seq, t_len => t_len, dx => dx, dy => dy, a => a, b => b, noise_std => noise_std);
    if let Some(f) = a.split {
        run.split = Some(SplitSpec { train_fraction: f, seed: run.henon.seed });
    }
    if let (Some(s), Some(spec)) = (a.split_seed, run.split.as_mut()) {
        spec.seed = s;
    } else if a.split_seed.is_some() {
        return Err(Failure::Config("--split-seed needs --split".into()));
    }
    run.henon.validate()?;
    let ds = generate_henon_with(&run.henon, par)?;
    let parts = run.split.as_ref().map(|s| split(&ds, s)).transpose()?;
    write_dataset(&ds, &a.out)?;
    if let Some((train, test)) = &parts {
        write_dataset(train, &a.out.join("train"))?;
        write_dataset(test, &a.out.join("test"))?;
    }
    echo(&a.out, "gen henon", &run)?;
    let mut s = summary(&ds, &a.out);
    if let Some((train, test)) = &parts {
        s["split"] = json!({ "train": train.n(), "test": test.n() });
    }
    print(&s)
}

fn gen_grouped(a: GenGroupedArgs, par: Parallelism) -> CliResult<()> {
    let mut run: GroupedRun = load(a.config.as_deref())?;
    macro_rules! set {
        ($($flag:ident),*) => { $(if let Some(v) = a.$flag { run.$flag = v; })* };
    }
    set!(seed, a1, a2, b, n_per_group, t_len, dx, dy, noise_std);
    let ds = generate_grouped_with(&run.params(run.a1), &run.params(run.a2), run.n_per_group, run.seed, par)?;
    write_dataset(&ds, &a.out)?;
    echo(&a.out, "gen grouped", &run)?;
    print(&summary(&ds, &a.out))
}

fn model_flags_given(a: &TrainArgs) -> bool {
    a.model.is_some()
        || a.residual_connection.is_some()
        || a.reuse_rnn.is_some()
        || a.reuse_sigma1.is_some()
        || a.dz0.is_some()
        || a.dz1.is_some()
        || a.dz2.is_some()
        || a.rnn_hidden.is_some()
        || a.mlp_hidden.is_some()
}

fn train(a: TrainArgs, par: Parallelism) -> CliResult<()> {
    let file: TrainFile = load(a.config.as_deref())?;
    let data = read_dataset(&a.data)?;

    let mut cfg = file.train.clone();
    macro_rules! set {
        ($($flag:ident => $($field:ident).+),*) => { $(if let Some(v) = a.$flag { cfg.$($field).+ = v; })* };
    }
    set!(alpha => weights.alpha, beta => weights.beta, dvib_beta => weights.dvib_beta, lr => learning_rate,
         epochs => max_epochs, batch_size => batch_size, patience => patience, grad_clip => grad_clip_norm,
         seed => seed);
    cfg.parallelism = par;
    cfg.validate()?;

    let init = match (&a.init_from, a.init_random) {
        (Some(_), true) => return Err(Failure::Config("--init-from and --init-random are exclusive".into())),
        (Some(p), false) => {
            if model_flags_given(&a) || file.model.is_some() {
                return Err(Failure::Config("model options come from the --init-from checkpoint".into()));
            }
            Some(load_checkpoint(p)?)
        }
        (None, _) => None,
    };
    if a.stage != StageArg::Two && (init.is_some() || a.init_random) {
        return Err(Failure::Config("--init-from and --init-random only apply to --stage 2".into()));
    }

    let mut spec = match &init {
        Some(c) => c.spec.clone(),
        None => file.model_spec()?,
    };
    if init.is_none() {
        if let Some(m) = &a.model {
            spec.kind = m.parse::<ModelKind>()?;
        }
        macro_rules! set_spec {
            ($($flag:ident),*) => { $(if let Some(v) = a.$flag.clone() { spec.$flag = v; })* };
        }
        set_spec!(residual_connection, reuse_rnn, reuse_sigma1, dz0, dz1, dz2, rnn_hidden, mlp_hidden);
        spec.dx = data.dx();
        spec.dy = data.dy();
    }
    spec.validate()?;

    let ckpt = match (spec.kind, a.stage) {
        (_, StageArg::Both) => train_full(&spec, &data, &cfg),
        (ModelKind::Infodpcca, StageArg::One) => train_step1(Model::build(&spec, cfg.seed)?, &data, &cfg),
        (ModelKind::Infodpcca, StageArg::Two) => match init {
            Some(c) => train_step2(c, &data, &cfg),
            None if a.init_random => train_step2_only(&spec, &data, &cfg),
            None => {
                return Err(Failure::Config("--stage 2 needs --init-from <step-1 checkpoint> or --init-random".into()))
            }
        },
        (ModelKind::Dvib, StageArg::One) | (ModelKind::Dpcca, StageArg::Two) if init.is_none() && !a.init_random => {
            train_full(&spec, &data, &cfg)
        }
        (kind, _) => return Err(Failure::Config(format!("{kind} trains in a single stage; use --stage both"))),
    };
    let ckpt = match ckpt {
        Ok(c) => c,
        Err(Error::NonFiniteLoss { message, last_good }) => {
            if let Some(good) = last_good {
                save_checkpoint(&good, &a.out.join("last_good"))?;
            }
            return Err(Error::NonFiniteLoss { message, last_good: None }.into());
        }
        Err(e) => return Err(e.into()),
    };
    save_checkpoint(&ckpt, &a.out)?;
    let stage = match a.stage {
        StageArg::One => "1",
        StageArg::Two => "2",
        StageArg::Both => "both",
    };
    echo(
        &a.out,
        "train",
        &json!({
            "data": a.data.display().to_string(),
            "stage": stage,
            "init_from": a.init_from.as_ref().map(|p| p.display().to_string()),
            "init_random": a.init_random,
            "model": ckpt.spec,
            "train": cfg,
        }),
    )?;
    print(&train_summary(&ckpt, &a.out))
}

fn train_summary(ckpt: &Checkpoint, out: &Path) -> serde_json::Value {
    let last = ckpt.history.last();
    json!({
        "format_version": FORMAT_VERSION,
        "out": out.display().to_string(),
        "kind": ckpt.spec.kind.to_string(),
        "stage": ckpt.stage.to_string(),
        "epochs": ckpt.history.len(),
        "final": last.map(|h| h.to_json()),
    })
}

fn parse_stage(s: &str) -> CliResult<ExtractStage> {
    s.parse::<ExtractStage>().map_err(|e| Failure::Config(e.to_string()))
}

fn extract(a: ExtractArgs, par: Parallelism) -> CliResult<()> {
    let stage = parse_stage(&a.stage)?;
    let ckpt = load_checkpoint(&a.ckpt)?;
    let data = read_dataset(&a.data)?;
    let ex = extract_latents_with(&ckpt, &data, stage, par)?;
    write_latents(&ex, &a.out)?;
    echo(
        &a.out,
        "extract",
        &json!({
            "ckpt": a.ckpt.display().to_string(),
            "data": a.data.display().to_string(),
            "stage": stage,
        }),
    )?;
    print(&json!({
        "format_version": FORMAT_VERSION,
        "out": a.out.display().to_string(),
        "stage": stage,
        "n": ex.n,
        "steps": ex.steps,
        "dz0": ex.z0.dim,
    }))
}

fn write_report(dir: &Path, name: &str, v: &serde_json::Value) -> CliResult<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join(name), serde_json::to_vec_pretty(v)?)?;
    Ok(())
}

fn eval_corr(a: EvalCorrArgs) -> CliResult<()> {
    let data = read_dataset(&a.data)?;
    let ex = read_latents(&a.latents)?;
    let report = serde_json::to_value(corr_for_extraction(&data, &ex)?)?;
    write_report(&a.out, "corr.json", &report)?;
    echo(
        &a.out,
        "eval corr",
        &json!({ "latents": a.latents.display().to_string(), "data": a.data.display().to_string() }),
    )?;
    print(&report)
}

fn eval_cluster(a: EvalClusterArgs) -> CliResult<()> {
    let data = read_dataset(&a.data)?;
    let Some(labels) = &data.labels else {
        return Err(Error::MissingGroundTruth("dataset has no labels".into()).into());
    };
    let truth: Vec<usize> = labels.iter().map(|&l| l as usize).collect();
    let (features, spec) = match (&a.latents, a.pca) {
        (Some(dir), None) => {
            let ex = read_latents(dir)?;
            if ex.n != data.n() {
                return Err(Error::ShapeMismatch(format!("{} latent sequences for {} labels", ex.n, data.n())).into());
            }
            let stage = serde_json::to_value(ex.stage)?;
            (pool_features(&ex), format!("latents:{}:z0:mean+std", stage.as_str().unwrap_or_default()))
        }
        (None, Some(k)) => (pca_features(&data, k)?, format!("pca:{k}:mean+std")),
        _ => return Err(Failure::Config("give exactly one of --latents and --pca".into())),
    };
    let report = serde_json::to_value(cluster_report(&features, &truth, a.k, a.seed, a.restarts, &spec)?)?;
    write_report(&a.out, "cluster.json", &report)?;
    echo(
        &a.out,
        "eval cluster",
        &json!({
            "data": a.data.display().to_string(),
            "latents": a.latents.as_ref().map(|p| p.display().to_string()),
            "pca": a.pca,
            "k": a.k,
            "seed": a.seed,
            "restarts": a.restarts,
        }),
    )?;
    print(&report)
}

fn eval_recon(a: EvalReconArgs) -> CliResult<()> {
    let ckpt = load_checkpoint(&a.ckpt)?;
    let data = read_dataset(&a.data)?;
    let stage: Stage = match &a.stage {
        Some(s) => parse_stage(s)?.stage(),
        None => ckpt.stage,
    };
    let report = recon_report(&ckpt, &data, a.seq, &a.dims, stage)?;
    fs::create_dir_all(&a.out)?;
    fs::write(a.out.join("recon.csv"), report.to_csv())?;
    let summary = json!({
        "format_version": FORMAT_VERSION,
        "seq": a.seq,
        "dims": a.dims,
        "stage": stage.to_string(),
        "rows": report.rows.len(),
        "coverage": report.coverage,
    });
    write_report(&a.out, "recon.json", &summary)?;
    echo(
        &a.out,
        "eval recon",
        &json!({
            "ckpt": a.ckpt.display().to_string(),
            "data": a.data.display().to_string(),
            "seq": a.seq,
            "dims": a.dims,
            "stage": stage.to_string(),
        }),
    )?;
    print(&summary)
}
