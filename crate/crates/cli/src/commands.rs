use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use log::info;
use serde::Serialize;
use serde_json::json;
use smoe_core::data::{
    cmvn_fit, load_manifest, normalize, read_features, synth_corpus, write_features, write_with_manifest,
    CmvnStats, FramePipeline, SynthSpec, Utterance,
};
use smoe_core::gradsuite::{gradient_suite, SUITE_TOLERANCE};
use smoe_core::model::{count_flops, load_checkpoint, save_checkpoint, Model, ModelConfig};
use smoe_core::trainer::{
    evaluate, train as run_training, EvalReport, HistoryRow, HistoryWriter, RouteStats, TrainObserver,
    TrainStatus,
};

use crate::config::{config_hash, load_experiment, seed_from_env, Experiment, Overrides};
use crate::{CliError, CostArgs, DataArgs, EvalArgs, GradcheckArgs, RouteStatsArgs, SynthArgs, TrainArgs};

type CmdResult = Result<ExitCode, CliError>;

fn print_json(value: &impl Serialize) -> Result<(), CliError> {
    println!("{}", serde_json::to_string_pretty(value).map_err(anyhow::Error::from)?);
    Ok(())
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).map_err(anyhow::Error::from)?;
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn read_corpus(field: &str, path: &Path) -> Result<Vec<Utterance>, CliError> {
    if !path.is_file() {
        return Err(CliError::usage(format!("{field}: no such file {}", path.display())));
    }
    let corpus = if path.extension().is_some_and(|e| e == "jsonl") {
        load_manifest(path)
    } else {
        read_features(path)
    };
    corpus
        .with_context(|| format!("reading {}", path.display()))
        .map_err(CliError::Runtime)
}

fn load_model(path: &Path) -> Result<Model, CliError> {
    if !path.is_file() {
        return Err(CliError::usage(format!("checkpoint: no such file {}", path.display())));
    }
    load_checkpoint(path)
        .with_context(|| format!("loading {}", path.display()))
        .map_err(CliError::Runtime)
}

fn check_width(corpus: &[Utterance], model: &ModelConfig) -> Result<(), CliError> {
    if let Some(u) = corpus.iter().find(|u| u.dim() != model.input_dim) {
        return Err(CliError::usage(format!(
            "data: utterance {} has width {} after stacking, model input_dim is {}",
            u.id,
            u.dim(),
            model.input_dim
        )));
    }
    Ok(())
}

/// Stacked (and optionally normalized) corpus for a scoring command.
fn prepare_scoring_data(args: &DataArgs, checkpoint: Option<&Path>) -> Result<Vec<Utterance>, CliError> {
    let raw = read_corpus("data", &args.data)?;
    let stacked = FramePipeline {
        stack: args.stack,
        rate: args.rate,
    }
    .apply(&raw)?;
    if args.no_cmvn {
        return Ok(stacked);
    }
    let sibling = checkpoint.and_then(Path::parent).map(|d| d.join("cmvn.json"));
    let path = match (&args.cmvn, sibling) {
        (Some(p), _) => Some(p.clone()),
        (None, Some(p)) if p.is_file() => Some(p),
        _ => None,
    };
    let Some(path) = path else { return Ok(stacked) };
    let text = fs::read_to_string(&path).map_err(|e| CliError::usage(format!("cmvn: {}: {e}", path.display())))?;
    let stats: CmvnStats = serde_json::from_str(&text).map_err(|e| CliError::usage(format!("cmvn: {e}")))?;
    Ok(normalize(&stacked, &stats)?)
}

/// Writes history and route statistics, and the best checkpoint whenever
/// validation improves.
struct Artifacts {
    history: HistoryWriter,
    best_path: PathBuf,
}

impl TrainObserver for Artifacts {
    fn on_eval(&mut self, row: &HistoryRow, stats: &RouteStats, best: Option<&Model>) -> smoe_core::Result<()> {
        self.history.append(row, stats)?;
        if let Some(model) = best {
            save_checkpoint(model, &self.best_path)?;
        }
        Ok(())
    }
}

/// Train and validation corpora after stacking and normalization.
fn prepare_training_data(exp: &Experiment) -> Result<(Vec<Utterance>, Vec<Utterance>, Option<CmvnStats>), CliError> {
    let data = &exp.data;
    let (train, valid) = match (&data.train, &data.valid, &data.synth) {
        (Some(t), Some(v), _) => (read_corpus("data.train", t)?, read_corpus("data.valid", v)?),
        (None, _, Some(spec)) => {
            let mut corpus = synth_corpus(spec)?;
            let n_valid = ((corpus.len() as f64 * data.valid_fraction).ceil() as usize).max(1);
            if n_valid >= corpus.len() {
                return Err(CliError::usage("data.synth.utterances: too few to split into train and valid"));
            }
            let valid = corpus.split_off(corpus.len() - n_valid);
            (corpus, valid)
        }
        _ => unreachable!("data config validated"),
    };
    let train = data.pipeline.apply(&train)?;
    let valid = data.pipeline.apply(&valid)?;
    check_width(&train, &exp.model)?;
    check_width(&valid, &exp.model)?;
    if !data.cmvn {
        return Ok((train, valid, None));
    }
    let stats = cmvn_fit(train.iter().map(|u| &u.features))?;
    Ok((normalize(&train, &stats)?, normalize(&valid, &stats)?, Some(stats)))
}

#[derive(Serialize)]
struct TrainSummary<'a> {
    config_hash: &'a str,
    #[serde(flatten)]
    status: TrainStatus,
    steps: u64,
    train_utterances: usize,
    valid_utterances: usize,
    skipped: usize,
    best_valid_ctc: f64,
    last: Option<&'a HistoryRow>,
    artifacts: Vec<String>,
}

pub fn train(args: &TrainArgs, as_json: bool) -> CmdResult {
    let overrides = Overrides {
        preset: args.preset.clone(),
        output_dir: args.out.clone(),
        seed: args.seed,
        epochs: args.epochs,
        max_steps: args.max_steps,
        lr: args.lr,
        set: args.set.clone(),
    };
    let exp = load_experiment(&args.config, &overrides)?;
    // the output location does not change what is computed
    let mut hashed = serde_json::to_value(&exp).map_err(anyhow::Error::from)?;
    hashed.as_object_mut().expect("experiment is an object").remove("output_dir");
    let hash = config_hash(&hashed);
    let (train, valid, cmvn) = prepare_training_data(&exp)?;
    let out = &exp.output_dir;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;

    let mut echoed = serde_json::to_value(&exp).map_err(anyhow::Error::from)?;
    echoed["config_hash"] = json!(hash);
    write_json(&out.join("config.json"), &echoed)?;
    let mut artifacts = vec!["config.json".to_string()];
    if let Some(stats) = &cmvn {
        write_json(&out.join("cmvn.json"), stats)?;
        artifacts.push("cmvn.json".into());
    }
    let preamble = [format!("config_hash={hash}"), format!("preset={}", exp.preset)];
    let mut observer = Artifacts {
        history: HistoryWriter::create(&out.join("history.csv"), &out.join("route_stats.jsonl"), &preamble)?,
        best_path: out.join("best.ckpt"),
    };
    info!(
        "training {} on {} utterances, validating on {}",
        exp.preset,
        train.len(),
        valid.len()
    );
    let model = Model::build(exp.model.clone(), exp.seed)?;
    let outcome = run_training(model, &train, &valid, &exp.train, &mut observer)?;
    artifacts.extend(["history.csv", "route_stats.jsonl", "best.ckpt"].map(String::from));
    let last_name = match outcome.status {
        TrainStatus::Completed => "last.ckpt",
        TrainStatus::Diverged { .. } => "last_good.ckpt",
    };
    save_checkpoint(&outcome.model, &out.join(last_name))?;
    artifacts.push(last_name.into());

    let summary = TrainSummary {
        config_hash: &hash,
        status: outcome.status,
        steps: outcome.steps,
        train_utterances: train.len(),
        valid_utterances: valid.len(),
        skipped: outcome.skipped,
        best_valid_ctc: outcome.best_valid_ctc,
        last: outcome.history.last(),
        artifacts,
    };
    write_json(&out.join("summary.json"), &summary)?;
    if as_json {
        print_json(&summary)?;
    } else {
        println!("# config_hash={hash}");
        println!("preset          {}", exp.preset);
        println!("updates         {}", summary.steps);
        println!("skipped         {}", summary.skipped);
        println!("best valid ctc  {:.6}", summary.best_valid_ctc);
        if let Some(row) = summary.last {
            println!("last valid ctc  {:.6}", row.valid_ctc);
            println!("last valid ter  {:.6}", row.valid_ter);
        }
        println!("artifacts       {}", out.display());
    }
    Ok(match outcome.status {
        TrainStatus::Completed => ExitCode::SUCCESS,
        TrainStatus::Diverged { step } => {
            eprintln!("error: training diverged at update {step}; last finite parameters saved to {last_name}");
            ExitCode::from(1)
        }
    })
}

#[derive(Serialize)]
struct EvalOutput<'a> {
    config_hash: String,
    checkpoint: &'a Path,
    data: &'a Path,
    #[serde(flatten)]
    report: &'a EvalReport,
}

fn scoring_hash(model: &ModelConfig, seed: u64, args: &DataArgs) -> String {
    config_hash(&json!({
        "model": model,
        "seed": seed,
        "data": args.data,
        "stack": args.stack,
        "rate": args.rate,
        "cmvn": args.cmvn,
        "no_cmvn": args.no_cmvn,
    }))
}

pub fn eval(args: &EvalArgs, as_json: bool) -> CmdResult {
    let model = load_model(&args.checkpoint)?;
    let corpus = prepare_scoring_data(&args.data, Some(&args.checkpoint))?;
    check_width(&corpus, &model.config)?;
    let report = evaluate(&model, &corpus)?;
    let out = EvalOutput {
        config_hash: scoring_hash(&model.config, model.seed, &args.data),
        checkpoint: &args.checkpoint,
        data: &args.data.data,
        report: &report,
    };
    if as_json {
        print_json(&out)?;
    } else {
        println!("# config_hash={}", out.config_hash);
        println!("utterances  {}", report.utterances);
        println!("skipped     {}", report.skipped);
        println!("ctc         {:.6}", report.ctc);
        println!("ter         {:.6}", report.ter);
    }
    Ok(ExitCode::SUCCESS)
}

fn fmt_vec(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x:.3}")).collect::<Vec<_>>().join(" ")
}

pub fn route_stats(args: &RouteStatsArgs, as_json: bool) -> CmdResult {
    let model = match (&args.checkpoint, &args.preset) {
        (Some(path), _) => load_model(path)?,
        (None, Some(preset)) => {
            let cfg = ModelConfig::preset(preset)?;
            let seed = args.seed.or(seed_from_env()?).unwrap_or(0);
            Model::build(cfg, seed)?
        }
        (None, None) => return Err(CliError::usage("route-stats: pass --checkpoint or --preset")),
    };
    let corpus = prepare_scoring_data(&args.data, args.checkpoint.as_deref())?;
    check_width(&corpus, &model.config)?;
    let report = evaluate(&model, &corpus)?;
    let hash = scoring_hash(&model.config, model.seed, &args.data);
    if as_json {
        print_json(&json!({ "config_hash": hash, "layers": report.route_stats.layers }))?;
        return Ok(ExitCode::SUCCESS);
    }
    println!("# config_hash={hash}");
    for l in &report.route_stats.layers {
        let ratio = l.load_ratio.map_or("inf".to_string(), |r| format!("{r:.3}"));
        println!("layer {} ({} frames)", l.layer, l.frames);
        println!("  load s        {}", fmt_vec(&l.load));
        println!("  mean prob P   {}", fmt_vec(&l.mean_prob));
        println!("  importance    {:.6}", l.importance_loss);
        println!("  balancing     {:.6}", l.balancing_loss);
        println!("  sparsity      {:.6}", l.sparsity);
        println!("  entropy       {:.6}", l.entropy);
        println!("  mean gate     {:.6}", l.mean_gate);
        println!("  load ratio    {ratio}");
    }
    Ok(ExitCode::SUCCESS)
}

pub fn cost(args: &CostArgs, as_json: bool) -> CmdResult {
    let cfg = ModelConfig::preset(&args.preset)?;
    if !(args.seconds > 0.0 && args.seconds.is_finite()) {
        return Err(CliError::usage(format!("--seconds: must be positive, got {}", args.seconds)));
    }
    let report = count_flops(&cfg, args.seconds, args.flop_convention)?;
    let hash = config_hash(&json!({
        "model": cfg,
        "convention": args.flop_convention,
        "seconds": args.seconds,
    }));
    if as_json {
        let mut value = serde_json::to_value(&report).map_err(anyhow::Error::from)?;
        value["config_hash"] = json!(hash);
        print_json(&value)?;
        return Ok(ExitCode::SUCCESS);
    }
    println!("# config_hash={hash}");
    println!(
        "preset {}  convention {}  seconds {}  frames {:.2}",
        report.preset,
        json!(report.convention).as_str().unwrap_or_default(), report.audio_seconds, report.frames
    );
    println!("{:<22} {:>14} {:>18}", "component", "params", "flops");
    for c in &report.components {
        println!("{:<22} {:>14} {:>18.0}", c.name, c.params, c.flops);
    }
    println!("{:<22} {:>14} {:>18.0}", "total", report.params, report.flops);
    println!(
        "params {:.2}M  flops {:.3}G  flops/s {:.3}G",
        report.params as f64 / 1e6,
        report.flops / 1e9,
        report.flops_per_second / 1e9
    );
    Ok(ExitCode::SUCCESS)
}

pub fn gradcheck(args: &GradcheckArgs, as_json: bool) -> CmdResult {
    let cfg = ModelConfig::preset(&args.preset)?;
    let seed = args.seed.or(seed_from_env()?).unwrap_or(0);
    let checks = gradient_suite(&cfg, seed, args.coords)?;
    let passed = checks.iter().all(|c| c.report.passed);
    let hash = config_hash(&json!({ "model": cfg, "seed": seed, "coords": args.coords }));
    if as_json {
        print_json(&json!({
            "config_hash": hash,
            "tolerance": SUITE_TOLERANCE,
            "passed": passed,
            "components": checks,
        }))?;
    } else {
        println!("# config_hash={hash}");
        println!("{:<18} {:>12} {:>8} {:>6}", "component", "max rel err", "coords", "pass");
        for c in &checks {
            println!(
                "{:<18} {:>12.3e} {:>8} {:>6}",
                c.component, c.report.max_rel_err, c.report.coords_checked, c.report.passed
            );
        }
    }
    Ok(if passed { ExitCode::SUCCESS } else { ExitCode::from(1) })
}

pub fn synth(args: &SynthArgs, as_json: bool) -> CmdResult {
    let mut spec = match &args.spec {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| CliError::usage(format!("spec {}: {e}", path.display())))?;
            serde_json::from_str(&text).map_err(|e| CliError::usage(format!("spec {}: {e}", path.display())))?
        }
        None => SynthSpec::default(),
    };
    if let Some(seed) = args.seed.or(seed_from_env()?) {
        spec.seed = seed;
    }
    let fields = [
        (&mut spec.utterances, args.utterances),
        (&mut spec.clusters, args.clusters),
        (&mut spec.vocab, args.vocab),
        (&mut spec.dim, args.dim),
        (&mut spec.conditions, args.conditions),
    ];
    for (slot, value) in fields {
        if let Some(v) = value {
            *slot = v;
        }
    }
    if let Some(noise) = args.noise {
        spec.noise = noise;
    }
    let corpus = synth_corpus(&spec)?;
    match &args.manifest {
        Some(m) => write_with_manifest(&corpus, &args.out, m)?,
        None => {
            write_features(&corpus, &args.out)?;
        }
    }
    let frames: usize = corpus.iter().map(Utterance::frames).sum();
    let hash = config_hash(&spec);
    if as_json {
        print_json(&json!({
            "config_hash": hash,
            "path": args.out,
            "utterances": corpus.len(),
            "frames": frames,
            "spec": spec,
        }))?;
    } else {
        println!("# config_hash={hash}");
        println!("wrote {} utterances ({frames} frames) to {}", corpus.len(), args.out.display());
    }
    Ok(ExitCode::SUCCESS)
}
