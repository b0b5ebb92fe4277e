use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use serde_json::json;

use lifelong_edit::checkpoint::{Checkpoint, EditSession, RunMeta};
use lifelong_edit::config::RunConfig;
use lifelong_edit::data::{
    encode, gen_synthetic, load_base, load_records, save_base, save_records, training_corpus, EditInstance,
    GenConfig, Vocabulary,
};
use lifelong_edit::editor::{summarize_state, Editor};
use lifelong_edit::eval::{evaluate, probe_accuracy};
use lifelong_edit::model::{pretrain_with, Parameters};
use lifelong_edit::report::ReportWriter;

const BASE_FILE: &str = "base.jsonl";
const RECORDS_FILE: &str = "records.jsonl";

#[derive(Parser)]
#[command(name = "lifelong-edit", version, about = "Sequential closed-form knowledge editing on a small decoder")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic base corpus and edit records.
    GenData(GenDataArgs),
    /// Train a model on the base corpus and write a checkpoint.
    Pretrain(PretrainArgs),
    /// Stream edit records into a checkpoint in turns.
    Edit(EditArgs),
    /// Score an edited checkpoint.
    Eval(EvalArgs),
    /// Print the running statistics stored in a checkpoint.
    InspectStats(InspectArgs),
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides `data.seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (created if missing).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PretrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides both `model.seed` and `pretrain.seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Directory written by `gen-data`.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct EditArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides `editor.coverage_seed`.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    records: PathBuf,
    #[arg(long)]
    turn_size: Option<usize>,
    #[arg(long)]
    eta: Option<f64>,
    /// Comma list such as `0.mlp_in,1.mlp_out`.
    #[arg(long)]
    modules: Option<String>,
    /// Comma list: no-norm, freeze-stats, coverage=<f>, scaling=inner, average.
    #[arg(long)]
    ablate: Option<String>,
    /// Stop after this many turns (the checkpoint stays resumable).
    #[arg(long)]
    max_turns: Option<usize>,
    /// Continue the edit session stored in `--checkpoint`.
    #[arg(long)]
    resume: bool,
    /// Write wall-clock times into the report.
    #[arg(long)]
    timing: bool,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    /// Edited checkpoint.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Checkpoint before editing; defaults to `--checkpoint`.
    #[arg(long)]
    reference: Option<PathBuf>,
    #[arg(long)]
    records: PathBuf,
    /// Base corpus whose held-out renderings give the perplexity set.
    #[arg(long)]
    base: Option<PathBuf>,
    /// Only score the first N records.
    #[arg(long)]
    limit: Option<usize>,
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct InspectArgs {
    #[arg(long)]
    checkpoint: PathBuf,
}

fn load_config(path: Option<&Path>) -> anyhow::Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p).with_context(|| format!("reading config {}", p.display())),
        None => Ok(RunConfig::default()),
    }
}

fn load_checkpoint(path: &Path) -> anyhow::Result<Checkpoint> {
    Checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn open_report(path: Option<&Path>, timing: bool) -> anyhow::Result<Option<ReportWriter>> {
    path.map(|p| ReportWriter::open(p, timing).with_context(|| format!("opening report {}", p.display())))
        .transpose()
}

fn gen_data(args: GenDataArgs) -> anyhow::Result<()> {
    let mut cfg = load_config(args.config.as_deref())?.data;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    let data = gen_synthetic(&GenConfig {
        n_base_facts: cfg.n_base_facts,
        n_edit_facts: cfg.n_edit_facts,
        templates_per_relation: cfg.templates_per_relation,
        seed: cfg.seed,
    })?;
    std::fs::create_dir_all(&args.out)?;
    save_base(&data.base, &args.out.join(BASE_FILE))?;
    save_records(&data.records, &args.out.join(RECORDS_FILE))?;
    println!(
        "{}",
        json!({ "base": data.base.len(), "records": data.records.len(), "seed": cfg.seed })
    );
    Ok(())
}

fn pretrain(args: PretrainArgs) -> anyhow::Result<()> {
    let mut cfg = load_config(args.config.as_deref())?;
    if let Some(seed) = args.seed {
        cfg.model.seed = seed;
        cfg.pretrain.seed = seed;
    }
    if let Some(steps) = args.steps {
        cfg.pretrain.steps = steps;
    }
    let base = load_base(&args.data.join(BASE_FILE), true)?;
    let records = load_records(&args.data.join(RECORDS_FILE), true)?;
    let mut strings = Vec::new();
    for b in &base {
        strings.extend([b.question.as_str(), b.answer.as_str()]);
    }
    for r in &records {
        strings.extend([r.edit_prompt.as_str(), r.answer.as_str(), r.rephrase_prompt.as_str()]);
    }
    let vocab = Vocabulary::build(&strings);
    let corpus = training_corpus(&vocab, &base, false)?;
    let model_cfg = cfg.model.to_config(vocab.len());
    let init = Parameters::init(&model_cfg)?;
    let mut last_loss = f64::NAN;
    let params = pretrain_with(&init, &corpus, &cfg.pretrain, |_, loss| last_loss = loss)?;
    let probes: Vec<(String, String)> = base
        .iter()
        .filter(|b| b.probe)
        .map(|b| (b.question.clone(), b.answer.clone()))
        .collect();
    let accuracy = probe_accuracy(&params, &vocab, &probes)?;
    let summary = json!({
        "steps": cfg.pretrain.steps,
        "final_batch_loss": last_loss,
        "probe_accuracy": accuracy,
        "vocab_size": vocab.len(),
        "parameters": model_cfg.parameter_count(),
    });
    if let Some(mut w) = open_report(args.report.as_deref(), false)? {
        w.record("pretrain", &summary)?;
    }
    Checkpoint {
        params,
        vocab,
        meta: RunMeta {
            data_seed: cfg.data.seed,
            pretrain_seed: cfg.pretrain.seed,
            records_consumed: 0,
            turn_size: 0,
        },
        session: None,
    }
    .save(&args.out)?;
    println!("{summary}");
    Ok(())
}

fn edit(args: EditArgs) -> anyhow::Result<()> {
    let mut ckpt = load_checkpoint(&args.checkpoint)?;
    let model_cfg = ckpt.params.config().clone();
    let mut editor = if args.resume {
        if args.eta.is_some() || args.modules.is_some() || args.ablate.is_some() || args.turn_size.is_some() {
            bail!("--resume uses the stored editor settings; drop --eta/--modules/--ablate/--turn-size");
        }
        let Some(session) = ckpt.session.take() else {
            bail!("{} has no edit session to resume", args.checkpoint.display());
        };
        Editor::with_state(session.config, &model_cfg, session.state)?
    } else {
        if ckpt.session.is_some() {
            bail!("{} already holds an edit session; pass --resume", args.checkpoint.display());
        }
        let mut section = load_config(args.config.as_deref())?.editor;
        if let Some(seed) = args.seed {
            section.coverage_seed = seed;
        }
        if let Some(eta) = args.eta {
            section.eta = eta;
        }
        if let Some(m) = args.modules {
            section.modules = m;
        }
        if let Some(a) = args.ablate {
            section.ablate = a;
        }
        if let Some(t) = args.turn_size {
            section.turn_size = t;
        }
        if section.turn_size == 0 {
            bail!("turn size must be at least 1");
        }
        ckpt.meta.records_consumed = 0;
        ckpt.meta.turn_size = section.turn_size as u64;
        Editor::new(section.to_config(&model_cfg)?, &model_cfg)?
    };

    let records = load_records(&args.records, true).with_context(|| format!("reading {}", args.records.display()))?;
    let start = ckpt.meta.records_consumed as usize;
    if start > records.len() {
        bail!("checkpoint consumed {start} records but the file has {}", records.len());
    }
    let instances: Vec<EditInstance> = records[start..]
        .iter()
        .map(|r| encode(&ckpt.vocab, r, true))
        .collect::<lifelong_edit::Result<_>>()?;
    let turn_size = ckpt.meta.turn_size as usize;
    let mut report = open_report(args.report.as_deref(), args.timing)?;
    let mut turns = 0usize;
    let mut failure = None;
    for batch in instances.chunks(turn_size) {
        if args.max_turns.is_some_and(|m| turns >= m) {
            break;
        }
        match editor.edit_turn(&ckpt.params, batch) {
            Ok((params, turn_report)) => {
                ckpt.params = params;
                ckpt.meta.records_consumed += batch.len() as u64;
                if let Some(w) = report.as_mut() {
                    w.turn(&turn_report)?;
                }
                turns += 1;
            }
            Err(e) => {
                failure = Some(e);
                break;
            }
        }
    }
    let state = editor.state().clone();
    ckpt.session = Some(EditSession {
        config: editor.config().clone(),
        state,
    });
    ckpt.save(&args.out)?;
    if let Some(e) = failure {
        return Err(e.into());
    }
    println!(
        "{}",
        json!({
            "turns": turns,
            "turn_index": editor.state().turn_index,
            "records_consumed": ckpt.meta.records_consumed,
            "records_total": records.len(),
        })
    );
    Ok(())
}

fn eval(args: EvalArgs) -> anyhow::Result<()> {
    let post = load_checkpoint(&args.checkpoint)?;
    let pre = match &args.reference {
        Some(p) => load_checkpoint(p)?.params,
        None => post.params.clone(),
    };
    let mut records = load_records(&args.records, true).with_context(|| format!("reading {}", args.records.display()))?;
    if let Some(n) = args.limit {
        records.truncate(n);
    }
    let held_out = match &args.base {
        Some(p) => training_corpus(&post.vocab, &load_base(p, true)?, true)?,
        None => Vec::new(),
    };
    let report = evaluate(&pre, &post.params, &records, &post.vocab, &held_out)?;
    if let Some(mut w) = open_report(args.report.as_deref(), false)? {
        w.eval(&report)?;
    }
    println!("{}", serde_json::to_string(&report)?);
    Ok(())
}

fn inspect_stats(args: InspectArgs) -> anyhow::Result<()> {
    let ckpt = load_checkpoint(&args.checkpoint)?;
    let Some(session) = ckpt.session else {
        bail!("{} has no edit session", args.checkpoint.display());
    };
    for (module, (count, mu_norm, mean_sigma)) in summarize_state(&session.config, &session.state) {
        println!(
            "{}",
            json!({ "module": module, "count": count, "mu_norm": mu_norm, "mean_sigma": mean_sigma })
        );
    }
    println!(
        "{}",
        json!({ "turn_index": session.state.turn_index, "state_bytes": session.state.byte_size() })
    );
    Ok(())
}

fn error_record(err: &anyhow::Error) -> serde_json::Value {
    let kind = err
        .chain()
        .find_map(|e| e.downcast_ref::<lifelong_edit::Error>())
        .map_or("other", lifelong_edit::Error::kind);
    let message = err.chain().map(ToString::to_string).collect::<Vec<_>>().join(": ");
    json!({ "kind": "error", "error": kind, "message": message })
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.render().to_string();
            let first = msg.lines().next().unwrap_or("invalid arguments");
            eprintln!("{}", json!({ "kind": "error", "error": "usage", "message": first.trim_start_matches("error: ") }));
            return ExitCode::from(2);
        }
    };
    let result = match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Pretrain(a) => pretrain(a),
        Command::Edit(a) => edit(a),
        Command::Eval(a) => eval(a),
        Command::InspectStats(a) => inspect_stats(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", error_record(&e));
            ExitCode::FAILURE
        }
    }
}
