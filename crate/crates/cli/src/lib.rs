//! Command-line driver: configuration merging and subcommand dispatch.
//!
//! Configuration is layered: a preset (default, desk or full), then the
//! JSON file given by `--config`, then `VLKD_SEED`, then `--set key=value`
//! pairs, then the dedicated flags. The merged tree is deserialized with
//! unknown keys rejected and validated before any work starts.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Map, Value};
use vlkd_core::ablation::{run_ablation, standard_arms};
use vlkd_core::config::RunConfig;
use vlkd_core::inference::Bundle;
use vlkd_core::selftest::run_selftest;
use vlkd_core::textdata::write_jsonl;
use vlkd_core::trainloop::{
    eval_captions, eval_vqa, evaluate, finetune_examples, finetune_generative, load_bundle, load_student, load_teacher,
    pretrain_student, pretrain_teacher, run_distillation, save_bundle, save_student, save_teacher, Corpus, EvalSets,
    FinetuneTask, MetricsLog, RunLimits,
};
use vlkd_core::VlkdError;

#[derive(Debug, Parser)]
#[command(name = "vlkd", version, about = "Desk-scale vision-language knowledge distillation")]
pub struct Cli {
    /// Directory every input and output path is resolved against.
    #[arg(long, global = true, default_value = ".")]
    pub workdir: PathBuf,
    #[command(flatten)]
    pub config: ConfigArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    ClsOnly,
    FullSequence,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum TaskArg {
    Vqa,
    Caption,
}

#[derive(Debug, Clone, Default, Args)]
pub struct ConfigArgs {
    /// JSON config file (UTF-8).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Starting point before the file is applied: default, desk or full.
    #[arg(long, global = true)]
    pub preset: Option<String>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Weight of the text-text distance term.
    #[arg(long, global = true)]
    pub gamma: Option<f64>,
    #[arg(long, global = true)]
    pub distill_lr: Option<f64>,
    #[arg(long, global = true)]
    pub distill_epochs: Option<usize>,
    #[arg(long, global = true)]
    pub batch_size: Option<usize>,
    /// Number of synthetic training pairs.
    #[arg(long, global = true)]
    pub pairs: Option<usize>,
    #[arg(long, global = true, value_enum)]
    pub visual_context_mode: Option<ModeArg>,
    /// Objectives to switch off (ttdm, itcl).
    #[arg(long, global = true, value_delimiter = ',')]
    pub disable: Vec<String>,
    #[arg(long, global = true)]
    pub data_fraction: Option<f64>,
    #[arg(long, global = true)]
    pub unfreeze_teacher: bool,
    /// Arbitrary override `dotted.key=value`; the value is parsed as JSON
    /// and taken as a string otherwise. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write the synthetic training and held-out pairs as JSON Lines.
    GenData,
    /// Contrastively pretrain the toy teacher and freeze it.
    PretrainTeacher,
    /// Denoising-pretrain the toy student and record its perplexity.
    PretrainStudent,
    /// Distill the frozen teacher into the student.
    Distill {
        /// Stop after this many optimizer steps.
        #[arg(long)]
        max_steps: Option<usize>,
    },
    /// Supervised finetuning in the zero-shot prompt format.
    Finetune {
        #[arg(long, value_enum)]
        task: TaskArg,
    },
    /// Evaluate a distilled or finetuned checkpoint.
    Eval {
        /// Checkpoint directory name inside the workdir.
        #[arg(long, default_value = "distilled")]
        checkpoint: String,
        /// Skip beam-search captioning and the mask sweep.
        #[arg(long)]
        quick: bool,
    },
    /// Objective, data-size and frozen-teacher ablations over several seeds.
    Ablate,
    /// Run the invariant suite.
    Selftest,
}

#[derive(Debug)]
pub enum CliError {
    Core(VlkdError),
    SelftestFailed(Vec<String>),
}

impl CliError {
    /// One kebab-case token for scripts.
    pub fn reason(&self) -> String {
        match self {
            CliError::Core(e) => e.reason(),
            CliError::SelftestFailed(_) => "selftest-failed".into(),
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Core(e) => write!(f, "{e}"),
            CliError::SelftestFailed(names) => write!(f, "failed checks: {}", names.join(", ")),
        }
    }
}

impl std::error::Error for CliError {}

impl From<VlkdError> for CliError {
    fn from(e: VlkdError) -> Self {
        CliError::Core(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Core(e.into())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Core(e.into())
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

fn config_error(key: impl Into<String>, detail: impl Into<String>) -> CliError {
    CliError::Core(VlkdError::Config {
        key: key.into(),
        detail: detail.into(),
    })
}

/// Recursive object merge; `patch` wins on scalars and arrays.
fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

fn set_path(tree: &mut Value, key: &str, value: Value) -> CliResult<()> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(config_error(key, "malformed key"));
    }
    let mut node = tree;
    for p in &parts[..parts.len() - 1] {
        let obj = node
            .as_object_mut()
            .ok_or_else(|| config_error(key, format!("`{p}` is not a section")))?;
        node = obj.entry(p.to_string()).or_insert_with(|| Value::Object(Map::new()));
    }
    let obj = node
        .as_object_mut()
        .ok_or_else(|| config_error(key, "parent is not a section"))?;
    obj.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

/// Builds the effective configuration. `env_seed` is the value of
/// `VLKD_SEED`, if set.
pub fn parse_config(args: &ConfigArgs, workdir: &Path, env_seed: Option<&str>) -> CliResult<RunConfig> {
    let base = RunConfig::preset(args.preset.as_deref().unwrap_or("default"))?;
    let mut tree = serde_json::to_value(&base)?;
    if let Some(path) = &args.config {
        let path = workdir.join(path);
        let text = fs::read_to_string(&path)
            .map_err(|e| config_error("--config", format!("cannot read {}: {e}", path.display())))?;
        let file: Value =
            serde_json::from_str(&text).map_err(|e| config_error("--config", format!("{}: {e}", path.display())))?;
        if !file.is_object() {
            return Err(config_error("--config", "top level must be a JSON object"));
        }
        merge(&mut tree, file);
    }
    if let Some(s) = env_seed {
        let seed: u64 = s
            .trim()
            .parse()
            .map_err(|_| config_error("VLKD_SEED", format!("`{s}` is not an unsigned integer")))?;
        set_path(&mut tree, "seed", json!(seed))?;
    }
    for entry in &args.set {
        let (key, raw) = entry
            .split_once('=')
            .ok_or_else(|| config_error(entry.as_str(), "expected KEY=VALUE"))?;
        let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.into()));
        set_path(&mut tree, key.trim(), value)?;
    }
    let flags: [(&str, Option<Value>); 9] = [
        ("seed", args.seed.map(|v| json!(v))),
        ("distill.gamma", args.gamma.map(|v| json!(v))),
        ("distill.optim.base_lr", args.distill_lr.map(|v| json!(v))),
        ("distill.optim.epochs", args.distill_epochs.map(|v| json!(v))),
        ("distill.optim.batch_size", args.batch_size.map(|v| json!(v))),
        ("data.pairs", args.pairs.map(|v| json!(v))),
        (
            "teacher.visual_context_mode",
            args.visual_context_mode.map(|m| match m {
                ModeArg::ClsOnly => json!("cls_only"),
                ModeArg::FullSequence => json!("full_sequence"),
            }),
        ),
        ("distill.data_fraction", args.data_fraction.map(|v| json!(v))),
        ("distill.unfreeze_teacher", args.unfreeze_teacher.then_some(json!(true))),
    ];
    for (key, value) in flags {
        if let Some(v) = value {
            set_path(&mut tree, key, v)?;
        }
    }
    if !args.disable.is_empty() {
        set_path(&mut tree, "distill.disable", json!(args.disable))?;
    }
    let cfg: RunConfig = serde_path_to_error::deserialize(tree).map_err(|e| {
        let key = e.path().to_string();
        config_error(key, e.into_inner().to_string())
    })?;
    cfg.validate()?;
    Ok(cfg)
}

/// Writes `{kind, seed, config, ...body}` as pretty JSON.
fn write_report(path: &Path, kind: &str, cfg: &RunConfig, body: Value) -> CliResult<()> {
    let mut out = json!({"kind": kind, "seed": cfg.seed, "config": cfg});
    merge(&mut out, body);
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut text = serde_json::to_string_pretty(&out)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

struct Workdir(PathBuf);

impl Workdir {
    fn path(&self, rel: &str) -> PathBuf {
        self.0.join(rel)
    }

    fn metrics(&self, name: &str) -> CliResult<MetricsLog> {
        let dir = self.path("metrics");
        fs::create_dir_all(&dir)?;
        Ok(MetricsLog::to_file(&dir.join(format!("{name}.jsonl")))?)
    }

    fn report(&self, name: &str) -> PathBuf {
        self.path("reports").join(format!("{name}.json"))
    }
}

fn load_pretrained(
    w: &Workdir,
    cfg: &RunConfig,
) -> CliResult<(vlkd_core::teacher::Teacher<f32>, vlkd_core::student::Student<f32>, f64)> {
    let teacher = load_teacher(&w.path("teacher"), cfg)?;
    let (student, p0) = load_student(&w.path("student"), cfg)?;
    let p0 = p0.ok_or_else(|| VlkdError::Format("student checkpoint carries no recorded perplexity".into()))?;
    Ok((teacher, student, p0))
}

fn mask_sweep(cfg: &RunConfig, b: &Bundle, corpus: &Corpus, sets: &EvalSets) -> CliResult<Value> {
    let mut vqa = Map::new();
    for n in 1..=3 {
        vqa.insert(n.to_string(), json!(eval_vqa(cfg, b, &corpus.vocab, sets, n)?.accuracy));
    }
    let mut caption = Map::new();
    for m in 5..=8 {
        caption.insert(m.to_string(), json!(eval_captions(cfg, b, &corpus.vocab, sets, m)?.f1));
    }
    Ok(json!({"vqa_accuracy_by_masks": vqa, "caption_f1_by_masks": caption}))
}

/// Runs one subcommand and returns the lines to print on success.
pub fn dispatch(command: &Command, cfg: &RunConfig, workdir: &Path) -> CliResult<Vec<String>> {
    fs::create_dir_all(workdir)?;
    let w = Workdir(workdir.to_path_buf());
    let mut out = vec![];
    match command {
        Command::GenData => {
            let corpus = Corpus::generate(cfg);
            let dir = w.path("data");
            fs::create_dir_all(&dir)?;
            write_jsonl(&dir.join("train.jsonl"), &corpus.train)?;
            write_jsonl(&dir.join("heldout.jsonl"), &corpus.heldout)?;
            write_report(
                &dir.join("manifest.json"),
                "dataset",
                cfg,
                json!({"train_records": corpus.train.len(), "heldout_records": corpus.heldout.len()}),
            )?;
            out.push(format!("wrote {} training and {} held-out pairs", corpus.train.len(), corpus.heldout.len()));
        }
        Command::PretrainTeacher => {
            let corpus = Corpus::generate(cfg);
            let (teacher, report) = pretrain_teacher(cfg, &corpus, &mut w.metrics("teacher")?)?;
            let body = json!({"report": report});
            save_teacher(&w.path("teacher"), cfg, &teacher, body.clone())?;
            write_report(&w.report("teacher"), "teacher", cfg, body)?;
            out.push(format!(
                "teacher: {} steps, final loss {:.4}, held-out R@1 {:.2}",
                report.steps, report.final_loss, report.retrieval.r1.image_to_text
            ));
        }
        Command::PretrainStudent => {
            let corpus = Corpus::generate(cfg);
            let (student, report) = pretrain_student(cfg, &corpus, &mut w.metrics("student")?)?;
            let body = json!({"report": report});
            save_student(&w.path("student"), cfg, &student, report.p0, body.clone())?;
            write_report(&w.report("student"), "student", cfg, body)?;
            out.push(format!("student: {} steps, held-out perplexity {:.4}", report.steps, report.p0));
        }
        Command::Distill { max_steps } => {
            let (teacher, student, p0) = load_pretrained(&w, cfg)?;
            let corpus = Corpus::generate(cfg);
            let sets = EvalSets::build(cfg, &corpus)?;
            let limits = RunLimits { max_steps: *max_steps };
            let (bundle, report) =
                run_distillation(cfg, &corpus, &sets, teacher, student, &mut w.metrics("distill")?, limits)?;
            let eval = evaluate(cfg, &bundle, &corpus.vocab, &sets, true)?;
            let body = json!({
                "report": report, "eval": eval, "p0": p0,
                "perplexity_ratio": eval.perplexity / p0,
                "loss_ratio": report.final_average() / report.initial_average(),
            });
            save_bundle(&w.path("distilled"), vlkd_core::trainloop::kind::DISTILLED, cfg, &bundle, Some(p0), body.clone())?;
            write_report(&w.report("distill"), "distill", cfg, body)?;
            out.push(format!(
                "distill: {} steps, loss {:.3} -> {:.3}, R@1 {:.2} -> {:.2}, vqa {:.3}, caption f1 {:.3}, perplexity {:.4} (p0 {:.4})",
                report.steps,
                report.initial_average(),
                report.final_average(),
                report.retrieval_before.r1.image_to_text,
                report.retrieval_after.r1.image_to_text,
                eval.vqa.accuracy,
                eval.caption.as_ref().map_or(0.0, |c| c.f1),
                eval.perplexity,
                p0
            ));
        }
        Command::Finetune { task } => {
            let (bundle, p0) = load_bundle(&w.path("distilled"), cfg)?;
            let corpus = Corpus::generate(cfg);
            let sets = EvalSets::build(cfg, &corpus)?;
            let (task, name) = match task {
                TaskArg::Vqa => (FinetuneTask::Vqa, "vqa"),
                TaskArg::Caption => (FinetuneTask::Caption, "caption"),
            };
            let score = |b: &Bundle| -> CliResult<f64> {
                Ok(match task {
                    FinetuneTask::Vqa => eval_vqa(cfg, b, &corpus.vocab, &sets, cfg.generation.vqa_masks)?.accuracy,
                    FinetuneTask::Caption => eval_captions(cfg, b, &corpus.vocab, &sets, cfg.generation.caption_masks)?.f1,
                })
            };
            let before = score(&bundle)?;
            let examples = finetune_examples(cfg, &corpus.vocab, &corpus.train, task)?;
            let (bundle, report) =
                finetune_generative(cfg, &corpus, bundle, &examples, &mut w.metrics(&format!("finetune-{name}"))?)?;
            let after = score(&bundle)?;
            let body = json!({"task": name, "report": report, "zero_shot": before, "finetuned": after});
            save_bundle(
                &w.path(&format!("finetuned-{name}")),
                vlkd_core::trainloop::kind::FINETUNED,
                cfg,
                &bundle,
                p0,
                body.clone(),
            )?;
            write_report(&w.report(&format!("finetune-{name}")), "finetune", cfg, body)?;
            out.push(format!("finetune {name}: {} steps, score {before:.4} -> {after:.4}", report.steps));
        }
        Command::Eval { checkpoint, quick } => {
            let (bundle, p0) = load_bundle(&w.path(checkpoint), cfg)?;
            let corpus = Corpus::generate(cfg);
            let sets = EvalSets::build(cfg, &corpus)?;
            let eval = evaluate(cfg, &bundle, &corpus.vocab, &sets, !quick)?;
            let sweep = if *quick { Value::Null } else { mask_sweep(cfg, &bundle, &corpus, &sets)? };
            let ratio = p0.map(|p| eval.perplexity / p);
            write_report(
                &w.report(&format!("eval-{checkpoint}")),
                "eval",
                cfg,
                json!({"checkpoint": checkpoint, "eval": eval, "p0": p0, "perplexity_ratio": ratio, "mask_sweep": sweep}),
            )?;
            out.push(format!(
                "eval {checkpoint}: R@1 {:.2}, vqa {:.3} (majority {:.3}), caption f1 {}, perplexity {:.4}",
                eval.retrieval.r1.image_to_text,
                eval.vqa.accuracy,
                eval.vqa.majority_baseline,
                eval.caption
                    .as_ref()
                    .map_or("skipped".into(), |c| format!("{:.3} (random {:.3})", c.f1, c.random_baseline_f1)),
                eval.perplexity
            ));
        }
        Command::Ablate => {
            let (teacher, student, _) = load_pretrained(&w, cfg)?;
            let corpus = Corpus::generate(cfg);
            let arms = standard_arms(cfg);
            let report = run_ablation(cfg, &corpus, &teacher, &student, &arms, &mut |line| eprintln!("{line}"))?;
            write_report(&w.report("ablation"), "ablation", cfg, json!({"ablation": report}))?;
            let table = report.table();
            fs::write(w.path("reports").join("ablation.txt"), &table)?;
            out.extend(table.lines().map(String::from));
        }
        Command::Selftest => {
            let checks = run_selftest();
            write_report(&w.report("selftest"), "selftest", cfg, json!({"checks": checks}))?;
            out.extend(
                checks
                    .iter()
                    .map(|c| format!("{} {}: {}", if c.passed { "ok  " } else { "FAIL" }, c.name, c.detail)),
            );
            let failed: Vec<String> = checks.iter().filter(|c| !c.passed).map(|c| c.name.clone()).collect();
            if !failed.is_empty() {
                for line in &out {
                    println!("{line}");
                }
                return Err(CliError::SelftestFailed(failed));
            }
        }
    }
    Ok(out)
}

/// Parses, echoes the effective config on stderr and dispatches.
pub fn run(cli: &Cli, env_seed: Option<&str>) -> CliResult<Vec<String>> {
    let cfg = parse_config(&cli.config, &cli.workdir, env_seed)?;
    eprintln!("effective config: {}", serde_json::to_string(&cfg)?);
    dispatch(&cli.command, &cfg, &cli.workdir)
}

/// The one-line failure record printed on stderr.
pub fn failure_line(e: &CliError) -> String {
    json!({"status": "error", "reason": e.reason(), "detail": e.to_string()}).to_string()
}
