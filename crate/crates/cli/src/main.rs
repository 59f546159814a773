//! `softprompt`: corpus preparation, pretraining, prompt-agent training,
//! fine-tuning, generation, evaluation and experiment grids.
//!
//! Exit status is 0 on success, 1 on a runtime failure and 2 on a usage
//! error. Failures print one JSON line to stderr.

mod settings;

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, CommandFactory, Parser, Subcommand};
use serde::Serialize;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use softprompt::experiments::{GridResources, RunRecord};
use softprompt::generate::{summarize_batch, SchemeResources};
use softprompt::lm::PretrainReport;
use softprompt::metrics::{HashedBagEmbedder, LmEmbedder, SentenceEmbedder};
use softprompt::train::{code_budget, prepare_examples, BleuValidator, TrainTarget};
use softprompt::*;

use settings::*;

/// Environment variable naming the pretrained-model cache directory.
pub const CACHE_ENV: &str = "SOFTPROMPT_CACHE";

#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub kind: String,
    pub message: String,
}

impl CliError {
    pub fn usage(message: impl Into<String>) -> Self {
        CliError {
            code: 2,
            kind: "usage".into(),
            message: message.into(),
        }
    }

    fn runtime(kind: &str, message: impl Into<String>) -> Self {
        CliError {
            code: 1,
            kind: kind.into(),
            message: message.into(),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Argument(_) | Error::Config(_) => 2,
            _ => 1,
        };
        CliError {
            code,
            kind: e.kind().into(),
            message: e.to_string(),
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Parser)]
#[command(name = "softprompt", version, about = "Train prompt agents that steer a frozen language model to summarize code")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Split a corpus and build its vocabulary.
    Prepare(PrepareArgs),
    /// Pretrain the base language model on a prepared corpus.
    PretrainLm(PretrainArgs),
    /// Train a prompt agent against a frozen language model.
    TrainAgent(TrainArgs),
    /// Fine-tune every language-model parameter.
    FineTune(TrainArgs),
    /// Summarize snippets with one scheme.
    Generate(GenerateArgs),
    /// Score predictions against references.
    Evaluate(EvaluateArgs),
    /// Run an experiment grid.
    Grid(GridArgs),
    /// Render tables and plots from grid results.
    Report(ReportArgs),
}

#[derive(Args)]
struct Common {
    /// JSON file of settings; flags override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Replace a non-empty output directory.
    #[arg(long, global = true)]
    force: bool,
}

#[derive(Args, Serialize)]
struct PrepareArgs {
    #[command(flatten)]
    #[serde(skip)]
    common: Common,
    /// JSON Lines file, or toy-java / toy-javascript.
    #[arg(long)]
    corpus: Option<String>,
    #[arg(long)]
    train_fraction: Option<f64>,
    #[arg(long)]
    valid_fraction: Option<f64>,
    #[arg(long)]
    test_fraction: Option<f64>,
    #[arg(long)]
    min_freq: Option<usize>,
    #[arg(long)]
    max_vocab: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Serialize)]
struct PretrainArgs {
    #[command(flatten)]
    #[serde(skip)]
    common: Common,
    /// Directory written by `prepare`.
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long)]
    d_model: Option<usize>,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    d_ff: Option<usize>,
    #[arg(long)]
    max_positions: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Serialize)]
struct TrainArgs {
    #[command(flatten)]
    #[serde(skip)]
    common: Common,
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long)]
    lm_checkpoint: Option<PathBuf>,
    #[arg(long)]
    prompt_length: Option<usize>,
    /// front, back or two-end.
    #[arg(long)]
    fusion: Option<FusionMode>,
    /// bilstm or transformer.
    #[arg(long)]
    encoder: Option<EncoderVariant>,
    #[arg(long)]
    train_size: Option<usize>,
    #[arg(long)]
    valid_size: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long)]
    max_new_tokens: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Serialize)]
struct GenerateArgs {
    #[command(flatten)]
    #[serde(skip)]
    common: Common,
    /// zero-shot, few-shot, fine-tune or prompt-agent.
    #[arg(long)]
    scheme: Option<Scheme>,
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long)]
    input: Option<PathBuf>,
    #[arg(long)]
    lm_checkpoint: Option<PathBuf>,
    #[arg(long)]
    agent_checkpoint: Option<PathBuf>,
    /// pi1, pi2 or block.
    #[arg(long)]
    template: Option<String>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    limit: Option<usize>,
    #[arg(long)]
    max_new_tokens: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Serialize)]
struct EvaluateArgs {
    #[command(flatten)]
    #[serde(skip)]
    common: Common,
    /// Predictions (`summary` field, else `docstring`).
    #[arg(long)]
    pred: Option<PathBuf>,
    /// References (`reference` field, else `docstring`, else `summary`).
    #[arg(long = "ref")]
    #[serde(rename = "ref")]
    reference: Option<PathBuf>,
    #[arg(long)]
    lm_checkpoint: Option<PathBuf>,
}

#[derive(Args, Serialize)]
struct GridArgs {
    #[command(flatten)]
    #[serde(skip)]
    common: Common,
    /// Grid spec JSON.
    #[arg(long)]
    spec: Option<PathBuf>,
    /// Prepared corpus as NAME=DIR, or DIR for a spec with one corpus.
    #[arg(long)]
    #[serde(skip)]
    corpus: Vec<String>,
    #[arg(long)]
    lm_checkpoint: Option<PathBuf>,
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    valid_size: Option<usize>,
    #[arg(long)]
    test_size: Option<usize>,
}

#[derive(Args, Serialize)]
struct ReportArgs {
    #[command(flatten)]
    #[serde(skip)]
    common: Common,
    #[arg(long)]
    results: Option<PathBuf>,
}

fn required<T: Clone>(value: &Option<T>, flag: &str, command: &str) -> CliResult<T> {
    value.clone().ok_or_else(|| {
        let mut cmd = Cli::command();
        let usage = cmd
            .find_subcommand_mut(command)
            .map(|c| c.render_usage().to_string())
            .unwrap_or_default();
        CliError::usage(format!("missing required flag --{flag}; {}", usage.trim()))
    })
}

/// Creates the output directory, refusing to reuse a non-empty one unless
/// forced, and records the effective settings in it.
fn open_out(common: &Common, command: &str, effective: &Value) -> CliResult<PathBuf> {
    let out = required(&common.out, "out", command)?;
    let occupied = fs::read_dir(&out).map(|mut d| d.next().is_some()).unwrap_or(false);
    if occupied && !common.force {
        return Err(CliError::usage(format!(
            "{} is not empty; pass --force to overwrite",
            out.display()
        )));
    }
    fs::create_dir_all(&out).map_err(|e| CliError::runtime("io", format!("{}: {e}", out.display())))?;
    write_json(&out.join("effective_config.json"), &json!({ "command": command, "settings": effective }))?;
    Ok(out)
}

fn write_json(path: &Path, value: &impl Serialize) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value).expect("values serialize");
    fs::write(path, text + "\n").map_err(|e| CliError::runtime("io", format!("{}: {e}", path.display())))
}

fn load_corpus_dir(dir: &Path) -> CliResult<Splits> {
    Ok(Splits::read(dir)?)
}

fn load_lm(path: &Path) -> CliResult<(LanguageModel<f32>, Vocabulary)> {
    Ok(LanguageModel::load(path)?)
}

fn leading<T: Clone>(xs: &[T], n: Option<usize>) -> Vec<T> {
    xs[..n.map_or(xs.len(), |n| n.min(xs.len()))].to_vec()
}

fn prepare(args: &PrepareArgs) -> CliResult<Value> {
    let (s, effective): (PrepareSettings, _) = settings::resolve(args, args.common.config.as_deref())?;
    let corpus = required(&s.corpus, "corpus", "prepare")?;
    let pairs = match toy::bundled(corpus.trim_start_matches("toy-")) {
        Some(pairs) if corpus.starts_with("toy-") => pairs,
        _ => load_jsonl(&corpus)?.pairs,
    };
    let splits = split_pairs(&pairs, s.train_fraction, s.valid_fraction, s.test_fraction, s.seed)?;
    let vocab = build_vocabulary(&splits.train, s.min_freq, s.max_vocab)?;
    let out = open_out(&args.common, "prepare", &effective)?;
    splits.write(&out)?;
    write_json(&out.join("vocab.json"), &vocab)?;
    Ok(json!({
        "train": splits.train.len(),
        "valid": splits.valid.len(),
        "test": splits.test.len(),
        "vocabulary": vocab.len(),
    }))
}

fn cache_key(s: &PretrainSettings, corpus: &Path) -> CliResult<String> {
    let mut h = Sha256::new();
    let mut canonical = serde_json::to_value(s).expect("settings serialize");
    canonical["corpus"] = Value::Null;
    h.update(canonical.to_string());
    for name in ["train.jsonl", "vocab.json"] {
        let path = corpus.join(name);
        let bytes = fs::read(&path).map_err(|e| CliError::runtime("io", format!("{}: {e}", path.display())))?;
        h.update(bytes);
    }
    Ok(hex::encode(h.finalize()))
}

fn pretrain(args: &PretrainArgs) -> CliResult<Value> {
    let (s, effective): (PretrainSettings, _) = settings::resolve(args, args.common.config.as_deref())?;
    let corpus = required(&s.corpus, "corpus", "pretrain-lm")?;
    let splits = load_corpus_dir(&corpus)?;
    let vocab_path = corpus.join("vocab.json");
    let vocab: Vocabulary = match fs::read_to_string(&vocab_path) {
        Ok(text) => serde_json::from_str(&text).map_err(|e| CliError::runtime("json", format!("{}: {e}", vocab_path.display())))?,
        Err(_) => build_vocabulary(&splits.train, 1, usize::MAX)?,
    };
    let config = LmConfig {
        d_model: s.d_model,
        n_layers: s.layers,
        n_heads: s.heads,
        d_ff: s.d_ff,
        vocab_size: vocab.len(),
        max_positions: s.max_positions,
        dropout: 0.0,
        seed: s.seed,
    };
    config.validate()?;
    let pretrain_cfg = PretrainConfig {
        epochs: s.epochs,
        batch_size: s.batch_size,
        learning_rate: s.learning_rate,
        seed: s.seed,
        mixture: s.mixture.clone(),
        ..Default::default()
    };
    let out = open_out(&args.common, "pretrain-lm", &effective)?;
    let target = out.join("lm.ckpt");
    let cached = std::env::var_os(CACHE_ENV)
        .filter(|v| !v.is_empty())
        .map(|dir| -> CliResult<PathBuf> { Ok(PathBuf::from(dir).join(format!("lm-{}.ckpt", cache_key(&s, &corpus)?))) })
        .transpose()?;
    if let Some(hit) = cached.as_ref().filter(|p| p.exists()) {
        fs::copy(hit, &target).map_err(|e| CliError::runtime("io", format!("{}: {e}", hit.display())))?;
        log::info!("reused cached model {}", hit.display());
        return Ok(json!({ "checkpoint": target, "cached": true }));
    }
    let (lm, report): (LanguageModel<f32>, PretrainReport) = pretrain_lm(&splits.train, &vocab, &config, &pretrain_cfg)?;
    lm.save(&target, &vocab)?;
    write_json(&out.join("pretrain_report.json"), &report)?;
    if let Some(path) = cached {
        if let Some(dir) = path.parent() {
            let _ = fs::create_dir_all(dir);
        }
        if let Err(e) = fs::copy(&target, &path) {
            log::warn!("could not populate cache {}: {e}", path.display());
        }
    }
    Ok(json!({
        "checkpoint": target,
        "cached": false,
        "parameters": lm.num_params(),
        "final_loss": report.epoch_losses.last(),
    }))
}

fn train_command(args: &TrainArgs, regime: Regime) -> CliResult<Value> {
    let name = match regime {
        Regime::PromptAgent => "train-agent",
        Regime::FineTune => "fine-tune",
    };
    let (s, effective): (TrainSettings, _) = settings::resolve(args, args.common.config.as_deref())?;
    let corpus = required(&s.corpus, "corpus", name)?;
    let lm_path = required(&s.lm_checkpoint, "lm-checkpoint", name)?;
    let splits = load_corpus_dir(&corpus)?;
    let (mut lm, vocab) = load_lm(&lm_path)?;
    let cfg = TrainConfig {
        batch_size: s.batch_size,
        learning_rate: s.learning_rate,
        patience: s.patience,
        max_epochs: s.epochs,
        seed: s.seed,
        regime,
        ..Default::default()
    };
    cfg.validate()?;
    let agent_config = AgentConfig {
        prompt_length: s.prompt_length,
        d_model: lm.d_model(),
        fusion: s.fusion,
        encoder: s.encoder,
        seed: s.seed,
        ..AgentConfig::new(lm.d_model())
    };
    if regime == Regime::PromptAgent {
        agent_config.validate()?;
    }
    let out = open_out(&args.common, name, &effective)?;
    let train_pairs = leading(&splits.train, s.train_size);
    let valid_pairs = leading(&splits.valid, s.valid_size);
    let prompt_len = if regime == Regime::PromptAgent { s.prompt_length } else { 1 };
    let budget = code_budget(lm.config().max_positions, prompt_len, cfg.summary_max_len, cfg.code_max_len);
    let examples = prepare_examples(&train_pairs, &vocab, budget, cfg.summary_max_len);
    let mut validator = BleuValidator {
        pairs: &valid_pairs,
        vocab: &vocab,
        options: DecodeOptions {
            max_new_tokens: s.max_new_tokens,
            ..Default::default()
        },
    };
    let report = match regime {
        Regime::PromptAgent => {
            lm.freeze();
            let mut agent = PromptAgent::new(agent_config)?;
            let report = train(&mut TrainTarget::PromptAgent { lm: &lm, agent: &mut agent }, &examples, &cfg, &mut validator, Some(&vocab))?;
            save_agent(&agent, out.join("agent.ckpt"))?;
            report
        }
        Regime::FineTune => {
            lm.unfreeze();
            let report = train(&mut TrainTarget::FineTune { lm: &mut lm }, &examples, &cfg, &mut validator, Some(&vocab))?;
            lm.save(out.join("lm.ckpt"), &vocab)?;
            report
        }
    };
    write_json(&out.join("train_report.json"), &report)?;
    Ok(json!({
        "epochs": report.stopping_epoch,
        "best_epoch": report.best_epoch,
        "best_bleu": report.best_bleu,
        "lm_unchanged": report.lm_checksum_before == report.lm_checksum_after,
    }))
}

fn read_field_lines(path: &Path, keys: &[&str]) -> CliResult<Vec<String>> {
    let file = fs::File::open(path).map_err(|e| CliError::runtime("io", format!("{}: {e}", path.display())))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| CliError::runtime("io", format!("{}: {e}", path.display())))?;
        if line.trim().is_empty() {
            continue;
        }
        let value: Value = serde_json::from_str(&line)
            .map_err(|e| CliError::runtime("record", format!("{}:{}: {e}", path.display(), i + 1)))?;
        let text = keys
            .iter()
            .find_map(|k| value.get(k).and_then(Value::as_str))
            .ok_or_else(|| CliError::runtime("record", format!("{}:{}: none of {keys:?} present", path.display(), i + 1)))?;
        out.push(text.to_string());
    }
    Ok(out)
}

fn generate(args: &GenerateArgs) -> CliResult<Value> {
    let (s, effective): (GenerateSettings, _) = settings::resolve(args, args.common.config.as_deref())?;
    let lm_path = required(&s.lm_checkpoint, "lm-checkpoint", "generate")?;
    let (snippets, references, train_pairs): (Vec<String>, Vec<Option<String>>, Vec<CodeSummaryPair>) = match (&s.input, &s.corpus) {
        (Some(input), _) => {
            let codes = read_field_lines(input, &["code"])?;
            let refs = read_field_lines(input, &["reference", "docstring", "summary"]).ok();
            let train = match &s.corpus {
                Some(dir) => load_corpus_dir(dir)?.train,
                None => Vec::new(),
            };
            let n = codes.len();
            (codes, refs.map_or(vec![None; n], |r| r.into_iter().map(Some).collect()), train)
        }
        (None, Some(dir)) => {
            let splits = load_corpus_dir(dir)?;
            let test = leading(&splits.test, s.limit);
            (
                test.iter().map(|p| p.code.clone()).collect(),
                test.iter().map(|p| Some(p.summary.clone())).collect(),
                splits.train,
            )
        }
        (None, None) => return Err(CliError::usage("generate needs --corpus or --input")),
    };
    let (mut lm, vocab) = load_lm(&lm_path)?;
    lm.freeze();
    let options = DecodeOptions {
        max_new_tokens: s.max_new_tokens,
        ..Default::default()
    };
    let agent;
    let resources = match s.scheme {
        Scheme::ZeroShot => SchemeResources::Discrete {
            lm: &lm,
            template: PromptTemplate::by_id(&s.template)?,
            examples: Vec::new(),
        },
        Scheme::FewShot => {
            if train_pairs.is_empty() {
                return Err(CliError::usage("few-shot generation needs --corpus for its examples"));
            }
            SchemeResources::Discrete {
                lm: &lm,
                template: PromptTemplate::block(),
                examples: select_few_shot(&train_pairs, s.k, s.seed)?,
            }
        }
        Scheme::FineTune => SchemeResources::FineTuned { lm: &lm },
        Scheme::PromptAgent => {
            let path = required(&s.agent_checkpoint, "agent-checkpoint", "generate")?;
            agent = load_agent(path, &lm)?;
            SchemeResources::PromptAgent { lm: &lm, agent: &agent }
        }
    };
    let out = open_out(&args.common, "generate", &effective)?;
    let codes: Vec<&str> = snippets.iter().map(String::as_str).collect();
    let results = summarize_batch(&codes, &resources, &vocab, &options)?;
    let mut lines = String::new();
    let mut failures = 0;
    for ((code, result), reference) in codes.iter().zip(results).zip(&references) {
        let summary = result.unwrap_or_else(|e| {
            log::warn!("could not summarize a snippet: {e}");
            failures += 1;
            String::new()
        });
        let mut row = json!({ "code": code, "summary": summary, "scheme": s.scheme });
        if let Some(r) = reference {
            row["reference"] = json!(r);
        }
        lines.push_str(&row.to_string());
        lines.push('\n');
    }
    let path = out.join("predictions.jsonl");
    fs::write(&path, lines).map_err(|e| CliError::runtime("io", format!("{}: {e}", path.display())))?;
    Ok(json!({ "predictions": path, "count": codes.len(), "failures": failures }))
}

fn evaluate(args: &EvaluateArgs) -> CliResult<Value> {
    let (s, effective): (EvaluateSettings, _) = settings::resolve(args, args.common.config.as_deref())?;
    let pred = required(&s.pred, "pred", "evaluate")?;
    let reference = required(&s.r#ref, "ref", "evaluate")?;
    let preds = read_field_lines(&pred, &["summary", "docstring"])?;
    let refs = read_field_lines(&reference, &["reference", "docstring", "summary"])?;
    let embedder: Box<dyn SentenceEmbedder> = match &s.lm_checkpoint {
        Some(path) => {
            let (lm, vocab) = load_lm(path)?;
            Box::new(LmEmbedder::new(&lm, &vocab))
        }
        None => Box::new(HashedBagEmbedder::default()),
    };
    let report = MetricReport::compute(&preds, &refs, embedder.as_ref())?;
    let summary = json!({
        "bleu": report.bleu,
        "meteor": report.meteor,
        "rouge_l": report.rouge_l,
        "semantic_sim": report.semantic_sim,
        "count": report.count,
    });
    if args.common.out.is_some() {
        let out = open_out(&args.common, "evaluate", &effective)?;
        write_json(&out.join("metrics.json"), &summary)?;
        let path = out.join("per_example.csv");
        fs::write(&path, report.to_csv()).map_err(|e| CliError::runtime("io", format!("{}: {e}", path.display())))?;
    }
    Ok(summary)
}

fn grid(args: &GridArgs) -> CliResult<Value> {
    let (mut s, _): (GridSettings, _) = settings::resolve(args, args.common.config.as_deref())?;
    let spec_path = required(&s.spec, "spec", "grid")?;
    let text = fs::read_to_string(&spec_path).map_err(|e| CliError::runtime("io", format!("{}: {e}", spec_path.display())))?;
    let spec = GridSpec::from_json(&text)?;
    for c in &args.corpus {
        match c.split_once('=') {
            Some((name, dir)) => {
                s.corpora.insert(name.to_string(), dir.into());
            }
            None if spec.corpora.len() == 1 => {
                s.corpora.insert(spec.corpora[0].clone(), c.into());
            }
            None => return Err(CliError::usage("grid with several corpora needs --corpus NAME=DIR for each")),
        }
    }
    if let Some(missing) = spec.corpora.iter().find(|c| !s.corpora.contains_key(*c)) {
        return Err(CliError::usage(format!("no --corpus given for grid corpus {missing:?}")));
    }
    let lm_path = required(&s.lm_checkpoint, "lm-checkpoint", "grid")?;
    let grid = ExperimentGrid::expand(&spec)?;
    let effective = serde_json::to_value(&s).expect("settings serialize");
    let out = open_out(&args.common, "grid", &json!({ "settings": effective, "spec": spec }))?;
    let (mut lm, vocab) = load_lm(&lm_path)?;
    lm.freeze();
    let mut corpora = BTreeMap::new();
    for (name, dir) in &s.corpora {
        corpora.insert(name.clone(), load_corpus_dir(dir)?);
    }
    let embedder = LmEmbedder::new(&lm, &vocab);
    let resources = GridResources {
        lm: &lm,
        vocab: &vocab,
        corpora,
        train: TrainConfig {
            batch_size: s.batch_size,
            learning_rate: s.learning_rate,
            patience: s.patience,
            max_epochs: s.epochs,
            ..Default::default()
        },
        decode: DecodeOptions {
            max_new_tokens: s.max_new_tokens,
            ..Default::default()
        },
        few_shot_k: s.k,
        valid_limit: s.valid_size,
        test_limit: s.test_size,
        results_dir: Some(out.join("runs")),
        workers: s.workers,
        embedder: &embedder,
    };
    let outcome = run_grid(&grid, &resources)?;
    write_json(&out.join("failures.json"), &outcome.failures)?;
    if !outcome.records.is_empty() {
        emit_report(&outcome.records, &outcome.failures, Some(&out.join("report")))?;
    }
    Ok(json!({
        "points": grid.points.len(),
        "completed": outcome.records.len(),
        "reused": outcome.reused,
        "failed": outcome.failures.len(),
    }))
}

fn report(args: &ReportArgs) -> CliResult<Value> {
    let (s, effective): (ReportSettings, _) = settings::resolve(args, args.common.config.as_deref())?;
    let results = required(&s.results, "results", "report")?;
    let runs = if results.join("runs").is_dir() { results.join("runs") } else { results.clone() };
    let mut records = Vec::new();
    let entries = fs::read_dir(&runs).map_err(|e| CliError::runtime("io", format!("{}: {e}", runs.display())))?;
    let mut paths: Vec<PathBuf> = entries.filter_map(|e| e.ok().map(|e| e.path())).collect();
    paths.sort();
    for path in paths.iter().filter(|p| p.extension().is_some_and(|e| e == "json")) {
        let text = fs::read_to_string(path).map_err(|e| CliError::runtime("io", format!("{}: {e}", path.display())))?;
        match serde_json::from_str::<RunRecord>(&text) {
            Ok(r) => records.push(r),
            Err(e) => log::warn!("skipping {}: {e}", path.display()),
        }
    }
    let out = open_out(&args.common, "report", &effective)?;
    let rep = emit_report(&records, &[], Some(&out))?;
    Ok(json!({ "records": records.len(), "annotations": rep.annotations }))
}

fn run(cli: Cli) -> CliResult<Value> {
    match &cli.command {
        Command::Prepare(a) => prepare(a),
        Command::PretrainLm(a) => pretrain(a),
        Command::TrainAgent(a) => train_command(a, Regime::PromptAgent),
        Command::FineTune(a) => train_command(a, Regime::FineTune),
        Command::Generate(a) => generate(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Grid(a) => grid(a),
        Command::Report(a) => report(a),
    }
}

fn fail(e: &CliError) -> ExitCode {
    eprintln!("{}", json!({ "error": { "kind": e.kind, "message": e.message, "exit_code": e.code } }));
    ExitCode::from(e.code)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let code = fail(&CliError::usage(e.kind().to_string()));
            eprint!("{}", e.render());
            return code;
        }
    };
    match run(cli) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => fail(&e),
    }
}
