//! Experiment grids over schemes, prompt lengths, fusion modes, encoders,
//! training-set sizes, corpora and seeds; resumable execution; tables and
//! SVG plots of the results.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::agent::{AgentConfig, EncoderVariant, FusionMode, PromptAgent};
use crate::corpus::{select_few_shot, Splits, Vocabulary};
use crate::error::{Error, Result};
use crate::generate::{summarize_batch, DecodeOptions, PromptTemplate, Scheme, SchemeResources};
use crate::lm::LanguageModel;
use crate::metrics::{MetricReport, SentenceEmbedder};
use crate::train::{code_budget, prepare_examples, train, BleuValidator, Regime, TrainConfig, TrainReport, TrainTarget};

/// Axes of a grid; every combination becomes a run. Axes that do not apply
/// to a scheme are ignored for it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridSpec {
    pub schemes: Vec<Scheme>,
    pub prompt_lengths: Vec<usize>,
    pub fusion_modes: Vec<FusionMode>,
    pub encoders: Vec<EncoderVariant>,
    /// `null` means the whole training split.
    pub train_sizes: Vec<Option<usize>>,
    pub corpora: Vec<String>,
    pub seeds: Vec<u64>,
    /// Instruction templates for zero-shot runs.
    pub templates: Vec<String>,
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec {
            schemes: vec![Scheme::PromptAgent],
            prompt_lengths: vec![100],
            fusion_modes: vec![FusionMode::Back],
            encoders: vec![EncoderVariant::Bilstm],
            train_sizes: vec![None],
            corpora: vec!["java".into()],
            seeds: vec![0],
            templates: vec!["pi1".into()],
        }
    }
}

impl GridSpec {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(format!("grid spec: {e}")))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GridPoint {
    pub scheme: Scheme,
    pub prompt_length: Option<usize>,
    pub fusion_mode: Option<FusionMode>,
    pub encoder: Option<EncoderVariant>,
    pub train_size: Option<usize>,
    pub template: Option<String>,
    pub corpus: String,
    pub seed: u64,
}

impl GridPoint {
    /// Prompt-agent point with the given agent settings.
    pub fn prompt_agent(n: usize, mode: FusionMode, encoder: EncoderVariant, corpus: &str, seed: u64) -> Self {
        GridPoint {
            scheme: Scheme::PromptAgent,
            prompt_length: Some(n),
            fusion_mode: Some(mode),
            encoder: Some(encoder),
            train_size: None,
            template: None,
            corpus: corpus.into(),
            seed,
        }
    }

    /// Content hash identifying this point's results on disk.
    pub fn key(&self) -> String {
        let json = serde_json::to_vec(self).expect("grid points serialize");
        hex::encode(&Sha256::digest(json)[..12])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentGrid {
    pub points: Vec<GridPoint>,
}

impl ExperimentGrid {
    /// All combinations of the axes, with inapplicable axes collapsed and
    /// duplicates removed (first occurrence kept).
    pub fn expand(spec: &GridSpec) -> Result<Self> {
        let nonempty = |len: usize, name: &str| {
            if len == 0 {
                Err(Error::Config(format!("grid axis {name} is empty")))
            } else {
                Ok(())
            }
        };
        nonempty(spec.schemes.len(), "schemes")?;
        nonempty(spec.corpora.len(), "corpora")?;
        nonempty(spec.seeds.len(), "seeds")?;
        let mut seen = HashSet::new();
        let mut points = Vec::new();
        for &scheme in &spec.schemes {
            let agent = scheme == Scheme::PromptAgent;
            let trained = matches!(scheme, Scheme::PromptAgent | Scheme::FineTune);
            let lengths: Vec<Option<usize>> = opt_axis(agent, &spec.prompt_lengths);
            let modes = opt_axis(agent, &spec.fusion_modes);
            let encoders = opt_axis(agent, &spec.encoders);
            let sizes: Vec<Option<usize>> = if trained { spec.train_sizes.clone() } else { vec![None] };
            let templates: Vec<Option<String>> = match scheme {
                Scheme::ZeroShot => spec.templates.iter().cloned().map(Some).collect(),
                Scheme::FewShot => vec![Some("block".into())],
                _ => vec![None],
            };
            for corpus in &spec.corpora {
                for &seed in &spec.seeds {
                    for &prompt_length in &lengths {
                        for &fusion_mode in &modes {
                            for &encoder in &encoders {
                                for &train_size in &sizes {
                                    for template in &templates {
                                        let p = GridPoint {
                                            scheme,
                                            prompt_length,
                                            fusion_mode,
                                            encoder,
                                            train_size,
                                            template: template.clone(),
                                            corpus: corpus.clone(),
                                            seed,
                                        };
                                        if seen.insert(p.clone()) {
                                            points.push(p);
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        if points.is_empty() {
            return Err(Error::Config("grid expands to no runs".into()));
        }
        Ok(ExperimentGrid { points })
    }
}

fn opt_axis<T: Copy>(applies: bool, values: &[T]) -> Vec<Option<T>> {
    if applies && !values.is_empty() {
        values.iter().copied().map(Some).collect()
    } else {
        vec![None]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub key: String,
    pub point: GridPoint,
    pub metrics: MetricReport,
    pub train_report: Option<TrainReport>,
    pub train_examples: usize,
    pub training_seconds: f64,
    pub inference_seconds: f64,
}

impl RunRecord {
    pub fn mean_epoch_seconds(&self) -> Option<f64> {
        let r = self.train_report.as_ref()?;
        (!r.epoch_seconds.is_empty()).then(|| r.epoch_seconds.iter().sum::<f64>() / r.epoch_seconds.len() as f64)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunFailure {
    pub key: String,
    pub point: GridPoint,
    pub error: String,
}

#[derive(Clone, Debug, Default)]
pub struct GridOutcome {
    pub records: Vec<RunRecord>,
    pub failures: Vec<RunFailure>,
    /// Records loaded from the results directory instead of being rerun.
    pub reused: usize,
}

/// Shared inputs of every run in a grid.
pub struct GridResources<'a> {
    /// Frozen base model shared by all runs.
    pub lm: &'a LanguageModel<f32>,
    pub vocab: &'a Vocabulary,
    pub corpora: BTreeMap<String, Splits>,
    pub train: TrainConfig,
    pub decode: DecodeOptions,
    pub few_shot_k: usize,
    /// Caps on validation examples decoded per epoch and on test examples.
    pub valid_limit: Option<usize>,
    pub test_limit: Option<usize>,
    pub results_dir: Option<PathBuf>,
    pub workers: usize,
    pub embedder: &'a dyn SentenceEmbedder,
}

fn limit<T>(xs: &[T], n: Option<usize>) -> &[T] {
    &xs[..n.map_or(xs.len(), |n| n.min(xs.len()))]
}

/// Trains (if the scheme needs it) and evaluates one grid point.
pub fn run_point(point: &GridPoint, res: &GridResources<'_>) -> Result<RunRecord> {
    let splits = res
        .corpora
        .get(&point.corpus)
        .ok_or_else(|| Error::Config(format!("unknown corpus {:?}", point.corpus)))?;
    let train_pairs = limit(&splits.train, point.train_size);
    let valid = limit(&splits.valid, res.valid_limit);
    let test = limit(&splits.test, res.test_limit);
    if test.is_empty() {
        return Err(Error::Dataset(format!("corpus {:?} has an empty test split", point.corpus)));
    }
    let max_positions = res.lm.config().max_positions;
    let mut cfg = res.train.clone();
    cfg.seed = point.seed;
    cfg.checkpoint_dir = None;
    let mut train_report = None;
    let mut train_examples = 0;
    let start = Instant::now();
    let mut agent_holder = None;
    let mut tuned_holder = None;
    let resources = match point.scheme {
        Scheme::ZeroShot | Scheme::FewShot => {
            let template = PromptTemplate::by_id(point.template.as_deref().unwrap_or("pi1"))?;
            let examples = if point.scheme == Scheme::FewShot {
                select_few_shot(&splits.train, res.few_shot_k, point.seed)?
            } else {
                Vec::new()
            };
            SchemeResources::Discrete {
                lm: res.lm,
                template,
                examples,
            }
        }
        Scheme::PromptAgent => {
            let n = point.prompt_length.unwrap_or(100);
            let mut agent = PromptAgent::new(AgentConfig {
                prompt_length: n,
                d_model: res.lm.d_model(),
                fusion: point.fusion_mode.unwrap_or(FusionMode::Back),
                encoder: point.encoder.unwrap_or(EncoderVariant::Bilstm),
                seed: point.seed,
                ..AgentConfig::new(res.lm.d_model())
            })?;
            let budget = code_budget(max_positions, n, cfg.summary_max_len, cfg.code_max_len);
            let examples = prepare_examples(train_pairs, res.vocab, budget, cfg.summary_max_len);
            train_examples = examples.len();
            cfg.regime = Regime::PromptAgent;
            let mut validator = BleuValidator {
                pairs: valid,
                vocab: res.vocab,
                options: res.decode.clone(),
            };
            let mut target = TrainTarget::PromptAgent { lm: res.lm, agent: &mut agent };
            train_report = Some(train(&mut target, &examples, &cfg, &mut validator, None)?);
            agent_holder = Some(agent);
            SchemeResources::PromptAgent {
                lm: res.lm,
                agent: agent_holder.as_ref().expect("just set"),
            }
        }
        Scheme::FineTune => {
            let mut lm = res.lm.clone();
            lm.unfreeze();
            let budget = code_budget(max_positions, 1, cfg.summary_max_len, cfg.code_max_len);
            let examples = prepare_examples(train_pairs, res.vocab, budget, cfg.summary_max_len);
            train_examples = examples.len();
            cfg.regime = Regime::FineTune;
            let mut validator = BleuValidator {
                pairs: valid,
                vocab: res.vocab,
                options: res.decode.clone(),
            };
            let mut target = TrainTarget::FineTune { lm: &mut lm };
            train_report = Some(train(&mut target, &examples, &cfg, &mut validator, None)?);
            tuned_holder = Some(lm);
            SchemeResources::FineTuned {
                lm: tuned_holder.as_ref().expect("just set"),
            }
        }
    };
    let training_seconds = start.elapsed().as_secs_f64();
    let start = Instant::now();
    let codes: Vec<&str> = test.iter().map(|p| p.code.as_str()).collect();
    let preds: Vec<String> = summarize_batch(&codes, &resources, res.vocab, &res.decode)?
        .into_iter()
        .collect::<Result<_>>()?;
    let inference_seconds = start.elapsed().as_secs_f64();
    let refs: Vec<&str> = test.iter().map(|p| p.summary.as_str()).collect();
    let metrics = MetricReport::compute(&preds, &refs, res.embedder)?;
    drop(resources);
    drop(agent_holder);
    drop(tuned_holder);
    Ok(RunRecord {
        key: point.key(),
        point: point.clone(),
        metrics,
        train_report,
        train_examples,
        training_seconds,
        inference_seconds,
    })
}

fn record_path(dir: &Path, key: &str) -> PathBuf {
    dir.join(format!("{key}.json"))
}

fn load_record(dir: &Path, point: &GridPoint) -> Option<RunRecord> {
    let text = fs::read_to_string(record_path(dir, &point.key())).ok()?;
    let record: RunRecord = serde_json::from_str(&text).ok()?;
    (record.point == *point).then_some(record)
}

/// Runs every point not already recorded in `results_dir`. A failing point
/// is recorded as a failure and the rest of the grid continues.
pub fn run_grid(grid: &ExperimentGrid, res: &GridResources<'_>) -> Result<GridOutcome> {
    if !res.lm.is_frozen() {
        return Err(Error::Config("grid runs share a frozen language model".into()));
    }
    if let Some(dir) = &res.results_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let run_one = |point: &GridPoint| -> (Option<RunRecord>, Option<RunFailure>, bool) {
        if let Some(dir) = &res.results_dir {
            if let Some(r) = load_record(dir, point) {
                return (Some(r), None, true);
            }
        }
        log::info!("running grid point {}", point.key());
        match run_point(point, res) {
            Ok(record) => {
                if let Some(dir) = &res.results_dir {
                    let path = record_path(dir, &record.key);
                    let text = serde_json::to_string_pretty(&record).expect("records serialize");
                    if let Err(e) = fs::write(&path, text) {
                        log::warn!("could not persist {}: {e}", path.display());
                    }
                }
                (Some(record), None, false)
            }
            Err(e) => {
                log::warn!("grid point {} failed: {e}", point.key());
                (
                    None,
                    Some(RunFailure {
                        key: point.key(),
                        point: point.clone(),
                        error: e.to_string(),
                    }),
                    false,
                )
            }
        }
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(res.workers.max(1))
        .build()
        .map_err(|e| Error::Config(format!("worker pool: {e}")))?;
    let results: Vec<_> = pool.install(|| grid.points.par_iter().map(run_one).collect());
    let mut outcome = GridOutcome::default();
    for (record, failure, reused) in results {
        outcome.records.extend(record);
        outcome.failures.extend(failure);
        outcome.reused += usize::from(reused);
    }
    Ok(outcome)
}

/// Rendered tables and plots.
#[derive(Clone, Debug, Default)]
pub struct Report {
    /// One row per run.
    pub runs_table: String,
    /// Prompt length by fusion mode.
    pub fusion_table: String,
    pub encoder_table: String,
    pub size_table: String,
    pub runs_csv: String,
    /// Metric name to (training examples, value) points.
    pub size_series: BTreeMap<String, Vec<(usize, f64)>>,
    /// (prompt length, mean per-epoch seconds) points.
    pub epoch_time_series: Vec<(usize, f64)>,
    pub plots: Vec<(String, String)>,
    pub annotations: Vec<String>,
}

const METRICS: [&str; 4] = ["BLEU", "METEOR", "ROUGE-L", "SemSim"];

fn metric_values(m: &MetricReport) -> [f64; 4] {
    [m.bleu, m.meteor, m.rouge_l, m.semantic_sim]
}

fn mean_metrics<'r>(records: impl Iterator<Item = &'r RunRecord>) -> [f64; 4] {
    let mut sum = [0.0; 4];
    let mut n = 0;
    for r in records {
        for (s, v) in sum.iter_mut().zip(metric_values(&r.metrics)) {
            *s += v;
        }
        n += 1;
    }
    sum.map(|s| if n == 0 { f64::NAN } else { s / n as f64 })
}

fn opt<T: ToString>(v: &Option<T>) -> String {
    v.as_ref().map_or("-".into(), T::to_string)
}

fn agent_records(records: &[RunRecord]) -> impl Iterator<Item = &RunRecord> {
    records.iter().filter(|r| r.point.scheme == Scheme::PromptAgent)
}

/// Builds every table and plot; writes them to `out_dir` if given.
pub fn emit_report(records: &[RunRecord], failures: &[RunFailure], out_dir: Option<&Path>) -> Result<Report> {
    if records.is_empty() {
        return Err(Error::Argument("no records to report".into()));
    }
    let mut report = Report::default();

    let mut t = String::from(
        "| scheme | corpus | template | n | mode | encoder | train size | seed | BLEU | METEOR | ROUGE-L | SemSim | train s | infer s |\n",
    );
    t.push_str("|---|---|---|---|---|---|---|---|---|---|---|---|---|---|\n");
    let mut csv = String::from(
        "key,scheme,corpus,template,prompt_length,fusion_mode,encoder,train_size,seed,bleu,meteor,rouge_l,semantic_sim,training_seconds,inference_seconds,mean_epoch_seconds\n",
    );
    for r in records {
        let p = &r.point;
        let m = metric_values(&r.metrics);
        writeln!(
            t,
            "| {} | {} | {} | {} | {} | {} | {} | {} | {:.2} | {:.2} | {:.2} | {:.2} | {:.2} | {:.2} |",
            p.scheme,
            p.corpus,
            opt(&p.template),
            opt(&p.prompt_length),
            opt(&p.fusion_mode),
            opt(&p.encoder),
            p.train_size.map_or("full".into(), |s| s.to_string()),
            p.seed,
            m[0],
            m[1],
            m[2],
            m[3],
            r.training_seconds,
            r.inference_seconds
        )
        .unwrap();
        writeln!(
            csv,
            "{},{},{},{},{},{},{},{},{},{:.4},{:.4},{:.4},{:.4},{:.4},{:.4},{}",
            r.key,
            p.scheme,
            crate::metrics::csv_field(&p.corpus),
            opt(&p.template),
            opt(&p.prompt_length),
            opt(&p.fusion_mode),
            opt(&p.encoder),
            p.train_size.map_or("full".into(), |s| s.to_string()),
            p.seed,
            m[0],
            m[1],
            m[2],
            m[3],
            r.training_seconds,
            r.inference_seconds,
            r.mean_epoch_seconds().map_or(String::new(), |s| format!("{s:.4}"))
        )
        .unwrap();
    }
    for f in failures {
        writeln!(t, "| {} | {} | failed: {} |", f.point.scheme, f.point.corpus, f.error.replace('|', "/")).unwrap();
    }
    report.runs_table = t;
    report.runs_csv = csv;

    // Prompt length x fusion mode, averaged over seeds.
    let lengths: Vec<usize> = agent_records(records)
        .filter_map(|r| r.point.prompt_length)
        .collect::<std::collections::BTreeSet<_>>()
        .into_iter()
        .collect();
    let modes: Vec<FusionMode> = FusionMode::ALL
        .into_iter()
        .filter(|m| agent_records(records).any(|r| r.point.fusion_mode == Some(*m)))
        .collect();
    if !lengths.is_empty() && !modes.is_empty() {
        let mut t = String::from("| n |");
        let mut rule = String::from("|---|");
        for m in &modes {
            for name in &METRICS[..3] {
                write!(t, " {m} {name} |").unwrap();
                rule.push_str("---|");
            }
        }
        t.push('\n');
        t.push_str(&rule);
        t.push('\n');
        for &n in &lengths {
            write!(t, "| {n} |").unwrap();
            for &m in &modes {
                let vals = mean_metrics(
                    agent_records(records).filter(|r| r.point.prompt_length == Some(n) && r.point.fusion_mode == Some(m)),
                );
                for v in &vals[..3] {
                    if v.is_nan() {
                        t.push_str(" - |");
                    } else {
                        write!(t, " {v:.2} |").unwrap();
                    }
                }
            }
            t.push('\n');
        }
        report.fusion_table = t;
    }

    let encoders: Vec<EncoderVariant> = [EncoderVariant::Bilstm, EncoderVariant::Transformer]
        .into_iter()
        .filter(|e| agent_records(records).any(|r| r.point.encoder == Some(*e)))
        .collect();
    if !encoders.is_empty() {
        let mut t = String::from("| encoder | BLEU | METEOR | ROUGE-L | SemSim | mean epoch s |\n|---|---|---|---|---|---|\n");
        for e in encoders {
            let rs: Vec<&RunRecord> = agent_records(records).filter(|r| r.point.encoder == Some(e)).collect();
            let v = mean_metrics(rs.iter().copied());
            let secs: Vec<f64> = rs.iter().filter_map(|r| r.mean_epoch_seconds()).collect();
            let mean_secs = secs.iter().sum::<f64>() / secs.len().max(1) as f64;
            writeln!(t, "| {e} | {:.2} | {:.2} | {:.2} | {:.2} | {mean_secs:.3} |", v[0], v[1], v[2], v[3]).unwrap();
        }
        report.encoder_table = t;
    }

    let mut by_size: BTreeMap<usize, Vec<&RunRecord>> = BTreeMap::new();
    for r in agent_records(records) {
        by_size.entry(r.train_examples).or_default().push(r);
    }
    if !by_size.is_empty() {
        let mut t = String::from("| train examples | BLEU | METEOR | ROUGE-L | SemSim |\n|---|---|---|---|---|\n");
        for (size, rs) in &by_size {
            let v = mean_metrics(rs.iter().copied());
            writeln!(t, "| {size} | {:.2} | {:.2} | {:.2} | {:.2} |", v[0], v[1], v[2], v[3]).unwrap();
            for (name, value) in METRICS.iter().zip(v) {
                report.size_series.entry(name.to_string()).or_default().push((*size, value));
            }
        }
        report.size_table = t;
        report
            .plots
            .push(("metrics_vs_train_size.svg".into(), line_plot("Metrics vs. training set size", "training examples", &report.size_series)));
    }

    let mut by_len: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for r in agent_records(records) {
        if let (Some(n), Some(s)) = (r.point.prompt_length, r.mean_epoch_seconds()) {
            by_len.entry(n).or_default().push(s);
        }
    }
    report.epoch_time_series = by_len
        .into_iter()
        .map(|(n, s)| (n, s.iter().sum::<f64>() / s.len() as f64))
        .collect();
    if !report.epoch_time_series.is_empty() {
        report.annotations.extend(monotonicity_violations(&report.epoch_time_series));
        report.plots.push((
            "epoch_time_vs_prompt_length.svg".into(),
            bar_plot("Per-epoch training time vs. prompt length", &report.epoch_time_series, &report.annotations),
        ));
    }

    if let Some(dir) = out_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut files = vec![
            ("runs.md".to_string(), report.runs_table.clone()),
            ("runs.csv".to_string(), report.runs_csv.clone()),
        ];
        for (name, body) in [
            ("fusion.md", &report.fusion_table),
            ("encoders.md", &report.encoder_table),
            ("train_size.md", &report.size_table),
        ] {
            if !body.is_empty() {
                files.push((name.to_string(), body.clone()));
            }
        }
        files.extend(report.plots.iter().cloned());
        if !report.annotations.is_empty() {
            files.push(("annotations.txt".into(), report.annotations.join("\n") + "\n"));
        }
        for (name, body) in files {
            let path = dir.join(name);
            fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
        }
    }
    Ok(report)
}

/// One note per adjacent pair where time drops as prompt length grows.
pub fn monotonicity_violations(series: &[(usize, f64)]) -> Vec<String> {
    series
        .windows(2)
        .filter(|w| w[1].1 < w[0].1)
        .map(|w| {
            format!(
                "per-epoch training time is not monotone in prompt length: n={} took {:.3}s, less than {:.3}s at n={}",
                w[1].0, w[1].1, w[0].1, w[0].0
            )
        })
        .collect()
}

const W: f64 = 640.0;
const H: f64 = 400.0;
const PAD_L: f64 = 70.0;
const PAD_R: f64 = 140.0;
const PAD_T: f64 = 40.0;
const PAD_B: f64 = 60.0;
const COLORS: [&str; 4] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd"];

fn svg_open(title: &str) -> String {
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" font-family=\"sans-serif\" font-size=\"12\">\n\
         <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n\
         <text x=\"{}\" y=\"24\" text-anchor=\"middle\" font-size=\"15\">{}</text>\n",
        W / 2.0,
        xml_escape(title)
    )
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn axes(svg: &mut String, x_label: &str, y_label: &str, y_max: f64) {
    let (x0, y0, x1, y1) = (PAD_L, H - PAD_B, W - PAD_R, PAD_T);
    writeln!(svg, "<line x1=\"{x0}\" y1=\"{y0}\" x2=\"{x1}\" y2=\"{y0}\" stroke=\"black\"/>").unwrap();
    writeln!(svg, "<line x1=\"{x0}\" y1=\"{y0}\" x2=\"{x0}\" y2=\"{y1}\" stroke=\"black\"/>").unwrap();
    for k in 0..=4 {
        let v = y_max * k as f64 / 4.0;
        let y = y0 - (y0 - y1) * k as f64 / 4.0;
        writeln!(svg, "<text x=\"{}\" y=\"{}\" text-anchor=\"end\">{v:.2}</text>", x0 - 6.0, y + 4.0).unwrap();
    }
    writeln!(svg, "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{}</text>", (x0 + x1) / 2.0, H - 15.0, xml_escape(x_label)).unwrap();
    writeln!(
        svg,
        "<text x=\"18\" y=\"{}\" text-anchor=\"middle\" transform=\"rotate(-90 18 {})\">{}</text>",
        (y0 + y1) / 2.0,
        (y0 + y1) / 2.0,
        xml_escape(y_label)
    )
    .unwrap();
}

/// Line plot with one polyline per series over shared x categories.
pub fn line_plot(title: &str, x_label: &str, series: &BTreeMap<String, Vec<(usize, f64)>>) -> String {
    let xs: Vec<usize> = series
        .values()
        .flatten()
        .map(|p| p.0)
        .collect::<std::collections::BTreeSet<_>>()
        .into_iter()
        .collect();
    let y_max = series.values().flatten().map(|p| p.1).fold(1.0f64, f64::max).max(100.0);
    let mut svg = svg_open(title);
    axes(&mut svg, x_label, "score", y_max);
    let span = (W - PAD_L - PAD_R) / (xs.len().max(2) - 1) as f64;
    let px = |x: usize| PAD_L + span * xs.iter().position(|&v| v == x).unwrap_or(0) as f64;
    let py = |y: f64| (H - PAD_B) - (H - PAD_B - PAD_T) * (y / y_max);
    for &x in &xs {
        writeln!(svg, "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{x}</text>", px(x), H - PAD_B + 16.0).unwrap();
    }
    for (i, (name, pts)) in series.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let points: Vec<String> = pts.iter().map(|&(x, y)| format!("{:.1},{:.1}", px(x), py(y))).collect();
        writeln!(svg, "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"2\" points=\"{}\"/>", points.join(" ")).unwrap();
        for &(x, y) in pts {
            writeln!(svg, "<circle cx=\"{:.1}\" cy=\"{:.1}\" r=\"3\" fill=\"{color}\"/>", px(x), py(y)).unwrap();
        }
        let ly = PAD_T + 18.0 * i as f64;
        writeln!(svg, "<rect x=\"{}\" y=\"{}\" width=\"12\" height=\"12\" fill=\"{color}\"/>", W - PAD_R + 12.0, ly).unwrap();
        writeln!(svg, "<text x=\"{}\" y=\"{}\">{}</text>", W - PAD_R + 30.0, ly + 10.0, xml_escape(name)).unwrap();
    }
    svg.push_str("</svg>\n");
    svg
}

/// Bar plot of seconds per prompt length, with annotations printed below
/// the title.
pub fn bar_plot(title: &str, bars: &[(usize, f64)], annotations: &[String]) -> String {
    let y_max = bars.iter().map(|b| b.1).fold(0.0f64, f64::max).max(1e-9) * 1.1;
    let mut svg = svg_open(title);
    axes(&mut svg, "prompt length", "seconds per epoch", y_max);
    let slot = (W - PAD_L - PAD_R) / bars.len().max(1) as f64;
    for (i, &(n, s)) in bars.iter().enumerate() {
        let h = (H - PAD_B - PAD_T) * s / y_max;
        let x = PAD_L + slot * i as f64 + slot * 0.15;
        writeln!(
            svg,
            "<rect x=\"{x:.1}\" y=\"{:.1}\" width=\"{:.1}\" height=\"{h:.1}\" fill=\"{}\"/>",
            H - PAD_B - h,
            slot * 0.7,
            COLORS[0]
        )
        .unwrap();
        writeln!(svg, "<text x=\"{:.1}\" y=\"{}\" text-anchor=\"middle\">{n}</text>", x + slot * 0.35, H - PAD_B + 16.0).unwrap();
    }
    for (i, a) in annotations.iter().enumerate() {
        writeln!(
            svg,
            "<text x=\"{}\" y=\"{}\" fill=\"#d62728\" font-size=\"10\" class=\"annotation\">{}</text>",
            PAD_L + 4.0,
            PAD_T + 4.0 + 12.0 * i as f64,
            xml_escape(a)
        )
        .unwrap();
    }
    svg.push_str("</svg>\n");
    svg
}
