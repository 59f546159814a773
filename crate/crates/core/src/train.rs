//! Teacher-forced training of either the prompt agent (language model
//! frozen) or the whole language model, with AdamW, a linear learning-rate
//! decay, global-norm clipping and early stopping on validation BLEU.

use std::path::PathBuf;
use std::time::Instant;

use ndarray::{Array2, ArrayView2};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::agent::{fuse_tape, PromptAgent};
use crate::corpus::{CodeSummaryPair, Vocabulary, EOS, SEP};
use crate::error::{Error, Result};
use crate::generate::{self, DecodeOptions};
use crate::lm::LanguageModel;
use crate::metrics;
use crate::params::{Bound, ParamStore};
use crate::tensor::{Real, Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Regime {
    PromptAgent,
    FineTune,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub patience: usize,
    pub max_epochs: usize,
    pub seed: u64,
    pub regime: Regime,
    pub weight_decay: f64,
    pub grad_clip: f64,
    pub code_max_len: usize,
    pub summary_max_len: usize,
    /// Where the best checkpoint is written, if anywhere.
    pub checkpoint_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 16,
            learning_rate: 5e-5,
            patience: 4,
            max_epochs: 30,
            seed: 0,
            regime: Regime::PromptAgent,
            weight_decay: 0.01,
            grad_clip: 1.0,
            code_max_len: crate::corpus::DEFAULT_CODE_MAX_LEN,
            summary_max_len: crate::corpus::DEFAULT_SUMMARY_MAX_LEN,
            checkpoint_dir: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patience == 0 {
            return Err(Error::Config("patience must be at least 1".into()));
        }
        if self.learning_rate.is_nan() || self.learning_rate <= 0.0 {
            return Err(Error::Config(format!("learning rate {} must be positive", self.learning_rate)));
        }
        if self.batch_size == 0 || self.max_epochs == 0 {
            return Err(Error::Config("batch size and epoch count must be positive".into()));
        }
        Ok(())
    }
}

/// A tokenized training example. `code` has been truncated to fit the
/// context budget; `summary` excludes EOS.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Example {
    pub code: Vec<u32>,
    pub summary: Vec<u32>,
}

impl Example {
    /// Teacher-forcing targets: the summary followed by EOS.
    pub fn targets(&self) -> Vec<Option<usize>> {
        self.summary
            .iter()
            .chain(std::iter::once(&EOS))
            .map(|&t| Some(t as usize))
            .collect()
    }
}

/// Tokenizes pairs, truncating code to `code_budget` and summaries to
/// `summary_max_len`. Pairs whose code tokenizes to nothing are skipped.
pub fn prepare_examples(
    pairs: &[CodeSummaryPair],
    vocab: &Vocabulary,
    code_budget: usize,
    summary_max_len: usize,
) -> Vec<Example> {
    pairs
        .iter()
        .filter_map(|p| {
            let mut code = vocab.encode(&p.code);
            code.truncate(code_budget);
            let mut summary = vocab.encode(&p.summary);
            summary.truncate(summary_max_len);
            (!code.is_empty()).then_some(Example { code, summary })
        })
        .collect()
}

/// Largest code length that leaves room for the prompt, the summary and EOS.
pub fn code_budget(max_positions: usize, prompt_len: usize, summary_max_len: usize, code_max_len: usize) -> usize {
    max_positions
        .saturating_sub(prompt_len + summary_max_len + 1)
        .min(code_max_len)
}

/// Position of the first summary token after `code_len` code tokens. The
/// slot at `code_len` belongs to the separator, as during pretraining.
pub fn summary_start(code_len: usize) -> usize {
    code_len + 1
}

/// Positional encoding shared by every prompt row: the separator slot, so
/// the prompt stands where the separator stood during pretraining.
pub fn prompt_position(code_len: usize) -> usize {
    code_len
}

/// Mean negative log-likelihood over positions where `mask` is true.
pub fn cross_entropy_loss<T: Real>(logits: ArrayView2<T>, targets: &[u32], mask: &[bool]) -> Result<f64> {
    if logits.nrows() != targets.len() || targets.len() != mask.len() {
        return Err(Error::Argument(format!(
            "{} logits rows, {} targets, {} mask entries",
            logits.nrows(),
            targets.len(),
            mask.len()
        )));
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for ((row, &t), &keep) in logits.outer_iter().zip(targets).zip(mask) {
        if !keep {
            continue;
        }
        if t as usize >= row.len() {
            return Err(Error::Argument(format!("target {t} out of range for {} classes", row.len())));
        }
        let max = row.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x.as_f64()));
        let z: f64 = row.iter().map(|&x| (x.as_f64() - max).exp()).sum();
        total += -(row[t as usize].as_f64() - max - z.ln());
        count += 1;
    }
    if count == 0 {
        return Err(Error::UndefinedLoss("every target position is padding".into()));
    }
    Ok(total / count as f64)
}

/// Summed loss of one prompt-agent example on the tape, given e^P.
fn agent_example_loss<T: Real>(
    tape: &mut Tape<'_, T>,
    lm: &LanguageModel<T>,
    lp: &Bound,
    agent: &PromptAgent<T>,
    prompt: Var,
    ex: &Example,
) -> Result<(Var, usize)> {
    let ec = lm.embed_tape(tape, lp, &ex.code, 0)?;
    let placed = lm.place_tape(tape, lp, prompt, prompt_position(ex.code.len()))?;
    let (fused, _) = fuse_tape(tape, placed, ec, agent.fusion());
    let x = if ex.summary.is_empty() {
        fused
    } else {
        let es = lm.embed_tape(tape, lp, &ex.summary, summary_start(ex.code.len()))?;
        tape.concat_rows(&[fused, es])
    };
    summary_loss(tape, lm, lp, x, ex)
}

/// Summed loss of one fine-tuning example: code SEP summary.
fn fine_tune_example_loss<T: Real>(
    tape: &mut Tape<'_, T>,
    lm: &LanguageModel<T>,
    lp: &Bound,
    ex: &Example,
) -> Result<(Var, usize)> {
    let mut ids = Vec::with_capacity(ex.code.len() + ex.summary.len() + 1);
    ids.extend_from_slice(&ex.code);
    ids.push(SEP);
    ids.extend_from_slice(&ex.summary);
    let x = lm.embed_tape(tape, lp, &ids, 0)?;
    summary_loss(tape, lm, lp, x, ex)
}

/// Loss over the last `|summary| + 1` rows: the final context row predicts
/// the first summary token and the last summary token predicts EOS.
fn summary_loss<T: Real>(
    tape: &mut Tape<'_, T>,
    lm: &LanguageModel<T>,
    lp: &Bound,
    x: Var,
    ex: &Example,
) -> Result<(Var, usize)> {
    let h = lm.hidden_tape::<ChaCha8Rng>(tape, lp, x, &mut None)?;
    let rows = tape.value(h).nrows();
    let m = ex.summary.len() + 1;
    let tail = tape.slice_rows(h, rows - m, m);
    let logits = lm.logits_tape(tape, lp, tail);
    Ok((tape.cross_entropy_sum(logits, &ex.targets()), m))
}

/// Mean summary-token loss of a batch and the gradient of every agent
/// parameter, in store order.
pub fn agent_loss_and_gradients<T: Real>(
    lm: &LanguageModel<T>,
    agent: &PromptAgent<T>,
    batch: &[&Example],
) -> Result<(T, Vec<Option<Array2<T>>>)> {
    if !lm.is_frozen() {
        return Err(Error::Config("prompt-agent training requires a frozen language model".into()));
    }
    agent.check_compatible(lm)?;
    let mut tape = Tape::new();
    let lp = lm.bind(&mut tape);
    let ap = agent.bind(&mut tape);
    let prompt = agent.encode_tape(&mut tape, &ap);
    let mut parts = Vec::with_capacity(batch.len());
    let mut count = 0;
    for ex in batch {
        let (l, m) = agent_example_loss(&mut tape, lm, &lp, agent, prompt, ex)?;
        parts.push(l);
        count += m;
    }
    let total = tape.sum(&parts);
    let loss = tape.scale(total, T::lit(1.0 / count as f64));
    let value = tape.scalar(loss);
    let mut grads = tape.backward(loss);
    Ok((value, ap.vars().iter().map(|&v| grads.take(v)).collect()))
}

/// Mean summary-token loss of a batch and the gradient of every language
/// model parameter.
pub fn fine_tune_loss_and_gradients<T: Real>(
    lm: &LanguageModel<T>,
    batch: &[&Example],
) -> Result<(T, Vec<Option<Array2<T>>>)> {
    if lm.is_frozen() {
        return Err(Error::Config("fine-tuning requires a trainable language model".into()));
    }
    let mut tape = Tape::new();
    let lp = lm.bind(&mut tape);
    let mut parts = Vec::with_capacity(batch.len());
    let mut count = 0;
    for ex in batch {
        let (l, m) = fine_tune_example_loss(&mut tape, lm, &lp, ex)?;
        parts.push(l);
        count += m;
    }
    let total = tape.sum(&parts);
    let loss = tape.scale(total, T::lit(1.0 / count as f64));
    let value = tape.scalar(loss);
    let mut grads = tape.backward(loss);
    Ok((value, lp.vars().iter().map(|&v| grads.take(v)).collect()))
}

/// Adam with decoupled weight decay.
#[derive(Clone, Debug)]
pub struct AdamW<T> {
    m: Vec<Array2<T>>,
    v: Vec<Array2<T>>,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    t: usize,
}

impl<T: Real> AdamW<T> {
    pub fn new(store: &ParamStore<T>, weight_decay: f64) -> Self {
        AdamW {
            m: store.values().iter().map(|v| Array2::zeros(v.dim())).collect(),
            v: store.values().iter().map(|v| Array2::zeros(v.dim())).collect(),
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            t: 0,
        }
    }

    pub fn steps(&self) -> usize {
        self.t
    }

    /// One update at learning rate `lr`. Parameters without a gradient are
    /// left alone.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &[Option<Array2<T>>], lr: f64) {
        self.t += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let bc1 = 1.0 - b1.powi(self.t as i32);
        let bc2 = 1.0 - b2.powi(self.t as i32);
        let decay = T::lit(1.0 - lr * self.weight_decay);
        let step = T::lit(lr / bc1);
        let (b1t, b2t, eps, bc2t) = (T::lit(b1), T::lit(b2), T::lit(self.eps), T::lit(bc2));
        for (i, param) in store.values_mut().iter_mut().enumerate() {
            let Some(g) = &grads[i] else { continue };
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            ndarray::Zip::from(param)
                .and(m)
                .and(v)
                .and(g)
                .for_each(|p, m, v, &g| {
                    *m = b1t * *m + (T::one() - b1t) * g;
                    *v = b2t * *v + (T::one() - b2t) * g * g;
                    *p = *p * decay - step * *m / ((*v / bc2t).sqrt() + eps);
                });
        }
    }
}

/// Linear decay from `initial` to 0 over `total_steps`.
#[derive(Clone, Copy, Debug)]
pub struct LinearSchedule {
    pub initial: f64,
    pub total_steps: usize,
}

impl LinearSchedule {
    pub fn new(initial: f64, total_steps: usize) -> Self {
        LinearSchedule { initial, total_steps }
    }

    pub fn lr(&self, step: usize) -> f64 {
        if self.total_steps == 0 {
            return 0.0;
        }
        self.initial * (1.0 - step as f64 / self.total_steps as f64).max(0.0)
    }
}

/// Rescales gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm<T: Real>(grads: &mut [Option<Array2<T>>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flatten()
        .map(|g| g.iter().map(|&x| x.as_f64() * x.as_f64()).sum::<f64>())
        .sum::<f64>()
        .sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = T::lit(max_norm / norm);
        for g in grads.iter_mut().flatten() {
            g.mapv_inplace(|x| x * s);
        }
    }
    norm
}

/// What a training run updates.
pub enum TrainTarget<'a> {
    PromptAgent {
        lm: &'a LanguageModel<f32>,
        agent: &'a mut PromptAgent<f32>,
    },
    FineTune {
        lm: &'a mut LanguageModel<f32>,
    },
}

impl TrainTarget<'_> {
    pub fn regime(&self) -> Regime {
        match self {
            TrainTarget::PromptAgent { .. } => Regime::PromptAgent,
            TrainTarget::FineTune { .. } => Regime::FineTune,
        }
    }

    fn trainable(&self) -> &ParamStore<f32> {
        match self {
            TrainTarget::PromptAgent { agent, .. } => agent.store(),
            TrainTarget::FineTune { lm } => lm.store(),
        }
    }

    fn trainable_mut(&mut self) -> &mut ParamStore<f32> {
        match self {
            TrainTarget::PromptAgent { agent, .. } => agent.store_mut(),
            TrainTarget::FineTune { lm } => lm.store_mut(),
        }
    }

    fn lm(&self) -> &LanguageModel<f32> {
        match self {
            TrainTarget::PromptAgent { lm, .. } => lm,
            TrainTarget::FineTune { lm } => lm,
        }
    }

    fn check(&self, cfg: &TrainConfig) -> Result<()> {
        if cfg.regime != self.regime() {
            return Err(Error::Config(format!(
                "config regime {:?} does not match the supplied components ({:?})",
                cfg.regime,
                self.regime()
            )));
        }
        match self {
            TrainTarget::PromptAgent { lm, agent } => {
                if !lm.is_frozen() {
                    return Err(Error::Config("prompt-agent training requires a frozen language model".into()));
                }
                agent.check_compatible(lm)
            }
            TrainTarget::FineTune { lm } => {
                if lm.is_frozen() {
                    return Err(Error::Config("fine-tuning requires a trainable language model".into()));
                }
                Ok(())
            }
        }
    }

    fn loss_and_gradients(&self, batch: &[&Example]) -> Result<(f32, Vec<Option<Array2<f32>>>)> {
        match self {
            TrainTarget::PromptAgent { lm, agent } => agent_loss_and_gradients(lm, agent, batch),
            TrainTarget::FineTune { lm } => fine_tune_loss_and_gradients(lm, batch),
        }
    }

    fn save_checkpoint(&self, dir: &std::path::Path, vocab: Option<&Vocabulary>) -> Result<PathBuf> {
        match self {
            TrainTarget::PromptAgent { agent, .. } => {
                let path = dir.join("best_agent.ckpt");
                agent.save(&path)?;
                Ok(path)
            }
            TrainTarget::FineTune { lm } => {
                let vocab = vocab.ok_or_else(|| Error::Config("saving a fine-tuned model needs its vocabulary".into()))?;
                let path = dir.join("best_lm.ckpt");
                lm.save(&path, vocab)?;
                Ok(path)
            }
        }
    }
}

/// One optimizer step on `batch`; returns the batch loss.
pub fn train_step(
    target: &mut TrainTarget<'_>,
    optimizer: &mut AdamW<f32>,
    batch: &[&Example],
    lr: f64,
    grad_clip: f64,
) -> Result<f64> {
    let (loss, mut grads) = target.loss_and_gradients(batch)?;
    let loss = loss as f64;
    if !loss.is_finite() {
        return Err(Error::Divergence(format!("batch loss is {loss} after {} steps", optimizer.steps())));
    }
    clip_grad_norm(&mut grads, grad_clip);
    optimizer.step(target.trainable_mut(), &grads, lr);
    Ok(loss)
}

/// Scores the current state of a training target after each epoch.
pub trait Validator {
    fn validate(&mut self, target: &TrainTarget<'_>, epoch: usize) -> Result<f64>;
}

/// Greedy-decodes validation examples and computes corpus BLEU.
pub struct BleuValidator<'v> {
    pub pairs: &'v [CodeSummaryPair],
    pub vocab: &'v Vocabulary,
    pub options: DecodeOptions,
}

impl Validator for BleuValidator<'_> {
    fn validate(&mut self, target: &TrainTarget<'_>, _epoch: usize) -> Result<f64> {
        let codes: Vec<&str> = self.pairs.iter().map(|p| p.code.as_str()).collect();
        let preds = match target {
            TrainTarget::PromptAgent { lm, agent } => {
                let s = generate::PromptAgentSummarizer::new(lm, agent, self.vocab, self.options.clone())?;
                generate::map_codes(&codes, |c| s.summarize(c))
            }
            TrainTarget::FineTune { lm } => {
                generate::map_codes(&codes, |c| generate::summarize_fine_tuned(c, lm, self.vocab, &self.options))
            }
        };
        let refs: Vec<&str> = self.pairs.iter().map(|p| p.summary.as_str()).collect();
        let preds: Vec<String> = preds.into_iter().map(|r| r.unwrap_or_default()).collect();
        metrics::bleu(&preds, &refs)
    }
}

/// Replays a fixed BLEU sequence; for exercising the stopping logic.
pub struct ScriptedValidator {
    pub scores: Vec<f64>,
}

impl Validator for ScriptedValidator {
    fn validate(&mut self, _target: &TrainTarget<'_>, epoch: usize) -> Result<f64> {
        self.scores
            .get(epoch - 1)
            .copied()
            .ok_or_else(|| Error::Argument(format!("no scripted score for epoch {epoch}")))
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub regime: Option<Regime>,
    pub epoch_losses: Vec<f64>,
    pub validation_bleu: Vec<f64>,
    pub epoch_seconds: Vec<f64>,
    /// Checksum of the trainable parameters at the end of each epoch.
    pub epoch_checksums: Vec<String>,
    pub stopping_epoch: usize,
    pub best_epoch: usize,
    pub best_bleu: f64,
    /// Checksum of the parameters left in place when training returns.
    pub final_checksum: String,
    pub best_checkpoint: Option<PathBuf>,
    pub lm_checksum_before: String,
    pub lm_checksum_after: String,
    pub steps: usize,
}

impl TrainReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Trains until `patience` epochs pass without a strictly better validation
/// score or `max_epochs` is reached, then restores the best epoch's weights.
pub fn train(
    target: &mut TrainTarget<'_>,
    examples: &[Example],
    cfg: &TrainConfig,
    validator: &mut dyn Validator,
    vocab: Option<&Vocabulary>,
) -> Result<TrainReport> {
    cfg.validate()?;
    target.check(cfg)?;
    if examples.is_empty() {
        return Err(Error::Dataset("no training examples".into()));
    }
    let steps_per_epoch = examples.len().div_ceil(cfg.batch_size);
    let schedule = LinearSchedule::new(cfg.learning_rate, cfg.max_epochs * steps_per_epoch);
    let mut optimizer = AdamW::new(target.trainable(), cfg.weight_decay);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut report = TrainReport {
        regime: Some(target.regime()),
        lm_checksum_before: target.lm().parameter_checksum(),
        best_bleu: f64::NEG_INFINITY,
        ..Default::default()
    };
    let mut best: Option<ParamStore<f32>> = None;
    let mut since_best = 0;
    for epoch in 1..=cfg.max_epochs {
        let start = Instant::now();
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for idx in order.chunks(cfg.batch_size) {
            let batch: Vec<&Example> = idx.iter().map(|&i| &examples[i]).collect();
            let lr = schedule.lr(optimizer.steps());
            let loss = train_step(target, &mut optimizer, &batch, lr, cfg.grad_clip).map_err(|e| match e {
                Error::Divergence(m) => Error::Divergence(format!(
                    "epoch {epoch}: {m}; losses so far {:?}",
                    report.epoch_losses
                )),
                other => other,
            })?;
            loss_sum += loss * batch.len() as f64;
        }
        let train_seconds = start.elapsed().as_secs_f64();
        let loss = loss_sum / examples.len() as f64;
        let bleu = validator.validate(target, epoch)?;
        log::info!("epoch {epoch}: loss {loss:.4}, validation BLEU {bleu:.2}, {train_seconds:.2}s");
        report.epoch_losses.push(loss);
        report.validation_bleu.push(bleu);
        report.epoch_seconds.push(train_seconds);
        report.epoch_checksums.push(target.trainable().checksum());
        report.stopping_epoch = epoch;
        if bleu > report.best_bleu {
            report.best_bleu = bleu;
            report.best_epoch = epoch;
            best = Some(target.trainable().clone());
            since_best = 0;
            if let Some(dir) = &cfg.checkpoint_dir {
                report.best_checkpoint = Some(target.save_checkpoint(dir, vocab)?);
            }
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                break;
            }
        }
    }
    if let Some(best) = best {
        target.trainable_mut().assign_from(&best);
    }
    report.steps = optimizer.steps();
    report.final_checksum = target.trainable().checksum();
    report.lm_checksum_after = target.lm().parameter_checksum();
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::agent::{AgentConfig, EncoderVariant, FusionMode};
    use crate::lm::LmConfig;

    fn tiny_lm(seed: u64) -> LanguageModel<f32> {
        LanguageModel::new(LmConfig {
            d_model: 8,
            n_layers: 1,
            n_heads: 2,
            d_ff: 16,
            vocab_size: 11,
            max_positions: 32,
            dropout: 0.0,
            seed,
        })
        .unwrap()
    }

    fn tiny_agent(n: usize, encoder: EncoderVariant) -> PromptAgent<f32> {
        PromptAgent::new(AgentConfig {
            prompt_length: n,
            d_model: 8,
            fusion: FusionMode::Back,
            encoder,
            heads: 2,
            layers: 1,
            seed: 1,
        })
        .unwrap()
    }

    fn examples() -> Vec<Example> {
        vec![
            Example { code: vec![4, 5, 6], summary: vec![7, 8] },
            Example { code: vec![9, 4], summary: vec![10] },
            Example { code: vec![5, 5, 5, 6], summary: vec![] },
        ]
    }

    #[test]
    fn cross_entropy_examples() {
        let uniform = Array2::<f64>::zeros((2, 7));
        let l = cross_entropy_loss(uniform.view(), &[3, 5], &[true, true]).unwrap();
        assert!((l - 7f64.ln()).abs() < 1e-12);
        let peaked = Array2::from_shape_vec((1, 3), vec![0.0, 100.0, 0.0]).unwrap();
        assert!(cross_entropy_loss(peaked.view(), &[1], &[true]).unwrap() < 1e-40);
        let hand = Array2::from_shape_vec((1, 3), vec![1.0, 2.0, 3.0]).unwrap();
        let want = -(3f64.exp() / (1f64.exp() + 2f64.exp() + 3f64.exp())).ln();
        let got = cross_entropy_loss(hand.view(), &[2], &[true]).unwrap();
        assert!((got - want).abs() < 1e-12);
        assert!((got - 0.4076).abs() < 1e-4);
        assert!(matches!(
            cross_entropy_loss(hand.view(), &[2], &[false]),
            Err(Error::UndefinedLoss(_))
        ));
    }

    #[test]
    fn masked_targets_do_not_matter() {
        let logits = Array2::from_shape_fn((3, 5), |(i, j)| (i * 5 + j) as f64 * 0.37 % 1.3);
        let a = cross_entropy_loss(logits.view(), &[1, 2, 3], &[true, false, true]).unwrap();
        let b = cross_entropy_loss(logits.view(), &[1, 4, 3], &[true, false, true]).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn adamw_contract() {
        let mut store = ParamStore::<f64>::new();
        store.add("w", Array2::from_elem((1, 1), 2.0));
        let mut opt = AdamW::new(&store, 0.1);
        opt.step(&mut store, &[Some(Array2::from_elem((1, 1), 3.0))], 0.01);
        assert!(store.values()[0][[0, 0]] < 2.0);

        let mut store = ParamStore::<f64>::new();
        store.add("w", Array2::from_elem((1, 1), 2.0));
        let mut opt = AdamW::new(&store, 0.1);
        opt.step(&mut store, &[Some(Array2::zeros((1, 1)))], 0.01);
        let want = 2.0 - 0.01 * 0.1 * 2.0;
        assert!((store.values()[0][[0, 0]] - want).abs() < 1e-15);

        let s = LinearSchedule::new(1e-3, 100);
        assert_eq!(s.lr(0), 1e-3);
        assert_eq!(s.lr(100), 0.0);
        assert!((s.lr(50) - 5e-4).abs() < 1e-15);
    }

    #[test]
    fn clipping_bounds_the_norm() {
        let mut g = vec![Some(Array2::from_elem((1, 2), 3.0f64)), None, Some(Array2::from_elem((1, 1), 4.0))];
        let before = clip_grad_norm(&mut g, 1.0);
        assert!((before - 34f64.sqrt()).abs() < 1e-12);
        let after = clip_grad_norm(&mut g, 1.0);
        assert!((after - 1.0).abs() < 1e-12);
    }

    fn step_once(target: &mut TrainTarget<'_>, lr: f64) -> f64 {
        let ex = examples();
        let batch: Vec<&Example> = ex.iter().collect();
        let mut opt = AdamW::new(target.trainable(), 0.0);
        train_step(target, &mut opt, &batch, lr, 1.0).unwrap()
    }

    #[test]
    fn prompt_agent_step_changes_only_the_agent() {
        let mut lm = tiny_lm(0);
        lm.freeze();
        for encoder in [EncoderVariant::Bilstm, EncoderVariant::Transformer] {
            let mut agent = tiny_agent(3, encoder);
            let (lm_before, agent_before) = (lm.parameter_checksum(), agent.parameter_checksum());
            step_once(&mut TrainTarget::PromptAgent { lm: &lm, agent: &mut agent }, 1e-2);
            assert_eq!(lm.parameter_checksum(), lm_before);
            assert_ne!(agent.parameter_checksum(), agent_before);
        }
    }

    #[test]
    fn fine_tune_step_changes_the_model() {
        let mut lm = tiny_lm(0);
        let before = lm.parameter_checksum();
        step_once(&mut TrainTarget::FineTune { lm: &mut lm }, 1e-2);
        assert_ne!(lm.parameter_checksum(), before);
    }

    #[test]
    fn zero_learning_rate_changes_nothing() {
        let mut lm = tiny_lm(0);
        lm.freeze();
        let mut agent = tiny_agent(2, EncoderVariant::Bilstm);
        let before = agent.parameter_checksum();
        let loss = step_once(&mut TrainTarget::PromptAgent { lm: &lm, agent: &mut agent }, 0.0);
        assert!(loss.is_finite() && loss > 0.0);
        assert_eq!(agent.parameter_checksum(), before);
    }

    #[test]
    fn regime_mismatch_is_a_config_error() {
        let lm = tiny_lm(0);
        let mut agent = tiny_agent(2, EncoderVariant::Bilstm);
        let ex = examples();
        let batch: Vec<&Example> = ex.iter().collect();
        assert!(matches!(agent_loss_and_gradients(&lm, &agent, &batch), Err(Error::Config(_))));
        let mut target = TrainTarget::PromptAgent { lm: &lm, agent: &mut agent };
        let mut v = ScriptedValidator { scores: vec![1.0] };
        let cfg = TrainConfig { max_epochs: 1, ..Default::default() };
        assert!(matches!(train(&mut target, &ex, &cfg, &mut v, None), Err(Error::Config(_))));
        let mut frozen = tiny_lm(0);
        frozen.freeze();
        assert!(matches!(fine_tune_loss_and_gradients(&frozen, &batch), Err(Error::Config(_))));
    }

    fn scripted_run(scores: Vec<f64>, patience: usize, max_epochs: usize) -> TrainReport {
        let mut lm = tiny_lm(0);
        lm.freeze();
        let mut agent = tiny_agent(2, EncoderVariant::Bilstm);
        let cfg = TrainConfig {
            patience,
            max_epochs,
            learning_rate: 1e-2,
            ..Default::default()
        };
        let mut v = ScriptedValidator { scores };
        let mut target = TrainTarget::PromptAgent { lm: &lm, agent: &mut agent };
        let report = train(&mut target, &examples(), &cfg, &mut v, None).unwrap();
        assert_eq!(report.final_checksum, agent.parameter_checksum());
        report
    }

    #[test]
    fn early_stopping_contract_points() {
        let r = scripted_run(vec![10.0, 11.0, 11.0, 11.0, 11.0, 11.0, 12.0], 4, 10);
        assert_eq!((r.stopping_epoch, r.best_epoch, r.best_bleu), (6, 2, 11.0));
        assert_eq!(r.final_checksum, r.epoch_checksums[1]);
        assert_ne!(r.final_checksum, r.epoch_checksums[5]);

        let r = scripted_run(vec![1.0, 2.0, 3.0, 4.0, 5.0], 4, 5);
        assert_eq!((r.stopping_epoch, r.best_epoch), (5, 5));

        let r = scripted_run(vec![5.0, 4.0], 1, 10);
        assert_eq!((r.stopping_epoch, r.best_epoch), (2, 1));
        assert_eq!(r.final_checksum, r.epoch_checksums[0]);
    }

    #[test]
    fn training_is_reproducible() {
        let a = scripted_run(vec![1.0, 2.0, 3.0], 4, 3);
        let b = scripted_run(vec![1.0, 2.0, 3.0], 4, 3);
        assert_eq!(a.epoch_losses, b.epoch_losses);
        assert_eq!(a.final_checksum, b.final_checksum);
        assert_eq!(a.lm_checksum_before, a.lm_checksum_after);
    }

    #[test]
    fn report_serializes() {
        let r = scripted_run(vec![1.0], 1, 1);
        let back: TrainReport = serde_json::from_str(&r.to_json().unwrap()).unwrap();
        assert_eq!(back, r);
    }
}
