//! Decoder-only transformer language model: token + learned positional
//! embeddings, pre-norm blocks, final layer norm and an output projection.

use std::path::Path;
use std::time::Instant;

use ndarray::{s, Array2, ArrayView2};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, Container};
use crate::corpus::{CodeSummaryPair, Vocabulary, EOS, SEP};
use crate::error::{Error, Result};
use crate::generate::PromptTemplate;
use crate::nn::{Block, Dropout, LayerCache, LN_EPS};
use crate::params::{Bound, ParamId, ParamStore};
use crate::tensor::{self, normal_init, Real, Tape, Var};
use crate::train::{clip_grad_norm, AdamW, LinearSchedule};

pub const LM_CHECKPOINT_KIND: &str = "language_model";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LmConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_positions: usize,
    pub dropout: f64,
    pub seed: u64,
}

impl LmConfig {
    /// The default toy scale: 128 wide, 4 layers, 4 heads, 512 positions.
    pub fn toy(vocab_size: usize) -> Self {
        LmConfig {
            d_model: 128,
            n_layers: 4,
            n_heads: 4,
            d_ff: 512,
            vocab_size,
            max_positions: 512,
            dropout: 0.0,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.d_model == 0 || self.n_heads == 0 || self.n_layers == 0 || self.d_ff == 0 {
            return bad("model dimensions must be positive".into());
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return bad(format!("d_model {} not divisible by n_heads {}", self.d_model, self.n_heads));
        }
        if self.vocab_size < 5 {
            return bad(format!("vocab_size {} below minimum of 5", self.vocab_size));
        }
        if self.max_positions == 0 {
            return bad("max_positions must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        Ok(())
    }

    /// Checks that a code + summary + prompt context fits the position table.
    pub fn check_capacity(&self, code_len: usize, summary_len: usize, prompt_len: usize) -> Result<()> {
        let need = code_len + summary_len + prompt_len;
        if need > self.max_positions {
            return Err(Error::Capacity(format!(
                "code {code_len} + summary {summary_len} + prompt {prompt_len} = {need} exceeds max_positions {}",
                self.max_positions
            )));
        }
        Ok(())
    }
}

/// Cached per-layer keys and values of all consumed positions.
#[derive(Clone, Debug)]
pub struct ActivationState<T> {
    layers: Vec<LayerCache<T>>,
    len: usize,
}

impl<T> ActivationState<T> {
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

#[derive(Clone, Debug)]
pub struct LanguageModel<T: Real = f32> {
    config: LmConfig,
    store: ParamStore<T>,
    tok_emb: ParamId,
    pos_emb: ParamId,
    blocks: Vec<Block>,
    lnf_g: ParamId,
    lnf_b: ParamId,
    w_out: ParamId,
    frozen: bool,
}

impl<T: Real> LanguageModel<T> {
    /// Randomly initialised model; identical configs give identical weights.
    pub fn new(config: LmConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let d = config.d_model;
        let tok_emb = store.add("embed.tokens", normal_init(&mut rng, config.vocab_size, d, 0.02));
        let pos_emb = store.add("embed.positions", normal_init(&mut rng, config.max_positions, d, 0.02));
        let blocks = (0..config.n_layers)
            .map(|i| Block::new(&mut store, &format!("blocks.{i}"), d, config.n_heads, config.d_ff, &mut rng))
            .collect();
        let lnf_g = store.add("final_ln.gamma", Array2::ones((1, d)));
        let lnf_b = store.add("final_ln.beta", Array2::zeros((1, d)));
        let w_out = store.add("output.w", normal_init(&mut rng, d, config.vocab_size, 0.02));
        Ok(LanguageModel {
            config,
            store,
            tok_emb,
            pos_emb,
            blocks,
            lnf_g,
            lnf_b,
            w_out,
            frozen: false,
        })
    }

    pub fn config(&self) -> &LmConfig {
        &self.config
    }

    pub fn d_model(&self) -> usize {
        self.config.d_model
    }

    pub fn vocab_size(&self) -> usize {
        self.config.vocab_size
    }

    pub fn store(&self) -> &ParamStore<T> {
        &self.store
    }

    pub(crate) fn store_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    pub fn num_params(&self) -> usize {
        self.store.num_scalars()
    }

    /// Marks every parameter non-trainable. Gradients still flow through.
    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn unfreeze(&mut self) {
        self.frozen = false;
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn parameter_checksum(&self) -> String {
        self.store.checksum()
    }

    pub fn token_embeddings(&self) -> &Array2<T> {
        self.store.get(self.tok_emb)
    }

    pub fn new_state(&self) -> ActivationState<T> {
        ActivationState {
            layers: (0..self.config.n_layers)
                .map(|_| LayerCache::new(self.config.max_positions, self.config.d_model))
                .collect(),
            len: 0,
        }
    }

    fn check_ids(&self, ids: &[u32], start: usize) -> Result<()> {
        if let Some(&bad) = ids.iter().find(|&&id| id as usize >= self.config.vocab_size) {
            return Err(Error::Argument(format!(
                "token id {bad} out of range for vocabulary of {}",
                self.config.vocab_size
            )));
        }
        if start + ids.len() > self.config.max_positions {
            return Err(Error::Capacity(format!(
                "positions {}..{} exceed max_positions {}",
                start,
                start + ids.len(),
                self.config.max_positions
            )));
        }
        Ok(())
    }

    /// Token embedding plus positional encoding for positions `0..ids.len()`.
    pub fn embed(&self, ids: &[u32]) -> Result<Array2<T>> {
        self.embed_at(ids, 0)
    }

    /// As [`embed`](Self::embed) with positions starting at `start`.
    pub fn embed_at(&self, ids: &[u32], start: usize) -> Result<Array2<T>> {
        self.check_ids(ids, start)?;
        let tok = self.store.get(self.tok_emb);
        let pos = self.store.get(self.pos_emb);
        let mut out = Array2::zeros((ids.len(), self.config.d_model));
        for (i, &id) in ids.iter().enumerate() {
            let mut row = out.row_mut(i);
            row.assign(&tok.row(id as usize));
            row += &pos.row(start + i);
        }
        Ok(out)
    }

    /// Adds the positional encoding of `position` to every row of `x`.
    pub fn place_at(&self, x: ArrayView2<T>, position: usize) -> Result<Array2<T>> {
        self.check_ids(&[], position + 1)?;
        Ok(&x + &self.store.get(self.pos_emb).row(position))
    }

    /// [`place_at`](Self::place_at) on the tape.
    pub fn place_tape(&self, tape: &mut Tape<'_, T>, p: &Bound, x: Var, position: usize) -> Result<Var> {
        self.check_ids(&[], position + 1)?;
        let pos = tape.gather(p[self.pos_emb], &[position]);
        Ok(tape.add_row(x, pos))
    }

    /// Runs the blocks and final norm over `x`, continuing from `state`.
    pub fn forward_hidden(&self, x: ArrayView2<T>, state: Option<&mut ActivationState<T>>) -> Result<Array2<T>> {
        let offset = state.as_ref().map_or(0, |s| s.len);
        if offset + x.nrows() > self.config.max_positions {
            return Err(Error::Capacity(format!(
                "sequence of {} after {} cached positions exceeds max_positions {}",
                x.nrows(),
                offset,
                self.config.max_positions
            )));
        }
        if x.ncols() != self.config.d_model {
            return Err(Error::Argument(format!(
                "embedding width {} does not match d_model {}",
                x.ncols(),
                self.config.d_model
            )));
        }
        let mut h = x.to_owned();
        match state {
            Some(state) => {
                for (block, cache) in self.blocks.iter().zip(state.layers.iter_mut()) {
                    h = block.forward(&self.store, h.view(), true, Some((cache, offset)));
                }
                state.len += x.nrows();
            }
            None => {
                for block in &self.blocks {
                    h = block.forward(&self.store, h.view(), true, None);
                }
            }
        }
        let (out, _, _) = tensor::layer_norm(
            h.view(),
            self.store.get(self.lnf_g).view(),
            self.store.get(self.lnf_b).view(),
            LN_EPS,
        );
        Ok(out)
    }

    /// Logits for every row of `x`.
    pub fn forward(&self, x: ArrayView2<T>, state: Option<&mut ActivationState<T>>) -> Result<Array2<T>> {
        let h = self.forward_hidden(x, state)?;
        Ok(h.dot(self.store.get(self.w_out)))
    }

    /// Logits of the last row only; the decoding hot path.
    pub fn forward_last(&self, x: ArrayView2<T>, state: Option<&mut ActivationState<T>>) -> Result<Vec<T>> {
        let h = self.forward_hidden(x, state)?;
        let last = h.slice(s![h.nrows() - 1.., ..]);
        Ok(last.dot(self.store.get(self.w_out)).into_iter().collect())
    }

    /// Binds the parameters; trainable unless the model is frozen.
    pub fn bind<'a>(&'a self, tape: &mut Tape<'a, T>) -> Bound {
        self.store.bind(tape, !self.frozen)
    }

    pub fn embed_tape(&self, tape: &mut Tape<'_, T>, p: &Bound, ids: &[u32], start: usize) -> Result<Var> {
        self.check_ids(ids, start)?;
        let idx: Vec<usize> = ids.iter().map(|&i| i as usize).collect();
        let positions: Vec<usize> = (start..start + ids.len()).collect();
        let tok = tape.gather(p[self.tok_emb], &idx);
        let pos = tape.gather(p[self.pos_emb], &positions);
        Ok(tape.add(tok, pos))
    }

    pub fn hidden_tape<R: rand::Rng>(
        &self,
        tape: &mut Tape<'_, T>,
        p: &Bound,
        x: Var,
        dropout: &mut Option<Dropout<'_, R>>,
    ) -> Result<Var> {
        let rows = tape.value(x).nrows();
        if rows > self.config.max_positions {
            return Err(Error::Capacity(format!(
                "sequence of {rows} exceeds max_positions {}",
                self.config.max_positions
            )));
        }
        let mut h = x;
        for block in &self.blocks {
            h = block.forward_tape(tape, p, h, true, dropout);
        }
        Ok(tape.layer_norm(h, p[self.lnf_g], p[self.lnf_b], LN_EPS))
    }

    pub fn logits_tape(&self, tape: &mut Tape<'_, T>, p: &Bound, h: Var) -> Var {
        tape.matmul(h, p[self.w_out])
    }

    pub fn cast<U: Real>(&self) -> LanguageModel<U> {
        LanguageModel {
            config: self.config.clone(),
            store: self.store.cast(),
            tok_emb: self.tok_emb,
            pos_emb: self.pos_emb,
            blocks: self.blocks.clone(),
            lnf_g: self.lnf_g,
            lnf_b: self.lnf_b,
            w_out: self.w_out,
            frozen: self.frozen,
        }
    }

    /// Writes config, vocabulary and parameters as a versioned container.
    pub fn save(&self, path: impl AsRef<Path>, vocab: &Vocabulary) -> Result<()> {
        if vocab.len() != self.config.vocab_size {
            return Err(Error::Compatibility(format!(
                "vocabulary of {} tokens for a model with vocab_size {}",
                vocab.len(),
                self.config.vocab_size
            )));
        }
        let meta = serde_json::json!({
            "config": self.config,
            "vocabulary": vocab,
        });
        checkpoint::write(path, LM_CHECKPOINT_KIND, meta, &self.store)
    }
}

impl LanguageModel<f32> {
    /// Restores a model and its vocabulary; the model comes back unfrozen.
    pub fn load(path: impl AsRef<Path>) -> Result<(Self, Vocabulary)> {
        let container = checkpoint::read(path)?;
        container.expect_kind(LM_CHECKPOINT_KIND)?;
        let config: LmConfig = serde_json::from_value(container.meta_field("config")?.clone())
            .map_err(|e| Error::Checkpoint(format!("bad model config: {e}")))?;
        let vocab: Vocabulary = serde_json::from_value(container.meta_field("vocabulary")?.clone())
            .map_err(|e| Error::Checkpoint(format!("bad vocabulary: {e}")))?;
        let mut model = LanguageModel::new(config)?;
        restore_store(&mut model.store, container)?;
        Ok((model, vocab))
    }
}

/// Copies checkpoint tensors into `store`, requiring matching names and shapes.
pub(crate) fn restore_store(store: &mut ParamStore<f32>, container: Container) -> Result<()> {
    if container.tensors.len() != store.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint holds {} tensors, model expects {}",
            container.tensors.len(),
            store.len()
        )));
    }
    let names = store.names().to_vec();
    for ((name, value), (expected, slot)) in container
        .tensors
        .into_iter()
        .zip(names.iter().zip(store.values_mut().iter_mut()))
    {
        if &name != expected || value.dim() != slot.dim() {
            return Err(Error::Checkpoint(format!(
                "tensor {name:?} {:?} does not match expected {expected:?} {:?}",
                value.dim(),
                slot.dim()
            )));
        }
        *slot = value;
    }
    Ok(())
}

/// What the pretraining stream is made of.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainMixture {
    /// One `code SEP summary EOS` document per pair.
    pub paired: bool,
    /// Adds one `code EOS` document per pair.
    pub code_only: bool,
    /// Fraction of pairs additionally rendered as multi-example
    /// "Code: ... Summary: ..." documents.
    pub block_fraction: f64,
    /// Examples per block document.
    pub block_size: usize,
}

impl Default for PretrainMixture {
    fn default() -> Self {
        PretrainMixture {
            paired: true,
            code_only: true,
            block_fraction: 1.0,
            block_size: 11,
        }
    }
}

impl PretrainMixture {
    pub fn paired_only() -> Self {
        PretrainMixture {
            paired: true,
            code_only: false,
            block_fraction: 0.0,
            block_size: 1,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub grad_clip: f64,
    pub seed: u64,
    pub code_max_len: usize,
    pub summary_max_len: usize,
    pub mixture: PretrainMixture,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            epochs: 10,
            batch_size: 16,
            learning_rate: 1e-3,
            weight_decay: 0.01,
            grad_clip: 1.0,
            seed: 0,
            code_max_len: crate::corpus::DEFAULT_CODE_MAX_LEN,
            summary_max_len: crate::corpus::DEFAULT_SUMMARY_MAX_LEN,
            mixture: PretrainMixture::default(),
        }
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct PretrainReport {
    pub epoch_losses: Vec<f64>,
    pub epoch_seconds: Vec<f64>,
    pub documents: usize,
    pub tokens: usize,
}

/// Builds the token documents used for next-token pretraining.
pub fn pretraining_documents(
    pairs: &[CodeSummaryPair],
    vocab: &Vocabulary,
    cfg: &PretrainConfig,
    max_positions: usize,
) -> Vec<Vec<u32>> {
    let code = |p: &CodeSummaryPair| {
        let mut ids = vocab.encode(&p.code);
        ids.truncate(cfg.code_max_len);
        ids
    };
    let summary = |p: &CodeSummaryPair| {
        let mut ids = vocab.encode(&p.summary);
        ids.truncate(cfg.summary_max_len);
        ids
    };
    let mut docs = Vec::new();
    for p in pairs {
        if cfg.mixture.paired {
            let mut d = code(p);
            d.push(SEP);
            d.extend(summary(p));
            d.push(EOS);
            docs.push(d);
        }
        if cfg.mixture.code_only {
            let mut d = code(p);
            d.push(EOS);
            docs.push(d);
        }
    }
    if cfg.mixture.block_fraction > 0.0 && cfg.mixture.block_size > 0 {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xb10c);
        let mut chosen: Vec<&CodeSummaryPair> = pairs.iter().collect();
        chosen.shuffle(&mut rng);
        let take = (cfg.mixture.block_fraction * pairs.len() as f64).round() as usize;
        let block = PromptTemplate::block();
        for group in chosen[..take.min(chosen.len())].chunks(cfg.mixture.block_size) {
            let text: String = group
                .iter()
                .map(|p| block.render_example(&p.code, &p.summary))
                .collect();
            let mut d = vocab.encode(&text);
            d.push(EOS);
            docs.push(d);
        }
    }
    for d in &mut docs {
        d.truncate(max_positions);
    }
    docs.retain(|d| d.len() >= 2);
    docs
}

/// Next-token pretraining over `pairs` (see [`PretrainMixture`]).
pub fn pretrain_lm(
    pairs: &[CodeSummaryPair],
    vocab: &Vocabulary,
    config: &LmConfig,
    cfg: &PretrainConfig,
) -> Result<(LanguageModel<f32>, PretrainReport)> {
    if config.vocab_size != vocab.len() {
        return Err(Error::Config(format!(
            "vocab_size {} differs from vocabulary of {}",
            config.vocab_size,
            vocab.len()
        )));
    }
    let docs = pretraining_documents(pairs, vocab, cfg, config.max_positions);
    if docs.is_empty() {
        return Err(Error::Dataset("no pretraining documents".into()));
    }
    let mut model = LanguageModel::<f32>::new(config.clone())?;
    let mut report = PretrainReport {
        documents: docs.len(),
        tokens: docs.iter().map(Vec::len).sum(),
        ..Default::default()
    };
    let steps_per_epoch = docs.len().div_ceil(cfg.batch_size.max(1));
    let mut opt = AdamW::new(model.store(), cfg.weight_decay);
    let schedule = LinearSchedule::new(cfg.learning_rate, cfg.epochs * steps_per_epoch);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..docs.len()).collect();
    for epoch in 0..cfg.epochs {
        let start = Instant::now();
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut count = 0usize;
        for batch in order.chunks(cfg.batch_size.max(1)) {
            let (loss, tokens, mut grads) = {
                let mut tape = Tape::new();
                let p = model.bind(&mut tape);
                let mut parts = Vec::with_capacity(batch.len());
                let mut tokens = 0usize;
                let mut dropout = (config.dropout > 0.0).then_some(Dropout {
                    rate: config.dropout,
                    rng: &mut rng,
                });
                for &i in batch {
                    let doc = &docs[i];
                    let input = &doc[..doc.len() - 1];
                    let targets: Vec<Option<usize>> = doc[1..].iter().map(|&t| Some(t as usize)).collect();
                    let x = model.embed_tape(&mut tape, &p, input, 0)?;
                    let h = model.hidden_tape(&mut tape, &p, x, &mut dropout)?;
                    let logits = model.logits_tape(&mut tape, &p, h);
                    parts.push(tape.cross_entropy_sum(logits, &targets));
                    tokens += targets.len();
                }
                let sum = tape.sum(&parts);
                let loss = tape.scale(sum, 1.0 / tokens as f32);
                let value = tape.scalar(loss) as f64;
                let mut g = tape.backward(loss);
                let grads: Vec<Option<Array2<f32>>> = p.vars().iter().map(|&v| g.take(v)).collect();
                (value, tokens, grads)
            };
            if !loss.is_finite() {
                return Err(Error::Divergence(format!(
                    "pretraining loss became {loss} in epoch {} after {} steps",
                    epoch + 1,
                    opt.steps()
                )));
            }
            clip_grad_norm(&mut grads, cfg.grad_clip);
            let lr = schedule.lr(opt.steps());
            opt.step(model.store_mut(), &grads, lr);
            total += loss * tokens as f64;
            count += tokens;
        }
        let mean = total / count.max(1) as f64;
        log::info!("pretrain epoch {}: loss {:.4}", epoch + 1, mean);
        report.epoch_losses.push(mean);
        report.epoch_seconds.push(start.elapsed().as_secs_f64());
    }
    Ok((model, report))
}
