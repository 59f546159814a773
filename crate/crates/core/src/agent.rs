//! The prompt agent: `n` pseudo tokens index a trainable embedding table,
//! a sequence encoder (BiLSTM or transformer) mixes them, and a two-layer
//! ReLU MLP maps each position to the language model's width. The result
//! e^P is fused with the code embedding e^C in front of, behind, or around
//! the code.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use ndarray::{concatenate, s, Array2, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::error::{Error, Result};
use crate::lm::{restore_store, LanguageModel};
use crate::nn::{Block, Lstm, Mlp};
use crate::params::{Bound, ParamId, ParamStore};
use crate::tensor::{normal_init, uniform_init, Real, Tape, Var};

pub const AGENT_CHECKPOINT_KIND: &str = "prompt_agent";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FusionMode {
    Front,
    Back,
    TwoEnd,
}

impl FusionMode {
    pub const ALL: [FusionMode; 3] = [FusionMode::Front, FusionMode::Back, FusionMode::TwoEnd];

    pub fn as_str(self) -> &'static str {
        match self {
            FusionMode::Front => "front",
            FusionMode::Back => "back",
            FusionMode::TwoEnd => "two-end",
        }
    }
}

impl fmt::Display for FusionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for FusionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "front" => Ok(FusionMode::Front),
            "back" => Ok(FusionMode::Back),
            "two-end" | "two_end" => Ok(FusionMode::TwoEnd),
            _ => Err(Error::Argument(format!("unknown fusion mode {s:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EncoderVariant {
    Bilstm,
    Transformer,
}

impl EncoderVariant {
    pub fn as_str(self) -> &'static str {
        match self {
            EncoderVariant::Bilstm => "bilstm",
            EncoderVariant::Transformer => "transformer",
        }
    }
}

impl fmt::Display for EncoderVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EncoderVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bilstm" => Ok(EncoderVariant::Bilstm),
            "transformer" => Ok(EncoderVariant::Transformer),
            _ => Err(Error::Argument(format!("unknown encoder variant {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgentConfig {
    pub prompt_length: usize,
    pub d_model: usize,
    pub fusion: FusionMode,
    pub encoder: EncoderVariant,
    /// Heads and layers of the transformer variant.
    pub heads: usize,
    pub layers: usize,
    pub seed: u64,
}

impl AgentConfig {
    /// Length 100, back-end fusion, BiLSTM encoder.
    pub fn new(d_model: usize) -> Self {
        AgentConfig {
            prompt_length: 100,
            d_model,
            fusion: FusionMode::Back,
            encoder: EncoderVariant::Bilstm,
            heads: 4,
            layers: 2,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.prompt_length == 0 {
            return Err(Error::Config("prompt length must be at least 1".into()));
        }
        if self.d_model < 2 || !self.d_model.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "agent width {} must be even so the BiLSTM halves concatenate to it",
                self.d_model
            )));
        }
        if self.encoder == EncoderVariant::Transformer
            && (self.heads == 0 || self.layers == 0 || !self.d_model.is_multiple_of(self.heads))
        {
            return Err(Error::Config(format!(
                "transformer encoder needs layers >= 1 and heads dividing {}",
                self.d_model
            )));
        }
        Ok(())
    }
}

/// The placeholder token ids `0..n`; they carry no meaning beyond indexing.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PseudoPrompt {
    pub n: usize,
}

impl PseudoPrompt {
    pub fn new(n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::Argument("pseudo prompt needs at least one token".into()));
        }
        Ok(PseudoPrompt { n })
    }

    pub fn ids(&self) -> Vec<usize> {
        (0..self.n).collect()
    }
}

#[derive(Clone, Debug)]
enum Encoder {
    Bilstm { forward: Lstm, backward: Lstm },
    Transformer { positions: ParamId, blocks: Vec<Block> },
}

#[derive(Clone, Debug)]
pub struct PromptAgent<T: Real = f32> {
    config: AgentConfig,
    store: ParamStore<T>,
    embedding: ParamId,
    encoder: Encoder,
    mlp: Mlp,
}

impl<T: Real> PromptAgent<T> {
    pub fn new(config: AgentConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let (n, d) = (config.prompt_length, config.d_model);
        let embedding = store.add("pseudo.embedding", uniform_init(&mut rng, n, d, 0.1));
        let encoder = match config.encoder {
            EncoderVariant::Bilstm => Encoder::Bilstm {
                forward: Lstm::new(&mut store, "encoder.forward", d, d / 2, &mut rng),
                backward: Lstm::new(&mut store, "encoder.backward", d, d / 2, &mut rng),
            },
            EncoderVariant::Transformer => Encoder::Transformer {
                positions: store.add("encoder.positions", normal_init(&mut rng, n, d, 0.02)),
                blocks: (0..config.layers)
                    .map(|i| Block::new(&mut store, &format!("encoder.blocks.{i}"), d, config.heads, 4 * d, &mut rng))
                    .collect(),
            },
        };
        let mlp = Mlp::new(&mut store, "mlp", d, d, d, &mut rng);
        Ok(PromptAgent {
            config,
            store,
            embedding,
            encoder,
            mlp,
        })
    }

    /// Transformer-encoder agent of length `n`.
    pub fn transformer(n: usize, d_model: usize, heads: usize, layers: usize, seed: u64) -> Result<Self> {
        Self::new(AgentConfig {
            prompt_length: n,
            d_model,
            fusion: FusionMode::Back,
            encoder: EncoderVariant::Transformer,
            heads,
            layers,
            seed,
        })
    }

    pub fn config(&self) -> &AgentConfig {
        &self.config
    }

    pub fn prompt_length(&self) -> usize {
        self.config.prompt_length
    }

    pub fn fusion(&self) -> FusionMode {
        self.config.fusion
    }

    pub fn pseudo_prompt(&self) -> PseudoPrompt {
        PseudoPrompt {
            n: self.config.prompt_length,
        }
    }

    pub fn store(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    pub fn num_params(&self) -> usize {
        self.store.num_scalars()
    }

    pub fn parameter_checksum(&self) -> String {
        self.store.checksum()
    }

    /// Named parameter groups, for per-group diagnostics.
    pub fn parameter_names(&self) -> &[String] {
        self.store.names()
    }

    pub fn bind<'a>(&'a self, tape: &mut Tape<'a, T>) -> Bound {
        self.store.bind(tape, true)
    }

    /// e^P on the tape (n x d_model).
    pub fn encode_tape(&self, tape: &mut Tape<'_, T>, p: &Bound) -> Var {
        let table = p[self.embedding];
        let h = match &self.encoder {
            Encoder::Bilstm { forward, backward } => {
                let hf = forward.forward_tape(tape, p, table, false);
                let hb = backward.forward_tape(tape, p, table, true);
                tape.concat_cols(&[hf, hb])
            }
            Encoder::Transformer { positions, blocks } => {
                let mut h = tape.add(table, p[*positions]);
                for block in blocks {
                    h = block.forward_tape::<T, ChaCha8Rng>(tape, p, h, false, &mut None);
                }
                h
            }
        };
        self.mlp.forward_tape(tape, p, h)
    }

    /// e^P for `pseudo`, which must match the agent's prompt length.
    pub fn encode_prompt(&self, pseudo: &PseudoPrompt) -> Result<Array2<T>> {
        if pseudo.n != self.config.prompt_length {
            return Err(Error::Argument(format!(
                "pseudo prompt of length {} for an agent of length {}",
                pseudo.n, self.config.prompt_length
            )));
        }
        Ok(self.prompt_embedding())
    }

    pub fn prompt_embedding(&self) -> Array2<T> {
        let mut tape = Tape::new();
        let p = self.store.bind(&mut tape, false);
        let out = self.encode_tape(&mut tape, &p);
        tape.value(out).clone()
    }

    pub fn check_compatible(&self, lm: &LanguageModel<T>) -> Result<()> {
        if self.config.d_model != lm.d_model() {
            return Err(Error::Compatibility(format!(
                "agent width {} does not match language model width {}",
                self.config.d_model,
                lm.d_model()
            )));
        }
        Ok(())
    }

    pub fn cast<U: Real>(&self) -> PromptAgent<U> {
        PromptAgent {
            config: self.config.clone(),
            store: self.store.cast(),
            embedding: self.embedding,
            encoder: self.encoder.clone(),
            mlp: self.mlp.clone(),
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        checkpoint::write(path, AGENT_CHECKPOINT_KIND, serde_json::json!({ "config": self.config }), &self.store)
    }
}

impl PromptAgent<f32> {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let container = checkpoint::read(path)?;
        container.expect_kind(AGENT_CHECKPOINT_KIND)?;
        let config: AgentConfig = serde_json::from_value(container.meta_field("config")?.clone())
            .map_err(|e| Error::Checkpoint(format!("bad agent config: {e}")))?;
        let mut agent = PromptAgent::new(config)?;
        restore_store(&mut agent.store, container)?;
        Ok(agent)
    }
}

pub fn save_agent(agent: &PromptAgent<f32>, path: impl AsRef<Path>) -> Result<()> {
    agent.save(path)
}

/// Loads an agent and checks it against the model it will steer.
pub fn load_agent(path: impl AsRef<Path>, lm: &LanguageModel<f32>) -> Result<PromptAgent<f32>> {
    let agent = PromptAgent::load(path)?;
    agent.check_compatible(lm)?;
    Ok(agent)
}

/// Row counts of the segments of a fused sequence.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FusionLayout {
    pub prompt_before: usize,
    pub code: usize,
    pub prompt_after: usize,
}

impl FusionLayout {
    pub fn new(n: usize, code_len: usize, mode: FusionMode) -> Self {
        let (prompt_before, prompt_after) = match mode {
            FusionMode::Front => (n, 0),
            FusionMode::Back => (0, n),
            FusionMode::TwoEnd => (n.div_ceil(2), n / 2),
        };
        FusionLayout {
            prompt_before,
            code: code_len,
            prompt_after,
        }
    }

    pub fn len(&self) -> usize {
        self.prompt_before + self.code + self.prompt_after
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn code_range(&self) -> std::ops::Range<usize> {
        self.prompt_before..self.prompt_before + self.code
    }
}

/// e^F together with its segment boundaries.
#[derive(Clone, Debug, PartialEq)]
pub struct FusionEmbedding<T> {
    pub rows: Array2<T>,
    pub layout: FusionLayout,
}

impl<T: Real> FusionEmbedding<T> {
    pub fn code_segment(&self) -> ArrayView2<'_, T> {
        self.rows.slice(s![self.layout.code_range(), ..])
    }
}

pub fn fuse<T: Real>(prompt: ArrayView2<T>, code: ArrayView2<T>, mode: FusionMode) -> Result<FusionEmbedding<T>> {
    if prompt.ncols() != code.ncols() {
        return Err(Error::Argument(format!(
            "prompt width {} differs from code width {}",
            prompt.ncols(),
            code.ncols()
        )));
    }
    let layout = FusionLayout::new(prompt.nrows(), code.nrows(), mode);
    let (before, after) = prompt.split_at(Axis(0), layout.prompt_before);
    let rows = concatenate(Axis(0), &[before, code, after]).expect("widths checked");
    Ok(FusionEmbedding { rows, layout })
}

/// [`fuse`] on the tape.
pub fn fuse_tape<T: Real>(tape: &mut Tape<'_, T>, prompt: Var, code: Var, mode: FusionMode) -> (Var, FusionLayout) {
    let n = tape.value(prompt).nrows();
    let layout = FusionLayout::new(n, tape.value(code).nrows(), mode);
    let var = match mode {
        FusionMode::Front => tape.concat_rows(&[prompt, code]),
        FusionMode::Back => tape.concat_rows(&[code, prompt]),
        FusionMode::TwoEnd => {
            let before = tape.slice_rows(prompt, 0, layout.prompt_before);
            if layout.prompt_after == 0 {
                tape.concat_rows(&[before, code])
            } else {
                let after = tape.slice_rows(prompt, layout.prompt_before, layout.prompt_after);
                tape.concat_rows(&[before, code, after])
            }
        }
    };
    (var, layout)
}
