//! Continuous prompt learning for code summarization on a small, fully
//! local stack: a word-level corpus pipeline, a decoder-only transformer,
//! a trainable prompt agent that steers the frozen model, discrete-prompt
//! and fine-tuning baselines, summary metrics and an experiment harness.

pub mod agent;
pub mod checkpoint;
pub mod corpus;
pub mod error;
pub mod experiments;
pub mod generate;
pub mod lm;
pub mod metrics;
pub mod nn;
pub mod params;
pub mod tensor;
pub mod toy;
pub mod train;

pub use agent::{
    fuse, load_agent, save_agent, AgentConfig, EncoderVariant, FusionEmbedding, FusionLayout, FusionMode,
    PromptAgent, PseudoPrompt,
};
pub use corpus::{
    build_vocabulary, detokenize, load_jsonl, select_few_shot, split_pairs, tokenize, CodeSummaryPair, SplitSpec,
    Splits, TokenSequence, Vocabulary,
};
pub use error::{Error, Result};
pub use experiments::{emit_report, run_grid, ExperimentGrid, GridPoint, GridSpec, RunRecord};
pub use generate::{
    greedy_decode, summarize_discrete, summarize_fine_tuned, summarize_prompt_agent, DecodeOptions, PromptTemplate,
    Scheme,
};
pub use lm::{pretrain_lm, ActivationState, LanguageModel, LmConfig, PretrainConfig};
pub use metrics::{bleu, meteor, rouge_l, semantic_sim, MetricReport, SentenceEmbedder};
pub use train::{cross_entropy_loss, train, Regime, TrainConfig, TrainReport};
