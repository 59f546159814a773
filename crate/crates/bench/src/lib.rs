//! Fixtures shared by the benchmarks.

use softprompt::{build_vocabulary, toy, AgentConfig, CodeSummaryPair, LanguageModel, LmConfig, PromptAgent, Vocabulary};

pub struct BenchSetup {
    pub pairs: Vec<CodeSummaryPair>,
    pub vocab: Vocabulary,
    pub lm: LanguageModel<f32>,
}

/// Bundled Java corpus with an untrained model of the given width.
pub fn setup(d_model: usize, n_layers: usize) -> BenchSetup {
    let pairs = toy::java_corpus();
    let vocab = build_vocabulary(&pairs, 1, 5000).expect("bundled corpus is nonempty");
    let mut lm = LanguageModel::new(LmConfig {
        d_model,
        n_layers,
        d_ff: 4 * d_model,
        ..LmConfig::toy(vocab.len())
    })
    .expect("valid config");
    lm.freeze();
    BenchSetup { pairs, vocab, lm }
}

pub fn agent(setup: &BenchSetup, prompt_length: usize) -> PromptAgent<f32> {
    PromptAgent::new(AgentConfig {
        prompt_length,
        ..AgentConfig::new(setup.lm.d_model())
    })
    .expect("valid agent config")
}
