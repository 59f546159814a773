//! Greedy decoding and the four summarization schemes: continuous prompt,
//! zero-shot and few-shot instruction prompting, and a fine-tuned model.

use std::fmt;
use std::str::FromStr;

use ndarray::{concatenate, Array2, ArrayView2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::agent::{fuse, PromptAgent};
use crate::corpus::{CodeSummaryPair, Vocabulary, BOS, DEFAULT_CODE_MAX_LEN, DEFAULT_SUMMARY_MAX_LEN, EOS, PAD, SEP};
use crate::error::{Error, Result};
use crate::lm::LanguageModel;
use crate::tensor::Real;
use crate::train::{prompt_position, summary_start};

pub const CODE_PLACEHOLDER: &str = "{code}";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecodeOptions {
    pub max_new_tokens: usize,
    pub use_cache: bool,
    /// Generation stops when the output ends with one of these; the matched
    /// suffix is dropped.
    pub stop_sequences: Vec<Vec<u32>>,
    pub code_max_len: usize,
}

impl Default for DecodeOptions {
    fn default() -> Self {
        DecodeOptions {
            max_new_tokens: DEFAULT_SUMMARY_MAX_LEN,
            use_cache: true,
            stop_sequences: Vec::new(),
            code_max_len: DEFAULT_CODE_MAX_LEN,
        }
    }
}

/// Index of the largest logit, lowest id on ties. PAD and BOS are never
/// produced.
pub fn argmax<T: Real>(logits: &[T]) -> u32 {
    let mut best = EOS as usize;
    for (i, &v) in logits.iter().enumerate() {
        if i as u32 == PAD || i as u32 == BOS {
            continue;
        }
        if v > logits[best] || (v == logits[best] && i < best) {
            best = i;
        }
    }
    best as u32
}

/// Appends argmax tokens after `context` until EOS, a stop sequence or
/// `max_new_tokens`. Generated tokens are embedded at positions starting
/// from `next_position`. The returned ids exclude EOS.
pub fn greedy_decode<T: Real>(
    lm: &LanguageModel<T>,
    context: ArrayView2<T>,
    next_position: usize,
    options: &DecodeOptions,
) -> Result<Vec<u32>> {
    let max_positions = lm.config().max_positions;
    if context.nrows() == 0 {
        return Err(Error::Input("empty decoding context".into()));
    }
    if context.nrows() + options.max_new_tokens > max_positions
        || next_position + options.max_new_tokens > max_positions
    {
        return Err(Error::Capacity(format!(
            "context of {} rows (next position {}) plus {} new tokens exceeds max_positions {}",
            context.nrows(),
            next_position,
            options.max_new_tokens,
            max_positions
        )));
    }
    let mut out = Vec::new();
    if options.max_new_tokens == 0 {
        return Ok(out);
    }
    let mut state = options.use_cache.then(|| lm.new_state());
    let mut logits = match state.as_mut() {
        Some(s) => lm.forward_last(context, Some(s))?,
        None => lm.forward_last(context, None)?,
    };
    let mut rows = context.to_owned();
    loop {
        let next = argmax(&logits);
        if next == EOS {
            break;
        }
        out.push(next);
        if let Some(stop) = options.stop_sequences.iter().find(|s| !s.is_empty() && out.ends_with(s)) {
            out.truncate(out.len() - stop.len());
            break;
        }
        if out.len() == options.max_new_tokens {
            break;
        }
        let e = lm.embed_at(&[next], next_position + out.len() - 1)?;
        logits = match state.as_mut() {
            Some(s) => lm.forward_last(e.view(), Some(s))?,
            None => {
                rows = concatenate(Axis(0), &[rows.view(), e.view()]).expect("same width");
                lm.forward_last(rows.view(), None)?
            }
        };
    }
    Ok(out)
}

/// A discrete instruction with a single `{code}` placeholder.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub id: String,
    pub text: String,
}

impl PromptTemplate {
    pub fn custom(id: impl Into<String>, text: impl Into<String>) -> Result<Self> {
        let text = text.into();
        let count = text.matches(CODE_PLACEHOLDER).count();
        if count != 1 {
            return Err(Error::Argument(format!(
                "template must contain exactly one {CODE_PLACEHOLDER} placeholder, found {count}"
            )));
        }
        Ok(PromptTemplate { id: id.into(), text })
    }

    pub fn pi1() -> Self {
        PromptTemplate {
            id: "pi1".into(),
            text: "//Human: You are a helpful code summarizer. Please describe in simple english the purpose of the following Java code snippet: {code}\n//Assistant:".into(),
        }
    }

    pub fn pi2() -> Self {
        PromptTemplate {
            id: "pi2".into(),
            text: "Please generate a short comment in one sentence for the following function: {code}".into(),
        }
    }

    /// The query form of the few-shot example block.
    pub fn block() -> Self {
        PromptTemplate {
            id: "block".into(),
            text: "Code:\n{code}\nSummary:".into(),
        }
    }

    pub fn by_id(id: &str) -> Result<Self> {
        match id {
            "pi1" => Ok(Self::pi1()),
            "pi2" => Ok(Self::pi2()),
            "block" => Ok(Self::block()),
            _ => Err(Error::Argument(format!("unknown template {id:?}"))),
        }
    }

    pub fn render(&self, code: &str) -> String {
        self.text.replacen(CODE_PLACEHOLDER, code, 1)
    }

    /// A worked example in the few-shot block layout.
    pub fn render_example(&self, code: &str, summary: &str) -> String {
        format!("Code:\n{code}\nSummary: {summary}\n\n")
    }
}

/// Renders `examples` as blocks followed by the instantiated template.
pub fn render_discrete_prompt(code: &str, template: &PromptTemplate, examples: &[CodeSummaryPair]) -> String {
    let mut text: String = examples
        .iter()
        .map(|e| template.render_example(&e.code, &e.summary))
        .collect();
    text.push_str(&template.render(code));
    text
}

/// Stop sequence that ends a few-shot answer when the model starts the
/// next example block.
pub fn block_stop_sequence(vocab: &Vocabulary) -> Vec<u32> {
    vocab.encode("Code :")
}

fn encode_code(code: &str, vocab: &Vocabulary, limit: usize) -> Result<Vec<u32>> {
    let mut ids = vocab.encode(code);
    if ids.is_empty() {
        return Err(Error::Input("code is empty after tokenization".into()));
    }
    ids.truncate(limit);
    Ok(ids)
}

/// Decodes with a continuous prompt; e^P is computed once at construction.
pub struct PromptAgentSummarizer<'a, T: Real> {
    lm: &'a LanguageModel<T>,
    agent: &'a PromptAgent<T>,
    vocab: &'a Vocabulary,
    prompt: Array2<T>,
    options: DecodeOptions,
}

impl<'a, T: Real> PromptAgentSummarizer<'a, T> {
    pub fn new(
        lm: &'a LanguageModel<T>,
        agent: &'a PromptAgent<T>,
        vocab: &'a Vocabulary,
        options: DecodeOptions,
    ) -> Result<Self> {
        agent.check_compatible(lm)?;
        Ok(PromptAgentSummarizer {
            lm,
            agent,
            vocab,
            prompt: agent.prompt_embedding(),
            options,
        })
    }

    pub fn summarize_ids(&self, code: &str) -> Result<Vec<u32>> {
        let n = self.agent.prompt_length();
        let budget = self
            .lm
            .config()
            .max_positions
            .saturating_sub(n + self.options.max_new_tokens)
            .min(self.options.code_max_len);
        let ids = encode_code(code, self.vocab, budget)?;
        let ec = self.lm.embed(&ids)?;
        let placed = self.lm.place_at(self.prompt.view(), prompt_position(ids.len()))?;
        let fused = fuse(placed.view(), ec.view(), self.agent.fusion())?;
        greedy_decode(self.lm, fused.rows.view(), summary_start(ids.len()), &self.options)
    }

    pub fn summarize(&self, code: &str) -> Result<String> {
        Ok(self.vocab.decode(&self.summarize_ids(code)?))
    }
}

pub fn summarize_prompt_agent<T: Real>(
    code: &str,
    lm: &LanguageModel<T>,
    agent: &PromptAgent<T>,
    vocab: &Vocabulary,
    options: &DecodeOptions,
) -> Result<String> {
    PromptAgentSummarizer::new(lm, agent, vocab, options.clone())?.summarize(code)
}

/// Zero-shot (no examples) or few-shot instruction prompting. When the
/// context does not fit, the oldest examples are dropped first.
pub fn summarize_discrete<T: Real>(
    code: &str,
    lm: &LanguageModel<T>,
    vocab: &Vocabulary,
    template: &PromptTemplate,
    examples: &[CodeSummaryPair],
    options: &DecodeOptions,
) -> Result<String> {
    let max_positions = lm.config().max_positions;
    let room = max_positions.saturating_sub(options.max_new_tokens);
    let mut code_ids = vocab.encode(code);
    if code_ids.is_empty() {
        return Err(Error::Input("code is empty after tokenization".into()));
    }
    let frame = vocab.encode(&template.render("")).len();
    code_ids.truncate(options.code_max_len.min(room.saturating_sub(frame)));
    let code_text = vocab.decode(&code_ids);
    let mut skip = 0;
    let ids = loop {
        let ids = vocab.encode(&render_discrete_prompt(&code_text, template, &examples[skip..]));
        if ids.len() <= room || skip == examples.len() {
            break ids;
        }
        skip += 1;
    };
    if skip > 0 {
        log::warn!(
            "context of {} examples exceeds {} positions; dropped the {} oldest",
            examples.len(),
            room,
            skip
        );
    }
    if ids.len() > room {
        return Err(Error::Capacity(format!(
            "prompt of {} tokens leaves no room for {} new tokens",
            ids.len(),
            options.max_new_tokens
        )));
    }
    let context = lm.embed(&ids)?;
    let mut options = options.clone();
    if !examples.is_empty() || template.id == "block" {
        options.stop_sequences.push(block_stop_sequence(vocab));
    }
    let out = greedy_decode(lm, context.view(), ids.len(), &options)?;
    Ok(vocab.decode(&out))
}

/// Decoding from a fine-tuned model: context is `code SEP`.
pub fn summarize_fine_tuned<T: Real>(
    code: &str,
    lm: &LanguageModel<T>,
    vocab: &Vocabulary,
    options: &DecodeOptions,
) -> Result<String> {
    let budget = lm
        .config()
        .max_positions
        .saturating_sub(options.max_new_tokens + 1)
        .min(options.code_max_len);
    let mut ids = encode_code(code, vocab, budget)?;
    ids.push(SEP);
    let context = lm.embed(&ids)?;
    let out = greedy_decode(lm, context.view(), ids.len(), options)?;
    Ok(vocab.decode(&out))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scheme {
    ZeroShot,
    FewShot,
    FineTune,
    PromptAgent,
}

impl Scheme {
    pub fn as_str(self) -> &'static str {
        match self {
            Scheme::ZeroShot => "zero-shot",
            Scheme::FewShot => "few-shot",
            Scheme::FineTune => "fine-tune",
            Scheme::PromptAgent => "prompt-agent",
        }
    }
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Scheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "zero-shot" => Ok(Scheme::ZeroShot),
            "few-shot" => Ok(Scheme::FewShot),
            "fine-tune" | "fine-tuned" => Ok(Scheme::FineTune),
            "prompt-agent" => Ok(Scheme::PromptAgent),
            _ => Err(Error::Argument(format!("unknown scheme {s:?}"))),
        }
    }
}

/// Everything one scheme needs to summarize.
pub enum SchemeResources<'a> {
    Discrete {
        lm: &'a LanguageModel<f32>,
        template: PromptTemplate,
        examples: Vec<CodeSummaryPair>,
    },
    FineTuned {
        lm: &'a LanguageModel<f32>,
    },
    PromptAgent {
        lm: &'a LanguageModel<f32>,
        agent: &'a PromptAgent<f32>,
    },
}

impl SchemeResources<'_> {
    pub fn scheme(&self) -> Scheme {
        match self {
            SchemeResources::Discrete { examples, .. } if examples.is_empty() => Scheme::ZeroShot,
            SchemeResources::Discrete { .. } => Scheme::FewShot,
            SchemeResources::FineTuned { .. } => Scheme::FineTune,
            SchemeResources::PromptAgent { .. } => Scheme::PromptAgent,
        }
    }
}

/// Runs `f` over `codes` in parallel, preserving order.
pub fn map_codes<R: Send>(codes: &[&str], f: impl Fn(&str) -> Result<R> + Sync) -> Vec<Result<R>> {
    codes.par_iter().map(|c| f(c)).collect()
}

/// Summarizes every snippet with one scheme.
pub fn summarize_batch(
    codes: &[&str],
    resources: &SchemeResources<'_>,
    vocab: &Vocabulary,
    options: &DecodeOptions,
) -> Result<Vec<Result<String>>> {
    Ok(match resources {
        SchemeResources::Discrete { lm, template, examples } => {
            map_codes(codes, |c| summarize_discrete(c, lm, vocab, template, examples, options))
        }
        SchemeResources::FineTuned { lm } => map_codes(codes, |c| summarize_fine_tuned(c, lm, vocab, options)),
        SchemeResources::PromptAgent { lm, agent } => {
            let s = PromptAgentSummarizer::new(lm, agent, vocab, options.clone())?;
            map_codes(codes, |c| s.summarize(c))
        }
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratedSummary {
    pub code: String,
    pub summary: String,
    pub scheme: Scheme,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::agent::{AgentConfig, EncoderVariant, FusionMode};
    use crate::lm::LmConfig;
    use ndarray::s;

    fn vocab() -> Vocabulary {
        Vocabulary::from_texts(["int f ( ) { return 0 ; } returns zero Code : Summary"], 1, 100).unwrap()
    }

    fn lm(seed: u64, vocab_size: usize) -> LanguageModel<f32> {
        LanguageModel::new(LmConfig {
            d_model: 16,
            n_layers: 2,
            n_heads: 2,
            d_ff: 32,
            vocab_size,
            max_positions: 128,
            dropout: 0.0,
            seed,
        })
        .unwrap()
    }

    #[test]
    fn argmax_ties_and_masking() {
        assert_eq!(argmax(&[0.0f32, 0.0, 1.0, 3.0, 3.0]), 3);
        assert_eq!(argmax(&[9.0f32, 9.0, 1.0, 0.0]), 2);
        assert_eq!(argmax(&[0.0f32, 0.0, 0.0, 0.0, 0.0]), 2);
    }

    fn set(m: &mut LanguageModel<f32>, name: &str, f: impl Fn(&mut Array2<f32>)) {
        let i = m.store().names().iter().position(|n| n == name).unwrap();
        f(&mut m.store_mut().values_mut()[i]);
    }

    #[test]
    fn eos_first_model_returns_empty_summary() {
        let v = vocab();
        let mut m = lm(0, v.len());
        set(&mut m, "final_ln.gamma", |g| g.fill(0.0));
        set(&mut m, "final_ln.beta", |b| b.fill(1.0));
        set(&mut m, "output.w", |w| {
            w.fill(0.0);
            w.slice_mut(s![.., EOS as usize]).fill(1.0);
        });
        let ctx = m.embed(&[5, 6, 7]).unwrap();
        assert!(greedy_decode(&m, ctx.view(), 3, &DecodeOptions::default()).unwrap().is_empty());
        assert_eq!(summarize_fine_tuned("int f ( )", &m, &v, &DecodeOptions::default()).unwrap(), "");
    }

    #[test]
    fn tied_logits_pick_the_lowest_id() {
        let v = vocab();
        let mut m = lm(0, v.len());
        set(&mut m, "final_ln.gamma", |g| g.fill(0.0));
        set(&mut m, "final_ln.beta", |b| b.fill(1.0));
        set(&mut m, "output.w", |w| {
            w.fill(0.0);
            w.slice_mut(s![.., 7]).fill(1.0);
            w.slice_mut(s![.., 9]).fill(1.0);
        });
        let ctx = m.embed(&[5]).unwrap();
        let out = greedy_decode(&m, ctx.view(), 1, &DecodeOptions { max_new_tokens: 3, ..Default::default() }).unwrap();
        assert_eq!(out, vec![7, 7, 7]);
    }

    #[test]
    fn cached_and_uncached_decoding_agree() {
        let v = vocab();
        for seed in 0..4 {
            let m = lm(seed, v.len());
            let ids: Vec<u32> = (0..6).map(|i| 4 + ((seed as u32 + i * 3) % (v.len() as u32 - 4))).collect();
            let ctx = m.embed(&ids).unwrap();
            let opts = DecodeOptions { max_new_tokens: 20, ..Default::default() };
            let a = greedy_decode(&m, ctx.view(), 6, &opts).unwrap();
            let b = greedy_decode(&m, ctx.view(), 6, &DecodeOptions { use_cache: false, ..opts }).unwrap();
            assert_eq!(a, b);
            assert!(!a.contains(&PAD));
        }
    }

    #[test]
    fn capacity_is_checked_up_front() {
        let v = vocab();
        let m = lm(0, v.len());
        let ctx = m.embed(&[4; 100]).unwrap();
        let r = greedy_decode(&m, ctx.view(), 100, &DecodeOptions { max_new_tokens: 29, ..Default::default() });
        assert!(matches!(r, Err(Error::Capacity(_))));
    }

    #[test]
    fn templates_render_verbatim() {
        assert_eq!(
            PromptTemplate::pi2().render("int f(){return 0;}"),
            "Please generate a short comment in one sentence for the following function: int f(){return 0;}"
        );
        assert_eq!(
            PromptTemplate::pi1().render("X"),
            "//Human: You are a helpful code summarizer. Please describe in simple english the purpose of the following Java code snippet: X\n//Assistant:"
        );
        assert!(PromptTemplate::custom("c", "no placeholder").is_err());
        assert!(PromptTemplate::custom("c", "{code} {code}").is_err());
    }

    #[test]
    fn few_shot_context_layout() {
        let ex: Vec<CodeSummaryPair> = (0..10)
            .map(|i| CodeSummaryPair::new(format!("int f{i}()"), &format!("does {i}"), "java").unwrap())
            .collect();
        let text = render_discrete_prompt("int g()", &PromptTemplate::block(), &ex);
        assert_eq!(text.matches("Code:\n").count(), 11);
        assert_eq!(text.matches("Summary: does").count(), 10);
        assert!(text.ends_with("Code:\nint g()\nSummary:"));
        assert_eq!(render_discrete_prompt("c", &PromptTemplate::pi2(), &[]), PromptTemplate::pi2().render("c"));
    }

    #[test]
    fn few_shot_with_no_examples_is_zero_shot() {
        let v = vocab();
        let m = lm(1, v.len());
        let o = DecodeOptions { max_new_tokens: 8, ..Default::default() };
        let a = summarize_discrete("int f ( )", &m, &v, &PromptTemplate::pi2(), &[], &o).unwrap();
        let b = summarize_discrete("int f ( )", &m, &v, &PromptTemplate::pi2(), &Vec::new(), &o).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn oversized_few_shot_context_drops_oldest_examples() {
        let v = vocab();
        let m = lm(1, v.len());
        let ex: Vec<CodeSummaryPair> = (0..30)
            .map(|_| CodeSummaryPair::new("int f ( ) { return 0 ; }", "returns zero", "java").unwrap())
            .collect();
        let o = DecodeOptions { max_new_tokens: 8, ..Default::default() };
        assert!(summarize_discrete("int f ( )", &m, &v, &PromptTemplate::block(), &ex, &o).is_ok());
    }

    #[test]
    fn prompt_agent_summaries_are_deterministic() {
        let v = vocab();
        let mut m = lm(2, v.len());
        m.freeze();
        let agent = PromptAgent::new(AgentConfig {
            prompt_length: 4,
            d_model: 16,
            fusion: FusionMode::TwoEnd,
            encoder: EncoderVariant::Bilstm,
            heads: 2,
            layers: 1,
            seed: 0,
        })
        .unwrap();
        let o = DecodeOptions { max_new_tokens: 10, ..Default::default() };
        let a = summarize_prompt_agent("int f ( ) { return 0 ; }", &m, &agent, &v, &o).unwrap();
        let b = summarize_prompt_agent("int f ( ) { return 0 ; }", &m, &agent, &v, &o).unwrap();
        assert_eq!(a, b);
        assert!(matches!(
            summarize_prompt_agent("   ", &m, &agent, &v, &o),
            Err(Error::Input(_))
        ));
    }
}
