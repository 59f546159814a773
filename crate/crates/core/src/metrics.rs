//! Summary metrics on a 0-100 scale: corpus BLEU-4, exact-match METEOR,
//! ROUGE-L and embedding cosine similarity. Texts are normalized (lowercase,
//! trailing punctuation removed) and split with the corpus tokenizer first.

use std::collections::HashMap;
use std::hash::{DefaultHasher, Hash, Hasher};

use serde::{Deserialize, Serialize};

use crate::corpus::{normalize_summary, split_tokens, Vocabulary, UNK};
use crate::error::{Error, Result};
use crate::lm::LanguageModel;
use crate::tensor::Real;

/// Normalized metric tokens of a summary.
pub fn metric_tokens(text: &str) -> Vec<String> {
    split_tokens(&normalize_summary(text))
        .into_iter()
        .map(str::to_string)
        .collect()
}

fn check_corpus<A, B>(candidates: &[A], references: &[B]) -> Result<()> {
    if candidates.len() != references.len() {
        return Err(Error::Argument(format!(
            "{} candidates but {} references",
            candidates.len(),
            references.len()
        )));
    }
    if candidates.is_empty() {
        return Err(Error::Argument("empty corpus".into()));
    }
    Ok(())
}

fn ngram_counts<S: AsRef<str>>(tokens: &[S], n: usize) -> HashMap<Vec<&str>, usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts
                .entry(w.iter().map(AsRef::as_ref).collect())
                .or_insert(0) += 1;
        }
    }
    counts
}

/// Clipped n-gram matches and candidate n-gram totals for n = 1..=4.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct NgramStats {
    pub matches: [usize; 4],
    pub totals: [usize; 4],
    pub candidate_len: usize,
    pub reference_len: usize,
}

impl NgramStats {
    pub fn of<S: AsRef<str>>(candidate: &[S], reference: &[S]) -> Self {
        let mut s = NgramStats {
            candidate_len: candidate.len(),
            reference_len: reference.len(),
            ..Default::default()
        };
        for n in 1..=4 {
            let c = ngram_counts(candidate, n);
            let r = ngram_counts(reference, n);
            s.matches[n - 1] = c.iter().map(|(g, &k)| k.min(r.get(g).copied().unwrap_or(0))).sum();
            s.totals[n - 1] = candidate.len().saturating_sub(n - 1);
        }
        s
    }

    fn add(&mut self, o: &NgramStats) {
        for i in 0..4 {
            self.matches[i] += o.matches[i];
            self.totals[i] += o.totals[i];
        }
        self.candidate_len += o.candidate_len;
        self.reference_len += o.reference_len;
    }

    /// Geometric mean of the precisions times the brevity penalty, 0-100.
    /// Unigram precision is unsmoothed; n >= 2 use (m + 1) / (t + 1).
    pub fn score(&self) -> f64 {
        if self.matches[0] == 0 || self.candidate_len == 0 {
            return 0.0;
        }
        let mut log_sum = (self.matches[0] as f64 / self.totals[0] as f64).ln();
        for i in 1..4 {
            log_sum += ((self.matches[i] + 1) as f64 / (self.totals[i] + 1) as f64).ln();
        }
        let (c, r) = (self.candidate_len as f64, self.reference_len as f64);
        let bp = if c > r { 1.0 } else { (1.0 - r / c).exp() };
        100.0 * bp * (log_sum / 4.0).exp()
    }
}

/// Pooled n-gram statistics over a corpus.
pub fn corpus_ngram_stats<S: AsRef<str>, R: AsRef<str>>(candidates: &[S], references: &[R]) -> Result<NgramStats> {
    check_corpus(candidates, references)?;
    let mut total = NgramStats::default();
    for (c, r) in candidates.iter().zip(references) {
        total.add(&NgramStats::of(&metric_tokens(c.as_ref()), &metric_tokens(r.as_ref())));
    }
    Ok(total)
}

/// Corpus-level BLEU-4.
pub fn bleu<S: AsRef<str>, R: AsRef<str>>(candidates: &[S], references: &[R]) -> Result<f64> {
    Ok(corpus_ngram_stats(candidates, references)?.score())
}

pub fn sentence_bleu(candidate: &str, reference: &str) -> f64 {
    NgramStats::of(&metric_tokens(candidate), &metric_tokens(reference)).score()
}

/// Length of the longest common subsequence.
pub fn lcs_len<S: PartialEq>(a: &[S], b: &[S]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { prev[j + 1].max(cur[j]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// ROUGE-L F1 of token sequences on a 0-1 scale.
pub fn rouge_l_tokens<S: PartialEq>(candidate: &[S], reference: &[S]) -> f64 {
    if candidate.is_empty() || reference.is_empty() {
        return 0.0;
    }
    let l = lcs_len(candidate, reference) as f64;
    if l == 0.0 {
        return 0.0;
    }
    let p = l / candidate.len() as f64;
    let r = l / reference.len() as f64;
    2.0 * p * r / (p + r)
}

pub fn sentence_rouge_l(candidate: &str, reference: &str) -> f64 {
    100.0 * rouge_l_tokens(&metric_tokens(candidate), &metric_tokens(reference))
}

/// Mean per-example ROUGE-L.
pub fn rouge_l<S: AsRef<str>, R: AsRef<str>>(candidates: &[S], references: &[R]) -> Result<f64> {
    check_corpus(candidates, references)?;
    Ok(mean(candidates
        .iter()
        .zip(references)
        .map(|(c, r)| sentence_rouge_l(c.as_ref(), r.as_ref()))))
}

/// Number of contiguous runs in an alignment of candidate positions (in
/// increasing order) to reference positions.
fn chunks(alignment: &[(usize, usize)]) -> usize {
    let mut n = 0;
    for (k, &(i, j)) in alignment.iter().enumerate() {
        if k == 0 || alignment[k - 1].0 + 1 != i || alignment[k - 1].1 + 1 != j {
            n += 1;
        }
    }
    n
}

const EXACT_ALIGNMENT_BUDGET: usize = 20_000;

/// Maximum exact-match alignment with the fewest chunks. Searched
/// exhaustively within a budget, greedily beyond it.
pub fn meteor_alignment<S: PartialEq>(candidate: &[S], reference: &[S]) -> Vec<(usize, usize)> {
    let mut remaining: Vec<usize> = vec![0; candidate.len() + 1];
    let target: usize = {
        let mut used = vec![false; reference.len()];
        let mut m = 0;
        for c in candidate {
            if let Some(j) = (0..reference.len()).find(|&j| !used[j] && reference[j] == *c) {
                used[j] = true;
                m += 1;
            }
        }
        m
    };
    // Upper bound on matches still possible from position i onwards.
    for i in (0..candidate.len()).rev() {
        let any = reference.iter().any(|r| *r == candidate[i]);
        remaining[i] = remaining[i + 1] + usize::from(any);
    }

    struct Search<'s, S> {
        c: &'s [S],
        r: &'s [S],
        target: usize,
        remaining: Vec<usize>,
        used: Vec<bool>,
        current: Vec<(usize, usize)>,
        best: Option<(usize, Vec<(usize, usize)>)>,
        visits: usize,
    }

    impl<S: PartialEq> Search<'_, S> {
        fn run(&mut self, i: usize) -> bool {
            self.visits += 1;
            if self.visits > EXACT_ALIGNMENT_BUDGET {
                return false;
            }
            if self.current.len() + self.remaining[i] < self.target {
                return true;
            }
            if i == self.c.len() {
                let ch = chunks(&self.current);
                if self.best.as_ref().is_none_or(|(b, _)| ch < *b) {
                    self.best = Some((ch, self.current.clone()));
                }
                return true;
            }
            for j in 0..self.r.len() {
                if !self.used[j] && self.r[j] == self.c[i] {
                    self.used[j] = true;
                    self.current.push((i, j));
                    let ok = self.run(i + 1);
                    self.current.pop();
                    self.used[j] = false;
                    if !ok {
                        return false;
                    }
                }
            }
            self.run(i + 1)
        }
    }

    let mut search = Search {
        c: candidate,
        r: reference,
        target,
        remaining,
        used: vec![false; reference.len()],
        current: Vec::new(),
        best: None,
        visits: 0,
    };
    if search.run(0) {
        if let Some((_, a)) = search.best {
            return a;
        }
    }
    greedy_alignment(candidate, reference)
}

/// Left to right; prefers the reference position that continues the
/// previous match, otherwise the leftmost unused one.
fn greedy_alignment<S: PartialEq>(candidate: &[S], reference: &[S]) -> Vec<(usize, usize)> {
    let mut used = vec![false; reference.len()];
    let mut out: Vec<(usize, usize)> = Vec::new();
    for (i, c) in candidate.iter().enumerate() {
        let follow = out
            .last()
            .filter(|&&(pi, _)| pi + 1 == i)
            .map(|&(_, pj)| pj + 1)
            .filter(|&j| j < reference.len() && !used[j] && reference[j] == *c);
        let j = follow.or_else(|| (0..reference.len()).find(|&j| !used[j] && reference[j] == *c));
        if let Some(j) = j {
            used[j] = true;
            out.push((i, j));
        }
    }
    out
}

/// Exact-match METEOR on a 0-1 scale.
pub fn meteor_tokens<S: PartialEq>(candidate: &[S], reference: &[S]) -> f64 {
    let alignment = meteor_alignment(candidate, reference);
    let m = alignment.len() as f64;
    if m == 0.0 {
        return 0.0;
    }
    let p = m / candidate.len() as f64;
    let r = m / reference.len() as f64;
    let f = 10.0 * p * r / (r + 9.0 * p);
    let penalty = 0.5 * (chunks(&alignment) as f64 / m).powi(3);
    f * (1.0 - penalty)
}

pub fn sentence_meteor(candidate: &str, reference: &str) -> f64 {
    100.0 * meteor_tokens(&metric_tokens(candidate), &metric_tokens(reference))
}

/// Mean per-example METEOR.
pub fn meteor<S: AsRef<str>, R: AsRef<str>>(candidates: &[S], references: &[R]) -> Result<f64> {
    check_corpus(candidates, references)?;
    Ok(mean(candidates
        .iter()
        .zip(references)
        .map(|(c, r)| sentence_meteor(c.as_ref(), r.as_ref()))))
}

/// Maps a sentence to a fixed-width vector.
pub trait SentenceEmbedder: Sync {
    fn embed(&self, text: &str) -> Vec<f64>;
}

/// Mean of a language model's token-embedding rows over the sentence.
pub struct LmEmbedder {
    table: Vec<Vec<f64>>,
    vocab: Vocabulary,
}

impl LmEmbedder {
    pub fn new<T: Real>(lm: &LanguageModel<T>, vocab: &Vocabulary) -> Self {
        LmEmbedder {
            table: lm
                .token_embeddings()
                .outer_iter()
                .map(|r| r.iter().map(|x| x.as_f64()).collect())
                .collect(),
            vocab: vocab.clone(),
        }
    }
}

impl SentenceEmbedder for LmEmbedder {
    fn embed(&self, text: &str) -> Vec<f64> {
        let d = self.table.first().map_or(0, Vec::len);
        let mut out = vec![0.0; d];
        let toks = metric_tokens(text);
        for t in &toks {
            let id = self.vocab.id(t).unwrap_or(UNK) as usize;
            for (o, v) in out.iter_mut().zip(&self.table[id]) {
                *o += v;
            }
        }
        if !toks.is_empty() {
            out.iter_mut().for_each(|o| *o /= toks.len() as f64);
        }
        out
    }
}

/// Signed feature hashing of tokens; needs no trained model.
pub struct HashedBagEmbedder {
    pub dim: usize,
}

impl Default for HashedBagEmbedder {
    fn default() -> Self {
        HashedBagEmbedder { dim: 256 }
    }
}

impl SentenceEmbedder for HashedBagEmbedder {
    fn embed(&self, text: &str) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        for t in metric_tokens(text) {
            let mut h = DefaultHasher::new();
            t.hash(&mut h);
            let v = h.finish();
            let sign = if v >> 63 == 0 { 1.0 } else { -1.0 };
            out[(v % self.dim as u64) as usize] += sign;
        }
        out
    }
}

/// max(0, cosine); 0 when either vector is zero.
pub fn clipped_cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (dot / (na * nb)).clamp(0.0, 1.0)
}

pub fn sentence_semantic_sim(candidate: &str, reference: &str, embedder: &dyn SentenceEmbedder) -> f64 {
    100.0 * clipped_cosine(&embedder.embed(candidate), &embedder.embed(reference))
}

/// Mean per-example embedding cosine.
pub fn semantic_sim<S: AsRef<str>, R: AsRef<str>>(
    candidates: &[S],
    references: &[R],
    embedder: &dyn SentenceEmbedder,
) -> Result<f64> {
    check_corpus(candidates, references)?;
    Ok(mean(candidates
        .iter()
        .zip(references)
        .map(|(c, r)| sentence_semantic_sim(c.as_ref(), r.as_ref(), embedder))))
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExampleScores {
    pub candidate: String,
    pub reference: String,
    pub bleu: f64,
    pub meteor: f64,
    pub rouge_l: f64,
    pub semantic_sim: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub bleu: f64,
    pub meteor: f64,
    pub rouge_l: f64,
    pub semantic_sim: f64,
    pub count: usize,
    pub per_example: Vec<ExampleScores>,
}

impl MetricReport {
    pub fn compute<S: AsRef<str> + Sync, R: AsRef<str> + Sync>(
        candidates: &[S],
        references: &[R],
        embedder: &dyn SentenceEmbedder,
    ) -> Result<Self> {
        use rayon::prelude::*;
        check_corpus(candidates, references)?;
        let per_example: Vec<ExampleScores> = candidates
            .par_iter()
            .zip(references.par_iter())
            .map(|(c, r)| {
                let (c, r) = (c.as_ref(), r.as_ref());
                ExampleScores {
                    candidate: c.to_string(),
                    reference: r.to_string(),
                    bleu: sentence_bleu(c, r),
                    meteor: sentence_meteor(c, r),
                    rouge_l: sentence_rouge_l(c, r),
                    semantic_sim: sentence_semantic_sim(c, r, embedder),
                }
            })
            .collect();
        Ok(MetricReport {
            bleu: bleu(candidates, references)?,
            meteor: mean(per_example.iter().map(|e| e.meteor)),
            rouge_l: mean(per_example.iter().map(|e| e.rouge_l)),
            semantic_sim: mean(per_example.iter().map(|e| e.semantic_sim)),
            count: per_example.len(),
            per_example,
        })
    }

    /// Per-example scores as CSV with a header row.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("index,bleu,meteor,rouge_l,semantic_sim,candidate,reference\n");
        for (i, e) in self.per_example.iter().enumerate() {
            out.push_str(&format!(
                "{i},{:.4},{:.4},{:.4},{:.4},{},{}\n",
                e.bleu,
                e.meteor,
                e.rouge_l,
                e.semantic_sim,
                csv_field(&e.candidate),
                csv_field(&e.reference)
            ));
        }
        out
    }
}

pub(crate) fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(s: &str) -> Vec<&str> {
        s.split_whitespace().collect()
    }

    #[test]
    fn bleu_examples() {
        assert!((bleu(&["a b c d e"], &["a b c d e"]).unwrap() - 100.0).abs() < 1e-9);
        assert_eq!(bleu(&["x y z"], &["a b c"]).unwrap(), 0.0);
        let want = 100.0 * (1.0f64 - 4.0 / 3.0).exp();
        assert!((bleu(&["the cat sat"], &["the cat sat down"]).unwrap() - want).abs() < 1e-9);
        assert!(bleu::<&str, &str>(&[], &[]).is_err());
        assert!(bleu(&["a"], &["a", "b"]).is_err());
    }

    #[test]
    fn bleu_pools_counts_across_the_corpus() {
        let s = corpus_ngram_stats(&["a b", "c"], &["a b", "d"]).unwrap();
        assert_eq!(s.matches, [2, 1, 0, 0]);
        assert_eq!(s.totals, [3, 1, 0, 0]);
    }

    #[test]
    fn rouge_examples() {
        assert!((sentence_rouge_l("a b c d", "a b c d") - 100.0).abs() < 1e-12);
        assert!((sentence_rouge_l("a b c d", "a c b d") - 75.0).abs() < 1e-12);
        assert_eq!(sentence_rouge_l("a b", "c d"), 0.0);
        assert_eq!(sentence_rouge_l("", "c d"), 0.0);
    }

    #[test]
    fn meteor_examples() {
        assert_eq!(sentence_meteor("x", "y"), 0.0);
        assert!((sentence_meteor("b a", "a b") - 50.0).abs() < 1e-12);
        for l in 1..10 {
            let s: Vec<String> = (0..l).map(|i| format!("w{i}")).collect();
            let s = s.join(" ");
            let want = 100.0 * (1.0 - 0.5 / (l as f64).powi(3));
            assert!((sentence_meteor(&s, &s) - want).abs() < 1e-9);
        }
    }

    #[test]
    fn meteor_prefers_fewer_chunks_among_maximal_alignments() {
        let a = meteor_alignment(&toks("the cat the dog"), &toks("the dog the cat"));
        assert_eq!(a.len(), 4);
        assert_eq!(chunks(&a), 2);
    }

    #[test]
    fn greedy_fallback_matches_as_many_tokens() {
        let c: Vec<&str> = (0..40).map(|i| if i % 2 == 0 { "a" } else { "b" }).collect();
        let r: Vec<&str> = (0..40).map(|i| if i % 3 == 0 { "b" } else { "a" }).collect();
        let a = meteor_alignment(&c, &r);
        let ca = c.iter().filter(|&&t| t == "a").count();
        let ra = r.iter().filter(|&&t| t == "a").count();
        assert_eq!(a.len(), ca.min(ra) + (40 - ca).min(40 - ra));
    }

    #[test]
    fn semantic_examples() {
        let e = HashedBagEmbedder::default();
        assert!((sentence_semantic_sim("returns the name", "returns the name", &e) - 100.0).abs() < 1e-9);
        assert_eq!(clipped_cosine(&[1.0, 0.0], &[0.0, 1.0]), 0.0);
        assert_eq!(clipped_cosine(&[0.0, 0.0], &[0.0, 1.0]), 0.0);
        let ab = sentence_semantic_sim("sets the value", "gets a value", &e);
        let ba = sentence_semantic_sim("gets a value", "sets the value", &e);
        assert_eq!(ab, ba);
    }

    #[test]
    fn report_and_csv() {
        let r = MetricReport::compute(&["returns zero", "a, b"], &["returns zero", "a b"], &HashedBagEmbedder::default()).unwrap();
        assert_eq!(r.count, 2);
        let csv = r.to_csv();
        assert_eq!(csv.lines().count(), 3);
        assert!(csv.contains("\"a, b\""));
    }
}
