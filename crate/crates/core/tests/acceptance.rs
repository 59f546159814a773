//! End-to-end acceptance checks. Criteria run sequentially inside one test
//! so wall-clock measurements are not disturbed by parallel test threads.
//! Set `ACCEPTANCE_CRITERIA=1,5` to run a subset while iterating.

use std::collections::BTreeMap;
use std::time::Instant;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use softprompt::experiments::GridResources;
use softprompt::generate::{summarize_batch, SchemeResources};
use softprompt::metrics::{
    lcs_len, meteor_tokens, metric_tokens, rouge_l_tokens, sentence_meteor, HashedBagEmbedder, NgramStats,
};
use softprompt::train::{
    agent_loss_and_gradients, code_budget, prepare_examples, BleuValidator, Example, ScriptedValidator,
    TrainTarget, Validator,
};
use softprompt::*;

// Bypasses the harness capture so verdicts show without --nocapture.
macro_rules! say {
    ($($arg:tt)*) => {{
        use std::io::Write;
        let mut out = std::io::stdout().lock();
        let _ = writeln!(out, $($arg)*);
    }};
}

type Outcome = Result<String, String>;

fn small_lm_config(vocab: usize) -> LmConfig {
    LmConfig {
        d_model: 64,
        n_layers: 2,
        n_heads: 4,
        d_ff: 256,
        vocab_size: vocab,
        max_positions: 512,
        dropout: 0.0,
        seed: 0,
    }
}

/// Java toy corpus split 80/10/10, a vocabulary over the training part and
/// a small model pretrained on it.
struct Fixture {
    splits: Splits,
    vocab: Vocabulary,
    lm: LanguageModel<f32>,
    pretrain_seconds: f64,
}

impl Fixture {
    fn build() -> Fixture {
        let pairs = toy::java_corpus();
        let splits = split_pairs(&pairs, 0.8, 0.1, 0.1, 0).unwrap();
        let vocab = build_vocabulary(&splits.train, 1, 5000).unwrap();
        let start = Instant::now();
        let cfg = PretrainConfig {
            epochs: 8,
            ..Default::default()
        };
        let (mut lm, _) = pretrain_lm(&splits.train, &vocab, &small_lm_config(vocab.len()), &cfg).unwrap();
        lm.freeze();
        Fixture {
            splits,
            vocab,
            lm,
            pretrain_seconds: start.elapsed().as_secs_f64(),
        }
    }
}

fn agent_train_config(seed: u64, max_epochs: usize) -> TrainConfig {
    TrainConfig {
        learning_rate: 1e-3,
        max_epochs,
        patience: max_epochs,
        seed,
        ..Default::default()
    }
}

fn decode_options() -> DecodeOptions {
    DecodeOptions {
        max_new_tokens: 24,
        ..Default::default()
    }
}

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn criterion_1(fx: &Fixture) -> Outcome {
    let n = 10;
    let mut agent = PromptAgent::new(AgentConfig {
        prompt_length: n,
        seed: 1,
        ..AgentConfig::new(fx.lm.d_model())
    })
    .unwrap();
    let before: Vec<Array2<f32>> = agent.store().values().to_vec();
    let lm_before = fx.lm.parameter_checksum();
    let cfg = agent_train_config(1, 20);
    let budget = code_budget(512, n, cfg.summary_max_len, cfg.code_max_len);
    let examples = prepare_examples(&fx.splits.train, &fx.vocab, budget, cfg.summary_max_len);
    let valid = &fx.splits.valid[..40];
    let mut validator = BleuValidator {
        pairs: valid,
        vocab: &fx.vocab,
        options: decode_options(),
    };
    let start = Instant::now();
    let report = train(
        &mut TrainTarget::PromptAgent {
            lm: &fx.lm,
            agent: &mut agent,
        },
        &examples,
        &cfg,
        &mut validator,
        None,
    )
    .map_err(|e| e.to_string())?;
    let secs = start.elapsed().as_secs_f64();
    let lm_after = fx.lm.parameter_checksum();
    let total: usize = before.iter().map(|a| a.len()).sum();
    let changed: usize = before
        .iter()
        .zip(agent.store().values())
        .map(|(a, b)| a.iter().zip(b).filter(|(x, y)| x.to_bits() != y.to_bits()).count())
        .sum();
    let frac = changed as f64 / total as f64;
    check(
        report.stopping_epoch >= 20
            && lm_before == lm_after
            && report.lm_checksum_before == report.lm_checksum_after
            && frac >= 0.99
            && secs <= 15.0 * 60.0,
        format!(
            "{} epochs, LM checksum unchanged: {}, agent parameters changed: {:.2}%, {:.0}s",
            report.stopping_epoch,
            lm_before == lm_after,
            100.0 * frac,
            secs
        ),
    )
}

fn random_batch(rng: &mut ChaCha8Rng, vocab: usize) -> Vec<Example> {
    (0..3)
        .map(|_| {
            let code_len = rng.random_range(2..=6);
            let summary_len = rng.random_range(1..=4);
            Example {
                code: (0..code_len).map(|_| rng.random_range(4..vocab as u32)).collect(),
                summary: (0..summary_len).map(|_| rng.random_range(4..vocab as u32)).collect(),
            }
        })
        .collect()
}

fn criterion_2() -> Outcome {
    let start = Instant::now();
    let mut lm = LanguageModel::<f64>::new(LmConfig {
        d_model: 8,
        n_layers: 2,
        n_heads: 2,
        d_ff: 32,
        vocab_size: 11,
        max_positions: 64,
        dropout: 0.0,
        seed: 7,
    })
    .unwrap();
    lm.freeze();
    let mut agent = PromptAgent::<f64>::new(AgentConfig {
        prompt_length: 3,
        seed: 8,
        ..AgentConfig::new(8)
    })
    .unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let h = 1e-3;
    let mut worst = 0.0f64;
    let mut checked = 0usize;
    for _ in 0..5 {
        let batch = random_batch(&mut rng, 11);
        let refs: Vec<&Example> = batch.iter().collect();
        let (_, grads) = agent_loss_and_gradients(&lm, &agent, &refs).map_err(|e| e.to_string())?;
        for (p, grad) in grads.iter().enumerate() {
            let shape = agent.store().values()[p].dim();
            let analytic = grad.clone().unwrap_or_else(|| Array2::zeros(shape));
            for i in 0..shape.0 {
                for j in 0..shape.1 {
                    let orig = agent.store().values()[p][[i, j]];
                    let mut at = |offset: f64| {
                        agent.store_mut().values_mut()[p][[i, j]] = orig + offset;
                        agent_loss_and_gradients(&lm, &agent, &refs).unwrap().0
                    };
                    // Five-point central stencil: truncation error O(h^4).
                    let numeric = (-at(2.0 * h) + 8.0 * at(h) - 8.0 * at(-h) + at(-2.0 * h)) / (12.0 * h);
                    agent.store_mut().values_mut()[p][[i, j]] = orig;
                    let a = analytic[[i, j]];
                    let scale = a.abs().max(numeric.abs());
                    // Below this size both values are rounding noise.
                    if scale > 1e-9 {
                        worst = worst.max((a - numeric).abs() / scale);
                    }
                    checked += 1;
                }
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    check(
        worst <= 1e-3 && secs <= 60.0,
        format!("{checked} partials over 5 batches, max relative error {worst:.2e}, {secs:.1}s"),
    )
}

fn param(agent: &PromptAgent<f32>, name: &str) -> Array2<f64> {
    let i = agent.store().names().iter().position(|n| n == name).unwrap();
    agent.store().values()[i].mapv(f64::from)
}

fn sig(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Plain-loop LSTM with gate order input, forget, cell, output.
fn lstm(x: &Array2<f64>, w_ih: &Array2<f64>, w_hh: &Array2<f64>, b: &Array2<f64>, reverse: bool) -> Vec<Vec<f64>> {
    let hd = w_hh.nrows();
    let mut h = vec![0.0; hd];
    let mut c = vec![0.0; hd];
    let mut out = vec![Vec::new(); x.nrows()];
    let steps: Vec<usize> = if reverse {
        (0..x.nrows()).rev().collect()
    } else {
        (0..x.nrows()).collect()
    };
    for t in steps {
        let pre = |g: usize, u: usize| {
            let col = g * hd + u;
            b[[0, col]]
                + (0..x.ncols()).map(|k| x[[t, k]] * w_ih[[k, col]]).sum::<f64>()
                + (0..hd).map(|k| h[k] * w_hh[[k, col]]).sum::<f64>()
        };
        let gates: Vec<[f64; 4]> = (0..hd).map(|u| [pre(0, u), pre(1, u), pre(2, u), pre(3, u)]).collect();
        for (u, z) in gates.iter().enumerate() {
            c[u] = sig(z[1]) * c[u] + sig(z[0]) * z[2].tanh();
            h[u] = sig(z[3]) * c[u].tanh();
        }
        out[t] = h.clone();
    }
    out
}

fn criterion_3() -> Outcome {
    let mut worst = 0.0f64;
    for (n, d) in [(1, 2), (2, 4), (3, 6), (3, 8)] {
        let agent = PromptAgent::<f32>::new(AgentConfig {
            prompt_length: n,
            seed: 11 + n as u64,
            ..AgentConfig::new(d)
        })
        .unwrap();
        let table = param(&agent, "pseudo.embedding");
        let fwd = lstm(
            &table,
            &param(&agent, "encoder.forward.w_ih"),
            &param(&agent, "encoder.forward.w_hh"),
            &param(&agent, "encoder.forward.bias"),
            false,
        );
        let bwd = lstm(
            &table,
            &param(&agent, "encoder.backward.w_ih"),
            &param(&agent, "encoder.backward.w_hh"),
            &param(&agent, "encoder.backward.bias"),
            true,
        );
        let (w1, b1, w2, b2) = (
            param(&agent, "mlp.w1"),
            param(&agent, "mlp.b1"),
            param(&agent, "mlp.w2"),
            param(&agent, "mlp.b2"),
        );
        let ep = agent.encode_prompt(&PseudoPrompt::new(n).unwrap()).unwrap();
        if ep.dim() != (n, d) {
            return Err(format!("shape {:?} for n={n}, d={d}", ep.dim()));
        }
        for i in 0..n {
            let hcat: Vec<f64> = fwd[i].iter().chain(&bwd[i]).copied().collect();
            let hidden: Vec<f64> = (0..w1.ncols())
                .map(|j| (b1[[0, j]] + (0..d).map(|k| hcat[k] * w1[[k, j]]).sum::<f64>()).max(0.0))
                .collect();
            for j in 0..d {
                let want = b2[[0, j]] + (0..hidden.len()).map(|k| hidden[k] * w2[[k, j]]).sum::<f64>();
                worst = worst.max((f64::from(ep[[i, j]]) - want).abs());
            }
        }
    }
    check(worst <= 1e-5, format!("max elementwise difference {worst:.2e}"))
}

fn brute_matches(c: &[String], r: &[String], n: usize) -> (usize, usize) {
    if c.len() < n {
        return (0, 0);
    }
    let mut matched = 0;
    let mut seen: Vec<&[String]> = Vec::new();
    for i in 0..=c.len() - n {
        let g = &c[i..i + n];
        if seen.contains(&g) {
            continue;
        }
        seen.push(g);
        let in_c = (0..=c.len() - n).filter(|&k| &c[k..k + n] == g).count();
        let in_r = if r.len() >= n {
            (0..=r.len() - n).filter(|&k| &r[k..k + n] == g).count()
        } else {
            0
        };
        matched += in_c.min(in_r);
    }
    (matched, c.len() - n + 1)
}

fn brute_lcs(a: &[String], b: &[String]) -> usize {
    let mut best = 0;
    for mask in 0u32..(1 << a.len()) {
        let sub: Vec<&String> = (0..a.len()).filter(|i| mask & (1 << i) != 0).map(|i| &a[i]).collect();
        if sub.len() <= best {
            continue;
        }
        let mut it = b.iter();
        if sub.iter().all(|s| it.any(|t| t == *s)) {
            best = sub.len();
        }
    }
    best
}

fn criterion_4() -> Outcome {
    let words = ["a", "b", "c", "d", "e", "f"];
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut sentence = |max: usize| -> Vec<String> {
        let len = rng.random_range(1..=max);
        (0..len).map(|_| words[rng.random_range(0..words.len())].to_string()).collect()
    };
    let mut bleu_bad = 0;
    let mut rouge_bad = 0;
    for _ in 0..100 {
        let (c, r) = (sentence(12), sentence(12));
        let stats = NgramStats::of(&c, &r);
        for n in 1..=4 {
            if (stats.matches[n - 1], stats.totals[n - 1]) != brute_matches(&c, &r, n) {
                bleu_bad += 1;
            }
        }
        let (c, r) = (sentence(8), sentence(8));
        let l = brute_lcs(&c, &r);
        let want = if l == 0 {
            0.0
        } else {
            let p = l as f64 / c.len() as f64;
            let q = l as f64 / r.len() as f64;
            2.0 * p * q / (p + q)
        };
        if lcs_len(&c, &r) != l || rouge_l_tokens(&c, &r) != want {
            rouge_bad += 1;
        }
    }
    let mut meteor_err = 0.0f64;
    for len in 1..=20 {
        let s: Vec<String> = sentence(len).into_iter().cycle().take(len).collect();
        let want = 100.0 * (1.0 - 0.5 / (len as f64).powi(3));
        meteor_err = meteor_err.max((100.0 * meteor_tokens(&s, &s) - want).abs());
        meteor_err = meteor_err.max((sentence_meteor(&s.join(" "), &s.join(" ")) - want).abs());
    }
    check(
        bleu_bad == 0 && rouge_bad == 0 && meteor_err <= 1e-6,
        format!(
            "BLEU precision mismatches {bleu_bad}/400, ROUGE-L mismatches {rouge_bad}/100, METEOR identity error {meteor_err:.1e}"
        ),
    )
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    v[v.len() / 2]
}

fn criterion_5(fx: &Fixture) -> Outcome {
    let start = Instant::now();
    let test = &fx.splits.test;
    let codes: Vec<&str> = test.iter().map(|p| p.code.as_str()).collect();
    let refs: Vec<&str> = test.iter().map(|p| p.summary.as_str()).collect();
    let opts = decode_options();
    let score = |res: &SchemeResources<'_>| -> Result<f64, String> {
        let preds: Vec<String> = summarize_batch(&codes, res, &fx.vocab, &opts)
            .map_err(|e| e.to_string())?
            .into_iter()
            .map(|r| r.unwrap_or_default())
            .collect();
        bleu(&preds, &refs).map_err(|e| e.to_string())
    };
    let mut zero = Vec::new();
    let mut few = Vec::new();
    let mut agent_scores = Vec::new();
    for seed in 0..3u64 {
        let mut best_zero = f64::NEG_INFINITY;
        for template in [PromptTemplate::pi1(), PromptTemplate::pi2()] {
            best_zero = best_zero.max(score(&SchemeResources::Discrete {
                lm: &fx.lm,
                template,
                examples: Vec::new(),
            })?);
        }
        zero.push(best_zero);
        let examples = select_few_shot(&fx.splits.train, 10, seed).map_err(|e| e.to_string())?;
        few.push(score(&SchemeResources::Discrete {
            lm: &fx.lm,
            template: PromptTemplate::block(),
            examples,
        })?);
        let n = 10;
        let mut agent = PromptAgent::new(AgentConfig {
            prompt_length: n,
            seed,
            ..AgentConfig::new(fx.lm.d_model())
        })
        .unwrap();
        let cfg = agent_train_config(seed, 4);
        let budget = code_budget(512, n, cfg.summary_max_len, cfg.code_max_len);
        let examples = prepare_examples(&fx.splits.train, &fx.vocab, budget, cfg.summary_max_len);
        let mut validator = BleuValidator {
            pairs: &fx.splits.valid[..40],
            vocab: &fx.vocab,
            options: opts.clone(),
        };
        train(
            &mut TrainTarget::PromptAgent {
                lm: &fx.lm,
                agent: &mut agent,
            },
            &examples,
            &cfg,
            &mut validator,
            None,
        )
        .map_err(|e| e.to_string())?;
        agent_scores.push(score(&SchemeResources::PromptAgent { lm: &fx.lm, agent: &agent })?);
    }
    let (z, f, a) = (median(zero.clone()), median(few.clone()), median(agent_scores.clone()));
    let secs = start.elapsed().as_secs_f64() + fx.pretrain_seconds;
    check(
        a - f >= 1.0 && f - z >= 1.0 && secs <= 30.0 * 60.0,
        format!(
            "median BLEU prompt-agent {a:.2} {agent_scores:.2?}, few-shot {f:.2} {few:.2?}, zero-shot {z:.2} {zero:.2?}, {secs:.0}s with pretraining"
        ),
    )
}

/// Exact-match rate on a fixed pair list.
struct ExactMatch<'a> {
    pairs: &'a [CodeSummaryPair],
    vocab: &'a Vocabulary,
}

impl ExactMatch<'_> {
    fn rate(&self, lm: &LanguageModel<f32>, agent: &PromptAgent<f32>) -> f64 {
        let hits = self
            .pairs
            .iter()
            .filter(|p| {
                summarize_prompt_agent(&p.code, lm, agent, self.vocab, &decode_options())
                    .is_ok_and(|s| metric_tokens(&s) == metric_tokens(&p.summary))
            })
            .count();
        hits as f64 / self.pairs.len() as f64
    }
}

impl Validator for ExactMatch<'_> {
    fn validate(&mut self, target: &TrainTarget<'_>, _epoch: usize) -> Result<f64> {
        match target {
            TrainTarget::PromptAgent { lm, agent } => Ok(100.0 * self.rate(lm, agent)),
            TrainTarget::FineTune { .. } => Err(Error::Config("exact match needs an agent".into())),
        }
    }
}

fn criterion_6() -> Outcome {
    let pairs: Vec<CodeSummaryPair> = toy::java_corpus().into_iter().take(32).collect();
    let vocab = build_vocabulary(&pairs, 1, 5000).unwrap();
    let cfg = PretrainConfig {
        epochs: 120,
        batch_size: 8,
        ..Default::default()
    };
    let (mut lm, _) = pretrain_lm(&pairs, &vocab, &small_lm_config(vocab.len()), &cfg).map_err(|e| e.to_string())?;
    lm.freeze();
    let n = 10;
    let mut agent = PromptAgent::new(AgentConfig {
        prompt_length: n,
        seed: 6,
        ..AgentConfig::new(lm.d_model())
    })
    .unwrap();
    let tc = TrainConfig {
        batch_size: 8,
        learning_rate: 5e-3,
        ..agent_train_config(6, 200)
    };
    let budget = code_budget(512, n, tc.summary_max_len, tc.code_max_len);
    let examples = prepare_examples(&pairs, &vocab, budget, tc.summary_max_len);
    let mut validator = ExactMatch {
        pairs: &pairs,
        vocab: &vocab,
    };
    let report = train(
        &mut TrainTarget::PromptAgent {
            lm: &lm,
            agent: &mut agent,
        },
        &examples,
        &tc,
        &mut validator,
        None,
    )
    .map_err(|e| e.to_string())?;
    let best_loss = report.epoch_losses.iter().copied().fold(f64::INFINITY, f64::min);
    let exact = validator.rate(&lm, &agent);
    check(
        best_loss < 0.5 && exact >= 0.9 && report.stopping_epoch <= 200,
        format!(
            "lowest training loss {best_loss:.4}, exact match {:.1}% after restoring epoch {}",
            100.0 * exact,
            report.best_epoch
        ),
    )
}

fn criterion_7() -> Outcome {
    let mut lm = LanguageModel::<f32>::new(LmConfig {
        d_model: 8,
        n_layers: 1,
        n_heads: 2,
        d_ff: 16,
        vocab_size: 11,
        max_positions: 32,
        dropout: 0.0,
        seed: 0,
    })
    .unwrap();
    lm.freeze();
    let mut agent = PromptAgent::new(AgentConfig {
        prompt_length: 2,
        ..AgentConfig::new(8)
    })
    .unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let examples = random_batch(&mut rng, 11);
    let cfg = TrainConfig {
        learning_rate: 1e-2,
        patience: 4,
        max_epochs: 20,
        ..Default::default()
    };
    let mut validator = ScriptedValidator {
        scores: vec![10.0, 12.0, 12.0, 11.0, 12.0, 9.0, 30.0, 30.0],
    };
    let report = train(
        &mut TrainTarget::PromptAgent {
            lm: &lm,
            agent: &mut agent,
        },
        &examples,
        &cfg,
        &mut validator,
        None,
    )
    .map_err(|e| e.to_string())?;
    let restored = agent.parameter_checksum();
    check(
        report.stopping_epoch == 6
            && report.best_epoch == 2
            && restored == report.epoch_checksums[1]
            && restored != report.epoch_checksums[5],
        format!(
            "stopped after epoch {}, best epoch {}, restored checksum matches best: {}",
            report.stopping_epoch,
            report.best_epoch,
            restored == report.epoch_checksums[1]
        ),
    )
}

fn criterion_8() -> Outcome {
    let pairs = toy::java_corpus();
    let train_pairs = &pairs[..48];
    let vocab = build_vocabulary(&pairs, 1, 5000).unwrap();
    let mut lm = LanguageModel::<f32>::new(LmConfig::toy(vocab.len())).unwrap();
    lm.freeze();
    let mut medians = Vec::new();
    for n in [10, 100, 200] {
        let mut agent = PromptAgent::new(AgentConfig {
            prompt_length: n,
            ..AgentConfig::new(lm.d_model())
        })
        .unwrap();
        let cfg = agent_train_config(0, 3);
        let budget = code_budget(512, n, cfg.summary_max_len, cfg.code_max_len);
        let examples = prepare_examples(train_pairs, &vocab, budget, cfg.summary_max_len);
        let report = train(
            &mut TrainTarget::PromptAgent {
                lm: &lm,
                agent: &mut agent,
            },
            &examples,
            &cfg,
            &mut ScriptedValidator { scores: vec![0.0; 3] },
            None,
        )
        .map_err(|e| e.to_string())?;
        medians.push((n, median(report.epoch_seconds)));
    }
    let monotone = medians.windows(2).all(|w| w[1].1 >= w[0].1);
    check(monotone, format!("median seconds per epoch {medians:.3?}"))
}

fn criterion_9(fx: &Fixture) -> Outcome {
    let spec = GridSpec {
        prompt_lengths: vec![10, 50, 100],
        fusion_modes: FusionMode::ALL.to_vec(),
        train_sizes: vec![Some(128)],
        ..Default::default()
    };
    let grid = ExperimentGrid::expand(&spec).map_err(|e| e.to_string())?;
    let out = tempfile::tempdir().unwrap();
    let embedder = HashedBagEmbedder::default();
    let res = GridResources {
        lm: &fx.lm,
        vocab: &fx.vocab,
        corpora: BTreeMap::from([("java".to_string(), fx.splits.clone())]),
        train: agent_train_config(0, 2),
        decode: decode_options(),
        few_shot_k: 10,
        valid_limit: Some(16),
        test_limit: Some(48),
        results_dir: Some(out.path().join("runs")),
        workers: 1,
        embedder: &embedder,
    };
    let outcome = run_grid(&grid, &res).map_err(|e| e.to_string())?;
    let report = emit_report(&outcome.records, &outcome.failures, Some(&out.path().join("report"))).map_err(|e| e.to_string())?;
    let rows = report.fusion_table.lines().skip(2).count();
    let bleus: Vec<f64> = outcome.records.iter().map(|r| r.metrics.bleu).collect();
    let spread = bleus.iter().copied().fold(f64::NEG_INFINITY, f64::max) - bleus.iter().copied().fold(f64::INFINITY, f64::min);
    if spread > 3.0 {
        say!("warning: fusion grid BLEU values spread over {spread:.2} points {bleus:.2?}");
    }
    let files_ok = out.path().join("report/fusion.md").exists();
    check(
        outcome.records.len() == 9 && outcome.failures.is_empty() && rows == 3 && files_ok,
        format!(
            "{} records, {} failures, fusion table rows {rows}, BLEU spread {spread:.2}",
            outcome.records.len(),
            outcome.failures.len()
        ),
    )
}

fn criterion_10(fx: &Fixture) -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let lm_path = dir.path().join("lm.ckpt");
    fx.lm.save(&lm_path, &fx.vocab).map_err(|e| e.to_string())?;
    let (lm2, vocab2) = LanguageModel::load(&lm_path).map_err(|e| e.to_string())?;
    let ids = fx.vocab.encode(&fx.splits.test[0].code);
    let x1 = fx.lm.embed(&ids).unwrap();
    let x2 = lm2.embed(&ids).unwrap();
    let l1 = fx.lm.forward(x1.view(), None).unwrap();
    let l2 = lm2.forward(x2.view(), None).unwrap();
    let lm_same = l1.iter().zip(&l2).all(|(a, b)| a.to_bits() == b.to_bits()) && vocab2 == fx.vocab;

    let agent = PromptAgent::new(AgentConfig {
        prompt_length: 7,
        fusion: FusionMode::TwoEnd,
        seed: 10,
        ..AgentConfig::new(fx.lm.d_model())
    })
    .unwrap();
    let agent_path = dir.path().join("agent.ckpt");
    save_agent(&agent, &agent_path).map_err(|e| e.to_string())?;
    let agent2 = load_agent(&agent_path, &lm2).map_err(|e| e.to_string())?;
    let e1 = agent.prompt_embedding();
    let e2 = agent2.prompt_embedding();
    let agent_same = e1.iter().zip(&e2).all(|(a, b)| a.to_bits() == b.to_bits()) && agent2.fusion() == FusionMode::TwoEnd;
    check(lm_same && agent_same, format!("LM logits bitwise equal: {lm_same}, prompt embedding bitwise equal: {agent_same}"))
}

type Criterion<'a> = Box<dyn Fn() -> Outcome + 'a>;

#[test]
fn acceptance() {
    let only: Option<Vec<usize>> = std::env::var("ACCEPTANCE_CRITERIA")
        .ok()
        .map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let wanted = |k: usize| only.as_ref().is_none_or(|o| o.contains(&k));
    let fixture = [1, 5, 9, 10].iter().any(|&k| wanted(k)).then(Fixture::build);
    let fx = || fixture.as_ref().unwrap();
    let criteria: Vec<(usize, &str, Criterion<'_>)> = vec![
        (1, "frozen backbone", Box::new(|| criterion_1(fx()))),
        (2, "gradient check", Box::new(criterion_2)),
        (3, "prompt encoder oracle", Box::new(criterion_3)),
        (4, "metric oracles", Box::new(criterion_4)),
        (5, "scheme ordering", Box::new(|| criterion_5(fx()))),
        (6, "overfit steering", Box::new(criterion_6)),
        (7, "early stopping", Box::new(criterion_7)),
        (8, "epoch time vs prompt length", Box::new(criterion_8)),
        (9, "fusion grid", Box::new(|| criterion_9(fx()))),
        (10, "checkpoint round trip", Box::new(|| criterion_10(fx()))),
    ];
    let mut failed = Vec::new();
    for (k, name, run) in &criteria {
        if !wanted(*k) {
            say!("criterion {k:>2} ({name}): SKIPPED");
            continue;
        }
        let start = Instant::now();
        let outcome = run();
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => say!("criterion {k:>2} ({name}): PASS [{secs:.1}s] {detail}"),
            Err(detail) => {
                say!("criterion {k:>2} ({name}): FAIL [{secs:.1}s] {detail}");
                failed.push(*k);
            }
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
