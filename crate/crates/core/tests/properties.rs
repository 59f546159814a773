use ndarray::Array2;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use softprompt::corpus::{BOS, PAD, SPECIAL_TOKENS};
use softprompt::generate::argmax;
use softprompt::metrics::{lcs_len, meteor_tokens, rouge_l_tokens, sentence_bleu, sentence_meteor, sentence_rouge_l};
use softprompt::{cross_entropy_loss, fuse, tokenize, FusionMode, LanguageModel, LmConfig, Vocabulary};

fn words() -> impl Strategy<Value = Vec<String>> {
    prop::collection::vec("[a-f]{1,3}", 1..14)
}

fn small_lm(seed: u64) -> LanguageModel<f64> {
    let mut cfg = LmConfig::toy(13);
    cfg.d_model = 8;
    cfg.n_heads = 2;
    cfg.n_layers = 2;
    cfg.d_ff = 16;
    cfg.max_positions = 16;
    cfg.seed = seed;
    LanguageModel::new(cfg).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn scores_stay_in_range(c in words(), r in words()) {
        let (c, r) = (c.join(" "), r.join(" "));
        for s in [sentence_bleu(&c, &r), sentence_meteor(&c, &r), sentence_rouge_l(&c, &r)] {
            prop_assert!((0.0..=100.0).contains(&s), "{s}");
        }
    }

    #[test]
    fn renaming_tokens_changes_no_score(c in words(), r in words()) {
        let rename = |ws: &[String]| ws.iter().map(|w| format!("z{}q", w.to_uppercase())).collect::<Vec<_>>().join(" ");
        let (c0, r0) = (c.join(" "), r.join(" "));
        let (c1, r1) = (rename(&c), rename(&r));
        prop_assert_eq!(sentence_bleu(&c0, &r0), sentence_bleu(&c1, &r1));
        prop_assert_eq!(sentence_meteor(&c0, &r0), sentence_meteor(&c1, &r1));
        prop_assert_eq!(sentence_rouge_l(&c0, &r0), sentence_rouge_l(&c1, &r1));
    }

    #[test]
    fn appending_a_reference_token_never_lowers_lcs(c in words(), r in words(), pick in any::<prop::sample::Index>()) {
        let mut longer = c.clone();
        longer.push(r[pick.index(r.len())].clone());
        prop_assert!(lcs_len(&longer, &r) >= lcs_len(&c, &r));
    }

    #[test]
    fn identical_sentences_meet_the_identity_bound(c in prop::collection::vec("[a-f]{1,3}", 8..30)) {
        let l = c.len() as f64;
        prop_assert!((100.0 * meteor_tokens(&c, &c) - 100.0 * (1.0 - 0.5 / l.powi(3))).abs() < 1e-9);
        prop_assert!((100.0 * rouge_l_tokens(&c, &c) - 100.0).abs() < 1e-9);
        prop_assert!(100.0 - 100.0 * meteor_tokens(&c, &c) <= 0.5);
    }

    #[test]
    fn tokenized_ids_fit_the_vocabulary(text in "[a-h (){};]{0,50}", max_len in 1usize..24, wrap in any::<bool>()) {
        let tokens = SPECIAL_TOKENS.iter().chain(&["a", "b", "c", "(", ")"]).map(|s| s.to_string()).collect();
        let vocab = Vocabulary::from_tokens(tokens).unwrap();
        let seq = tokenize(&text, &vocab, max_len, wrap);
        prop_assert_eq!(seq.ids.len(), max_len);
        prop_assert!(seq.ids.iter().all(|&id| (id as usize) < vocab.len()));
        let content = seq.content().len();
        prop_assert!(seq.ids[content..].iter().all(|&id| id == PAD));
    }

    #[test]
    fn argmax_never_emits_pad_or_bos(logits in prop::collection::vec(-5.0f64..5.0, 4..20)) {
        let id = argmax(&logits);
        prop_assert!(id != PAD && id != BOS);
        prop_assert!(logits.iter().skip(2).all(|&v| v <= logits[id as usize]));
    }

    #[test]
    fn masked_targets_do_not_change_the_loss(seed in any::<u64>(), rows in 1usize..8, swap in 0u32..13) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let logits = Array2::from_shape_fn((rows, 13), |_| rng.random_range(-3.0..3.0f64));
        let targets: Vec<u32> = (0..rows).map(|_| rng.random_range(0..13)).collect();
        let mask: Vec<bool> = (0..rows).map(|i| i == 0 || rng.random_bool(0.5)).collect();
        let mut altered = targets.clone();
        for (t, &m) in altered.iter_mut().zip(&mask) {
            if !m {
                *t = swap;
            }
        }
        let a = cross_entropy_loss(logits.view(), &targets, &mask).unwrap();
        let b = cross_entropy_loss(logits.view(), &altered, &mask).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn fusion_never_touches_the_code_rows(n in 1usize..8, len in 1usize..8, mode in prop::sample::select(FusionMode::ALL.to_vec()), seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = Array2::from_shape_fn((n, 4), |_| rng.random::<f32>());
        let c = Array2::from_shape_fn((len, 4), |_| rng.random::<f32>());
        let f = fuse(p.view(), c.view(), mode).unwrap();
        prop_assert_eq!(f.code_segment(), c.view());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn later_positions_never_reach_earlier_logits(seed in any::<u64>(), len in 2usize..10, at in any::<prop::sample::Index>()) {
        let lm = small_lm(seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 1);
        let ids: Vec<u32> = (0..len).map(|_| rng.random_range(0..13)).collect();
        let j = at.index(len);
        let mut x = lm.embed(&ids).unwrap();
        let base = lm.forward(x.view(), None).unwrap();
        x.row_mut(j).mapv_inplace(|v| v + 0.7);
        let moved = lm.forward(x.view(), None).unwrap();
        for i in 0..j {
            prop_assert_eq!(base.row(i), moved.row(i));
        }
        prop_assert!(base.row(j) != moved.row(j));
    }
}
