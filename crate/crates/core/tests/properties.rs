use ndarray::{Array1, Array2};
use proptest::prelude::*;

use neglm::corpus::{BatchPlan, Vocabulary};
use neglm::distlab::{kl_gap, optimal_score, score, JointDistribution, ScoreConfig};
use neglm::encoder::EncoderSpec;
use neglm::lm::{rank_augment_check, LanguageModel, Mode};
use neglm::model_file;
use neglm::numeric::log_sum_exp;
use neglm::optim::{clip_global_norm, ParamBlocks, TrainConfig};
use neglm::sampling::{seeded_rng, NoiseDistribution};

fn joint(max: usize) -> impl Strategy<Value = JointDistribution> {
    (1..=max, 1..=max)
        .prop_flat_map(|(r, c)| {
            prop::collection::vec(prop_oneof![3 => 0.01f64..1.0, 1 => Just(0.0)], r * c)
                .prop_map(move |v| (r, c, v))
        })
        .prop_filter_map("needs mass", |(r, c, v)| {
            let total: f64 = v.iter().sum();
            if total == 0.0 {
                return None;
            }
            let mut p = Array2::from_shape_vec((r, c), v).unwrap() / total;
            let again = p.sum();
            p /= again;
            JointDistribution::new(p).ok()
        })
}

fn vocab(n: usize) -> Vocabulary {
    let mut tokens = vec!["<eos>".to_string(), "<unk>".to_string()];
    tokens.extend((2..n).map(|i| format!("w{i}")));
    Vocabulary::from_parts(tokens, (1..=n as u64).collect()).unwrap()
}

fn random_model(mode: Mode, n: usize, d: usize, alpha: f64, seed: u64) -> LanguageModel {
    let cfg = TrainConfig {
        k: 5,
        alpha,
        seed,
        ..TrainConfig::default()
    };
    let mut m = LanguageModel::new(vocab(n), EncoderSpec::window(d, d, 1), mode, &cfg).unwrap();
    let mut rng = seeded_rng(seed, 99);
    for b in m.params.blocks_mut() {
        b.iter_mut()
            .for_each(|v| *v = rand::Rng::gen_range(&mut rng, -2.0..2.0));
    }
    m
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn score_gap_equals_conditional_kl(dist in joint(6), k in 1u32..20, seed in any::<u64>()) {
        let cfg = ScoreConfig::new(k).unwrap();
        let mut rng = seeded_rng(seed, 0);
        let m = Array2::from_shape_fn((dist.n_x(), dist.n_y()), |_| rand::Rng::gen_range(&mut rng, -6.0..6.0));
        let gap = optimal_score(&dist, cfg) - score(&dist, cfg, &m).unwrap();
        let kl = kl_gap(&dist, cfg, &m).unwrap();
        prop_assert!((gap - kl).abs() <= 1e-10, "gap {gap} kl {kl}");
        prop_assert!(kl >= -1e-15);
    }

    #[test]
    fn conditional_log_probs_normalize(mode_ix in 0usize..4, n in 3usize..30, d in 1usize..6, alpha in 0.0f64..=1.0, seed in any::<u64>()) {
        let model = random_model(Mode::ALL[mode_ix], n, d, alpha, seed);
        let c = Array1::from_shape_fn(d, |i| (i as f64 * 0.7 + seed as f64 * 1e-20).sin());
        for mode in Mode::ALL {
            let lp = model.conditional_log_probs_as(c.view(), mode);
            prop_assert!(log_sum_exp(&lp).abs() <= 1e-10);
        }
    }

    #[test]
    fn neglm_is_neg_times_unigram(n in 3usize..30, d in 1usize..6, alpha in 0.0f64..=1.0, seed in any::<u64>()) {
        let model = random_model(Mode::Neg, n, d, alpha, seed);
        let c = Array1::from_shape_fn(d, |i| ((i + 1) as f64).cos());
        let neg = model.conditional_log_probs_as(c.view(), Mode::Neg);
        let neglm = model.conditional_log_probs_as(c.view(), Mode::Neglm);
        let unnorm: Vec<f64> = neg.iter().zip(model.noise.probs()).map(|(l, p)| l.exp() * p).collect();
        let z: f64 = unnorm.iter().sum();
        for (u, l) in unnorm.iter().zip(&neglm) {
            prop_assert!((u / z - l.exp()).abs() <= 1e-12);
        }
    }

    #[test]
    fn nce_with_noise_cancelling_bias_matches_neg(n in 3usize..20, d in 1usize..6, seed in any::<u64>()) {
        let mut nce = random_model(Mode::Nce, n, d, 0.0, seed);
        let mut neg = nce.clone();
        neg.mode = Mode::Neg;
        nce.nce_log_z = 0.0;
        for w in 0..n {
            nce.params.bias[w] = (nce.k as f64 * nce.noise.prob(w)).ln();
        }
        let c = Array1::from_shape_fn(d, |i| (i as f64 - 1.5) * 0.3);
        for w in 0..n {
            let a = nce.classifier_logit(w, c.view()).unwrap();
            let b = neg.classifier_logit(w, c.view()).unwrap();
            prop_assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn rank_augmentation_holds(n in 3usize..15, d in 1usize..6, seed in any::<u64>()) {
        let model = random_model(Mode::Nce, n, d, 0.75, seed);
        let mut rng = seeded_rng(seed, 5);
        let contexts = Array2::from_shape_fn((5, d), |_| rand::Rng::gen_range(&mut rng, -1.0..1.0));
        prop_assert!(rank_augment_check(&model, contexts.view()).unwrap());
    }

    #[test]
    fn clipping_bounds_global_norm(values in prop::collection::vec(-1e6f64..1e6, 1..200), max in 1e-3f64..100.0) {
        struct Flat(Vec<f64>);
        impl ParamBlocks for Flat {
            fn blocks(&self) -> Vec<&[f64]> { vec![&self.0] }
            fn blocks_mut(&mut self) -> Vec<&mut [f64]> { vec![&mut self.0] }
        }
        let mut g = Flat(values);
        clip_global_norm(&mut g, max);
        prop_assert!(g.global_norm() <= max + 1e-9);
    }

    #[test]
    fn alias_table_reconstructs(counts in prop::collection::vec(0u32..1000, 1..300), alpha in 0.0f64..=1.0) {
        let counts: Vec<f64> = counts.into_iter().map(f64::from).collect();
        prop_assume!(counts.iter().any(|&c| c > 0.0));
        let noise = NoiseDistribution::from_counts(&counts, alpha).unwrap();
        for (r, p) in noise.reconstructed_probs().iter().zip(noise.probs()) {
            prop_assert!((r - p).abs() <= 1e-12);
        }
    }

    #[test]
    fn batch_plan_reconstructs_streams(len in 20usize..400, batch in 1usize..6, unroll in 1usize..8) {
        let ids: Vec<usize> = (0..len).collect();
        prop_assume!(len >= batch * (unroll + 1));
        let plan = BatchPlan::new(&ids, batch, unroll).unwrap();
        let stream_len = len / batch;
        prop_assert_eq!(plan.tokens_used(), batch * stream_len);
        prop_assert_eq!(plan.dropped_tokens(), len - batch * stream_len);
        let windows = plan.windows();
        for lane in 0..batch {
            let mut rebuilt = vec![windows[0].inputs[lane][0]];
            for w in &windows {
                rebuilt.extend(&w.targets[lane]);
            }
            prop_assert_eq!(&rebuilt[..], &plan.streams()[lane][..]);
        }
    }

    #[test]
    fn vocabulary_round_trip(words in prop::collection::vec("[a-e]{1,3}", 1..60), width in 1usize..8) {
        let text: String = words.chunks(width).map(|c| c.join(" ") + "\n").collect();
        let vocab = Vocabulary::build(&text, None, None).unwrap();
        let ids = vocab.encode(&text);
        prop_assert_eq!(vocab.decode(&ids), text);
        let mut buf = Vec::new();
        vocab.write_tsv(&mut buf).unwrap();
        prop_assert_eq!(Vocabulary::read_tsv(&buf[..]).unwrap(), vocab);
    }

    #[test]
    fn model_file_round_trip(mode_ix in 0usize..4, n in 3usize..12, d in 1usize..5, seed in any::<u64>(), flip in any::<prop::sample::Index>()) {
        let model = random_model(Mode::ALL[mode_ix], n, d, 0.5, seed);
        let bytes = model_file::encode_lm(&model);
        match model_file::decode(&bytes).unwrap() {
            model_file::StoredModel::Lm(back) => prop_assert_eq!(*back, model),
            _ => prop_assert!(false, "wrong kind"),
        }
        let mut bad = bytes.clone();
        let i = flip.index(bad.len());
        bad[i] ^= 0x10;
        prop_assert!(model_file::decode(&bad).is_err());
    }
}
