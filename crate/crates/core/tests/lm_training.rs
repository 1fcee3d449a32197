use ndarray::{array, Array2};

use neglm::corpus::{Vocabulary, Window};
use neglm::encoder::{Activation, Dropout, EncoderSpec};
use neglm::lm::{train, LanguageModel, Mode};
use neglm::model_file;
use neglm::numeric::sigmoid;
use neglm::optim::{OptimizerKind, TrainConfig};
use neglm::sampling::seeded_rng;
use neglm::synthetic::BigramChain;
use neglm::Error;

fn bigram_data(tokens: usize) -> (Vocabulary, Vec<usize>, Vec<usize>) {
    let chain = BigramChain::random_low_rank(12, 2, 1.0, 4).unwrap();
    let train_text = BigramChain::render(&chain.generate(&mut seeded_rng(4, 1), tokens));
    let valid_text = BigramChain::render(&chain.generate(&mut seeded_rng(4, 2), tokens / 5));
    let vocab = Vocabulary::build(&train_text, None, None).unwrap();
    let (t, v) = (vocab.encode(&train_text), vocab.encode(&valid_text));
    (vocab, t, v)
}

fn small_config(seed: u64) -> TrainConfig {
    TrainConfig {
        optimizer: OptimizerKind::AdaptiveMoments,
        lr: 0.01,
        epochs: 2,
        batch_size: 4,
        unroll: 5,
        k: 3,
        seed,
        ..TrainConfig::default()
    }
}

#[test]
fn same_seed_gives_bit_identical_parameters() {
    let (vocab, t, v) = bigram_data(3000);
    let spec = EncoderSpec::lstm(6, 6, 1).with_dropout(0.2);
    let a = train(
        &vocab,
        &t,
        &v,
        spec.clone(),
        &small_config(3),
        Mode::Neglm,
        |_| {},
    )
    .unwrap();
    let b = train(
        &vocab,
        &t,
        &v,
        spec.clone(),
        &small_config(3),
        Mode::Neglm,
        |_| {},
    )
    .unwrap();
    assert_eq!(a.last.params, b.last.params);
    let lines =
        |h: &[neglm::lm::EpochRecord]| h.iter().map(|r| r.metrics_line()).collect::<Vec<_>>();
    assert_eq!(lines(&a.history), lines(&b.history));
    let c = train(&vocab, &t, &v, spec, &small_config(4), Mode::Neglm, |_| {}).unwrap();
    assert_ne!(a.last.params, c.last.params);
}

#[test]
fn training_reduces_validation_perplexity() {
    let (vocab, t, v) = bigram_data(6000);
    for mode in Mode::ALL {
        let init = LanguageModel::new(
            vocab.clone(),
            EncoderSpec::window(8, 8, 1),
            mode,
            &small_config(1),
        )
        .unwrap();
        let before = init.perplexity(&v).unwrap().perplexity;
        let cfg = TrainConfig {
            epochs: 4,
            ..small_config(1)
        };
        let out = train(
            &vocab,
            &t,
            &v,
            EncoderSpec::window(8, 8, 1),
            &cfg,
            mode,
            |_| {},
        )
        .unwrap();
        let after = out.best.perplexity(&v).unwrap().perplexity;
        assert!(after < before, "{mode}: {before} -> {after}");
        assert_eq!(out.history.len(), 4);
        let best = out
            .history
            .iter()
            .map(|r| r.valid_perplexity)
            .fold(f64::INFINITY, f64::min);
        assert_eq!(out.history[out.best_epoch - 1].valid_perplexity, best);
    }
}

#[test]
fn uniform_model_has_vocabulary_perplexity() {
    let text = "a b c d e f g h\n";
    let vocab = Vocabulary::build(text, None, None).unwrap();
    assert_eq!(vocab.len(), 10);
    let mut model = LanguageModel::new(
        vocab,
        EncoderSpec::lstm(3, 3, 1),
        Mode::Neg,
        &TrainConfig::default(),
    )
    .unwrap();
    model.params.word_table.fill(0.0);
    let ids = model.vocab.encode(&text.repeat(5));
    let ppl = model.perplexity(&ids).unwrap();
    assert!((ppl.perplexity - 10.0).abs() < 1e-9);
    assert_eq!(ppl.tokens, ids.len() - 1);
    assert!(matches!(model.perplexity(&ids[..1]), Err(Error::Empty(_))));
}

#[test]
fn hand_computed_single_position_loss() {
    // Identity window encoder over the previous token's embedding, k = 1.
    let vocab = Vocabulary::from_parts(
        vec!["<eos>".into(), "<unk>".into(), "a".into()],
        vec![1, 1, 2],
    )
    .unwrap();
    let cfg = TrainConfig {
        k: 1,
        ..TrainConfig::default()
    };
    let spec = EncoderSpec::window(2, 2, 1).with_activation(Activation::Identity);
    let mut m = LanguageModel::new(vocab, spec, Mode::Neg, &cfg).unwrap();
    m.params.input_table = array![[0.0, 0.0], [0.0, 0.0], [1.0, 2.0]];
    if let neglm::encoder::EncoderParams::Window(w) = &mut m.params.encoder.params {
        w.proj = Array2::eye(2);
        w.bias.fill(0.0);
    }
    m.params.word_table = array![[0.5, -1.0], [0.0, 0.0], [0.25, 0.25]];
    let window = Window {
        inputs: vec![vec![2]],
        targets: vec![vec![0]],
    };
    let negatives = vec![vec![vec![2]]];
    let mut state = m.params.encoder.new_state(1);
    let (loss, _) = m
        .batch_loss(&window, &negatives, &mut state, &mut Dropout::Off)
        .unwrap();
    // c = (1, 2): positive logit 0.5 - 2 = -1.5, negative logit 0.25 + 0.5 = 0.75.
    let expected = -sigmoid(-1.5).ln() - sigmoid(-0.75).ln();
    assert!((loss - expected).abs() < 1e-14, "{loss} vs {expected}");
}

#[test]
fn hand_built_three_word_softmax() {
    let vocab = Vocabulary::from_parts(
        vec!["<eos>".into(), "<unk>".into(), "a".into()],
        vec![1, 1, 2],
    )
    .unwrap();
    let cfg = TrainConfig {
        alpha: 1.0,
        ..TrainConfig::default()
    };
    let mut m =
        LanguageModel::new(vocab, EncoderSpec::window(1, 1, 1), Mode::NeglmB, &cfg).unwrap();
    m.params.word_table = array![[1.0], [0.0], [-1.0]];
    m.params.bias = array![0.1, 0.2, 0.3];
    let c = array![2.0];
    // scores: w·c + b + log p(w), p = (1/4, 1/4, 1/2)
    let s = [2.1 + 0.25f64.ln(), 0.2 + 0.25f64.ln(), -1.7 + 0.5f64.ln()];
    let z: f64 = s.iter().map(|v| v.exp()).sum();
    let lp = m.conditional_log_probs(c.view());
    for (a, b) in lp.iter().zip(s) {
        assert!((a - (b - z.ln())).abs() < 1e-14);
    }
}

#[test]
fn saved_model_evaluates_identically() {
    let (vocab, t, v) = bigram_data(2000);
    let out = train(
        &vocab,
        &t,
        &v,
        EncoderSpec::lstm(5, 5, 2),
        &small_config(2),
        Mode::Nce,
        |_| {},
    )
    .unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.negf");
    model_file::save_lm(&out.best, &path).unwrap();
    let loaded = model_file::load_lm(&path).unwrap();
    assert_eq!(loaded, out.best);
    for mode in Mode::ALL {
        let a = out.best.perplexity_as(&v, mode).unwrap();
        let b = loaded.perplexity_as(&v, mode).unwrap();
        assert_eq!(a.perplexity.to_bits(), b.perplexity.to_bits());
    }
}

#[test]
fn non_finite_loss_aborts_with_checkpoint() {
    let (vocab, t, v) = bigram_data(2000);
    let cfg = TrainConfig {
        optimizer: OptimizerKind::SgdDecay,
        lr: 1e308,
        clip_norm: 1e308,
        epochs: 3,
        ..small_config(1)
    };
    match train(
        &vocab,
        &t,
        &v,
        EncoderSpec::window(4, 4, 1),
        &cfg,
        Mode::Neg,
        |_| {},
    ) {
        Err(Error::NumericalAbort { checkpoint, .. }) => {
            let model = checkpoint.expect("checkpoint");
            assert!(model.params.word_table.iter().all(|x| x.is_finite()));
        }
        other => panic!("expected abort, got {:?}", other.map(|o| o.history)),
    }
}

#[test]
fn insufficient_tokens_is_an_error() {
    let (vocab, t, v) = bigram_data(2000);
    let cfg = TrainConfig {
        batch_size: 1000,
        ..small_config(1)
    };
    assert!(train(
        &vocab,
        &t[..50],
        &v,
        EncoderSpec::window(4, 4, 1),
        &cfg,
        Mode::Neg,
        |_| {}
    )
    .is_err());
}
