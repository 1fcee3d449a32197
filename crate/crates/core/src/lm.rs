//! Unnormalized language models trained with sampled binary classification.
//!
//! All four estimators share the word table `w⃗`, the context encoder `c⃗` and
//! the training loop; they differ in the classifier logit used for training
//! and in the scores fed to the test-time softmax:
//!
//! | mode     | training logit                          | test scores                 |
//! |----------|-----------------------------------------|-----------------------------|
//! | NCE      | `w⃗·c⃗ + b_w - log Z_c - log(k p_n(w))`  | `w⃗·c⃗ + b_w`                |
//! | NEG      | `w⃗·c⃗`                                  | `w⃗·c⃗`                      |
//! | NEGLM    | `w⃗·c⃗`                                  | `w⃗·c⃗ + log p^α(w)`         |
//! | NEGLM-B  | `w⃗·c⃗ + b_w`                            | `w⃗·c⃗ + b_w + log p^α(w)`   |
//!
//! `Z_c` is a constant (`log Z_c = 0` by default). Evaluation always uses the
//! exact softmax over the whole vocabulary.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use sha2::{Digest, Sha256};

use crate::corpus::{BatchPlan, Vocabulary, Window, EOS, UNK};
use crate::encoder::{
    Dropout, Encoder, EncoderKind, EncoderSpec, EncoderState, GradCheckReport, DROPOUT_PLACEMENT,
    FD_FLOOR, FD_STEP, INIT_SCALE,
};
use crate::error::{Error, Result};
use crate::numeric::{log_sigmoid, log_softmax_in_place, log_sum_exp, max_relative_error, sigmoid};
use crate::optim::{clip_global_norm, Optimizer, ParamBlocks, TrainConfig};
use crate::sampling::{seeded_rng, NoiseDistribution, SeededRng, RNG_ALGORITHM};

const STREAM_INIT: u64 = 0;
const STREAM_NEGATIVES: u64 = 1;
const STREAM_DROPOUT: u64 = 2;

/// Tolerance for [`rank_augment_check`].
pub const AUGMENT_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Mode {
    Nce,
    Neg,
    Neglm,
    NeglmB,
}

impl Mode {
    pub const ALL: [Mode; 4] = [Mode::Nce, Mode::Neg, Mode::Neglm, Mode::NeglmB];

    /// Whether the per-word bias enters the logit and is trained.
    pub fn uses_bias(self) -> bool {
        matches!(self, Mode::Nce | Mode::NeglmB)
    }

    /// Whether test-time scores are multiplied by the smoothed unigram.
    pub fn uses_unigram_at_test(self) -> bool {
        matches!(self, Mode::Neglm | Mode::NeglmB)
    }

    pub fn initial_bias(self, vocab_size: usize) -> f64 {
        match self {
            Mode::Nce => -(vocab_size as f64).ln(),
            _ => 0.0,
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Nce => "nce",
            Mode::Neg => "neg",
            Mode::Neglm => "neglm",
            Mode::NeglmB => "neglm-b",
        })
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "nce" => Ok(Mode::Nce),
            "neg" => Ok(Mode::Neg),
            "neglm" => Ok(Mode::Neglm),
            "neglm-b" | "neglm_b" => Ok(Mode::NeglmB),
            other => Err(Error::InvalidArgument(format!("unknown mode {other:?}"))),
        }
    }
}

/// Trainable parameters; also used as the gradient buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct LmParams {
    /// Context-side lookup table, `|V| × input_dim`.
    pub input_table: Array2<f64>,
    /// Predicted-word table `w⃗`, `|V| × hidden_dim`.
    pub word_table: Array2<f64>,
    pub bias: Array1<f64>,
    pub encoder: Encoder,
}

impl LmParams {
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.zero();
        z
    }

    /// Block names in [`ParamBlocks`] order.
    pub fn block_names(&self) -> Vec<String> {
        let mut names = vec![
            "input_table".to_string(),
            "word_table".into(),
            "bias".into(),
        ];
        names.extend(self.encoder.params.block_names());
        names
    }
}

impl ParamBlocks for LmParams {
    fn blocks(&self) -> Vec<&[f64]> {
        let mut b = vec![
            self.input_table.as_slice().unwrap(),
            self.word_table.as_slice().unwrap(),
            self.bias.as_slice().unwrap(),
        ];
        b.extend(self.encoder.params.blocks());
        b
    }

    fn blocks_mut(&mut self) -> Vec<&mut [f64]> {
        let mut b = vec![
            self.input_table.as_slice_mut().unwrap(),
            self.word_table.as_slice_mut().unwrap(),
            self.bias.as_slice_mut().unwrap(),
        ];
        b.extend(self.encoder.params.blocks_mut());
        b
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelMetadata {
    pub seed: u64,
    pub config_hash: String,
    pub rng: String,
    pub dropout_placement: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LanguageModel {
    pub vocab: Vocabulary,
    pub params: LmParams,
    pub mode: Mode,
    pub noise: NoiseDistribution,
    pub k: usize,
    /// Constant `log Z_c` in the NCE logit.
    pub nce_log_z: f64,
    pub metadata: ModelMetadata,
}

impl LanguageModel {
    /// Fresh model: tables and encoder uniform in `[-0.05, 0.05]`, bias per mode.
    pub fn new(
        vocab: Vocabulary,
        spec: EncoderSpec,
        mode: Mode,
        cfg: &TrainConfig,
    ) -> Result<Self> {
        spec.validate()?;
        let n = vocab.len();
        let noise = NoiseDistribution::from_counts(&vocab.unigram_counts(), cfg.alpha)?;
        let mut rng = seeded_rng(cfg.seed, STREAM_INIT);
        let mut uniform = |r: usize, c: usize| {
            Array2::from_shape_fn((r, c), |_| rng.gen_range(-INIT_SCALE..=INIT_SCALE))
        };
        let input_table = uniform(n, spec.input_dim);
        let word_table = uniform(n, spec.hidden_dim);
        let encoder = Encoder::init(spec, &mut rng)?;
        let params = LmParams {
            input_table,
            word_table,
            bias: Array1::from_elem(n, mode.initial_bias(n)),
            encoder,
        };
        Ok(LanguageModel {
            vocab,
            params,
            mode,
            noise,
            k: cfg.k,
            nce_log_z: cfg.nce_log_z,
            metadata: ModelMetadata {
                seed: cfg.seed,
                config_hash: String::new(),
                rng: RNG_ALGORITHM.to_string(),
                dropout_placement: DROPOUT_PLACEMENT.to_string(),
            },
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    pub fn spec(&self) -> &EncoderSpec {
        &self.params.encoder.spec
    }

    pub fn alpha(&self) -> f64 {
        self.noise.alpha()
    }

    /// Additive term of the training logit beyond `w⃗·c⃗`.
    fn logit_offset(&self, w: usize) -> f64 {
        match self.mode {
            Mode::Nce => {
                self.params.bias[w] - self.nce_log_z - (self.k as f64 * self.noise.prob(w)).ln()
            }
            Mode::Neg | Mode::Neglm => 0.0,
            Mode::NeglmB => self.params.bias[w],
        }
    }

    /// Training-time classifier logit for word `w` in context `c`.
    pub fn classifier_logit(&self, w: usize, c: ArrayView1<f64>) -> Result<f64> {
        if w >= self.vocab_size() {
            return Err(Error::InvalidArgument(format!(
                "word id {w} outside vocabulary of {}",
                self.vocab_size()
            )));
        }
        if c.len() != self.spec().hidden_dim {
            return Err(Error::DimensionMismatch(format!(
                "context width {} != {}",
                c.len(),
                self.spec().hidden_dim
            )));
        }
        Ok(self.params.word_table.row(w).dot(&c) + self.logit_offset(w))
    }

    /// Pre-softmax test scores under `mode` (which may differ from the
    /// training mode, e.g. to evaluate NEG-trained parameters as NEGLM).
    pub fn test_scores(&self, c: ArrayView1<f64>, mode: Mode) -> Vec<f64> {
        let mut s = self.params.word_table.dot(&c).to_vec();
        if mode.uses_bias() {
            for (v, b) in s.iter_mut().zip(self.params.bias.iter()) {
                *v += b;
            }
        }
        if mode.uses_unigram_at_test() {
            for (v, p) in s.iter_mut().zip(self.noise.probs()) {
                *v += p.ln();
            }
        }
        s
    }

    /// `log p̂(·|c)` under the model's own mode.
    pub fn conditional_log_probs(&self, c: ArrayView1<f64>) -> Vec<f64> {
        self.conditional_log_probs_as(c, self.mode)
    }

    pub fn conditional_log_probs_as(&self, c: ArrayView1<f64>, mode: Mode) -> Vec<f64> {
        let mut s = self.test_scores(c, mode);
        log_softmax_in_place(&mut s);
        s
    }

    fn embed(&self, ids: impl Iterator<Item = usize>) -> Array2<f64> {
        let rows: Vec<ArrayView1<f64>> = ids.map(|i| self.params.input_table.row(i)).collect();
        ndarray::stack(Axis(0), &rows).expect("uniform row width")
    }

    /// Mean per-token loss `-[log σ(s(w,c)) + Σ_i log σ(-s(u_i,c))]` over one
    /// window, and its gradient. `negatives[lane][t]` holds the noise words
    /// for position `t` of `lane`. `state` is detached first, so the window is
    /// one truncated-BPTT segment.
    pub fn batch_loss(
        &self,
        window: &Window,
        negatives: &[Vec<Vec<usize>>],
        state: &mut EncoderState,
        dropout: &mut Dropout<'_>,
    ) -> Result<(f64, LmParams)> {
        let lanes = window.inputs.len();
        let steps = window.len();
        if lanes != state.batch() || negatives.len() != lanes {
            return Err(Error::DimensionMismatch(format!(
                "window has {lanes} lanes, state {} and negatives {}",
                state.batch(),
                negatives.len()
            )));
        }
        if steps == 0 {
            return Err(Error::Empty("window".into()));
        }
        let encoder = &self.params.encoder;
        state.detach();
        let mut contexts = Vec::with_capacity(steps);
        let mut caches = Vec::with_capacity(steps);
        for t in 0..steps {
            let x = self.embed(window.inputs.iter().map(|lane| lane[t]));
            let (ctx, cache) = encoder.forward(state, x.view(), dropout)?;
            contexts.push(ctx);
            caches.push(cache);
        }
        let mut grads = self.params.zeros_like();
        let scale = 1.0 / (lanes * steps) as f64;
        let mut loss = 0.0;
        let mut upstream = Vec::with_capacity(steps);
        for (t, ctx) in contexts.iter().enumerate() {
            let mut dctx = Array2::zeros(ctx.dim());
            for lane in 0..lanes {
                let c = ctx.row(lane);
                let mut dc = dctx.row_mut(lane);
                let target = window.targets[lane][t];
                let terms = std::iter::once((target, true))
                    .chain(negatives[lane][t].iter().map(|&u| (u, false)));
                for (w, positive) in terms {
                    let s = self.params.word_table.row(w).dot(&c) + self.logit_offset(w);
                    // dL/ds for L = -log σ(s) (positive) or -log σ(-s) (negative)
                    let (l, ds) = if positive {
                        (-log_sigmoid(s), -sigmoid(-s))
                    } else {
                        (-log_sigmoid(-s), sigmoid(s))
                    };
                    loss += l;
                    let ds = ds * scale;
                    dc.scaled_add(ds, &self.params.word_table.row(w));
                    grads.word_table.row_mut(w).scaled_add(ds, &c);
                    if self.mode.uses_bias() {
                        grads.bias[w] += ds;
                    }
                }
            }
            upstream.push(dctx);
        }
        let enc_grads = encoder.backward(&caches, &upstream)?;
        grads.encoder.params = enc_grads.params;
        for (t, dx) in enc_grads.inputs.iter().enumerate() {
            for lane in 0..lanes {
                let id = window.inputs[lane][t];
                grads.input_table.row_mut(id).scaled_add(1.0, &dx.row(lane));
            }
        }
        Ok((loss * scale, grads))
    }

    /// Draw `k` negatives per position of `window`, or one shared set per
    /// window when `share` is set.
    pub fn draw_negatives(
        &self,
        window: &Window,
        rng: &mut SeededRng,
        share: bool,
        reject_collisions: bool,
    ) -> Vec<Vec<Vec<usize>>> {
        if share {
            let shared = self.noise.sample_k(rng, self.k, None);
            return window
                .targets
                .iter()
                .map(|lane| vec![shared.clone(); lane.len()])
                .collect();
        }
        window
            .targets
            .iter()
            .map(|lane| {
                lane.iter()
                    .map(|&w| {
                        self.noise
                            .sample_k(rng, self.k, reject_collisions.then_some(w))
                    })
                    .collect()
            })
            .collect()
    }

    /// Context vectors for every prefix of `ids` (eval mode, single stream):
    /// row `t` is the context after consuming `ids[..=t]`.
    pub fn contexts(&self, ids: &[usize]) -> Result<Array2<f64>> {
        let encoder = &self.params.encoder;
        let mut state = encoder.new_state(1);
        let mut out = Array2::zeros((ids.len(), self.spec().hidden_dim));
        for (t, &id) in ids.iter().enumerate() {
            if id >= self.vocab_size() {
                return Err(Error::InvalidArgument(format!(
                    "token id {id} outside vocabulary"
                )));
            }
            if t % 64 == 0 {
                state.detach();
            }
            let x = self.params.input_table.slice(ndarray::s![id..id + 1, ..]);
            let (ctx, _) = encoder.forward(&mut state, x, &mut Dropout::Off)?;
            out.row_mut(t).assign(&ctx.row(0));
        }
        Ok(out)
    }

    /// Chain-rule perplexity of a token stream under the model's mode.
    pub fn perplexity(&self, ids: &[usize]) -> Result<Evaluation> {
        self.perplexity_as(ids, self.mode)
    }

    /// Perplexity with the test-time scores of `mode`. Every token after the
    /// first is predicted from the state carried over the whole stream.
    pub fn perplexity_as(&self, ids: &[usize], mode: Mode) -> Result<Evaluation> {
        if ids.len() < 2 {
            return Err(Error::Empty(
                "token stream needs at least two tokens".into(),
            ));
        }
        let contexts = self.contexts(&ids[..ids.len() - 1])?;
        let mut total = 0.0;
        for (ctx, &target) in contexts.rows().into_iter().zip(&ids[1..]) {
            let scores = self.test_scores(ctx, mode);
            total += log_sum_exp(&scores) - scores[target];
        }
        let tokens = ids.len() - 1;
        let mean_nll = total / tokens as f64;
        Ok(Evaluation {
            perplexity: mean_nll.exp(),
            mean_nll,
            tokens,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Evaluation {
    pub perplexity: f64,
    /// Mean negative log probability in nats.
    pub mean_nll: f64,
    pub tokens: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub valid_perplexity: f64,
    pub wall_time: f64,
    pub lr: f64,
}

impl EpochRecord {
    /// Deterministic `key=value` line (no wall time).
    pub fn metrics_line(&self) -> String {
        format!(
            "epoch={} train_loss={:.10} valid_ppl={:.10} lr={:.10}",
            self.epoch, self.train_loss, self.valid_perplexity, self.lr
        )
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters with the best validation perplexity.
    pub best: LanguageModel,
    pub best_epoch: usize,
    /// Parameters after the final epoch.
    pub last: LanguageModel,
    pub history: Vec<EpochRecord>,
}

/// Hash of everything that determines a run.
pub fn config_hash(cfg: &TrainConfig, spec: &EncoderSpec, mode: Mode) -> String {
    let digest = Sha256::digest(format!("{cfg:?}|{spec:?}|{mode}").as_bytes());
    digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
}

/// Train on `train_ids` with minibatches of `cfg.batch_size` contiguous
/// streams unrolled `cfg.unroll` steps at a time. State is carried across
/// windows within an epoch and reset at epoch start. After every epoch the
/// validation perplexity is computed and `on_epoch` is called.
///
/// A non-finite loss aborts with [`Error::NumericalAbort`] carrying the model
/// as of the last completed epoch.
pub fn train(
    vocab: &Vocabulary,
    train_ids: &[usize],
    valid_ids: &[usize],
    spec: EncoderSpec,
    cfg: &TrainConfig,
    mode: Mode,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if spec.input_dim == 0 || spec.hidden_dim == 0 {
        return Err(Error::InvalidArgument("encoder dims must be >= 1".into()));
    }
    let plan = BatchPlan::new(train_ids, cfg.batch_size, cfg.unroll)?;
    let windows = plan.windows_with(cfg.drop_partial_windows);
    let mut model = LanguageModel::new(vocab.clone(), spec.clone(), mode, cfg)?;
    model.metadata.config_hash = config_hash(cfg, &spec, mode);

    let mut neg_rng = seeded_rng(cfg.seed, STREAM_NEGATIVES);
    let mut drop_rng = seeded_rng(cfg.seed, STREAM_DROPOUT);
    let mut optimizer = Optimizer::new(cfg.optimizer);
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, LanguageModel)> = None;
    let mut last_good = model.clone();

    for epoch in 1..=cfg.epochs {
        let started = Instant::now();
        let lr = cfg.lr_for_epoch(epoch);
        let mut state = model.params.encoder.new_state(cfg.batch_size);
        let mut loss_sum = 0.0;
        let mut token_sum = 0usize;
        for (wi, window) in windows.iter().enumerate() {
            let negatives = model.draw_negatives(
                window,
                &mut neg_rng,
                cfg.share_negatives,
                cfg.reject_collisions,
            );
            let (loss, mut grads) = model.batch_loss(
                window,
                &negatives,
                &mut state,
                &mut Dropout::Train(&mut drop_rng),
            )?;
            if !loss.is_finite() || !grads.is_finite() {
                return Err(Error::NumericalAbort {
                    msg: format!("non-finite loss {loss} in epoch {epoch}, window {wi}"),
                    checkpoint: Some(Box::new(last_good)),
                });
            }
            let tokens = window.len() * cfg.batch_size;
            loss_sum += loss * tokens as f64;
            token_sum += tokens;
            clip_global_norm(&mut grads, cfg.clip_norm);
            optimizer.step(&mut model.params, &grads, lr);
        }
        let valid = model.perplexity(valid_ids)?;
        if !valid.perplexity.is_finite() {
            return Err(Error::NumericalAbort {
                msg: format!(
                    "validation perplexity {} in epoch {epoch}",
                    valid.perplexity
                ),
                checkpoint: Some(Box::new(last_good)),
            });
        }
        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / token_sum as f64,
            valid_perplexity: valid.perplexity,
            wall_time: started.elapsed().as_secs_f64(),
            lr,
        };
        on_epoch(&record);
        history.push(record);
        if best
            .as_ref()
            .is_none_or(|(ppl, _, _)| valid.perplexity < *ppl)
        {
            best = Some((valid.perplexity, epoch, model.clone()));
        }
        last_good = model.clone();
    }
    let (_, best_epoch, best) = best.expect("at least one epoch");
    Ok(TrainOutcome {
        best,
        best_epoch,
        last: model,
        history,
    })
}

/// Append a constant coordinate: words become `(w⃗, 1)` and contexts
/// `(c⃗, -log Z_c)` with `Z_c = Σ_w exp(w⃗·c⃗ + b_w)` computed exactly.
pub fn augment_rank(
    word_table: ArrayView2<f64>,
    bias: ArrayView1<f64>,
    contexts: ArrayView2<f64>,
) -> (Array2<f64>, Array2<f64>) {
    let (n, d) = word_table.dim();
    let mut words = Array2::ones((n, d + 1));
    words.slice_mut(ndarray::s![.., ..d]).assign(&word_table);
    let mut ctx = Array2::zeros((contexts.nrows(), d + 1));
    ctx.slice_mut(ndarray::s![.., ..d]).assign(&contexts);
    for (i, c) in contexts.rows().into_iter().enumerate() {
        let scores: Vec<f64> = (word_table.dot(&c) + bias).to_vec();
        ctx[[i, d]] = -log_sum_exp(&scores);
    }
    (words, ctx)
}

/// Largest `|σ(w⃗·c⃗ + b_w - log Z_c - log(k p_n(w))) - σ(w⃗'·c⃗' + b_w - log(k p_n(w)))|`
/// over all words and the given contexts, where the first form uses the exact
/// per-context `Z_c` and the second the augmented embeddings with `Z_c = 1`.
pub fn augmentation_deviation(
    model: &LanguageModel,
    contexts: ArrayView2<f64>,
    aug_words: ArrayView2<f64>,
    aug_contexts: ArrayView2<f64>,
) -> f64 {
    let table = &model.params.word_table;
    let bias = &model.params.bias;
    let k = model.k as f64;
    let mut worst: f64 = 0.0;
    for (c, ca) in contexts.rows().into_iter().zip(aug_contexts.rows()) {
        let scores: Vec<f64> = (table.dot(&c) + bias).to_vec();
        let log_z = log_sum_exp(&scores);
        for w in 0..table.nrows() {
            let noise = (k * model.noise.prob(w)).ln();
            let direct = sigmoid(scores[w] - log_z - noise);
            let augmented = sigmoid(aug_words.row(w).dot(&ca) + bias[w] - noise);
            worst = worst.max((direct - augmented).abs());
        }
    }
    worst
}

/// Whether the `(d+1)`-dimensional augmented embedding with `Z_c = 1`
/// reproduces the NCE classifier with exact normalizers to within
/// [`AUGMENT_TOLERANCE`] on every word and context.
pub fn rank_augment_check(model: &LanguageModel, contexts: ArrayView2<f64>) -> Result<bool> {
    if model.mode != Mode::Nce {
        return Err(Error::InvalidArgument(
            "rank augmentation applies to NCE models".into(),
        ));
    }
    if contexts.ncols() != model.spec().hidden_dim {
        return Err(Error::DimensionMismatch("context width".into()));
    }
    let (words, ctx) = augment_rank(
        model.params.word_table.view(),
        model.params.bias.view(),
        contexts,
    );
    Ok(augmentation_deviation(model, contexts, words.view(), ctx.view()) <= AUGMENT_TOLERANCE)
}

/// Compare [`LanguageModel::batch_loss`] gradients with central
/// differences on a small model (`vocab_size` words, width `dim`, batch 2,
/// unroll 4, `k = 3`). Negatives are drawn once and held fixed; parameters are
/// drawn from `[-0.5, 0.5]` so every term is well away from zero.
pub fn batch_loss_grad_check(
    encoder: EncoderKind,
    mode: Mode,
    vocab_size: usize,
    dim: usize,
    seed: u64,
) -> Result<GradCheckReport> {
    if vocab_size < 3 {
        return Err(Error::InvalidArgument("vocab_size must be >= 3".into()));
    }
    let mut tokens = vec![EOS.to_string(), UNK.to_string()];
    tokens.extend((2..vocab_size).map(|i| format!("w{i}")));
    let counts = (1..=vocab_size as u64).collect();
    let vocab = Vocabulary::from_parts(tokens, counts)?;
    let spec = match encoder {
        EncoderKind::Window => EncoderSpec::window(dim, dim, 2),
        EncoderKind::Lstm => EncoderSpec::lstm(dim, dim, 1),
    };
    let cfg = TrainConfig {
        k: 3,
        seed,
        ..TrainConfig::default()
    };
    let mut model = LanguageModel::new(vocab, spec, mode, &cfg)?;
    let mut rng = seeded_rng(seed, STREAM_DROPOUT + 1);
    for block in model.params.blocks_mut() {
        block.iter_mut().for_each(|v| *v = rng.gen_range(-0.5..0.5));
    }
    let (lanes, steps) = (2, 4);
    let mut ids = || -> Vec<Vec<usize>> {
        (0..lanes)
            .map(|_| (0..steps).map(|_| rng.gen_range(0..vocab_size)).collect())
            .collect()
    };
    let window = Window {
        inputs: ids(),
        targets: ids(),
    };
    let negatives = model.draw_negatives(&window, &mut rng, false, false);
    let loss = |m: &LanguageModel| -> Result<(f64, LmParams)> {
        let mut state = m.params.encoder.new_state(lanes);
        m.batch_loss(&window, &negatives, &mut state, &mut Dropout::Off)
    };
    let (_, analytic) = loss(&model)?;
    let mut blocks = Vec::new();
    for (bi, name) in model.params.block_names().into_iter().enumerate() {
        let len = model.params.blocks()[bi].len();
        let mut numeric = vec![0.0; len];
        for (j, slot) in numeric.iter_mut().enumerate() {
            let mut probe = model.clone();
            probe.params.blocks_mut()[bi][j] += FD_STEP;
            let up = loss(&probe)?.0;
            probe.params.blocks_mut()[bi][j] -= 2.0 * FD_STEP;
            let down = loss(&probe)?.0;
            *slot = (up - down) / (2.0 * FD_STEP);
        }
        blocks.push((
            name,
            max_relative_error(analytic.blocks()[bi], &numeric, FD_FLOOR),
        ));
    }
    Ok(GradCheckReport { blocks })
}
