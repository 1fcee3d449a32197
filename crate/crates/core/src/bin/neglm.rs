//! Command-line entry point. Exit codes: 0 success, 1 validation or check
//! failure, 2 usage error, 3 numerical abort.

use std::fs::{self, File};
use std::io::{BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use neglm::config::{
    RunConfig, EMBED_JOINT_DEFAULTS, EVAL_DEFAULTS, GEN_BIGRAM_DEFAULTS, TRAIN_LM_DEFAULTS,
    VERIFY_DEFAULTS,
};
use neglm::corpus::Vocabulary;
use neglm::distlab::{
    kl_gap, optimal_score, score, score_at_pmi, train_exact, train_sampled, JointDistribution,
    ScoreConfig,
};
use neglm::lm::{self, Mode};
use neglm::model_file::{self, JointModel};
use neglm::optim::{OptimizerKind, TrainConfig};
use neglm::sampling::{seeded_rng, NoiseDistribution};
use neglm::synthetic::BigramChain;
use neglm::verify::{run_suite, VerifyOptions};
use neglm::Error;

#[derive(Parser)]
#[command(
    name = "neglm",
    version,
    about = "Negative-sampling embeddings and language models"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the randomized numerical check suite.
    Verify(VerifyArgs),
    /// Embed a joint distribution given as a `x<TAB>y<TAB>p` file.
    EmbedJoint(EmbedArgs),
    /// Train a language model on whitespace-tokenized text.
    TrainLm(TrainArgs),
    /// Perplexity of a saved language model on a text file.
    Eval(EvalArgs),
    /// Write train/valid/test text sampled from a random bigram chain.
    GenBigram(GenArgs),
}

#[derive(Args)]
struct Common {
    /// Config file of `key=value` lines; explicit flags take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct VerifyArgs {
    #[command(flatten)]
    common: Common,
    /// Largest alphabet size for random distributions.
    #[arg(long)]
    max_size: Option<usize>,
    /// Negate one analytic gradient component (harness self-test).
    #[arg(long)]
    corrupt: bool,
    /// Directory for the machine-readable report and resolved config.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EmbedArgs {
    dist_file: PathBuf,
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    d: Option<usize>,
    #[arg(long)]
    k: Option<u32>,
    /// exact or sampled.
    #[arg(long)]
    method: Option<String>,
    /// Full-batch steps (exact).
    #[arg(long)]
    steps: Option<usize>,
    /// Base step size (exact).
    #[arg(long)]
    lr: Option<f64>,
    /// Report S(pmi) itself and fail if the distribution lacks full support.
    #[arg(long)]
    strict_pmi: bool,
    /// Number of sampled pairs (sampled).
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    optimizer: Option<String>,
    /// Step size (sampled).
    #[arg(long)]
    sampled_lr: Option<f64>,
    #[arg(long)]
    clip: Option<f64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    train_file: PathBuf,
    valid_file: PathBuf,
    #[command(flatten)]
    common: Common,
    /// nce, neg, neglm or neglm-b.
    #[arg(long)]
    mode: Option<String>,
    /// window or lstm.
    #[arg(long)]
    encoder: Option<String>,
    /// Input embedding width.
    #[arg(long)]
    d: Option<usize>,
    /// Context (and output embedding) width.
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long)]
    layers: Option<usize>,
    /// Window encoder: number of preceding tokens.
    #[arg(long)]
    window: Option<usize>,
    /// Window encoder: tanh or identity.
    #[arg(long)]
    activation: Option<String>,
    #[arg(long)]
    dropout: Option<f64>,
    /// sgd_decay or adaptive_moments.
    #[arg(long)]
    optimizer: Option<String>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    decay: Option<f64>,
    #[arg(long)]
    decay_start: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    clip: Option<f64>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    unroll: Option<usize>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    alpha: Option<f64>,
    /// Constant log-normalizer in the NCE logit.
    #[arg(long)]
    log_z: Option<f64>,
    #[arg(long)]
    vocab_size: Option<usize>,
    #[arg(long)]
    min_count: Option<u64>,
    #[arg(long)]
    share_negatives: Option<bool>,
    #[arg(long)]
    reject_collisions: Option<bool>,
    #[arg(long)]
    drop_partial: Option<bool>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    model_file: PathBuf,
    test_file: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Evaluate with another mode's test-time scores (default: stored mode).
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GenArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    states: Option<usize>,
    #[arg(long)]
    rank: Option<usize>,
    #[arg(long)]
    scale: Option<f64>,
    #[arg(long)]
    train_tokens: Option<usize>,
    #[arg(long)]
    valid_tokens: Option<usize>,
    #[arg(long)]
    test_tokens: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

type CmdResult = Result<ExitCode, Error>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Verify(a) => verify(a),
        Command::EmbedJoint(a) => embed_joint(a),
        Command::TrainLm(a) => train_lm(a),
        Command::Eval(a) => eval(a),
        Command::GenBigram(a) => gen_bigram(a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::NumericalAbort { .. } | Error::Diverged(_) | Error::NonFinite(_) => {
                    ExitCode::from(3)
                }
                _ => ExitCode::from(1),
            }
        }
    }
}

fn resolve(
    command: &str,
    defaults: &[(&str, &str)],
    config: Option<&Path>,
) -> Result<RunConfig, Error> {
    let mut cfg = RunConfig::new(command, defaults);
    if let Some(path) = config {
        cfg.merge_text(&fs::read_to_string(path)?)?;
    }
    Ok(cfg)
}

fn prepare_out(dir: &Path, cfg: &RunConfig) -> Result<(), Error> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("config.txt"), cfg.to_string())?;
    Ok(())
}

fn verify(a: VerifyArgs) -> CmdResult {
    let mut cfg = resolve("verify", VERIFY_DEFAULTS, a.common.config.as_deref())?;
    cfg.set_opt("seed", a.common.seed)?;
    cfg.set_opt("max-size", a.max_size)?;
    if a.corrupt {
        cfg.set("corrupt", true)?;
    }
    let opts = VerifyOptions {
        seed: cfg.get("seed")?,
        max_size: cfg.get("max-size")?,
        corrupt_gradient: cfg.get("corrupt")?,
    };
    let report = run_suite(&opts)?;
    println!("{report}");
    if let Some(dir) = &a.out {
        prepare_out(dir, &cfg)?;
        fs::write(dir.join("verify_report.txt"), report.records())?;
    }
    Ok(if report.passed() {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(1)
    })
}

fn embed_joint(a: EmbedArgs) -> CmdResult {
    let mut cfg = resolve(
        "embed-joint",
        EMBED_JOINT_DEFAULTS,
        a.common.config.as_deref(),
    )?;
    cfg.set_opt("seed", a.common.seed)?;
    cfg.set_opt("d", a.d)?;
    cfg.set_opt("k", a.k)?;
    cfg.set_opt("method", a.method)?;
    cfg.set_opt("steps", a.steps)?;
    cfg.set_opt("lr", a.lr)?;
    if a.strict_pmi {
        cfg.set("strict-pmi", true)?;
    }
    cfg.set_opt("samples", a.samples)?;
    cfg.set_opt("epochs", a.epochs)?;
    cfg.set_opt("batch", a.batch)?;
    cfg.set_opt("alpha", a.alpha)?;
    cfg.set_opt("optimizer", a.optimizer)?;
    cfg.set_opt("sampled-lr", a.sampled_lr)?;
    cfg.set_opt("clip", a.clip)?;

    let dist = JointDistribution::from_tsv(BufReader::new(File::open(&a.dist_file)?))?;
    let seed: u64 = cfg.get("seed")?;
    let d: usize = cfg.get("d")?;
    let k: u32 = cfg.get("k")?;
    let score_cfg = ScoreConfig::new(k)?;
    let strict: bool = cfg.get("strict-pmi")?;
    let best = if strict {
        score_at_pmi(&dist, score_cfg)?
    } else {
        optimal_score(&dist, score_cfg)
    };
    let factors = match cfg.raw("method")? {
        "exact" => train_exact(&dist, score_cfg, d, cfg.get("steps")?, cfg.get("lr")?, seed)?,
        "sampled" => {
            let opt = TrainConfig {
                optimizer: cfg.get::<OptimizerKind>("optimizer")?,
                lr: cfg.get("sampled-lr")?,
                decay_factor: 1.0,
                epochs: cfg.get("epochs")?,
                clip_norm: cfg.get("clip")?,
                batch_size: cfg.get("batch")?,
                k: k as usize,
                alpha: cfg.get("alpha")?,
                seed,
                ..TrainConfig::default()
            };
            let pairs = dist.sample_pairs(&mut seeded_rng(seed, 3), cfg.get("samples")?);
            let noise = NoiseDistribution::from_counts(dist.marginal_y(), opt.alpha)?;
            train_sampled(&pairs, dist.n_x(), score_cfg, &noise, d, &opt)?
        }
        other => return Err(Error::InvalidArgument(format!("unknown method {other:?}"))),
    };
    let m = factors.matrix();
    let s = score(&dist, score_cfg, &m)?;
    let gap = kl_gap(&dist, score_cfg, &m)?;
    let label = if strict { "score_pmi" } else { "score_optimal" };
    let line = format!("score={s:.15e} {label}={best:.15e} kl_gap={gap:.15e}");
    println!("{line}");

    prepare_out(&a.out, &cfg)?;
    fs::write(a.out.join("report.txt"), format!("{line}\n"))?;
    let model = JointModel {
        factors,
        k,
        seed,
        x_labels: dist.x_labels().to_vec(),
        y_labels: dist.y_labels().to_vec(),
    };
    model_file::save_joint(&model, &a.out.join("model.negf"))?;
    Ok(ExitCode::SUCCESS)
}

fn train_lm(a: TrainArgs) -> CmdResult {
    let mut cfg = resolve("train-lm", TRAIN_LM_DEFAULTS, a.common.config.as_deref())?;
    cfg.set_opt("seed", a.common.seed)?;
    cfg.set_opt("mode", a.mode)?;
    cfg.set_opt("encoder", a.encoder)?;
    cfg.set_opt("d", a.d)?;
    cfg.set_opt("hidden", a.hidden)?;
    cfg.set_opt("layers", a.layers)?;
    cfg.set_opt("window", a.window)?;
    cfg.set_opt("activation", a.activation)?;
    cfg.set_opt("dropout", a.dropout)?;
    cfg.set_opt("optimizer", a.optimizer)?;
    cfg.set_opt("lr", a.lr)?;
    cfg.set_opt("decay", a.decay)?;
    cfg.set_opt("decay-start", a.decay_start)?;
    cfg.set_opt("epochs", a.epochs)?;
    cfg.set_opt("clip", a.clip)?;
    cfg.set_opt("batch", a.batch)?;
    cfg.set_opt("unroll", a.unroll)?;
    cfg.set_opt("k", a.k)?;
    cfg.set_opt("alpha", a.alpha)?;
    cfg.set_opt("log-z", a.log_z)?;
    cfg.set_opt("vocab-size", a.vocab_size)?;
    cfg.set_opt("min-count", a.min_count)?;
    cfg.set_opt("share-negatives", a.share_negatives)?;
    cfg.set_opt("reject-collisions", a.reject_collisions)?;
    cfg.set_opt("drop-partial", a.drop_partial)?;

    let train_cfg = cfg.train_config()?;
    let spec = cfg.encoder_spec()?;
    let mode: Mode = cfg.get("mode")?;
    let train_text = fs::read_to_string(&a.train_file)?;
    let valid_text = fs::read_to_string(&a.valid_file)?;
    let vocab = Vocabulary::build(
        &train_text,
        cfg.get_opt("vocab-size")?,
        cfg.get_opt("min-count")?,
    )?;
    let train_ids = vocab.encode(&train_text);
    let valid_ids = vocab.encode(&valid_text);

    prepare_out(&a.out, &cfg)?;
    vocab.write_tsv(File::create(a.out.join("vocab.tsv"))?)?;
    let mut metrics = File::create(a.out.join("metrics.txt"))?;
    let mut timing = File::create(a.out.join("timing.txt"))?;
    let mut io_error = None;
    let outcome = lm::train(
        &vocab,
        &train_ids,
        &valid_ids,
        spec,
        &train_cfg,
        mode,
        |r| {
            println!("{} wall_time={:.3}", r.metrics_line(), r.wall_time);
            let written = writeln!(metrics, "{}", r.metrics_line())
                .and_then(|_| writeln!(timing, "epoch={} wall_time={:.3}", r.epoch, r.wall_time))
                .and_then(|_| metrics.flush());
            if let Err(e) = written {
                io_error.get_or_insert(e);
            }
        },
    );
    if let Some(e) = io_error {
        return Err(e.into());
    }
    let outcome = match outcome {
        Ok(o) => o,
        Err(Error::NumericalAbort { msg, checkpoint }) => {
            if let Some(mut model) = checkpoint {
                model.metadata.config_hash = cfg.hash();
                let path = a.out.join("checkpoint.negf");
                model_file::save_lm(&model, &path)?;
                eprintln!("last good parameters written to {}", path.display());
            }
            return Err(Error::NumericalAbort {
                msg,
                checkpoint: None,
            });
        }
        Err(e) => return Err(e),
    };
    let mut best = outcome.best;
    best.metadata.config_hash = cfg.hash();
    model_file::save_lm(&best, &a.out.join("model.negf"))?;
    println!(
        "best_epoch={} valid_ppl={:.6} model={}",
        outcome.best_epoch,
        outcome.history[outcome.best_epoch - 1].valid_perplexity,
        a.out.join("model.negf").display()
    );
    Ok(ExitCode::SUCCESS)
}

fn eval(a: EvalArgs) -> CmdResult {
    let mut cfg = resolve("eval", EVAL_DEFAULTS, a.config.as_deref())?;
    cfg.set_opt("mode", a.mode)?;
    let model = model_file::load_lm(&a.model_file)?;
    let mode = match cfg.raw("mode")? {
        "stored" => model.mode,
        other => other.parse()?,
    };
    let ids = model.vocab.encode(&fs::read_to_string(&a.test_file)?);
    let result = model.perplexity_as(&ids, mode)?;
    let line = format!(
        "perplexity={:.10} mean_nll={:.10} tokens={} mode={mode} alpha={}",
        result.perplexity,
        result.mean_nll,
        result.tokens,
        model.alpha()
    );
    println!("{line}");
    if let Some(dir) = &a.out {
        prepare_out(dir, &cfg)?;
        fs::write(dir.join("eval.txt"), format!("{line}\n"))?;
    }
    Ok(ExitCode::SUCCESS)
}

fn gen_bigram(a: GenArgs) -> CmdResult {
    let mut cfg = resolve(
        "gen-bigram",
        GEN_BIGRAM_DEFAULTS,
        a.common.config.as_deref(),
    )?;
    cfg.set_opt("seed", a.common.seed)?;
    cfg.set_opt("states", a.states)?;
    cfg.set_opt("rank", a.rank)?;
    cfg.set_opt("scale", a.scale)?;
    cfg.set_opt("train-tokens", a.train_tokens)?;
    cfg.set_opt("valid-tokens", a.valid_tokens)?;
    cfg.set_opt("test-tokens", a.test_tokens)?;
    let seed: u64 = cfg.get("seed")?;
    let chain = BigramChain::random_low_rank(
        cfg.get("states")?,
        cfg.get("rank")?,
        cfg.get("scale")?,
        seed,
    )?;
    prepare_out(&a.out, &cfg)?;
    for (stream, name) in [(1, "train"), (2, "valid"), (3, "test")] {
        let ids = chain.generate(
            &mut seeded_rng(seed, stream),
            cfg.get(&format!("{name}-tokens"))?,
        );
        fs::write(a.out.join(format!("{name}.txt")), BigramChain::render(&ids))?;
    }
    let line = format!(
        "analytic_perplexity={:.10} entropy_rate={:.10}",
        chain.perplexity(),
        chain.entropy_rate()
    );
    fs::write(a.out.join("chain.txt"), format!("{line}\n"))?;
    println!("{line}");
    Ok(ExitCode::SUCCESS)
}
