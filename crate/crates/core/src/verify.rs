//! Randomized numerical checks of the embedding theory, the gradients and the
//! sampler. Each check returns its worst residual next to the bound it must
//! meet; [`run_suite`] bundles them for the `verify` command.

use std::fmt;
use std::time::Instant;

use ndarray::Array2;
use rand::Rng;

use crate::distlab::{
    exact_gradient, kl_gap, optimal_score, pmi_matrix, random_distribution, sampled_gradient,
    score, train_exact, FactorPair, ScoreConfig,
};
use crate::encoder::{grad_check, EncoderKind, EncoderSpec, FD_FLOOR};
use crate::error::Result;
use crate::lm::{batch_loss_grad_check, Mode};
use crate::numeric::max_relative_error;
use crate::optim::ParamBlocks;
use crate::sampling::{chi_square, seeded_rng, NoiseDistribution, SeededRng};

/// Which side of `bound` a passing value lies on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Bound {
    AtMost,
    AtLeast,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: String,
    /// Worst residual (or, for [`Bound::AtLeast`], the smallest value seen).
    pub value: f64,
    pub bound: f64,
    pub direction: Bound,
    pub detail: String,
    pub seconds: f64,
}

impl CheckResult {
    fn new(name: &str, value: f64, direction: Bound, bound: f64, detail: String) -> Self {
        CheckResult {
            name: name.to_string(),
            value,
            bound,
            direction,
            detail,
            seconds: 0.0,
        }
    }

    pub fn passed(&self) -> bool {
        match self.direction {
            Bound::AtMost => self.value <= self.bound,
            Bound::AtLeast => self.value >= self.bound,
        }
    }

    /// One `key=value` record.
    pub fn record(&self) -> String {
        format!(
            "check={} passed={} value={:e} bound={:e} direction={} seconds={:.3}",
            self.name,
            self.passed(),
            self.value,
            self.bound,
            match self.direction {
                Bound::AtMost => "at_most",
                Bound::AtLeast => "at_least",
            },
            self.seconds
        )
    }
}

impl fmt::Display for CheckResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let op = match self.direction {
            Bound::AtMost => "<=",
            Bound::AtLeast => ">=",
        };
        write!(
            f,
            "[{}] {:<24} {:.3e} {op} {:.1e}  ({:.2}s) {}",
            if self.passed() { "PASS" } else { "FAIL" },
            self.name,
            self.value,
            self.bound,
            self.seconds,
            self.detail
        )
    }
}

fn timed(f: impl FnOnce() -> Result<CheckResult>) -> Result<CheckResult> {
    let start = Instant::now();
    let mut r = f()?;
    r.seconds = start.elapsed().as_secs_f64();
    Ok(r)
}

fn random_k(rng: &mut SeededRng) -> u32 {
    rng.gen_range(1..=10)
}

fn random_matrix(rng: &mut SeededRng, n_x: usize, n_y: usize, half_width: f64) -> Array2<f64> {
    Array2::from_shape_fn((n_x, n_y), |_| rng.gen_range(-half_width..=half_width))
}

/// `|(S* - S(m)) - KL(m)|` over random distributions (a fifth of the cells
/// zeroed in every other trial), matrices and `k`. `S*` is the supremum of
/// `S`, which equals `S(pmi)` on full support.
pub fn theorem_identity(seed: u64, trials: usize, max_size: usize) -> Result<CheckResult> {
    let mut rng = seeded_rng(seed, 10);
    let mut worst: f64 = 0.0;
    for t in 0..trials {
        let n_x = rng.gen_range(1..=max_size);
        let n_y = rng.gen_range(1..=max_size);
        let zero_prob = if t % 2 == 0 { 0.0 } else { 0.2 };
        let dist = random_distribution(&mut rng, n_x, n_y, 0.0, zero_prob);
        let cfg = ScoreConfig::new(random_k(&mut rng))?;
        let m = random_matrix(&mut rng, n_x, n_y, 5.0);
        let gap = optimal_score(&dist, cfg) - score(&dist, cfg, &m)?;
        worst = worst.max((gap - kl_gap(&dist, cfg, &m)?).abs());
    }
    Ok(CheckResult::new(
        "theorem_identity",
        worst,
        Bound::AtMost,
        1e-10,
        format!("{trials} triples up to {max_size}x{max_size}"),
    ))
}

/// Largest `S(pmi + εΔ) - S(pmi)` over random full-support distributions,
/// unit-Frobenius directions `Δ` and `ε ∈ {1e-2, 1e-1, 1}`. Passing means no
/// perturbation ever increased the score.
pub fn pmi_optimum(
    seed: u64,
    dists: usize,
    directions: usize,
    max_size: usize,
) -> Result<CheckResult> {
    let mut rng = seeded_rng(seed, 11);
    let mut worst = f64::NEG_INFINITY;
    for _ in 0..dists {
        let n_x = rng.gen_range(2..=max_size);
        let n_y = rng.gen_range(2..=max_size);
        let dist = random_distribution(&mut rng, n_x, n_y, 0.0, 0.0);
        let cfg = ScoreConfig::new(random_k(&mut rng))?;
        let pmi = pmi_matrix(&dist, cfg).to_matrix()?;
        let best = score(&dist, cfg, &pmi)?;
        for _ in 0..directions {
            let mut delta = random_matrix(&mut rng, n_x, n_y, 1.0);
            let norm = delta.iter().map(|v| v * v).sum::<f64>().sqrt();
            delta /= norm;
            for eps in [1e-2, 1e-1, 1.0] {
                let s = score(&dist, cfg, &(&pmi + &(&delta * eps)))?;
                worst = worst.max(s - best);
            }
        }
    }
    Ok(CheckResult::new(
        "pmi_optimum",
        worst,
        Bound::AtMost,
        0.0,
        format!("{dists} distributions x {directions} directions x 3 step sizes"),
    ))
}

/// Learning rate used by the recovery check.
pub const RECOVERY_LR: f64 = 200.0;

/// Fraction of random full-support `n × n` distributions for which
/// `train_exact` with `d = n` reaches `|m - pmi| ≤ 1e-3` in every cell and
/// `kl_gap ≤ 1e-6` within `steps` steps.
pub fn full_rank_recovery(
    seed: u64,
    instances: usize,
    n: usize,
    steps: usize,
    required: f64,
) -> Result<CheckResult> {
    let mut rng = seeded_rng(seed, 12);
    let mut successes = 0;
    let mut worst_cell: f64 = 0.0;
    let mut worst_kl: f64 = 0.0;
    for i in 0..instances {
        let dist = random_distribution(&mut rng, n, n, 0.0, 0.0);
        let cfg = ScoreConfig::new(1)?;
        let factors = train_exact(
            &dist,
            cfg,
            n,
            steps,
            RECOVERY_LR,
            seed.wrapping_add(i as u64),
        )?;
        let m = factors.matrix();
        let pmi = pmi_matrix(&dist, cfg).to_matrix()?;
        let cell = (&m - &pmi).iter().fold(0.0f64, |a, v| a.max(v.abs()));
        let kl = kl_gap(&dist, cfg, &m)?;
        worst_cell = worst_cell.max(cell);
        worst_kl = worst_kl.max(kl);
        if cell <= 1e-3 && kl <= 1e-6 {
            successes += 1;
        }
    }
    Ok(CheckResult::new(
        "full_rank_recovery",
        successes as f64 / instances as f64,
        Bound::AtLeast,
        required,
        format!("{successes}/{instances} recovered; worst |m-pmi| {worst_cell:.2e}, worst kl {worst_kl:.2e}"),
    ))
}

/// Relative error between [`exact_gradient`] and central differences of
/// `S(X Yᵀ)`. With `corrupt` one analytic component is negated, which must
/// make the check fail.
pub fn exact_gradient_check(seed: u64, corrupt: bool) -> Result<CheckResult> {
    let mut rng = seeded_rng(seed, 13);
    let mut worst: f64 = 0.0;
    for _ in 0..5 {
        let dist = random_distribution(&mut rng, 4, 5, 0.0, 0.0);
        let cfg = ScoreConfig::new(random_k(&mut rng))?;
        let mut factors = FactorPair::random(&mut rng, 4, 5, 3)?;
        for b in factors.blocks_mut() {
            b.iter_mut().for_each(|v| *v = rng.gen_range(-1.0..1.0));
        }
        let mut analytic = exact_gradient(&dist, cfg, &factors)?;
        if corrupt {
            analytic.x_table[[0, 0]] = -analytic.x_table[[0, 0]];
        }
        let h = 1e-6;
        let analytic_blocks = analytic.blocks();
        for (bi, grad) in analytic_blocks.iter().enumerate() {
            let mut numeric = vec![0.0; grad.len()];
            for (j, slot) in numeric.iter_mut().enumerate() {
                let mut probe = factors.clone();
                probe.blocks_mut()[bi][j] += h;
                let up = score(&dist, cfg, &probe.matrix())?;
                probe.blocks_mut()[bi][j] -= 2.0 * h;
                let down = score(&dist, cfg, &probe.matrix())?;
                *slot = (up - down) / (2.0 * h);
            }
            worst = worst.max(max_relative_error(grad, &numeric, FD_FLOOR));
        }
    }
    Ok(CheckResult::new(
        "exact_gradient",
        worst,
        Bound::AtMost,
        1e-6,
        format!(
            "5 random 4x5 instances, d=3{}",
            if corrupt { ", corrupted" } else { "" }
        ),
    ))
}

/// Largest `|mean - exact| / standard error` over all gradient components,
/// where `mean` averages the per-sample SGNS gradient over `draws` positive
/// pairs from `p(x,y)`, each with `k` negatives from `p(y)`.
pub fn sampled_gradient_unbiased(
    seed: u64,
    draws: usize,
    n: usize,
    d: usize,
    k: u32,
) -> Result<CheckResult> {
    let mut rng = seeded_rng(seed, 14);
    let dist = random_distribution(&mut rng, n, n, 0.1, 0.0);
    let cfg = ScoreConfig::new(k)?;
    let factors = FactorPair::random(&mut rng, n, n, d)?;
    let factors = FactorPair::new(
        factors.x_table * (2.0 * d as f64),
        factors.y_table * (2.0 * d as f64),
    )?;
    let exact = exact_gradient(&dist, cfg, &factors)?;
    let noise = NoiseDistribution::from_probs(dist.marginal_y().to_vec(), 1.0)?;
    let pairs = dist.sample_pairs(&mut rng, draws);
    let width = factors.num_params();
    let mut sum = vec![0.0; width];
    let mut sum_sq = vec![0.0; width];
    for &(x, y) in &pairs {
        let negatives = noise.sample_k(&mut rng, k as usize, None);
        let g = sampled_gradient(&factors, x, y, &negatives);
        for (i, v) in g.blocks().iter().flat_map(|b| b.iter()).enumerate() {
            sum[i] += v;
            sum_sq[i] += v * v;
        }
    }
    let nf = draws as f64;
    let mut worst: f64 = 0.0;
    for (i, e) in exact.blocks().iter().flat_map(|b| b.iter()).enumerate() {
        let mean = sum[i] / nf;
        let var = (sum_sq[i] / nf - mean * mean).max(0.0) * nf / (nf - 1.0);
        let se = (var / nf).sqrt();
        let z = if se > 0.0 {
            (mean - e).abs() / se
        } else if mean == *e {
            0.0
        } else {
            f64::INFINITY
        };
        worst = worst.max(z);
    }
    Ok(CheckResult::new(
        "sampled_gradient",
        worst,
        Bound::AtMost,
        3.0,
        format!("{draws} draws, {n}x{n}, d={d}, k={k}, {width} components (standard errors)"),
    ))
}

/// Worst finite-difference relative error of the encoder backward passes.
pub fn encoder_gradients(seed: u64) -> Result<Vec<CheckResult>> {
    let mut out = Vec::new();
    for (name, spec, bound) in [
        ("lstm1_gradient", EncoderSpec::lstm(6, 8, 1), 1e-4),
        (
            "lstm2_gradient",
            EncoderSpec::lstm(6, 8, 2).with_dropout(0.3),
            1e-4,
        ),
        ("window_gradient", EncoderSpec::window(6, 8, 3), 1e-6),
    ] {
        out.push(timed(|| {
            let report = grad_check(&spec, seed, 5)?;
            Ok(CheckResult::new(
                name,
                report.worst(),
                Bound::AtMost,
                bound,
                format!("{} blocks, unroll 5", report.blocks.len()),
            ))
        })?);
    }
    Ok(out)
}

/// Worst finite-difference relative error of the LM loss gradient over every
/// mode and encoder on a `|V| = 20`, `d = 8` model.
pub fn batch_loss_gradient(seed: u64) -> Result<CheckResult> {
    let mut worst: f64 = 0.0;
    for mode in Mode::ALL {
        for enc in [EncoderKind::Window, EncoderKind::Lstm] {
            worst = worst.max(batch_loss_grad_check(enc, mode, 20, 8, seed)?.worst());
        }
    }
    Ok(CheckResult::new(
        "batch_loss_gradient",
        worst,
        Bound::AtMost,
        1e-4,
        "4 modes x {window, lstm}, |V|=20, d=8".into(),
    ))
}

/// Largest `|reconstructed - p^α|` per alias bucket over random count
/// vectors of the given sizes.
pub fn alias_reconstruction(seed: u64, sizes: &[usize]) -> Result<CheckResult> {
    let mut rng = seeded_rng(seed, 15);
    let mut worst: f64 = 0.0;
    for &n in sizes {
        for alpha in [0.0, 0.75, 1.0] {
            let counts: Vec<f64> = (0..n).map(|_| rng.gen_range(0..10_000u32) as f64).collect();
            let Ok(noise) = NoiseDistribution::from_counts(&counts, alpha) else {
                continue;
            };
            let rec = noise.reconstructed_probs();
            let err = rec
                .iter()
                .zip(noise.probs())
                .fold(0.0f64, |a, (r, p)| a.max((r - p).abs()));
            worst = worst.max(err);
        }
    }
    Ok(CheckResult::new(
        "alias_reconstruction",
        worst,
        Bound::AtMost,
        1e-12,
        format!("sizes {sizes:?}, alpha in {{0, 0.75, 1}}"),
    ))
}

/// Chi-square p-value of `draws` samples from a smoothed random unigram of
/// size `n`.
pub fn sampler_chi_square(seed: u64, n: usize, draws: usize) -> Result<CheckResult> {
    let mut rng = seeded_rng(seed, 16);
    let counts: Vec<f64> = (0..n).map(|_| rng.gen_range(1..1000u32) as f64).collect();
    let noise = NoiseDistribution::from_counts(&counts, 0.75)?;
    let mut observed = vec![0u64; n];
    for _ in 0..draws {
        observed[noise.sample(&mut rng)] += 1;
    }
    let test = chi_square(&observed, noise.probs())?;
    Ok(CheckResult::new(
        "sampler_chi_square",
        test.p_value,
        Bound::AtLeast,
        1e-3,
        format!(
            "|V|={n}, {draws} draws, statistic {:.1} on {} df",
            test.statistic, test.degrees_of_freedom
        ),
    ))
}

#[derive(Debug, Clone)]
pub struct VerifyOptions {
    pub seed: u64,
    /// Largest alphabet size for randomized distributions.
    pub max_size: usize,
    /// Negate one analytic gradient component to exercise the failure path.
    pub corrupt_gradient: bool,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        VerifyOptions {
            seed: 1,
            max_size: 10,
            corrupt_gradient: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct VerifyReport {
    pub checks: Vec<CheckResult>,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(CheckResult::passed)
    }

    /// Line-delimited `key=value` records, one per check plus a summary.
    pub fn records(&self) -> String {
        let mut out: String = self.checks.iter().map(|c| c.record() + "\n").collect();
        out.push_str(&format!(
            "summary passed={} checks={} failures={}\n",
            self.passed(),
            self.checks.len(),
            self.checks.iter().filter(|c| !c.passed()).count()
        ));
        out
    }
}

impl fmt::Display for VerifyReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for c in &self.checks {
            writeln!(f, "{c}")?;
        }
        let failures = self.checks.iter().filter(|c| !c.passed()).count();
        write!(f, "{} checks, {failures} failed", self.checks.len())
    }
}

/// The default-size suite run by the `verify` command.
pub fn run_suite(opts: &VerifyOptions) -> Result<VerifyReport> {
    let seed = opts.seed;
    let size = opts.max_size.max(2);
    let mut checks = vec![
        timed(|| theorem_identity(seed, 1000, size))?,
        timed(|| pmi_optimum(seed, 100, 20, size))?,
        timed(|| full_rank_recovery(seed, 100, 5, 10_000, 0.95))?,
        timed(|| exact_gradient_check(seed, opts.corrupt_gradient))?,
        timed(|| sampled_gradient_unbiased(seed, 100_000, 4, 2, 3))?,
    ];
    checks.extend(encoder_gradients(seed)?);
    checks.push(timed(|| batch_loss_gradient(seed))?);
    checks.push(timed(|| {
        alias_reconstruction(seed, &[1, 10, 1000, 100_000])
    })?);
    checks.push(timed(|| sampler_chi_square(seed, 100_000, 1_000_000))?);
    Ok(VerifyReport { checks })
}
