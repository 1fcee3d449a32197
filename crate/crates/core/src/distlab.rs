//! Exact small-alphabet laboratory for negative-sampling embeddings of a joint
//! distribution `p(x, y)`.
//!
//! An embedding is a pair of tables whose row dot products form a matrix
//! `m(x, y) = x⃗·y⃗`. Its score is
//!
//! ```text
//! S(m) = Σ_{x,y} [ p(x,y) log σ(m) + k p(x) p(y) log σ(-m) ] / (k + 1)
//! ```
//!
//! which is maximized cell-wise at the shifted PMI matrix
//! `pmi(x,y) = log p(x,y) / (p(x) p(y)) - log k`. The gap `S(pmi) - S(m)` is a
//! conditional KL divergence between two binary classifiers weighted by the
//! mixture `q = (p + k p(x) p(y)) / (k + 1)`; [`kl_gap`] computes that KL
//! directly so the identity can be checked numerically.

use std::collections::HashMap;
use std::io::BufRead;

use ndarray::{Array2, Array3, Axis};
use rand::Rng;

use crate::error::{Error, Result};
use crate::numeric::{log_sigmoid, sigmoid};
use crate::optim::{clip_global_norm, Optimizer, ParamBlocks, TrainConfig};
use crate::sampling::{seeded_rng, NoiseDistribution};

const NORMALIZATION_TOL: f64 = 1e-12;
const TSV_NORMALIZATION_TOL: f64 = 1e-9;
const MAX_HALVINGS: usize = 30;

const STREAM_INIT: u64 = 0;
const STREAM_NEGATIVES: u64 = 1;

/// Exact probability table over two finite alphabets.
#[derive(Debug, Clone, PartialEq)]
pub struct JointDistribution {
    p: Array2<f64>,
    px: Vec<f64>,
    py: Vec<f64>,
    x_labels: Vec<String>,
    y_labels: Vec<String>,
}

impl JointDistribution {
    pub fn new(p: Array2<f64>) -> Result<Self> {
        let x_labels = (0..p.nrows()).map(|i| i.to_string()).collect();
        let y_labels = (0..p.ncols()).map(|j| j.to_string()).collect();
        Self::with_labels(p, x_labels, y_labels)
    }

    pub fn with_labels(
        p: Array2<f64>,
        x_labels: Vec<String>,
        y_labels: Vec<String>,
    ) -> Result<Self> {
        let (n_x, n_y) = p.dim();
        if n_x == 0 || n_y == 0 {
            return Err(Error::InvalidDistribution("empty alphabet".into()));
        }
        if x_labels.len() != n_x || y_labels.len() != n_y {
            return Err(Error::DimensionMismatch(
                "label count does not match table".into(),
            ));
        }
        if p.iter().any(|&v| !v.is_finite() || v < 0.0) {
            return Err(Error::InvalidDistribution(
                "entries must be finite and non-negative".into(),
            ));
        }
        let total = p.sum();
        if (total - 1.0).abs() > NORMALIZATION_TOL {
            return Err(Error::InvalidDistribution(format!(
                "entries sum to {total}"
            )));
        }
        let px = p.sum_axis(Axis(1)).to_vec();
        let py = p.sum_axis(Axis(0)).to_vec();
        Ok(JointDistribution {
            p,
            px,
            py,
            x_labels,
            y_labels,
        })
    }

    /// Product distribution `p(x) p(y)`.
    pub fn independent(px: &[f64], py: &[f64]) -> Result<Self> {
        let p = Array2::from_shape_fn((px.len(), py.len()), |(i, j)| px[i] * py[j]);
        let total = p.sum();
        Self::new(p / total)
    }

    /// Parse the `x<TAB>y<TAB>p` format: a header line, then one row per
    /// nonzero cell. Alphabets are the distinct labels in order of first
    /// appearance; the total must be 1 within 1e-9 and is renormalized exactly.
    pub fn from_tsv<R: BufRead>(reader: R) -> Result<Self> {
        let mut lines = reader.lines().enumerate();
        match lines.next() {
            Some((_, header)) => {
                let header = header?;
                let cols: Vec<&str> = header.trim_end_matches('\r').split('\t').collect();
                if cols != ["x", "y", "p"] {
                    return Err(Error::Parse {
                        line: 1,
                        msg: format!("expected header x\\ty\\tp, found {header:?}"),
                    });
                }
            }
            None => return Err(Error::Empty("distribution file".into())),
        }
        let mut x_index: HashMap<String, usize> = HashMap::new();
        let mut y_index: HashMap<String, usize> = HashMap::new();
        let mut x_labels = Vec::new();
        let mut y_labels = Vec::new();
        let mut cells: HashMap<(usize, usize), f64> = HashMap::new();
        for (i, line) in lines {
            let line = line?;
            let line = line.trim_end_matches('\r');
            if line.trim().is_empty() {
                continue;
            }
            let lineno = i + 1;
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 3 {
                return Err(Error::Parse {
                    line: lineno,
                    msg: format!("expected 3 tab-separated fields, found {}", fields.len()),
                });
            }
            let prob: f64 = fields[2].trim().parse().map_err(|_| Error::Parse {
                line: lineno,
                msg: format!("bad probability {:?}", fields[2]),
            })?;
            if !prob.is_finite() || prob < 0.0 {
                return Err(Error::Parse {
                    line: lineno,
                    msg: format!("probability must be finite and >= 0, found {prob}"),
                });
            }
            let intern = |index: &mut HashMap<String, usize>, labels: &mut Vec<String>, s: &str| {
                *index.entry(s.to_string()).or_insert_with(|| {
                    labels.push(s.to_string());
                    labels.len() - 1
                })
            };
            let x = intern(&mut x_index, &mut x_labels, fields[0]);
            let y = intern(&mut y_index, &mut y_labels, fields[1]);
            if cells.insert((x, y), prob).is_some() {
                return Err(Error::Parse {
                    line: lineno,
                    msg: format!("duplicate cell ({}, {})", fields[0], fields[1]),
                });
            }
        }
        if cells.is_empty() {
            return Err(Error::Empty("distribution has no cells".into()));
        }
        let mut p = Array2::zeros((x_labels.len(), y_labels.len()));
        for (&(x, y), &v) in &cells {
            p[[x, y]] = v;
        }
        let total = p.sum();
        if (total - 1.0).abs() > TSV_NORMALIZATION_TOL {
            return Err(Error::InvalidDistribution(format!(
                "probabilities sum to {total}, expected 1 within {TSV_NORMALIZATION_TOL}"
            )));
        }
        p /= total;
        Self::with_labels(p, x_labels, y_labels)
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::from("x\ty\tp\n");
        for ((x, y), &v) in self.p.indexed_iter() {
            if v > 0.0 {
                out.push_str(&format!(
                    "{}\t{}\t{:e}\n",
                    self.x_labels[x], self.y_labels[y], v
                ));
            }
        }
        out
    }

    pub fn n_x(&self) -> usize {
        self.p.nrows()
    }

    pub fn n_y(&self) -> usize {
        self.p.ncols()
    }

    pub fn probs(&self) -> &Array2<f64> {
        &self.p
    }

    pub fn p(&self, x: usize, y: usize) -> f64 {
        self.p[[x, y]]
    }

    pub fn marginal_x(&self) -> &[f64] {
        &self.px
    }

    pub fn marginal_y(&self) -> &[f64] {
        &self.py
    }

    pub fn x_labels(&self) -> &[String] {
        &self.x_labels
    }

    pub fn y_labels(&self) -> &[String] {
        &self.y_labels
    }

    pub fn is_full_support(&self) -> bool {
        self.p.iter().all(|&v| v > 0.0)
    }

    /// `log p(y | x)`; requires every cell to be positive.
    pub fn log_conditional_y_given_x(&self) -> Result<Array2<f64>> {
        self.require_full_support()?;
        Ok(Array2::from_shape_fn(self.p.dim(), |(x, y)| {
            self.p[[x, y]].ln() - self.px[x].ln()
        }))
    }

    /// Draw `n` i.i.d. cell samples.
    pub fn sample_pairs<R: Rng + ?Sized>(&self, rng: &mut R, n: usize) -> Vec<(usize, usize)> {
        let n_y = self.n_y();
        let flat: Vec<f64> = self.p.iter().copied().collect();
        let table =
            NoiseDistribution::from_counts(&flat, 1.0).expect("distribution has positive mass");
        (0..n)
            .map(|_| {
                let cell = table.sample(rng);
                (cell / n_y, cell % n_y)
            })
            .collect()
    }

    fn require_full_support(&self) -> Result<()> {
        if self.is_full_support() {
            Ok(())
        } else {
            let zeros = self.p.iter().filter(|&&v| v == 0.0).count();
            Err(Error::ZeroSupport(format!("{zeros} zero cells")))
        }
    }
}

/// Negative-to-positive sample ratio `k ≥ 1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ScoreConfig {
    k: u32,
}

impl ScoreConfig {
    pub fn new(k: u32) -> Result<Self> {
        if k == 0 {
            return Err(Error::InvalidArgument(
                "k must be a positive integer".into(),
            ));
        }
        Ok(ScoreConfig { k })
    }

    pub fn k(&self) -> u32 {
        self.k
    }

    fn kf(&self) -> f64 {
        self.k as f64
    }
}

/// Two embedding tables whose row products form `m = X Yᵀ`.
#[derive(Debug, Clone, PartialEq)]
pub struct FactorPair {
    pub x_table: Array2<f64>,
    pub y_table: Array2<f64>,
}

impl FactorPair {
    pub fn new(x_table: Array2<f64>, y_table: Array2<f64>) -> Result<Self> {
        if x_table.ncols() == 0 {
            return Err(Error::InvalidArgument(
                "embedding width d must be >= 1".into(),
            ));
        }
        if x_table.ncols() != y_table.ncols() {
            return Err(Error::DimensionMismatch(format!(
                "x width {} != y width {}",
                x_table.ncols(),
                y_table.ncols()
            )));
        }
        Ok(FactorPair { x_table, y_table })
    }

    pub fn zeros(n_x: usize, n_y: usize, d: usize) -> Result<Self> {
        Self::new(Array2::zeros((n_x, d)), Array2::zeros((n_y, d)))
    }

    /// Uniform on `[-0.5/d, 0.5/d]`.
    pub fn random<R: Rng + ?Sized>(rng: &mut R, n_x: usize, n_y: usize, d: usize) -> Result<Self> {
        if d == 0 {
            return Err(Error::InvalidArgument(
                "embedding width d must be >= 1".into(),
            ));
        }
        let half = 0.5 / d as f64;
        let mut draw = |_| rng.gen_range(-half..half);
        let x = Array2::from_shape_fn((n_x, d), &mut draw);
        let y = Array2::from_shape_fn((n_y, d), &mut draw);
        Self::new(x, y)
    }

    pub fn d(&self) -> usize {
        self.x_table.ncols()
    }

    pub fn matrix(&self) -> Array2<f64> {
        self.x_table.dot(&self.y_table.t())
    }

    fn zeros_like(&self) -> FactorPair {
        FactorPair {
            x_table: Array2::zeros(self.x_table.dim()),
            y_table: Array2::zeros(self.y_table.dim()),
        }
    }

    fn check_shape(&self, dist: &JointDistribution) -> Result<()> {
        if self.x_table.nrows() != dist.n_x() || self.y_table.nrows() != dist.n_y() {
            return Err(Error::DimensionMismatch(format!(
                "factors {}x{} vs distribution {}x{}",
                self.x_table.nrows(),
                self.y_table.nrows(),
                dist.n_x(),
                dist.n_y()
            )));
        }
        Ok(())
    }
}

impl ParamBlocks for FactorPair {
    fn blocks(&self) -> Vec<&[f64]> {
        vec![
            self.x_table.as_slice().expect("standard layout"),
            self.y_table.as_slice().expect("standard layout"),
        ]
    }

    fn blocks_mut(&mut self) -> Vec<&mut [f64]> {
        vec![
            self.x_table.as_slice_mut().expect("standard layout"),
            self.y_table.as_slice_mut().expect("standard layout"),
        ]
    }
}

/// Shifted PMI with a support mask. Masked cells stand for `-∞`; their
/// stored value is meaningless.
#[derive(Debug, Clone, PartialEq)]
pub struct PmiMatrix {
    pub values: Array2<f64>,
    pub support_mask: Array2<bool>,
}

impl PmiMatrix {
    pub fn get(&self, x: usize, y: usize) -> Option<f64> {
        self.support_mask[[x, y]].then(|| self.values[[x, y]])
    }

    pub fn is_full_support(&self) -> bool {
        self.support_mask.iter().all(|&b| b)
    }

    /// The dense matrix, only when every cell is supported.
    pub fn to_matrix(&self) -> Result<Array2<f64>> {
        if self.is_full_support() {
            Ok(self.values.clone())
        } else {
            Err(Error::ZeroSupport(
                "PMI matrix has -inf cells; S(pmi) is only defined on full support".into(),
            ))
        }
    }
}

pub fn pmi_matrix(dist: &JointDistribution, cfg: ScoreConfig) -> PmiMatrix {
    let log_k = cfg.kf().ln();
    let px = dist.marginal_x();
    let py = dist.marginal_y();
    let support_mask = dist.probs().mapv(|v| v > 0.0);
    let values = Array2::from_shape_fn(dist.probs().dim(), |(x, y)| {
        let pxy = dist.p(x, y);
        if pxy > 0.0 {
            pxy.ln() - px[x].ln() - py[y].ln() - log_k
        } else {
            0.0
        }
    });
    PmiMatrix {
        values,
        support_mask,
    }
}

/// `q(x,y) = (p(x,y) + k p(x) p(y)) / (k + 1)`.
pub fn mixture_q(dist: &JointDistribution, cfg: ScoreConfig) -> JointDistribution {
    let k = cfg.kf();
    let px = dist.marginal_x();
    let py = dist.marginal_y();
    let q = Array2::from_shape_fn(dist.probs().dim(), |(x, y)| {
        (dist.p(x, y) + k * px[x] * py[y]) / (k + 1.0)
    });
    let total = q.sum();
    JointDistribution::with_labels(q / total, dist.x_labels.clone(), dist.y_labels.clone())
        .expect("mixture of two distributions is a distribution")
}

/// Bayes posterior `p(z=1 | x, y) = p / (p + k p(x) p(y))`; zero off support.
pub fn posterior(dist: &JointDistribution, cfg: ScoreConfig) -> Array2<f64> {
    let k = cfg.kf();
    let px = dist.marginal_x();
    let py = dist.marginal_y();
    Array2::from_shape_fn(dist.probs().dim(), |(x, y)| {
        let pxy = dist.p(x, y);
        if pxy > 0.0 {
            pxy / (pxy + k * px[x] * py[y])
        } else {
            0.0
        }
    })
}

fn check_matrix(dist: &JointDistribution, m: &Array2<f64>) -> Result<()> {
    if m.dim() != dist.probs().dim() {
        return Err(Error::DimensionMismatch(format!(
            "matrix {:?} vs distribution {:?}",
            m.dim(),
            dist.probs().dim()
        )));
    }
    if let Some(((x, y), v)) = m.indexed_iter().find(|(_, v)| !v.is_finite()) {
        return Err(Error::NonFinite(format!("m({x},{y}) = {v}")));
    }
    Ok(())
}

/// The per-cell objective `f_{x,y}(z)`.
#[inline]
fn cell_score(pxy: f64, noise_mass: f64, k: f64, z: f64) -> f64 {
    let mut s = 0.0;
    if pxy > 0.0 {
        s += pxy * log_sigmoid(z);
    }
    if noise_mass > 0.0 {
        s += k * noise_mass * log_sigmoid(-z);
    }
    s / (k + 1.0)
}

/// The embedding score `S(m)`; always `≤ 0`.
pub fn score(dist: &JointDistribution, cfg: ScoreConfig, m: &Array2<f64>) -> Result<f64> {
    check_matrix(dist, m)?;
    let k = cfg.kf();
    let px = dist.marginal_x();
    let py = dist.marginal_y();
    Ok(m.indexed_iter()
        .map(|((x, y), &z)| cell_score(dist.p(x, y), px[x] * py[y], k, z))
        .sum())
}

/// `S(pmi)`; defined only on full-support distributions.
pub fn score_at_pmi(dist: &JointDistribution, cfg: ScoreConfig) -> Result<f64> {
    let pmi = pmi_matrix(dist, cfg).to_matrix()?;
    score(dist, cfg, &pmi)
}

/// Supremum of `S` over all real matrices. Equals `S(pmi)` on full support;
/// on zero cells it is the limit as `m → -∞` there.
pub fn optimal_score(dist: &JointDistribution, cfg: ScoreConfig) -> f64 {
    let k = cfg.kf();
    let px = dist.marginal_x();
    let py = dist.marginal_y();
    let mut s = 0.0;
    for ((x, y), &pxy) in dist.probs().indexed_iter() {
        let noise = k * px[x] * py[y];
        let total = pxy + noise;
        if total == 0.0 {
            continue;
        }
        if pxy > 0.0 {
            s += pxy * (pxy / total).ln();
        }
        if noise > 0.0 {
            s += noise * (noise / total).ln();
        }
    }
    s / (k + 1.0)
}

/// `KL(p_pmi(z|x,y) ‖ p_m(z|x,y))` under `q(x,y)`, computed from the
/// conditional-KL definition rather than from scores.
pub fn kl_gap(dist: &JointDistribution, cfg: ScoreConfig, m: &Array2<f64>) -> Result<f64> {
    check_matrix(dist, m)?;
    let k = cfg.kf();
    let q = mixture_q(dist, cfg);
    let post = posterior(dist, cfg);
    let mut kl = 0.0;
    for ((x, y), &qxy) in q.probs().indexed_iter() {
        if qxy == 0.0 {
            continue;
        }
        let z = m[[x, y]];
        let p1 = post[[x, y]];
        let p0 = 1.0 - p1;
        let mut inner = 0.0;
        if p1 > 0.0 {
            inner += p1 * (p1.ln() - log_sigmoid(z));
        }
        if p0 > 0.0 {
            // log p0 = log(k p(x)p(y)) - log(p + k p(x)p(y)) avoids cancellation in 1 - p1.
            let noise = k * dist.marginal_x()[x] * dist.marginal_y()[y];
            let log_p0 = noise.ln() - (dist.p(x, y) + noise).ln();
            inner += p0 * (log_p0 - log_sigmoid(-z));
        }
        kl += qxy * inner;
    }
    Ok(kl)
}

/// The three-way joint `p_m(x, y, z) = q(x,y) · p_m(z | x,y)` as an
/// `n_x × n_y × 2` array indexed by `z ∈ {0, 1}`.
pub fn binary_joint(
    dist: &JointDistribution,
    cfg: ScoreConfig,
    m: &Array2<f64>,
) -> Result<Array3<f64>> {
    check_matrix(dist, m)?;
    let q = mixture_q(dist, cfg);
    let (n_x, n_y) = m.dim();
    Ok(Array3::from_shape_fn((n_x, n_y, 2), |(x, y, z)| {
        let s = sigmoid(m[[x, y]]);
        q.p(x, y) * if z == 1 { s } else { 1.0 - s }
    }))
}

/// Unconditional `KL(p_pmi(x,y,z) ‖ p_m(x,y,z))`; the pmi side is built from
/// the posterior so it is defined on any support.
pub fn kl_joint(dist: &JointDistribution, cfg: ScoreConfig, m: &Array2<f64>) -> Result<f64> {
    check_matrix(dist, m)?;
    let q = mixture_q(dist, cfg);
    let post = posterior(dist, cfg);
    let mut kl = 0.0;
    for ((x, y), &qxy) in q.probs().indexed_iter() {
        let z = m[[x, y]];
        for (target, log_model) in [
            (post[[x, y]], log_sigmoid(z)),
            (1.0 - post[[x, y]], log_sigmoid(-z)),
        ] {
            let joint = qxy * target;
            if joint > 0.0 {
                kl += joint * (joint.ln() - (qxy.ln() + log_model));
            }
        }
    }
    Ok(kl)
}

/// `S_cond(m) = Σ f_{x,y}(m(x,y) - log(k p(y)))`, maximized at
/// `m(x,y) = log p(y|x)`.
pub fn cond_score(dist: &JointDistribution, cfg: ScoreConfig, m: &Array2<f64>) -> Result<f64> {
    check_matrix(dist, m)?;
    if let Some(x) = dist.marginal_x().iter().position(|&v| v == 0.0) {
        return Err(Error::ZeroSupport(format!("p(x) = 0 for row {x}")));
    }
    if let Some(y) = dist.marginal_y().iter().position(|&v| v == 0.0) {
        return Err(Error::ZeroSupport(format!("p(y) = 0 for column {y}")));
    }
    let k = cfg.kf();
    let px = dist.marginal_x();
    let py = dist.marginal_y();
    Ok(m.indexed_iter()
        .map(|((x, y), &v)| cell_score(dist.p(x, y), px[x] * py[y], k, v - (k * py[y]).ln()))
        .sum())
}

/// `∂S/∂m(x,y) = [p σ(-m) - k p(x)p(y) σ(m)] / (k+1)`.
pub fn score_gradient_matrix(
    dist: &JointDistribution,
    cfg: ScoreConfig,
    m: &Array2<f64>,
) -> Array2<f64> {
    let k = cfg.kf();
    let px = dist.marginal_x();
    let py = dist.marginal_y();
    Array2::from_shape_fn(m.dim(), |(x, y)| {
        let z = m[[x, y]];
        (dist.p(x, y) * sigmoid(-z) - k * px[x] * py[y] * sigmoid(z)) / (k + 1.0)
    })
}

/// Gradient of `S(X Yᵀ)` with respect to both tables.
pub fn exact_gradient(
    dist: &JointDistribution,
    cfg: ScoreConfig,
    factors: &FactorPair,
) -> Result<FactorPair> {
    factors.check_shape(dist)?;
    let m = factors.matrix();
    let g = score_gradient_matrix(dist, cfg, &m);
    Ok(FactorPair {
        x_table: g.dot(&factors.y_table),
        y_table: g.t().dot(&factors.x_table),
    })
}

fn factor_score(dist: &JointDistribution, cfg: ScoreConfig, factors: &FactorPair) -> Result<f64> {
    let m = factors.matrix();
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::Diverged("embedding matrix overflowed".into()));
    }
    score(dist, cfg, &m)
}

/// Full-batch gradient ascent on `S` from a seeded small random start.
///
/// Each step tries the configured `lr` first and halves it (up to 30 times)
/// until the score does not decrease, so the score sequence is monotone.
/// Stops early once no halving yields progress.
pub fn train_exact(
    dist: &JointDistribution,
    cfg: ScoreConfig,
    d: usize,
    steps: usize,
    lr: f64,
    seed: u64,
) -> Result<FactorPair> {
    if !(lr > 0.0 && lr.is_finite()) {
        return Err(Error::InvalidArgument("lr must be positive".into()));
    }
    let mut rng = seeded_rng(seed, STREAM_INIT);
    let mut factors = FactorPair::random(&mut rng, dist.n_x(), dist.n_y(), d)?;
    let mut current = factor_score(dist, cfg, &factors)?;
    for step in 0..steps {
        let grad = exact_gradient(dist, cfg, &factors)?;
        if grad.global_norm() == 0.0 {
            break;
        }
        let mut eta = lr;
        let mut accepted = false;
        for _ in 0..=MAX_HALVINGS {
            let mut candidate = factors.clone();
            candidate.x_table.scaled_add(eta, &grad.x_table);
            candidate.y_table.scaled_add(eta, &grad.y_table);
            let s = factor_score(dist, cfg, &candidate)?;
            if !s.is_finite() {
                return Err(Error::Diverged(format!("score became {s} at step {step}")));
            }
            if s >= current {
                factors = candidate;
                current = s;
                accepted = true;
                break;
            }
            eta *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    Ok(factors)
}

/// Add `scale ×` the gradient of one sampled term
/// `log σ(x⃗·y⃗) + Σ_i log σ(-x⃗·y⃗_i)` into `grad`.
/// Returns the value of the term.
pub fn accumulate_sampled_gradient(
    factors: &FactorPair,
    x: usize,
    y: usize,
    negatives: &[usize],
    scale: f64,
    grad: &mut FactorPair,
) -> f64 {
    let xv = factors.x_table.row(x);
    let mut dx = ndarray::Array1::<f64>::zeros(factors.d());
    let mut value = 0.0;
    let mut add_term = |target: usize, positive: bool, dx: &mut ndarray::Array1<f64>| {
        let yv = factors.y_table.row(target);
        let z = xv.dot(&yv);
        // d/dz log σ(z) = σ(-z); d/dz log σ(-z) = -σ(z)
        let (v, dz) = if positive {
            (log_sigmoid(z), sigmoid(-z))
        } else {
            (log_sigmoid(-z), -sigmoid(z))
        };
        value += v;
        dx.scaled_add(scale * dz, &yv);
        grad.y_table.row_mut(target).scaled_add(scale * dz, &xv);
    };
    add_term(y, true, &mut dx);
    for &u in negatives {
        add_term(u, false, &mut dx);
    }
    grad.x_table.row_mut(x).scaled_add(1.0, &dx);
    value
}

/// Gradient of one sampled term scaled by `1/(k+1)`, whose expectation over
/// `(x,y) ~ p` and `y_i ~ p(y)` equals [`exact_gradient`].
pub fn sampled_gradient(
    factors: &FactorPair,
    x: usize,
    y: usize,
    negatives: &[usize],
) -> FactorPair {
    let mut grad = factors.zeros_like();
    let scale = 1.0 / (negatives.len() as f64 + 1.0);
    accumulate_sampled_gradient(factors, x, y, negatives, scale, &mut grad);
    grad
}

/// Stochastic ascent on the sampled NEG objective over a stream of observed
/// pairs. Each pair contributes one positive term and `k` negatives drawn from
/// `noise` (which lives on the y alphabet). Pairs are visited in order, in
/// minibatches of `opt.batch_size`, for `opt.epochs` passes; the step size
/// follows `opt`'s per-epoch schedule and updates are clipped at `opt.clip_norm`.
pub fn train_sampled(
    pairs: &[(usize, usize)],
    n_x: usize,
    cfg: ScoreConfig,
    noise: &NoiseDistribution,
    d: usize,
    opt: &TrainConfig,
) -> Result<FactorPair> {
    if pairs.is_empty() {
        return Err(Error::Empty("pair stream".into()));
    }
    opt.validate()?;
    let n_y = noise.len();
    if let Some(&(x, y)) = pairs.iter().find(|&&(x, y)| x >= n_x || y >= n_y) {
        return Err(Error::InvalidArgument(format!(
            "pair ({x}, {y}) outside {n_x}x{n_y} alphabets"
        )));
    }
    let k = cfg.k() as usize;
    let mut init_rng = seeded_rng(opt.seed, STREAM_INIT);
    let mut neg_rng = seeded_rng(opt.seed, STREAM_NEGATIVES);
    let mut factors = FactorPair::random(&mut init_rng, n_x, n_y, d)?;
    let mut grad = factors.zeros_like();
    let mut optimizer = Optimizer::new(opt.optimizer);
    for epoch in 1..=opt.epochs {
        let lr = opt.lr_for_epoch(epoch);
        for batch in pairs.chunks(opt.batch_size) {
            grad.zero();
            // Descent on the negated mean objective.
            let scale = -1.0 / (batch.len() as f64 * (k as f64 + 1.0));
            let mut value = 0.0;
            for &(x, y) in batch {
                let exclude = opt.reject_collisions.then_some(y);
                let negatives = noise.sample_k(&mut neg_rng, k, exclude);
                value += accumulate_sampled_gradient(&factors, x, y, &negatives, scale, &mut grad);
            }
            if !value.is_finite() {
                return Err(Error::Diverged(format!(
                    "sampled objective became {value} in epoch {epoch}"
                )));
            }
            clip_global_norm(&mut grad, opt.clip_norm);
            optimizer.step(&mut factors, &grad, lr);
        }
    }
    Ok(factors)
}

/// Random joint distribution whose cells are i.i.d. uniform on `[lo, 1]`
/// before normalization; each cell is zeroed with probability `zero_prob`
/// (at least one cell always survives).
pub fn random_distribution<R: Rng + ?Sized>(
    rng: &mut R,
    n_x: usize,
    n_y: usize,
    lo: f64,
    zero_prob: f64,
) -> JointDistribution {
    loop {
        let mut p = Array2::from_shape_fn((n_x, n_y), |_| {
            let v = rng.gen_range(lo..=1.0);
            if zero_prob > 0.0 && rng.gen_bool(zero_prob) {
                0.0
            } else {
                v
            }
        });
        let total = p.sum();
        if total > 0.0 {
            p /= total;
            // Renormalize twice so the sum lands within one ulp of 1.
            let total = p.sum();
            p /= total;
            if let Ok(dist) = JointDistribution::new(p) {
                return dist;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn cfg(k: u32) -> ScoreConfig {
        ScoreConfig::new(k).unwrap()
    }

    fn diag_dist() -> JointDistribution {
        JointDistribution::new(array![[0.4, 0.1], [0.1, 0.4]]).unwrap()
    }

    fn uniform_2x2() -> JointDistribution {
        JointDistribution::new(Array2::from_elem((2, 2), 0.25)).unwrap()
    }

    #[test]
    fn pmi_of_independent_uniform() {
        let pmi = pmi_matrix(&uniform_2x2(), cfg(1));
        assert!(pmi.values.iter().all(|v| v.abs() < 1e-15));
        let pmi = pmi_matrix(&uniform_2x2(), cfg(5));
        assert!(pmi.values.iter().all(|v| (v + 5f64.ln()).abs() < 1e-12));
    }

    #[test]
    fn pmi_of_diagonal_dist() {
        let pmi = pmi_matrix(&diag_dist(), cfg(1));
        // log(0.4 / 0.25)
        assert!((pmi.values[[0, 0]] - 0.470_003_629_245_735_5).abs() < 1e-12);
        assert!((pmi.values[[0, 1]] - (0.1f64 / 0.25).ln()).abs() < 1e-12);
    }

    #[test]
    fn pmi_masks_zero_cells() {
        let dist = JointDistribution::new(array![[0.5, 0.0], [0.25, 0.25]]).unwrap();
        let pmi = pmi_matrix(&dist, cfg(1));
        assert_eq!(pmi.get(0, 1), None);
        assert!(pmi.get(0, 0).is_some());
        assert!(matches!(pmi.to_matrix(), Err(Error::ZeroSupport(_))));
        assert!(matches!(
            score_at_pmi(&dist, cfg(1)),
            Err(Error::ZeroSupport(_))
        ));
    }

    #[test]
    fn mixture_of_diagonal() {
        let q = mixture_q(&diag_dist(), cfg(1));
        assert!((q.p(0, 0) - 0.325).abs() < 1e-15);
        assert!((q.probs().sum() - 1.0).abs() < 1e-15);
        let q = mixture_q(&uniform_2x2(), cfg(7));
        assert!(q.probs().iter().all(|&v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn posterior_values() {
        let post = posterior(&uniform_2x2(), cfg(1));
        assert!(post.iter().all(|&v| (v - 0.5).abs() < 1e-15));
        let post = posterior(&uniform_2x2(), cfg(3));
        assert!(post.iter().all(|&v| (v - 0.25).abs() < 1e-15));
        let post = posterior(&diag_dist(), cfg(1));
        assert!((post[[0, 0]] - 0.4 / 0.65).abs() < 1e-15);
    }

    #[test]
    fn score_of_zero_matrix_is_log_half() {
        let s = score(&diag_dist(), cfg(1), &Array2::zeros((2, 2))).unwrap();
        assert!((s - 0.5f64.ln()).abs() < 1e-15);
        let s = score(&diag_dist(), cfg(4), &Array2::zeros((2, 2))).unwrap();
        assert!((s - 0.5f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn score_rejects_non_finite() {
        let mut m = Array2::zeros((2, 2));
        m[[1, 0]] = f64::NAN;
        assert!(matches!(
            score(&diag_dist(), cfg(1), &m),
            Err(Error::NonFinite(_))
        ));
        m[[1, 0]] = f64::NEG_INFINITY;
        assert!(kl_gap(&diag_dist(), cfg(1), &m).is_err());
    }

    #[test]
    fn score_at_pmi_matches_brute_force() {
        // Enumerate (x, y, z): z=1 draws (x,y) from p, z=0 from p(x)p(y) with
        // weight k; the classifier probability of z=1 is σ(pmi).
        let dist = diag_dist();
        let k = 1.0;
        let mut brute = 0.0;
        let px = [0.5, 0.5];
        let py = [0.5, 0.5];
        for x in 0..2 {
            for y in 0..2 {
                let pos = dist.p(x, y);
                let neg = k * px[x] * py[y];
                let c1 = pos / (pos + neg);
                brute += pos * c1.ln() + neg * (1.0 - c1).ln();
            }
        }
        brute /= k + 1.0;
        let s = score_at_pmi(&dist, cfg(1)).unwrap();
        assert!((s - brute).abs() < 1e-14, "{s} vs {brute}");
        assert!((optimal_score(&dist, cfg(1)) - brute).abs() < 1e-14);
    }

    #[test]
    fn kl_gap_zero_at_pmi_and_matches_shift() {
        let dist = diag_dist();
        let pmi = pmi_matrix(&dist, cfg(2)).to_matrix().unwrap();
        assert!(kl_gap(&dist, cfg(2), &pmi).unwrap().abs() < 1e-15);
        let shifted = pmi.mapv(|v| v + 10.0);
        let gap = kl_gap(&dist, cfg(2), &shifted).unwrap();
        let diff = score(&dist, cfg(2), &pmi).unwrap() - score(&dist, cfg(2), &shifted).unwrap();
        assert!(gap > 0.0);
        assert!((gap - diff).abs() < 1e-12);
    }

    #[test]
    fn theorem_holds_with_zero_cells() {
        let dist = JointDistribution::new(array![[0.5, 0.0, 0.1], [0.1, 0.2, 0.1]]).unwrap();
        let m = array![[0.3, -2.0, 1.0], [-0.5, 0.2, 4.0]];
        for k in [1, 3] {
            let lhs = optimal_score(&dist, cfg(k)) - score(&dist, cfg(k), &m).unwrap();
            let rhs = kl_gap(&dist, cfg(k), &m).unwrap();
            assert!((lhs - rhs).abs() < 1e-12);
            assert!((kl_joint(&dist, cfg(k), &m).unwrap() - rhs).abs() < 1e-12);
        }
    }

    #[test]
    fn cond_score_brute_force_and_optimum() {
        // Independent uniform 2x2, k=1, m=0: every cell is
        // (1/2)[0.25 log σ(log 2) + 0.25 log σ(-log 2)].
        let per_cell = 0.5 * (0.25 * (2.0f64 / 3.0).ln() + 0.25 * (1.0f64 / 3.0).ln());
        let s = cond_score(&uniform_2x2(), cfg(1), &Array2::zeros((2, 2))).unwrap();
        assert!((s - 4.0 * per_cell).abs() < 1e-14);

        let dist = JointDistribution::new(array![[0.3, 0.1, 0.05], [0.05, 0.2, 0.3]]).unwrap();
        let opt = dist.log_conditional_y_given_x().unwrap();
        let best = cond_score(&dist, cfg(3), &opt).unwrap();
        let mut rng = seeded_rng(5, 0);
        for _ in 0..50 {
            let pert = opt.mapv(|v| v + rng.gen_range(-0.3..0.3));
            assert!(cond_score(&dist, cfg(3), &pert).unwrap() <= best);
        }
    }

    #[test]
    fn cond_score_rejects_zero_marginal() {
        let dist = JointDistribution::new(array![[0.5, 0.5], [0.0, 0.0]]).unwrap();
        assert!(matches!(
            cond_score(&dist, cfg(1), &Array2::zeros((2, 2))),
            Err(Error::ZeroSupport(_))
        ));
    }

    #[test]
    fn zero_factors_on_independent_have_zero_gradient() {
        let f = FactorPair::zeros(2, 2, 3).unwrap();
        let g = exact_gradient(&uniform_2x2(), cfg(1), &f).unwrap();
        assert!(g.blocks().iter().all(|b| b.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn width_zero_rejected() {
        assert!(FactorPair::zeros(2, 2, 0).is_err());
        assert!(train_exact(&diag_dist(), cfg(1), 0, 10, 1.0, 0).is_err());
    }

    #[test]
    fn train_exact_is_deterministic_and_monotone() {
        let dist = diag_dist();
        let a = train_exact(&dist, cfg(1), 2, 50, 5.0, 9).unwrap();
        let b = train_exact(&dist, cfg(1), 2, 50, 5.0, 9).unwrap();
        assert_eq!(a, b);
        let mut last = f64::NEG_INFINITY;
        for steps in [0, 1, 5, 20, 50] {
            let f = train_exact(&dist, cfg(1), 2, steps, 5.0, 9).unwrap();
            let s = score(&dist, cfg(1), &f.matrix()).unwrap();
            assert!(s >= last);
            last = s;
        }
    }

    #[test]
    fn tsv_round_trip_and_errors() {
        let dist = JointDistribution::new(array![[0.5, 0.0], [0.25, 0.25]]).unwrap();
        let text = dist.to_tsv();
        let back = JointDistribution::from_tsv(text.as_bytes()).unwrap();
        assert_eq!(back.n_x(), 2);
        assert_eq!(back.n_y(), 2);
        assert!((back.p(1, 1) - 0.25).abs() < 1e-15);
        assert_eq!(back.p(0, 1), 0.0);

        let bad_header = "a\tb\tc\nx\ty\t1\n";
        assert!(matches!(
            JointDistribution::from_tsv(bad_header.as_bytes()),
            Err(Error::Parse { .. })
        ));
        let bad_sum = "x\ty\tp\na\tb\t0.5\n";
        assert!(JointDistribution::from_tsv(bad_sum.as_bytes()).is_err());
        let dup = "x\ty\tp\na\tb\t0.5\na\tb\t0.5\n";
        assert!(JointDistribution::from_tsv(dup.as_bytes()).is_err());
        let neg = "x\ty\tp\na\tb\t1.5\na\tc\t-0.5\n";
        assert!(JointDistribution::from_tsv(neg.as_bytes()).is_err());
        let near = "x\ty\tp\na\tb\t0.5000000001\nb\tb\t0.5\n";
        let d = JointDistribution::from_tsv(near.as_bytes()).unwrap();
        assert!((d.probs().sum() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn train_sampled_rejects_empty_stream() {
        let noise = NoiseDistribution::from_counts(&[1.0, 1.0], 1.0).unwrap();
        let opt = TrainConfig::default();
        assert!(matches!(
            train_sampled(&[], 2, cfg(1), &noise, 2, &opt),
            Err(Error::Empty(_))
        ));
    }
}
