//! Bigram Markov chains with known entropy rate, used as a ground truth for
//! language-model training.

use ndarray::{Array1, Array2};
use rand::Rng;

use crate::corpus::EOS;
use crate::error::{Error, Result};
use crate::numeric::log_softmax_in_place;
use crate::sampling::{seeded_rng, NoiseDistribution, SeededRng};

const STATIONARY_TOL: f64 = 1e-15;
const STATIONARY_MAX_ITERS: usize = 100_000;

#[derive(Debug, Clone)]
pub struct BigramChain {
    transition: Array2<f64>,
    rows: Vec<NoiseDistribution>,
    stationary: Array1<f64>,
}

impl BigramChain {
    /// Chain from a row-stochastic matrix with strictly positive entries.
    pub fn new(transition: Array2<f64>) -> Result<Self> {
        let (n, m) = transition.dim();
        if n == 0 || n != m {
            return Err(Error::DimensionMismatch(format!(
                "transition matrix is {n}x{m}"
            )));
        }
        let mut rows = Vec::with_capacity(n);
        for (i, row) in transition.rows().into_iter().enumerate() {
            if row.iter().any(|&p| !(p > 0.0 && p.is_finite())) {
                return Err(Error::InvalidDistribution(format!(
                    "row {i} has a non-positive entry"
                )));
            }
            let sum: f64 = row.sum();
            if (sum - 1.0).abs() > 1e-9 {
                return Err(Error::InvalidDistribution(format!("row {i} sums to {sum}")));
            }
            rows.push(NoiseDistribution::from_probs(row.to_vec(), 1.0)?);
        }
        let stationary = stationary_distribution(&transition)?;
        Ok(BigramChain {
            transition,
            rows,
            stationary,
        })
    }

    /// Random chain whose transition logits are a rank-`rank` product
    /// `U Vᵀ` (entries of unit variance scaled by `scale`) plus a
    /// per-successor popularity offset of unit variance.
    pub fn random_low_rank(n_states: usize, rank: usize, scale: f64, seed: u64) -> Result<Self> {
        if n_states < 2 || rank == 0 {
            return Err(Error::InvalidArgument(
                "need >= 2 states and rank >= 1".into(),
            ));
        }
        let mut rng = seeded_rng(seed, 0);
        let half_width = 3f64.sqrt();
        let mut draw = |r: usize, c: usize| {
            Array2::from_shape_fn((r, c), |_| rng.gen_range(-half_width..half_width))
        };
        let u = draw(n_states, rank) * scale;
        let v = draw(n_states, rank);
        let popularity = draw(1, n_states);
        let mut transition = u.dot(&v.t()) + &popularity;
        for mut row in transition.rows_mut() {
            let mut logits = row.to_vec();
            log_softmax_in_place(&mut logits);
            row.iter_mut().zip(logits).for_each(|(p, l)| *p = l.exp());
        }
        Self::new(transition)
    }

    pub fn n_states(&self) -> usize {
        self.transition.nrows()
    }

    pub fn transition(&self) -> &Array2<f64> {
        &self.transition
    }

    pub fn stationary(&self) -> &Array1<f64> {
        &self.stationary
    }

    /// `-Σ_i π_i Σ_j P_ij log P_ij` in nats.
    pub fn entropy_rate(&self) -> f64 {
        self.transition
            .rows()
            .into_iter()
            .zip(self.stationary.iter())
            .map(|(row, &pi)| -pi * row.iter().map(|&p| p * p.ln()).sum::<f64>())
            .sum()
    }

    /// Perplexity of the chain in the long-sequence limit.
    pub fn perplexity(&self) -> f64 {
        self.entropy_rate().exp()
    }

    /// Mean negative log-likelihood (nats) of `ids[1..]` given their predecessors.
    pub fn mean_nll(&self, ids: &[usize]) -> f64 {
        let total: f64 = ids
            .windows(2)
            .map(|w| -self.transition[[w[0], w[1]]].ln())
            .sum();
        total / (ids.len().saturating_sub(1)) as f64
    }

    /// `len` states starting from a draw of the stationary distribution.
    pub fn generate(&self, rng: &mut SeededRng, len: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(len);
        if len == 0 {
            return out;
        }
        let start = NoiseDistribution::from_probs(self.stationary.to_vec(), 1.0)
            .expect("stationary distribution is valid");
        let mut state = start.sample(rng);
        out.push(state);
        while out.len() < len {
            state = self.rows[state].sample(rng);
            out.push(state);
        }
        out
    }

    /// Token name for state `i`; state 0 is the end-of-sentence marker.
    pub fn token(i: usize) -> String {
        if i == 0 {
            EOS.to_string()
        } else {
            format!("s{i}")
        }
    }

    /// Render a state sequence as text: state 0 ends a line, every other
    /// state is a word. A trailing non-terminated line is closed, so encoding
    /// the text yields `ids` followed by at most one extra end-of-sentence.
    pub fn render(ids: &[usize]) -> String {
        let mut text = String::with_capacity(ids.len() * 4);
        let mut line_open = false;
        for &id in ids {
            if id == 0 {
                text.push('\n');
                line_open = false;
            } else {
                if line_open {
                    text.push(' ');
                }
                text.push_str(&Self::token(id));
                line_open = true;
            }
        }
        if line_open {
            text.push('\n');
        }
        text
    }
}

fn stationary_distribution(transition: &Array2<f64>) -> Result<Array1<f64>> {
    let n = transition.nrows();
    let mut pi = Array1::from_elem(n, 1.0 / n as f64);
    for _ in 0..STATIONARY_MAX_ITERS {
        let mut next = pi.dot(transition);
        next /= next.sum();
        let delta = (&next - &pi).iter().fold(0.0f64, |m, v| m.max(v.abs()));
        pi = next;
        if delta <= STATIONARY_TOL {
            return Ok(pi);
        }
    }
    Err(Error::Diverged(
        "stationary distribution did not converge".into(),
    ))
}
