//! Training configuration, learning-rate schedule, gradient clipping and the
//! two optimizers (SGD with per-epoch decay, adaptive moments).

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::sampling::DEFAULT_ALPHA;

/// Anything that exposes its trainable values as flat blocks.
///
/// `blocks` and `blocks_mut` must list the same blocks in the same order.
pub trait ParamBlocks {
    fn blocks(&self) -> Vec<&[f64]>;
    fn blocks_mut(&mut self) -> Vec<&mut [f64]>;

    fn num_params(&self) -> usize {
        self.blocks().iter().map(|b| b.len()).sum()
    }

    fn zero(&mut self) {
        for b in self.blocks_mut() {
            b.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    fn global_norm(&self) -> f64 {
        self.blocks()
            .iter()
            .flat_map(|b| b.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    fn is_finite(&self) -> bool {
        self.blocks()
            .iter()
            .all(|b| b.iter().all(|v| v.is_finite()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizerKind {
    SgdDecay,
    AdaptiveMoments,
}

impl fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            OptimizerKind::SgdDecay => "sgd_decay",
            OptimizerKind::AdaptiveMoments => "adaptive_moments",
        })
    }
}

impl FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sgd_decay" | "sgd" => Ok(OptimizerKind::SgdDecay),
            "adaptive_moments" | "adam" => Ok(OptimizerKind::AdaptiveMoments),
            other => Err(Error::InvalidArgument(format!(
                "unknown optimizer {other:?}"
            ))),
        }
    }
}

/// Everything that determines a training run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub optimizer: OptimizerKind,
    pub lr: f64,
    pub decay_factor: f64,
    /// 1-based epoch after which the per-epoch decay starts applying.
    pub decay_start_epoch: usize,
    pub epochs: usize,
    pub clip_norm: f64,
    pub batch_size: usize,
    pub unroll: usize,
    pub k: usize,
    pub alpha: f64,
    pub seed: u64,
    /// Share one negative set across a whole batch step instead of redrawing per position.
    pub share_negatives: bool,
    /// Redraw negatives that collide with the positive word.
    pub reject_collisions: bool,
    /// Drop the trailing partial unroll window of each epoch.
    pub drop_partial_windows: bool,
    /// Constant `log Z_c` used by the NCE logit.
    pub nce_log_z: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            optimizer: OptimizerKind::SgdDecay,
            lr: 1.0,
            decay_factor: 1.2,
            decay_start_epoch: 6,
            epochs: 39,
            clip_norm: 5.0,
            batch_size: 20,
            unroll: 20,
            k: 100,
            alpha: DEFAULT_ALPHA,
            seed: 1,
            share_negatives: false,
            reject_collisions: false,
            drop_partial_windows: false,
            nce_log_z: 0.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::InvalidArgument(msg.to_string()));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be positive");
        }
        if !(self.decay_factor >= 1.0 && self.decay_factor.is_finite()) {
            return bad("decay_factor must be >= 1");
        }
        if self.epochs == 0 {
            return bad("epochs must be positive");
        }
        if self.clip_norm.is_nan() || self.clip_norm <= 0.0 {
            return bad("clip_norm must be positive");
        }
        if self.batch_size == 0 || self.unroll == 0 {
            return bad("batch_size and unroll must be positive");
        }
        if self.k == 0 {
            return bad("k must be positive");
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return bad("alpha must lie in [0, 1]");
        }
        if !self.nce_log_z.is_finite() {
            return bad("nce_log_z must be finite");
        }
        Ok(())
    }

    /// Learning rate in effect during `epoch` (1-based).
    pub fn lr_for_epoch(&self, epoch: usize) -> f64 {
        let decays = epoch.saturating_sub(self.decay_start_epoch.max(1));
        self.lr / self.decay_factor.powi(decays as i32)
    }
}

/// Rescale `grads` so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm<P: ParamBlocks + ?Sized>(grads: &mut P, max_norm: f64) -> f64 {
    let norm = grads.global_norm();
    if norm > max_norm {
        let scale = max_norm / norm;
        for b in grads.blocks_mut() {
            b.iter_mut().for_each(|v| *v *= scale);
        }
    }
    norm
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Descent optimizer over [`ParamBlocks`]; minimizes the loss whose gradient is passed.
#[derive(Debug, Clone)]
pub enum Optimizer {
    Sgd,
    Adam {
        step: u64,
        first: Vec<Vec<f64>>,
        second: Vec<Vec<f64>>,
    },
}

impl Optimizer {
    pub fn new(kind: OptimizerKind) -> Self {
        match kind {
            OptimizerKind::SgdDecay => Optimizer::Sgd,
            OptimizerKind::AdaptiveMoments => Optimizer::Adam {
                step: 0,
                first: Vec::new(),
                second: Vec::new(),
            },
        }
    }

    pub fn step<P, G>(&mut self, params: &mut P, grads: &G, lr: f64)
    where
        P: ParamBlocks + ?Sized,
        G: ParamBlocks + ?Sized,
    {
        let mut params = params.blocks_mut();
        let grads = grads.blocks();
        assert_eq!(params.len(), grads.len(), "parameter/gradient block count");
        match self {
            Optimizer::Sgd => {
                for (p, g) in params.iter_mut().zip(&grads) {
                    for (pv, gv) in p.iter_mut().zip(g.iter()) {
                        *pv -= lr * gv;
                    }
                }
            }
            Optimizer::Adam {
                step,
                first,
                second,
            } => {
                if first.is_empty() {
                    *first = grads.iter().map(|g| vec![0.0; g.len()]).collect();
                    *second = first.clone();
                }
                *step += 1;
                let bc1 = 1.0 - ADAM_BETA1.powi(*step as i32);
                let bc2 = 1.0 - ADAM_BETA2.powi(*step as i32);
                for (((p, g), m), v) in params.iter_mut().zip(&grads).zip(first).zip(second) {
                    for i in 0..p.len() {
                        let gi = g[i];
                        m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * gi;
                        v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * gi * gi;
                        let mhat = m[i] / bc1;
                        let vhat = v[i] / bc2;
                        p[i] -= lr * mhat / (vhat.sqrt() + ADAM_EPS);
                    }
                }
            }
        }
    }
}
