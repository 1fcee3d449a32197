//! Context encoders with exact analytic gradients.
//!
//! Two encoders map the input-embedding stream to context vectors:
//!
//! * `window`: the mean of the last `window_size` input embeddings through an
//!   affine map and an activation (tanh by default). Cheap; used for gradient
//!   and pipeline tests.
//! * `lstm`: a stack of standard LSTM layers (input, forget, output gates and
//!   a tanh candidate), with dropout on non-recurrent connections only: on
//!   the input, between layers and on the output.
//!
//! Everything is batched: inputs and contexts are `batch × width` matrices,
//! one row per independent stream.
//!
//! Truncated backpropagation: [`EncoderState::detach`] marks an unroll
//! boundary. Values carried across it keep flowing forward, but
//! [`Encoder::backward`] never propagates gradient into them.

use std::collections::VecDeque;
use std::fmt;
use std::str::FromStr;
use std::sync::atomic::{AtomicU64, Ordering};

use ndarray::{s, Array1, Array2, ArrayView2, Axis, Zip};
use rand::Rng;

use crate::error::{Error, Result};
use crate::numeric::{max_relative_error, sigmoid};
use crate::optim::ParamBlocks;
use crate::sampling::{seeded_rng, SeededRng};

/// Scale of the uniform parameter initialization.
pub const INIT_SCALE: f64 = 0.05;
/// Initial LSTM forget-gate bias.
pub const FORGET_BIAS: f64 = 1.0;
/// Where dropout masks are applied, recorded in model metadata.
pub const DROPOUT_PLACEMENT: &str = "input,between-layers,output";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EncoderKind {
    Window,
    Lstm,
}

impl fmt::Display for EncoderKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EncoderKind::Window => "window",
            EncoderKind::Lstm => "lstm",
        })
    }
}

impl FromStr for EncoderKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "window" => Ok(EncoderKind::Window),
            "lstm" => Ok(EncoderKind::Lstm),
            other => Err(Error::InvalidArgument(format!("unknown encoder {other:?}"))),
        }
    }
}

/// Output nonlinearity of the window encoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Tanh,
    Identity,
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Activation::Tanh => "tanh",
            Activation::Identity => "identity",
        })
    }
}

impl FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tanh" => Ok(Activation::Tanh),
            "identity" => Ok(Activation::Identity),
            other => Err(Error::InvalidArgument(format!(
                "unknown activation {other:?}"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderSpec {
    pub kind: EncoderKind,
    pub input_dim: usize,
    pub hidden_dim: usize,
    /// LSTM only.
    pub layers: usize,
    /// Window only.
    pub window_size: usize,
    pub dropout: f64,
    /// Window only.
    pub activation: Activation,
}

impl EncoderSpec {
    pub fn window(input_dim: usize, hidden_dim: usize, window_size: usize) -> Self {
        EncoderSpec {
            kind: EncoderKind::Window,
            input_dim,
            hidden_dim,
            layers: 1,
            window_size,
            dropout: 0.0,
            activation: Activation::Tanh,
        }
    }

    pub fn lstm(input_dim: usize, hidden_dim: usize, layers: usize) -> Self {
        EncoderSpec {
            kind: EncoderKind::Lstm,
            input_dim,
            hidden_dim,
            layers,
            window_size: 1,
            dropout: 0.0,
            activation: Activation::Tanh,
        }
    }

    pub fn with_dropout(mut self, dropout: f64) -> Self {
        self.dropout = dropout;
        self
    }

    pub fn with_activation(mut self, activation: Activation) -> Self {
        self.activation = activation;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.hidden_dim == 0 {
            return Err(Error::InvalidArgument("encoder dims must be >= 1".into()));
        }
        match self.kind {
            EncoderKind::Window if self.window_size == 0 => {
                return Err(Error::InvalidArgument("window_size must be >= 1".into()))
            }
            EncoderKind::Lstm if self.layers == 0 => {
                return Err(Error::InvalidArgument("layers must be >= 1".into()))
            }
            _ => {}
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::InvalidArgument(format!(
                "dropout must lie in [0, 1), got {}",
                self.dropout
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WindowParams {
    /// `hidden × input`.
    pub proj: Array2<f64>,
    pub bias: Array1<f64>,
}

/// Gates are stacked as `[input, forget, output, candidate]` along the rows.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmLayer {
    /// `4·hidden × layer_input`.
    pub w: Array2<f64>,
    /// `4·hidden × hidden`.
    pub u: Array2<f64>,
    pub b: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum EncoderParams {
    Window(WindowParams),
    Lstm(Vec<LstmLayer>),
}

impl EncoderParams {
    pub fn zeros(spec: &EncoderSpec) -> Self {
        let (i, h) = (spec.input_dim, spec.hidden_dim);
        match spec.kind {
            EncoderKind::Window => EncoderParams::Window(WindowParams {
                proj: Array2::zeros((h, i)),
                bias: Array1::zeros(h),
            }),
            EncoderKind::Lstm => EncoderParams::Lstm(
                (0..spec.layers)
                    .map(|l| LstmLayer {
                        w: Array2::zeros((4 * h, if l == 0 { i } else { h })),
                        u: Array2::zeros((4 * h, h)),
                        b: Array1::zeros(4 * h),
                    })
                    .collect(),
            ),
        }
    }

    /// Uniform `[-scale, scale]` everywhere except the LSTM forget-gate
    /// bias, which starts at [`FORGET_BIAS`].
    pub fn init<R: Rng + ?Sized>(spec: &EncoderSpec, rng: &mut R, scale: f64) -> Self {
        let mut params = Self::zeros(spec);
        for block in params.blocks_mut() {
            block
                .iter_mut()
                .for_each(|v| *v = rng.gen_range(-scale..=scale));
        }
        if let EncoderParams::Lstm(layers) = &mut params {
            let h = spec.hidden_dim;
            for layer in layers {
                layer.b.slice_mut(s![h..2 * h]).fill(FORGET_BIAS);
            }
        }
        params
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.zero();
        z
    }
}

impl ParamBlocks for EncoderParams {
    fn blocks(&self) -> Vec<&[f64]> {
        match self {
            EncoderParams::Window(p) => vec![slice(&p.proj), p.bias.as_slice().unwrap()],
            EncoderParams::Lstm(layers) => layers
                .iter()
                .flat_map(|l| [slice(&l.w), slice(&l.u), l.b.as_slice().unwrap()])
                .collect(),
        }
    }

    fn blocks_mut(&mut self) -> Vec<&mut [f64]> {
        match self {
            EncoderParams::Window(p) => vec![
                p.proj.as_slice_mut().unwrap(),
                p.bias.as_slice_mut().unwrap(),
            ],
            EncoderParams::Lstm(layers) => layers
                .iter_mut()
                .flat_map(|l| {
                    [
                        l.w.as_slice_mut().unwrap(),
                        l.u.as_slice_mut().unwrap(),
                        l.b.as_slice_mut().unwrap(),
                    ]
                })
                .collect(),
        }
    }
}

impl EncoderParams {
    /// Block names in [`ParamBlocks`] order.
    pub fn block_names(&self) -> Vec<String> {
        match self {
            EncoderParams::Window(_) => vec!["window.proj".into(), "window.bias".into()],
            EncoderParams::Lstm(layers) => (0..layers.len())
                .flat_map(|l| {
                    [
                        format!("lstm{l}.w"),
                        format!("lstm{l}.u"),
                        format!("lstm{l}.b"),
                    ]
                })
                .collect(),
        }
    }

    /// Block shapes `(rows, cols)` in [`ParamBlocks`] order.
    pub fn block_shapes(&self) -> Vec<(usize, usize)> {
        match self {
            EncoderParams::Window(p) => vec![p.proj.dim(), (p.bias.len(), 1)],
            EncoderParams::Lstm(layers) => layers
                .iter()
                .flat_map(|l| [l.w.dim(), l.u.dim(), (l.b.len(), 1)])
                .collect(),
        }
    }
}

fn slice(a: &Array2<f64>) -> &[f64] {
    a.as_slice().expect("standard layout")
}

static NEXT_SEGMENT: AtomicU64 = AtomicU64::new(1);

fn fresh_segment() -> u64 {
    NEXT_SEGMENT.fetch_add(1, Ordering::Relaxed)
}

#[derive(Debug, Clone)]
struct RingEntry {
    embedding: Array2<f64>,
    /// Step index inside the current unroll segment, `None` when carried
    /// across a truncation boundary.
    origin: Option<usize>,
}

#[derive(Debug, Clone)]
enum StateInner {
    Window {
        ring: VecDeque<RingEntry>,
    },
    Lstm {
        h: Vec<Array2<f64>>,
        c: Vec<Array2<f64>>,
    },
}

/// Recurrent state for a batch of streams.
#[derive(Debug, Clone)]
pub struct EncoderState {
    batch: usize,
    segment: u64,
    position: usize,
    inner: StateInner,
}

impl EncoderState {
    pub fn new(spec: &EncoderSpec, batch: usize) -> Self {
        let inner = match spec.kind {
            EncoderKind::Window => StateInner::Window {
                ring: (0..spec.window_size)
                    .map(|_| RingEntry {
                        embedding: Array2::zeros((batch, spec.input_dim)),
                        origin: None,
                    })
                    .collect(),
            },
            EncoderKind::Lstm => StateInner::Lstm {
                h: vec![Array2::zeros((batch, spec.hidden_dim)); spec.layers],
                c: vec![Array2::zeros((batch, spec.hidden_dim)); spec.layers],
            },
        };
        EncoderState {
            batch,
            segment: fresh_segment(),
            position: 0,
            inner,
        }
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    /// Start a new unroll segment: values are kept, gradient paths are cut.
    pub fn detach(&mut self) {
        self.segment = fresh_segment();
        self.position = 0;
        if let StateInner::Window { ring } = &mut self.inner {
            ring.iter_mut().for_each(|e| e.origin = None);
        }
    }

    /// Top-layer hidden state (LSTM) or the most recent input (window).
    pub fn last_hidden(&self) -> &Array2<f64> {
        match &self.inner {
            StateInner::Window { ring } => &ring.back().expect("window_size >= 1").embedding,
            StateInner::Lstm { h, .. } => h.last().expect("layers >= 1"),
        }
    }
}

/// Dropout behaviour for one forward step.
pub enum Dropout<'a> {
    /// Evaluation mode: identity.
    Off,
    /// Training mode: masks drawn from the generator.
    Train(&'a mut SeededRng),
}

impl Dropout<'_> {
    fn mask(&mut self, p: f64, rows: usize, cols: usize) -> Option<Array2<f64>> {
        match self {
            Dropout::Train(rng) if p > 0.0 => {
                let keep = 1.0 / (1.0 - p);
                Some(Array2::from_shape_fn((rows, cols), |_| {
                    if rng.gen::<f64>() < p {
                        0.0
                    } else {
                        keep
                    }
                }))
            }
            _ => None,
        }
    }
}

fn apply_mask(x: &mut Array2<f64>, mask: &Option<Array2<f64>>) {
    if let Some(m) = mask {
        *x *= m;
    }
}

#[derive(Debug, Clone)]
struct LstmStepCache {
    x: Array2<f64>,
    in_mask: Option<Array2<f64>>,
    h_prev: Array2<f64>,
    c_prev: Array2<f64>,
    i: Array2<f64>,
    f: Array2<f64>,
    o: Array2<f64>,
    g: Array2<f64>,
    tanh_c: Array2<f64>,
}

#[derive(Debug, Clone)]
enum CacheInner {
    Window {
        mean: Array2<f64>,
        out: Array2<f64>,
        origins: Vec<Option<usize>>,
    },
    Lstm {
        layers: Vec<LstmStepCache>,
    },
}

/// Activations of one forward step, consumed by [`Encoder::backward`].
#[derive(Debug, Clone)]
pub struct StepCache {
    segment: u64,
    position: usize,
    out_mask: Option<Array2<f64>>,
    inner: CacheInner,
}

/// Parameter and input gradients for one unroll segment.
#[derive(Debug, Clone)]
pub struct EncoderGradients {
    pub params: EncoderParams,
    /// One `batch × input_dim` matrix per step.
    pub inputs: Vec<Array2<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Encoder {
    pub spec: EncoderSpec,
    pub params: EncoderParams,
}

impl Encoder {
    pub fn new(spec: EncoderSpec, params: EncoderParams) -> Result<Self> {
        spec.validate()?;
        let expected = EncoderParams::zeros(&spec).block_shapes();
        if params.block_shapes() != expected {
            return Err(Error::DimensionMismatch(
                "encoder parameters do not match spec".into(),
            ));
        }
        Ok(Encoder { spec, params })
    }

    pub fn init<R: Rng + ?Sized>(spec: EncoderSpec, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        let params = EncoderParams::init(&spec, rng, INIT_SCALE);
        Ok(Encoder { spec, params })
    }

    pub fn new_state(&self, batch: usize) -> EncoderState {
        EncoderState::new(&self.spec, batch)
    }

    /// One step: consume a `batch × input_dim` input and produce the
    /// `batch × hidden_dim` context, advancing `state`.
    pub fn forward(
        &self,
        state: &mut EncoderState,
        input: ArrayView2<f64>,
        dropout: &mut Dropout<'_>,
    ) -> Result<(Array2<f64>, StepCache)> {
        let batch = state.batch;
        if input.dim() != (batch, self.spec.input_dim) {
            return Err(Error::DimensionMismatch(format!(
                "input {:?}, expected ({batch}, {})",
                input.dim(),
                self.spec.input_dim
            )));
        }
        let position = state.position;
        let (mut out, inner) = match (&self.params, &mut state.inner) {
            (EncoderParams::Window(p), StateInner::Window { ring }) => {
                ring.push_back(RingEntry {
                    embedding: input.to_owned(),
                    origin: Some(position),
                });
                while ring.len() > self.spec.window_size {
                    ring.pop_front();
                }
                let mut mean = Array2::zeros((batch, self.spec.input_dim));
                for e in ring.iter() {
                    mean += &e.embedding;
                }
                mean /= self.spec.window_size as f64;
                let mut out = mean.dot(&p.proj.t()) + &p.bias;
                if self.spec.activation == Activation::Tanh {
                    out.mapv_inplace(f64::tanh);
                }
                let origins = ring.iter().map(|e| e.origin).collect();
                let cache = CacheInner::Window {
                    mean,
                    out: out.clone(),
                    origins,
                };
                (out, cache)
            }
            (EncoderParams::Lstm(layers), StateInner::Lstm { h, c }) => {
                let hd = self.spec.hidden_dim;
                let mut below = input.to_owned();
                let mut caches = Vec::with_capacity(layers.len());
                for (l, layer) in layers.iter().enumerate() {
                    let in_mask = dropout.mask(self.spec.dropout, batch, below.ncols());
                    apply_mask(&mut below, &in_mask);
                    let a = below.dot(&layer.w.t()) + h[l].dot(&layer.u.t()) + &layer.b;
                    let i = a.slice(s![.., 0..hd]).mapv(sigmoid);
                    let f = a.slice(s![.., hd..2 * hd]).mapv(sigmoid);
                    let o = a.slice(s![.., 2 * hd..3 * hd]).mapv(sigmoid);
                    let g = a.slice(s![.., 3 * hd..4 * hd]).mapv(f64::tanh);
                    let c_new = &f * &c[l] + &i * &g;
                    let tanh_c = c_new.mapv(f64::tanh);
                    let h_new = &o * &tanh_c;
                    let h_prev = std::mem::replace(&mut h[l], h_new.clone());
                    let c_prev = std::mem::replace(&mut c[l], c_new);
                    caches.push(LstmStepCache {
                        x: below,
                        in_mask,
                        h_prev,
                        c_prev,
                        i,
                        f,
                        o,
                        g,
                        tanh_c,
                    });
                    below = h_new;
                }
                (below, CacheInner::Lstm { layers: caches })
            }
            _ => {
                return Err(Error::DimensionMismatch(
                    "state was built for a different encoder kind".into(),
                ))
            }
        };
        let out_mask = dropout.mask(self.spec.dropout, batch, self.spec.hidden_dim);
        apply_mask(&mut out, &out_mask);
        state.position += 1;
        Ok((
            out,
            StepCache {
                segment: state.segment,
                position,
                out_mask,
                inner,
            },
        ))
    }

    /// Backpropagate `upstream[t] = ∂L/∂context_t` through one unroll
    /// segment. `caches` must be the full, ordered output of the forward
    /// steps since the last [`EncoderState::detach`].
    pub fn backward(
        &self,
        caches: &[StepCache],
        upstream: &[Array2<f64>],
    ) -> Result<EncoderGradients> {
        if caches.is_empty() {
            return Err(Error::StaleCache("no cached steps".into()));
        }
        if caches.len() != upstream.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} caches but {} upstream gradients",
                caches.len(),
                upstream.len()
            )));
        }
        let segment = caches[0].segment;
        for (t, cache) in caches.iter().enumerate() {
            if cache.segment != segment || cache.position != t {
                return Err(Error::StaleCache(format!(
                    "step {t} belongs to segment {} position {}",
                    cache.segment, cache.position
                )));
            }
        }
        let batch = upstream[0].nrows();
        for u in upstream {
            if u.dim() != (batch, self.spec.hidden_dim) {
                return Err(Error::DimensionMismatch(format!(
                    "upstream gradient {:?}, expected ({batch}, {})",
                    u.dim(),
                    self.spec.hidden_dim
                )));
            }
        }
        let mut grads = self.params.zeros_like();
        let mut inputs = vec![Array2::zeros((batch, self.spec.input_dim)); caches.len()];
        match (&self.params, &mut grads) {
            (EncoderParams::Window(p), EncoderParams::Window(gp)) => {
                let inv_w = 1.0 / self.spec.window_size as f64;
                for (cache, up) in caches.iter().zip(upstream) {
                    let CacheInner::Window { mean, out, origins } = &cache.inner else {
                        return Err(Error::StaleCache("cache kind mismatch".into()));
                    };
                    let mut dpre = up.clone();
                    apply_mask(&mut dpre, &cache.out_mask);
                    if self.spec.activation == Activation::Tanh {
                        Zip::from(&mut dpre)
                            .and(out)
                            .for_each(|d, &y| *d *= 1.0 - y * y);
                    }
                    gp.proj += &dpre.t().dot(mean);
                    gp.bias += &dpre.sum_axis(Axis(0));
                    let dmean = dpre.dot(&p.proj) * inv_w;
                    for origin in origins.iter().flatten() {
                        inputs[*origin] += &dmean;
                    }
                }
            }
            (EncoderParams::Lstm(layers), EncoderParams::Lstm(glayers)) => {
                let hd = self.spec.hidden_dim;
                let n_layers = layers.len();
                let mut dh_next = vec![Array2::<f64>::zeros((batch, hd)); n_layers];
                let mut dc_next = vec![Array2::<f64>::zeros((batch, hd)); n_layers];
                for t in (0..caches.len()).rev() {
                    let CacheInner::Lstm { layers: lc } = &caches[t].inner else {
                        return Err(Error::StaleCache("cache kind mismatch".into()));
                    };
                    let mut dh_above = upstream[t].clone();
                    apply_mask(&mut dh_above, &caches[t].out_mask);
                    for l in (0..n_layers).rev() {
                        let c = &lc[l];
                        let dh = &dh_above + &dh_next[l];
                        let d_o = &dh * &c.tanh_c;
                        let mut dc = &dh * &c.o * &c.tanh_c.mapv(|v| 1.0 - v * v);
                        dc += &dc_next[l];
                        let mut da = Array2::<f64>::zeros((batch, 4 * hd));
                        Zip::from(da.slice_mut(s![.., 0..hd]))
                            .and(&dc)
                            .and(&c.g)
                            .and(&c.i)
                            .for_each(|d, &dc, &g, &i| *d = dc * g * i * (1.0 - i));
                        Zip::from(da.slice_mut(s![.., hd..2 * hd]))
                            .and(&dc)
                            .and(&c.c_prev)
                            .and(&c.f)
                            .for_each(|d, &dc, &cp, &f| *d = dc * cp * f * (1.0 - f));
                        Zip::from(da.slice_mut(s![.., 2 * hd..3 * hd]))
                            .and(&d_o)
                            .and(&c.o)
                            .for_each(|d, &d_o, &o| *d = d_o * o * (1.0 - o));
                        Zip::from(da.slice_mut(s![.., 3 * hd..4 * hd]))
                            .and(&dc)
                            .and(&c.i)
                            .and(&c.g)
                            .for_each(|d, &dc, &i, &g| *d = dc * i * (1.0 - g * g));
                        dc_next[l] = dc * &c.f;
                        let gl = &mut glayers[l];
                        gl.w += &da.t().dot(&c.x);
                        gl.u += &da.t().dot(&c.h_prev);
                        gl.b += &da.sum_axis(Axis(0));
                        dh_next[l] = da.dot(&layers[l].u);
                        let mut dx = da.dot(&layers[l].w);
                        apply_mask(&mut dx, &c.in_mask);
                        if l == 0 {
                            inputs[t] = dx;
                        } else {
                            dh_above = dx;
                        }
                    }
                }
                // dh_next / dc_next now hold gradients for the carried state;
                // the truncation boundary drops them.
            }
            _ => unreachable!("gradient buffer mirrors parameters"),
        }
        Ok(EncoderGradients {
            params: grads,
            inputs,
        })
    }
}

/// Worst relative error per parameter block (and for the inputs).
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub blocks: Vec<(String, f64)>,
}

impl GradCheckReport {
    pub fn worst(&self) -> f64 {
        self.blocks.iter().map(|(_, e)| *e).fold(0.0, f64::max)
    }
}

impl fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (name, err) in &self.blocks {
            writeln!(f, "{name}\t{err:.3e}")?;
        }
        write!(f, "worst\t{:.3e}", self.worst())
    }
}

/// Step for central differences.
pub const FD_STEP: f64 = 1e-5;
/// Magnitude below which gradient components are compared absolutely.
pub const FD_FLOOR: f64 = 1e-3;

/// Compare [`Encoder::backward`] with central differences of a random
/// linear functional of the contexts over one unroll segment.
///
/// The state entering the segment is produced by a few warm-up steps, so the
/// check also covers the truncation boundary (carried state is held fixed).
/// With `spec.dropout > 0` the same masks are replayed for every evaluation.
pub fn grad_check(spec: &EncoderSpec, seed: u64, unroll: usize) -> Result<GradCheckReport> {
    spec.validate()?;
    let batch = 2;
    let warmup = 3;
    let mut rng = seeded_rng(seed, 0);
    let params = EncoderParams::init(spec, &mut rng, 0.5);
    let encoder = Encoder::new(spec.clone(), params)?;
    let mut draw = |r: usize, c: usize| Array2::from_shape_fn((r, c), |_| rng.gen_range(-1.0..1.0));
    let warm_inputs: Vec<_> = (0..warmup).map(|_| draw(batch, spec.input_dim)).collect();
    let inputs: Vec<_> = (0..unroll).map(|_| draw(batch, spec.input_dim)).collect();
    let probes: Vec<_> = (0..unroll).map(|_| draw(batch, spec.hidden_dim)).collect();

    let mut state = encoder.new_state(batch);
    for x in &warm_inputs {
        encoder.forward(&mut state, x.view(), &mut Dropout::Off)?;
    }
    state.detach();
    let carried = state;

    let mask_seed = seed ^ 0x9e37_79b9_7f4a_7c15;
    let run = |enc: &Encoder, xs: &[Array2<f64>]| -> Result<(f64, Vec<StepCache>)> {
        let mut st = carried.clone();
        let mut mask_rng = seeded_rng(mask_seed, 1);
        let mut dropout = Dropout::Train(&mut mask_rng);
        let mut loss = 0.0;
        let mut caches = Vec::new();
        for (x, r) in xs.iter().zip(&probes) {
            let (ctx, cache) = enc.forward(&mut st, x.view(), &mut dropout)?;
            loss += (&ctx * r).sum();
            caches.push(cache);
        }
        Ok((loss, caches))
    };

    let (_, caches) = run(&encoder, &inputs)?;
    let analytic = encoder.backward(&caches, &probes)?;

    let mut blocks = Vec::new();
    let names = encoder.params.block_names();
    let n_blocks = names.len();
    for (bi, name) in names.into_iter().enumerate() {
        let len = encoder.params.blocks()[bi].len();
        let mut numeric = vec![0.0; len];
        for j in 0..len {
            let mut plus = encoder.clone();
            plus.params.blocks_mut()[bi][j] += FD_STEP;
            let mut minus = encoder.clone();
            minus.params.blocks_mut()[bi][j] -= FD_STEP;
            numeric[j] = (run(&plus, &inputs)?.0 - run(&minus, &inputs)?.0) / (2.0 * FD_STEP);
        }
        let err = max_relative_error(analytic.params.blocks()[bi], &numeric, FD_FLOOR);
        blocks.push((name, err));
    }
    debug_assert_eq!(blocks.len(), n_blocks);

    let mut worst_input: f64 = 0.0;
    for t in 0..unroll {
        let mut numeric = Array2::zeros((batch, spec.input_dim));
        for ((r, c), v) in numeric.indexed_iter_mut() {
            let mut xs = inputs.clone();
            xs[t][[r, c]] += FD_STEP;
            let up = run(&encoder, &xs)?.0;
            xs[t][[r, c]] -= 2.0 * FD_STEP;
            let down = run(&encoder, &xs)?.0;
            *v = (up - down) / (2.0 * FD_STEP);
        }
        let err = max_relative_error(
            analytic.inputs[t].as_slice().unwrap(),
            numeric.as_slice().unwrap(),
            FD_FLOOR,
        );
        worst_input = worst_input.max(err);
    }
    blocks.push(("inputs".into(), worst_input));
    Ok(GradCheckReport { blocks })
}
