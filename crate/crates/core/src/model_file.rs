//! Binary model files.
//!
//! Layout (all integers and floats little-endian):
//!
//! ```text
//! "NEGF"  u32 version  u8 kind
//! kind = LM:    u8 mode, u64 |V|, u64 d, encoder spec, f64 alpha, u64 k,
//!               u64 seed, f64 log_z, str config_hash, str rng, str dropout,
//!               vocabulary (u64 n, then n × (str token, u64 count))
//! kind = JOINT: u64 n_x, u64 n_y, u64 d, u32 k, u64 seed,
//!               labels (u64 n, then n × str) for x and y
//! u32 block count, then per block: str name, u64 rows, u64 cols, rows×cols f64
//! 32-byte SHA-256 of everything above
//! ```
//!
//! Strings are a u32 byte length followed by UTF-8.

use std::fs;
use std::path::Path;

use ndarray::Array2;
use sha2::{Digest, Sha256};

use crate::corpus::Vocabulary;
use crate::distlab::FactorPair;
use crate::encoder::{Activation, Encoder, EncoderKind, EncoderParams, EncoderSpec};
use crate::error::{Error, Result};
use crate::lm::{LanguageModel, LmParams, Mode, ModelMetadata};
use crate::optim::ParamBlocks;
use crate::sampling::NoiseDistribution;

pub const MAGIC: &[u8; 4] = b"NEGF";
pub const VERSION: u32 = 1;
const CHECKSUM_LEN: usize = 32;
const KIND_LM: u8 = 0;
const KIND_JOINT: u8 = 1;

/// Embedding factors trained on a joint distribution.
#[derive(Debug, Clone, PartialEq)]
pub struct JointModel {
    pub factors: FactorPair,
    pub k: u32,
    pub seed: u64,
    pub x_labels: Vec<String>,
    pub y_labels: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum StoredModel {
    Lm(Box<LanguageModel>),
    Joint(JointModel),
}

fn mode_tag(mode: Mode) -> u8 {
    match mode {
        Mode::Nce => 0,
        Mode::Neg => 1,
        Mode::Neglm => 2,
        Mode::NeglmB => 3,
    }
}

fn mode_from_tag(tag: u8) -> Result<Mode> {
    Mode::ALL
        .into_iter()
        .find(|m| mode_tag(*m) == tag)
        .ok_or_else(|| Error::ModelFile(format!("unknown mode tag {tag}")))
}

#[derive(Default)]
struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn usize(&mut self, v: usize) {
        self.u64(v as u64);
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.0.extend_from_slice(s.as_bytes());
    }
    fn strings(&mut self, items: &[String]) {
        self.usize(items.len());
        items.iter().for_each(|s| self.str(s));
    }
    fn blocks(&mut self, names: &[String], shapes: &[(usize, usize)], data: &[&[f64]]) {
        self.u32(names.len() as u32);
        for ((name, &(r, c)), values) in names.iter().zip(shapes).zip(data) {
            debug_assert_eq!(r * c, values.len());
            self.str(name);
            self.usize(r);
            self.usize(c);
            values.iter().for_each(|&v| self.f64(v));
        }
    }
    fn finish(mut self) -> Vec<u8> {
        let digest = Sha256::digest(&self.0);
        self.0.extend_from_slice(&digest);
        self.0
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::ModelFile("truncated file".into()))?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn usize(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::ModelFile("size overflows usize".into()))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn str(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| Error::ModelFile("invalid UTF-8".into()))
    }
    fn strings(&mut self) -> Result<Vec<String>> {
        let n = self.usize()?;
        (0..n).map(|_| self.str()).collect()
    }
    /// Fill `targets` (in order) from the stored blocks, checking names and shapes.
    fn blocks(
        &mut self,
        names: &[String],
        shapes: &[(usize, usize)],
        targets: Vec<&mut [f64]>,
    ) -> Result<()> {
        let count = self.u32()? as usize;
        if count != names.len() {
            return Err(Error::ModelFile(format!(
                "expected {} blocks, found {count}",
                names.len()
            )));
        }
        for ((name, &(r, c)), target) in names.iter().zip(shapes).zip(targets) {
            let stored = self.str()?;
            let (sr, sc) = (self.usize()?, self.usize()?);
            if &stored != name || (sr, sc) != (r, c) {
                return Err(Error::ModelFile(format!(
                    "block {stored} {sr}x{sc} does not match expected {name} {r}x{c}"
                )));
            }
            for v in target.iter_mut() {
                *v = self.f64()?;
            }
        }
        Ok(())
    }
}

fn encoder_kind_tag(kind: EncoderKind) -> u8 {
    match kind {
        EncoderKind::Window => 0,
        EncoderKind::Lstm => 1,
    }
}

fn write_spec(w: &mut Writer, spec: &EncoderSpec) {
    w.u8(encoder_kind_tag(spec.kind));
    w.usize(spec.input_dim);
    w.usize(spec.hidden_dim);
    w.usize(spec.layers);
    w.usize(spec.window_size);
    w.f64(spec.dropout);
    w.u8(match spec.activation {
        Activation::Tanh => 0,
        Activation::Identity => 1,
    });
}

fn read_spec(r: &mut Reader<'_>) -> Result<EncoderSpec> {
    let kind = match r.u8()? {
        0 => EncoderKind::Window,
        1 => EncoderKind::Lstm,
        t => return Err(Error::ModelFile(format!("unknown encoder tag {t}"))),
    };
    let spec = EncoderSpec {
        kind,
        input_dim: r.usize()?,
        hidden_dim: r.usize()?,
        layers: r.usize()?,
        window_size: r.usize()?,
        dropout: r.f64()?,
        activation: match r.u8()? {
            0 => Activation::Tanh,
            1 => Activation::Identity,
            t => return Err(Error::ModelFile(format!("unknown activation tag {t}"))),
        },
    };
    spec.validate()
        .map_err(|e| Error::ModelFile(format!("stored encoder spec: {e}")))?;
    Ok(spec)
}

fn lm_shapes(vocab: usize, spec: &EncoderSpec, enc: &EncoderParams) -> Vec<(usize, usize)> {
    let mut shapes = vec![
        (vocab, spec.input_dim),
        (vocab, spec.hidden_dim),
        (1, vocab),
    ];
    shapes.extend(enc.block_shapes());
    shapes
}

pub fn encode_lm(model: &LanguageModel) -> Vec<u8> {
    let mut w = Writer::default();
    w.0.extend_from_slice(MAGIC);
    w.u32(VERSION);
    w.u8(KIND_LM);
    w.u8(mode_tag(model.mode));
    w.usize(model.vocab_size());
    w.usize(model.spec().hidden_dim);
    write_spec(&mut w, model.spec());
    w.f64(model.alpha());
    w.usize(model.k);
    w.u64(model.metadata.seed);
    w.f64(model.nce_log_z);
    w.str(&model.metadata.config_hash);
    w.str(&model.metadata.rng);
    w.str(&model.metadata.dropout_placement);
    w.usize(model.vocab.len());
    for (t, &c) in model.vocab.tokens().iter().zip(model.vocab.counts()) {
        w.str(t);
        w.u64(c);
    }
    let shapes = lm_shapes(
        model.vocab_size(),
        model.spec(),
        &model.params.encoder.params,
    );
    w.blocks(&model.params.block_names(), &shapes, &model.params.blocks());
    w.finish()
}

pub fn encode_joint(model: &JointModel) -> Vec<u8> {
    let f = &model.factors;
    let mut w = Writer::default();
    w.0.extend_from_slice(MAGIC);
    w.u32(VERSION);
    w.u8(KIND_JOINT);
    w.usize(f.x_table.nrows());
    w.usize(f.y_table.nrows());
    w.usize(f.d());
    w.u32(model.k);
    w.u64(model.seed);
    w.strings(&model.x_labels);
    w.strings(&model.y_labels);
    let names = ["x_table".to_string(), "y_table".to_string()];
    let shapes = [f.x_table.dim(), f.y_table.dim()];
    w.blocks(&names, &shapes, &f.blocks());
    w.finish()
}

/// Parse a model file, validating magic, version and checksum.
pub fn decode(bytes: &[u8]) -> Result<StoredModel> {
    if bytes.len() < MAGIC.len() + 4 + CHECKSUM_LEN || &bytes[..4] != MAGIC {
        return Err(Error::ModelFile("not a model file".into()));
    }
    let (body, checksum) = bytes.split_at(bytes.len() - CHECKSUM_LEN);
    if Sha256::digest(body).as_slice() != checksum {
        return Err(Error::Checksum);
    }
    let mut r = Reader { buf: body, pos: 4 };
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::ModelFile(format!("unsupported version {version}")));
    }
    let model = match r.u8()? {
        KIND_LM => StoredModel::Lm(Box::new(decode_lm(&mut r)?)),
        KIND_JOINT => StoredModel::Joint(decode_joint(&mut r)?),
        t => return Err(Error::ModelFile(format!("unknown model kind {t}"))),
    };
    if r.pos != body.len() {
        return Err(Error::ModelFile("trailing bytes".into()));
    }
    Ok(model)
}

fn decode_lm(r: &mut Reader<'_>) -> Result<LanguageModel> {
    let mode = mode_from_tag(r.u8()?)?;
    let n = r.usize()?;
    let d = r.usize()?;
    let spec = read_spec(r)?;
    if spec.hidden_dim != d {
        return Err(Error::ModelFile("d disagrees with encoder spec".into()));
    }
    let alpha = r.f64()?;
    let k = r.usize()?;
    let seed = r.u64()?;
    let nce_log_z = r.f64()?;
    let metadata = ModelMetadata {
        seed,
        config_hash: r.str()?,
        rng: r.str()?,
        dropout_placement: r.str()?,
    };
    let vn = r.usize()?;
    if vn != n {
        return Err(Error::ModelFile(
            "vocabulary size disagrees with header".into(),
        ));
    }
    let mut tokens = Vec::with_capacity(n);
    let mut counts = Vec::with_capacity(n);
    for _ in 0..n {
        tokens.push(r.str()?);
        counts.push(r.u64()?);
    }
    let vocab = Vocabulary::from_parts(tokens, counts)?;
    let noise = NoiseDistribution::from_counts(&vocab.unigram_counts(), alpha)?;
    let enc_params = EncoderParams::zeros(&spec);
    let shapes = lm_shapes(n, &spec, &enc_params);
    let mut params = LmParams {
        input_table: Array2::zeros((n, spec.input_dim)),
        word_table: Array2::zeros((n, d)),
        bias: ndarray::Array1::zeros(n),
        encoder: Encoder::new(spec, enc_params)?,
    };
    let names = params.block_names();
    r.blocks(&names, &shapes, params.blocks_mut())?;
    Ok(LanguageModel {
        vocab,
        params,
        mode,
        noise,
        k,
        nce_log_z,
        metadata,
    })
}

fn decode_joint(r: &mut Reader<'_>) -> Result<JointModel> {
    let (n_x, n_y, d) = (r.usize()?, r.usize()?, r.usize()?);
    let k = r.u32()?;
    let seed = r.u64()?;
    let x_labels = r.strings()?;
    let y_labels = r.strings()?;
    if x_labels.len() != n_x || y_labels.len() != n_y {
        return Err(Error::ModelFile("label count disagrees with header".into()));
    }
    let mut factors = FactorPair::zeros(n_x, n_y, d)?;
    let names = ["x_table".to_string(), "y_table".to_string()];
    let shapes = [(n_x, d), (n_y, d)];
    r.blocks(&names, &shapes, factors.blocks_mut())?;
    Ok(JointModel {
        factors,
        k,
        seed,
        x_labels,
        y_labels,
    })
}

pub fn save_lm(model: &LanguageModel, path: &Path) -> Result<()> {
    fs::write(path, encode_lm(model))?;
    Ok(())
}

pub fn save_joint(model: &JointModel, path: &Path) -> Result<()> {
    fs::write(path, encode_joint(model))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<StoredModel> {
    decode(&fs::read(path)?)
}

pub fn load_lm(path: &Path) -> Result<LanguageModel> {
    match load(path)? {
        StoredModel::Lm(m) => Ok(*m),
        StoredModel::Joint(_) => Err(Error::ModelFile(
            "file holds joint-distribution factors".into(),
        )),
    }
}
