//! Vocabulary construction, token streams and truncated-BPTT batching.
//!
//! Text is whitespace-tokenized without any normalization; every line ends
//! with an `<eos>` token. Words outside the retained vocabulary map to
//! `<unk>`. The literal tokens `<eos>` and `<unk>` in the input are treated
//! as the special ids.

use std::collections::HashMap;
use std::io::{BufRead, Write};

use crate::error::{Error, Result};

pub const EOS: &str = "<eos>";
pub const UNK: &str = "<unk>";

#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
    counts: Vec<u64>,
    eos: usize,
    unk: usize,
}

impl Vocabulary {
    /// Build from training text, keeping at most `max_size` regular words
    /// (ranked by count, ties broken lexicographically) with count at least
    /// `min_count`. `<eos>` and `<unk>` are always added on top. Ids are
    /// assigned in rank order over the final token set; counts are those of
    /// the encoded training stream, so trimmed words add to `<unk>`.
    pub fn build(text: &str, max_size: Option<usize>, min_count: Option<u64>) -> Result<Self> {
        if text.trim().is_empty() {
            return Err(Error::Empty("training text".into()));
        }
        let mut raw: HashMap<&str, u64> = HashMap::new();
        let mut eos_count = 0u64;
        let mut unk_count = 0u64;
        for line in text.lines() {
            for tok in line.split_whitespace() {
                match tok {
                    EOS => eos_count += 1,
                    UNK => unk_count += 1,
                    _ => *raw.entry(tok).or_insert(0) += 1,
                }
            }
            eos_count += 1;
        }
        let mut ranked: Vec<(&str, u64)> = raw.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        let min_count = min_count.unwrap_or(1);
        let keep = max_size.unwrap_or(usize::MAX);
        let mut retained = Vec::new();
        for (i, (tok, c)) in ranked.into_iter().enumerate() {
            if i < keep && c >= min_count {
                retained.push((tok.to_string(), c));
            } else {
                unk_count += c;
            }
        }
        retained.push((EOS.to_string(), eos_count));
        retained.push((UNK.to_string(), unk_count));
        retained.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let (tokens, counts): (Vec<String>, Vec<u64>) = retained.into_iter().unzip();
        Self::from_parts(tokens, counts)
    }

    /// Rebuild from an id-ordered token list (as stored in a model file).
    pub fn from_parts(tokens: Vec<String>, counts: Vec<u64>) -> Result<Self> {
        if tokens.len() != counts.len() {
            return Err(Error::DimensionMismatch(
                "tokens and counts differ in length".into(),
            ));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::InvalidArgument(format!("duplicate token {t:?}")));
            }
        }
        let eos = *index
            .get(EOS)
            .ok_or_else(|| Error::InvalidArgument("vocabulary lacks <eos>".into()))?;
        let unk = *index
            .get(UNK)
            .ok_or_else(|| Error::InvalidArgument("vocabulary lacks <unk>".into()))?;
        Ok(Vocabulary {
            tokens,
            index,
            counts,
            eos,
            unk,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn eos(&self) -> usize {
        self.eos
    }

    pub fn unk(&self) -> usize {
        self.unk
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(self.unk)
    }

    pub fn get(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn count(&self, token: &str) -> Option<u64> {
        self.get(token).map(|i| self.counts[i])
    }

    /// Counts as floats, ready for [`crate::sampling::NoiseDistribution::from_counts`].
    pub fn unigram_counts(&self) -> Vec<f64> {
        self.counts.iter().map(|&c| c as f64).collect()
    }

    /// Map text to ids, appending `<eos>` after every line.
    pub fn encode(&self, text: &str) -> Vec<usize> {
        let mut ids = Vec::new();
        for line in text.lines() {
            ids.extend(line.split_whitespace().map(|t| self.id(t)));
            ids.push(self.eos);
        }
        ids
    }

    /// Inverse of [`Vocabulary::encode`] up to `<unk>` collapse and spacing.
    pub fn decode(&self, ids: &[usize]) -> String {
        let mut out = String::new();
        let mut line_start = true;
        for &id in ids {
            if id == self.eos {
                out.push('\n');
                line_start = true;
            } else {
                if !line_start {
                    out.push(' ');
                }
                out.push_str(&self.tokens[id]);
                line_start = false;
            }
        }
        out
    }

    /// `token<TAB>count` per line, ordered by id.
    pub fn write_tsv<W: Write>(&self, mut w: W) -> Result<()> {
        for (t, c) in self.tokens.iter().zip(&self.counts) {
            writeln!(w, "{t}\t{c}")?;
        }
        Ok(())
    }

    pub fn read_tsv<R: BufRead>(r: R) -> Result<Self> {
        let mut tokens = Vec::new();
        let mut counts = Vec::new();
        for (i, line) in r.lines().enumerate() {
            let line = line?;
            if line.is_empty() {
                continue;
            }
            let (t, c) = line.rsplit_once('\t').ok_or_else(|| Error::Parse {
                line: i + 1,
                msg: "expected token<TAB>count".into(),
            })?;
            let c: u64 = c.parse().map_err(|_| Error::Parse {
                line: i + 1,
                msg: format!("bad count {c:?}"),
            })?;
            tokens.push(t.to_string());
            counts.push(c);
        }
        Self::from_parts(tokens, counts)
    }
}

/// One unroll window across all lanes: `inputs[lane][t]` predicts `targets[lane][t]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Window {
    pub inputs: Vec<Vec<usize>>,
    pub targets: Vec<Vec<usize>>,
}

impl Window {
    pub fn len(&self) -> usize {
        self.inputs.first().map_or(0, Vec::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Token ids arranged as `batch_size` contiguous streams.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BatchPlan {
    pub batch_size: usize,
    pub unroll: usize,
    streams: Vec<Vec<usize>>,
    dropped: usize,
}

impl BatchPlan {
    pub fn new(ids: &[usize], batch_size: usize, unroll: usize) -> Result<Self> {
        if batch_size == 0 || unroll == 0 {
            return Err(Error::InvalidArgument(
                "batch_size and unroll must be positive".into(),
            ));
        }
        if ids.len() < batch_size * (unroll + 1) {
            return Err(Error::Empty(format!(
                "{} tokens cannot fill {batch_size} streams of {} tokens",
                ids.len(),
                unroll + 1
            )));
        }
        let stream_len = ids.len() / batch_size;
        let streams = ids
            .chunks_exact(stream_len)
            .take(batch_size)
            .map(<[usize]>::to_vec)
            .collect();
        Ok(BatchPlan {
            batch_size,
            unroll,
            streams,
            dropped: ids.len() - stream_len * batch_size,
        })
    }

    pub fn stream_len(&self) -> usize {
        self.streams[0].len()
    }

    pub fn streams(&self) -> &[Vec<usize>] {
        &self.streams
    }

    /// Tail tokens that did not fit evenly into the streams.
    pub fn dropped_tokens(&self) -> usize {
        self.dropped
    }

    pub fn tokens_used(&self) -> usize {
        self.batch_size * self.stream_len()
    }

    /// Windows in order; the trailing partial window is included.
    pub fn windows(&self) -> Vec<Window> {
        self.windows_with(false)
    }

    pub fn windows_with(&self, drop_partial: bool) -> Vec<Window> {
        let predicted = self.stream_len() - 1;
        let mut out = Vec::new();
        let mut start = 0;
        while start < predicted {
            let len = self.unroll.min(predicted - start);
            if drop_partial && len < self.unroll {
                break;
            }
            out.push(Window {
                inputs: self
                    .streams
                    .iter()
                    .map(|s| s[start..start + len].to_vec())
                    .collect(),
                targets: self
                    .streams
                    .iter()
                    .map(|s| s[start + 1..start + len + 1].to_vec())
                    .collect(),
            });
            start += len;
        }
        out
    }
}
