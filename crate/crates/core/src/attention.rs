//! Dense multi-head self-attention over all `T = N·L²` tokens.

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::join;
use crate::patching::TokenGrid;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionHead<P = Tensor> {
    /// `[C', d_h]`
    pub query: P,
    pub key: P,
    pub value: P,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MhaWeights<P = Tensor> {
    pub heads: Vec<AttentionHead<P>>,
    /// `[H·d_h, C']`
    pub output: P,
}

impl MhaWeights<Tensor> {
    pub fn init<R: Rng + ?Sized>(channels: usize, heads: usize, rng: &mut R) -> Result<Self> {
        if heads == 0 || !channels.is_multiple_of(heads) {
            return Err(Error::Config(format!(
                "{channels} channels cannot be split across {heads} heads"
            )));
        }
        let d = channels / heads;
        let bound = 1.0 / (channels as f64).sqrt();
        let heads = (0..heads)
            .map(|_| AttentionHead {
                query: Tensor::uniform(&[channels, d], bound, rng),
                key: Tensor::uniform(&[channels, d], bound, rng),
                value: Tensor::uniform(&[channels, d], bound, rng),
            })
            .collect();
        let output = Tensor::uniform(&[channels, channels], bound, rng);
        Ok(Self { heads, output })
    }

    pub fn param_count(&self) -> usize {
        self.output.numel()
            + self
                .heads
                .iter()
                .map(|h| h.query.numel() + h.key.numel() + h.value.numel())
                .sum::<usize>()
    }
}

impl<P> MhaWeights<P> {
    pub fn map<Q>(&self, prefix: &str, f: &mut dyn FnMut(&str, &P) -> Q) -> MhaWeights<Q> {
        MhaWeights {
            heads: self
                .heads
                .iter()
                .enumerate()
                .map(|(i, h)| {
                    let p = join(prefix, &format!("head{i}"));
                    AttentionHead {
                        query: f(&join(&p, "query"), &h.query),
                        key: f(&join(&p, "key"), &h.key),
                        value: f(&join(&p, "value"), &h.value),
                    }
                })
                .collect(),
            output: f(&join(prefix, "output"), &self.output),
        }
    }
}

/// Scaled dot-product attention per head, concatenated and output-mapped.
/// The residual belongs to the caller.
pub fn mha_forward(tape: &mut Tape, x: &TokenGrid, w: &MhaWeights<Var>) -> Result<TokenGrid> {
    if w.heads.is_empty() {
        return Err(Error::Config("at least one attention head is required".into()));
    }
    let q_shape = tape.shape(w.heads[0].query).to_vec();
    if q_shape.len() != 2 || q_shape[0] != x.channels {
        return Err(Error::Extent {
            what: "attention input channels",
            expected: x.channels,
            found: q_shape[0],
        });
    }
    let d = q_shape[1];
    let rows = x.as_rows(tape)?;
    let scale = 1.0 / (d as f64).sqrt();
    let mut attended = Vec::with_capacity(w.heads.len());
    for head in &w.heads {
        let q = tape.matmul(rows, head.query)?;
        let q = tape.scale(q, scale)?;
        let k = tape.matmul(rows, head.key)?;
        let v = tape.matmul(rows, head.value)?;
        let kt = tape.transpose(k)?;
        let scores = tape.matmul(q, kt)?;
        tape.mark_state(scores);
        let probs = tape.softmax(scores, 1)?;
        attended.push(tape.matmul(probs, v)?);
    }
    let joined = if attended.len() == 1 {
        attended[0]
    } else {
        tape.concat_last(&attended)?
    };
    let out = tape.matmul(joined, w.output)?;
    x.from_rows(tape, out)
}

/// Score-matrix entries per head for `tokens` tokens.
pub fn attention_state_size(tokens: u64) -> u64 {
    tokens * tokens
}
