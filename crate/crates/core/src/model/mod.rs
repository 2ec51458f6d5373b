//! Encoder-decoder scoring interface and its implementations.
//!
//! A model encodes frames into [`EncoderStates`], prepares a per-encoding
//! decode context, and scores token prefixes through an incremental decoder
//! state. Stateless [`SequenceModel::decode_step`] is provided on top.

mod lookup;
mod synthetic;
mod transformer;

pub use lookup::LookupModel;
pub use synthetic::{SyntheticAlignedModel, SyntheticConfig};
pub use transformer::{AttentionDump, TinyTransformer, TransformerConfig};
pub(crate) use transformer::{AttnIdx, FfIdx, LnIdx};
pub use transformer::{TransformerContext, TransformerState};

use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};
use crate::stream::{Frame, TokenId};
use crate::tensor::Matrix;
use crate::Vocab;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EncoderKind {
    /// Every position attends to every other position.
    Bidirectional,
    /// Position `i` attends to positions `0..=i` only.
    Unidirectional,
}

impl std::fmt::Display for EncoderKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            EncoderKind::Bidirectional => "bidirectional",
            EncoderKind::Unidirectional => "unidirectional",
        })
    }
}

/// Encoder output for the frames seen so far.
#[derive(Debug, Clone)]
pub struct EncoderStates {
    /// One row per encoded position.
    pub rows: Matrix,
    /// Number of input frames covered.
    pub frames: usize,
    pub(crate) owner: u64,
    pub(crate) kind: EncoderKind,
    /// Per-layer residual stream entering each encoder layer.
    pub(crate) layer_inputs: Vec<Matrix>,
    /// Per-layer self-attention keys and values.
    pub(crate) layer_kv: Vec<(Matrix, Matrix)>,
}

impl EncoderStates {
    pub(crate) fn empty(owner: u64, kind: EncoderKind, width: usize) -> Self {
        Self {
            rows: Matrix::zeros(0, width),
            frames: 0,
            owner,
            kind,
            layer_inputs: Vec::new(),
            layer_kv: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.rows.rows
    }

    pub fn is_empty(&self) -> bool {
        self.rows.rows == 0
    }

    pub fn kind(&self) -> EncoderKind {
        self.kind
    }

    pub(crate) fn check_owner(&self, owner: u64, kind: EncoderKind) -> Result<()> {
        if self.owner != owner || self.kind != kind {
            return Err(contract("encoder states were produced by a different model or mode"));
        }
        Ok(())
    }
}

/// Incremental decoder state along one hypothesis path.
pub trait DecoderState: Clone + Send {
    /// Tokens fed after BOS.
    fn tokens(&self) -> &[TokenId];
    /// Log-distribution over the vocabulary after `tokens()[..pos]`.
    fn log_probs_at(&self, pos: usize) -> &[f64];
    /// Drops every position after the first `len` tokens.
    fn truncate(&mut self, len: usize);

    fn log_probs(&self) -> &[f64] {
        self.log_probs_at(self.tokens().len())
    }

    /// Sum of the log-probabilities of the fed tokens.
    fn path_log_prob(&self) -> f64 {
        self.tokens()
            .iter()
            .enumerate()
            .map(|(i, &t)| self.log_probs_at(i)[t as usize])
            .sum()
    }
}

pub trait SequenceModel: Send + Sync {
    /// Decode-time data derived from one [`EncoderStates`].
    type Context: Send + Sync;
    type State: DecoderState;

    fn vocab(&self) -> &Vocab;
    fn encoder_kind(&self) -> EncoderKind;

    /// Encodes `frames`. If `prior` covers a prefix of `frames`, a
    /// unidirectional model computes only the new positions.
    fn encode(&self, frames: &[Frame], prior: Option<EncoderStates>) -> Result<EncoderStates>;

    fn prepare(&self, enc: &EncoderStates) -> Result<Self::Context>;

    /// State after feeding only BOS.
    fn begin(&self, ctx: &Self::Context) -> Result<Self::State>;

    fn extend(&self, ctx: &Self::Context, state: &mut Self::State, token: TokenId) -> Result<()>;

    /// Re-targets a state computed under an earlier context onto `ctx`,
    /// reusing whatever does not depend on the encoder. Must agree exactly
    /// with feeding the same tokens from scratch.
    fn rebase(&self, ctx: &Self::Context, state: &Self::State) -> Result<Self::State> {
        let mut fresh = self.begin(ctx)?;
        for &t in state.tokens() {
            self.extend(ctx, &mut fresh, t)?;
        }
        Ok(fresh)
    }

    /// Attention weights while reading `prefix`, for models that have them.
    fn dump_attention(&self, _enc: &EncoderStates, _prefix: &[TokenId]) -> Result<AttentionDump> {
        Err(crate::error::Error::Unsupported("this model has no attention weights".into()))
    }

    /// Next-token log-distribution after `prefix` (BOS is implicit).
    fn decode_step(&self, enc: &EncoderStates, prefix: &[TokenId]) -> Result<Vec<f64>> {
        let ctx = self.prepare(enc)?;
        let mut state = self.begin(&ctx)?;
        for &t in prefix {
            self.extend(&ctx, &mut state, t)?;
        }
        Ok(state.log_probs().to_vec())
    }
}

pub(crate) fn check_token(vocab: &Vocab, token: TokenId) -> Result<()> {
    if token as usize >= vocab.len() {
        return Err(contract(format!("token id {token} outside vocabulary of {}", vocab.len())));
    }
    Ok(())
}

/// Path state shared by the table-driven models: the fed tokens plus the
/// next-token distribution at every position.
#[derive(Debug, Clone, PartialEq)]
pub struct PathState {
    tokens: Vec<TokenId>,
    dists: Vec<Vec<f64>>,
}

impl PathState {
    pub(crate) fn new(first: Vec<f64>) -> Self {
        Self { tokens: Vec::new(), dists: vec![first] }
    }

    pub(crate) fn push(&mut self, token: TokenId, next: Vec<f64>) {
        self.tokens.push(token);
        self.dists.push(next);
    }
}

impl DecoderState for PathState {
    fn tokens(&self) -> &[TokenId] {
        &self.tokens
    }

    fn log_probs_at(&self, pos: usize) -> &[f64] {
        &self.dists[pos]
    }

    fn truncate(&mut self, len: usize) {
        self.tokens.truncate(len);
        self.dists.truncate(len + 1);
    }
}

/// Normalizes unnormalized probabilities into a log-distribution.
pub(crate) fn log_normalize(weights: &[f64]) -> Vec<f64> {
    let total: f64 = weights.iter().sum();
    weights
        .iter()
        .map(|&w| if w > 0.0 { (w / total).ln() } else { f64::NEG_INFINITY })
        .collect()
}
