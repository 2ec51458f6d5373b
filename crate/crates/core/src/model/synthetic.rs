//! A deterministic oracle model that knows each utterance's token alignment.
//!
//! A token is emitted once all of its frames are available. If its span ends
//! inside the last `instability_frames` frames of the available input it is
//! replaced by a fixed confusion partner, mimicking unreliable evidence near
//! a chunk boundary. With the complete utterance every token is correct.

use crate::error::{config, Result};
use crate::model::{check_token, log_normalize, EncoderKind, EncoderStates, PathState, SequenceModel};
use crate::stream::{Frame, TokenId, Utterance, Vocab};
use crate::tensor::Matrix;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SyntheticConfig {
    /// Width `u` of the unstable tail, in frames. Zero gives a stable model.
    pub instability_frames: usize,
    /// Selects the confusion map.
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self { instability_frames: 10, seed: 0 }
    }
}

impl SyntheticConfig {
    /// A 0.1 s unstable tail expressed in frames of `frame_period` seconds.
    pub fn for_period(frame_period: f64, seed: u64) -> Self {
        Self { instability_frames: (0.1 / frame_period).round() as usize, seed }
    }

    pub fn stable() -> Self {
        Self { instability_frames: 0, seed: 0 }
    }
}

const P_EMIT: f64 = 0.8;
const P_CONFUSED: f64 = 0.6;
const P_CONFUSED_TRUTH: f64 = 0.3;
const P_EOS_DONE: f64 = 0.95;
const P_EOS_PENDING: f64 = 1e-4;

#[derive(Debug, Clone)]
pub struct SyntheticAlignedModel {
    vocab: Vocab,
    reference: Vec<TokenId>,
    ends: Vec<usize>,
    total_frames: usize,
    cfg: SyntheticConfig,
    confusion: Vec<TokenId>,
    owner: u64,
}

pub struct SyntheticContext {
    frames: usize,
}

impl SyntheticAlignedModel {
    pub fn new(
        vocab: Vocab,
        reference: Vec<TokenId>,
        ends: Vec<usize>,
        total_frames: usize,
        cfg: SyntheticConfig,
    ) -> Result<Self> {
        if vocab.word_count() < 2 {
            return Err(config("the synthetic model needs at least two words"));
        }
        if ends.len() != reference.len() || ends.windows(2).any(|w| w[0] > w[1]) {
            return Err(config("alignment must give one non-decreasing end frame per token"));
        }
        if ends.last().is_some_and(|&e| e > total_frames) {
            return Err(config("alignment runs past the end of the utterance"));
        }
        for &t in &reference {
            check_token(&vocab, t)?;
            if Vocab::is_reserved(t) {
                return Err(config("reference contains a reserved token"));
            }
        }
        let words: Vec<TokenId> = vocab.words().collect();
        let n = words.len();
        let shift = 1 + (cfg.seed % (n as u64 - 1)) as usize;
        let mut confusion: Vec<TokenId> = (0..vocab.len() as TokenId).collect();
        for (i, &w) in words.iter().enumerate() {
            confusion[w as usize] = words[(i + shift) % n];
        }
        let owner = fnv(reference.iter().map(|&t| t as u64).chain(ends.iter().map(|&e| e as u64)))
            ^ (total_frames as u64).rotate_left(17)
            ^ (cfg.instability_frames as u64).rotate_left(41)
            ^ cfg.seed;
        Ok(Self { vocab, reference, ends, total_frames, cfg, confusion, owner })
    }

    pub fn from_utterance(utt: &Utterance, vocab: &Vocab, cfg: SyntheticConfig) -> Result<Self> {
        let ends = utt
            .alignment
            .clone()
            .ok_or_else(|| config(format!("utterance {} carries no alignment", utt.id)))?;
        Self::new(vocab.clone(), utt.reference.clone(), ends, utt.frames.len(), cfg)
    }

    pub fn confusion(&self, token: TokenId) -> TokenId {
        self.confusion[token as usize]
    }

    /// The token the model favours at output position `pos` with `frames`
    /// frames available, or `None` when it favours EOS.
    pub fn emission(&self, frames: usize, pos: usize) -> Option<(TokenId, bool)> {
        let (&truth, &end) = (self.reference.get(pos)?, self.ends.get(pos)?);
        let complete = frames >= self.total_frames;
        if complete || end + self.cfg.instability_frames <= frames {
            Some((truth, true))
        } else if end <= frames {
            Some((self.confusion(truth), false))
        } else {
            None
        }
    }

    fn distribution(&self, frames: usize, pos: usize) -> Vec<f64> {
        let v = self.vocab.len();
        let mut p = vec![0.0; v];
        let mut assigned = 0.0;
        match self.emission(frames, pos) {
            Some((tok, true)) => {
                p[tok as usize] = P_EMIT;
                p[Vocab::EOS as usize] = P_EOS_PENDING;
                assigned += P_EMIT + P_EOS_PENDING;
            }
            Some((tok, false)) => {
                let truth = self.reference[pos];
                p[tok as usize] = P_CONFUSED;
                p[truth as usize] = P_CONFUSED_TRUTH;
                p[Vocab::EOS as usize] = P_EOS_PENDING;
                assigned += P_CONFUSED + P_CONFUSED_TRUTH + P_EOS_PENDING;
            }
            None => {
                p[Vocab::EOS as usize] = P_EOS_DONE;
                assigned += P_EOS_DONE;
            }
        }
        let free: Vec<TokenId> = self.vocab.words().filter(|&w| p[w as usize] == 0.0).collect();
        let spread = (1.0 - assigned) / free.len().max(1) as f64;
        for w in free {
            p[w as usize] = spread;
        }
        log_normalize(&p)
    }
}

impl SequenceModel for SyntheticAlignedModel {
    type Context = SyntheticContext;
    type State = PathState;

    fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    fn encoder_kind(&self) -> EncoderKind {
        EncoderKind::Unidirectional
    }

    fn encode(&self, frames: &[Frame], prior: Option<EncoderStates>) -> Result<EncoderStates> {
        if let Some(p) = &prior {
            p.check_owner(self.owner, EncoderKind::Unidirectional)?;
            if p.frames > frames.len() {
                return Err(crate::error::contract("prior encoder states cover more frames than given"));
            }
        }
        let mut states = EncoderStates::empty(self.owner, EncoderKind::Unidirectional, 0);
        states.rows = Matrix::zeros(frames.len(), 0);
        states.frames = frames.len();
        Ok(states)
    }

    fn prepare(&self, enc: &EncoderStates) -> Result<SyntheticContext> {
        enc.check_owner(self.owner, EncoderKind::Unidirectional)?;
        Ok(SyntheticContext { frames: enc.frames })
    }

    fn begin(&self, ctx: &SyntheticContext) -> Result<PathState> {
        Ok(PathState::new(self.distribution(ctx.frames, 0)))
    }

    fn extend(&self, ctx: &SyntheticContext, state: &mut PathState, token: TokenId) -> Result<()> {
        check_token(&self.vocab, token)?;
        let pos = crate::model::DecoderState::tokens(state).len() + 1;
        state.push(token, self.distribution(ctx.frames, pos));
        Ok(())
    }
}

pub(crate) fn fnv(words: impl IntoIterator<Item = u64>) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for w in words {
        for b in w.to_le_bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }
    h
}
