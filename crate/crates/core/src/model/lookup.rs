//! Table-free random model: every (context, prefix) pair maps to a fixed
//! pseudo-random distribution. Useful as an adversarial beam-search target.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{contract, Result};
use crate::model::synthetic::fnv;
use crate::model::{check_token, EncoderKind, EncoderStates, PathState, SequenceModel};
use crate::stream::{Frame, TokenId, Vocab};
use crate::tensor::{log_softmax, Matrix};

#[derive(Debug, Clone)]
pub struct LookupModel {
    vocab: Vocab,
    seed: u64,
    /// Logit spread; larger values make sharper distributions.
    temperature: f64,
}

pub struct LookupContext {
    frames: usize,
}

impl LookupModel {
    pub fn new(words: usize, seed: u64) -> Self {
        Self { vocab: Vocab::synthetic(words), seed, temperature: 2.0 }
    }

    pub fn with_temperature(mut self, temperature: f64) -> Self {
        self.temperature = temperature;
        self
    }

    fn distribution(&self, frames: usize, prefix: &[TokenId]) -> Vec<f64> {
        let key = fnv(
            [self.seed, frames as u64, prefix.len() as u64]
                .into_iter()
                .chain(prefix.iter().map(|&t| t as u64)),
        );
        let mut rng = ChaCha8Rng::seed_from_u64(key);
        let logits: Vec<f64> = (0..self.vocab.len() as TokenId)
            .map(|t| {
                if t == Vocab::BOS || t == Vocab::PAD {
                    f64::NEG_INFINITY
                } else {
                    self.temperature * rng.gen_range(-1.0..1.0)
                }
            })
            .collect();
        log_softmax(&logits)
    }

    fn owner(&self) -> u64 {
        self.seed ^ 0x5eed_1001
    }
}

impl SequenceModel for LookupModel {
    type Context = LookupContext;
    type State = PathState;

    fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    fn encoder_kind(&self) -> EncoderKind {
        EncoderKind::Unidirectional
    }

    fn encode(&self, frames: &[Frame], prior: Option<EncoderStates>) -> Result<EncoderStates> {
        if let Some(p) = &prior {
            p.check_owner(self.owner(), EncoderKind::Unidirectional)?;
            if p.frames > frames.len() {
                return Err(contract("prior encoder states cover more frames than given"));
            }
        }
        let mut states = EncoderStates::empty(self.owner(), EncoderKind::Unidirectional, 0);
        states.rows = Matrix::zeros(frames.len(), 0);
        states.frames = frames.len();
        Ok(states)
    }

    fn prepare(&self, enc: &EncoderStates) -> Result<LookupContext> {
        enc.check_owner(self.owner(), EncoderKind::Unidirectional)?;
        Ok(LookupContext { frames: enc.frames })
    }

    fn begin(&self, ctx: &LookupContext) -> Result<PathState> {
        Ok(PathState::new(self.distribution(ctx.frames, &[])))
    }

    fn extend(&self, ctx: &LookupContext, state: &mut PathState, token: TokenId) -> Result<()> {
        check_token(&self.vocab, token)?;
        let mut prefix = crate::model::DecoderState::tokens(state).to_vec();
        prefix.push(token);
        let next = self.distribution(ctx.frames, &prefix);
        state.push(token, next);
        Ok(())
    }
}
