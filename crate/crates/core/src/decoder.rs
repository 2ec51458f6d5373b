//! Beam search, forced-prefix decoding and the chunk-by-chunk session loop.

use std::cmp::Ordering;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::error::{config, contract, Error, Result};
use crate::model::{DecoderState, EncoderKind, EncoderStates, SequenceModel};
use crate::stream::{Chunk, ChunkOutput, CommitLog, TokenId, Utterance, Vocab};
use crate::strategies::{Strategy, StrategyConfig};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BeamConfig {
    pub beam: usize,
    /// Output tokens allowed per second of received audio.
    pub max_tokens_per_sec: f64,
    pub length_norm: bool,
}

impl Default for BeamConfig {
    fn default() -> Self {
        Self { beam: 8, max_tokens_per_sec: 8.0, length_norm: false }
    }
}

impl BeamConfig {
    pub fn with_beam(beam: usize) -> Self {
        Self { beam, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.beam == 0 {
            return Err(config("beam width must be at least 1"));
        }
        if !(self.max_tokens_per_sec > 0.0) || !self.max_tokens_per_sec.is_finite() {
            return Err(config("token cap must be positive"));
        }
        Ok(())
    }

    /// Largest hypothesis length allowed with `audio_sec` seconds of input.
    pub fn token_cap(&self, audio_sec: f64) -> usize {
        (self.max_tokens_per_sec * audio_sec + 1e-9).floor().max(0.0) as usize
    }
}

#[derive(Debug, Clone)]
pub struct BeamHypothesis<S> {
    /// Tokens after BOS, without EOS.
    pub tokens: Vec<TokenId>,
    pub log_prob: f64,
    /// No longer extended, either by EOS or by the token cap.
    pub finished: bool,
    /// Whether the hypothesis was closed by EOS.
    pub eos: bool,
    /// Decoder state after `tokens`.
    pub state: Option<S>,
}

impl<S> BeamHypothesis<S> {
    pub fn score(&self, length_norm: bool) -> f64 {
        if length_norm {
            self.log_prob / (self.tokens.len() + self.eos as usize).max(1) as f64
        } else {
            self.log_prob
        }
    }

    /// Tokens including a closing EOS, when present.
    pub fn output(&self) -> Vec<TokenId> {
        let mut out = self.tokens.clone();
        if self.eos {
            out.push(Vocab::EOS);
        }
        out
    }
}

/// Ranking order: higher score first, then the lower token sequence.
fn rank(a_score: f64, a_seq: &[TokenId], b_score: f64, b_seq: &[TokenId]) -> Ordering {
    b_score.total_cmp(&a_score).then_with(|| a_seq.cmp(b_seq))
}

/// Beam search whose hypotheses all begin with `forced_prefix`. The search
/// may use `cap` tokens where `cap = cfg.token_cap(audio_sec)`.
pub fn beam_search<M: SequenceModel>(
    model: &M,
    enc: &EncoderStates,
    forced_prefix: &[TokenId],
    cfg: &BeamConfig,
    audio_sec: f64,
) -> Result<Vec<BeamHypothesis<M::State>>> {
    cfg.validate()?;
    if forced_prefix.iter().any(|&t| Vocab::is_reserved(t)) {
        return Err(contract("forced prefix must not contain reserved tokens"));
    }
    if enc.is_empty() {
        return Ok(vec![BeamHypothesis {
            tokens: forced_prefix.to_vec(),
            log_prob: 0.0,
            finished: true,
            eos: false,
            state: None,
        }]);
    }
    let ctx = model.prepare(enc)?;
    let mut state = model.begin(&ctx)?;
    for &t in forced_prefix {
        model.extend(&ctx, &mut state, t)?;
    }
    beam_search_from(model, &ctx, state, cfg, cfg.token_cap(audio_sec))
}

/// Beam search continuing from `start`, whose tokens are kept as a forced
/// prefix. Hypotheses are closed once they hold `cap` tokens.
pub fn beam_search_from<M: SequenceModel>(
    model: &M,
    ctx: &M::Context,
    start: M::State,
    cfg: &BeamConfig,
    cap: usize,
) -> Result<Vec<BeamHypothesis<M::State>>> {
    cfg.validate()?;
    let tokens = start.tokens().to_vec();
    let log_prob = start.path_log_prob();
    let capped = tokens.len() >= cap;
    let mut pool = vec![BeamHypothesis { tokens, log_prob, finished: capped, eos: false, state: Some(start) }];
    let b = cfg.beam;
    let vocab_len = model.vocab().len();

    struct Cand {
        parent: usize,
        token: TokenId,
        score: f64,
        log_prob: f64,
        seq: Vec<TokenId>,
    }

    while pool.iter().any(|h| !h.finished) && !pool[0].finished {
        let mut cands: Vec<Cand> = Vec::new();
        for (i, h) in pool.iter().enumerate() {
            if h.finished {
                let seq = h.output();
                cands.push(Cand { parent: i, token: Vocab::PAD, score: h.score(cfg.length_norm), log_prob: h.log_prob, seq });
                continue;
            }
            let lp = h.state.as_ref().expect("active hypotheses carry state").log_probs();
            let mut options: Vec<(TokenId, f64)> = (0..vocab_len as TokenId)
                .filter(|&t| t != Vocab::BOS && t != Vocab::PAD && lp[t as usize] > f64::NEG_INFINITY)
                .map(|t| (t, lp[t as usize]))
                .collect();
            options.sort_by(|x, y| y.1.total_cmp(&x.1).then(x.0.cmp(&y.0)));
            options.truncate(b);
            for (t, l) in options {
                let mut seq = h.tokens.clone();
                seq.push(t);
                let lp_total = h.log_prob + l;
                let len = seq.len().max(1) as f64;
                let score = if cfg.length_norm { lp_total / len } else { lp_total };
                cands.push(Cand { parent: i, token: t, score, log_prob: lp_total, seq });
            }
        }
        cands.sort_by(|x, y| rank(x.score, &x.seq, y.score, &y.seq));
        cands.truncate(b);

        let mut old: Vec<Option<BeamHypothesis<M::State>>> = pool.into_iter().map(Some).collect();
        let mut next = Vec::with_capacity(cands.len());
        for c in cands {
            if c.token == Vocab::PAD {
                next.push(old[c.parent].take().expect("finished hypothesis kept once"));
                continue;
            }
            let parent = old[c.parent].as_ref().expect("parent present");
            let tokens_before = parent.tokens.clone();
            if c.token == Vocab::EOS {
                next.push(BeamHypothesis {
                    tokens: tokens_before,
                    log_prob: c.log_prob,
                    finished: true,
                    eos: true,
                    state: parent.state.clone(),
                });
                continue;
            }
            let mut state = parent.state.clone().expect("active hypotheses carry state");
            model.extend(ctx, &mut state, c.token)?;
            let mut tokens = tokens_before;
            tokens.push(c.token);
            let finished = tokens.len() >= cap;
            next.push(BeamHypothesis { tokens, log_prob: c.log_prob, finished, eos: false, state: Some(state) });
        }
        pool = next;
    }
    pool.sort_by(|x, y| rank(x.score(cfg.length_norm), &x.output(), y.score(cfg.length_norm), &y.output()));
    Ok(pool)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DecodeMode {
    /// Re-run the decoder over the committed prefix on every chunk.
    #[serde(rename = "forced")]
    ForcedRedecode,
    /// Carry the decoder state of the committed path between chunks.
    #[serde(rename = "buffered")]
    BufferedState,
}

impl std::str::FromStr for DecodeMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "forced" => Ok(DecodeMode::ForcedRedecode),
            "buffered" => Ok(DecodeMode::BufferedState),
            other => Err(config(format!("unknown decode mode {other:?}"))),
        }
    }
}

impl std::fmt::Display for DecodeMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            DecodeMode::ForcedRedecode => "forced",
            DecodeMode::BufferedState => "buffered",
        })
    }
}

/// Work counters collected over a session.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SessionStats {
    /// Encoder positions computed, summed over chunks.
    pub encoded_positions: usize,
    /// Decoder positions run from scratch to re-establish the committed path.
    pub forced_steps: usize,
    /// Decoder positions carried over and rebased onto new encoder output.
    pub rebased_positions: usize,
    pub chunk_times: Vec<Duration>,
}

/// Incremental decoding of one utterance.
pub struct Session<'a, M: SequenceModel> {
    model: &'a M,
    utterance: &'a Utterance,
    strategy: Strategy,
    beam: BeamConfig,
    mode: DecodeMode,
    log: CommitLog,
    committed: Vec<TokenId>,
    enc: Option<EncoderStates>,
    buffered: Option<M::State>,
    last_chunk: usize,
    stats: SessionStats,
}

impl<'a, M: SequenceModel> Session<'a, M> {
    pub fn new(
        model: &'a M,
        utterance: &'a Utterance,
        strategy: StrategyConfig,
        beam: BeamConfig,
        mode: DecodeMode,
        chunk_len_sec: f64,
    ) -> Result<Self> {
        beam.validate()?;
        if mode == DecodeMode::BufferedState && model.encoder_kind() == EncoderKind::Bidirectional {
            return Err(Error::Unsupported(
                "buffered-state decoding needs a unidirectional encoder".into(),
            ));
        }
        Ok(Self {
            model,
            utterance,
            strategy: Strategy::new(strategy, chunk_len_sec)?,
            beam,
            mode,
            log: CommitLog::new(chunk_len_sec),
            committed: Vec::new(),
            enc: None,
            buffered: None,
            last_chunk: 0,
            stats: SessionStats::default(),
        })
    }

    pub fn commit_log(&self) -> &CommitLog {
        &self.log
    }

    pub fn stats(&self) -> &SessionStats {
        &self.stats
    }

    /// Processes the next chunk and returns the chunk output together with
    /// the tokens committed for it.
    pub fn step_chunk(&mut self, chunk: &Chunk) -> Result<(ChunkOutput, Vec<TokenId>)> {
        if chunk.index != self.last_chunk + 1 {
            return Err(contract(format!(
                "chunk {} arrived after chunk {}",
                chunk.index, self.last_chunk
            )));
        }
        if chunk.end > self.utterance.frames.len() {
            return Err(contract("chunk extends past the utterance"));
        }
        let started = Instant::now();
        let model = self.model;
        let frames = &self.utterance.frames[..chunk.end];

        let prior = self.enc.take();
        let reused = match (&prior, model.encoder_kind()) {
            (Some(p), EncoderKind::Unidirectional) => p.len(),
            _ => 0,
        };
        let enc = model.encode(frames, prior)?;
        self.stats.encoded_positions += enc.len() - reused;

        let audio_sec = chunk.end as f64 * self.utterance.frame_period;
        let cap = self.beam.token_cap(audio_sec);
        let ranked = if enc.is_empty() {
            beam_search(model, &enc, &self.committed, &self.beam, audio_sec)?
        } else {
            let ctx = model.prepare(&enc)?;
            let start = match (self.mode, self.buffered.take()) {
                (DecodeMode::BufferedState, Some(prev)) => {
                    self.stats.rebased_positions += prev.tokens().len() + 1;
                    model.rebase(&ctx, &prev)?
                }
                _ => {
                    let mut s = model.begin(&ctx)?;
                    for &t in &self.committed {
                        model.extend(&ctx, &mut s, t)?;
                    }
                    self.stats.forced_steps += self.committed.len() + 1;
                    s
                }
            };
            beam_search_from(model, &ctx, start, &self.beam, cap)?
        };
        self.enc = Some(enc);

        let best = ranked.into_iter().next().ok_or_else(|| Error::Model("beam search returned nothing".into()))?;
        if !best.tokens.starts_with(&self.committed) {
            return Err(contract("best hypothesis does not extend the committed prefix"));
        }
        let base = self.committed.len();
        let continuation = best.output()[base..].to_vec();
        let log_probs = match &best.state {
            Some(s) => (base..best.tokens.len())
                .map(|i| s.log_probs_at(i)[best.tokens[i] as usize])
                .chain(best.eos.then(|| s.log_probs()[Vocab::EOS as usize]))
                .collect(),
            None => Vec::new(),
        };
        let output = ChunkOutput { chunk_index: chunk.index, tokens: continuation, log_probs };

        let selected = self.strategy.select(chunk.index, chunk.is_final, &output.tokens);
        self.log.commit(&selected, chunk.index)?;
        self.committed.extend_from_slice(&selected);
        if self.mode == DecodeMode::BufferedState {
            if let Some(mut s) = best.state {
                s.truncate(self.committed.len());
                self.buffered = Some(s);
            }
        }
        self.last_chunk = chunk.index;
        self.stats.chunk_times.push(started.elapsed());
        Ok((output, selected))
    }

    pub fn finish(self) -> (CommitLog, SessionStats) {
        (self.log, self.stats)
    }
}

/// Runs every chunk of `utterance` and returns the resulting commit log.
pub fn run_session<M: SequenceModel>(
    model: &M,
    utterance: &Utterance,
    chunk_len_sec: f64,
    strategy: StrategyConfig,
    beam: &BeamConfig,
    mode: DecodeMode,
) -> Result<CommitLog> {
    run_session_with_stats(model, utterance, chunk_len_sec, strategy, beam, mode).map(|(log, _)| log)
}

pub fn run_session_with_stats<M: SequenceModel>(
    model: &M,
    utterance: &Utterance,
    chunk_len_sec: f64,
    strategy: StrategyConfig,
    beam: &BeamConfig,
    mode: DecodeMode,
) -> Result<(CommitLog, SessionStats)> {
    let chunks = utterance.chunks(chunk_len_sec)?;
    let mut session = Session::new(model, utterance, strategy, *beam, mode, chunk_len_sec)?;
    for chunk in &chunks {
        session.step_chunk(chunk)?;
    }
    Ok(session.finish())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{LookupModel, SyntheticAlignedModel, SyntheticConfig};

    fn aligned(u: usize) -> (SyntheticAlignedModel, Utterance) {
        // 40 frames at 50 ms, five tokens
        let vocab = Vocab::synthetic(6);
        let reference = vec![3, 5, 4, 7, 6];
        let ends = vec![6, 14, 21, 30, 38];
        let mut utt = Utterance::new("u", vec![vec![0.0]; 40], reference.clone());
        utt.alignment = Some(ends.clone());
        utt.frame_period = 0.05;
        let m = SyntheticAlignedModel::new(vocab, reference, ends, 40, SyntheticConfig { instability_frames: u, seed: 1 }).unwrap();
        (m, utt)
    }

    fn greedy<M: SequenceModel>(m: &M, enc: &EncoderStates, cap: usize) -> Vec<TokenId> {
        let mut prefix = Vec::new();
        while prefix.len() < cap {
            let lp = m.decode_step(enc, &prefix).unwrap();
            let best = (0..lp.len()).max_by(|&a, &b| lp[a].total_cmp(&lp[b]).then(b.cmp(&a))).unwrap() as TokenId;
            if best == Vocab::EOS {
                break;
            }
            prefix.push(best);
        }
        prefix
    }

    #[test]
    fn stable_model_decodes_reference() {
        let (m, utt) = aligned(0);
        let enc = m.encode(&utt.frames, None).unwrap();
        let cfg = BeamConfig::default();
        let out = beam_search(&m, &enc, &[], &cfg, 2.0).unwrap();
        assert_eq!(out[0].tokens, utt.reference);
        assert!(out[0].eos);
        let forced = beam_search(&m, &enc, &utt.reference[..3], &cfg, 2.0).unwrap();
        assert_eq!(forced[0].tokens, utt.reference);
        assert!(forced.iter().all(|h| h.tokens.starts_with(&utt.reference[..3])));
    }

    #[test]
    fn width_one_is_greedy() {
        for seed in 0..20 {
            let m = LookupModel::new(5, seed);
            let enc = m.encode(&vec![vec![]; 7], None).unwrap();
            let out = beam_search(&m, &enc, &[], &BeamConfig::with_beam(1), 1.0).unwrap();
            assert_eq!(out[0].tokens, greedy(&m, &enc, 8));
        }
    }

    #[test]
    fn cap_bounds_every_hypothesis() {
        let m = LookupModel::new(4, 3);
        let enc = m.encode(&vec![vec![]; 3], None).unwrap();
        let out = beam_search(&m, &enc, &[], &BeamConfig::default(), 0.3).unwrap();
        assert!(out.iter().all(|h| h.tokens.len() <= 2));
        let forced = beam_search(&m, &enc, &[3, 4, 5], &BeamConfig::default(), 0.3).unwrap();
        assert_eq!(forced[0].tokens, [3, 4, 5]);
    }

    #[test]
    fn empty_encoder_returns_prefix() {
        let m = LookupModel::new(4, 3);
        let enc = m.encode(&[], None).unwrap();
        let out = beam_search(&m, &enc, &[4], &BeamConfig::default(), 0.0).unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].tokens, [4]);
    }

    #[test]
    fn hold_zero_on_stable_model_matches_offline() {
        let (m, utt) = aligned(0);
        let cfg = BeamConfig::default();
        let log = run_session(&m, &utt, 0.5, StrategyConfig::HoldN { n: 0 }, &cfg, DecodeMode::ForcedRedecode).unwrap();
        assert_eq!(log.tokens(), utt.reference);
    }

    #[test]
    fn local_agreement_waits_on_first_chunk() {
        let (m, utt) = aligned(4);
        let mut s = Session::new(&m, &utt, StrategyConfig::LocalAgreement, BeamConfig::default(), DecodeMode::ForcedRedecode, 0.5)
            .unwrap();
        let chunks = utt.chunks(0.5).unwrap();
        let (out, committed) = s.step_chunk(&chunks[0]).unwrap();
        assert!(!out.displayable().is_empty());
        assert!(committed.is_empty());
        assert!(s.step_chunk(&chunks[2]).is_err());
    }

    #[test]
    fn offline_commits_everything_at_the_end() {
        let (m, utt) = aligned(4);
        let log = run_session(&m, &utt, 0.5, StrategyConfig::Offline, &BeamConfig::default(), DecodeMode::BufferedState).unwrap();
        assert_eq!(log.tokens(), utt.reference);
        assert!(log.entries().iter().all(|e| e.chunk == 4 && (e.output_time_sec - 2.0).abs() < 1e-12));
    }

    #[test]
    fn modes_agree_and_repeat() {
        let (m, utt) = aligned(4);
        for strategy in [StrategyConfig::HoldN { n: 0 }, StrategyConfig::HoldN { n: 1 }, StrategyConfig::LocalAgreement] {
            let a = run_session(&m, &utt, 0.25, strategy, &BeamConfig::default(), DecodeMode::ForcedRedecode).unwrap();
            let b = run_session(&m, &utt, 0.25, strategy, &BeamConfig::default(), DecodeMode::BufferedState).unwrap();
            let c = run_session(&m, &utt, 0.25, strategy, &BeamConfig::default(), DecodeMode::BufferedState).unwrap();
            assert_eq!(a, b);
            assert_eq!(b, c);
        }
    }

    #[test]
    fn empty_utterance_gives_empty_log() {
        let (m, _) = aligned(0);
        let utt = Utterance::new("e", Vec::new(), Vec::new());
        let log = run_session(&m, &utt, 0.5, StrategyConfig::LocalAgreement, &BeamConfig::default(), DecodeMode::ForcedRedecode).unwrap();
        assert!(log.is_empty());
    }
}
