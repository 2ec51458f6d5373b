//! Streaming primitives: the token alphabet, utterances, fixed-size chunking
//! of frame streams and the append-only commit log.

use std::collections::HashMap;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{config, contract, Error, Result};

pub type TokenId = u32;

/// A single feature vector.
pub type Frame = Vec<f64>;

pub const DEFAULT_FRAME_PERIOD: f64 = 0.010;

/// Bijection between surface forms and dense integer ids.
///
/// Ids 0, 1 and 2 are always BOS, EOS and PAD; ordinary words follow.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    surfaces: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, TokenId>,
}

impl Vocab {
    pub const BOS: TokenId = 0;
    pub const EOS: TokenId = 1;
    pub const PAD: TokenId = 2;
    pub const RESERVED: [&'static str; 3] = ["<s>", "</s>", "<pad>"];

    /// Builds a vocabulary from word surfaces. Duplicates are collapsed and
    /// reserved surfaces are rejected.
    pub fn new<I, S>(words: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut surfaces: Vec<String> = Self::RESERVED.iter().map(|s| s.to_string()).collect();
        let mut index: HashMap<String, TokenId> = surfaces
            .iter()
            .enumerate()
            .map(|(i, s)| (s.clone(), i as TokenId))
            .collect();
        for w in words {
            let w = w.into();
            if Self::RESERVED.contains(&w.as_str()) {
                return Err(config(format!("word {w:?} collides with a reserved symbol")));
            }
            if w.is_empty() || w.chars().any(char::is_whitespace) {
                return Err(config(format!("invalid word surface {w:?}")));
            }
            if !index.contains_key(&w) {
                index.insert(w.clone(), surfaces.len() as TokenId);
                surfaces.push(w);
            }
        }
        Ok(Self { surfaces, index })
    }

    /// The synthetic task alphabet `w0 .. w{n-1}`.
    pub fn synthetic(words: usize) -> Self {
        Self::new((0..words).map(|i| format!("w{i}"))).expect("synthetic surfaces are valid")
    }

    /// Collects every distinct token of the given sequences, in sorted order.
    pub fn from_corpus<'a, I>(sequences: I) -> Result<Self>
    where
        I: IntoIterator<Item = &'a [String]>,
    {
        let mut words: Vec<&String> = sequences.into_iter().flatten().collect();
        words.sort_by(|a, b| natural_key(a).cmp(&natural_key(b)));
        words.dedup();
        Self::new(words.into_iter().cloned())
    }

    pub fn len(&self) -> usize {
        self.surfaces.len()
    }

    pub fn is_empty(&self) -> bool {
        self.surfaces.is_empty()
    }

    /// Number of ordinary (non-reserved) words.
    pub fn word_count(&self) -> usize {
        self.surfaces.len() - Self::RESERVED.len()
    }

    pub fn id(&self, surface: &str) -> Option<TokenId> {
        self.index.get(surface).copied()
    }

    pub fn surface(&self, id: TokenId) -> Option<&str> {
        self.surfaces.get(id as usize).map(String::as_str)
    }

    pub fn is_reserved(id: TokenId) -> bool {
        (id as usize) < Self::RESERVED.len()
    }

    /// Ids of ordinary words.
    pub fn words(&self) -> impl Iterator<Item = TokenId> + '_ {
        (Self::RESERVED.len() as TokenId)..(self.surfaces.len() as TokenId)
    }

    pub fn encode(&self, surfaces: &[String]) -> Result<Vec<TokenId>> {
        surfaces
            .iter()
            .map(|s| {
                self.id(s)
                    .ok_or_else(|| Error::Format(format!("token {s:?} is not in the vocabulary")))
            })
            .collect()
    }

    pub fn decode(&self, ids: &[TokenId]) -> Result<Vec<String>> {
        ids.iter()
            .map(|&i| {
                self.surface(i)
                    .map(str::to_string)
                    .ok_or_else(|| contract(format!("token id {i} out of vocabulary")))
            })
            .collect()
    }

    pub fn surfaces(&self) -> &[String] {
        &self.surfaces
    }

    /// Rebuilds the reverse index after deserialization.
    pub fn from_surfaces(surfaces: Vec<String>) -> Result<Self> {
        if surfaces.len() < 3 || surfaces[..3] != Self::RESERVED.map(String::from) {
            return Err(Error::Format("vocabulary must start with the reserved symbols".into()));
        }
        Self::new(surfaces.into_iter().skip(3))
    }
}

// Orders "w2" before "w10".
fn natural_key(s: &str) -> (String, u64, String) {
    let split = s.find(|c: char| c.is_ascii_digit()).unwrap_or(s.len());
    let (head, tail) = s.split_at(split);
    let digits: String = tail.chars().take_while(char::is_ascii_digit).collect();
    let num = digits.parse().unwrap_or(0);
    (head.to_string(), num, tail[digits.len()..].to_string())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub id: String,
    pub frames: Vec<Frame>,
    pub frame_period: f64,
    pub reference: Vec<TokenId>,
    pub target: Option<Vec<TokenId>>,
    /// Exclusive end frame of each reference token, when the generator knows it.
    pub alignment: Option<Vec<usize>>,
}

impl Utterance {
    pub fn new(id: impl Into<String>, frames: Vec<Frame>, reference: Vec<TokenId>) -> Self {
        Self {
            id: id.into(),
            frames,
            frame_period: DEFAULT_FRAME_PERIOD,
            reference,
            target: None,
            alignment: None,
        }
    }

    pub fn frame_dim(&self) -> usize {
        self.frames.first().map_or(0, Vec::len)
    }

    pub fn duration_sec(&self) -> f64 {
        self.frames.len() as f64 * self.frame_period
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.frame_period > 0.0) {
            return Err(config(format!("utterance {}: frame period must be positive", self.id)));
        }
        let d = self.frame_dim();
        if self.frames.iter().any(|f| f.len() != d) {
            return Err(Error::Format(format!("utterance {}: ragged frame dimensions", self.id)));
        }
        if let Some(al) = &self.alignment {
            if al.len() != self.reference.len()
                || al.windows(2).any(|w| w[0] > w[1])
                || al.last().is_some_and(|&e| e > self.frames.len())
            {
                return Err(Error::Format(format!("utterance {}: inconsistent alignment", self.id)));
            }
        }
        Ok(())
    }

    pub fn chunks(&self, chunk_len_sec: f64) -> Result<Vec<Chunk>> {
        chunk_stream(&self.frames, chunk_len_sec, self.frame_period)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Chunk {
    /// 1-based.
    pub index: usize,
    pub start: usize,
    pub end: usize,
    pub chunk_len_sec: f64,
    pub is_final: bool,
}

impl Chunk {
    pub fn range(&self) -> Range<usize> {
        self.start..self.end
    }

    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.start == self.end
    }
}

/// Number of frames in a chunk, if `chunk_len_sec` is a positive whole
/// multiple of `frame_period`.
pub fn frames_per_chunk(chunk_len_sec: f64, frame_period: f64) -> Result<usize> {
    if !(chunk_len_sec > 0.0) || !(frame_period > 0.0) {
        return Err(config("chunk length and frame period must be positive"));
    }
    let ratio = chunk_len_sec / frame_period;
    let n = ratio.round();
    if n < 1.0 || (ratio - n).abs() > 1e-6 * n.max(1.0) {
        return Err(config(format!(
            "chunk length {chunk_len_sec} s is not a whole multiple of the frame period {frame_period} s"
        )));
    }
    Ok(n as usize)
}

/// Splits a frame sequence into consecutive fixed-size chunks; only the last
/// may be shorter.
pub fn chunk_stream<T>(frames: &[T], chunk_len_sec: f64, frame_period: f64) -> Result<Vec<Chunk>> {
    let per = frames_per_chunk(chunk_len_sec, frame_period)?;
    let total = frames.len();
    let count = total.div_ceil(per);
    Ok((0..count)
        .map(|i| Chunk {
            index: i + 1,
            start: i * per,
            end: ((i + 1) * per).min(total),
            chunk_len_sec,
            is_final: i + 1 == count,
        })
        .collect())
}

/// Display time of a token committed at `chunk_index`.
pub fn output_time(chunk_index: usize, chunk_len_sec: f64) -> Result<f64> {
    if chunk_index < 1 {
        return Err(contract("chunk indices start at 1"));
    }
    Ok(chunk_index as f64 * chunk_len_sec)
}

/// Tokens produced for chunk `c` beyond the committed prefix.
#[derive(Debug, Clone, PartialEq)]
pub struct ChunkOutput {
    pub chunk_index: usize,
    pub tokens: Vec<TokenId>,
    pub log_probs: Vec<f64>,
}

impl ChunkOutput {
    /// The continuation without its terminating EOS.
    pub fn displayable(&self) -> &[TokenId] {
        match self.tokens.last() {
            Some(&Vocab::EOS) => &self.tokens[..self.tokens.len() - 1],
            _ => &self.tokens,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimedToken {
    pub token: TokenId,
    pub chunk: usize,
    pub output_time_sec: f64,
}

/// Append-only record of displayed tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct CommitLog {
    chunk_len_sec: f64,
    entries: Vec<TimedToken>,
}

impl CommitLog {
    pub fn new(chunk_len_sec: f64) -> Self {
        Self { chunk_len_sec, entries: Vec::new() }
    }

    pub fn chunk_len_sec(&self) -> f64 {
        self.chunk_len_sec
    }

    pub fn entries(&self) -> &[TimedToken] {
        &self.entries
    }

    pub fn tokens(&self) -> Vec<TokenId> {
        self.entries.iter().map(|e| e.token).collect()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn last_chunk(&self) -> Option<usize> {
        self.entries.last().map(|e| e.chunk)
    }

    /// Rebuilds a log from stored entries, checking the timestamp law.
    pub fn from_entries(chunk_len_sec: f64, entries: Vec<TimedToken>) -> Result<Self> {
        let mut log = Self::new(chunk_len_sec);
        for e in &entries {
            let want = output_time(e.chunk, chunk_len_sec)?;
            if (e.output_time_sec - want).abs() > 1e-9 * want.max(1.0) {
                return Err(contract(format!(
                    "token at chunk {} stamped {} s, expected {want} s",
                    e.chunk, e.output_time_sec
                )));
            }
            log.commit(&[e.token], e.chunk)?;
        }
        Ok(log)
    }

    /// Appends `tokens`, all stamped with the output time of `chunk_index`.
    pub fn commit(&mut self, tokens: &[TokenId], chunk_index: usize) -> Result<()> {
        let time = output_time(chunk_index, self.chunk_len_sec)?;
        if let Some(last) = self.last_chunk() {
            if chunk_index < last {
                return Err(contract(format!(
                    "commit at chunk {chunk_index} after chunk {last} was already committed"
                )));
            }
        }
        if tokens.contains(&Vocab::BOS) || tokens.contains(&Vocab::EOS) {
            return Err(contract("BOS/EOS are never displayed"));
        }
        self.entries.extend(tokens.iter().map(|&token| TimedToken {
            token,
            chunk: chunk_index,
            output_time_sec: time,
        }));
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn vocab_reserved_and_roundtrip() {
        let v = Vocab::new(["a", "b", "a"]).unwrap();
        assert_eq!(v.len(), 5);
        assert_eq!(v.id("<s>"), Some(Vocab::BOS));
        assert_eq!(v.id("</s>"), Some(Vocab::EOS));
        assert_eq!(v.id("<pad>"), Some(Vocab::PAD));
        for s in v.surfaces() {
            assert_eq!(v.surface(v.id(s).unwrap()), Some(s.as_str()));
        }
        assert!(Vocab::new(["</s>"]).is_err());
        let again = Vocab::from_surfaces(v.surfaces().to_vec()).unwrap();
        assert_eq!(again, v);
    }

    #[test]
    fn corpus_vocab_is_naturally_sorted() {
        let seqs = [vec!["w10".to_string(), "w2".into()], vec!["w1".into()]];
        let v = Vocab::from_corpus(seqs.iter().map(Vec::as_slice)).unwrap();
        assert_eq!(&v.surfaces()[3..], ["w1", "w2", "w10"]);
    }

    #[test]
    fn chunking_examples() {
        let f = vec![0u8; 100];
        let c = chunk_stream(&f, 0.5, 0.01).unwrap();
        assert_eq!(c.iter().map(Chunk::len).collect::<Vec<_>>(), [50, 50]);
        assert!(c[1].is_final && !c[0].is_final);

        let f = vec![0u8; 101];
        let c = chunk_stream(&f, 0.5, 0.01).unwrap();
        assert_eq!(c.iter().map(Chunk::len).collect::<Vec<_>>(), [50, 50, 1]);
        assert_eq!(c.iter().map(|c| c.index).collect::<Vec<_>>(), [1, 2, 3]);

        assert!(chunk_stream::<u8>(&[], 0.5, 0.01).unwrap().is_empty());
        assert!(matches!(chunk_stream(&f, 0.505, 0.01), Err(Error::Config(_))));
        assert!(chunk_stream(&f, 0.0, 0.01).is_err());
    }

    #[test]
    fn output_time_examples() {
        assert_eq!(output_time(3, 0.5).unwrap(), 1.5);
        assert_eq!(output_time(1, 0.5).unwrap(), 0.5);
        assert_eq!(output_time(10, 2.0).unwrap(), 20.0);
        assert!(matches!(output_time(0, 0.5), Err(Error::Contract(_))));
    }

    #[test]
    fn commit_examples() {
        let (a, b) = (3, 4);
        let mut log = CommitLog::new(0.5);
        log.commit(&[a, b], 2).unwrap();
        assert_eq!(
            log.entries(),
            [
                TimedToken { token: a, chunk: 2, output_time_sec: 1.0 },
                TimedToken { token: b, chunk: 2, output_time_sec: 1.0 }
            ]
        );
        let before = log.clone();
        log.commit(&[], 2).unwrap();
        assert_eq!(log, before);

        let mut log = CommitLog::new(0.5);
        log.commit(&[a], 1).unwrap();
        log.commit(&[b], 3).unwrap();
        assert_eq!(log.entries()[1], TimedToken { token: b, chunk: 3, output_time_sec: 1.5 });
        assert!(matches!(log.commit(&[a], 2), Err(Error::Contract(_))));
        assert!(log.commit(&[Vocab::EOS], 3).is_err());
    }

    #[test]
    fn displayable_strips_eos() {
        let out = ChunkOutput { chunk_index: 1, tokens: vec![5, Vocab::EOS], log_probs: vec![-0.1, -0.2] };
        assert_eq!(out.displayable(), [5]);
    }

    proptest! {
        #[test]
        fn chunks_partition_frames(n in 0usize..10_000, per in 1usize..200) {
            let frames = vec![(); n];
            let period = 0.01;
            let chunks = chunk_stream(&frames, per as f64 * period, period).unwrap();
            let mut next = 0;
            for (i, c) in chunks.iter().enumerate() {
                prop_assert_eq!(c.start, next);
                prop_assert_eq!(c.index, i + 1);
                prop_assert!(c.end > c.start);
                if !c.is_final {
                    prop_assert_eq!(c.len(), per);
                } else {
                    prop_assert!(c.len() <= per);
                }
                next = c.end;
            }
            prop_assert_eq!(next, n);
        }

        #[test]
        fn timestamps_follow_chunk_index(batches in proptest::collection::vec((0usize..4, 0usize..3), 0..20)) {
            let mut log = CommitLog::new(0.5);
            let mut chunk = 1;
            let mut seen = Vec::new();
            for (count, step) in batches {
                chunk += step;
                let toks: Vec<TokenId> = (0..count as TokenId).map(|t| t + 3).collect();
                log.commit(&toks, chunk).unwrap();
                let now = log.tokens();
                prop_assert!(now.starts_with(&seen));
                seen = now;
            }
            for e in log.entries() {
                prop_assert_eq!(e.output_time_sec, e.chunk as f64 * 0.5);
            }
        }
    }
}
