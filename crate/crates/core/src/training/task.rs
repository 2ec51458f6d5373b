use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{config, Result};
use crate::stream::{Frame, TokenId, Utterance, Vocab};

/// Parameters of the synthetic transcription (or translation) task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticTaskSpec {
    /// Number of ordinary words.
    pub vocab_size: usize,
    pub min_tokens: usize,
    pub max_tokens: usize,
    pub min_frames_per_token: usize,
    pub max_frames_per_token: usize,
    /// Each word is rendered as this many consecutive phone segments; words
    /// share phones, so a partly heard word is ambiguous.
    pub phones_per_token: usize,
    pub frame_dim: usize,
    pub noise_std: f64,
    pub frame_period: f64,
    /// Targets are a fixed word mapping of the source with some adjacent
    /// pairs swapped.
    pub translation: bool,
    /// Fixes the word prototypes and the translation mapping.
    pub task_seed: u64,
}

impl Default for SyntheticTaskSpec {
    fn default() -> Self {
        Self {
            vocab_size: 12,
            min_tokens: 1,
            max_tokens: 12,
            min_frames_per_token: 4,
            max_frames_per_token: 8,
            phones_per_token: 2,
            frame_dim: 16,
            noise_std: 0.5,
            frame_period: 0.05,
            translation: false,
            task_seed: 7,
        }
    }
}

impl SyntheticTaskSpec {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 4 {
            return Err(config("the synthetic task needs at least four words"));
        }
        if self.min_tokens < 1 || self.min_tokens > self.max_tokens {
            return Err(config("token range must satisfy 1 <= min <= max"));
        }
        if self.min_frames_per_token < 1 || self.min_frames_per_token > self.max_frames_per_token {
            return Err(config("frames-per-token range must satisfy 1 <= min <= max"));
        }
        if self.phones_per_token == 0 || self.phones_per_token > self.min_frames_per_token {
            return Err(config("phones per token must lie in 1..=min frames per token"));
        }
        if self.frame_dim == 0 {
            return Err(config("frame dimension must be positive"));
        }
        if !(self.noise_std >= 0.0) || !self.noise_std.is_finite() {
            return Err(config("noise standard deviation must be non-negative"));
        }
        if !(self.frame_period > 0.0) {
            return Err(config("frame period must be positive"));
        }
        Ok(())
    }

    pub fn vocab(&self) -> Vocab {
        Vocab::synthetic(self.vocab_size)
    }

    /// Phones available at each position within a word.
    fn phones_per_slot(&self) -> usize {
        let k = self.phones_per_token as u32;
        (1..).find(|&m: &usize| m.pow(k) >= self.vocab_size).expect("some inventory suffices")
    }

    /// One prototype frame per phone. Position `j` of a word draws from its
    /// own block of phones, so neighbouring segments never coincide.
    pub fn phone_prototypes(&self) -> Vec<Frame> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.task_seed);
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        (0..self.phones_per_slot() * self.phones_per_token)
            .map(|_| (0..self.frame_dim).map(|_| normal.sample(&mut rng)).collect())
            .collect()
    }

    /// Phone indices of every vocabulary id (empty for reserved ids).
    pub fn pronunciations(&self) -> Vec<Vec<usize>> {
        let m = self.phones_per_slot();
        let k = self.phones_per_token;
        let mut combos: Vec<Vec<usize>> = (0..m.pow(k as u32))
            .map(|mut c| {
                (0..k)
                    .map(|j| {
                        let digit = c % m;
                        c /= m;
                        j * m + digit
                    })
                    .collect()
            })
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(self.task_seed ^ 0x7068_6f6e);
        combos.shuffle(&mut rng);
        let mut out = vec![Vec::new(); Vocab::RESERVED.len()];
        out.extend(combos.into_iter().take(self.vocab_size));
        out
    }

    /// Noise-free frames of `word` lasting `frames` frames.
    pub fn render(&self, word: TokenId, frames: usize) -> Vec<Frame> {
        let protos = self.phone_prototypes();
        let phones = &self.pronunciations()[word as usize];
        render_with(&protos, phones, frames)
    }

    /// Word-to-word mapping used for translation targets.
    pub fn word_map(&self) -> Vec<TokenId> {
        let vocab = self.vocab();
        let words: Vec<TokenId> = vocab.words().collect();
        let mut rng = ChaCha8Rng::seed_from_u64(self.task_seed ^ 0x7261_6e73);
        let mut shuffled = words.clone();
        for i in (1..shuffled.len()).rev() {
            shuffled.swap(i, rng.gen_range(0..=i));
        }
        let mut map: Vec<TokenId> = (0..vocab.len() as TokenId).collect();
        for (&w, &t) in words.iter().zip(&shuffled) {
            map[w as usize] = t;
        }
        map
    }

    /// Maps a source sequence to its translation. A pair is swapped when its
    /// first source word lies in the lower half of the word ids.
    pub fn translate(&self, source: &[TokenId]) -> Vec<TokenId> {
        let map = self.word_map();
        let pivot = Vocab::RESERVED.len() as TokenId + (self.vocab_size / 2) as TokenId;
        let mut out: Vec<TokenId> = source.iter().map(|&t| map[t as usize]).collect();
        let mut i = 0;
        while i + 1 < out.len() {
            if source[i] < pivot {
                out.swap(i, i + 1);
                i += 2;
            } else {
                i += 1;
            }
        }
        out
    }
}

/// Draws `count` utterances. Each token is its prototype frame repeated for
/// its duration, plus Gaussian noise; consecutive tokens always differ.
pub fn gen_dataset(spec: &SyntheticTaskSpec, count: usize, seed: u64) -> Result<Vec<Utterance>> {
    spec.validate()?;
    if count == 0 {
        return Err(config("dataset size must be at least 1"));
    }
    let protos = spec.phone_prototypes();
    let prons = spec.pronunciations();
    let words: Vec<TokenId> = spec.vocab().words().collect();
    let noise = Normal::new(0.0, spec.noise_std.max(f64::MIN_POSITIVE)).expect("finite std");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(count);
    for n in 0..count {
        let len = rng.gen_range(spec.min_tokens..=spec.max_tokens);
        let mut tokens: Vec<TokenId> = Vec::with_capacity(len);
        while tokens.len() < len {
            let t = words[rng.gen_range(0..words.len())];
            if tokens.last() != Some(&t) {
                tokens.push(t);
            }
        }
        let mut frames = Vec::new();
        let mut ends = Vec::with_capacity(len);
        for &t in &tokens {
            let dur = rng.gen_range(spec.min_frames_per_token..=spec.max_frames_per_token);
            for clean in render_with(&protos, &prons[t as usize], dur) {
                let frame: Frame = clean
                    .iter()
                    .map(|&p| if spec.noise_std > 0.0 { p + noise.sample(&mut rng) } else { p })
                    .collect();
                frames.push(frame);
            }
            ends.push(frames.len());
        }
        let mut utt = Utterance::new(format!("utt{n:05}"), frames, tokens.clone());
        utt.frame_period = spec.frame_period;
        utt.alignment = Some(ends);
        if spec.translation {
            utt.target = Some(spec.translate(&tokens));
        }
        out.push(utt);
    }
    Ok(out)
}

fn render_with(protos: &[Frame], phones: &[usize], frames: usize) -> Vec<Frame> {
    let k = phones.len();
    (0..frames).map(|f| protos[phones[f * k / frames]].clone()).collect()
}

/// Proportional prefix of an utterance: the first `⌈I·p⌉` frames and the
/// first `⌈J·p⌉` output tokens.
pub fn make_partial_pair(utt: &Utterance, p: f64) -> Result<(Vec<Frame>, Vec<TokenId>)> {
    if !(p > 0.0 && p <= 1.0) {
        return Err(config(format!("partial ratio {p} outside (0, 1]")));
    }
    let tokens = utt.target.as_ref().unwrap_or(&utt.reference);
    let frames = prefix_len(utt.frames.len(), p);
    let toks = prefix_len(tokens.len(), p);
    Ok((utt.frames[..frames].to_vec(), tokens[..toks].to_vec()))
}

fn prefix_len(n: usize, p: f64) -> usize {
    ((n as f64 * p - 1e-9).ceil().max(0.0) as usize).min(n)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn utt(frames: usize, tokens: usize) -> Utterance {
        Utterance::new("x", vec![vec![0.0]; frames], (3..3 + tokens as TokenId).collect())
    }

    #[test]
    fn partial_pair_examples() {
        let (f, t) = make_partial_pair(&utt(10, 4), 0.25).unwrap();
        assert_eq!((f.len(), t.len()), (3, 1));
        let (f, t) = make_partial_pair(&utt(7, 3), 0.4).unwrap();
        assert_eq!((f.len(), t.len()), (3, 2));
        let (f, t) = make_partial_pair(&utt(9, 5), 1.0).unwrap();
        assert_eq!((f.len(), t.len()), (9, 5));
        let (f, _) = make_partial_pair(&utt(10, 4), 0.3).unwrap();
        assert_eq!(f.len(), 3);
        assert!(make_partial_pair(&utt(10, 4), 0.0).is_err());
        assert!(make_partial_pair(&utt(10, 4), 1.5).is_err());
    }

    #[test]
    fn datasets_are_reproducible_and_in_range() {
        let spec = SyntheticTaskSpec::default();
        let a = gen_dataset(&spec, 1000, 3).unwrap();
        assert_eq!(a, gen_dataset(&spec, 1000, 3).unwrap());
        for u in &a {
            assert!((1..=12).contains(&u.reference.len()));
            assert!(u.reference.windows(2).all(|w| w[0] != w[1]));
            u.validate().unwrap();
        }
        assert!(gen_dataset(&spec, 0, 3).is_err());
    }

    #[test]
    fn noiseless_frames_repeat_prototypes() {
        for phones in [1, 2] {
            let spec = SyntheticTaskSpec { noise_std: 0.0, phones_per_token: phones, ..SyntheticTaskSpec::default() };
            let protos = spec.phone_prototypes();
            for u in gen_dataset(&spec, 20, 1).unwrap() {
                let ends = u.alignment.clone().unwrap();
                let mut start = 0;
                for (&t, &end) in u.reference.iter().zip(&ends) {
                    let want = spec.render(t, end - start);
                    assert_eq!(&u.frames[start..end], &want[..]);
                    if phones == 1 {
                        assert!(want.iter().all(|f| protos.contains(f) && *f == want[0]));
                    }
                    start = end;
                }
            }
        }
    }

    #[test]
    fn pronunciations_are_distinct() {
        let spec = SyntheticTaskSpec::default();
        let prons = spec.pronunciations();
        let words = &prons[Vocab::RESERVED.len()..];
        assert_eq!(words.len(), 12);
        for (i, a) in words.iter().enumerate() {
            assert_eq!(a.len(), 2);
            assert!(words[i + 1..].iter().all(|b| b != a));
        }
        // some words share their first phone
        assert!(words.iter().any(|a| words.iter().filter(|b| b[0] == a[0]).count() > 1));
    }

    #[test]
    fn translation_targets() {
        let spec = SyntheticTaskSpec { translation: true, ..SyntheticTaskSpec::default() };
        let data = gen_dataset(&spec, 50, 2).unwrap();
        let map = spec.word_map();
        for u in &data {
            let t = u.target.as_ref().unwrap();
            let mut mapped: Vec<TokenId> = u.reference.iter().map(|&w| map[w as usize]).collect();
            let mut sorted = t.clone();
            mapped.sort_unstable();
            sorted.sort_unstable();
            assert_eq!(mapped, sorted);
        }
        assert!(data.iter().any(|u| {
            let direct: Vec<TokenId> = u.reference.iter().map(|&w| map[w as usize]).collect();
            u.target.as_ref() != Some(&direct)
        }));
    }

    proptest! {
        #[test]
        fn partial_pairs_are_monotone(frames in 0usize..60, tokens in 0usize..15, a in 0.001f64..=1.0, b in 0.001f64..=1.0) {
            let (p1, p2) = if a <= b { (a, b) } else { (b, a) };
            let u = utt(frames, tokens);
            let (f1, t1) = make_partial_pair(&u, p1).unwrap();
            let (f2, t2) = make_partial_pair(&u, p2).unwrap();
            prop_assert!(f2.starts_with(&f1));
            prop_assert!(t2.starts_with(&t1));
        }
    }
}
