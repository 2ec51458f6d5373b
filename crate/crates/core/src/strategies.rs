//! Partial hypothesis selection: which prefix of a chunk's continuation gets
//! committed.
//!
//! Every function here operates on the continuation *beyond* the already
//! committed tokens, never on the full hypothesis from BOS.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{config, Result};
use crate::stream::{TokenId, Vocab};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum StrategyConfig {
    /// Withhold the last `n` tokens of every chunk.
    HoldN { n: usize },
    /// Commit nothing for the first `k` chunks, then at most `rate` tokens
    /// per second of audio.
    WaitK { k: usize, rate: f64 },
    /// Commit what two consecutive chunks agree on.
    LocalAgreement,
    /// Commit only at the final chunk.
    Offline,
}

impl StrategyConfig {
    pub fn validate(&self) -> Result<()> {
        match *self {
            StrategyConfig::WaitK { rate, .. } if !(rate > 0.0 && rate.is_finite()) => {
                Err(config(format!("wait-k rate must be positive, got {rate}")))
            }
            _ => Ok(()),
        }
    }

    /// Builds a configuration from command-line style parts.
    pub fn parse(name: &str, n: Option<usize>, k: Option<usize>, rate: Option<f64>) -> Result<Self> {
        let cfg = match name {
            "hold-n" => StrategyConfig::HoldN {
                n: n.ok_or_else(|| config("hold-n needs --n"))?,
            },
            "hold-0" => StrategyConfig::HoldN { n: 0 },
            "wait-k" => StrategyConfig::WaitK {
                k: k.ok_or_else(|| config("wait-k needs --k"))?,
                rate: rate.ok_or_else(|| config("wait-k needs --rate"))?,
            },
            "local-agreement" => StrategyConfig::LocalAgreement,
            "offline" => StrategyConfig::Offline,
            other => return Err(config(format!("unknown strategy {other:?}"))),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn tag(&self) -> &'static str {
        match self {
            StrategyConfig::HoldN { .. } => "hold-n",
            StrategyConfig::WaitK { .. } => "wait-k",
            StrategyConfig::LocalAgreement => "local-agreement",
            StrategyConfig::Offline => "offline",
        }
    }

    pub fn params(&self) -> String {
        match self {
            StrategyConfig::HoldN { n } => format!("n={n}"),
            StrategyConfig::WaitK { k, rate } => format!("k={k};r={rate}"),
            StrategyConfig::LocalAgreement | StrategyConfig::Offline => String::new(),
        }
    }
}

impl fmt::Display for StrategyConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.params().as_str() {
            "" => f.write_str(self.tag()),
            p => write!(f, "{}({p})", self.tag()),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct StrategyState {
    /// Undisplayed tail of the previous chunk's continuation.
    pub discard: Vec<TokenId>,
    /// Fractional wait-k allowance carried between chunks.
    pub budget: f64,
    pub chunks_seen: usize,
}

pub fn hold_n<T: Clone>(w: &[T], n: usize) -> Vec<T> {
    w[..w.len().saturating_sub(n)].to_vec()
}

pub fn lcp<T: Clone + PartialEq>(a: &[T], b: &[T]) -> Vec<T> {
    let len = a.iter().zip(b).take_while(|(x, y)| x == y).count();
    a[..len].to_vec()
}

pub fn wait_k<T: Clone>(
    w: &[T],
    chunk: usize,
    mut state: StrategyState,
    k: usize,
    rate: f64,
    chunk_len_sec: f64,
) -> (Vec<T>, StrategyState) {
    if chunk <= k {
        return (Vec::new(), state);
    }
    state.budget += rate * chunk_len_sec;
    // Tolerate accumulation error such as 3 * (0.1 * 10) landing just below 3.
    let allowed = (state.budget + 1e-9).floor().max(0.0) as usize;
    let take = w.len().min(allowed);
    state.budget = (state.budget - take as f64).max(0.0);
    (w[..take].to_vec(), state)
}

pub fn local_agreement(
    w: &[TokenId],
    chunk: usize,
    mut state: StrategyState,
) -> (Vec<TokenId>, StrategyState) {
    if chunk <= 1 {
        state.discard = w.to_vec();
        return (Vec::new(), state);
    }
    let agreed = lcp(&state.discard, w);
    state.discard = w[agreed.len()..].to_vec();
    (agreed, state)
}

/// Dispatches to the configured prefix function. On the final chunk every
/// strategy flushes its whole continuation. EOS is never returned.
pub fn select_prefix(
    cfg: &StrategyConfig,
    state: StrategyState,
    chunk: usize,
    is_final: bool,
    w: &[TokenId],
    chunk_len_sec: f64,
) -> (Vec<TokenId>, StrategyState) {
    let w = match w.last() {
        Some(&Vocab::EOS) => &w[..w.len() - 1],
        _ => w,
    };
    let mut state = state;
    state.chunks_seen += 1;
    if is_final {
        state.discard.clear();
        return (w.to_vec(), state);
    }
    match *cfg {
        StrategyConfig::HoldN { n } => (hold_n(w, n), state),
        StrategyConfig::WaitK { k, rate } => wait_k(w, chunk, state, k, rate, chunk_len_sec),
        StrategyConfig::LocalAgreement => local_agreement(w, chunk, state),
        StrategyConfig::Offline => (Vec::new(), state),
    }
}

/// A configured strategy together with its carried state.
#[derive(Debug, Clone)]
pub struct Strategy {
    cfg: StrategyConfig,
    state: StrategyState,
    chunk_len_sec: f64,
}

impl Strategy {
    pub fn new(cfg: StrategyConfig, chunk_len_sec: f64) -> Result<Self> {
        cfg.validate()?;
        Ok(Self { cfg, state: StrategyState::default(), chunk_len_sec })
    }

    pub fn config(&self) -> &StrategyConfig {
        &self.cfg
    }

    pub fn state(&self) -> &StrategyState {
        &self.state
    }

    pub fn select(&mut self, chunk: usize, is_final: bool, w: &[TokenId]) -> Vec<TokenId> {
        let state = std::mem::take(&mut self.state);
        let (out, state) = select_prefix(&self.cfg, state, chunk, is_final, w, self.chunk_len_sec);
        self.state = state;
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const A: TokenId = 10;
    const B: TokenId = 11;
    const C: TokenId = 12;
    const D: TokenId = 13;
    const E: TokenId = 14;

    #[test]
    fn hold_n_examples() {
        assert_eq!(hold_n(&[A, B, C, D, E], 2), [A, B, C]);
        assert!(hold_n(&[A, B], 5).is_empty());
        assert_eq!(hold_n(&[A, B, C], 0), [A, B, C]);
    }

    #[test]
    fn wait_k_examples() {
        let (out, st) = wait_k(&[A, B, C], 1, StrategyState::default(), 1, 8.0, 0.5);
        assert!(out.is_empty());
        assert_eq!(st.budget, 0.0);

        let (out, _) = wait_k(&[A], 2, StrategyState::default(), 1, 8.0, 0.5);
        assert_eq!(out, [A]);

        let (out, st) = wait_k(&[A, B, C], 2, StrategyState::default(), 0, 2.0, 0.5);
        assert_eq!(out, [A]);
        assert_eq!(st.budget, 0.0);
    }

    #[test]
    fn wait_k_carries_fractional_budget() {
        // 1 token/s at 0.5 s chunks: one token every second chunk.
        let mut st = StrategyState::default();
        let mut emitted = Vec::new();
        for c in 1..=4 {
            let (out, next) = wait_k(&[A, B], c, st, 0, 1.0, 0.5);
            emitted.push(out.len());
            st = next;
        }
        assert_eq!(emitted, [0, 1, 0, 1]);
    }

    #[test]
    fn lcp_examples() {
        assert_eq!(lcp(&[A, B, C], &[A, B, D]), [A, B]);
        assert!(lcp(&[], &[A]).is_empty());
        assert_eq!(lcp(&[A, B], &[A, B]), [A, B]);
    }

    #[test]
    fn local_agreement_examples() {
        let (out, st) = local_agreement(&[A, B], 1, StrategyState::default());
        assert!(out.is_empty());
        assert_eq!(st.discard, [A, B]);

        let (out, st2) = local_agreement(&[A, B, C], 2, st.clone());
        assert_eq!(out, [A, B]);
        assert_eq!(st2.discard, [C]);

        let (out, st3) = local_agreement(&[20, 21], 2, st);
        assert!(out.is_empty());
        assert_eq!(st3.discard, [20, 21]);
    }

    #[test]
    fn select_prefix_examples() {
        let hold2 = StrategyConfig::HoldN { n: 2 };
        let (out, _) = select_prefix(&hold2, StrategyState::default(), 1, false, &[A, B, C], 0.5);
        assert_eq!(out, [A]);
        let (out, _) = select_prefix(&hold2, StrategyState::default(), 1, true, &[A, B, C], 0.5);
        assert_eq!(out, [A, B, C]);
        let (out, _) =
            select_prefix(&StrategyConfig::Offline, StrategyState::default(), 3, false, &[A, B], 0.5);
        assert!(out.is_empty());
        let (out, _) = select_prefix(
            &StrategyConfig::Offline,
            StrategyState::default(),
            3,
            true,
            &[A, B, Vocab::EOS],
            0.5,
        );
        assert_eq!(out, [A, B]);
    }

    #[test]
    fn eos_is_stripped_before_selection() {
        let hold1 = StrategyConfig::HoldN { n: 1 };
        let (out, _) =
            select_prefix(&hold1, StrategyState::default(), 1, false, &[A, B, Vocab::EOS], 0.5);
        assert_eq!(out, [A]);
    }

    #[test]
    fn parse_cli_names() {
        assert_eq!(StrategyConfig::parse("hold-0", None, None, None).unwrap(), StrategyConfig::HoldN { n: 0 });
        assert_eq!(
            StrategyConfig::parse("wait-k", None, Some(1), Some(4.0)).unwrap(),
            StrategyConfig::WaitK { k: 1, rate: 4.0 }
        );
        assert!(StrategyConfig::parse("wait-k", None, Some(1), Some(0.0)).is_err());
        assert!(StrategyConfig::parse("hold-n", None, None, None).is_err());
        assert!(StrategyConfig::parse("beam", None, None, None).is_err());
    }

    fn any_strategy() -> impl PropStrategy<Value = StrategyConfig> {
        prop_oneof![
            (0usize..6).prop_map(|n| StrategyConfig::HoldN { n }),
            (0usize..3, 0.5f64..10.0).prop_map(|(k, rate)| StrategyConfig::WaitK { k, rate }),
            Just(StrategyConfig::LocalAgreement),
            Just(StrategyConfig::Offline),
        ]
    }

    use proptest::strategy::Strategy as PropStrategy;

    proptest! {
        #[test]
        fn commits_are_prefixes(cfg in any_strategy(),
                                outputs in proptest::collection::vec(proptest::collection::vec(3u32..7, 0..6), 1..8)) {
            let mut state = StrategyState::default();
            let last = outputs.len();
            for (i, w) in outputs.iter().enumerate() {
                let (out, next) = select_prefix(&cfg, state.clone(), i + 1, i + 1 == last, w, 0.5);
                prop_assert!(w.starts_with(&out));
                // determinism
                let (again, next2) = select_prefix(&cfg, state, i + 1, i + 1 == last, w, 0.5);
                prop_assert_eq!(&out, &again);
                prop_assert_eq!(&next, &next2);
                state = next;
            }
        }

        #[test]
        fn hold_n_length(w in proptest::collection::vec(0u32..9, 0..12), n in 0usize..15) {
            prop_assert_eq!(hold_n(&w, n).len(), w.len().saturating_sub(n));
            prop_assert_eq!(hold_n(&w, 0), w);
        }

        #[test]
        fn local_agreement_needs_two_votes(outputs in proptest::collection::vec(proptest::collection::vec(3u32..6, 0..5), 1..8)) {
            let mut state = StrategyState::default();
            for (i, w) in outputs.iter().enumerate() {
                let prev = state.discard.clone();
                let (out, next) = local_agreement(w, i + 1, state);
                for (j, t) in out.iter().enumerate() {
                    prop_assert_eq!(Some(t), prev.get(j));
                    prop_assert_eq!(Some(t), w.get(j));
                }
                state = next;
            }
        }
    }
}
