//! Word error rate and output-time latency.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};
use crate::stream::CommitLog;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct WerBreakdown {
    pub substitutions: usize,
    pub deletions: usize,
    pub insertions: usize,
    pub ref_len: usize,
}

impl WerBreakdown {
    pub fn errors(&self) -> usize {
        self.substitutions + self.deletions + self.insertions
    }

    /// `(S + D + I) / N`. Infinite when the reference is empty but the
    /// hypothesis is not; zero when both are empty.
    pub fn rate(&self) -> f64 {
        match (self.errors(), self.ref_len) {
            (0, _) => 0.0,
            (_, 0) => f64::INFINITY,
            (e, n) => e as f64 / n as f64,
        }
    }
}

impl std::ops::Add for WerBreakdown {
    type Output = Self;

    fn add(self, o: Self) -> Self {
        Self {
            substitutions: self.substitutions + o.substitutions,
            deletions: self.deletions + o.deletions,
            insertions: self.insertions + o.insertions,
            ref_len: self.ref_len + o.ref_len,
        }
    }
}

impl std::iter::Sum for WerBreakdown {
    fn sum<I: Iterator<Item = Self>>(iter: I) -> Self {
        iter.fold(Self::default(), |a, b| a + b)
    }
}

/// Minimal unit-cost edit alignment of `hyp` against `reference`.
///
/// Among alignments with the fewest edits, the one with the most
/// substitutions is reported.
pub fn wer<T: PartialEq>(reference: &[T], hyp: &[T]) -> WerBreakdown {
    let (n, m) = (reference.len(), hyp.len());
    // cell: (edits, substitutions, deletions, insertions)
    type Cell = (usize, usize, usize, usize);
    let better = |a: Cell, b: Cell| if (a.0, usize::MAX - a.1) <= (b.0, usize::MAX - b.1) { a } else { b };
    let mut prev: Vec<Cell> = (0..=m).map(|j| (j, 0, 0, j)).collect();
    let mut cur = vec![(0, 0, 0, 0); m + 1];
    for i in 1..=n {
        cur[0] = (i, 0, i, 0);
        for j in 1..=m {
            let diag = prev[j - 1];
            let sub = if reference[i - 1] == hyp[j - 1] { diag } else { (diag.0 + 1, diag.1 + 1, diag.2, diag.3) };
            let up = prev[j];
            let del = (up.0 + 1, up.1, up.2 + 1, up.3);
            let left = cur[j - 1];
            let ins = (left.0 + 1, left.1, left.2, left.3 + 1);
            cur[j] = better(better(sub, del), ins);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    let (_, s, d, i) = prev[m];
    WerBreakdown { substitutions: s, deletions: d, insertions: i, ref_len: n }
}

/// Pooled error counts over `(reference, hypothesis)` pairs.
pub fn corpus_wer<'a, T: PartialEq + 'a>(pairs: impl IntoIterator<Item = (&'a [T], &'a [T])>) -> WerBreakdown {
    pairs.into_iter().map(|(r, h)| wer(r, h)).sum()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyReport {
    pub mean_output_time: f64,
    pub tokens: usize,
    pub utterances: BTreeSet<String>,
    pub delta: Option<f64>,
}

/// Token-weighted mean output time over every committed token.
pub fn mean_output_time<'a>(logs: impl IntoIterator<Item = (&'a str, &'a CommitLog)>) -> Result<LatencyReport> {
    let mut utterances = BTreeSet::new();
    let mut total = 0.0;
    let mut tokens = 0usize;
    for (id, log) in logs {
        if !utterances.insert(id.to_string()) {
            return Err(contract(format!("utterance {id} appears twice")));
        }
        for e in log.entries() {
            total += e.output_time_sec;
            tokens += 1;
        }
    }
    if tokens == 0 {
        return Err(Error::UndefinedMetric("no committed tokens".into()));
    }
    Ok(LatencyReport { mean_output_time: total / tokens as f64, tokens, utterances, delta: None })
}

/// `a − b` in seconds, for reports over the same utterances.
pub fn latency_delta(a: &LatencyReport, b: &LatencyReport) -> Result<f64> {
    if a.utterances != b.utterances {
        return Err(contract("latency reports cover different utterance sets"));
    }
    Ok(a.mean_output_time - b.mean_output_time)
}

impl LatencyReport {
    pub fn with_baseline(mut self, baseline: &LatencyReport) -> Result<Self> {
        self.delta = Some(latency_delta(&self, baseline)?);
        Ok(self)
    }
}
