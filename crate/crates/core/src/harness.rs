//! Running sessions over utterance sets: file formats, sweeps, mode audits.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::sync::Arc;
use std::time::Duration;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::decoder::{run_session_with_stats, BeamConfig, DecodeMode, Session, SessionStats};
use crate::error::{config, contract, Error, Result};
use crate::metrics::{corpus_wer, latency_delta, mean_output_time, WerBreakdown};
use crate::model::{EncoderKind, SequenceModel, SyntheticAlignedModel, SyntheticConfig, TinyTransformer};
use crate::stream::{CommitLog, TimedToken, TokenId, Utterance, Vocab, DEFAULT_FRAME_PERIOD};
use crate::strategies::StrategyConfig;

/// A model ready to decode any utterance of a set.
#[derive(Debug, Clone)]
pub enum ModelHandle {
    /// Built per utterance from its alignment.
    Synthetic { cfg: SyntheticConfig, vocab: Vocab },
    Transformer(Arc<TinyTransformer>),
}

impl ModelHandle {
    pub fn vocab(&self) -> &Vocab {
        match self {
            ModelHandle::Synthetic { vocab, .. } => vocab,
            ModelHandle::Transformer(m) => m.vocab(),
        }
    }

    pub fn encoder_kind(&self) -> EncoderKind {
        match self {
            ModelHandle::Synthetic { .. } => EncoderKind::Unidirectional,
            ModelHandle::Transformer(m) => m.encoder_kind(),
        }
    }

    pub fn run(
        &self,
        utt: &Utterance,
        chunk_len_sec: f64,
        strategy: StrategyConfig,
        beam: &BeamConfig,
        mode: DecodeMode,
    ) -> Result<(CommitLog, SessionStats)> {
        match self {
            ModelHandle::Synthetic { cfg, vocab } => {
                let m = SyntheticAlignedModel::from_utterance(utt, vocab, *cfg)?;
                run_session_with_stats(&m, utt, chunk_len_sec, strategy, beam, mode)
            }
            ModelHandle::Transformer(m) => run_session_with_stats(m.as_ref(), utt, chunk_len_sec, strategy, beam, mode),
        }
    }

    /// Like [`ModelHandle::run`], but waits one chunk length before each chunk
    /// and reports every chunk's commits as they happen.
    pub fn run_realtime(
        &self,
        utt: &Utterance,
        chunk_len_sec: f64,
        strategy: StrategyConfig,
        beam: &BeamConfig,
        mode: DecodeMode,
        on_commit: &mut dyn FnMut(usize, &[TokenId]),
    ) -> Result<CommitLog> {
        fn drive<M: SequenceModel>(
            m: &M,
            utt: &Utterance,
            chunk_len_sec: f64,
            strategy: StrategyConfig,
            beam: &BeamConfig,
            mode: DecodeMode,
            on_commit: &mut dyn FnMut(usize, &[TokenId]),
        ) -> Result<CommitLog> {
            let mut session = Session::new(m, utt, strategy, *beam, mode, chunk_len_sec)?;
            for chunk in utt.chunks(chunk_len_sec)? {
                std::thread::sleep(Duration::from_secs_f64(chunk_len_sec));
                let (_, committed) = session.step_chunk(&chunk)?;
                on_commit(chunk.index, &committed);
            }
            Ok(session.finish().0)
        }
        match self {
            ModelHandle::Synthetic { cfg, vocab } => {
                let m = SyntheticAlignedModel::from_utterance(utt, vocab, *cfg)?;
                drive(&m, utt, chunk_len_sec, strategy, beam, mode, on_commit)
            }
            ModelHandle::Transformer(m) => drive(m.as_ref(), utt, chunk_len_sec, strategy, beam, mode, on_commit),
        }
    }
}

fn default_period() -> f64 {
    DEFAULT_FRAME_PERIOD
}

/// One line of an utterance JSONL file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UtteranceRecord {
    pub id: String,
    #[serde(default = "default_period")]
    pub frame_period: f64,
    pub frames: Vec<Vec<f64>>,
    #[serde(rename = "ref")]
    pub reference: Vec<String>,
    #[serde(rename = "tgt", default, skip_serializing_if = "Option::is_none")]
    pub target: Option<Vec<String>>,
    #[serde(rename = "align", default, skip_serializing_if = "Option::is_none")]
    pub alignment: Option<Vec<usize>>,
}

impl UtteranceRecord {
    pub fn from_utterance(utt: &Utterance, vocab: &Vocab) -> Result<Self> {
        Ok(Self {
            id: utt.id.clone(),
            frame_period: utt.frame_period,
            frames: utt.frames.clone(),
            reference: vocab.decode(&utt.reference)?,
            target: utt.target.as_ref().map(|t| vocab.decode(t)).transpose()?,
            alignment: utt.alignment.clone(),
        })
    }

    pub fn to_utterance(&self, vocab: &Vocab) -> Result<Utterance> {
        let mut utt = Utterance::new(self.id.clone(), self.frames.clone(), vocab.encode(&self.reference)?);
        utt.frame_period = self.frame_period;
        utt.target = self.target.as_ref().map(|t| vocab.encode(t)).transpose()?;
        utt.alignment = self.alignment.clone();
        utt.validate()?;
        Ok(utt)
    }

    /// Output-side surfaces: the target when present, else the reference.
    pub fn output_words(&self) -> &[String] {
        self.target.as_deref().unwrap_or(&self.reference)
    }
}

/// Parses JSON lines, skipping blank ones.
pub fn read_jsonl<T: for<'de> Deserialize<'de>>(reader: impl BufRead) -> Result<Vec<T>> {
    let mut out = Vec::new();
    for (n, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Format(format!("line {}: {e}", n + 1)))?);
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(mut writer: impl Write, items: &[T]) -> Result<()> {
    for item in items {
        serde_json::to_writer(&mut writer, item)?;
        writer.write_all(b"\n")?;
    }
    Ok(())
}

/// Vocabulary covering every word of a record set, references and targets.
pub fn corpus_vocab(records: &[UtteranceRecord]) -> Result<Vocab> {
    Vocab::from_corpus(
        records
            .iter()
            .flat_map(|r| std::iter::once(r.reference.as_slice()).chain(r.target.as_deref())),
    )
}

/// One committed token as stored on disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CommitRecord {
    pub utt: String,
    pub token: String,
    pub chunk: usize,
    pub t_out: f64,
}

pub fn commit_records(utt: &str, log: &CommitLog, vocab: &Vocab) -> Result<Vec<CommitRecord>> {
    log.entries()
        .iter()
        .map(|e| {
            let token = vocab
                .surface(e.token)
                .ok_or_else(|| contract(format!("token id {} not in vocabulary", e.token)))?;
            Ok(CommitRecord { utt: utt.to_string(), token: token.to_string(), chunk: e.chunk, t_out: e.output_time_sec })
        })
        .collect()
}

/// Regroups commit records by utterance, in first-seen order, as surface
/// strings with their output times.
pub fn group_commits(records: &[CommitRecord]) -> Vec<(String, Vec<(String, usize, f64)>)> {
    let mut order: Vec<String> = Vec::new();
    let mut groups: BTreeMap<String, Vec<(String, usize, f64)>> = BTreeMap::new();
    for r in records {
        let g = groups.entry(r.utt.clone()).or_insert_with(|| {
            order.push(r.utt.clone());
            Vec::new()
        });
        g.push((r.token.clone(), r.chunk, r.t_out));
    }
    order.into_iter().map(|id| {
        let g = groups.remove(&id).unwrap_or_default();
        (id, g)
    }).collect()
}

/// Summary written by the evaluation command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    #[serde(rename = "WER")]
    pub wer: f64,
    #[serde(rename = "S")]
    pub substitutions: usize,
    #[serde(rename = "D")]
    pub deletions: usize,
    #[serde(rename = "I")]
    pub insertions: usize,
    pub mean_t_out: f64,
    pub delta_vs_baseline: Option<f64>,
}

/// Scores commit records against reference records. Utterances without any
/// commit count as empty hypotheses.
pub fn evaluate(
    references: &[UtteranceRecord],
    commits: &[CommitRecord],
    baseline: Option<&[CommitRecord]>,
    chunk_len_sec: f64,
) -> Result<EvalSummary> {
    let vocab = corpus_vocab(references)?;
    let logs = |records: &[CommitRecord]| -> Result<BTreeMap<String, CommitLog>> {
        let mut vocab = vocab.clone();
        let mut out = BTreeMap::new();
        for (id, entries) in group_commits(records) {
            if !references.iter().any(|r| r.id == id) {
                return Err(contract(format!("commits for unknown utterance {id}")));
            }
            let mut timed = Vec::with_capacity(entries.len());
            for (surface, chunk, t_out) in entries {
                let token = match vocab.id(&surface) {
                    Some(t) => t,
                    None => {
                        // words never seen in a reference still count as errors
                        let mut words: Vec<String> = vocab.surfaces()[Vocab::RESERVED.len()..].to_vec();
                        words.push(surface.clone());
                        vocab = Vocab::new(words)?;
                        vocab.id(&surface).expect("just added")
                    }
                };
                timed.push(TimedToken { token, chunk, output_time_sec: t_out });
            }
            out.insert(id, CommitLog::from_entries(chunk_len_sec, timed)?);
        }
        for r in references {
            out.entry(r.id.clone()).or_insert_with(|| CommitLog::new(chunk_len_sec));
        }
        Ok(out)
    };
    let hyps = logs(commits)?;
    let refs: Vec<(String, Vec<TokenId>)> = references
        .iter()
        .map(|r| Ok((r.id.clone(), vocab.encode(r.output_words())?)))
        .collect::<Result<_>>()?;
    let hyp_tokens: Vec<Vec<TokenId>> = refs.iter().map(|(id, _)| hyps[id].tokens()).collect();
    let counts = corpus_wer(refs.iter().zip(&hyp_tokens).map(|((_, r), h)| (r.as_slice(), h.as_slice())));
    let report = mean_output_time(hyps.iter().map(|(k, v)| (k.as_str(), v)))?;
    let delta = match baseline {
        Some(b) => {
            let base = logs(b)?;
            let base_report = mean_output_time(base.iter().map(|(k, v)| (k.as_str(), v)))?;
            Some(latency_delta(&report, &base_report)?)
        }
        None => None,
    };
    Ok(EvalSummary {
        wer: counts.rate(),
        substitutions: counts.substitutions,
        deletions: counts.deletions,
        insertions: counts.insertions,
        mean_t_out: report.mean_output_time,
        delta_vs_baseline: delta,
    })
}

/// Decodes every utterance, in parallel, keeping input order.
pub fn run_all(
    handle: &ModelHandle,
    utts: &[Utterance],
    chunk_len_sec: f64,
    strategy: StrategyConfig,
    beam: &BeamConfig,
    mode: DecodeMode,
) -> Vec<Result<(CommitLog, SessionStats)>> {
    utts.par_iter().map(|u| handle.run(u, chunk_len_sec, strategy, beam, mode)).collect()
}

#[derive(Debug, Clone)]
pub struct SweepSpec {
    /// Tagged models; the first is the latency baseline.
    pub models: Vec<(String, ModelHandle)>,
    pub strategies: Vec<StrategyConfig>,
    pub chunk_lens: Vec<f64>,
    pub beam: BeamConfig,
    pub mode: DecodeMode,
}

impl SweepSpec {
    /// hold-n for n ∈ {0,2,4,6,8,10}, wait-1 at 2, 4, 6 and 8 tokens/s,
    /// local agreement and offline.
    pub fn default_strategies() -> Vec<StrategyConfig> {
        let mut s: Vec<StrategyConfig> = [0, 2, 4, 6, 8, 10].into_iter().map(|n| StrategyConfig::HoldN { n }).collect();
        s.extend([2.0, 4.0, 6.0, 8.0].into_iter().map(|rate| StrategyConfig::WaitK { k: 1, rate }));
        s.push(StrategyConfig::LocalAgreement);
        s.push(StrategyConfig::Offline);
        s
    }

    pub fn validate(&self) -> Result<()> {
        if self.models.is_empty() || self.strategies.is_empty() || self.chunk_lens.is_empty() {
            return Err(config("a sweep needs at least one model, strategy and chunk length"));
        }
        for s in &self.strategies {
            s.validate()?;
        }
        self.beam.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RowMetrics {
    pub wer: WerBreakdown,
    pub mean_t_out: f64,
    pub delta_latency: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TradeoffRow {
    pub model: String,
    pub strategy: StrategyConfig,
    pub chunk_len_sec: f64,
    /// Error message when a session failed.
    pub outcome: std::result::Result<RowMetrics, String>,
}

impl TradeoffRow {
    pub fn params(&self, with_chunk: bool) -> String {
        let p = self.strategy.params();
        if !with_chunk {
            p
        } else if p.is_empty() {
            format!("chunk={}", self.chunk_len_sec)
        } else {
            format!("{p};chunk={}", self.chunk_len_sec)
        }
    }
}

/// Runs every (model, strategy, chunk length) combination over `utts`.
/// Rows come back sorted by latency difference to the first model's hold-0
/// row at the same chunk length; failed rows go last.
pub fn sweep(spec: &SweepSpec, utts: &[Utterance]) -> Result<Vec<TradeoffRow>> {
    spec.validate()?;
    if utts.is_empty() {
        return Err(config("the evaluation set is empty"));
    }
    let hold0 = StrategyConfig::HoldN { n: 0 };
    let mut strategies = spec.strategies.clone();
    if !strategies.contains(&hold0) {
        strategies.insert(0, hold0);
    }
    let mut jobs = Vec::new();
    for &chunk in &spec.chunk_lens {
        for (mi, _) in spec.models.iter().enumerate() {
            for &s in &strategies {
                jobs.push((mi, s, chunk));
            }
        }
    }
    let results: Vec<std::result::Result<(WerBreakdown, BTreeMap<String, CommitLog>), String>> = jobs
        .par_iter()
        .map(|&(mi, strategy, chunk)| {
            let handle = &spec.models[mi].1;
            let runs: Vec<Result<(CommitLog, SessionStats)>> =
                utts.par_iter().map(|u| handle.run(u, chunk, strategy, &spec.beam, spec.mode)).collect();
            let mut logs = BTreeMap::new();
            let mut counts = WerBreakdown::default();
            for (u, r) in utts.iter().zip(runs) {
                let (log, _) = r.map_err(|e| format!("{}: {e}", u.id))?;
                let reference = u.target.as_ref().unwrap_or(&u.reference);
                counts = counts + crate::metrics::wer(reference, &log.tokens());
                logs.insert(u.id.clone(), log);
            }
            Ok((counts, logs))
        })
        .collect();

    let mut rows = Vec::with_capacity(jobs.len());
    for (&chunk_len, group) in spec.chunk_lens.iter().zip(jobs.chunks(spec.models.len() * strategies.len())) {
        let offset = rows.len();
        let base_idx = offset + strategies.iter().position(|s| *s == hold0).expect("hold-0 present");
        let base = match &results[base_idx] {
            Ok((_, logs)) => Some(mean_output_time(logs.iter().map(|(k, v)| (k.as_str(), v)))),
            Err(_) => None,
        };
        for (j, &(mi, strategy, _)) in group.iter().enumerate() {
            let outcome = match &results[offset + j] {
                Err(e) => Err(e.clone()),
                Ok((counts, logs)) => (|| -> Result<RowMetrics> {
                    let report = mean_output_time(logs.iter().map(|(k, v)| (k.as_str(), v)))?;
                    let base = match &base {
                        Some(Ok(b)) => b,
                        Some(Err(e)) => return Err(Error::UndefinedMetric(format!("baseline: {e}"))),
                        None => return Err(Error::UndefinedMetric("baseline row failed".into())),
                    };
                    Ok(RowMetrics { wer: *counts, mean_t_out: report.mean_output_time, delta_latency: latency_delta(&report, base)? })
                })()
                .map_err(|e| e.to_string()),
            };
            rows.push(TradeoffRow { model: spec.models[mi].0.clone(), strategy, chunk_len_sec: chunk_len, outcome });
        }
    }
    rows.sort_by(|a, b| {
        let key = |r: &TradeoffRow| r.outcome.as_ref().map(|m| m.delta_latency).ok();
        match (key(a), key(b)) {
            (Some(x), Some(y)) => x.total_cmp(&y),
            (Some(_), None) => std::cmp::Ordering::Less,
            (None, Some(_)) => std::cmp::Ordering::Greater,
            (None, None) => std::cmp::Ordering::Equal,
        }
        .then_with(|| a.chunk_len_sec.total_cmp(&b.chunk_len_sec))
        .then_with(|| a.model.cmp(&b.model))
        .then_with(|| a.strategy.to_string().cmp(&b.strategy.to_string()))
    });
    Ok(rows)
}

pub const SWEEP_HEADER: &str = "model,strategy,params,wer,mean_t_out,delta_latency";

/// CSV rendering of sweep rows. Failed rows carry `failed` in every metric
/// column.
pub fn sweep_csv(rows: &[TradeoffRow]) -> String {
    let multi_chunk = rows.windows(2).any(|w| w[0].chunk_len_sec != w[1].chunk_len_sec);
    let mut out = String::from(SWEEP_HEADER);
    out.push('\n');
    for r in rows {
        let metrics = match &r.outcome {
            Ok(m) => format!("{},{:.6},{:.6}", fmt_rate(m.wer.rate()), m.mean_t_out, m.delta_latency),
            Err(_) => "failed,failed,failed".to_string(),
        };
        out.push_str(&format!("{},{},{},{}\n", r.model, r.strategy.tag(), r.params(multi_chunk), metrics));
    }
    out
}

fn fmt_rate(x: f64) -> String {
    if x.is_infinite() {
        "inf".to_string()
    } else {
        format!("{x:.6}")
    }
}

/// Work done by one decode mode over a set of utterances.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct ModeTotals {
    pub encoded_positions: usize,
    pub forced_steps: usize,
    pub rebased_positions: usize,
    pub chunks: usize,
    pub total_sec: f64,
    pub mean_chunk_sec: f64,
}

impl ModeTotals {
    fn add(&mut self, s: &SessionStats) {
        self.encoded_positions += s.encoded_positions;
        self.forced_steps += s.forced_steps;
        self.rebased_positions += s.rebased_positions;
        self.chunks += s.chunk_times.len();
        self.total_sec += s.chunk_times.iter().map(Duration::as_secs_f64).sum::<f64>();
        self.mean_chunk_sec = if self.chunks == 0 { 0.0 } else { self.total_sec / self.chunks as f64 };
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Divergence {
    pub utterance: String,
    /// Chunk of the first differing commit, if both sessions completed.
    pub chunk: Option<usize>,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ModeReport {
    pub utterances: usize,
    pub identical: usize,
    pub first_divergence: Option<Divergence>,
    pub forced: ModeTotals,
    pub buffered: ModeTotals,
    /// Forced re-decoding with the same weights and a bidirectional encoder.
    pub bidirectional_forced: Option<ModeTotals>,
}

impl ModeReport {
    pub fn all_identical(&self) -> bool {
        self.first_divergence.is_none()
    }
}

/// Decodes every utterance in both modes and compares the commit logs.
/// Runs sequentially so the timings are comparable.
pub fn compare_modes(
    handle: &ModelHandle,
    utts: &[Utterance],
    chunk_len_sec: f64,
    strategy: StrategyConfig,
    beam: &BeamConfig,
) -> Result<ModeReport> {
    if handle.encoder_kind() != EncoderKind::Unidirectional {
        return Err(Error::Unsupported("mode comparison needs a unidirectional encoder".into()));
    }
    let bidirectional = match handle {
        ModelHandle::Transformer(m) => Some(ModelHandle::Transformer(Arc::new(m.with_encoder(EncoderKind::Bidirectional)))),
        ModelHandle::Synthetic { .. } => None,
    };
    let mut report = ModeReport {
        utterances: utts.len(),
        identical: 0,
        first_divergence: None,
        forced: ModeTotals::default(),
        buffered: ModeTotals::default(),
        bidirectional_forced: bidirectional.as_ref().map(|_| ModeTotals::default()),
    };
    for u in utts {
        let forced = handle.run(u, chunk_len_sec, strategy, beam, DecodeMode::ForcedRedecode);
        let buffered = handle.run(u, chunk_len_sec, strategy, beam, DecodeMode::BufferedState);
        let divergence = match (&forced, &buffered) {
            (Ok((a, sa)), Ok((b, sb))) => {
                report.forced.add(sa);
                report.buffered.add(sb);
                first_difference(a, b).map(|(chunk, detail)| Divergence { utterance: u.id.clone(), chunk: Some(chunk), detail })
            }
            (Err(e), Ok(_)) | (Ok(_), Err(e)) => {
                Some(Divergence { utterance: u.id.clone(), chunk: None, detail: format!("one mode failed: {e}") })
            }
            (Err(a), Err(b)) => Some(Divergence { utterance: u.id.clone(), chunk: None, detail: format!("both modes failed: {a}; {b}") }),
        };
        match divergence {
            None => report.identical += 1,
            Some(d) => {
                report.first_divergence.get_or_insert(d);
            }
        }
        if let (Some(h), Some(t)) = (&bidirectional, report.bidirectional_forced.as_mut()) {
            let (_, s) = h.run(u, chunk_len_sec, strategy, beam, DecodeMode::ForcedRedecode)?;
            t.add(&s);
        }
    }
    Ok(report)
}

fn first_difference(a: &CommitLog, b: &CommitLog) -> Option<(usize, String)> {
    let (ea, eb) = (a.entries(), b.entries());
    for i in 0..ea.len().max(eb.len()) {
        match (ea.get(i), eb.get(i)) {
            (Some(x), Some(y)) if x == y => continue,
            (Some(x), Some(y)) => {
                return Some((x.chunk.min(y.chunk), format!("token {i}: {} at chunk {} vs {} at chunk {}", x.token, x.chunk, y.token, y.chunk)))
            }
            (Some(x), None) => return Some((x.chunk, format!("token {i} only in forced mode"))),
            (None, Some(y)) => return Some((y.chunk, format!("token {i} only in buffered mode"))),
            (None, None) => unreachable!(),
        }
    }
    None
}

/// Parses `key = value` lines into `--key value` arguments. Blank lines and
/// lines starting with `#` are ignored; `true` values become bare flags.
pub fn config_args(text: &str) -> Result<Vec<String>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| config(format!("config line {}: expected `key = value`", n + 1)))?;
        let key = key.trim().replace('_', "-");
        let value = value.trim();
        if key.is_empty() {
            return Err(config(format!("config line {}: empty key", n + 1)));
        }
        match value {
            "true" => out.push(format!("--{key}")),
            "false" => {}
            _ => {
                out.push(format!("--{key}"));
                out.push(value.to_string());
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::training::{gen_dataset, SyntheticTaskSpec};

    fn corpus(n: usize) -> (ModelHandle, Vec<Utterance>) {
        let spec = SyntheticTaskSpec::default();
        let utts = gen_dataset(&spec, n, 5).unwrap();
        let handle = ModelHandle::Synthetic { cfg: SyntheticConfig::for_period(0.05, 0), vocab: spec.vocab() };
        (handle, utts)
    }

    #[test]
    fn records_roundtrip() {
        let (h, utts) = corpus(3);
        let recs: Vec<UtteranceRecord> = utts.iter().map(|u| UtteranceRecord::from_utterance(u, h.vocab()).unwrap()).collect();
        let mut buf = Vec::new();
        write_jsonl(&mut buf, &recs).unwrap();
        let back: Vec<UtteranceRecord> = read_jsonl(buf.as_slice()).unwrap();
        assert_eq!(back, recs);
        let line = String::from_utf8(buf).unwrap();
        assert!(line.starts_with("{\"id\":\"utt00000\""));
        assert!(line.contains("\"ref\":[") && line.contains("\"align\":["));
        let u = back[0].to_utterance(h.vocab()).unwrap();
        assert_eq!(u, utts[0]);
    }

    #[test]
    fn config_lines_become_flags() {
        let args = config_args("# comment\nbeam = 4\n\nchunk_sec=0.5\nrealtime = true\nverbose = false\n").unwrap();
        assert_eq!(args, ["--beam", "4", "--chunk-sec", "0.5", "--realtime"]);
        assert!(config_args("oops").is_err());
    }

    #[test]
    fn sweep_is_sorted_and_deterministic() {
        let (h, utts) = corpus(30);
        let spec = SweepSpec {
            models: vec![("synthetic".into(), h)],
            strategies: SweepSpec::default_strategies(),
            chunk_lens: vec![0.5],
            beam: BeamConfig::default(),
            mode: DecodeMode::BufferedState,
        };
        let rows = sweep(&spec, &utts).unwrap();
        let csv = sweep_csv(&rows);
        assert_eq!(csv, sweep_csv(&sweep(&spec, &utts).unwrap()));
        assert!(csv.starts_with("model,strategy,params,wer,mean_t_out,delta_latency\nsynthetic,hold-n,n=0,"));
        let metrics: Vec<RowMetrics> = rows.iter().map(|r| r.outcome.clone().unwrap()).collect();
        assert!(metrics.windows(2).all(|w| w[0].delta_latency <= w[1].delta_latency));
        assert_eq!(metrics[0].delta_latency, 0.0);
        let offline = rows.iter().find(|r| r.strategy == StrategyConfig::Offline).unwrap();
        assert_eq!(offline.outcome.as_ref().unwrap().wer.errors(), 0);
        assert_eq!(rows.last().unwrap().strategy, StrategyConfig::Offline);
    }

    #[test]
    fn failed_rows_are_marked() {
        let (h, mut utts) = corpus(4);
        utts[2].alignment = None;
        let spec = SweepSpec {
            models: vec![("synthetic".into(), h)],
            strategies: vec![StrategyConfig::Offline],
            chunk_lens: vec![0.5],
            beam: BeamConfig::default(),
            mode: DecodeMode::ForcedRedecode,
        };
        let rows = sweep(&spec, &utts).unwrap();
        assert_eq!(rows.len(), 2);
        assert!(rows.iter().all(|r| r.outcome.is_err()));
        assert!(sweep_csv(&rows).contains("synthetic,offline,,failed,failed,failed"));
    }

    #[test]
    fn modes_compare_equal() {
        let (h, utts) = corpus(20);
        let report = compare_modes(&h, &utts, 0.5, StrategyConfig::LocalAgreement, &BeamConfig::default()).unwrap();
        assert!(report.all_identical(), "{:?}", report.first_divergence);
        let frames: usize = utts.iter().map(|u| u.frames.len()).sum();
        assert_eq!(report.buffered.encoded_positions, frames);
        assert_eq!(report.forced.encoded_positions, frames);
    }

    #[test]
    fn evaluate_scores_commits() {
        let (h, utts) = corpus(5);
        let recs: Vec<UtteranceRecord> = utts.iter().map(|u| UtteranceRecord::from_utterance(u, h.vocab()).unwrap()).collect();
        let mut commits = Vec::new();
        let mut hold = Vec::new();
        for u in &utts {
            let (log, _) = h.run(u, 0.5, StrategyConfig::Offline, &BeamConfig::default(), DecodeMode::ForcedRedecode).unwrap();
            commits.extend(commit_records(&u.id, &log, h.vocab()).unwrap());
            let (log, _) = h.run(u, 0.5, StrategyConfig::HoldN { n: 0 }, &BeamConfig::default(), DecodeMode::ForcedRedecode).unwrap();
            hold.extend(commit_records(&u.id, &log, h.vocab()).unwrap());
        }
        let s = evaluate(&recs, &commits, Some(&hold), 0.5).unwrap();
        assert_eq!(s.wer, 0.0);
        assert!(s.delta_vs_baseline.unwrap() > 0.0);
        let json = serde_json::to_string(&s).unwrap();
        assert!(json.starts_with("{\"WER\":0.0,\"S\":0,\"D\":0,\"I\":0,\"mean_t_out\":"));
    }
}
