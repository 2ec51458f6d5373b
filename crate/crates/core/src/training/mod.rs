//! Synthetic data, gradient training and adaptation to partial inputs.

pub mod graph;
mod task;

pub use graph::{loss_and_grad, mean_loss, Example};
pub use task::{gen_dataset, make_partial_pair, SyntheticTaskSpec};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::decoder::{beam_search, BeamConfig};
use crate::error::{config, Error, Result};
use crate::metrics::{wer, WerBreakdown};
use crate::model::{SequenceModel, TinyTransformer};
use crate::stream::{TokenId, Utterance};
use crate::tensor::Matrix;

/// Learning-rate shape after warmup.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LrDecay {
    #[default]
    Constant,
    /// Proportional to `1/sqrt(step)` once warmup is over.
    InverseSqrt,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Peak learning rate, reached at the end of warmup.
    pub lr: f64,
    pub warmup: usize,
    #[serde(default)]
    pub decay: LrDecay,
    pub label_smoothing: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub seed: u64,
    /// Global gradient-norm clip; zero disables clipping.
    pub clip_norm: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 3e-4,
            warmup: 400,
            decay: LrDecay::Constant,
            label_smoothing: 0.1, batch_size: 32, steps: 2000, seed: 0, clip_norm: 1.0 }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(config("learning rate must be positive"));
        }
        if self.batch_size == 0 || self.steps == 0 {
            return Err(config("batch size and step count must be positive"));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(config("label smoothing must lie in [0, 1)"));
        }
        if !(self.clip_norm >= 0.0) {
            return Err(config("clip norm must be non-negative"));
        }
        Ok(())
    }

    /// Linear warmup to `lr`, then the configured decay.
    pub fn lr_at(&self, step: usize) -> f64 {
        let t = (step + 1) as f64;
        let w = self.warmup.max(1) as f64;
        let shape = match self.decay {
            _ if t < w => t / w,
            LrDecay::Constant => 1.0,
            LrDecay::InverseSqrt => (w / t).sqrt(),
        };
        self.lr * shape
    }

    /// Rate in effect at the last training step.
    pub fn final_lr(&self) -> f64 {
        self.lr_at(self.steps.saturating_sub(1))
    }
}

/// Fraction of each utterance kept in its partial pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PartialSliceSpec {
    pub p_min: f64,
    pub p_max: f64,
}

impl Default for PartialSliceSpec {
    fn default() -> Self {
        Self { p_min: 0.1, p_max: 0.4 }
    }
}

impl PartialSliceSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.p_min > 0.0 && self.p_min <= self.p_max && self.p_max <= 1.0) {
            return Err(config("partial ratios must satisfy 0 < p_min <= p_max <= 1"));
        }
        Ok(())
    }

    pub fn sample(&self, rng: &mut impl Rng) -> f64 {
        if self.p_min == self.p_max {
            self.p_min
        } else {
            rng.gen_range(self.p_min..=self.p_max)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptConfig {
    /// Settings of the original training run; its rate is scaled down.
    pub base: TrainConfig,
    pub lr_scale: f64,
    pub steps: usize,
    pub warmup: usize,
    pub slice: PartialSliceSpec,
    /// Dev-set evaluation interval in steps.
    pub eval_every: usize,
    pub dev_beam: BeamConfig,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        Self {
            base: TrainConfig::default(),
            lr_scale: 0.25,
            steps: 300,
            warmup: 0,
            slice: PartialSliceSpec::default(),
            eval_every: 50,
            dev_beam: BeamConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossPoint {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: TinyTransformer,
    pub curve: Vec<LossPoint>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub step: usize,
    pub dev: WerBreakdown,
}

#[derive(Debug, Clone)]
pub struct AdaptOutcome {
    pub model: TinyTransformer,
    pub curve: Vec<LossPoint>,
    /// Every partial ratio drawn, in draw order.
    pub p_draws: Vec<f64>,
    pub dev_before: WerBreakdown,
    pub checkpoints: Vec<Checkpoint>,
    pub selected_step: usize,
}

/// Adam with bias correction.
pub struct Adam {
    m: Vec<Matrix>,
    v: Vec<Matrix>,
    t: i32,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

impl Adam {
    pub fn new(params: &[Matrix]) -> Self {
        let zeros = || params.iter().map(|p| Matrix::zeros(p.rows, p.cols)).collect();
        Self { m: zeros(), v: zeros(), t: 0, beta1: 0.9, beta2: 0.98, eps: 1e-9 }
    }

    pub fn step(&mut self, params: &mut [Matrix], grads: &[Matrix], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            for i in 0..p.data.len() {
                let gi = g.data[i];
                m.data[i] = self.beta1 * m.data[i] + (1.0 - self.beta1) * gi;
                v.data[i] = self.beta2 * v.data[i] + (1.0 - self.beta2) * gi * gi;
                let mh = m.data[i] / c1;
                let vh = v.data[i] / c2;
                p.data[i] -= lr * mh / (vh.sqrt() + self.eps);
            }
        }
    }
}

fn clip(grads: &mut [Matrix], max_norm: f64) {
    if max_norm <= 0.0 {
        return;
    }
    let norm = grads.iter().flat_map(|g| g.data.iter()).map(|x| x * x).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        grads.iter_mut().flat_map(|g| g.data.iter_mut()).for_each(|x| *x *= s);
    }
}

fn output_tokens(utt: &Utterance) -> &[TokenId] {
    utt.target.as_deref().unwrap_or(&utt.reference)
}

pub fn full_example(utt: &Utterance) -> Example {
    Example { frames: utt.frames.clone(), tokens: output_tokens(utt).to_vec() }
}

fn check_data(model: &TinyTransformer, data: &[Utterance]) -> Result<()> {
    if data.is_empty() {
        return Err(config("training data is empty"));
    }
    let dim = model.config().frame_dim;
    let vocab = model.vocab().len();
    for u in data {
        if u.frames.is_empty() || u.frames.iter().any(|f| f.len() != dim) {
            return Err(config(format!("utterance {} has no frames or frames of the wrong size", u.id)));
        }
        if output_tokens(u).iter().any(|&t| t as usize >= vocab || crate::Vocab::is_reserved(t)) {
            return Err(config(format!("utterance {} has tokens outside the model vocabulary", u.id)));
        }
    }
    Ok(())
}

struct Trainer {
    params: Vec<Matrix>,
    adam: Adam,
    curve: Vec<LossPoint>,
}

impl Trainer {
    fn new(model: &TinyTransformer) -> Self {
        let params = model.params().to_vec();
        let adam = Adam::new(&params);
        Self { params, adam, curve: Vec::new() }
    }

    fn update(&mut self, template: &TinyTransformer, batch: &[Example], step: usize, lr: f64, cfg: &TrainConfig) -> Result<()> {
        let current = template.with_params(std::mem::take(&mut self.params));
        let (loss, mut grads) = loss_and_grad(&current, batch, cfg.label_smoothing);
        self.params = current.into_params();
        if !loss.is_finite() || grads.iter().any(|g| g.data.iter().any(|x| !x.is_finite())) {
            return Err(Error::Divergence { step, detail: format!("loss became {loss}") });
        }
        clip(&mut grads, cfg.clip_norm);
        self.adam.step(&mut self.params, &grads, lr);
        if self.params.iter().any(|p| p.data.iter().any(|x| !x.is_finite())) {
            return Err(Error::Divergence { step, detail: "parameters became non-finite".into() });
        }
        self.curve.push(LossPoint { step, loss, lr });
        Ok(())
    }
}

/// Teacher-forced training on full utterances.
pub fn train(model: &TinyTransformer, data: &[Utterance], cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    check_data(model, data)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut cursor = order.len();
    let mut trainer = Trainer::new(model);
    for step in 0..cfg.steps {
        let mut batch = Vec::with_capacity(cfg.batch_size);
        while batch.len() < cfg.batch_size {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(full_example(&data[order[cursor]]));
            cursor += 1;
        }
        trainer.update(model, &batch, step, cfg.lr_at(step), cfg)?;
    }
    Ok(TrainOutcome { model: model.with_params(trainer.params), curve: trainer.curve })
}

/// Offline token errors of `model` over complete utterances.
pub fn offline_errors<M: SequenceModel>(model: &M, data: &[Utterance], beam: &BeamConfig) -> Result<WerBreakdown> {
    let mut total = WerBreakdown::default();
    for u in data {
        let enc = model.encode(&u.frames, None)?;
        let best = beam_search(model, &enc, &[], beam, u.duration_sec())?;
        let hyp = best.into_iter().next().map(|h| h.tokens).unwrap_or_default();
        total = total + wer(output_tokens(u), &hyp);
    }
    Ok(total)
}

/// Continued training on batches that pair every full utterance with a
/// proportional prefix of itself. The returned model is the checkpoint with
/// the lowest full-utterance dev error (the later one on ties).
pub fn adapt(model: &TinyTransformer, data: &[Utterance], dev: &[Utterance], cfg: &AdaptConfig) -> Result<AdaptOutcome> {
    cfg.base.validate()?;
    cfg.slice.validate()?;
    if cfg.steps == 0 || cfg.eval_every == 0 {
        return Err(config("adaptation steps and evaluation interval must be positive"));
    }
    if !(cfg.lr_scale > 0.0) {
        return Err(config("learning-rate scale must be positive"));
    }
    check_data(model, data)?;
    if dev.is_empty() {
        return Err(config("adaptation needs a dev set"));
    }
    let lr = cfg.base.final_lr() * cfg.lr_scale;
    let per_batch = cfg.base.batch_size.div_ceil(2);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.base.seed ^ 0xada9);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut cursor = order.len();
    let mut trainer = Trainer::new(model);
    let mut p_draws = Vec::new();
    let dev_before = offline_errors(model, dev, &cfg.dev_beam)?;
    let mut checkpoints = Vec::new();
    let mut best: Option<(WerBreakdown, usize, Vec<Matrix>)> = None;

    for step in 0..cfg.steps {
        let mut batch = Vec::with_capacity(2 * per_batch);
        for _ in 0..per_batch {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            let utt = &data[order[cursor]];
            cursor += 1;
            let p = cfg.slice.sample(&mut rng);
            p_draws.push(p);
            let (frames, tokens) = make_partial_pair(utt, p)?;
            batch.push(full_example(utt));
            batch.push(Example { frames, tokens });
        }
        let step_lr = if cfg.warmup == 0 { lr } else { lr * ((step + 1) as f64 / cfg.warmup as f64).min(1.0) };
        trainer.update(model, &batch, step, step_lr, &cfg.base)?;

        if (step + 1) % cfg.eval_every == 0 || step + 1 == cfg.steps {
            let current = model.with_params(trainer.params.clone());
            let dev_err = offline_errors(&current, dev, &cfg.dev_beam)?;
            checkpoints.push(Checkpoint { step: step + 1, dev: dev_err });
            let better = best.as_ref().is_none_or(|(b, _, _)| dev_err.rate() <= b.rate());
            if better {
                best = Some((dev_err, step + 1, current.into_params()));
            }
        }
    }
    let (_, selected_step, params) = best.expect("at least one checkpoint");
    Ok(AdaptOutcome {
        model: model.with_params(params),
        curve: trainer.curve,
        p_draws,
        dev_before,
        checkpoints,
        selected_step,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_shapes() {
        let mut cfg = TrainConfig { lr: 1.0, warmup: 4, steps: 16, ..TrainConfig::default() };
        assert_eq!(cfg.lr_at(0), 0.25);
        assert_eq!(cfg.lr_at(3), 1.0);
        assert_eq!(cfg.lr_at(15), 1.0);
        assert_eq!(cfg.final_lr(), 1.0);
        cfg.decay = LrDecay::InverseSqrt;
        assert_eq!(cfg.lr_at(1), 0.5);
        assert_eq!(cfg.lr_at(3), 1.0);
        assert_eq!(cfg.lr_at(15), 0.5);
        assert_eq!(cfg.final_lr(), 0.5);
    }
}
