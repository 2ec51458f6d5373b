//! The transformer forward pass recorded on an autodiff tape.

use crate::autodiff::{Tape, Var};
use crate::model::{AttnIdx, EncoderKind, FfIdx, LnIdx, TinyTransformer};
use crate::stream::{Frame, TokenId, Vocab};
use crate::tensor::{sinusoid, Matrix};

/// One teacher-forced training pair.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub frames: Vec<Frame>,
    pub tokens: Vec<TokenId>,
}

struct Builder<'t, 'p> {
    tape: &'t mut Tape<'p>,
    heads: usize,
}

impl Builder<'_, '_> {
    fn ln(&mut self, x: Var, idx: LnIdx) -> Var {
        let g = self.tape.param(idx.g);
        let b = self.tape.param(idx.b);
        self.tape.layer_norm(x, g, b)
    }

    fn linear(&mut self, x: Var, w: usize, b: usize) -> Var {
        let w = self.tape.param(w);
        let b = self.tape.param(b);
        self.tape.affine(x, w, b)
    }

    fn attention(&mut self, query_in: Var, kv_in: Var, a: AttnIdx, causal: bool) -> Var {
        let q = self.linear(query_in, a.wq, a.bq);
        let k = self.linear(kv_in, a.wk, a.bk);
        let v = self.linear(kv_in, a.wv, a.bv);
        let att = self.tape.attention(q, k, v, self.heads, causal);
        self.linear(att, a.wo, a.bo)
    }

    fn ff(&mut self, x: Var, f: FfIdx) -> Var {
        let h = self.linear(x, f.w1, f.b1);
        let h = self.tape.relu(h);
        self.linear(h, f.w2, f.b2)
    }

    fn positions(&mut self, rows: usize, dim: usize) -> Var {
        let pe: Vec<Vec<f64>> = (0..rows).map(|p| sinusoid(p, dim)).collect();
        self.tape.constant(Matrix::from_rows(&pe, dim))
    }
}

/// Output logits for every decoder position, `(|tokens| + 1) × V`.
pub fn forward<'p>(tape: &mut Tape<'p>, model: &TinyTransformer, frames: &[Frame], tokens: &[TokenId]) -> Var {
    let cfg = *model.config();
    let layout = model.layout();
    let mut b = Builder { tape, heads: cfg.heads };
    let d = cfg.d_model;

    let x = b.tape.constant(Matrix::from_rows(frames, cfg.frame_dim));
    let mut h = b.linear(x, layout.in_w, layout.in_b);
    let pe = b.positions(frames.len(), d);
    h = b.tape.add(h, pe);
    let causal = cfg.encoder == EncoderKind::Unidirectional;
    for layer in &layout.enc {
        let n = b.ln(h, layer.ln1);
        let a = b.attention(n, n, layer.attn, causal);
        h = b.tape.add(h, a);
        let n = b.ln(h, layer.ln2);
        let f = b.ff(n, layer.ff);
        h = b.tape.add(h, f);
    }
    let memory = b.ln(h, layout.enc_ln);

    let ids: Vec<usize> = std::iter::once(Vocab::BOS).chain(tokens.iter().copied()).map(|t| t as usize).collect();
    let emb = b.tape.param(layout.tok_emb);
    let mut y = b.tape.gather(emb, &ids);
    let pe = b.positions(ids.len(), d);
    y = b.tape.add(y, pe);
    for layer in &layout.dec {
        let n = b.ln(y, layer.ln1);
        let a = b.attention(n, n, layer.self_attn, true);
        y = b.tape.add(y, a);
        let n = b.ln(y, layer.ln2);
        let c = b.attention(n, memory, layer.cross, false);
        y = b.tape.add(y, c);
        let n = b.ln(y, layer.ln3);
        let f = b.ff(n, layer.ff);
        y = b.tape.add(y, f);
    }
    let n = b.ln(y, layout.dec_ln);
    b.linear(n, layout.out_w, layout.out_b)
}

/// Classes that take part in the output softmax.
pub fn allowed_classes(vocab_len: usize) -> Vec<bool> {
    (0..vocab_len as TokenId).map(|t| t != Vocab::BOS && t != Vocab::PAD).collect()
}

/// Summed label-smoothed loss of `example` and the number of predicted
/// positions (tokens plus EOS).
pub fn example_loss<'p>(tape: &mut Tape<'p>, model: &TinyTransformer, example: &Example, smoothing: f64) -> (Var, usize) {
    let logits = forward(tape, model, &example.frames, &example.tokens);
    let targets: Vec<usize> =
        example.tokens.iter().copied().chain(std::iter::once(Vocab::EOS)).map(|t| t as usize).collect();
    let allowed = allowed_classes(model.vocab_len());
    let loss = tape.smoothed_nll(logits, &targets, smoothing, &allowed);
    (loss, targets.len())
}

/// Mean per-position loss over `examples` and its gradient.
pub fn loss_and_grad(model: &TinyTransformer, examples: &[Example], smoothing: f64) -> (f64, Vec<Matrix>) {
    let params = model.params();
    let mut grads: Vec<Matrix> = params.iter().map(|p| Matrix::zeros(p.rows, p.cols)).collect();
    let positions: usize = examples.iter().map(|e| e.tokens.len() + 1).sum();
    let scale = 1.0 / positions.max(1) as f64;
    let mut total = 0.0;
    for ex in examples {
        let mut tape = Tape::new(params);
        let (loss, _) = example_loss(&mut tape, model, ex, smoothing);
        total += tape.value(loss).data[0];
        tape.backward(loss, scale, &mut grads);
    }
    (total * scale, grads)
}

/// Mean per-position loss without gradients.
pub fn mean_loss(model: &TinyTransformer, examples: &[Example], smoothing: f64) -> f64 {
    let params = model.params();
    let mut total = 0.0;
    let mut positions = 0;
    for ex in examples {
        let mut tape = Tape::new(params);
        let (loss, n) = example_loss(&mut tape, model, ex, smoothing);
        total += tape.value(loss).data[0];
        positions += n;
    }
    total / positions.max(1) as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{SequenceModel, TransformerConfig};
    use crate::tensor::log_softmax;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn setup(kind: EncoderKind) -> (TinyTransformer, Example) {
        let mut cfg = TransformerConfig::new(5, kind);
        cfg.d_model = 12;
        cfg.ff_dim = 20;
        let m = TinyTransformer::new(cfg, Vocab::synthetic(6), 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let frames = (0..9).map(|_| (0..5).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
        (m, Example { frames, tokens: vec![4, 7, 3, 8] })
    }

    #[test]
    fn graph_matches_incremental_inference() {
        for kind in [EncoderKind::Unidirectional, EncoderKind::Bidirectional] {
            let (m, ex) = setup(kind);
            let mut tape = Tape::new(m.params());
            let logits = forward(&mut tape, &m, &ex.frames, &ex.tokens);
            let logits = tape.value(logits).clone();
            let enc = m.encode(&ex.frames, None).unwrap();
            for pos in 0..=ex.tokens.len() {
                let mut row = logits.row(pos).to_vec();
                row[Vocab::BOS as usize] = f64::NEG_INFINITY;
                row[Vocab::PAD as usize] = f64::NEG_INFINITY;
                let want = log_softmax(&row);
                let got = m.decode_step(&enc, &ex.tokens[..pos]).unwrap();
                for (a, b) in want.iter().zip(&got) {
                    assert!(a == b || (a - b).abs() < 1e-9, "{a} vs {b}");
                }
            }
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let (m, ex) = setup(EncoderKind::Unidirectional);
        let examples = vec![ex];
        let (_, grads) = loss_and_grad(&m, &examples, 0.1);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut params = m.params().to_vec();
        for _ in 0..40 {
            let i = rng.gen_range(0..params.len());
            let j = rng.gen_range(0..params[i].len());
            let h = 1e-5;
            let orig = params[i].data[j];
            params[i].data[j] = orig + h;
            let plus = mean_loss(&m.with_params(params.clone()), &examples, 0.1);
            params[i].data[j] = orig - h;
            let minus = mean_loss(&m.with_params(params.clone()), &examples, 0.1);
            params[i].data[j] = orig;
            let fd = (plus - minus) / (2.0 * h);
            let g = grads[i].data[j];
            assert!((fd - g).abs() / fd.abs().max(g.abs()).max(1e-6) < 1e-4, "param {i}[{j}]: {fd} vs {g}");
        }
    }
}
