//! A small pre-norm Transformer encoder-decoder.
//!
//! Inference here is row-incremental: the unidirectional encoder appends new
//! positions without touching old ones, and the decoder keeps per-layer
//! self-attention keys and values along a hypothesis path. Training builds
//! the same network on an autodiff tape (see `training::graph`).

use std::io::{Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::normalize_row;
use crate::error::{contract, Error, Result};
use crate::model::synthetic::fnv;
use crate::model::{check_token, DecoderState, EncoderKind, EncoderStates, SequenceModel};
use crate::stream::{Frame, TokenId, Vocab};
use crate::tensor::{dot, log_softmax, sinusoid, softmax_in_place, vec_affine, Matrix};

const MAGIC: &[u8; 4] = b"CSTM";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TransformerConfig {
    pub frame_dim: usize,
    pub d_model: usize,
    pub heads: usize,
    pub ff_dim: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub encoder: EncoderKind,
}

impl TransformerConfig {
    pub fn new(frame_dim: usize, encoder: EncoderKind) -> Self {
        Self { frame_dim, d_model: 64, heads: 2, ff_dim: 128, enc_layers: 2, dec_layers: 2, encoder }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.heads == 0 || self.d_model % self.heads != 0 {
            return Err(crate::error::config("d_model must be a positive multiple of heads"));
        }
        if self.frame_dim == 0 || self.ff_dim == 0 || self.enc_layers == 0 || self.dec_layers == 0 {
            return Err(crate::error::config("frame_dim, ff_dim and layer counts must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct LnIdx {
    pub g: usize,
    pub b: usize,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct AttnIdx {
    pub wq: usize,
    pub bq: usize,
    pub wk: usize,
    pub bk: usize,
    pub wv: usize,
    pub bv: usize,
    pub wo: usize,
    pub bo: usize,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct FfIdx {
    pub w1: usize,
    pub b1: usize,
    pub w2: usize,
    pub b2: usize,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct EncLayer {
    pub ln1: LnIdx,
    pub attn: AttnIdx,
    pub ln2: LnIdx,
    pub ff: FfIdx,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct DecLayer {
    pub ln1: LnIdx,
    pub self_attn: AttnIdx,
    pub ln2: LnIdx,
    pub cross: AttnIdx,
    pub ln3: LnIdx,
    pub ff: FfIdx,
}

/// Index of every parameter tensor in the flat parameter list.
#[derive(Debug, Clone)]
pub(crate) struct Layout {
    pub in_w: usize,
    pub in_b: usize,
    pub tok_emb: usize,
    pub enc: Vec<EncLayer>,
    pub enc_ln: LnIdx,
    pub dec: Vec<DecLayer>,
    pub dec_ln: LnIdx,
    pub out_w: usize,
    pub out_b: usize,
    pub shapes: Vec<(usize, usize, Init)>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) enum Init {
    Weight,
    Embedding,
    Zero,
    One,
}

impl Layout {
    pub fn new(cfg: &TransformerConfig, vocab_size: usize) -> Self {
        let d = cfg.d_model;
        let mut shapes = Vec::new();
        let mut add = |r: usize, c: usize, init: Init| {
            shapes.push((r, c, init));
            shapes.len() - 1
        };
        let in_w = add(cfg.frame_dim, d, Init::Weight);
        let in_b = add(1, d, Init::Zero);
        let tok_emb = add(vocab_size, d, Init::Embedding);
        let ln = |add: &mut dyn FnMut(usize, usize, Init) -> usize| LnIdx {
            g: add(1, d, Init::One),
            b: add(1, d, Init::Zero),
        };
        let attn = |add: &mut dyn FnMut(usize, usize, Init) -> usize| AttnIdx {
            wq: add(d, d, Init::Weight),
            bq: add(1, d, Init::Zero),
            wk: add(d, d, Init::Weight),
            bk: add(1, d, Init::Zero),
            wv: add(d, d, Init::Weight),
            bv: add(1, d, Init::Zero),
            wo: add(d, d, Init::Weight),
            bo: add(1, d, Init::Zero),
        };
        let ff = |add: &mut dyn FnMut(usize, usize, Init) -> usize| FfIdx {
            w1: add(d, cfg.ff_dim, Init::Weight),
            b1: add(1, cfg.ff_dim, Init::Zero),
            w2: add(cfg.ff_dim, d, Init::Weight),
            b2: add(1, d, Init::Zero),
        };
        let enc = (0..cfg.enc_layers)
            .map(|_| EncLayer { ln1: ln(&mut add), attn: attn(&mut add), ln2: ln(&mut add), ff: ff(&mut add) })
            .collect();
        let enc_ln = ln(&mut add);
        let dec = (0..cfg.dec_layers)
            .map(|_| DecLayer {
                ln1: ln(&mut add),
                self_attn: attn(&mut add),
                ln2: ln(&mut add),
                cross: attn(&mut add),
                ln3: ln(&mut add),
                ff: ff(&mut add),
            })
            .collect();
        let dec_ln = ln(&mut add);
        let out_w = add(d, vocab_size, Init::Weight);
        let out_b = add(1, vocab_size, Init::Zero);
        Self { in_w, in_b, tok_emb, enc, enc_ln, dec, dec_ln, out_w, out_b, shapes }
    }
}

#[derive(Debug, Clone)]
pub struct TinyTransformer {
    cfg: TransformerConfig,
    vocab: Vocab,
    params: Vec<Matrix>,
    layout: Layout,
    owner: u64,
}

/// Attention weights captured for inspection.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionDump {
    /// `[layer][head]`, each `T_enc × T_enc`.
    pub encoder_self: Vec<Vec<Matrix>>,
    /// `[layer][head]`, each `(prefix + 1) × (prefix + 1)`.
    pub decoder_self: Vec<Vec<Matrix>>,
    /// `[layer][head]`, each `(prefix + 1) × T_enc`.
    pub decoder_cross: Vec<Vec<Matrix>>,
}

impl AttentionDump {
    /// Comma-separated grids, one block per matrix, introduced by a `#` line.
    pub fn to_grid_text(&self) -> String {
        let mut out = String::new();
        for (kind, set) in [("encoder_self", &self.encoder_self), ("decoder_self", &self.decoder_self), ("decoder_cross", &self.decoder_cross)] {
            for (l, heads) in set.iter().enumerate() {
                for (h, m) in heads.iter().enumerate() {
                    out.push_str(&format!("# {kind} layer={l} head={h} rows={} cols={}\n", m.rows, m.cols));
                    for r in 0..m.rows {
                        let line: Vec<String> = m.row(r).iter().map(|v| format!("{v:.6}")).collect();
                        out.push_str(&line.join(","));
                        out.push('\n');
                    }
                }
            }
        }
        out
    }
}

pub struct TransformerContext {
    cross: Vec<(Matrix, Matrix)>,
}

#[derive(Debug, Clone)]
pub struct TransformerState {
    tokens: Vec<TokenId>,
    self_k: Vec<Matrix>,
    self_v: Vec<Matrix>,
    /// Residual stream after the first layer's self-attention; depends on
    /// tokens only.
    layer0_resid: Matrix,
    dists: Vec<Vec<f64>>,
}

impl DecoderState for TransformerState {
    fn tokens(&self) -> &[TokenId] {
        &self.tokens
    }

    fn log_probs_at(&self, pos: usize) -> &[f64] {
        &self.dists[pos]
    }

    fn truncate(&mut self, len: usize) {
        self.tokens.truncate(len);
        for m in self.self_k.iter_mut().chain(self.self_v.iter_mut()) {
            m.truncate_rows(len + 1);
        }
        self.layer0_resid.truncate_rows(len + 1);
        self.dists.truncate(len + 1);
    }
}

#[derive(Default)]
struct DecoderCapture {
    /// `[layer][pos * heads + head]`.
    self_w: Vec<Vec<Vec<f64>>>,
    cross_w: Vec<Vec<Vec<f64>>>,
}

impl TinyTransformer {
    pub fn new(cfg: TransformerConfig, vocab: Vocab, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let layout = Layout::new(&cfg, vocab.len());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = layout
            .shapes
            .iter()
            .map(|&(r, c, init)| match init {
                Init::Zero => Matrix::zeros(r, c),
                Init::One => Matrix::from_vec(r, c, vec![1.0; r * c]),
                Init::Weight | Init::Embedding => {
                    let std = if init == Init::Weight { (1.0 / r as f64).sqrt() } else { 1.0 };
                    let normal = Normal::new(0.0, std).expect("finite std");
                    Matrix::from_vec(r, c, (0..r * c).map(|_| normal.sample(&mut rng)).collect())
                }
            })
            .collect();
        Self::from_parts(cfg, vocab, params)
    }

    pub(crate) fn from_parts(cfg: TransformerConfig, vocab: Vocab, params: Vec<Matrix>) -> Result<Self> {
        cfg.validate()?;
        let layout = Layout::new(&cfg, vocab.len());
        if params.len() != layout.shapes.len()
            || params.iter().zip(&layout.shapes).any(|(p, &(r, c, _))| p.rows != r || p.cols != c)
        {
            return Err(Error::Format("parameter shapes do not match the configuration".into()));
        }
        if params.iter().any(|p| p.data.iter().any(|v| !v.is_finite())) {
            return Err(Error::Model("non-finite parameter".into()));
        }
        let owner = fnv(
            [cfg.frame_dim, cfg.d_model, cfg.heads, cfg.ff_dim, cfg.enc_layers, cfg.dec_layers, cfg.encoder as usize]
                .into_iter()
                .map(|v| v as u64)
                .chain(params.iter().flat_map(|p| p.data.iter().map(|v| v.to_bits()))),
        );
        Ok(Self { cfg, vocab, params, layout, owner })
    }

    pub fn config(&self) -> &TransformerConfig {
        &self.cfg
    }

    pub fn params(&self) -> &[Matrix] {
        &self.params
    }

    pub(crate) fn layout(&self) -> &Layout {
        &self.layout
    }

    /// Same architecture and vocabulary with new parameter values.
    pub(crate) fn with_params(&self, params: Vec<Matrix>) -> Self {
        Self::from_parts(self.cfg, self.vocab.clone(), params).expect("parameters match the layout")
    }

    /// Same architecture and vocabulary with new parameter values, checked
    /// against the expected shapes.
    pub fn with_parameters(&self, params: Vec<Matrix>) -> Result<Self> {
        Self::from_parts(self.cfg, self.vocab.clone(), params)
    }

    pub(crate) fn into_params(self) -> Vec<Matrix> {
        self.params
    }

    pub(crate) fn vocab_len(&self) -> usize {
        self.vocab.len()
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(Matrix::len).sum()
    }

    /// Same weights, different encoder mask.
    pub fn with_encoder(&self, encoder: EncoderKind) -> Self {
        let cfg = TransformerConfig { encoder, ..self.cfg };
        Self::from_parts(cfg, self.vocab.clone(), self.params.clone()).expect("shapes unchanged")
    }

    fn p(&self, i: usize) -> &Matrix {
        &self.params[i]
    }

    fn ln(&self, x: &[f64], idx: LnIdx) -> Vec<f64> {
        let (h, _) = normalize_row(x);
        h.iter()
            .zip(&self.p(idx.g).data)
            .zip(&self.p(idx.b).data)
            .map(|((v, g), b)| v * g + b)
            .collect()
    }

    fn ln_rows(&self, x: &Matrix, idx: LnIdx) -> Matrix {
        let mut out = Matrix::zeros(x.rows, x.cols);
        for r in 0..x.rows {
            out.row_mut(r).copy_from_slice(&self.ln(x.row(r), idx));
        }
        out
    }

    fn ff_row(&self, h: &[f64], idx: FfIdx) -> Vec<f64> {
        let mut hidden = vec_affine(h, self.p(idx.w1), &self.p(idx.b1).data);
        hidden.iter_mut().for_each(|v| *v = v.max(0.0));
        vec_affine(&hidden, self.p(idx.w2), &self.p(idx.b2).data)
    }

    /// Attention of one query row over the first `upto` key/value rows.
    fn attend_row(&self, q: &[f64], k: &Matrix, v: &Matrix, upto: usize, mut capture: Option<&mut Vec<Vec<f64>>>) -> Vec<f64> {
        let d = self.cfg.d_model;
        let heads = self.cfg.heads;
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut out = vec![0.0; d];
        for h in 0..heads {
            let span = h * dh..(h + 1) * dh;
            if upto == 0 {
                if let Some(c) = capture.as_deref_mut() {
                    c.push(Vec::new());
                }
                continue;
            }
            let mut w: Vec<f64> = (0..upto).map(|j| dot(&q[span.clone()], &k.row(j)[span.clone()]) * scale).collect();
            softmax_in_place(&mut w);
            for (j, &wj) in w.iter().enumerate() {
                for (o, &vv) in out[span.clone()].iter_mut().zip(&v.row(j)[span.clone()]) {
                    *o += wj * vv;
                }
            }
            if let Some(c) = capture.as_deref_mut() {
                c.push(w);
            }
        }
        out
    }

    fn encode_rows(&self, frames: &[Frame], mut states: EncoderStates) -> EncoderStates {
        let d = self.cfg.d_model;
        let start = states.frames;
        let causal = self.cfg.encoder == EncoderKind::Unidirectional;
        let new = &frames[start..];
        if new.is_empty() {
            return states;
        }
        let input = Matrix::from_rows(new, self.cfg.frame_dim);
        let mut x = input.affine(self.p(self.layout.in_w), &self.p(self.layout.in_b).data);
        for r in 0..x.rows {
            for (v, pe) in x.row_mut(r).iter_mut().zip(sinusoid(start + r, d)) {
                *v += pe;
            }
        }
        if states.layer_inputs.is_empty() {
            states.layer_inputs = vec![Matrix::zeros(0, d); self.cfg.enc_layers];
            states.layer_kv = vec![(Matrix::zeros(0, d), Matrix::zeros(0, d)); self.cfg.enc_layers];
        }
        for (l, layer) in self.layout.enc.iter().enumerate() {
            for r in 0..x.rows {
                states.layer_inputs[l].push_row(x.row(r));
            }
            let h = self.ln_rows(&x, layer.ln1);
            let a = layer.attn;
            let q = h.affine(self.p(a.wq), &self.p(a.bq).data);
            let k = h.affine(self.p(a.wk), &self.p(a.bk).data);
            let v = h.affine(self.p(a.wv), &self.p(a.bv).data);
            let (kc, vc) = &mut states.layer_kv[l];
            for r in 0..k.rows {
                kc.push_row(k.row(r));
                vc.push_row(v.row(r));
            }
            let total = kc.rows;
            let mut att = Matrix::zeros(x.rows, d);
            for r in 0..x.rows {
                let upto = if causal { start + r + 1 } else { total };
                let (kc, vc) = &states.layer_kv[l];
                att.row_mut(r).copy_from_slice(&self.attend_row(q.row(r), kc, vc, upto, None));
            }
            let proj = att.affine(self.p(a.wo), &self.p(a.bo).data);
            for (xv, pv) in x.data.iter_mut().zip(&proj.data) {
                *xv += pv;
            }
            for r in 0..x.rows {
                let h2 = self.ln(x.row(r), layer.ln2);
                let f = self.ff_row(&h2, layer.ff);
                for (xv, fv) in x.row_mut(r).iter_mut().zip(f) {
                    *xv += fv;
                }
            }
        }
        for r in 0..x.rows {
            let out = self.ln(x.row(r), self.layout.enc_ln);
            states.rows.push_row(&out);
        }
        states.frames = frames.len();
        states
    }

    fn begin_state(&self) -> TransformerState {
        let d = self.cfg.d_model;
        let layers = self.cfg.dec_layers;
        TransformerState {
            tokens: Vec::new(),
            self_k: vec![Matrix::zeros(0, d); layers],
            self_v: vec![Matrix::zeros(0, d); layers],
            layer0_resid: Matrix::zeros(0, d),
            dists: Vec::new(),
        }
    }

    fn self_attn_block(
        &self,
        state: &mut TransformerState,
        l: usize,
        x: Vec<f64>,
        pos: usize,
        capture: Option<&mut DecoderCapture>,
    ) -> Vec<f64> {
        let layer = &self.layout.dec[l];
        let a = layer.self_attn;
        let h = self.ln(&x, layer.ln1);
        let q = vec_affine(&h, self.p(a.wq), &self.p(a.bq).data);
        state.self_k[l].push_row(&vec_affine(&h, self.p(a.wk), &self.p(a.bk).data));
        state.self_v[l].push_row(&vec_affine(&h, self.p(a.wv), &self.p(a.bv).data));
        let sink = capture.map(|c| &mut c.self_w[l]);
        let att = self.attend_row(&q, &state.self_k[l], &state.self_v[l], pos + 1, sink);
        let proj = vec_affine(&att, self.p(a.wo), &self.p(a.bo).data);
        x.iter().zip(proj).map(|(a, b)| a + b).collect()
    }

    /// Runs decoder position `pos`, whose input is `token`. With `reuse`, the
    /// first layer's self-attention block is read back from the state.
    fn decode_position(
        &self,
        ctx: &TransformerContext,
        state: &mut TransformerState,
        token: TokenId,
        pos: usize,
        reuse: bool,
        mut capture: Option<&mut DecoderCapture>,
    ) {
        let d = self.cfg.d_model;
        let mut x = if reuse {
            state.layer0_resid.row(pos).to_vec()
        } else {
            let mut x0 = self.p(self.layout.tok_emb).row(token as usize).to_vec();
            for (v, pe) in x0.iter_mut().zip(sinusoid(pos, d)) {
                *v += pe;
            }
            let x0 = self.self_attn_block(state, 0, x0, pos, capture.as_deref_mut());
            state.layer0_resid.push_row(&x0);
            x0
        };
        for (l, layer) in self.layout.dec.iter().enumerate() {
            if l > 0 {
                x = self.self_attn_block(state, l, x, pos, capture.as_deref_mut());
            }
            let c = layer.cross;
            let h = self.ln(&x, layer.ln2);
            let q = vec_affine(&h, self.p(c.wq), &self.p(c.bq).data);
            let (ck, cv) = &ctx.cross[l];
            let sink = capture.as_deref_mut().map(|cap| &mut cap.cross_w[l]);
            let att = self.attend_row(&q, ck, cv, ck.rows, sink);
            let proj = vec_affine(&att, self.p(c.wo), &self.p(c.bo).data);
            x.iter_mut().zip(proj).for_each(|(a, b)| *a += b);
            let h = self.ln(&x, layer.ln3);
            let f = self.ff_row(&h, layer.ff);
            x.iter_mut().zip(f).for_each(|(a, b)| *a += b);
        }
        let h = self.ln(&x, self.layout.dec_ln);
        let mut logits = vec_affine(&h, self.p(self.layout.out_w), &self.p(self.layout.out_b).data);
        logits[Vocab::BOS as usize] = f64::NEG_INFINITY;
        logits[Vocab::PAD as usize] = f64::NEG_INFINITY;
        state.dists.push(log_softmax(&logits));
    }

    /// Attention weights of the encoder over `enc` and of the decoder while
    /// reading `prefix`.
    pub fn attention_weights(&self, enc: &EncoderStates, prefix: &[TokenId]) -> Result<AttentionDump> {
        enc.check_owner(self.owner, self.cfg.encoder)?;
        let heads = self.cfg.heads;
        let t = enc.len();
        let causal = self.cfg.encoder == EncoderKind::Unidirectional;

        let mut encoder_self = Vec::new();
        for (l, layer) in self.layout.enc.iter().enumerate() {
            let mut mats = vec![Matrix::zeros(t, t); heads];
            if t > 0 {
                let h = self.ln_rows(&enc.layer_inputs[l], layer.ln1);
                let q = h.affine(self.p(layer.attn.wq), &self.p(layer.attn.bq).data);
                let (k, v) = &enc.layer_kv[l];
                for i in 0..t {
                    let mut w = Vec::new();
                    self.attend_row(q.row(i), k, v, if causal { i + 1 } else { t }, Some(&mut w));
                    for (hd, weights) in w.into_iter().enumerate() {
                        mats[hd].row_mut(i)[..weights.len()].copy_from_slice(&weights);
                    }
                }
            }
            encoder_self.push(mats);
        }

        let ctx = self.prepare(enc)?;
        let mut state = self.begin_state();
        let layers = self.cfg.dec_layers;
        let mut cap = DecoderCapture { self_w: vec![Vec::new(); layers], cross_w: vec![Vec::new(); layers] };
        let n = prefix.len() + 1;
        for pos in 0..n {
            let token = if pos == 0 { Vocab::BOS } else { prefix[pos - 1] };
            check_token(&self.vocab, token)?;
            self.decode_position(&ctx, &mut state, token, pos, false, Some(&mut cap));
        }
        let collect = |rows: &Vec<Vec<f64>>, cols: usize| -> Vec<Matrix> {
            // rows[pos * heads + head]
            (0..heads)
                .map(|hd| {
                    let mut m = Matrix::zeros(n, cols);
                    for pos in 0..n {
                        let w = &rows[pos * heads + hd];
                        m.row_mut(pos)[..w.len()].copy_from_slice(w);
                    }
                    m
                })
                .collect()
        };
        let decoder_self = cap.self_w.iter().map(|r| collect(r, n)).collect();
        let decoder_cross = cap.cross_w.iter().map(|r| collect(r, t)).collect();
        Ok(AttentionDump { encoder_self, decoder_self, decoder_cross })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut f)?;
        f.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
        Self::read_from(&mut f)
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        let header = FileHeader {
            format_version: FORMAT_VERSION,
            config: self.cfg,
            vocab: self.vocab.surfaces().to_vec(),
            shapes: self.params.iter().map(|p| (p.rows, p.cols)).collect(),
        };
        let header = serde_json::to_vec(&header)?;
        w.write_all(MAGIC)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes())?;
        w.write_all(&(header.len() as u64).to_le_bytes())?;
        w.write_all(&header)?;
        for p in &self.params {
            for v in &p.data {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format("not a model file".into()));
        }
        let mut b4 = [0u8; 4];
        r.read_exact(&mut b4)?;
        let version = u32::from_le_bytes(b4);
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported model format version {version}")));
        }
        let mut b8 = [0u8; 8];
        r.read_exact(&mut b8)?;
        let len = u64::from_le_bytes(b8) as usize;
        if len > 1 << 24 {
            return Err(Error::Format("model header too large".into()));
        }
        let mut header = vec![0u8; len];
        r.read_exact(&mut header)?;
        let header: FileHeader = serde_json::from_slice(&header)?;
        let vocab = Vocab::from_surfaces(header.vocab)?;
        let mut params = Vec::with_capacity(header.shapes.len());
        for (rows, cols) in header.shapes {
            let mut data = Vec::with_capacity(rows * cols);
            for _ in 0..rows * cols {
                r.read_exact(&mut b8)?;
                data.push(f64::from_le_bytes(b8));
            }
            params.push(Matrix::from_vec(rows, cols, data));
        }
        Self::from_parts(header.config, vocab, params)
    }
}

#[derive(Serialize, Deserialize)]
struct FileHeader {
    format_version: u32,
    config: TransformerConfig,
    vocab: Vec<String>,
    shapes: Vec<(usize, usize)>,
}

impl SequenceModel for TinyTransformer {
    type Context = TransformerContext;
    type State = TransformerState;

    fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    fn encoder_kind(&self) -> EncoderKind {
        self.cfg.encoder
    }

    fn encode(&self, frames: &[Frame], prior: Option<EncoderStates>) -> Result<EncoderStates> {
        if frames.iter().any(|f| f.len() != self.cfg.frame_dim) {
            return Err(contract(format!("frames must have dimension {}", self.cfg.frame_dim)));
        }
        let fresh = EncoderStates::empty(self.owner, self.cfg.encoder, self.cfg.d_model);
        let base = match prior {
            Some(p) => {
                p.check_owner(self.owner, self.cfg.encoder)?;
                if p.frames > frames.len() {
                    return Err(contract("prior encoder states cover more frames than given"));
                }
                match self.cfg.encoder {
                    EncoderKind::Unidirectional => p,
                    EncoderKind::Bidirectional => fresh,
                }
            }
            None => fresh,
        };
        Ok(self.encode_rows(frames, base))
    }

    fn prepare(&self, enc: &EncoderStates) -> Result<TransformerContext> {
        enc.check_owner(self.owner, self.cfg.encoder)?;
        let cross = self
            .layout
            .dec
            .iter()
            .map(|layer| {
                let c = layer.cross;
                (
                    enc.rows.affine(self.p(c.wk), &self.p(c.bk).data),
                    enc.rows.affine(self.p(c.wv), &self.p(c.bv).data),
                )
            })
            .collect();
        Ok(TransformerContext { cross })
    }

    fn begin(&self, ctx: &TransformerContext) -> Result<TransformerState> {
        let mut state = self.begin_state();
        self.decode_position(ctx, &mut state, Vocab::BOS, 0, false, None);
        Ok(state)
    }

    fn extend(&self, ctx: &TransformerContext, state: &mut TransformerState, token: TokenId) -> Result<()> {
        check_token(&self.vocab, token)?;
        state.tokens.push(token);
        let pos = state.tokens.len();
        self.decode_position(ctx, state, token, pos, false, None);
        Ok(())
    }

    fn dump_attention(&self, enc: &EncoderStates, prefix: &[TokenId]) -> Result<AttentionDump> {
        self.attention_weights(enc, prefix)
    }

    fn rebase(&self, ctx: &TransformerContext, old: &TransformerState) -> Result<TransformerState> {
        let d = self.cfg.d_model;
        let layers = self.cfg.dec_layers;
        let mut state = TransformerState {
            tokens: old.tokens.clone(),
            self_k: vec![Matrix::zeros(0, d); layers],
            self_v: vec![Matrix::zeros(0, d); layers],
            layer0_resid: old.layer0_resid.clone(),
            dists: Vec::with_capacity(old.dists.len()),
        };
        state.self_k[0] = old.self_k[0].clone();
        state.self_v[0] = old.self_v[0].clone();
        for pos in 0..=old.tokens.len() {
            let token = if pos == 0 { Vocab::BOS } else { old.tokens[pos - 1] };
            self.decode_position(ctx, &mut state, token, pos, true, None);
        }
        Ok(state)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::log_sum_exp;
    use rand::Rng;

    fn frames(n: usize, dim: usize, seed: u64) -> Vec<Frame> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect()
    }

    fn model(kind: EncoderKind) -> TinyTransformer {
        let mut cfg = TransformerConfig::new(6, kind);
        cfg.d_model = 16;
        cfg.ff_dim = 24;
        TinyTransformer::new(cfg, Vocab::synthetic(5), 11).unwrap()
    }

    #[test]
    fn unidirectional_extension_matches_full_encode() {
        let m = model(EncoderKind::Unidirectional);
        let f = frames(30, 6, 1);
        let part = m.encode(&f[..12], None).unwrap();
        let ext = m.encode(&f, Some(part.clone())).unwrap();
        let full = m.encode(&f, None).unwrap();
        assert_eq!(ext.len(), 30);
        for (a, b) in ext.rows.data.iter().zip(&full.rows.data) {
            assert!((a - b).abs() < 1e-12);
        }
        for (a, b) in part.rows.data.iter().zip(&full.rows.data) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn bidirectional_prefix_rows_change() {
        let m = model(EncoderKind::Bidirectional);
        let f = frames(20, 6, 2);
        let part = m.encode(&f[..10], None).unwrap();
        let full = m.encode(&f, None).unwrap();
        let max = part.rows.data.iter().zip(&full.rows.data).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(max > 1e-4);
    }

    #[test]
    fn decode_step_is_a_distribution() {
        let m = model(EncoderKind::Unidirectional);
        let enc = m.encode(&frames(8, 6, 3), None).unwrap();
        let lp = m.decode_step(&enc, &[3, 5, 4]).unwrap();
        assert!(log_sum_exp(&lp).abs() < 1e-9);
        assert_eq!(lp[Vocab::BOS as usize], f64::NEG_INFINITY);
        assert_eq!(lp, m.decode_step(&enc, &[3, 5, 4]).unwrap());
        assert!(m.decode_step(&enc, &[99]).is_err());
        // empty encoder output still yields a distribution
        let empty = m.encode(&[], None).unwrap();
        assert!(log_sum_exp(&m.decode_step(&empty, &[]).unwrap()).abs() < 1e-9);
    }

    #[test]
    fn rebase_matches_replay_exactly() {
        let m = model(EncoderKind::Unidirectional);
        let f = frames(16, 6, 4);
        let enc1 = m.encode(&f[..8], None).unwrap();
        let ctx1 = m.prepare(&enc1).unwrap();
        let mut st = m.begin(&ctx1).unwrap();
        for t in [3, 4, 6] {
            m.extend(&ctx1, &mut st, t).unwrap();
        }
        let enc2 = m.encode(&f, Some(enc1)).unwrap();
        let ctx2 = m.prepare(&enc2).unwrap();
        let rebased = m.rebase(&ctx2, &st).unwrap();
        let mut replay = m.begin(&ctx2).unwrap();
        for t in [3, 4, 6] {
            m.extend(&ctx2, &mut replay, t).unwrap();
        }
        assert_eq!(rebased.dists, replay.dists);
        assert_eq!(rebased.self_k[1], replay.self_k[1]);
        let mut a = rebased.clone();
        let mut b = replay.clone();
        a.truncate(1);
        b.truncate(1);
        m.extend(&ctx2, &mut a, 5).unwrap();
        m.extend(&ctx2, &mut b, 5).unwrap();
        assert_eq!(a.dists, b.dists);
    }

    #[test]
    fn foreign_states_are_rejected() {
        let uni = model(EncoderKind::Unidirectional);
        let bi = model(EncoderKind::Bidirectional);
        let enc = uni.encode(&frames(4, 6, 5), None).unwrap();
        assert!(bi.prepare(&enc).is_err());
        assert!(bi.encode(&frames(6, 6, 5), Some(enc)).is_err());
    }

    #[test]
    fn attention_dump_shapes_and_masks() {
        let m = model(EncoderKind::Unidirectional);
        let enc = m.encode(&frames(7, 6, 6), None).unwrap();
        let dump = m.dump_attention(&enc, &[3, 4]).unwrap();
        for heads in &dump.encoder_self {
            for w in heads {
                for i in 0..w.rows {
                    assert!((w.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-9);
                    assert!(w.row(i)[i + 1..].iter().all(|&v| v == 0.0));
                }
            }
        }
        for heads in dump.decoder_cross.iter().chain(&dump.decoder_self) {
            for w in heads {
                assert_eq!(w.rows, 3);
                for i in 0..w.rows {
                    assert!((w.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-9);
                }
            }
        }
        assert_eq!(dump.decoder_cross[0][0].cols, 7);
        assert!(dump.to_grid_text().starts_with("# encoder_self layer=0 head=0 rows=7 cols=7\n"));
    }

    #[test]
    fn file_roundtrip() {
        let m = model(EncoderKind::Bidirectional);
        let mut buf = Vec::new();
        m.write_to(&mut buf).unwrap();
        let back = TinyTransformer::read_from(&mut buf.as_slice()).unwrap();
        assert_eq!(back.params, m.params);
        assert_eq!(back.cfg, m.cfg);
        assert_eq!(back.vocab, m.vocab);
        assert!(TinyTransformer::read_from(&mut &b"XXXX"[..]).is_err());
    }
}
