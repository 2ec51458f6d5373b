//! Minimal reverse-mode automatic differentiation over [`Matrix`] values.
//!
//! A [`Tape`] records operations in evaluation order; [`Tape::backward`]
//! walks it in reverse and accumulates parameter gradients. Attention, layer
//! normalization and the smoothed cross-entropy are single fused nodes.

use crate::tensor::{gemm, softmax_in_place, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

const LN_EPS: f64 = 1e-5;

enum Op {
    Param(usize),
    Const,
    MatMul(Var, Var),
    AddRow(Var, Var),
    Add(Var, Var),
    Relu(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Matrix, inv_std: Vec<f64> },
    Attention { q: Var, k: Var, v: Var, heads: usize, probs: Vec<Matrix> },
    Gather { table: Var, ids: Vec<usize> },
    SmoothedNll { logits: Var, targets: Vec<usize>, smoothing: f64, allowed: Vec<bool>, probs: Matrix },
}

struct Node {
    value: Option<Matrix>,
    op: Op,
}

pub struct Tape<'p> {
    params: &'p [Matrix],
    nodes: Vec<Node>,
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p [Matrix]) -> Self {
        Self { params, nodes: Vec::new() }
    }

    pub fn value(&self, v: Var) -> &Matrix {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(m), _) => m,
            (None, Op::Param(i)) => &self.params[*i],
            _ => unreachable!("non-parameter node without value"),
        }
    }

    fn push(&mut self, value: Matrix, op: Op) -> Var {
        self.nodes.push(Node { value: Some(value), op });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, index: usize) -> Var {
        self.nodes.push(Node { value: None, op: Op::Param(index) });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, m: Matrix) -> Var {
        self.push(m, Op::Const)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).matmul(self.value(b));
        self.push(out, Op::MatMul(a, b))
    }

    pub fn add_row(&mut self, x: Var, bias: Var) -> Var {
        let b = self.value(bias);
        assert_eq!(b.rows, 1);
        let mut out = self.value(x).clone();
        for r in 0..out.rows {
            for (o, &bv) in out.row_mut(r).iter_mut().zip(&b.data) {
                *o += bv;
            }
        }
        self.push(out, Op::AddRow(x, bias))
    }

    /// `x · w + b`.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Var {
        let y = self.matmul(x, w);
        self.add_row(y, b)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut out = self.value(a).clone();
        let bv = self.value(b);
        assert_eq!((out.rows, out.cols), (bv.rows, bv.cols));
        for (o, &x) in out.data.iter_mut().zip(&bv.data) {
            *o += x;
        }
        self.push(out, Op::Add(a, b))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        for v in &mut out.data {
            *v = v.max(0.0);
        }
        self.push(out, Op::Relu(x))
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Var {
        let xm = self.value(x);
        let (g, b) = (self.value(gain), self.value(bias));
        let mut xhat = Matrix::zeros(xm.rows, xm.cols);
        let mut out = Matrix::zeros(xm.rows, xm.cols);
        let mut inv_std = Vec::with_capacity(xm.rows);
        for r in 0..xm.rows {
            let (h, inv) = normalize_row(xm.row(r));
            for c in 0..xm.cols {
                out.data[r * xm.cols + c] = h[c] * g.data[c] + b.data[c];
            }
            xhat.row_mut(r).copy_from_slice(&h);
            inv_std.push(inv);
        }
        self.push(out, Op::LayerNorm { x, gain, bias, xhat, inv_std })
    }

    /// Multi-head scaled dot-product attention. With `causal`, query `i`
    /// only sees keys `0..=i`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, causal: bool) -> Var {
        let (qm, km, vm) = (self.value(q), self.value(k), self.value(v));
        let d = qm.cols;
        assert!(d % heads == 0 && km.cols == d && vm.cols == d && km.rows == vm.rows);
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut out = Matrix::zeros(qm.rows, d);
        let mut probs = Vec::with_capacity(heads);
        for h in 0..heads {
            let (qh, kh, vh) = (cols(qm, h * dh, dh), cols(km, h * dh, dh), cols(vm, h * dh, dh));
            let mut s = Matrix::zeros(qm.rows, km.rows);
            gemm(scale, &qh, false, &kh, true, 0.0, &mut s);
            for i in 0..s.rows {
                let row = s.row_mut(i);
                if causal {
                    for x in row.iter_mut().skip(i + 1) {
                        *x = f64::NEG_INFINITY;
                    }
                }
                softmax_in_place(row);
            }
            let oh = s.matmul(&vh);
            set_cols(&mut out, &oh, h * dh);
            probs.push(s);
        }
        self.push(out, Op::Attention { q, k, v, heads, probs })
    }

    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Var {
        let t = self.value(table);
        let mut out = Matrix::zeros(ids.len(), t.cols);
        for (r, &id) in ids.iter().enumerate() {
            out.row_mut(r).copy_from_slice(t.row(id));
        }
        self.push(out, Op::Gather { table, ids: ids.to_vec() })
    }

    /// Summed label-smoothed negative log-likelihood. Classes with
    /// `allowed[c] == false` are excluded from the softmax.
    pub fn smoothed_nll(&mut self, logits: Var, targets: &[usize], smoothing: f64, allowed: &[bool]) -> Var {
        let lm = self.value(logits);
        assert_eq!(lm.rows, targets.len());
        assert_eq!(lm.cols, allowed.len());
        let n_allowed = allowed.iter().filter(|&&a| a).count() as f64;
        let mut probs = Matrix::zeros(lm.rows, lm.cols);
        let mut loss = 0.0;
        for r in 0..lm.rows {
            let row: Vec<f64> = lm
                .row(r)
                .iter()
                .zip(allowed)
                .map(|(&x, &a)| if a { x } else { f64::NEG_INFINITY })
                .collect();
            let lse = crate::tensor::log_sum_exp(&row);
            for c in 0..lm.cols {
                if !allowed[c] {
                    continue;
                }
                let lp = row[c] - lse;
                let q = smoothing / n_allowed + if c == targets[r] { 1.0 - smoothing } else { 0.0 };
                loss -= q * lp;
                probs.data[r * lm.cols + c] = lp.exp();
            }
        }
        self.push(
            Matrix::from_vec(1, 1, vec![loss]),
            Op::SmoothedNll {
                logits,
                targets: targets.to_vec(),
                smoothing,
                allowed: allowed.to_vec(),
                probs,
            },
        )
    }

    /// Backpropagates `seed · d(output)/d(params)` into `param_grads`.
    pub fn backward(&self, output: Var, seed: f64, param_grads: &mut [Matrix]) {
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        let out = self.value(output);
        grads[output.0] = Some(Matrix::from_vec(out.rows, out.cols, vec![seed; out.len()]));

        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            match &self.nodes[idx].op {
                Op::Param(i) => add_into(&mut param_grads[*i], &g),
                Op::Const => {}
                Op::MatMul(a, b) => {
                    let (am, bm) = (self.value(*a), self.value(*b));
                    let mut da = Matrix::zeros(am.rows, am.cols);
                    gemm(1.0, &g, false, bm, true, 0.0, &mut da);
                    let mut db = Matrix::zeros(bm.rows, bm.cols);
                    gemm(1.0, am, true, &g, false, 0.0, &mut db);
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::AddRow(x, bias) => {
                    let mut db = Matrix::zeros(1, g.cols);
                    for r in 0..g.rows {
                        for (d, &v) in db.data.iter_mut().zip(g.row(r)) {
                            *d += v;
                        }
                    }
                    accumulate(&mut grads, *bias, db);
                    accumulate(&mut grads, *x, g);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *b, g.clone());
                    accumulate(&mut grads, *a, g);
                }
                Op::Relu(x) => {
                    let y = self.nodes[idx].value.as_ref().expect("relu value");
                    let mut dx = g;
                    for (d, &v) in dx.data.iter_mut().zip(&y.data) {
                        if v <= 0.0 {
                            *d = 0.0;
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::LayerNorm { x, gain, bias, xhat, inv_std } => {
                    let gm = self.value(*gain);
                    let n = g.cols as f64;
                    let mut dx = Matrix::zeros(g.rows, g.cols);
                    let mut dg = Matrix::zeros(1, g.cols);
                    let mut db = Matrix::zeros(1, g.cols);
                    for r in 0..g.rows {
                        let (gy, xh) = (g.row(r), xhat.row(r));
                        let dxhat: Vec<f64> = gy.iter().zip(&gm.data).map(|(a, b)| a * b).collect();
                        let sum: f64 = dxhat.iter().sum();
                        let sum_x: f64 = dxhat.iter().zip(xh).map(|(a, b)| a * b).sum();
                        for c in 0..g.cols {
                            dg.data[c] += gy[c] * xh[c];
                            db.data[c] += gy[c];
                            dx.data[r * g.cols + c] = inv_std[r] / n * (n * dxhat[c] - sum - xh[c] * sum_x);
                        }
                    }
                    accumulate(&mut grads, *gain, dg);
                    accumulate(&mut grads, *bias, db);
                    accumulate(&mut grads, *x, dx);
                }
                Op::Attention { q, k, v, heads, probs } => {
                    let (qm, km, vm) = (self.value(*q), self.value(*k), self.value(*v));
                    let d = qm.cols;
                    let dh = d / heads;
                    let scale = 1.0 / (dh as f64).sqrt();
                    let mut dq = Matrix::zeros(qm.rows, d);
                    let mut dk = Matrix::zeros(km.rows, d);
                    let mut dv = Matrix::zeros(vm.rows, d);
                    for (h, p) in probs.iter().enumerate() {
                        let (qh, kh, vh) = (cols(qm, h * dh, dh), cols(km, h * dh, dh), cols(vm, h * dh, dh));
                        let go = cols(&g, h * dh, dh);
                        let mut dp = Matrix::zeros(p.rows, p.cols);
                        gemm(1.0, &go, false, &vh, true, 0.0, &mut dp);
                        let mut dvh = Matrix::zeros(vh.rows, dh);
                        gemm(1.0, p, true, &go, false, 0.0, &mut dvh);
                        // softmax backward, in place on dp
                        for i in 0..p.rows {
                            let pr = p.row(i);
                            let dr = dp.row_mut(i);
                            let inner: f64 = pr.iter().zip(dr.iter()).map(|(a, b)| a * b).sum();
                            for (x, &pv) in dr.iter_mut().zip(pr) {
                                *x = pv * (*x - inner);
                            }
                        }
                        let mut dqh = Matrix::zeros(qh.rows, dh);
                        gemm(scale, &dp, false, &kh, false, 0.0, &mut dqh);
                        let mut dkh = Matrix::zeros(kh.rows, dh);
                        gemm(scale, &dp, true, &qh, false, 0.0, &mut dkh);
                        set_cols(&mut dq, &dqh, h * dh);
                        set_cols(&mut dk, &dkh, h * dh);
                        set_cols(&mut dv, &dvh, h * dh);
                    }
                    accumulate(&mut grads, *q, dq);
                    accumulate(&mut grads, *k, dk);
                    accumulate(&mut grads, *v, dv);
                }
                Op::Gather { table, ids } => {
                    let t = self.value(*table);
                    let mut dt = Matrix::zeros(t.rows, t.cols);
                    for (r, &id) in ids.iter().enumerate() {
                        for (d, &v) in dt.row_mut(id).iter_mut().zip(g.row(r)) {
                            *d += v;
                        }
                    }
                    accumulate(&mut grads, *table, dt);
                }
                Op::SmoothedNll { logits, targets, smoothing, allowed, probs } => {
                    let seed = g.data[0];
                    let n_allowed = allowed.iter().filter(|&&a| a).count() as f64;
                    let mut dl = Matrix::zeros(probs.rows, probs.cols);
                    for r in 0..probs.rows {
                        for c in 0..probs.cols {
                            if !allowed[c] {
                                continue;
                            }
                            let q = smoothing / n_allowed + if c == targets[r] { 1.0 - smoothing } else { 0.0 };
                            dl.data[r * probs.cols + c] = seed * (probs.data[r * probs.cols + c] - q);
                        }
                    }
                    accumulate(&mut grads, *logits, dl);
                }
            }
        }
    }
}

/// Layer-norm statistics without gain and bias: `(x̂, 1/σ)`.
pub fn normalize_row(x: &[f64]) -> (Vec<f64>, f64) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let inv = 1.0 / (var + LN_EPS).sqrt();
    (x.iter().map(|v| (v - mean) * inv).collect(), inv)
}

fn cols(m: &Matrix, start: usize, width: usize) -> Matrix {
    let mut out = Matrix::zeros(m.rows, width);
    for r in 0..m.rows {
        out.row_mut(r).copy_from_slice(&m.row(r)[start..start + width]);
    }
    out
}

fn set_cols(dst: &mut Matrix, src: &Matrix, start: usize) {
    for r in 0..src.rows {
        dst.row_mut(r)[start..start + src.cols].copy_from_slice(src.row(r));
    }
}

fn add_into(dst: &mut Matrix, src: &Matrix) {
    for (d, s) in dst.data.iter_mut().zip(&src.data) {
        *d += s;
    }
}

fn accumulate(grads: &mut [Option<Matrix>], v: Var, g: Matrix) {
    match &mut grads[v.0] {
        Some(existing) => add_into(existing, &g),
        slot @ None => *slot = Some(g),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
        Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect())
    }

    /// Finite-difference check of every op on a small composite graph.
    #[test]
    fn composite_graph_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let params = vec![
            random(5, 4, &mut rng), // embedding table
            random(4, 4, &mut rng), // wq
            random(4, 4, &mut rng), // wk
            random(4, 4, &mut rng), // wv
            random(1, 4, &mut rng), // gain
            random(1, 4, &mut rng), // bias
            random(4, 5, &mut rng), // out
            random(1, 5, &mut rng), // out bias
        ];
        let ids = [1usize, 3, 0, 4];
        let targets = [2usize, 0, 3, 4];
        let allowed = [true, true, false, true, true];
        let targets = targets.map(|t| if allowed[t] { t } else { 0 });

        let loss = |params: &[Matrix]| -> (f64, Vec<Matrix>) {
            let mut tape = Tape::new(params);
            let p: Vec<Var> = (0..params.len()).map(|i| tape.param(i)).collect();
            let x = tape.gather(p[0], &ids);
            let x = tape.layer_norm(x, p[4], p[5]);
            let q = tape.matmul(x, p[1]);
            let k = tape.matmul(x, p[2]);
            let v = tape.matmul(x, p[3]);
            let a = tape.attention(q, k, v, 2, true);
            let a = tape.relu(a);
            let h = tape.add(a, x);
            let logits = tape.affine(h, p[6], p[7]);
            let l = tape.smoothed_nll(logits, &targets, 0.1, &allowed);
            let mut grads: Vec<Matrix> = params.iter().map(|m| Matrix::zeros(m.rows, m.cols)).collect();
            tape.backward(l, 1.0, &mut grads);
            (tape.value(l).data[0], grads)
        };

        let (_, grads) = loss(&params);
        let h = 1e-5;
        for (pi, m) in params.iter().enumerate() {
            for j in 0..m.len() {
                let mut plus = params.clone();
                plus[pi].data[j] += h;
                let mut minus = params.clone();
                minus[pi].data[j] -= h;
                let fd = (loss(&plus).0 - loss(&minus).0) / (2.0 * h);
                let an = grads[pi].data[j];
                let err = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-6);
                assert!(err < 1e-4, "param {pi}[{j}]: analytic {an} vs fd {fd}");
            }
        }
    }

    #[test]
    fn causal_attention_ignores_future_keys() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = random(4, 4, &mut rng);
        let mut tape = Tape::new(&[]);
        let xv = tape.constant(x.clone());
        let full = tape.attention(xv, xv, xv, 2, true);
        let mut y = x.clone();
        y.row_mut(3).iter_mut().for_each(|v| *v += 5.0);
        let yv = tape.constant(y);
        let changed = tape.attention(yv, yv, yv, 2, true);
        assert_eq!(tape.value(full).row(1), tape.value(changed).row(1));
    }
}
