//! Pre-LN transformer encoder with mean pooling and a hand-written backward
//! pass.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::vocab::PAD;
use super::EncodeError;
use crate::tensor::{matmul_acc, matmul_at_acc, matmul_bt_acc, ParamSet, Real, Tensor};

const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_len: usize,
}

impl EncoderConfig {
    pub fn with_vocab(vocab_size: usize) -> Self {
        Self { vocab_size, d_model: 64, n_layers: 2, n_heads: 4, d_ff: 128, max_len: 256 }
    }

    pub fn validate(&self) -> Result<(), EncodeError> {
        if self.vocab_size < 3 || self.d_model == 0 || self.n_heads == 0 || self.max_len == 0 {
            return Err(EncodeError::Config(format!("degenerate encoder config {self:?}")));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(EncodeError::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }

    fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockParams<T> {
    pub ln1_g: Tensor<T>,
    pub ln1_b: Tensor<T>,
    pub wq: Tensor<T>,
    pub bq: Tensor<T>,
    pub wk: Tensor<T>,
    pub bk: Tensor<T>,
    pub wv: Tensor<T>,
    pub bv: Tensor<T>,
    pub wo: Tensor<T>,
    pub bo: Tensor<T>,
    pub ln2_g: Tensor<T>,
    pub ln2_b: Tensor<T>,
    pub w1: Tensor<T>,
    pub b1: Tensor<T>,
    pub w2: Tensor<T>,
    pub b2: Tensor<T>,
}

impl<T: Real> BlockParams<T> {
    fn zeros(d: usize, f: usize) -> Self {
        Self {
            ln1_g: Tensor::zeros(&[d]),
            ln1_b: Tensor::zeros(&[d]),
            wq: Tensor::zeros(&[d, d]),
            bq: Tensor::zeros(&[d]),
            wk: Tensor::zeros(&[d, d]),
            bk: Tensor::zeros(&[d]),
            wv: Tensor::zeros(&[d, d]),
            bv: Tensor::zeros(&[d]),
            wo: Tensor::zeros(&[d, d]),
            bo: Tensor::zeros(&[d]),
            ln2_g: Tensor::zeros(&[d]),
            ln2_b: Tensor::zeros(&[d]),
            w1: Tensor::zeros(&[d, f]),
            b1: Tensor::zeros(&[f]),
            w2: Tensor::zeros(&[f, d]),
            b2: Tensor::zeros(&[d]),
        }
    }

    fn fields(&self) -> [(&'static str, &Tensor<T>); 16] {
        [
            ("ln1_g", &self.ln1_g),
            ("ln1_b", &self.ln1_b),
            ("wq", &self.wq),
            ("bq", &self.bq),
            ("wk", &self.wk),
            ("bk", &self.bk),
            ("wv", &self.wv),
            ("bv", &self.bv),
            ("wo", &self.wo),
            ("bo", &self.bo),
            ("ln2_g", &self.ln2_g),
            ("ln2_b", &self.ln2_b),
            ("w1", &self.w1),
            ("b1", &self.b1),
            ("w2", &self.w2),
            ("b2", &self.b2),
        ]
    }

    fn fields_mut(&mut self) -> [&mut Tensor<T>; 16] {
        [
            &mut self.ln1_g,
            &mut self.ln1_b,
            &mut self.wq,
            &mut self.bq,
            &mut self.wk,
            &mut self.bk,
            &mut self.wv,
            &mut self.bv,
            &mut self.wo,
            &mut self.bo,
            &mut self.ln2_g,
            &mut self.ln2_b,
            &mut self.w1,
            &mut self.b1,
            &mut self.w2,
            &mut self.b2,
        ]
    }
}

/// Encoder weights. The same type holds gradients.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams<T> {
    pub config: EncoderConfig,
    pub tok_emb: Tensor<T>,
    pub pos_emb: Tensor<T>,
    pub blocks: Vec<BlockParams<T>>,
}

impl<T: Real> ParamSet<T> for EncoderParams<T> {
    fn named(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = vec![("tok_emb".to_string(), &self.tok_emb), ("pos_emb".to_string(), &self.pos_emb)];
        for (i, b) in self.blocks.iter().enumerate() {
            for (name, t) in b.fields() {
                out.push((format!("block{i}.{name}"), t));
            }
        }
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = vec![&mut self.tok_emb, &mut self.pos_emb];
        for b in &mut self.blocks {
            out.extend(b.fields_mut());
        }
        out
    }
}

impl<T: Real> EncoderParams<T> {
    pub fn zeros(config: &EncoderConfig) -> Self {
        let (d, f) = (config.d_model, config.d_ff);
        Self {
            config: config.clone(),
            tok_emb: Tensor::zeros(&[config.vocab_size, d]),
            pos_emb: Tensor::zeros(&[config.max_len, d]),
            blocks: (0..config.n_layers).map(|_| BlockParams::zeros(d, f)).collect(),
        }
    }

    /// Uniform(±1/√fan-in) for embeddings and linear maps, unit layer-norm
    /// gains, zero biases.
    pub fn init<R: Rng>(config: &EncoderConfig, rng: &mut R) -> Result<Self, EncodeError> {
        config.validate()?;
        let (d, f) = (config.d_model, config.d_ff);
        let sd = 1.0 / (d as f64).sqrt();
        let sf = 1.0 / (f as f64).sqrt();
        let mut p = Self::zeros(config);
        p.tok_emb = Tensor::uniform(&[config.vocab_size, d], sd, rng);
        p.pos_emb = Tensor::uniform(&[config.max_len, d], sd, rng);
        for b in &mut p.blocks {
            b.ln1_g = Tensor::filled(&[d], T::ONE);
            b.ln2_g = Tensor::filled(&[d], T::ONE);
            b.wq = Tensor::uniform(&[d, d], sd, rng);
            b.wk = Tensor::uniform(&[d, d], sd, rng);
            b.wv = Tensor::uniform(&[d, d], sd, rng);
            b.wo = Tensor::uniform(&[d, d], sd, rng);
            b.w1 = Tensor::uniform(&[d, f], sd, rng);
            b.w2 = Tensor::uniform(&[f, d], sf, rng);
        }
        Ok(p)
    }

    pub fn cast<U: Real>(&self) -> EncoderParams<U> {
        EncoderParams {
            config: self.config.clone(),
            tok_emb: self.tok_emb.cast(),
            pos_emb: self.pos_emb.cast(),
            blocks: self
                .blocks
                .iter()
                .map(|b| {
                    let mut out = BlockParams::zeros(0, 0);
                    for (dst, (_, src)) in out.fields_mut().into_iter().zip(b.fields()) {
                        *dst = src.cast();
                    }
                    out
                })
                .collect(),
        }
    }
}

struct BlockTape<T> {
    x_in: Vec<T>,
    xhat1: Vec<T>,
    rstd1: Vec<T>,
    a: Vec<T>,
    q: Vec<T>,
    k: Vec<T>,
    v: Vec<T>,
    probs: Vec<T>,
    o: Vec<T>,
    xhat2: Vec<T>,
    rstd2: Vec<T>,
    b: Vec<T>,
    u: Vec<T>,
    g: Vec<T>,
}

/// Activations retained by [`EncoderParams::forward`] for the backward pass.
pub struct EncoderTape<T> {
    ids: Vec<u32>,
    positions: Vec<usize>,
    blocks: Vec<BlockTape<T>>,
}

impl<T: Real> EncoderTape<T> {
    /// Number of non-pad positions that entered the encoder.
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

fn layer_norm_fwd<T: Real>(
    x: &[T],
    g: &[T],
    b: &[T],
    d: usize,
    xhat: &mut [T],
    rstd: &mut [T],
    out: &mut [T],
) {
    let eps = T::from_f64(LN_EPS);
    let inv_d = T::from_f64(1.0 / d as f64);
    for (r, row) in x.chunks_exact(d).enumerate() {
        let mean = row.iter().copied().sum::<T>() * inv_d;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
        let rs = T::ONE / (var + eps).sqrt();
        rstd[r] = rs;
        let xh = &mut xhat[r * d..(r + 1) * d];
        let o = &mut out[r * d..(r + 1) * d];
        for j in 0..d {
            xh[j] = (row[j] - mean) * rs;
            o[j] = xh[j] * g[j] + b[j];
        }
    }
}

/// Adds the input gradient into `dx` and parameter gradients into `dg`, `db`.
#[allow(clippy::too_many_arguments)]
fn layer_norm_bwd<T: Real>(
    dout: &[T],
    xhat: &[T],
    rstd: &[T],
    g: &[T],
    d: usize,
    dx: &mut [T],
    dg: &mut [T],
    db: &mut [T],
) {
    let inv_d = T::from_f64(1.0 / d as f64);
    let mut dxhat = vec![T::ZERO; d];
    for (r, dy) in dout.chunks_exact(d).enumerate() {
        let xh = &xhat[r * d..(r + 1) * d];
        let mut mean_dxhat = T::ZERO;
        let mut mean_dxhat_xhat = T::ZERO;
        for j in 0..d {
            dg[j] += dy[j] * xh[j];
            db[j] += dy[j];
            dxhat[j] = dy[j] * g[j];
            mean_dxhat += dxhat[j];
            mean_dxhat_xhat += dxhat[j] * xh[j];
        }
        mean_dxhat *= inv_d;
        mean_dxhat_xhat *= inv_d;
        let rs = rstd[r];
        let dxr = &mut dx[r * d..(r + 1) * d];
        for j in 0..d {
            dxr[j] += rs * (dxhat[j] - mean_dxhat - xh[j] * mean_dxhat_xhat);
        }
    }
}

fn linear_fwd<T: Real>(x: &[T], w: &[T], bias: &[T], n: usize, din: usize, dout: usize) -> Vec<T> {
    let mut y = Vec::with_capacity(n * dout);
    for _ in 0..n {
        y.extend_from_slice(bias);
    }
    matmul_acc(n, din, dout, x, w, &mut y);
    y
}

/// Accumulates `dW += xᵀ dy`, `db += Σ dy` and, when given, `dx += dy Wᵀ`.
#[allow(clippy::too_many_arguments)]
fn linear_bwd<T: Real>(
    x: &[T],
    w: &[T],
    dy: &[T],
    n: usize,
    din: usize,
    dout: usize,
    dw: &mut [T],
    db: &mut [T],
    dx: Option<&mut [T]>,
) {
    matmul_at_acc(din, n, dout, x, dy, dw);
    for row in dy.chunks_exact(dout) {
        for (b, &v) in db.iter_mut().zip(row) {
            *b += v;
        }
    }
    if let Some(dx) = dx {
        matmul_bt_acc(n, dout, din, dy, w, dx);
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

#[inline]
fn gelu<T: Real>(x: T) -> T {
    let c = T::from_f64(GELU_C);
    let a = T::from_f64(GELU_A);
    let half = T::from_f64(0.5);
    half * x * (T::ONE + (c * (x + a * x * x * x)).tanh())
}

#[inline]
fn gelu_grad<T: Real>(x: T) -> T {
    let c = T::from_f64(GELU_C);
    let a = T::from_f64(GELU_A);
    let half = T::from_f64(0.5);
    let three = T::from_f64(3.0);
    let t = (c * (x + a * x * x * x)).tanh();
    half * (T::ONE + t) + half * x * (T::ONE - t * t) * c * (T::ONE + three * a * x * x)
}

impl<T: Real> EncoderParams<T> {
    fn check_tokens(&self, tokens: &[u32]) -> Result<(), EncodeError> {
        if tokens.is_empty() {
            return Err(EncodeError::EmptyTokens);
        }
        if tokens.len() > self.config.max_len {
            return Err(EncodeError::TooLong { len: tokens.len(), max: self.config.max_len });
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= self.config.vocab_size) {
            return Err(EncodeError::TokenOutOfRange { id: bad, vocab_size: self.config.vocab_size });
        }
        if tokens.iter().all(|&t| t == PAD) {
            return Err(EncodeError::EmptyTokens);
        }
        Ok(())
    }

    /// Pooled embedding of one token sequence.
    pub fn encode(&self, tokens: &[u32]) -> Result<Vec<T>, EncodeError> {
        self.forward(tokens).map(|(e, _)| e)
    }

    /// Embeddings of several sequences. Each sequence is encoded on its own
    /// non-pad positions, so batch composition never changes a result.
    pub fn encode_batch(&self, batch: &[Vec<u32>]) -> Result<Vec<Vec<T>>, EncodeError> {
        let width = batch.iter().map(Vec::len).max().unwrap_or(0);
        batch
            .iter()
            .map(|seq| {
                let mut padded = seq.clone();
                padded.resize(width, PAD);
                self.encode(&padded)
            })
            .collect()
    }

    /// Forward pass returning the pooled embedding and the activations
    /// needed by [`EncoderParams::backward`]. Pad positions are excluded from
    /// attention and pooling; other tokens keep their original positions.
    pub fn forward(&self, tokens: &[u32]) -> Result<(Vec<T>, EncoderTape<T>), EncodeError> {
        self.check_tokens(tokens)?;
        let cfg = &self.config;
        let (d, f, nh) = (cfg.d_model, cfg.d_ff, cfg.n_heads);
        let dh = cfg.head_dim();
        let (ids, positions): (Vec<u32>, Vec<usize>) =
            tokens.iter().enumerate().filter(|(_, &t)| t != PAD).map(|(p, &t)| (t, p)).unzip();
        let n = ids.len();

        let mut x = vec![T::ZERO; n * d];
        for (r, (&id, &pos)) in ids.iter().zip(&positions).enumerate() {
            let te = &self.tok_emb.data[id as usize * d..(id as usize + 1) * d];
            let pe = &self.pos_emb.data[pos * d..(pos + 1) * d];
            for j in 0..d {
                x[r * d + j] = te[j] + pe[j];
            }
        }

        let scale = T::from_f64(1.0 / (dh as f64).sqrt());
        let mut tapes = Vec::with_capacity(self.blocks.len());
        for bp in &self.blocks {
            let mut xhat1 = vec![T::ZERO; n * d];
            let mut rstd1 = vec![T::ZERO; n];
            let mut a = vec![T::ZERO; n * d];
            layer_norm_fwd(&x, &bp.ln1_g.data, &bp.ln1_b.data, d, &mut xhat1, &mut rstd1, &mut a);
            let q = linear_fwd(&a, &bp.wq.data, &bp.bq.data, n, d, d);
            let k = linear_fwd(&a, &bp.wk.data, &bp.bk.data, n, d, d);
            let v = linear_fwd(&a, &bp.wv.data, &bp.bv.data, n, d, d);

            let mut probs = vec![T::ZERO; nh * n * n];
            let mut o = vec![T::ZERO; n * d];
            for h in 0..nh {
                let p = &mut probs[h * n * n..(h + 1) * n * n];
                T::gemm(
                    n, dh, n, scale,
                    &q[h * dh..], d as isize, 1,
                    &k[h * dh..], 1, d as isize,
                    T::ZERO, p, n as isize, 1,
                );
                for row in p.chunks_exact_mut(n) {
                    let max = row.iter().copied().fold(row[0], |m, v| if v > m { v } else { m });
                    let mut sum = T::ZERO;
                    for s in row.iter_mut() {
                        *s = (*s - max).exp();
                        sum += *s;
                    }
                    let inv = T::ONE / sum;
                    row.iter_mut().for_each(|s| *s *= inv);
                }
                T::gemm(
                    n, n, dh, T::ONE,
                    p, n as isize, 1,
                    &v[h * dh..], d as isize, 1,
                    T::ZERO, &mut o[h * dh..], d as isize, 1,
                );
            }

            let attn = linear_fwd(&o, &bp.wo.data, &bp.bo.data, n, d, d);
            let mut hres = x.clone();
            for (hv, av) in hres.iter_mut().zip(&attn) {
                *hv += *av;
            }

            let mut xhat2 = vec![T::ZERO; n * d];
            let mut rstd2 = vec![T::ZERO; n];
            let mut b = vec![T::ZERO; n * d];
            layer_norm_fwd(&hres, &bp.ln2_g.data, &bp.ln2_b.data, d, &mut xhat2, &mut rstd2, &mut b);
            let u = linear_fwd(&b, &bp.w1.data, &bp.b1.data, n, d, f);
            let g: Vec<T> = u.iter().map(|&z| gelu(z)).collect();
            let y = linear_fwd(&g, &bp.w2.data, &bp.b2.data, n, f, d);
            let mut x_out = hres;
            for (xv, yv) in x_out.iter_mut().zip(&y) {
                *xv += *yv;
            }

            let x_in = std::mem::replace(&mut x, x_out);
            tapes.push(BlockTape { x_in, xhat1, rstd1, a, q, k, v, probs, o, xhat2, rstd2, b, u, g });
        }

        let inv_n = T::from_f64(1.0 / n as f64);
        let mut pooled = vec![T::ZERO; d];
        for row in x.chunks_exact(d) {
            for (p, &v) in pooled.iter_mut().zip(row) {
                *p += v;
            }
        }
        pooled.iter_mut().for_each(|p| *p *= inv_n);
        Ok((pooled, EncoderTape { ids, positions, blocks: tapes }))
    }

    /// Accumulates into `grads` the gradient of `⟨upstream, pooled⟩`.
    pub fn backward(&self, tape: &EncoderTape<T>, upstream: &[T], grads: &mut EncoderParams<T>) {
        let cfg = &self.config;
        let (d, f, nh) = (cfg.d_model, cfg.d_ff, cfg.n_heads);
        let dh = cfg.head_dim();
        let n = tape.ids.len();
        assert_eq!(upstream.len(), d);

        let inv_n = T::from_f64(1.0 / n as f64);
        let mut dx: Vec<T> = Vec::with_capacity(n * d);
        for _ in 0..n {
            dx.extend(upstream.iter().map(|&u| u * inv_n));
        }

        let scale = T::from_f64(1.0 / (dh as f64).sqrt());
        for (bi, (bp, t)) in self.blocks.iter().zip(&tape.blocks).enumerate().rev() {
            let gb = &mut grads.blocks[bi];
            // feed-forward branch
            let mut dg = vec![T::ZERO; n * f];
            linear_bwd(&t.g, &bp.w2.data, &dx, n, f, d, &mut gb.w2.data, &mut gb.b2.data, Some(&mut dg));
            for (dgv, &uv) in dg.iter_mut().zip(&t.u) {
                *dgv *= gelu_grad(uv);
            }
            let mut db_ln = vec![T::ZERO; n * d];
            linear_bwd(&t.b, &bp.w1.data, &dg, n, d, f, &mut gb.w1.data, &mut gb.b1.data, Some(&mut db_ln));
            let mut dh_res = dx; // residual path
            layer_norm_bwd(
                &db_ln, &t.xhat2, &t.rstd2, &bp.ln2_g.data, d,
                &mut dh_res, &mut gb.ln2_g.data, &mut gb.ln2_b.data,
            );

            // attention branch
            let mut d_o = vec![T::ZERO; n * d];
            linear_bwd(&t.o, &bp.wo.data, &dh_res, n, d, d, &mut gb.wo.data, &mut gb.bo.data, Some(&mut d_o));
            let mut dq = vec![T::ZERO; n * d];
            let mut dk = vec![T::ZERO; n * d];
            let mut dv = vec![T::ZERO; n * d];
            let mut dp = vec![T::ZERO; n * n];
            for h in 0..nh {
                let p = &t.probs[h * n * n..(h + 1) * n * n];
                // dP = dO_h V_hᵀ
                T::gemm(
                    n, dh, n, T::ONE,
                    &d_o[h * dh..], d as isize, 1,
                    &t.v[h * dh..], 1, d as isize,
                    T::ZERO, &mut dp, n as isize, 1,
                );
                // dV_h += Pᵀ dO_h
                T::gemm(
                    n, n, dh, T::ONE,
                    p, 1, n as isize,
                    &d_o[h * dh..], d as isize, 1,
                    T::ONE, &mut dv[h * dh..], d as isize, 1,
                );
                // softmax backward, folded with the score scale
                for (prow, dprow) in p.chunks_exact(n).zip(dp.chunks_exact_mut(n)) {
                    let dot: T = prow.iter().zip(dprow.iter()).map(|(&a, &b)| a * b).sum();
                    for (ds, &pv) in dprow.iter_mut().zip(prow) {
                        *ds = pv * (*ds - dot) * scale;
                    }
                }
                // dQ_h += dS K_h ; dK_h += dSᵀ Q_h
                T::gemm(
                    n, n, dh, T::ONE,
                    &dp, n as isize, 1,
                    &t.k[h * dh..], d as isize, 1,
                    T::ONE, &mut dq[h * dh..], d as isize, 1,
                );
                T::gemm(
                    n, n, dh, T::ONE,
                    &dp, 1, n as isize,
                    &t.q[h * dh..], d as isize, 1,
                    T::ONE, &mut dk[h * dh..], d as isize, 1,
                );
            }
            let mut da = vec![T::ZERO; n * d];
            linear_bwd(&t.a, &bp.wq.data, &dq, n, d, d, &mut gb.wq.data, &mut gb.bq.data, Some(&mut da));
            linear_bwd(&t.a, &bp.wk.data, &dk, n, d, d, &mut gb.wk.data, &mut gb.bk.data, Some(&mut da));
            linear_bwd(&t.a, &bp.wv.data, &dv, n, d, d, &mut gb.wv.data, &mut gb.bv.data, Some(&mut da));
            let mut dx_in = dh_res;
            layer_norm_bwd(
                &da, &t.xhat1, &t.rstd1, &bp.ln1_g.data, d,
                &mut dx_in, &mut gb.ln1_g.data, &mut gb.ln1_b.data,
            );
            debug_assert_eq!(t.x_in.len(), n * d);
            dx = dx_in;
        }

        for (r, (&id, &pos)) in tape.ids.iter().zip(&tape.positions).enumerate() {
            let src = &dx[r * d..(r + 1) * d];
            let te = &mut grads.tok_emb.data[id as usize * d..(id as usize + 1) * d];
            for (a, &b) in te.iter_mut().zip(src) {
                *a += b;
            }
            let pe = &mut grads.pos_emb.data[pos * d..(pos + 1) * d];
            for (a, &b) in pe.iter_mut().zip(src) {
                *a += b;
            }
        }
    }
}

/// Gradients of `⟨upstream, encode(tokens)⟩` with respect to every tensor.
pub fn encode_backward<T: Real>(
    tokens: &[u32],
    params: &EncoderParams<T>,
    upstream: &[T],
) -> Result<EncoderParams<T>, EncodeError> {
    if upstream.len() != params.config.d_model {
        return Err(EncodeError::Dimension { expected: params.config.d_model, found: upstream.len() });
    }
    let (_, tape) = params.forward(tokens)?;
    let mut grads = EncoderParams::zeros(&params.config);
    params.backward(&tape, upstream, &mut grads);
    Ok(grads)
}
