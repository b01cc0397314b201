//! The closed layer vocabulary: linear, LayerNorm, multi-head attention,
//! GELU MLP, softmax cross-entropy and masked MSE, each with a hand-written
//! backward pass. Token sequences are flat `[n * t * d]` buffers; most layers
//! see them as `rows = n * t` independent rows.
//!
//! Gradients accumulate into a parameter struct of the same type as the
//! parameters themselves, so backward passes never alias the values they
//! read.

use crate::param::{init_trunc_normal, ParamStore};
use crate::rng::RngStream;
use crate::tensor::{dot, matmul, matmul_acc, matmul_at_acc, matmul_bt, Tensor};

pub const LAYER_NORM_EPS: f64 = 1e-6;

// ---------------------------------------------------------------------------
// Linear
// ---------------------------------------------------------------------------

/// y = x @ w + b for x: [rows, d_in], w: [d_in, d_out].
pub fn linear_fwd(x: &[f64], w: &Tensor, b: &Tensor, rows: usize) -> Vec<f64> {
    let (d_in, d_out) = (w.shape()[0], w.shape()[1]);
    debug_assert_eq!(x.len(), rows * d_in);
    debug_assert_eq!(b.len(), d_out);
    let mut y = vec![0.0; rows * d_out];
    for r in 0..rows {
        y[r * d_out..(r + 1) * d_out].copy_from_slice(b.data());
    }
    matmul_acc(x, w.data(), rows, d_in, d_out, &mut y);
    y
}

/// Backward of `linear_fwd`: accumulates dw, db and returns dx.
pub fn linear_bwd(
    x: &[f64],
    w: &Tensor,
    dy: &[f64],
    rows: usize,
    dw: &mut Tensor,
    db: &mut Tensor,
) -> Vec<f64> {
    let (d_in, d_out) = (w.shape()[0], w.shape()[1]);
    matmul_at_acc(x, dy, rows, d_in, d_out, dw.data_mut());
    for r in 0..rows {
        let row = &dy[r * d_out..(r + 1) * d_out];
        for (g, &v) in db.data_mut().iter_mut().zip(row) {
            *g += v;
        }
    }
    let mut dx = vec![0.0; rows * d_in];
    matmul_bt(dy, w.data(), rows, d_out, d_in, &mut dx);
    dx
}

// ---------------------------------------------------------------------------
// LayerNorm
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct LayerNormParams {
    pub gain: Tensor,
    pub shift: Tensor,
}

impl LayerNormParams {
    pub fn new(dim: usize) -> Self {
        LayerNormParams {
            gain: Tensor::filled(&[dim], 1.0),
            shift: Tensor::zeros(&[dim]),
        }
    }

    pub fn zeros(dim: usize) -> Self {
        LayerNormParams {
            gain: Tensor::zeros(&[dim]),
            shift: Tensor::zeros(&[dim]),
        }
    }
}

pub struct LayerNormCache {
    /// Normalized rows before gain/shift.
    x_hat: Vec<f64>,
    inv_std: Vec<f64>,
}

pub fn layer_norm_fwd(p: &LayerNormParams, x: &[f64], rows: usize) -> (Vec<f64>, LayerNormCache) {
    let d = p.gain.len();
    debug_assert_eq!(x.len(), rows * d);
    let mut y = vec![0.0; rows * d];
    let mut x_hat = vec![0.0; rows * d];
    let mut inv_std = vec![0.0; rows];
    let gain = p.gain.data();
    let shift = p.shift.data();
    for r in 0..rows {
        let xin = &x[r * d..(r + 1) * d];
        let mean = xin.iter().sum::<f64>() / d as f64;
        let var = xin.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        inv_std[r] = inv;
        let xh = &mut x_hat[r * d..(r + 1) * d];
        let yr = &mut y[r * d..(r + 1) * d];
        for j in 0..d {
            let h = (xin[j] - mean) * inv;
            xh[j] = h;
            yr[j] = gain[j] * h + shift[j];
        }
    }
    (y, LayerNormCache { x_hat, inv_std })
}

pub fn layer_norm_bwd(
    p: &LayerNormParams,
    cache: &LayerNormCache,
    dy: &[f64],
    rows: usize,
    grads: &mut LayerNormParams,
) -> Vec<f64> {
    let d = p.gain.len();
    let gain = p.gain.data();
    let mut dx = vec![0.0; rows * d];
    let dgain = grads.gain.data_mut();
    let dshift = grads.shift.data_mut();
    for r in 0..rows {
        let dyr = &dy[r * d..(r + 1) * d];
        let xh = &cache.x_hat[r * d..(r + 1) * d];
        let inv = cache.inv_std[r];
        let mut sum_dxh = 0.0;
        let mut sum_dxh_xh = 0.0;
        for j in 0..d {
            dgain[j] += dyr[j] * xh[j];
            dshift[j] += dyr[j];
            let dxh = dyr[j] * gain[j];
            sum_dxh += dxh;
            sum_dxh_xh += dxh * xh[j];
        }
        let mean_dxh = sum_dxh / d as f64;
        let mean_dxh_xh = sum_dxh_xh / d as f64;
        let dxr = &mut dx[r * d..(r + 1) * d];
        for j in 0..d {
            let dxh = dyr[j] * gain[j];
            dxr[j] = inv * (dxh - mean_dxh - xh[j] * mean_dxh_xh);
        }
    }
    dx
}

// ---------------------------------------------------------------------------
// GELU (tanh form)
// ---------------------------------------------------------------------------

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let s = GELU_C * (x + GELU_A * x * x * x);
    let t = s.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

// ---------------------------------------------------------------------------
// Multi-head self-attention
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct AttnParams {
    pub wq: Tensor,
    pub bq: Tensor,
    pub wk: Tensor,
    pub bk: Tensor,
    pub wv: Tensor,
    pub bv: Tensor,
    pub wo: Tensor,
    pub bo: Tensor,
    pub n_heads: usize,
}

impl AttnParams {
    pub fn init(d_model: usize, n_heads: usize, rng: &mut RngStream) -> Self {
        assert!(n_heads >= 1 && d_model % n_heads == 0, "heads must divide d_model");
        let w = |rng: &mut RngStream| init_trunc_normal(&[d_model, d_model], rng);
        AttnParams {
            wq: w(rng),
            bq: Tensor::zeros(&[d_model]),
            wk: w(rng),
            bk: Tensor::zeros(&[d_model]),
            wv: w(rng),
            bv: Tensor::zeros(&[d_model]),
            wo: w(rng),
            bo: Tensor::zeros(&[d_model]),
            n_heads,
        }
    }

    pub fn zeros(d_model: usize, n_heads: usize) -> Self {
        AttnParams {
            wq: Tensor::zeros(&[d_model, d_model]),
            bq: Tensor::zeros(&[d_model]),
            wk: Tensor::zeros(&[d_model, d_model]),
            bk: Tensor::zeros(&[d_model]),
            wv: Tensor::zeros(&[d_model, d_model]),
            bv: Tensor::zeros(&[d_model]),
            wo: Tensor::zeros(&[d_model, d_model]),
            bo: Tensor::zeros(&[d_model]),
            n_heads,
        }
    }
}

pub struct AttnCache {
    x: Vec<f64>,
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    /// Softmax probabilities, [n, n_heads, t, t].
    probs: Vec<f64>,
    /// Concatenated head outputs before the O projection, [n, t, d].
    concat: Vec<f64>,
    n: usize,
    t: usize,
}

/// Copy head `h` of token matrix `src` ([t, d] within one sample) into a
/// contiguous [t, dh] buffer.
fn gather_head(src: &[f64], t: usize, d: usize, h: usize, dh: usize, out: &mut [f64]) {
    for i in 0..t {
        out[i * dh..(i + 1) * dh].copy_from_slice(&src[i * d + h * dh..i * d + (h + 1) * dh]);
    }
}

fn scatter_head_acc(src: &[f64], t: usize, d: usize, h: usize, dh: usize, out: &mut [f64]) {
    for i in 0..t {
        let dst = &mut out[i * d + h * dh..i * d + (h + 1) * dh];
        for (o, &s) in dst.iter_mut().zip(&src[i * dh..(i + 1) * dh]) {
            *o += s;
        }
    }
}

fn softmax_rows(x: &mut [f64], rows: usize, cols: usize) {
    for r in 0..rows {
        let row = &mut x[r * cols..(r + 1) * cols];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
}

/// Full bidirectional self-attention over `t` tokens per sample.
pub fn attn_fwd(p: &AttnParams, x: &[f64], n: usize, t: usize) -> (Vec<f64>, AttnCache) {
    let d = p.wq.shape()[0];
    let nh = p.n_heads;
    let dh = d / nh;
    let rows = n * t;
    let scale = 1.0 / (dh as f64).sqrt();

    let q = linear_fwd(x, &p.wq, &p.bq, rows);
    let k = linear_fwd(x, &p.wk, &p.bk, rows);
    let v = linear_fwd(x, &p.wv, &p.bv, rows);

    let mut probs = vec![0.0; n * nh * t * t];
    let mut concat = vec![0.0; rows * d];
    let mut qh = vec![0.0; t * dh];
    let mut kh = vec![0.0; t * dh];
    let mut vh = vec![0.0; t * dh];
    let mut oh = vec![0.0; t * dh];

    for b in 0..n {
        let tok = b * t * d;
        for h in 0..nh {
            gather_head(&q[tok..tok + t * d], t, d, h, dh, &mut qh);
            gather_head(&k[tok..tok + t * d], t, d, h, dh, &mut kh);
            gather_head(&v[tok..tok + t * d], t, d, h, dh, &mut vh);

            let pslice = &mut probs[(b * nh + h) * t * t..(b * nh + h + 1) * t * t];
            matmul_bt(&qh, &kh, t, dh, t, pslice);
            pslice.iter_mut().for_each(|s| *s *= scale);
            softmax_rows(pslice, t, t);

            matmul(pslice, &vh, t, t, dh, &mut oh);
            scatter_head_acc(&oh, t, d, h, dh, &mut concat[tok..tok + t * d]);
        }
    }

    let y = linear_fwd(&concat, &p.wo, &p.bo, rows);
    let cache = AttnCache {
        x: x.to_vec(),
        q,
        k,
        v,
        probs,
        concat,
        n,
        t,
    };
    (y, cache)
}

pub fn attn_bwd(
    p: &AttnParams,
    cache: &AttnCache,
    dy: &[f64],
    grads: &mut AttnParams,
) -> Vec<f64> {
    let d = p.wq.shape()[0];
    let nh = p.n_heads;
    let dh = d / nh;
    let (n, t) = (cache.n, cache.t);
    let rows = n * t;
    let scale = 1.0 / (dh as f64).sqrt();

    let dconcat = linear_bwd(&cache.concat, &p.wo, dy, rows, &mut grads.wo, &mut grads.bo);

    let mut dq = vec![0.0; rows * d];
    let mut dk = vec![0.0; rows * d];
    let mut dv = vec![0.0; rows * d];

    let mut qh = vec![0.0; t * dh];
    let mut kh = vec![0.0; t * dh];
    let mut vh = vec![0.0; t * dh];
    let mut doh = vec![0.0; t * dh];
    let mut dph = vec![0.0; t * t];
    let mut dsh = vec![0.0; t * t];
    let mut dqh = vec![0.0; t * dh];
    let mut dkh = vec![0.0; t * dh];
    let mut dvh = vec![0.0; t * dh];

    for b in 0..n {
        let tok = b * t * d;
        for h in 0..nh {
            gather_head(&cache.q[tok..tok + t * d], t, d, h, dh, &mut qh);
            gather_head(&cache.k[tok..tok + t * d], t, d, h, dh, &mut kh);
            gather_head(&cache.v[tok..tok + t * d], t, d, h, dh, &mut vh);
            gather_head(&dconcat[tok..tok + t * d], t, d, h, dh, &mut doh);

            let pslice = &cache.probs[(b * nh + h) * t * t..(b * nh + h + 1) * t * t];

            // dP = dO V^T ; dV = P^T dO
            matmul_bt(&doh, &vh, t, dh, t, &mut dph);
            dvh.iter_mut().for_each(|x| *x = 0.0);
            matmul_at_acc(pslice, &doh, t, t, dh, &mut dvh);

            // Softmax backward per row: dS = P o (dP - rowsum(P o dP)).
            for i in 0..t {
                let prow = &pslice[i * t..(i + 1) * t];
                let dprow = &dph[i * t..(i + 1) * t];
                let srow = &mut dsh[i * t..(i + 1) * t];
                let inner = dot(prow, dprow);
                for j in 0..t {
                    srow[j] = prow[j] * (dprow[j] - inner) * scale;
                }
            }

            // dQ = dS K ; dK = dS^T Q
            matmul(&dsh, &kh, t, t, dh, &mut dqh);
            dkh.iter_mut().for_each(|x| *x = 0.0);
            matmul_at_acc(&dsh, &qh, t, t, dh, &mut dkh);

            scatter_head_acc(&dqh, t, d, h, dh, &mut dq[tok..tok + t * d]);
            scatter_head_acc(&dkh, t, d, h, dh, &mut dk[tok..tok + t * d]);
            scatter_head_acc(&dvh, t, d, h, dh, &mut dv[tok..tok + t * d]);
        }
    }

    let mut dx = linear_bwd(&cache.x, &p.wq, &dq, rows, &mut grads.wq, &mut grads.bq);
    let dx_k = linear_bwd(&cache.x, &p.wk, &dk, rows, &mut grads.wk, &mut grads.bk);
    let dx_v = linear_bwd(&cache.x, &p.wv, &dv, rows, &mut grads.wv, &mut grads.bv);
    for ((a, b), c) in dx.iter_mut().zip(&dx_k).zip(&dx_v) {
        *a += b + c;
    }
    dx
}

// ---------------------------------------------------------------------------
// GELU MLP
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct MlpParams {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

impl MlpParams {
    pub fn init(d_model: usize, d_ff: usize, rng: &mut RngStream) -> Self {
        MlpParams {
            w1: init_trunc_normal(&[d_model, d_ff], rng),
            b1: Tensor::zeros(&[d_ff]),
            w2: init_trunc_normal(&[d_ff, d_model], rng),
            b2: Tensor::zeros(&[d_model]),
        }
    }

    pub fn zeros(d_model: usize, d_ff: usize) -> Self {
        MlpParams {
            w1: Tensor::zeros(&[d_model, d_ff]),
            b1: Tensor::zeros(&[d_ff]),
            w2: Tensor::zeros(&[d_ff, d_model]),
            b2: Tensor::zeros(&[d_model]),
        }
    }
}

pub struct MlpCache {
    x: Vec<f64>,
    pre_act: Vec<f64>,
    act: Vec<f64>,
}

pub fn mlp_fwd(p: &MlpParams, x: &[f64], rows: usize) -> (Vec<f64>, MlpCache) {
    let pre_act = linear_fwd(x, &p.w1, &p.b1, rows);
    let act: Vec<f64> = pre_act.iter().map(|&v| gelu(v)).collect();
    let y = linear_fwd(&act, &p.w2, &p.b2, rows);
    (
        y,
        MlpCache {
            x: x.to_vec(),
            pre_act,
            act,
        },
    )
}

pub fn mlp_bwd(
    p: &MlpParams,
    cache: &MlpCache,
    dy: &[f64],
    rows: usize,
    grads: &mut MlpParams,
) -> Vec<f64> {
    let mut dact = linear_bwd(&cache.act, &p.w2, dy, rows, &mut grads.w2, &mut grads.b2);
    for (g, &pre) in dact.iter_mut().zip(&cache.pre_act) {
        *g *= gelu_grad(pre);
    }
    linear_bwd(&cache.x, &p.w1, &dact, rows, &mut grads.w1, &mut grads.b1)
}

// ---------------------------------------------------------------------------
// Transformer block: LN -> MHA -> residual -> LN -> MLP -> residual
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct BlockParams {
    pub ln1: LayerNormParams,
    pub attn: AttnParams,
    pub ln2: LayerNormParams,
    pub mlp: MlpParams,
}

impl BlockParams {
    pub fn init(d_model: usize, n_heads: usize, d_ff: usize, rng: &mut RngStream) -> Self {
        BlockParams {
            ln1: LayerNormParams::new(d_model),
            attn: AttnParams::init(d_model, n_heads, rng),
            ln2: LayerNormParams::new(d_model),
            mlp: MlpParams::init(d_model, d_ff, rng),
        }
    }

    pub fn zeros_like(&self) -> Self {
        let d = self.ln1.gain.len();
        let d_ff = self.mlp.b1.len();
        BlockParams {
            ln1: LayerNormParams::zeros(d),
            attn: AttnParams::zeros(d, self.attn.n_heads),
            ln2: LayerNormParams::zeros(d),
            mlp: MlpParams::zeros(d, d_ff),
        }
    }

    pub fn d_model(&self) -> usize {
        self.ln1.gain.len()
    }

    pub fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        f(format!("{prefix}.ln1.g"), &self.ln1.gain);
        f(format!("{prefix}.ln1.b"), &self.ln1.shift);
        f(format!("{prefix}.attn.wq"), &self.attn.wq);
        f(format!("{prefix}.attn.bq"), &self.attn.bq);
        f(format!("{prefix}.attn.wk"), &self.attn.wk);
        f(format!("{prefix}.attn.bk"), &self.attn.bk);
        f(format!("{prefix}.attn.wv"), &self.attn.wv);
        f(format!("{prefix}.attn.bv"), &self.attn.bv);
        f(format!("{prefix}.attn.wo"), &self.attn.wo);
        f(format!("{prefix}.attn.bo"), &self.attn.bo);
        f(format!("{prefix}.ln2.g"), &self.ln2.gain);
        f(format!("{prefix}.ln2.b"), &self.ln2.shift);
        f(format!("{prefix}.mlp.w1"), &self.mlp.w1);
        f(format!("{prefix}.mlp.b1"), &self.mlp.b1);
        f(format!("{prefix}.mlp.w2"), &self.mlp.w2);
        f(format!("{prefix}.mlp.b2"), &self.mlp.b2);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        f(format!("{prefix}.ln1.g"), &mut self.ln1.gain);
        f(format!("{prefix}.ln1.b"), &mut self.ln1.shift);
        f(format!("{prefix}.attn.wq"), &mut self.attn.wq);
        f(format!("{prefix}.attn.bq"), &mut self.attn.bq);
        f(format!("{prefix}.attn.wk"), &mut self.attn.wk);
        f(format!("{prefix}.attn.bk"), &mut self.attn.bk);
        f(format!("{prefix}.attn.wv"), &mut self.attn.wv);
        f(format!("{prefix}.attn.bv"), &mut self.attn.bv);
        f(format!("{prefix}.attn.wo"), &mut self.attn.wo);
        f(format!("{prefix}.attn.bo"), &mut self.attn.bo);
        f(format!("{prefix}.ln2.g"), &mut self.ln2.gain);
        f(format!("{prefix}.ln2.b"), &mut self.ln2.shift);
        f(format!("{prefix}.mlp.w1"), &mut self.mlp.w1);
        f(format!("{prefix}.mlp.b1"), &mut self.mlp.b1);
        f(format!("{prefix}.mlp.w2"), &mut self.mlp.w2);
        f(format!("{prefix}.mlp.b2"), &mut self.mlp.b2);
    }
}

pub struct BlockCache {
    ln1: LayerNormCache,
    attn: AttnCache,
    ln2: LayerNormCache,
    mlp: MlpCache,
    mid: Vec<f64>,
}

pub fn block_fwd(p: &BlockParams, x: &[f64], n: usize, t: usize) -> (Vec<f64>, BlockCache) {
    let rows = n * t;
    let (h1, ln1_cache) = layer_norm_fwd(&p.ln1, x, rows);
    let (a, attn_cache) = attn_fwd(&p.attn, &h1, n, t);
    let mid: Vec<f64> = x.iter().zip(&a).map(|(xv, av)| xv + av).collect();
    let (h2, ln2_cache) = layer_norm_fwd(&p.ln2, &mid, rows);
    let (m, mlp_cache) = mlp_fwd(&p.mlp, &h2, rows);
    let y: Vec<f64> = mid.iter().zip(&m).map(|(xv, mv)| xv + mv).collect();
    (
        y,
        BlockCache {
            ln1: ln1_cache,
            attn: attn_cache,
            ln2: ln2_cache,
            mlp: mlp_cache,
            mid,
        },
    )
}

pub fn block_bwd(
    p: &BlockParams,
    cache: &BlockCache,
    dy: &[f64],
    n: usize,
    t: usize,
    grads: &mut BlockParams,
) -> Vec<f64> {
    let rows = n * t;
    let dh2 = mlp_bwd(&p.mlp, &cache.mlp, dy, rows, &mut grads.mlp);
    let mut dmid = layer_norm_bwd(&p.ln2, &cache.ln2, &dh2, rows, &mut grads.ln2);
    for (g, &d) in dmid.iter_mut().zip(dy) {
        *g += d;
    }
    let dh1 = attn_bwd(&p.attn, &cache.attn, &dmid, &mut grads.attn);
    let mut dx = layer_norm_bwd(&p.ln1, &cache.ln1, &dh1, rows, &mut grads.ln1);
    for (g, &d) in dx.iter_mut().zip(&dmid) {
        *g += d;
    }
    let _ = &cache.mid;
    dx
}

// ---------------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------------

/// Mean softmax cross-entropy over a batch of logits [n, c].
/// Returns the loss and dlogits.
pub fn softmax_cross_entropy(logits: &[f64], labels: &[usize], n: usize, c: usize) -> (f64, Vec<f64>) {
    debug_assert_eq!(logits.len(), n * c);
    debug_assert_eq!(labels.len(), n);
    let mut loss = 0.0;
    let mut dlogits = vec![0.0; n * c];
    let inv_n = 1.0 / n as f64;
    for i in 0..n {
        let row = &logits[i * c..(i + 1) * c];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for &v in row {
            sum += (v - max).exp();
        }
        let lse = max + sum.ln();
        loss += (lse - row[labels[i]]) * inv_n;
        let drow = &mut dlogits[i * c..(i + 1) * c];
        for (j, &v) in row.iter().enumerate() {
            drow[j] = ((v - lse).exp() - if j == labels[i] { 1.0 } else { 0.0 }) * inv_n;
        }
    }
    (loss, dlogits)
}

/// 1/2 mean squared error over the entries selected by `select`.
/// Returns the loss and d(pred).
pub fn half_mse_selected(
    pred: &[f64],
    target: &[f64],
    select: impl Fn(usize) -> bool,
    count: usize,
) -> (f64, Vec<f64>) {
    debug_assert_eq!(pred.len(), target.len());
    debug_assert!(count > 0);
    let inv = 1.0 / count as f64;
    let mut loss = 0.0;
    let mut dpred = vec![0.0; pred.len()];
    for i in 0..pred.len() {
        if select(i) {
            let diff = pred[i] - target[i];
            loss += 0.5 * diff * diff * inv;
            dpred[i] = diff * inv;
        }
    }
    (loss, dpred)
}

/// Argmax with ties broken toward the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

// ---------------------------------------------------------------------------
// Gradient-check adapters for single layers
// ---------------------------------------------------------------------------

/// Copy a visited parameter struct into a ParamStore (values only).
pub fn block_to_store(block: &BlockParams, grads: &BlockParams, prefix: &str) -> ParamStore {
    let mut store = ParamStore::new();
    block.visit(prefix, &mut |name, t| {
        store.insert(&name, t.clone());
    });
    grads.visit(prefix, &mut |name, t| {
        *store.grad_mut(&name) = t.clone();
    });
    store
}

/// Load values from a ParamStore back into a block parameter struct.
pub fn block_from_store(block: &mut BlockParams, store: &ParamStore, prefix: &str) {
    block.visit_mut(prefix, &mut |name, t| {
        *t = store.value(&name).clone();
    });
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::grad_check;

    fn rand_vec(len: usize, rng: &mut RngStream) -> Vec<f64> {
        let mut v = vec![0.0; len];
        rng.fill_normal(&mut v, 0.0, 1.0);
        v
    }

    #[test]
    fn gelu_matches_numeric_grad() {
        for &x in &[-3.0, -0.5, 0.0, 0.7, 2.5] {
            let h = 1e-6;
            let numeric = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((gelu_grad(x) - numeric).abs() < 1e-8, "x={x}");
        }
        assert_eq!(gelu(0.0), 0.0);
    }

    #[test]
    fn softmax_ce_grads_sum_to_zero() {
        let mut rng = RngStream::new(2);
        let logits = rand_vec(12, &mut rng);
        let (loss, d) = softmax_cross_entropy(&logits, &[1, 0, 3], 3, 4);
        assert!(loss > 0.0);
        for i in 0..3 {
            let row_sum: f64 = d[i * 4..(i + 1) * 4].iter().sum();
            assert!(row_sum.abs() < 1e-12);
        }
    }

    #[test]
    fn attention_zero_input_zero_bias_gives_zero() {
        let mut rng = RngStream::new(3);
        let mut p = AttnParams::init(8, 2, &mut rng);
        p.bq.fill(0.0);
        p.bk.fill(0.0);
        p.bv.fill(0.0);
        p.bo.fill(0.0);
        let x = vec![0.0; 2 * 3 * 8];
        let (y, _) = attn_fwd(&p, &x, 2, 3);
        assert!(y.iter().all(|&v| v == 0.0));
    }

    // Full-block gradient check at tiny dims: every parameter of every layer
    // in the vocabulary (LN, attention, MLP) against central differences.
    #[test]
    fn block_grad_check() {
        let mut rng = RngStream::new(7);
        let (n, t, d, nh, dff) = (2, 3, 8, 2, 16);
        let block = BlockParams::init(d, nh, dff, &mut rng);
        let x = rand_vec(n * t * d, &mut rng);
        let target = rand_vec(n * t * d, &mut rng);

        let loss_of = |b: &BlockParams| -> f64 {
            let (y, _) = block_fwd(b, &x, n, t);
            let (loss, _) = half_mse_selected(&y, &target, |_| true, y.len());
            loss
        };

        let (y, cache) = block_fwd(&block, &x, n, t);
        let (_, dy) = half_mse_selected(&y, &target, |_| true, y.len());
        let mut grads = block.zeros_like();
        block_bwd(&block, &cache, &dy, n, t, &mut grads);

        let mut store = block_to_store(&block, &grads, "blk");
        let report = grad_check(
            &mut store,
            |s| {
                let mut b = block.clone();
                block_from_store(&mut b, s, "blk");
                Ok(loss_of(&b))
            },
            1e-4,
        )
        .unwrap();
        assert!(
            report.pass(),
            "worst {:?} max {}",
            report.worst(),
            report.max_rel_err
        );
    }

    #[test]
    fn layer_norm_grad_check_tight() {
        let mut rng = RngStream::new(9);
        let (rows, d) = (4, 6);
        let p = LayerNormParams::new(d);
        let x = rand_vec(rows * d, &mut rng);
        let target = rand_vec(rows * d, &mut rng);

        let (y, cache) = layer_norm_fwd(&p, &x, rows);
        let (_, dy) = half_mse_selected(&y, &target, |_| true, y.len());
        let mut grads = LayerNormParams::zeros(d);
        layer_norm_bwd(&p, &cache, &dy, rows, &mut grads);

        let mut store = ParamStore::new();
        store.insert("g", p.gain.clone());
        store.insert("b", p.shift.clone());
        *store.grad_mut("g") = grads.gain.clone();
        *store.grad_mut("b") = grads.shift.clone();
        let report = grad_check(
            &mut store,
            |s| {
                let p2 = LayerNormParams {
                    gain: s.value("g").clone(),
                    shift: s.value("b").clone(),
                };
                let (y2, _) = layer_norm_fwd(&p2, &x, rows);
                let (loss, _) = half_mse_selected(&y2, &target, |_| true, y2.len());
                Ok(loss)
            },
            1e-6,
        )
        .unwrap();
        assert!(report.pass(), "max {}", report.max_rel_err);
    }

    #[test]
    fn block_input_grad_matches_numeric() {
        let mut rng = RngStream::new(11);
        let (n, t, d, nh, dff) = (1, 2, 4, 2, 8);
        let block = BlockParams::init(d, nh, dff, &mut rng);
        let x = rand_vec(n * t * d, &mut rng);
        let target = rand_vec(n * t * d, &mut rng);

        let (y, cache) = block_fwd(&block, &x, n, t);
        let (_, dy) = half_mse_selected(&y, &target, |_| true, y.len());
        let mut grads = block.zeros_like();
        let dx = block_bwd(&block, &cache, &dy, n, t, &mut grads);

        for i in 0..x.len() {
            let mut xp = x.clone();
            let h = 1e-6 * (1.0 + x[i].abs());
            xp[i] = x[i] + h;
            let (yp, _) = block_fwd(&block, &xp, n, t);
            let (lp, _) = half_mse_selected(&yp, &target, |_| true, yp.len());
            xp[i] = x[i] - h;
            let (ym, _) = block_fwd(&block, &xp, n, t);
            let (lm, _) = half_mse_selected(&ym, &target, |_| true, ym.len());
            let numeric = (lp - lm) / (2.0 * h);
            assert!(
                (dx[i] - numeric).abs() / (dx[i].abs() + numeric.abs()).max(1e-6) < 1e-4,
                "i={i} analytic={} numeric={}",
                dx[i],
                numeric
            );
        }
    }

    #[test]
    fn argmax_breaks_ties_low() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0, 2.0]), 1);
        assert_eq!(argmax(&[5.0]), 0);
    }
}
