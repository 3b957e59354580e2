//! Network layers with explicit forward/backward passes. Every forward
//! returns the activations the matching backward needs; backward accumulates
//! parameter gradients into a mirror of the parameter struct and returns the
//! gradient with respect to the layer input.

use crate::scalar::Scalar;
use crate::tensor::{axpy, dot, softmax_in_place, Mat};

pub const LN_EPS: f64 = 1e-5;

// --- linear -------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct LinearParams<S> {
    /// (out × in)
    pub w: Mat<S>,
    /// (1 × out)
    pub b: Mat<S>,
}

impl<S: Scalar> LinearParams<S> {
    pub fn zeros(out_dim: usize, in_dim: usize) -> Self {
        LinearParams { w: Mat::zeros(out_dim, in_dim), b: Mat::zeros(1, out_dim) }
    }
}

pub fn linear_forward<S: Scalar>(p: &LinearParams<S>, x: &Mat<S>) -> Mat<S> {
    let mut y = x.matmul_nt(&p.w);
    for r in 0..y.rows {
        for (o, &b) in y.row_mut(r).iter_mut().zip(p.b.row(0)) {
            *o += b;
        }
    }
    y
}

pub fn linear_backward<S: Scalar>(
    p: &LinearParams<S>,
    x: &Mat<S>,
    dy: &Mat<S>,
    grads: &mut LinearParams<S>,
) -> Mat<S> {
    // dw[o][i] += sum_r dy[r][o] * x[r][i]
    dy.accumulate_tn(x, &mut grads.w);
    for r in 0..dy.rows {
        for (g, &d) in grads.b.row_mut(0).iter_mut().zip(dy.row(r)) {
            *g += d;
        }
    }
    dy.matmul_nn(&p.w)
}

// --- layer norm ---------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNormParams<S> {
    pub gain: Mat<S>,
    pub bias: Mat<S>,
}

impl<S: Scalar> LayerNormParams<S> {
    pub fn identity(dim: usize) -> Self {
        let mut gain = Mat::zeros(1, dim);
        gain.data.iter_mut().for_each(|v| *v = S::ONE);
        LayerNormParams { gain, bias: Mat::zeros(1, dim) }
    }
}

pub struct LayerNormCache<S> {
    /// normalized activations, pre gain/bias
    xhat: Mat<S>,
    inv_std: Vec<S>,
}

pub fn layer_norm_forward<S: Scalar>(
    p: &LayerNormParams<S>,
    x: &Mat<S>,
) -> (Mat<S>, LayerNormCache<S>) {
    let d = x.cols;
    let inv_d = S::from_f64(1.0 / d as f64);
    let eps = S::from_f64(LN_EPS);
    let mut y = Mat::zeros(x.rows, d);
    let mut xhat = Mat::zeros(x.rows, d);
    let mut inv_std = Vec::with_capacity(x.rows);
    for r in 0..x.rows {
        let row = x.row(r);
        let mut mean = S::ZERO;
        for &v in row {
            mean += v;
        }
        mean *= inv_d;
        let mut var = S::ZERO;
        for &v in row {
            let c = v - mean;
            var += c * c;
        }
        var *= inv_d;
        let inv = S::ONE / (var + eps).sqrt();
        inv_std.push(inv);
        let xhat_row = xhat.row_mut(r);
        for (h, &v) in xhat_row.iter_mut().zip(row) {
            *h = (v - mean) * inv;
        }
        let y_row = y.row_mut(r);
        for ((o, &h), (&g, &b)) in
            y_row.iter_mut().zip(xhat_row.iter()).zip(p.gain.row(0).iter().zip(p.bias.row(0)))
        {
            *o = g * h + b;
        }
    }
    (y, LayerNormCache { xhat, inv_std })
}

pub fn layer_norm_backward<S: Scalar>(
    p: &LayerNormParams<S>,
    cache: &LayerNormCache<S>,
    dy: &Mat<S>,
    grads: &mut LayerNormParams<S>,
) -> Mat<S> {
    let d = dy.cols;
    let inv_d = S::from_f64(1.0 / d as f64);
    let mut dx = Mat::zeros(dy.rows, d);
    for r in 0..dy.rows {
        let dy_row = dy.row(r);
        let xhat_row = cache.xhat.row(r);
        for ((g, &dyv), &h) in grads.gain.row_mut(0).iter_mut().zip(dy_row).zip(xhat_row) {
            *g += dyv * h;
        }
        for (g, &dyv) in grads.bias.row_mut(0).iter_mut().zip(dy_row) {
            *g += dyv;
        }
        // dxhat = dy * gain; dx = inv_std * (dxhat - mean(dxhat) - xhat * mean(dxhat ⊙ xhat))
        let mut mean_dxhat = S::ZERO;
        let mut mean_dxhat_xhat = S::ZERO;
        for ((&dyv, &g), &h) in dy_row.iter().zip(p.gain.row(0)).zip(xhat_row) {
            let dh = dyv * g;
            mean_dxhat += dh;
            mean_dxhat_xhat += dh * h;
        }
        mean_dxhat *= inv_d;
        mean_dxhat_xhat *= inv_d;
        let inv = cache.inv_std[r];
        let dx_row = dx.row_mut(r);
        for (((o, &dyv), &g), &h) in
            dx_row.iter_mut().zip(dy_row).zip(p.gain.row(0)).zip(xhat_row)
        {
            let dh = dyv * g;
            *o = inv * (dh - mean_dxhat - h * mean_dxhat_xhat);
        }
    }
    dx
}

// --- multi-head attention -------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct MhaParams<S> {
    pub wq: LinearParams<S>,
    pub wk: LinearParams<S>,
    pub wv: LinearParams<S>,
    pub wo: LinearParams<S>,
}

impl<S: Scalar> MhaParams<S> {
    pub fn zeros(d: usize) -> Self {
        MhaParams {
            wq: LinearParams::zeros(d, d),
            wk: LinearParams::zeros(d, d),
            wv: LinearParams::zeros(d, d),
            wo: LinearParams::zeros(d, d),
        }
    }
}

pub struct MhaCache<S> {
    q: Mat<S>,
    k: Mat<S>,
    v: Mat<S>,
    /// softmax matrices, one per head (Lq × Lk); masked entries are zero
    probs: Vec<Mat<S>>,
    ctx: Mat<S>,
}

/// Scaled dot-product attention over `n_heads` column slices. When `causal`
/// is set, query row i may attend to key positions `<= i + q_offset`
/// (`q_offset` is the number of already-cached positions during incremental
/// decoding; it is 0 in training).
pub fn mha_forward<S: Scalar>(
    p: &MhaParams<S>,
    x_q: &Mat<S>,
    x_kv: &Mat<S>,
    n_heads: usize,
    causal: bool,
    q_offset: usize,
) -> (Mat<S>, MhaCache<S>) {
    let d = x_q.cols;
    let dh = d / n_heads;
    let scale = S::from_f64(1.0 / (dh as f64).sqrt());
    let q = linear_forward(&p.wq, x_q);
    let k = linear_forward(&p.wk, x_kv);
    let v = linear_forward(&p.wv, x_kv);
    let lq = q.rows;
    let lk = k.rows;
    let mut ctx = Mat::zeros(lq, d);
    let mut probs = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let lo = h * dh;
        let hi = lo + dh;
        let mut prob = Mat::zeros(lq, lk);
        for i in 0..lq {
            let limit = if causal { (i + q_offset + 1).min(lk) } else { lk };
            debug_assert!(limit > 0, "attention over empty memory");
            let q_row = &q.row(i)[lo..hi];
            let prob_row = prob.row_mut(i);
            for (j, pv) in prob_row.iter_mut().enumerate().take(limit) {
                *pv = scale * dot(q_row, &k.row(j)[lo..hi]);
            }
            softmax_in_place(&mut prob_row[..limit]);
            // rows beyond `limit` stay exactly zero
            let ctx_row = &mut ctx.row_mut(i)[lo..hi];
            for (j, &pv) in prob_row.iter().enumerate().take(limit) {
                axpy(pv, &v.row(j)[lo..hi], ctx_row);
            }
        }
        probs.push(prob);
    }
    let out = linear_forward(&p.wo, &ctx);
    (out, MhaCache { q, k, v, probs, ctx })
}

/// Returns (dx_q, dx_kv).
pub fn mha_backward<S: Scalar>(
    p: &MhaParams<S>,
    x_q: &Mat<S>,
    x_kv: &Mat<S>,
    cache: &MhaCache<S>,
    n_heads: usize,
    dout: &Mat<S>,
    grads: &mut MhaParams<S>,
) -> (Mat<S>, Mat<S>) {
    let d = x_q.cols;
    let dh = d / n_heads;
    let scale = S::from_f64(1.0 / (dh as f64).sqrt());
    let dctx = linear_backward(&p.wo, &cache.ctx, dout, &mut grads.wo);
    let lq = cache.q.rows;
    let lk = cache.k.rows;
    let mut dq = Mat::zeros(lq, d);
    let mut dk = Mat::zeros(lk, d);
    let mut dv = Mat::zeros(lk, d);
    for h in 0..n_heads {
        let lo = h * dh;
        let hi = lo + dh;
        let prob = &cache.probs[h];
        for i in 0..lq {
            let dctx_row = &dctx.row(i)[lo..hi];
            let prob_row = prob.row(i);
            // dP and dV; masked entries have prob 0 and contribute nothing
            let mut dprob = vec![S::ZERO; lk];
            for j in 0..lk {
                let pv = prob_row[j];
                if pv == S::ZERO {
                    continue;
                }
                dprob[j] = dot(dctx_row, &cache.v.row(j)[lo..hi]);
                axpy(pv, dctx_row, &mut dv.row_mut(j)[lo..hi]);
            }
            // softmax backward: ds = P ⊙ (dP − Σ dP⊙P)
            let mut inner = S::ZERO;
            for (j, &dp) in dprob.iter().enumerate() {
                inner += dp * prob_row[j];
            }
            let dq_row = &mut dq.row_mut(i)[lo..hi];
            for (j, &dp) in dprob.iter().enumerate() {
                let pv = prob_row[j];
                if pv == S::ZERO {
                    continue;
                }
                let ds = pv * (dp - inner) * scale;
                axpy(ds, &cache.k.row(j)[lo..hi], dq_row);
                axpy(ds, &cache.q.row(i)[lo..hi], &mut dk.row_mut(j)[lo..hi]);
            }
        }
    }
    let dx_q = linear_backward(&p.wq, x_q, &dq, &mut grads.wq);
    let mut dx_kv = linear_backward(&p.wk, x_kv, &dk, &mut grads.wk);
    let dx_kv2 = linear_backward(&p.wv, x_kv, &dv, &mut grads.wv);
    dx_kv.add_assign(&dx_kv2);
    (dx_q, dx_kv)
}

// --- dynamic convolution ---------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct DynConvParams<S> {
    /// predicts per-head kernel logits from the current position: (H·k × d)
    pub kern: LinearParams<S>,
    pub wo: LinearParams<S>,
}

impl<S: Scalar> DynConvParams<S> {
    pub fn zeros(d: usize, n_heads: usize, kernel: usize) -> Self {
        DynConvParams {
            kern: LinearParams::zeros(n_heads * kernel, d),
            wo: LinearParams::zeros(d, d),
        }
    }
}

pub struct DynConvCache<S> {
    /// softmaxed kernel weights, (L × H·k)
    weights: Mat<S>,
    /// pre-output-projection mix
    mixed: Mat<S>,
}

/// Causal depthwise dynamic convolution: position t's kernel weights are a
/// softmaxed linear projection of x_t (per head, over the k-lag window), the
/// output mixes x_{t-j} for j < k with left zero padding, then an output
/// projection follows. Never reads positions > t.
pub fn dyn_conv_forward<S: Scalar>(
    p: &DynConvParams<S>,
    x: &Mat<S>,
    n_heads: usize,
    kernel: usize,
) -> (Mat<S>, DynConvCache<S>) {
    let d = x.cols;
    let dh = d / n_heads;
    let l = x.rows;
    let mut weights = linear_forward(&p.kern, x);
    for t in 0..l {
        let row = weights.row_mut(t);
        for h in 0..n_heads {
            softmax_in_place(&mut row[h * kernel..(h + 1) * kernel]);
        }
    }
    let mut mixed = Mat::zeros(l, d);
    for t in 0..l {
        let w_row = weights.row(t);
        for h in 0..n_heads {
            let lo = h * dh;
            let hi = lo + dh;
            let mix = &mut mixed.row_mut(t)[lo..hi];
            for j in 0..kernel.min(t + 1) {
                axpy(w_row[h * kernel + j], &x.row(t - j)[lo..hi], mix);
            }
        }
    }
    let out = linear_forward(&p.wo, &mixed);
    (out, DynConvCache { weights, mixed })
}

pub fn dyn_conv_backward<S: Scalar>(
    p: &DynConvParams<S>,
    x: &Mat<S>,
    cache: &DynConvCache<S>,
    n_heads: usize,
    kernel: usize,
    dout: &Mat<S>,
    grads: &mut DynConvParams<S>,
) -> Mat<S> {
    let d = x.cols;
    let dh = d / n_heads;
    let l = x.rows;
    let dmixed = linear_backward(&p.wo, &cache.mixed, dout, &mut grads.wo);
    let mut dx = Mat::zeros(l, d);
    let mut dlogits = Mat::zeros(l, n_heads * kernel);
    for t in 0..l {
        let w_row = cache.weights.row(t);
        let dmix_full = dmixed.row(t);
        for h in 0..n_heads {
            let lo = h * dh;
            let hi = lo + dh;
            let dmix = &dmix_full[lo..hi];
            let mut dw = vec![S::ZERO; kernel];
            for (j, dwj) in dw.iter_mut().enumerate().take(kernel.min(t + 1)) {
                *dwj = dot(dmix, &x.row(t - j)[lo..hi]);
                axpy(w_row[h * kernel + j], dmix, &mut dx.row_mut(t - j)[lo..hi]);
            }
            // out-of-range lags saw zero vectors: dw stays 0 but the softmax
            // still normalized over them
            let probs = &w_row[h * kernel..(h + 1) * kernel];
            let mut inner = S::ZERO;
            for (j, &dwj) in dw.iter().enumerate() {
                inner += dwj * probs[j];
            }
            let dlog = &mut dlogits.row_mut(t)[h * kernel..(h + 1) * kernel];
            for (j, o) in dlog.iter_mut().enumerate() {
                *o = probs[j] * (dw[j] - inner);
            }
        }
    }
    let dx_kern = linear_backward(&p.kern, x, &dlogits, &mut grads.kern);
    dx.add_assign(&dx_kern);
    dx
}

// --- feed-forward ----------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct FfParams<S> {
    pub w1: LinearParams<S>,
    pub w2: LinearParams<S>,
}

impl<S: Scalar> FfParams<S> {
    pub fn zeros(d: usize, hidden: usize) -> Self {
        FfParams { w1: LinearParams::zeros(hidden, d), w2: LinearParams::zeros(d, hidden) }
    }
}

pub struct FfCache<S> {
    pre: Mat<S>,
    act: Mat<S>,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

fn gelu<S: Scalar>(x: S) -> S {
    let c = S::from_f64(GELU_C);
    let a = S::from_f64(GELU_A);
    let half = S::from_f64(0.5);
    half * x * (S::ONE + (c * (x + a * x.powi(3))).tanh())
}

fn gelu_grad<S: Scalar>(x: S) -> S {
    let c = S::from_f64(GELU_C);
    let a = S::from_f64(GELU_A);
    let half = S::from_f64(0.5);
    let u = c * (x + a * x.powi(3));
    let t = u.tanh();
    let sech2 = S::ONE - t * t;
    half * (S::ONE + t) + half * x * sech2 * c * (S::ONE + S::from_f64(3.0) * a * x.powi(2))
}

pub fn ff_forward<S: Scalar>(p: &FfParams<S>, x: &Mat<S>) -> (Mat<S>, FfCache<S>) {
    let pre = linear_forward(&p.w1, x);
    let mut act = pre.clone();
    act.data.iter_mut().for_each(|v| *v = gelu(*v));
    let out = linear_forward(&p.w2, &act);
    (out, FfCache { pre, act })
}

pub fn ff_backward<S: Scalar>(
    p: &FfParams<S>,
    x: &Mat<S>,
    cache: &FfCache<S>,
    dout: &Mat<S>,
    grads: &mut FfParams<S>,
) -> Mat<S> {
    let mut dact = linear_backward(&p.w2, &cache.act, dout, &mut grads.w2);
    for (da, &z) in dact.data.iter_mut().zip(&cache.pre.data) {
        *da *= gelu_grad(z);
    }
    linear_backward(&p.w1, x, &dact, &mut grads.w1)
}

// --- positions ---------------------------------------------------------------------

/// Sinusoidal position table (max_len × d).
pub fn sinusoid_table<S: Scalar>(max_len: usize, d: usize) -> Mat<S> {
    let mut table = Mat::zeros(max_len, d);
    for pos in 0..max_len {
        for i in 0..d {
            let exponent = (2 * (i / 2)) as f64 / d as f64;
            let angle = pos as f64 / 10_000f64.powf(exponent);
            let v = if i % 2 == 0 { angle.sin() } else { angle.cos() };
            *table.at_mut(pos, i) = S::from_f64(v);
        }
    }
    table
}
