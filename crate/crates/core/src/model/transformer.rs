//! Forward pass with activation trace, and its exact reverse-mode adjoint.
//!
//! Every per-position computation (embeddings, norms, projections, MLP) is
//! row-local and independent of the sequence length; only attention mixes
//! positions. A zero-layer model is therefore strictly position-local.

use super::{Gradients, LayerLayout, ModelParams};
use crate::corpus::Token;
use crate::error::{Error, Result};

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// y[r, :] = b + x[r, :]·W, with W stored row-major as [inp × out].
fn matmul(x: &[f64], inp: usize, w: &[f64], out: usize, b: Option<&[f64]>, y: &mut [f64]) {
    for (xr, yr) in x.chunks_exact(inp).zip(y.chunks_exact_mut(out)) {
        match b {
            Some(b) => yr.copy_from_slice(b),
            None => yr.fill(0.0),
        }
        for (&xi, wr) in xr.iter().zip(w.chunks_exact(out)) {
            for (yo, &wo) in yr.iter_mut().zip(wr) {
                *yo += xi * wo;
            }
        }
    }
}

/// Adjoint of [`matmul`]: accumulates dW, db, and writes (or adds to) dx.
#[allow(clippy::too_many_arguments)]
fn matmul_backward(
    x: &[f64],
    inp: usize,
    w: &[f64],
    out: usize,
    dy: &[f64],
    dw: &mut [f64],
    db: Option<&mut [f64]>,
    dx: Option<&mut [f64]>,
) {
    for (xr, dyr) in x.chunks_exact(inp).zip(dy.chunks_exact(out)) {
        for (&xi, dwr) in xr.iter().zip(dw.chunks_exact_mut(out)) {
            for (g, &d) in dwr.iter_mut().zip(dyr) {
                *g += xi * d;
            }
        }
    }
    if let Some(db) = db {
        for dyr in dy.chunks_exact(out) {
            for (g, &d) in db.iter_mut().zip(dyr) {
                *g += d;
            }
        }
    }
    if let Some(dx) = dx {
        for (dxr, dyr) in dx.chunks_exact_mut(inp).zip(dy.chunks_exact(out)) {
            for (dxi, wr) in dxr.iter_mut().zip(w.chunks_exact(out)) {
                *dxi += wr.iter().zip(dyr).map(|(a, b)| a * b).sum::<f64>();
            }
        }
    }
}

/// Row-wise layer norm. Stores normalized rows and reciprocal std for backward.
fn layer_norm(x: &[f64], d: usize, g: &[f64], b: &[f64], y: &mut [f64], xhat: &mut [f64], rstd: &mut [f64]) {
    for (((xr, yr), hr), rs) in x
        .chunks_exact(d)
        .zip(y.chunks_exact_mut(d))
        .zip(xhat.chunks_exact_mut(d))
        .zip(rstd.iter_mut())
    {
        let mean = xr.iter().sum::<f64>() / d as f64;
        let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let r = 1.0 / (var + LN_EPS).sqrt();
        *rs = r;
        for i in 0..d {
            let h = (xr[i] - mean) * r;
            hr[i] = h;
            yr[i] = g[i] * h + b[i];
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn layer_norm_backward(
    dy: &[f64],
    d: usize,
    g: &[f64],
    xhat: &[f64],
    rstd: &[f64],
    dg: &mut [f64],
    db: &mut [f64],
    dx: &mut [f64],
) {
    let mut dh = vec![0.0; d];
    for (((dyr, hr), &r), dxr) in dy
        .chunks_exact(d)
        .zip(xhat.chunks_exact(d))
        .zip(rstd)
        .zip(dx.chunks_exact_mut(d))
    {
        let mut m1 = 0.0;
        let mut m2 = 0.0;
        for i in 0..d {
            dg[i] += dyr[i] * hr[i];
            db[i] += dyr[i];
            dh[i] = dyr[i] * g[i];
            m1 += dh[i];
            m2 += dh[i] * hr[i];
        }
        m1 /= d as f64;
        m2 /= d as f64;
        for i in 0..d {
            dxr[i] += r * (dh[i] - m1 - hr[i] * m2);
        }
    }
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

#[derive(Debug, Clone)]
struct LayerTrace {
    ln1: Vec<f64>,
    xhat1: Vec<f64>,
    rstd1: Vec<f64>,
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    /// [head][i][j], causal rows (j ≤ i); entries above the diagonal are zero.
    att: Vec<f64>,
    ctx: Vec<f64>,
    ln2: Vec<f64>,
    xhat2: Vec<f64>,
    rstd2: Vec<f64>,
    hpre: Vec<f64>,
    hact: Vec<f64>,
}

/// Activations of one forward pass, sufficient for [`backward`].
#[derive(Debug, Clone)]
pub(crate) struct Trace {
    tokens: Vec<Token>,
    start_pos: usize,
    /// First position whose logits were produced.
    logit_from: usize,
    layers: Vec<LayerTrace>,
    lnf: Vec<f64>,
    xhatf: Vec<f64>,
    rstdf: Vec<f64>,
    /// [(len − logit_from) × V]
    pub logits: Vec<f64>,
}

impl Trace {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }
}

/// Runs the model over `tokens` placed at absolute positions
/// `start_pos..start_pos + len`, producing logits for positions
/// `logit_from..len` (relative to the sequence).
pub(crate) fn forward(p: &ModelParams, tokens: &[Token], start_pos: usize, logit_from: usize) -> Result<Trace> {
    let cfg = p.config();
    let (v, d, nh) = (cfg.vocab, cfg.d_model, cfg.n_heads);
    let hd = cfg.head_dim();
    let t = tokens.len();
    if t == 0 {
        return Err(Error::EmptySequence);
    }
    if start_pos + t > cfg.n_ctx {
        return Err(Error::ContextOverflow {
            len: start_pos + t,
            n_ctx: cfg.n_ctx,
        });
    }
    if let Some(&bad) = tokens.iter().find(|&&id| id as usize >= v) {
        return Err(Error::TokenOutOfRange { id: bad, vocab: v });
    }
    debug_assert!(logit_from <= t);
    let lay = p.layout();
    let w = p.data();

    let mut x = vec![0.0; t * d];
    for (i, (&tok, xr)) in tokens.iter().zip(x.chunks_exact_mut(d)).enumerate() {
        let te = &w[lay.tok + tok as usize * d..][..d];
        let pe = &w[lay.pos + (start_pos + i) * d..][..d];
        for j in 0..d {
            xr[j] = te[j] + pe[j];
        }
    }

    let scale = 1.0 / (hd as f64).sqrt();
    let mut layers = Vec::with_capacity(lay.layers.len());
    for l in &lay.layers {
        let mut tr = LayerTrace {
            ln1: vec![0.0; t * d],
            xhat1: vec![0.0; t * d],
            rstd1: vec![0.0; t],
            q: vec![0.0; t * d],
            k: vec![0.0; t * d],
            v: vec![0.0; t * d],
            att: vec![0.0; nh * t * t],
            ctx: vec![0.0; t * d],
            ln2: vec![0.0; t * d],
            xhat2: vec![0.0; t * d],
            rstd2: vec![0.0; t],
            hpre: vec![0.0; t * 4 * d],
            hact: vec![0.0; t * 4 * d],
        };
        layer_norm(&x, d, &w[l.ln1_g..][..d], &w[l.ln1_b..][..d], &mut tr.ln1, &mut tr.xhat1, &mut tr.rstd1);
        matmul(&tr.ln1, d, &w[l.wq..][..d * d], d, Some(&w[l.bq..][..d]), &mut tr.q);
        matmul(&tr.ln1, d, &w[l.wk..][..d * d], d, Some(&w[l.bk..][..d]), &mut tr.k);
        matmul(&tr.ln1, d, &w[l.wv..][..d * d], d, Some(&w[l.bv..][..d]), &mut tr.v);

        for h in 0..nh {
            let off = h * hd;
            for i in 0..t {
                let row = &mut tr.att[(h * t + i) * t..][..t];
                let qi = &tr.q[i * d + off..][..hd];
                let mut mx = f64::NEG_INFINITY;
                for (j, r) in row[..=i].iter_mut().enumerate() {
                    let kj = &tr.k[j * d + off..][..hd];
                    let s = qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale;
                    *r = s;
                    mx = mx.max(s);
                }
                let mut z = 0.0;
                for a in row[..=i].iter_mut() {
                    *a = (*a - mx).exp();
                    z += *a;
                }
                for a in row[..=i].iter_mut() {
                    *a /= z;
                }
                let ci = &mut tr.ctx[i * d + off..][..hd];
                for (j, &a) in row[..=i].iter().enumerate() {
                    for (c, &vv) in ci.iter_mut().zip(&tr.v[j * d + off..][..hd]) {
                        *c += a * vv;
                    }
                }
            }
        }

        let mut attn_out = vec![0.0; t * d];
        matmul(&tr.ctx, d, &w[l.wo..][..d * d], d, Some(&w[l.bo..][..d]), &mut attn_out);
        for (a, b) in x.iter_mut().zip(&attn_out) {
            *a += b;
        }

        layer_norm(&x, d, &w[l.ln2_g..][..d], &w[l.ln2_b..][..d], &mut tr.ln2, &mut tr.xhat2, &mut tr.rstd2);
        matmul(&tr.ln2, d, &w[l.w1..][..d * 4 * d], 4 * d, Some(&w[l.b1..][..4 * d]), &mut tr.hpre);
        for (a, &h) in tr.hact.iter_mut().zip(&tr.hpre) {
            *a = gelu(h);
        }
        let mut mlp = vec![0.0; t * d];
        matmul(&tr.hact, 4 * d, &w[l.w2..][..4 * d * d], d, Some(&w[l.b2..][..d]), &mut mlp);
        for (a, b) in x.iter_mut().zip(&mlp) {
            *a += b;
        }
        layers.push(tr);
    }

    let n = t - logit_from;
    let xs = &x[logit_from * d..];
    let mut lnf = vec![0.0; n * d];
    let mut xhatf = vec![0.0; n * d];
    let mut rstdf = vec![0.0; n];
    layer_norm(xs, d, &w[lay.lnf_g..][..d], &w[lay.lnf_b..][..d], &mut lnf, &mut xhatf, &mut rstdf);
    let mut logits = vec![0.0; n * v];
    matmul(&lnf, d, &w[lay.w_out..][..d * v], v, None, &mut logits);

    Ok(Trace {
        tokens: tokens.to_vec(),
        start_pos,
        logit_from,
        layers,
        lnf,
        xhatf,
        rstdf,
        logits,
    })
}

/// Accumulates into `grads` the gradient of Σ dlogits·logits with respect to
/// every parameter. `dlogits` has the same shape as `trace.logits`.
pub(crate) fn backward(p: &ModelParams, tr: &Trace, dlogits: &[f64], grads: &mut Gradients) {
    let cfg = p.config();
    let (v, d, nh) = (cfg.vocab, cfg.d_model, cfg.n_heads);
    let hd = cfg.head_dim();
    let t = tr.len();
    let lay = p.layout();
    let w = p.data();
    let g = grads.data_mut();
    assert_eq!(dlogits.len(), tr.logits.len());

    let n = t - tr.logit_from;
    let mut dlnf = vec![0.0; n * d];
    matmul_backward(&tr.lnf, d, &w[lay.w_out..][..d * v], v, dlogits, &mut g[lay.w_out..][..d * v], None, Some(&mut dlnf));
    let mut dx = vec![0.0; t * d];
    {
        let (gg, gb) = split_pair(g, lay.lnf_g, lay.lnf_b, d);
        layer_norm_backward(&dlnf, d, &w[lay.lnf_g..][..d], &tr.xhatf, &tr.rstdf, gg, gb, &mut dx[tr.logit_from * d..]);
    }

    let scale = 1.0 / (hd as f64).sqrt();
    for (l, lt) in lay.layers.iter().zip(&tr.layers).rev() {
        layer_backward(w, g, l, lt, &mut dx, t, d, nh, hd, scale);
    }

    for (i, (&tok, dxr)) in tr.tokens.iter().zip(dx.chunks_exact(d)).enumerate() {
        let te = &mut g[lay.tok + tok as usize * d..][..d];
        for (a, b) in te.iter_mut().zip(dxr) {
            *a += b;
        }
        let pe = &mut g[lay.pos + (tr.start_pos + i) * d..][..d];
        for (a, b) in pe.iter_mut().zip(dxr) {
            *a += b;
        }
    }
}

/// Disjoint mutable views of two length-`d` tensors at offsets `a < b`.
fn split_pair(g: &mut [f64], a: usize, b: usize, d: usize) -> (&mut [f64], &mut [f64]) {
    debug_assert!(a + d <= b);
    let (lo, hi) = g.split_at_mut(b);
    (&mut lo[a..a + d], &mut hi[..d])
}

#[allow(clippy::too_many_arguments)]
fn layer_backward(
    w: &[f64],
    g: &mut [f64],
    l: &LayerLayout,
    lt: &LayerTrace,
    dx: &mut [f64],
    t: usize,
    d: usize,
    nh: usize,
    hd: usize,
    scale: f64,
) {
    // MLP branch: x2 = x1 + W2·gelu(W1·ln2(x1))
    let mut dhact = vec![0.0; t * 4 * d];
    matmul_backward(&lt.hact, 4 * d, &w[l.w2..][..4 * d * d], d, dx, grad_slice(g, l.w2, 4 * d * d), None, Some(&mut dhact));
    add_bias_grad(g, l.b2, dx, d);
    for (dh, &h) in dhact.iter_mut().zip(&lt.hpre) {
        *dh *= gelu_grad(h);
    }
    let mut dln2 = vec![0.0; t * d];
    matmul_backward(&lt.ln2, d, &w[l.w1..][..d * 4 * d], 4 * d, &dhact, grad_slice(g, l.w1, d * 4 * d), None, Some(&mut dln2));
    add_bias_grad(g, l.b1, &dhact, 4 * d);
    {
        let (gg, gb) = split_pair(g, l.ln2_g, l.ln2_b, d);
        layer_norm_backward(&dln2, d, &w[l.ln2_g..][..d], &lt.xhat2, &lt.rstd2, gg, gb, dx);
    }

    // Attention branch: x1 = x + Wo·attn(ln1(x))
    let mut dctx = vec![0.0; t * d];
    matmul_backward(&lt.ctx, d, &w[l.wo..][..d * d], d, dx, grad_slice(g, l.wo, d * d), None, Some(&mut dctx));
    add_bias_grad(g, l.bo, dx, d);

    let mut dq = vec![0.0; t * d];
    let mut dk = vec![0.0; t * d];
    let mut dv = vec![0.0; t * d];
    let mut datt = vec![0.0; t];
    for h in 0..nh {
        let off = h * hd;
        for i in 0..t {
            let row = &lt.att[(h * t + i) * t..][..t];
            let dci = &dctx[i * d + off..][..hd];
            let mut dot = 0.0;
            for j in 0..=i {
                let vj = &lt.v[j * d + off..][..hd];
                datt[j] = dci.iter().zip(vj).map(|(a, b)| a * b).sum();
                dot += row[j] * datt[j];
                let a = row[j];
                for (dvv, &c) in dv[j * d + off..][..hd].iter_mut().zip(dci) {
                    *dvv += a * c;
                }
            }
            let qi = &lt.q[i * d + off..][..hd];
            for j in 0..=i {
                let ds = row[j] * (datt[j] - dot) * scale;
                if ds == 0.0 {
                    continue;
                }
                let kj = &lt.k[j * d + off..][..hd];
                for (a, &b) in dq[i * d + off..][..hd].iter_mut().zip(kj) {
                    *a += ds * b;
                }
                for (a, &b) in dk[j * d + off..][..hd].iter_mut().zip(qi) {
                    *a += ds * b;
                }
            }
        }
    }

    let mut dln1 = vec![0.0; t * d];
    matmul_backward(&lt.ln1, d, &w[l.wq..][..d * d], d, &dq, grad_slice(g, l.wq, d * d), None, Some(&mut dln1));
    add_bias_grad(g, l.bq, &dq, d);
    matmul_backward(&lt.ln1, d, &w[l.wk..][..d * d], d, &dk, grad_slice(g, l.wk, d * d), None, Some(&mut dln1));
    add_bias_grad(g, l.bk, &dk, d);
    matmul_backward(&lt.ln1, d, &w[l.wv..][..d * d], d, &dv, grad_slice(g, l.wv, d * d), None, Some(&mut dln1));
    add_bias_grad(g, l.bv, &dv, d);
    let (gg, gb) = split_pair(g, l.ln1_g, l.ln1_b, d);
    layer_norm_backward(&dln1, d, &w[l.ln1_g..][..d], &lt.xhat1, &lt.rstd1, gg, gb, dx);
}

fn grad_slice(g: &mut [f64], off: usize, len: usize) -> &mut [f64] {
    &mut g[off..off + len]
}

fn add_bias_grad(g: &mut [f64], off: usize, dy: &[f64], n: usize) {
    let db = &mut g[off..off + n];
    for r in dy.chunks_exact(n) {
        for (a, b) in db.iter_mut().zip(r) {
            *a += b;
        }
    }
}

/// Per-position logits `[len × V]` for `tokens` at positions `0..len`.
pub fn forward_logits(p: &ModelParams, tokens: &[Token]) -> Result<Vec<Vec<f64>>> {
    let tr = forward(p, tokens, 0, 0)?;
    Ok(tr.logits.chunks_exact(p.config().vocab).map(|r| r.to_vec()).collect())
}
