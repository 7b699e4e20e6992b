//! Post-LN transformer encoder over `[CLS, w_1..w_T, v_img]`. The composed
//! feature is the normalized final hidden state at the image slot.

use super::linalg::{
    affine, affine_grad_bias, affine_grad_input, affine_grad_weight, dot, gelu, gelu_grad, layer_norm,
    layer_norm_backward, normalize, normalize_backward, softmax_in_place,
};
use super::projection::{self, ProjectionCache};
use super::{ComposerConfig, ComposerParameters};
use crate::text::CLS_ID;

#[derive(Debug, Clone)]
struct LayerCache {
    x_in: Vec<f64>,
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    /// `heads × n × n` attention weights.
    probs: Vec<f64>,
    ctx: Vec<f64>,
    ln1_xhat: Vec<f64>,
    ln1_rstd: Vec<f64>,
    h1: Vec<f64>,
    ffn_pre: Vec<f64>,
    ffn_act: Vec<f64>,
    ln2_xhat: Vec<f64>,
    ln2_rstd: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct TransformerCache {
    image: ProjectionCache,
    /// Token id per sequence slot; the image slot holds no id.
    ids: Vec<u32>,
    layers: Vec<LayerCache>,
    unit: Vec<f64>,
    norm: f64,
}

fn image_position(cfg: &ComposerConfig) -> usize {
    cfg.max_tokens + 1
}

fn name(l: usize, rest: &str) -> String {
    format!("layer{l}.{rest}")
}

fn layer_forward(cfg: &ComposerConfig, p: &ComposerParameters, l: usize, x: Vec<f64>, n: usize) -> (Vec<f64>, LayerCache) {
    let (d, h, f) = (cfg.d_model, cfg.heads, cfg.d_ff);
    let dh = d / h;
    let scale = 1.0 / (dh as f64).sqrt();
    let proj = |w: &str| {
        affine(
            &x,
            n,
            p.view(&name(l, &format!("attn.{w}.weight"))),
            p.view(&name(l, &format!("attn.{w}.bias"))),
            d,
            d,
        )
    };
    let (q, k, v) = (proj("q"), proj("k"), proj("v"));

    let mut probs = vec![0.0; h * n * n];
    let mut ctx = vec![0.0; n * d];
    for head in 0..h {
        let cols = head * dh..(head + 1) * dh;
        for i in 0..n {
            let row = &mut probs[(head * n + i) * n..(head * n + i + 1) * n];
            let qi = &q[i * d + cols.start..i * d + cols.end];
            for (j, s) in row.iter_mut().enumerate() {
                *s = dot(qi, &k[j * d + cols.start..j * d + cols.end]) * scale;
            }
            softmax_in_place(row);
            for (j, &pij) in row.iter().enumerate() {
                for c in cols.clone() {
                    ctx[i * d + c] += pij * v[j * d + c];
                }
            }
        }
    }

    let attn = affine(
        &ctx,
        n,
        p.view(&name(l, "attn.o.weight")),
        p.view(&name(l, "attn.o.bias")),
        d,
        d,
    );
    let r1: Vec<f64> = x.iter().zip(&attn).map(|(a, b)| a + b).collect();
    let (h1, ln1_xhat, ln1_rstd) = layer_norm(&r1, n, d, p.view(&name(l, "ln1.gain")), p.view(&name(l, "ln1.bias")));

    let ffn_pre = affine(&h1, n, p.view(&name(l, "ffn.w1")), p.view(&name(l, "ffn.b1")), d, f);
    let ffn_act: Vec<f64> = ffn_pre.iter().map(|&z| gelu(z)).collect();
    let ffn_out = affine(&ffn_act, n, p.view(&name(l, "ffn.w2")), p.view(&name(l, "ffn.b2")), f, d);
    let r2: Vec<f64> = h1.iter().zip(&ffn_out).map(|(a, b)| a + b).collect();
    let (out, ln2_xhat, ln2_rstd) = layer_norm(&r2, n, d, p.view(&name(l, "ln2.gain")), p.view(&name(l, "ln2.bias")));

    (
        out,
        LayerCache {
            x_in: x,
            q,
            k,
            v,
            probs,
            ctx,
            ln1_xhat,
            ln1_rstd,
            h1,
            ffn_pre,
            ffn_act,
            ln2_xhat,
            ln2_rstd,
        },
    )
}

/// Accumulates parameter gradients of one layer and returns `∂L/∂x_in`.
fn layer_backward(
    cfg: &ComposerConfig,
    p: &ComposerParameters,
    l: usize,
    c: &LayerCache,
    g_out: &[f64],
    n: usize,
    grad: &mut [f64],
) -> Vec<f64> {
    let (d, h, f) = (cfg.d_model, cfg.heads, cfg.d_ff);
    let dh = d / h;
    let scale = 1.0 / (dh as f64).sqrt();
    let layout = p.layout().clone();
    let range = |s: &str| layout.range(&name(l, s));

    let g_r2 = {
        let (gg, gb) = split_pair(grad, range("ln2.gain"), range("ln2.bias"));
        layer_norm_backward(g_out, &c.ln2_xhat, &c.ln2_rstd, n, d, p.view(&name(l, "ln2.gain")), gg, gb)
    };

    // FFN branch; the residual passes g_r2 straight to h1.
    affine_grad_weight(&c.ffn_act, &g_r2, n, f, d, &mut grad[range("ffn.w2")]);
    affine_grad_bias(&g_r2, n, d, &mut grad[range("ffn.b2")]);
    let mut g_act = vec![0.0; n * f];
    affine_grad_input(&g_r2, n, p.view(&name(l, "ffn.w2")), f, d, &mut g_act);
    let g_pre: Vec<f64> = g_act.iter().zip(&c.ffn_pre).map(|(g, &z)| g * gelu_grad(z)).collect();
    affine_grad_weight(&c.h1, &g_pre, n, d, f, &mut grad[range("ffn.w1")]);
    affine_grad_bias(&g_pre, n, f, &mut grad[range("ffn.b1")]);
    let mut g_h1 = g_r2;
    affine_grad_input(&g_pre, n, p.view(&name(l, "ffn.w1")), d, f, &mut g_h1);

    let g_r1 = {
        let (gg, gb) = split_pair(grad, range("ln1.gain"), range("ln1.bias"));
        layer_norm_backward(&g_h1, &c.ln1_xhat, &c.ln1_rstd, n, d, p.view(&name(l, "ln1.gain")), gg, gb)
    };

    // Attention branch.
    affine_grad_weight(&c.ctx, &g_r1, n, d, d, &mut grad[range("attn.o.weight")]);
    affine_grad_bias(&g_r1, n, d, &mut grad[range("attn.o.bias")]);
    let mut g_ctx = vec![0.0; n * d];
    affine_grad_input(&g_r1, n, p.view(&name(l, "attn.o.weight")), d, d, &mut g_ctx);

    let mut g_q = vec![0.0; n * d];
    let mut g_k = vec![0.0; n * d];
    let mut g_v = vec![0.0; n * d];
    let mut g_p = vec![0.0; n];
    for head in 0..h {
        let cols = head * dh..(head + 1) * dh;
        for i in 0..n {
            let pr = &c.probs[(head * n + i) * n..(head * n + i + 1) * n];
            let gci = &g_ctx[i * d + cols.start..i * d + cols.end];
            for j in 0..n {
                g_p[j] = dot(gci, &c.v[j * d + cols.start..j * d + cols.end]);
                for (t, col) in cols.clone().enumerate() {
                    g_v[j * d + col] += pr[j] * gci[t];
                }
            }
            let inner = dot(&g_p, pr);
            for j in 0..n {
                let gs = pr[j] * (g_p[j] - inner) * scale;
                if gs == 0.0 {
                    continue;
                }
                for col in cols.clone() {
                    g_q[i * d + col] += gs * c.k[j * d + col];
                    g_k[j * d + col] += gs * c.q[i * d + col];
                }
            }
        }
    }

    let mut g_x = g_r1;
    for (w, g) in [("q", &g_q), ("k", &g_k), ("v", &g_v)] {
        let wn = format!("attn.{w}.weight");
        affine_grad_weight(&c.x_in, g, n, d, d, &mut grad[range(&wn)]);
        affine_grad_bias(g, n, d, &mut grad[range(&format!("attn.{w}.bias"))]);
        affine_grad_input(g, n, p.view(&name(l, &wn)), d, d, &mut g_x);
    }
    g_x
}

/// Two disjoint mutable sub-slices of `buf`.
fn split_pair(buf: &mut [f64], a: std::ops::Range<usize>, b: std::ops::Range<usize>) -> (&mut [f64], &mut [f64]) {
    assert!(a.end <= b.start, "ranges must be ordered and disjoint");
    let (lo, hi) = buf.split_at_mut(b.start);
    (&mut lo[a], &mut hi[..b.end - b.start])
}

pub(super) fn forward(
    cfg: &ComposerConfig,
    p: &ComposerParameters,
    reference: &[f64],
    tokens: &[u32],
) -> (Vec<f64>, TransformerCache) {
    let d = cfg.d_model;
    let image = projection::forward(cfg, p, reference);
    let mut ids = Vec::with_capacity(tokens.len() + 1);
    ids.push(CLS_ID);
    ids.extend_from_slice(tokens);
    let n = ids.len() + 1;

    let embed = p.view("tok.embed");
    let pos = p.view("pos.embed");
    let mut x = Vec::with_capacity(n * d);
    for (slot, &id) in ids.iter().enumerate() {
        let e = &embed[id as usize * d..(id as usize + 1) * d];
        let pe = &pos[slot * d..(slot + 1) * d];
        x.extend(e.iter().zip(pe).map(|(a, b)| a + b));
    }
    let ip = image_position(cfg);
    x.extend(image.unit.iter().zip(&pos[ip * d..(ip + 1) * d]).map(|(a, b)| a + b));

    let mut layers = Vec::with_capacity(cfg.layers);
    for l in 0..cfg.layers {
        let (out, cache) = layer_forward(cfg, p, l, x, n);
        layers.push(cache);
        x = out;
    }
    let (unit, norm) = normalize(&x[(n - 1) * d..]);
    (
        unit.clone(),
        TransformerCache {
            image,
            ids,
            layers,
            unit,
            norm,
        },
    )
}

pub(super) fn backward(
    cfg: &ComposerConfig,
    p: &ComposerParameters,
    c: &TransformerCache,
    g_out: &[f64],
    grad: &mut [f64],
) {
    let d = cfg.d_model;
    let n = c.ids.len() + 1;
    let mut g_x = vec![0.0; n * d];
    g_x[(n - 1) * d..].copy_from_slice(&normalize_backward(&c.unit, c.norm, g_out));
    for (l, layer) in c.layers.iter().enumerate().rev() {
        g_x = layer_backward(cfg, p, l, layer, &g_x, n, grad);
    }

    let layout = p.layout().clone();
    let pos_range = layout.range("pos.embed");
    let embed_range = layout.range("tok.embed");
    for (slot, &id) in c.ids.iter().enumerate() {
        let g_row = &g_x[slot * d..(slot + 1) * d];
        let id = id as usize;
        for (t, g) in g_row.iter().enumerate() {
            grad[embed_range.start + id * d + t] += g;
            grad[pos_range.start + slot * d + t] += g;
        }
    }
    let ip = image_position(cfg);
    let g_img = &g_x[(n - 1) * d..];
    for (t, g) in g_img.iter().enumerate() {
        grad[pos_range.start + ip * d + t] += g;
    }
    projection::backward(cfg, p, &c.image, g_img, grad);
}
