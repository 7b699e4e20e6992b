//! Mean-pooled text composers: text-only, concatenation + MLP, and the
//! gated-residual composer.

use super::linalg::{
    affine, affine_grad_bias, affine_grad_input, affine_grad_weight, normalize, normalize_backward, sigmoid,
};
use super::projection::{self, ProjectionCache};
use super::{ComposerConfig, ComposerParameters};

#[derive(Debug, Clone)]
pub struct TextCache {
    tokens: Vec<u32>,
    unit: Vec<f64>,
    norm: f64,
}

#[derive(Debug, Clone)]
pub struct ConcatCache {
    image: ProjectionCache,
    tokens: Vec<u32>,
    joint: Vec<f64>,
    hidden_pre: Vec<f64>,
    hidden: Vec<f64>,
    unit: Vec<f64>,
    norm: f64,
}

#[derive(Debug, Clone)]
pub struct GatedCache {
    image: ProjectionCache,
    tokens: Vec<u32>,
    joint: Vec<f64>,
    gate: Vec<f64>,
    res_pre: Vec<f64>,
    res_hidden: Vec<f64>,
    unit: Vec<f64>,
    norm: f64,
}

fn mean_embedding(p: &ComposerParameters, d: usize, tokens: &[u32]) -> Vec<f64> {
    let table = p.view("tok.embed");
    let mut m = vec![0.0; d];
    for &t in tokens {
        let row = &table[t as usize * d..(t as usize + 1) * d];
        for (mj, r) in m.iter_mut().zip(row) {
            *mj += r;
        }
    }
    let inv = 1.0 / tokens.len() as f64;
    m.iter_mut().for_each(|x| *x *= inv);
    m
}

fn mean_embedding_backward(p: &ComposerParameters, d: usize, tokens: &[u32], g_mean: &[f64], grad: &mut [f64]) {
    let range = p.layout().range("tok.embed");
    let table = &mut grad[range];
    let inv = 1.0 / tokens.len() as f64;
    for &t in tokens {
        for (g, gm) in table[t as usize * d..(t as usize + 1) * d].iter_mut().zip(g_mean) {
            *g += gm * inv;
        }
    }
}

fn relu(x: &[f64]) -> Vec<f64> {
    x.iter().map(|v| v.max(0.0)).collect()
}

fn relu_backward(pre: &[f64], g: &[f64]) -> Vec<f64> {
    pre.iter().zip(g).map(|(x, g)| if *x > 0.0 { *g } else { 0.0 }).collect()
}

fn weight_and_bias_grad(
    p: &ComposerParameters,
    grad: &mut [f64],
    w: &str,
    b: &str,
    input: &[f64],
    g_out: &[f64],
    inp: usize,
    out: usize,
) {
    let layout = p.layout();
    affine_grad_weight(input, g_out, 1, inp, out, &mut grad[layout.range(w)]);
    affine_grad_bias(g_out, 1, out, &mut grad[layout.range(b)]);
}

pub(super) fn text_forward(cfg: &ComposerConfig, p: &ComposerParameters, tokens: &[u32]) -> (Vec<f64>, TextCache) {
    let m = mean_embedding(p, cfg.d_model, tokens);
    let (unit, norm) = normalize(&m);
    (
        unit.clone(),
        TextCache {
            tokens: tokens.to_vec(),
            unit,
            norm,
        },
    )
}

pub(super) fn text_backward(cfg: &ComposerConfig, p: &ComposerParameters, c: &TextCache, g_out: &[f64], grad: &mut [f64]) {
    let g_mean = normalize_backward(&c.unit, c.norm, g_out);
    mean_embedding_backward(p, cfg.d_model, &c.tokens, &g_mean, grad);
}

fn joint_input(cfg: &ComposerConfig, p: &ComposerParameters, reference: &[f64], tokens: &[u32]) -> (ProjectionCache, Vec<f64>) {
    let image = projection::forward(cfg, p, reference);
    let mut joint = image.unit.clone();
    joint.extend(mean_embedding(p, cfg.d_model, tokens));
    (image, joint)
}

fn joint_backward(
    cfg: &ComposerConfig,
    p: &ComposerParameters,
    image: &ProjectionCache,
    tokens: &[u32],
    g_image_unit: &[f64],
    g_mean: &[f64],
    grad: &mut [f64],
) {
    projection::backward(cfg, p, image, g_image_unit, grad);
    mean_embedding_backward(p, cfg.d_model, tokens, g_mean, grad);
}

pub(super) fn concat_forward(
    cfg: &ComposerConfig,
    p: &ComposerParameters,
    reference: &[f64],
    tokens: &[u32],
) -> (Vec<f64>, ConcatCache) {
    let (d, h) = (cfg.d_model, cfg.d_ff);
    let (image, joint) = joint_input(cfg, p, reference, tokens);
    let hidden_pre = affine(&joint, 1, p.view("mlp.w1"), p.view("mlp.b1"), 2 * d, h);
    let hidden = relu(&hidden_pre);
    let out = affine(&hidden, 1, p.view("mlp.w2"), p.view("mlp.b2"), h, d);
    let (unit, norm) = normalize(&out);
    (
        unit.clone(),
        ConcatCache {
            image,
            tokens: tokens.to_vec(),
            joint,
            hidden_pre,
            hidden,
            unit,
            norm,
        },
    )
}

pub(super) fn concat_backward(
    cfg: &ComposerConfig,
    p: &ComposerParameters,
    c: &ConcatCache,
    g_out: &[f64],
    grad: &mut [f64],
) {
    let (d, h) = (cfg.d_model, cfg.d_ff);
    let g_o = normalize_backward(&c.unit, c.norm, g_out);
    weight_and_bias_grad(p, grad, "mlp.w2", "mlp.b2", &c.hidden, &g_o, h, d);
    let mut g_hidden = vec![0.0; h];
    affine_grad_input(&g_o, 1, p.view("mlp.w2"), h, d, &mut g_hidden);
    let g_pre = relu_backward(&c.hidden_pre, &g_hidden);
    weight_and_bias_grad(p, grad, "mlp.w1", "mlp.b1", &c.joint, &g_pre, 2 * d, h);
    let mut g_joint = vec![0.0; 2 * d];
    affine_grad_input(&g_pre, 1, p.view("mlp.w1"), 2 * d, h, &mut g_joint);
    joint_backward(cfg, p, &c.image, &c.tokens, &g_joint[..d], &g_joint[d..], grad);
}

pub(super) fn gated_forward(
    cfg: &ComposerConfig,
    p: &ComposerParameters,
    reference: &[f64],
    tokens: &[u32],
) -> (Vec<f64>, GatedCache) {
    let (d, h) = (cfg.d_model, cfg.d_ff);
    let (image, joint) = joint_input(cfg, p, reference, tokens);
    let gate: Vec<f64> = affine(&joint, 1, p.view("gate.w"), p.view("gate.b"), 2 * d, d)
        .into_iter()
        .map(sigmoid)
        .collect();
    let res_pre = affine(&joint, 1, p.view("res.w1"), p.view("res.b1"), 2 * d, h);
    let res_hidden = relu(&res_pre);
    let res = affine(&res_hidden, 1, p.view("res.w2"), p.view("res.b2"), h, d);
    let out: Vec<f64> = (0..d).map(|j| gate[j] * image.unit[j] + res[j]).collect();
    let (unit, norm) = normalize(&out);
    (
        unit.clone(),
        GatedCache {
            image,
            tokens: tokens.to_vec(),
            joint,
            gate,
            res_pre,
            res_hidden,
            unit,
            norm,
        },
    )
}

pub(super) fn gated_backward(
    cfg: &ComposerConfig,
    p: &ComposerParameters,
    c: &GatedCache,
    g_out: &[f64],
    grad: &mut [f64],
) {
    let (d, h) = (cfg.d_model, cfg.d_ff);
    let g_o = normalize_backward(&c.unit, c.norm, g_out);

    let g_gate_pre: Vec<f64> = (0..d)
        .map(|j| g_o[j] * c.image.unit[j] * c.gate[j] * (1.0 - c.gate[j]))
        .collect();
    weight_and_bias_grad(p, grad, "gate.w", "gate.b", &c.joint, &g_gate_pre, 2 * d, d);
    let mut g_joint = vec![0.0; 2 * d];
    affine_grad_input(&g_gate_pre, 1, p.view("gate.w"), 2 * d, d, &mut g_joint);

    weight_and_bias_grad(p, grad, "res.w2", "res.b2", &c.res_hidden, &g_o, h, d);
    let mut g_res_hidden = vec![0.0; h];
    affine_grad_input(&g_o, 1, p.view("res.w2"), h, d, &mut g_res_hidden);
    let g_res_pre = relu_backward(&c.res_pre, &g_res_hidden);
    weight_and_bias_grad(p, grad, "res.w1", "res.b1", &c.joint, &g_res_pre, 2 * d, h);
    affine_grad_input(&g_res_pre, 1, p.view("res.w1"), 2 * d, h, &mut g_joint);

    let g_image: Vec<f64> = (0..d).map(|j| g_o[j] * c.gate[j] + g_joint[j]).collect();
    joint_backward(cfg, p, &c.image, &c.tokens, &g_image, &g_joint[d..], grad);
}
