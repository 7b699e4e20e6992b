use super::*;

fn cfg(kind: ComposerKind) -> ComposerConfig {
    ComposerConfig {
        kind,
        feature_dim: 6,
        d_model: 8,
        d_ff: 12,
        layers: 1,
        heads: 2,
        vocab_size: 10,
        max_tokens: 5,
        projection: ProjectionMode::Learned,
        init_seed: 3,
    }
}

fn feature() -> Vec<f64> {
    vec![0.3, -0.2, 0.9, 0.1, -0.5, 0.4]
}

type Mat = Vec<Vec<f64>>;

/// `rows` × `cols` matrix from a row-major slice.
fn mat(s: &[f64], rows: usize, cols: usize) -> Mat {
    (0..rows).map(|r| s[r * cols..(r + 1) * cols].to_vec()).collect()
}

fn matmul(a: &Mat, b: &Mat) -> Mat {
    let mut out = vec![vec![0.0; b[0].len()]; a.len()];
    for i in 0..a.len() {
        for j in 0..b[0].len() {
            for k in 0..b.len() {
                out[i][j] += a[i][k] * b[k][j];
            }
        }
    }
    out
}

fn add_row(a: &Mat, b: &[f64]) -> Mat {
    a.iter().map(|r| r.iter().zip(b).map(|(x, y)| x + y).collect()).collect()
}

fn ln(a: &Mat, g: &[f64], b: &[f64]) -> Mat {
    a.iter()
        .map(|r| {
            let n = r.len() as f64;
            let m = r.iter().sum::<f64>() / n;
            let v = r.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n;
            r.iter()
                .enumerate()
                .map(|(j, x)| g[j] * (x - m) / (v + 1e-12).sqrt() + b[j])
                .collect()
        })
        .collect()
}

/// Straight-line single-layer transformer written from the definition.
fn oracle(c: &Composer, f: &[f64], tokens: &[u32]) -> Vec<f64> {
    let cfg = &c.config;
    let p = &c.params;
    let d = cfg.d_model;
    let w_img = mat(p.view("img.weight"), d, cfg.feature_dim);
    let img: Vec<f64> = (0..d)
        .map(|i| p.view("img.bias")[i] + w_img[i].iter().zip(f).map(|(a, b)| a * b).sum::<f64>())
        .collect();
    let n_img = img.iter().map(|x| x * x).sum::<f64>().sqrt();
    let img: Vec<f64> = img.iter().map(|x| x / n_img).collect();
    let e = mat(p.view("tok.embed"), cfg.vocab_size, d);
    let pos = mat(p.view("pos.embed"), cfg.max_tokens + 2, d);
    let mut x: Mat = Vec::new();
    let mut ids = vec![1u32];
    ids.extend(tokens);
    for (s, &id) in ids.iter().enumerate() {
        x.push((0..d).map(|j| e[id as usize][j] + pos[s][j]).collect());
    }
    x.push((0..d).map(|j| img[j] + pos[cfg.max_tokens + 1][j]).collect());
    let n = x.len();

    let w = |s: &str, r, cc| mat(p.view(&format!("layer0.{s}")), r, cc);
    let b = |s: &str| p.view(&format!("layer0.{s}")).to_vec();
    let q = add_row(&matmul(&x, &w("attn.q.weight", d, d)), &b("attn.q.bias"));
    let k = add_row(&matmul(&x, &w("attn.k.weight", d, d)), &b("attn.k.bias"));
    let v = add_row(&matmul(&x, &w("attn.v.weight", d, d)), &b("attn.v.bias"));
    let dh = d / cfg.heads;
    let mut ctx = vec![vec![0.0; d]; n];
    for h in 0..cfg.heads {
        for i in 0..n {
            let logits: Vec<f64> = (0..n)
                .map(|j| (0..dh).map(|t| q[i][h * dh + t] * k[j][h * dh + t]).sum::<f64>() / (dh as f64).sqrt())
                .collect();
            let m = logits.iter().cloned().fold(f64::MIN, f64::max);
            let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
            for j in 0..n {
                let a = (logits[j] - m).exp() / z;
                for t in 0..dh {
                    ctx[i][h * dh + t] += a * v[j][h * dh + t];
                }
            }
        }
    }
    let attn = add_row(&matmul(&ctx, &w("attn.o.weight", d, d)), &b("attn.o.bias"));
    let r1: Mat = (0..n).map(|i| (0..d).map(|j| x[i][j] + attn[i][j]).collect()).collect();
    let h1 = ln(&r1, &b("ln1.gain"), &b("ln1.bias"));
    let pre = add_row(&matmul(&h1, &w("ffn.w1", d, cfg.d_ff)), &b("ffn.b1"));
    let act: Mat = pre
        .iter()
        .map(|r| {
            r.iter()
                .map(|&z| 0.5 * z * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (z + 0.044715 * z.powi(3))).tanh()))
                .collect()
        })
        .collect();
    let ff = add_row(&matmul(&act, &w("ffn.w2", cfg.d_ff, d)), &b("ffn.b2"));
    let r2: Mat = (0..n).map(|i| (0..d).map(|j| h1[i][j] + ff[i][j]).collect()).collect();
    let out = ln(&r2, &b("ln2.gain"), &b("ln2.bias"));
    let last = &out[n - 1];
    let norm = last.iter().map(|x| x * x).sum::<f64>().sqrt();
    last.iter().map(|x| x / norm).collect()
}

#[test]
fn transformer_matches_naive_oracle() {
    let mut c = Composer::new(cfg(ComposerKind::Transformer)).unwrap();
    // Non-trivial layer-norm parameters so they take part in the comparison.
    for (i, g) in c.params.view_mut("layer0.ln1.gain").iter_mut().enumerate() {
        *g = 1.0 + 0.1 * i as f64;
    }
    for (i, g) in c.params.view_mut("layer0.ln2.bias").iter_mut().enumerate() {
        *g = 0.05 * i as f64 - 0.2;
    }
    let tokens = [4, 7, 2];
    let got = c.compose(ComposeInput { reference: &feature(), tokens: &tokens }).unwrap();
    let want = oracle(&c, &feature(), &tokens);
    for (g, w) in got.iter().zip(&want) {
        assert!((g - w).abs() < 1e-8, "{g} vs {w}");
    }
}

#[test]
fn every_kind_outputs_unit_norm() {
    for kind in ComposerKind::ALL {
        let c = Composer::new(cfg(kind)).unwrap();
        let out = c.compose(ComposeInput { reference: &feature(), tokens: &[3, 5, 5, 9] }).unwrap();
        assert_eq!(out.len(), 8);
        let n = out.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((n - 1.0).abs() < 1e-6, "{kind}: {n}");
    }
}

#[test]
fn zero_layer_transformer_returns_image_slot_direction() {
    let mut config = cfg(ComposerKind::Transformer);
    config.layers = 0;
    let c = Composer::new(config.clone()).unwrap();
    let out = c.compose(ComposeInput { reference: &feature(), tokens: &[2, 3] }).unwrap();
    let img = c.project_image(&feature()).unwrap();
    let pos = &c.params.view("pos.embed")[(config.max_tokens + 1) * 8..(config.max_tokens + 2) * 8];
    let slot: Vec<f64> = img.iter().zip(pos).map(|(a, b)| a + b).collect();
    let n = slot.iter().map(|x| x * x).sum::<f64>().sqrt();
    for (o, s) in out.iter().zip(&slot) {
        assert!((o - s / n).abs() < 1e-12);
    }
}

#[test]
fn token_order_matters_for_transformer_only() {
    let f = feature();
    let t = Composer::new(cfg(ComposerKind::Transformer)).unwrap();
    let a = t.compose(ComposeInput { reference: &f, tokens: &[2, 3, 4] }).unwrap();
    let b = t.compose(ComposeInput { reference: &f, tokens: &[4, 3, 2] }).unwrap();
    assert!(a.iter().zip(&b).any(|(x, y)| (x - y).abs() > 1e-6));

    let m = Composer::new(cfg(ComposerKind::TextOnly)).unwrap();
    let a = m.compose(ComposeInput { reference: &f, tokens: &[2, 3, 4] }).unwrap();
    let b = m.compose(ComposeInput { reference: &f, tokens: &[4, 3, 2] }).unwrap();
    for (x, y) in a.iter().zip(&b) {
        assert!((x - y).abs() < 1e-15);
    }
}

#[test]
fn image_only_equals_projection() {
    let c = Composer::new(cfg(ComposerKind::ImageOnly)).unwrap();
    let f = feature();
    assert_eq!(
        c.compose(ComposeInput { reference: &f, tokens: &[] }).unwrap(),
        c.project_image(&f).unwrap()
    );
}

#[test]
fn identity_projection_passes_unit_features_through() {
    let mut config = cfg(ComposerKind::ImageOnly);
    config.feature_dim = 8;
    config.projection = ProjectionMode::Identity;
    let c = Composer::new(config).unwrap();
    assert_eq!(c.param_count(), 0);
    let f = [0.6, 0.0, 0.0, 0.8, 0.0, 0.0, 0.0, 0.0];
    assert_eq!(c.project_image(&f).unwrap(), f.to_vec());
}

#[test]
fn truncates_long_captions() {
    let c = Composer::new(cfg(ComposerKind::Transformer)).unwrap();
    let f = feature();
    let long = c.compose(ComposeInput { reference: &f, tokens: &[2, 3, 4, 5, 6, 7, 8] }).unwrap();
    let cut = c.compose(ComposeInput { reference: &f, tokens: &[2, 3, 4, 5, 6] }).unwrap();
    assert_eq!(long, cut);
}

#[test]
fn rejects_bad_inputs() {
    let c = Composer::new(cfg(ComposerKind::ConcatMlp)).unwrap();
    let f = feature();
    assert!(matches!(
        c.compose(ComposeInput { reference: &f[..3], tokens: &[2] }),
        Err(Error::DimensionMismatch { expected: 6, actual: 3 })
    ));
    assert!(c.compose(ComposeInput { reference: &f, tokens: &[10] }).is_err());
    assert!(c.compose(ComposeInput { reference: &f, tokens: &[] }).is_err());
}

#[test]
fn zero_loss_gradient_gives_zero_parameter_gradient() {
    for kind in ComposerKind::ALL {
        let c = Composer::new(cfg(kind)).unwrap();
        let f = feature();
        let batch = c.forward_batch(&[ComposeInput { reference: &f, tokens: &[2, 6] }]).unwrap();
        let g = c.compose_gradient(&batch, &[vec![0.0; 8]]).unwrap();
        assert!(g.iter().all(|&x| x == 0.0), "{kind}");
    }
}

#[test]
fn duplicated_sample_doubles_gradient() {
    for kind in ComposerKind::ALL {
        let c = Composer::new(cfg(kind)).unwrap();
        let f = feature();
        let input = ComposeInput { reference: &f, tokens: &[2, 6, 1] };
        let lg: Vec<f64> = (0..8).map(|i| (i as f64 * 0.37).sin()).collect();
        let one = c.compose_gradient(&c.forward_batch(&[input]).unwrap(), &[lg.clone()]).unwrap();
        let two = c
            .compose_gradient(&c.forward_batch(&[input, input]).unwrap(), &[lg.clone(), lg])
            .unwrap();
        for (a, b) in one.iter().zip(&two) {
            assert_eq!(2.0 * a, *b, "{kind}");
        }
    }
}

#[test]
fn gradient_length_mismatch_is_an_error() {
    let c = Composer::new(cfg(ComposerKind::TextOnly)).unwrap();
    let f = feature();
    let batch = c.forward_batch(&[ComposeInput { reference: &f, tokens: &[2] }]).unwrap();
    assert!(matches!(c.compose_gradient(&batch, &[]), Err(Error::Consistency(_))));
}

/// Central-difference check of `⟨w, φ⟩` for every parameter of every kind.
#[test]
fn backward_matches_finite_differences() {
    for kind in ComposerKind::ALL {
        let mut c = Composer::new(cfg(kind)).unwrap();
        let f = feature();
        let tokens = [2u32, 7, 3];
        let w: Vec<f64> = (0..8).map(|i| ((i + 1) as f64 * 0.61).cos()).collect();
        let objective = |c: &Composer| -> f64 {
            let out = c.compose(ComposeInput { reference: &f, tokens: &tokens }).unwrap();
            out.iter().zip(&w).map(|(a, b)| a * b).sum()
        };
        let batch = c.forward_batch(&[ComposeInput { reference: &f, tokens: &tokens }]).unwrap();
        let analytic = c.compose_gradient(&batch, &[w.clone()]).unwrap();
        let h = 1e-5;
        for i in 0..c.param_count() {
            let orig = c.params.flat()[i];
            c.params.flat_mut()[i] = orig + h;
            let up = objective(&c);
            c.params.flat_mut()[i] = orig - h;
            let down = objective(&c);
            c.params.flat_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * h);
            let scale = analytic[i].abs().max(numeric.abs()).max(1e-6);
            assert!(
                (analytic[i] - numeric).abs() / scale < 1e-5,
                "{kind} param {i}: analytic {} numeric {numeric}",
                analytic[i]
            );
        }
    }
}

#[test]
fn forward_is_deterministic_across_threads() {
    let c = Composer::new(cfg(ComposerKind::Transformer)).unwrap();
    let f = feature();
    let inputs: Vec<ComposeInput> = (0..16).map(|_| ComposeInput { reference: &f, tokens: &[2, 3] }).collect();
    let batch = c.forward_batch(&inputs).unwrap();
    let serial = c.compose(inputs[0]).unwrap();
    assert!(batch.outputs.iter().all(|o| *o == serial));
}
