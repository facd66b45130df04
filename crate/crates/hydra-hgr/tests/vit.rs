use hydra_hgr::nn::{Parameterized, TrainParams};
use hydra_hgr::vit::{micro_slots, patchify, scaled_dot_attention, train, Sample, VitConfig, VitModel};
use hydra_hgr::SeededRng;
use ndarray::{Array1, Array2, Array3, Axis};
use rand_distr::{Distribution, StandardNormal};

/// 1 × 3 × 4 image cut into three 1 × 4 patches.
fn toy_config() -> VitConfig {
    VitConfig {
        image_h: 3,
        image_w: 4,
        in_channels: 1,
        patch_h: 1,
        patch_w: 4,
        embed_dim: 8,
        num_heads: 2,
        num_layers: 2,
        mlp_hidden: 16,
        num_classes: 3,
        head_tokens: 1,
        per_head_scaling: true,
    }
}

fn gauss(rng: &mut SeededRng) -> f64 {
    StandardNormal.sample(rng)
}

fn normal(shape: (usize, usize), std: f64, rng: &mut SeededRng) -> Array2<f64> {
    Array2::from_shape_fn(shape, |_| std * gauss(rng))
}

/// Initial weights are tiny; spread them out so every nonlinearity is
/// exercised away from its linear regime.
fn toy_model(seed: u64) -> VitModel {
    let mut rng = SeededRng::new(seed);
    let mut model = VitModel::new(toy_config(), &mut rng).unwrap();
    model.visit_mut(&mut |_, mut a| a.mapv_inplace(|_| 0.4 * gauss(&mut rng)));
    model
}

fn toy_patches(seed: u64) -> Array2<f64> {
    normal((3, 4), 1.0, &mut SeededRng::new(seed))
}

// ---------- naive reference implementation ----------

fn naive_ln(x: &[f64], gamma: &[f64], beta: &[f64]) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    x.iter()
        .enumerate()
        .map(|(j, v)| (v - mean) / (var + 1e-6).sqrt() * gamma[j] + beta[j])
        .collect()
}

fn naive_linear(x: &[f64], w: &Array2<f64>, b: &Array1<f64>) -> Vec<f64> {
    (0..w.ncols())
        .map(|o| b[o] + (0..w.nrows()).map(|i| x[i] * w[[i, o]]).sum::<f64>())
        .collect()
}

fn naive_gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
}

fn naive_attention(q: &[Vec<f64>], k: &[Vec<f64>], v: &[Vec<f64>], scale: f64) -> Vec<Vec<f64>> {
    let n = q.len();
    let mut out = vec![vec![0.0; v[0].len()]; n];
    for i in 0..n {
        let scores: Vec<f64> = (0..n)
            .map(|j| scale * q[i].iter().zip(&k[j]).map(|(a, b)| a * b).sum::<f64>())
            .collect();
        let mx = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = scores.iter().map(|s| (s - mx).exp()).collect();
        let z: f64 = e.iter().sum();
        for j in 0..n {
            for c in 0..v[j].len() {
                out[i][c] += e[j] / z * v[j][c];
            }
        }
    }
    out
}

fn naive_forward(m: &VitModel, patches: &Array2<f64>) -> Vec<f64> {
    let cfg = &m.cfg;
    let d = cfg.embed_dim;
    let dh = d / cfg.num_heads;
    let mut z: Vec<Vec<f64>> = vec![m.cls.to_vec()];
    for p in patches.rows() {
        z.push((0..d).map(|c| (0..p.len()).map(|i| p[i] * m.e[[i, c]]).sum()).collect());
    }
    for (t, row) in z.iter_mut().enumerate() {
        for c in 0..d {
            row[c] += m.pos[[t, c]];
        }
    }
    for l in &m.layers {
        let a: Vec<Vec<f64>> = z.iter().map(|r| naive_ln(r, l.ln1.gamma.as_slice().unwrap(), l.ln1.beta.as_slice().unwrap())).collect();
        let q: Vec<Vec<f64>> = a.iter().map(|r| naive_linear(r, &l.q.w, &l.q.b)).collect();
        let k: Vec<Vec<f64>> = a.iter().map(|r| naive_linear(r, &l.k.w, &l.k.b)).collect();
        let v: Vec<Vec<f64>> = a.iter().map(|r| naive_linear(r, &l.v.w, &l.v.b)).collect();
        let mut concat = vec![vec![0.0; d]; z.len()];
        for h in 0..cfg.num_heads {
            let cut = |m: &Vec<Vec<f64>>| m.iter().map(|r| r[h * dh..(h + 1) * dh].to_vec()).collect::<Vec<_>>();
            let oh = naive_attention(&cut(&q), &cut(&k), &cut(&v), 1.0 / (dh as f64).sqrt());
            for (t, r) in oh.iter().enumerate() {
                concat[t][h * dh..(h + 1) * dh].copy_from_slice(r);
            }
        }
        for (t, r) in concat.iter().enumerate() {
            let o = naive_linear(r, &l.o.w, &l.o.b);
            for c in 0..d {
                z[t][c] += o[c];
            }
        }
        for row in z.iter_mut() {
            let b = naive_ln(row, l.ln2.gamma.as_slice().unwrap(), l.ln2.beta.as_slice().unwrap());
            let g: Vec<f64> = naive_linear(&b, &l.fc1.w, &l.fc1.b).into_iter().map(naive_gelu).collect();
            let f = naive_linear(&g, &l.fc2.w, &l.fc2.b);
            for c in 0..d {
                row[c] += f[c];
            }
        }
    }
    naive_linear(&z[0], &m.head.w, &m.head.b)
}

#[test]
fn attention_matches_triple_loop() {
    let mut rng = SeededRng::new(3);
    let (q, k, v) = (normal((5, 4), 1.0, &mut rng), normal((5, 4), 1.0, &mut rng), normal((5, 3), 1.0, &mut rng));
    let rows = |m: &Array2<f64>| m.rows().into_iter().map(|r| r.to_vec()).collect::<Vec<_>>();
    let expect = naive_attention(&rows(&q), &rows(&k), &rows(&v), 0.5);
    let (out, p) = scaled_dot_attention(q.view(), k.view(), v.view(), 0.5);
    for i in 0..5 {
        for c in 0..3 {
            assert!((out[[i, c]] - expect[i][c]).abs() < 1e-6);
        }
        assert!((p.row(i).sum() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn forward_matches_naive_reference() {
    for seed in 0..4 {
        let m = toy_model(seed);
        let p = toy_patches(100 + seed);
        let logits = m.forward(std::slice::from_ref(&p)).unwrap().logits;
        let expect = naive_forward(&m, &p);
        for (a, b) in logits.iter().zip(&expect) {
            assert!((a - b).abs() < 1e-6, "seed {seed}: {a} vs {b}");
        }
    }
}

#[test]
fn gradients_match_central_differences() {
    let m = toy_model(7);
    let p = vec![toy_patches(8)];
    let label = 1;
    let (_, grad) = m.backward(&p, label).unwrap();

    let mut analytic: Vec<(String, Vec<f64>)> = Vec::new();
    grad.visit(&mut |n, a| analytic.push((n.to_string(), a.iter().copied().collect())));

    let loss = |m: &VitModel| {
        let (l, _) = m.backward(&p, label).unwrap();
        l
    };
    let h = 1e-3;
    let mut worst = 0.0f64;
    for (pi, (name, g)) in analytic.iter().enumerate() {
        for (k, &ga) in g.iter().enumerate() {
            let perturbed = |delta: f64| {
                let mut m2 = m.clone();
                let mut idx = 0;
                m2.visit_mut(&mut |_, mut a| {
                    if idx == pi {
                        let flat = a.as_slice_mut().unwrap();
                        flat[k] += delta;
                    }
                    idx += 1;
                });
                loss(&m2)
            };
            let num = (perturbed(h) - perturbed(-h)) / (2.0 * h);
            let rel = (ga - num).abs() / ga.abs().max(num.abs()).max(1e-3);
            worst = worst.max(rel);
            assert!(rel < 1e-4, "{name}[{k}]: analytic {ga}, numeric {num}, rel {rel:.2e}");
        }
    }
    println!("worst relative error {worst:.2e}");
}

#[test]
fn logit_gradient_sums_to_zero() {
    let m = toy_model(2);
    let p = vec![toy_patches(5)];
    let (_, g) = m.backward(&p, 0).unwrap();
    // dL/db_head is exactly dL/dlogits.
    assert!(g.head.b.sum().abs() < 1e-12);
}

#[test]
fn attention_rows_are_distributions() {
    let m = toy_model(4);
    let maps = m.attention_maps(toy_patches(9).view()).unwrap();
    assert_eq!(maps.len(), 2);
    for layer in maps {
        assert_eq!(layer.len(), 2);
        for a in layer {
            assert_eq!(a.dim(), (4, 4));
            assert!(a.iter().all(|&v| v >= 0.0));
            for r in a.rows() {
                assert!((r.sum() - 1.0).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn single_head_is_plain_attention() {
    let cfg = VitConfig { num_heads: 1, ..toy_config() };
    let mut rng = SeededRng::new(11);
    let mut m = VitModel::new(cfg, &mut rng).unwrap();
    m.visit_mut(&mut |_, mut a| a.mapv_inplace(|_| 0.4 * gauss(&mut rng)));
    let p = toy_patches(12);
    let l = &m.layers[0];
    let z = m.patchify_embed(p.view()).unwrap();
    let (a, _) = l.ln1.forward(z.view());
    let (att, _) = scaled_dot_attention(
        l.q.forward(a.view()).view(),
        l.k.forward(a.view()).view(),
        l.v.forward(a.view()).view(),
        1.0 / 8f64.sqrt(),
    );
    let expect = &z + &l.o.forward(att.view());
    let got = l.msa(z.view(), &m.cfg);
    assert!((&got - &expect).iter().all(|d| d.abs() < 1e-12));
    let logits = m.forward(std::slice::from_ref(&p)).unwrap().logits;
    for (a, b) in logits.iter().zip(naive_forward(&m, &p)) {
        assert!((a - b).abs() < 1e-6);
    }
}

#[test]
fn patch_order_is_irrelevant_without_positions() {
    let mut m = toy_model(21);
    let p = toy_patches(22);
    let mut swapped = p.clone();
    for (dst, src) in [0, 1, 2].into_iter().zip([2, 0, 1]) {
        swapped.row_mut(dst).assign(&p.row(src));
    }

    let with_pos = |m: &VitModel| {
        let a = m.forward(std::slice::from_ref(&p)).unwrap().tokens;
        let b = m.forward(&[swapped.clone()]).unwrap().tokens;
        (&a - &b).iter().fold(0.0f64, |acc, v| acc.max(v.abs()))
    };
    assert!(with_pos(&m) > 1e-3, "learned positions must break the symmetry");

    m.pos.fill(0.0);
    assert!(with_pos(&m) <= 1e-5);
}

#[test]
fn zero_learning_rate_changes_nothing() {
    let mut rng = SeededRng::new(5);
    let mut m = VitModel::new(toy_config(), &mut rng).unwrap();
    let before = m.checksum();
    let data: Vec<Sample> = (0..6)
        .map(|i| Sample {
            slots: vec![toy_patches(30 + i)],
            label: (i % 3) as usize,
        })
        .collect();
    let params = TrainParams {
        lr: 0.0,
        weight_decay: 0.0,
        epochs: 2,
        batch_size: 4,
        ..Default::default()
    };
    train(&mut m, &data, &params, &mut SeededRng::new(6)).unwrap();
    assert_eq!(m.checksum(), before);
}

#[test]
fn training_is_deterministic() {
    let data: Vec<Sample> = (0..9)
        .map(|i| Sample {
            slots: vec![toy_patches(50 + i)],
            label: (i % 3) as usize,
        })
        .collect();
    let params = TrainParams {
        lr: 1e-2,
        weight_decay: 1e-3,
        epochs: 3,
        batch_size: 4,
        ..Default::default()
    };
    let run = || {
        let mut m = VitModel::new(toy_config(), &mut SeededRng::new(1)).unwrap();
        let stats = train(&mut m, &data, &params, &mut SeededRng::new(2)).unwrap();
        (m.checksum(), stats)
    };
    let (a, sa) = run();
    let (b, sb) = run();
    assert_eq!(a, b);
    assert_eq!(sa, sb);
    let fresh = VitModel::new(toy_config(), &mut SeededRng::new(1)).unwrap();
    assert_ne!(a, fresh.checksum());
}

#[test]
fn identical_slots_give_identical_tokens() {
    let cfg = VitConfig::micro_path(4).with_dims(16, 2, 1, 32);
    let m = VitModel::new(cfg, &mut SeededRng::new(3)).unwrap();
    let img = normal((8, 16), 1.0, &mut SeededRng::new(4));
    let stack = Array3::from_shape_fn((7, 8, 16), |(_, r, c)| img[[r, c]]);
    let slots = micro_slots(stack.view(), &m.cfg).unwrap();
    let tokens = m.forward(&slots).unwrap().tokens;
    for t in tokens.axis_iter(Axis(0)) {
        assert_eq!(t, tokens.row(0));
    }
}

#[test]
fn patchify_layout() {
    let cfg = VitConfig::micro_path(2);
    let img = Array3::from_shape_fn((1, 8, 16), |(_, r, c)| (r * 16 + c) as f64);
    let p = patchify(img.view(), &cfg).unwrap();
    assert_eq!(p.dim(), (2, 64));
    assert_eq!(p[[0, 0]], 0.0);
    assert_eq!(p[[0, 8]], 16.0);
    assert_eq!(p[[1, 0]], 8.0);
    assert_eq!(p[[1, 63]], 127.0);
    assert!(patchify(Array3::zeros((1, 8, 15)).view(), &cfg).is_err());
}

#[test]
fn paper_geometry() {
    let m = VitConfig::macro_path(66);
    assert_eq!((m.num_patches(), m.patch_len(), m.head_dim()), (64, 8 * 8 * 16, 16));
    let u = VitConfig::micro_path(66);
    assert_eq!((u.num_patches(), u.patch_len(), u.head_tokens), (2, 64, 7));
    assert!(VitConfig { num_heads: 3, ..m.clone() }.validate().is_err());
    assert!(VitConfig { patch_h: 7, ..m }.validate().is_err());
}
