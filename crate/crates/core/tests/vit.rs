use dsit::vit::{patchify, unpatchify, PIXEL_MEAN, PIXEL_STD, ParamGroup, VitConfig, VitModel};
use dsit_tensor::{Tape, Tensor};
use proptest::prelude::*;

fn tiny_cfg() -> VitConfig {
    VitConfig {
        image_size: 4,
        channels: 1,
        patch_size: 2,
        embed_dim: 4,
        num_heads: 1,
        num_layers: 1,
        num_classes: 3,
        num_domains: 2,
        seed: 11,
    }
}

fn small_cfg() -> VitConfig {
    VitConfig {
        image_size: 8,
        channels: 2,
        patch_size: 4,
        embed_dim: 8,
        num_heads: 2,
        num_layers: 2,
        num_classes: 3,
        num_domains: 4,
        seed: 5,
    }
}

fn image_batch(cfg: &VitConfig, b: usize, salt: f64) -> Tensor {
    let n = b * cfg.image_numel();
    Tensor::new(
        vec![b, cfg.channels, cfg.image_size, cfg.image_size],
        (0..n).map(|i| 0.5 + 0.5 * ((i as f64 + salt) * 0.731).sin()).collect(),
    )
    .unwrap()
}

fn param(model: &VitModel, name: &str) -> Vec<f64> {
    model.params().get(name).unwrap().tensor.data().to_vec()
}

fn linear(x: &[f64], w: &[f64], b: &[f64], out: usize) -> Vec<f64> {
    let inp = x.len();
    (0..out)
        .map(|j| b[j] + (0..inp).map(|i| x[i] * w[i * out + j]).sum::<f64>())
        .collect()
}

fn layernorm(x: &[f64], g: &[f64], b: &[f64]) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let s = (var + 1e-5).sqrt();
    x.iter().enumerate().map(|(i, v)| (v - mean) / s * g[i] + b[i]).collect()
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
}

/// Straight-line single-layer, single-head transformer on one image.
fn unrolled(model: &VitModel, image: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>) {
    let cfg = model.config();
    let d = cfg.embed_dim;
    let img = Tensor::new(vec![cfg.channels, cfg.image_size, cfg.image_size], image.to_vec()).unwrap();
    let patches = patchify(&img, cfg).unwrap();
    let pe_w = param(model, "patch_embed.weight");
    let pe_b = param(model, "patch_embed.bias");
    let pos = param(model, "pos_embed");
    let mut tokens = vec![param(model, "class_token"), param(model, "domain_token")];
    for r in 0..cfg.num_patches() {
        let row: Vec<f64> = patches.row(r).iter().map(|v| (v - PIXEL_MEAN) / PIXEL_STD).collect();
        tokens.push(linear(&row, &pe_w, &pe_b, d));
    }
    for (t, tok) in tokens.iter_mut().enumerate() {
        for j in 0..d {
            tok[j] += pos[t * d + j];
        }
    }
    let p = |s: &str| param(model, &format!("layers.0.{s}"));
    let h: Vec<Vec<f64>> = tokens.iter().map(|t| layernorm(t, &p("ln1.gain"), &p("ln1.bias"))).collect();
    let q: Vec<_> = h.iter().map(|x| linear(x, &p("attn.q.weight"), &p("attn.q.bias"), d)).collect();
    let k: Vec<_> = h.iter().map(|x| linear(x, &p("attn.k.weight"), &p("attn.k.bias"), d)).collect();
    let v: Vec<_> = h.iter().map(|x| linear(x, &p("attn.v.weight"), &p("attn.v.bias"), d)).collect();
    let n = tokens.len();
    for i in 0..n {
        let scores: Vec<f64> = (0..n)
            .map(|j| (0..d).map(|c| q[i][c] * k[j][c]).sum::<f64>() / (d as f64).sqrt())
            .collect();
        let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
        let z: f64 = e.iter().sum();
        let a: Vec<f64> = (0..d).map(|c| (0..n).map(|j| e[j] / z * v[j][c]).sum()).collect();
        let o = linear(&a, &p("attn.o.weight"), &p("attn.o.bias"), d);
        for c in 0..d {
            tokens[i][c] += o[c];
        }
    }
    for tok in tokens.iter_mut() {
        let h = layernorm(tok, &p("ln2.gain"), &p("ln2.bias"));
        let m = cfg.mlp_dim();
        let hidden: Vec<f64> = linear(&h, &p("mlp.fc1.weight"), &p("mlp.fc1.bias"), m)
            .into_iter()
            .map(gelu)
            .collect();
        let out = linear(&hidden, &p("mlp.fc2.weight"), &p("mlp.fc2.bias"), d);
        for c in 0..d {
            tok[c] += out[c];
        }
    }
    let g = param(model, "norm.gain");
    let b = param(model, "norm.bias");
    let z_c = layernorm(&tokens[0], &g, &b);
    let z_d = layernorm(&tokens[1], &g, &b);
    let task = linear(&z_c, &param(model, "head_task.weight"), &param(model, "head_task.bias"), cfg.num_classes);
    let dom = linear(
        &z_d,
        &param(model, "head_domain.weight"),
        &param(model, "head_domain.bias"),
        cfg.num_domains,
    );
    (z_c, z_d, task, dom)
}

fn randomize_all(model: &mut VitModel, salt: f64) {
    // Non-trivial biases and norms so the oracle exercises every term.
    for (k, p) in model.params_mut().iter_mut().enumerate() {
        for (i, v) in p.tensor.data_mut().iter_mut().enumerate() {
            *v += 0.1 * ((i as f64 * 1.37 + k as f64 * 0.71 + salt).sin());
        }
    }
}

#[test]
fn forward_matches_hand_unrolled_computation() {
    let mut model = VitModel::new(tiny_cfg()).unwrap();
    randomize_all(&mut model, 0.3);
    let x = image_batch(model.config(), 2, 1.0);
    let out = model.infer(&x).unwrap();
    let per = model.config().image_numel();
    for s in 0..2 {
        let (z_c, z_d, task, dom) = unrolled(&model, &x.data()[s * per..(s + 1) * per]);
        for (got, want) in [
            (out.z_c.row(s), &z_c),
            (out.z_d.row(s), &z_d),
            (out.task_logits.row(s), &task),
            (out.domain_logits.row(s), &dom),
        ] {
            for (g, w) in got.iter().zip(want.iter()) {
                assert!((g - w).abs() < 1e-10, "{g} vs {w}");
            }
        }
    }
}

#[test]
fn output_shapes_follow_config() {
    let model = VitModel::new(small_cfg()).unwrap();
    let out = model.infer(&image_batch(model.config(), 3, 0.0)).unwrap();
    assert_eq!(out.z_c.shape(), &[3, 8]);
    assert_eq!(out.z_d.shape(), &[3, 8]);
    assert_eq!(out.task_logits.shape(), &[3, 3]);
    assert_eq!(out.domain_logits.shape(), &[3, 4]);
}

#[test]
fn identical_inputs_give_identical_rows() {
    let model = VitModel::new(small_cfg()).unwrap();
    let one = image_batch(model.config(), 1, 2.0);
    let two = Tensor::stack(&[&one.clone().reshape(vec![2, 8, 8]).unwrap(), &one.reshape(vec![2, 8, 8]).unwrap()]).unwrap();
    let out = model.infer(&two).unwrap();
    assert_eq!(out.z_c.row(0), out.z_c.row(1));
    assert_eq!(out.z_d.row(0), out.z_d.row(1));
    assert_eq!(out.task_logits.row(0), out.task_logits.row(1));
    assert_eq!(out.domain_logits.row(0), out.domain_logits.row(1));
}

#[test]
fn seeded_construction_and_forward_are_deterministic() {
    let a = VitModel::new(small_cfg()).unwrap();
    let b = VitModel::new(small_cfg()).unwrap();
    assert_eq!(a.params(), b.params());
    let x = image_batch(a.config(), 2, 0.5);
    assert_eq!(a.infer(&x).unwrap(), b.infer(&x).unwrap());
    let c = VitModel::new(VitConfig {
        seed: 6,
        ..small_cfg()
    })
    .unwrap();
    assert_ne!(a.params(), c.params());
}

#[test]
fn patch_permutation_leaves_special_tokens_unchanged_without_positions() {
    let mut model = VitModel::new(small_cfg()).unwrap();
    model
        .params_mut()
        .get_mut("pos_embed")
        .unwrap()
        .tensor
        .data_mut()
        .fill(0.0);
    let cfg = model.config().clone();
    let x = image_batch(&cfg, 1, 3.0);
    let img = x.clone().reshape(vec![cfg.channels, cfg.image_size, cfg.image_size]).unwrap();
    let patches = patchify(&img, &cfg).unwrap();
    let order = [3, 0, 2, 1];
    let rows: Vec<f64> = order.iter().flat_map(|&r| patches.row(r).to_vec()).collect();
    let permuted = unpatchify(&Tensor::new(patches.shape().to_vec(), rows).unwrap(), &cfg).unwrap();
    let a = model.infer(&x).unwrap();
    let b = model
        .infer(&permuted.reshape(vec![1, cfg.channels, cfg.image_size, cfg.image_size]).unwrap())
        .unwrap();
    for (u, v) in a.z_c.data().iter().zip(b.z_c.data()) {
        assert!((u - v).abs() < 1e-10);
    }
    for (u, v) in a.z_d.data().iter().zip(b.z_d.data()) {
        assert!((u - v).abs() < 1e-10);
    }
}

#[test]
fn query_gradient_matches_finite_differences() {
    let mut model = VitModel::new(small_cfg()).unwrap();
    let x = image_batch(model.config(), 2, 4.0);
    let tape = Tape::new();
    let bound = model.params().bind(&tape, &[ParamGroup::ThetaQ]);
    let out = model.forward(&tape, &bound, &x).unwrap();
    let grads = tape.backward(out.task_logits.sum().unwrap()).unwrap();
    let objective = |m: &VitModel| m.infer(&x).unwrap().task_logits.data().iter().sum::<f64>();
    let h = 1e-5;
    for layer in 0..2 {
        for suffix in ["weight", "bias"] {
            let name = format!("layers.{layer}.attn.q.{suffix}");
            let idx = model.params().iter().position(|p| p.name == name).unwrap();
            let analytic = grads.get(bound.var(idx)).unwrap().to_vec();
            for i in 0..analytic.len() {
                let orig = model.params().at(idx).tensor.data()[i];
                model.params_mut().get_mut(&name).unwrap().tensor.data_mut()[i] = orig + h;
                let up = objective(&model);
                model.params_mut().get_mut(&name).unwrap().tensor.data_mut()[i] = orig - h;
                let down = objective(&model);
                model.params_mut().get_mut(&name).unwrap().tensor.data_mut()[i] = orig;
                let numeric = (up - down) / (2.0 * h);
                let rel = (analytic[i] - numeric).abs() / analytic[i].abs().max(numeric.abs()).max(1e-3);
                assert!(rel < 1e-4, "{name}[{i}]: {} vs {numeric}", analytic[i]);
            }
        }
    }
}

#[test]
fn query_group_holds_exactly_the_query_projections() {
    let model = VitModel::new(VitConfig::default()).unwrap();
    let groups = model.group_params();
    let q = &groups.iter().find(|(g, _)| *g == ParamGroup::ThetaQ).unwrap().1;
    let weights: Vec<_> = q.iter().filter(|n| n.ends_with("weight")).collect();
    assert_eq!(weights.len(), 4);
    assert!(q.iter().all(|n| n.contains(".attn.q.")));
    for p in model.params().iter() {
        if p.name.contains(".attn.k.") || p.name.contains(".attn.v.") {
            assert_eq!(p.group, ParamGroup::BackboneRest);
        }
    }
}

#[test]
fn groups_partition_all_parameters() {
    let model = VitModel::new(VitConfig::default()).unwrap();
    let mut names: Vec<&str> = model.group_params().into_iter().flat_map(|(_, n)| n).collect();
    let total = names.len();
    names.sort_unstable();
    names.dedup();
    assert_eq!(names.len(), total);
    assert_eq!(total, model.params().len());
}

#[test]
fn parameter_count_matches_closed_form() {
    for cfg in [VitConfig::default(), small_cfg(), tiny_cfg()] {
        let model = VitModel::new(cfg.clone()).unwrap();
        assert_eq!(model.params().numel(), cfg.parameter_count());
    }
    // 192·64+64 + 2·64 + 18·64 + 4·(4·4160 + 256 + 16640+256 + 16384+64) + 128 + 260 + 325
    assert_eq!(VitConfig::default().parameter_count(), 214_281);
}

#[test]
fn heads_read_only_their_own_token() {
    let mut model = VitModel::new(small_cfg()).unwrap();
    let x = image_batch(model.config(), 1, 0.1);
    let before = model.infer(&x).unwrap();
    for v in model.params_mut().get_mut("head_domain.weight").unwrap().tensor.data_mut() {
        *v += 1.0;
    }
    let after = model.infer(&x).unwrap();
    assert_eq!(before.task_logits, after.task_logits);
    assert_ne!(before.domain_logits, after.domain_logits);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn patchify_round_trips(seed in 0u64..1000, g in prop::sample::select(vec![1usize, 2, 4, 8])) {
        let cfg = VitConfig { image_size: 32, patch_size: 32 / g, ..VitConfig::default() };
        let data: Vec<f64> = (0..cfg.image_numel()).map(|i| ((i as u64 ^ seed) % 97) as f64).collect();
        let img = Tensor::new(vec![3, 32, 32], data).unwrap();
        let p = patchify(&img, &cfg).unwrap();
        prop_assert_eq!(p.shape(), &[g * g, cfg.patch_dim()]);
        prop_assert_eq!(unpatchify(&p, &cfg).unwrap(), img);
    }
}
