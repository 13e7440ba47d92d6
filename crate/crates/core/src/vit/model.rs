use dsit_tensor::{Tape, Tensor, TensorError, Var, LAYERNORM_EPS};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::params::{BoundParams, ParamGroup, ParamStore};
use super::{ModelError, VitConfig};

const TOKEN_INIT_STD: f64 = 0.02;

/// Fixed standardisation of `[0, 1]` pixels before the patch embedding.
pub const PIXEL_MEAN: f64 = 0.5;
pub const PIXEL_STD: f64 = 0.25;

#[derive(Debug, Clone, PartialEq)]
struct LayerSlots {
    ln1_gain: usize,
    ln1_bias: usize,
    q_weight: usize,
    q_bias: usize,
    k_weight: usize,
    k_bias: usize,
    v_weight: usize,
    v_bias: usize,
    o_weight: usize,
    o_bias: usize,
    ln2_gain: usize,
    ln2_bias: usize,
    fc1_weight: usize,
    fc1_bias: usize,
    fc2_weight: usize,
    fc2_bias: usize,
}

#[derive(Debug, Clone, PartialEq)]
struct Slots {
    patch_weight: usize,
    patch_bias: usize,
    class_token: usize,
    domain_token: usize,
    pos_embed: usize,
    layers: Vec<LayerSlots>,
    norm_gain: usize,
    norm_bias: usize,
    task_weight: usize,
    task_bias: usize,
    domain_weight: usize,
    domain_bias: usize,
}

/// Vision transformer with a class token feeding the task head and a
/// domain token feeding the domain head.
#[derive(Debug, Clone, PartialEq)]
pub struct VitModel {
    cfg: VitConfig,
    params: ParamStore,
    slots: Slots,
}

/// Tape outputs of one forward pass.
pub struct ForwardOutput<'t> {
    pub z_c: Var<'t>,
    pub z_d: Var<'t>,
    pub task_logits: Var<'t>,
    pub domain_logits: Var<'t>,
}

/// Detached forward results.
#[derive(Debug, Clone, PartialEq)]
pub struct Inference {
    pub z_c: Tensor,
    pub z_d: Tensor,
    pub task_logits: Tensor,
    pub domain_logits: Tensor,
}

struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    fn xavier(&mut self, fan_in: usize, fan_out: usize) -> Tensor {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let data = (0..fan_in * fan_out)
            .map(|_| self.rng.random_range(-limit..limit))
            .collect();
        Tensor::new(vec![fan_in, fan_out], data).expect("valid shape")
    }

    fn normal(&mut self, shape: Vec<usize>, std: f64) -> Tensor {
        let dist = Normal::new(0.0, std).expect("positive std");
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| dist.sample(&mut self.rng)).collect()).expect("valid shape")
    }
}

impl VitModel {
    pub fn new(cfg: VitConfig) -> Result<Self, ModelError> {
        cfg.validate()?;
        let mut init = Init {
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
        };
        let d = cfg.embed_dim;
        let m = cfg.mlp_dim();
        let mut p = ParamStore::default();
        use ParamGroup::*;

        let patch_weight = p.push("patch_embed.weight", BackboneRest, init.xavier(cfg.patch_dim(), d));
        let patch_bias = p.push("patch_embed.bias", BackboneRest, Tensor::zeros(vec![d]));
        let class_token = p.push("class_token", BackboneRest, init.normal(vec![d], TOKEN_INIT_STD));
        let domain_token = p.push("domain_token", BackboneRest, init.normal(vec![d], TOKEN_INIT_STD));
        let pos_embed = p.push(
            "pos_embed",
            BackboneRest,
            init.normal(vec![cfg.tokens(), d], TOKEN_INIT_STD),
        );
        let mut layers = Vec::with_capacity(cfg.num_layers);
        for j in 0..cfg.num_layers {
            let name = |s: &str| format!("layers.{j}.{s}");
            layers.push(LayerSlots {
                ln1_gain: p.push(name("ln1.gain"), BackboneRest, Tensor::full(vec![d], 1.0)),
                ln1_bias: p.push(name("ln1.bias"), BackboneRest, Tensor::zeros(vec![d])),
                q_weight: p.push(name("attn.q.weight"), ThetaQ, init.xavier(d, d)),
                q_bias: p.push(name("attn.q.bias"), ThetaQ, Tensor::zeros(vec![d])),
                k_weight: p.push(name("attn.k.weight"), BackboneRest, init.xavier(d, d)),
                k_bias: p.push(name("attn.k.bias"), BackboneRest, Tensor::zeros(vec![d])),
                v_weight: p.push(name("attn.v.weight"), BackboneRest, init.xavier(d, d)),
                v_bias: p.push(name("attn.v.bias"), BackboneRest, Tensor::zeros(vec![d])),
                o_weight: p.push(name("attn.o.weight"), BackboneRest, init.xavier(d, d)),
                o_bias: p.push(name("attn.o.bias"), BackboneRest, Tensor::zeros(vec![d])),
                ln2_gain: p.push(name("ln2.gain"), BackboneRest, Tensor::full(vec![d], 1.0)),
                ln2_bias: p.push(name("ln2.bias"), BackboneRest, Tensor::zeros(vec![d])),
                fc1_weight: p.push(name("mlp.fc1.weight"), BackboneRest, init.xavier(d, m)),
                fc1_bias: p.push(name("mlp.fc1.bias"), BackboneRest, Tensor::zeros(vec![m])),
                fc2_weight: p.push(name("mlp.fc2.weight"), BackboneRest, init.xavier(m, d)),
                fc2_bias: p.push(name("mlp.fc2.bias"), BackboneRest, Tensor::zeros(vec![d])),
            });
        }
        let norm_gain = p.push("norm.gain", BackboneRest, Tensor::full(vec![d], 1.0));
        let norm_bias = p.push("norm.bias", BackboneRest, Tensor::zeros(vec![d]));
        let task_weight = p.push("head_task.weight", HeadTask, init.xavier(d, cfg.num_classes));
        let task_bias = p.push("head_task.bias", HeadTask, Tensor::zeros(vec![cfg.num_classes]));
        let domain_weight = p.push("head_domain.weight", HeadDomain, init.xavier(d, cfg.num_domains));
        let domain_bias = p.push("head_domain.bias", HeadDomain, Tensor::zeros(vec![cfg.num_domains]));

        Ok(Self {
            cfg,
            params: p,
            slots: Slots {
                patch_weight,
                patch_bias,
                class_token,
                domain_token,
                pos_embed,
                layers,
                norm_gain,
                norm_bias,
                task_weight,
                task_bias,
                domain_weight,
                domain_bias,
            },
        })
    }

    pub fn config(&self) -> &VitConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Full forward pass on `batch: [B×C×H×W]` using parameters bound on `tape`.
    pub fn forward<'t>(
        &self,
        tape: &'t Tape,
        bound: &BoundParams<'t>,
        batch: &Tensor,
    ) -> Result<ForwardOutput<'t>, ModelError> {
        let cfg = &self.cfg;
        let b = self.check_batch(batch)?;
        let s = &self.slots;
        let w = |i: usize| bound.var(i);
        let d = cfg.embed_dim;

        let mut patches = patchify_batch(batch, cfg)?;
        patches
            .data_mut()
            .iter_mut()
            .for_each(|v| *v = (*v - PIXEL_MEAN) / PIXEL_STD);
        let patches = tape.constant(&patches);
        let embedded = patches.matmul(w(s.patch_weight))?.add_broadcast(w(s.patch_bias))?;
        let tokens = tape.assemble_tokens(&[w(s.class_token), w(s.domain_token)], embedded, b)?;
        let mut x = tokens
            .reshape(vec![b, cfg.tokens(), d])?
            .add_broadcast(w(s.pos_embed))?
            .reshape(vec![b * cfg.tokens(), d])?;

        for l in &s.layers {
            let h = x.layernorm(w(l.ln1_gain), w(l.ln1_bias), LAYERNORM_EPS)?;
            let q = h.matmul(w(l.q_weight))?.add_broadcast(w(l.q_bias))?;
            let k = h.matmul(w(l.k_weight))?.add_broadcast(w(l.k_bias))?;
            let v = h.matmul(w(l.v_weight))?.add_broadcast(w(l.v_bias))?;
            let a = tape.multi_head_attention(q, k, v, b, cfg.num_heads)?;
            let o = a.matmul(w(l.o_weight))?.add_broadcast(w(l.o_bias))?;
            x = x.add(o)?;
            let h = x.layernorm(w(l.ln2_gain), w(l.ln2_bias), LAYERNORM_EPS)?;
            let m = h
                .matmul(w(l.fc1_weight))?
                .add_broadcast(w(l.fc1_bias))?
                .gelu()?
                .matmul(w(l.fc2_weight))?
                .add_broadcast(w(l.fc2_bias))?;
            x = x.add(m)?;
        }
        let x = x.layernorm(w(s.norm_gain), w(s.norm_bias), LAYERNORM_EPS)?;
        let z_c = x.select_token(b, 0)?;
        let z_d = x.select_token(b, 1)?;
        let task_logits = z_c.matmul(w(s.task_weight))?.add_broadcast(w(s.task_bias))?;
        let domain_logits = z_d.matmul(w(s.domain_weight))?.add_broadcast(w(s.domain_bias))?;
        Ok(ForwardOutput {
            z_c,
            z_d,
            task_logits,
            domain_logits,
        })
    }

    /// Forward pass without gradient tracking.
    pub fn infer(&self, batch: &Tensor) -> Result<Inference, ModelError> {
        let tape = Tape::new();
        let bound = self.params.bind(&tape, &[]);
        let out = self.forward(&tape, &bound, batch)?;
        Ok(Inference {
            z_c: out.z_c.to_tensor(),
            z_d: out.z_d.to_tensor(),
            task_logits: out.task_logits.to_tensor(),
            domain_logits: out.domain_logits.to_tensor(),
        })
    }

    fn check_batch(&self, batch: &Tensor) -> Result<usize, ModelError> {
        let c = &self.cfg;
        let expect = [c.channels, c.image_size, c.image_size];
        let s = batch.shape();
        if s.len() != 4 || s[1..] != expect {
            return Err(ModelError::ShapeMismatch(format!(
                "batch {s:?}, expected [B, {}, {}, {}]",
                expect[0], expect[1], expect[2]
            )));
        }
        Ok(s[0])
    }
}

/// Splits a `[C×H×W]` image into `[N_P × P²·C]` rows in row-major patch
/// order; each row is laid out channel, then row, then column.
pub fn patchify(image: &Tensor, cfg: &VitConfig) -> Result<Tensor, ModelError> {
    let expect = [cfg.channels, cfg.image_size, cfg.image_size];
    if image.shape() != expect {
        return Err(ModelError::ShapeMismatch(format!(
            "image {:?}, expected {expect:?}",
            image.shape()
        )));
    }
    let mut out = Vec::with_capacity(image.numel());
    patchify_into(image.data(), cfg, &mut out);
    Ok(Tensor::new(vec![cfg.num_patches(), cfg.patch_dim()], out)?)
}

/// Inverse of [`patchify`].
pub fn unpatchify(patches: &Tensor, cfg: &VitConfig) -> Result<Tensor, ModelError> {
    if patches.shape() != [cfg.num_patches(), cfg.patch_dim()] {
        return Err(ModelError::ShapeMismatch(format!(
            "patches {:?}, expected [{}, {}]",
            patches.shape(),
            cfg.num_patches(),
            cfg.patch_dim()
        )));
    }
    let (p, g, size) = (cfg.patch_size, cfg.grid(), cfg.image_size);
    let mut img = vec![0.0; cfg.image_numel()];
    let src = patches.data();
    let mut i = 0;
    for py in 0..g {
        for px in 0..g {
            for c in 0..cfg.channels {
                for y in 0..p {
                    for x in 0..p {
                        img[(c * size + py * p + y) * size + px * p + x] = src[i];
                        i += 1;
                    }
                }
            }
        }
    }
    Ok(Tensor::new(vec![cfg.channels, size, size], img)?)
}

fn patchify_into(img: &[f64], cfg: &VitConfig, out: &mut Vec<f64>) {
    let (p, g, size) = (cfg.patch_size, cfg.grid(), cfg.image_size);
    for py in 0..g {
        for px in 0..g {
            for c in 0..cfg.channels {
                for y in 0..p {
                    let start = (c * size + py * p + y) * size + px * p;
                    out.extend_from_slice(&img[start..start + p]);
                }
            }
        }
    }
}

/// Patchifies every image of `[B×C×H×W]` into `[B·N_P × P²·C]`.
pub fn patchify_batch(batch: &Tensor, cfg: &VitConfig) -> Result<Tensor, ModelError> {
    let b = batch.shape()[0];
    let mut out = Vec::with_capacity(batch.numel());
    for img in batch.data().chunks_exact(cfg.image_numel()) {
        patchify_into(img, cfg, &mut out);
    }
    Ok(Tensor::new(vec![b * cfg.num_patches(), cfg.patch_dim()], out)?)
}

impl From<TensorError> for ModelError {
    fn from(e: TensorError) -> Self {
        match e {
            TensorError::NonFinite(op) => ModelError::NonFiniteActivation(op),
            TensorError::ShapeMismatch { op, detail } => ModelError::ShapeMismatch(format!("{op}: {detail}")),
            other => ModelError::Tensor(other),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_patch_is_flattened_image() {
        let cfg = VitConfig {
            image_size: 2,
            patch_size: 2,
            channels: 1,
            ..VitConfig::default()
        };
        let img = Tensor::new(vec![1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let p = patchify(&img, &cfg).unwrap();
        assert_eq!(p.shape(), &[1, 4]);
        assert_eq!(p.data(), img.data());
    }

    #[test]
    fn four_by_four_patch_order() {
        let cfg = VitConfig {
            image_size: 4,
            patch_size: 2,
            channels: 1,
            ..VitConfig::default()
        };
        let img = Tensor::new(vec![1, 4, 4], (0..16).map(f64::from).collect()).unwrap();
        let p = patchify(&img, &cfg).unwrap();
        // patch (py, px) row (y, x) -> pixel (2py + y) * 4 + 2px + x
        for py in 0..2 {
            for px in 0..2 {
                for y in 0..2 {
                    for x in 0..2 {
                        let expect = ((2 * py + y) * 4 + 2 * px + x) as f64;
                        assert_eq!(p.row(py * 2 + px)[y * 2 + x], expect);
                    }
                }
            }
        }
        assert_eq!(p.row(0), &[0.0, 1.0, 4.0, 5.0]);
    }

    #[test]
    fn patchify_round_trip_is_exact() {
        let cfg = VitConfig::default();
        let img = Tensor::new(
            vec![3, 32, 32],
            (0..3 * 32 * 32).map(|i| (i as f64 * 0.013).sin()).collect(),
        )
        .unwrap();
        let back = unpatchify(&patchify(&img, &cfg).unwrap(), &cfg).unwrap();
        assert_eq!(back, img);
    }

    #[test]
    fn rejects_wrong_image_shape() {
        let cfg = VitConfig::default();
        let img = Tensor::zeros(vec![3, 16, 16]);
        assert!(matches!(patchify(&img, &cfg), Err(ModelError::ShapeMismatch(_))));
        let model = VitModel::new(VitConfig {
            embed_dim: 8,
            num_heads: 2,
            num_layers: 1,
            ..VitConfig::default()
        })
        .unwrap();
        assert!(matches!(
            model.infer(&Tensor::zeros(vec![1, 3, 16, 16])),
            Err(ModelError::ShapeMismatch(_))
        ));
    }
}
