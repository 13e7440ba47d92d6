use std::collections::HashMap;
use std::fmt;

use dsit_tensor::{Gradients, Tape, Tensor, Var};
use sha2::{Digest, Sha256};

/// Disjoint parameter groups that receive updates from different losses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ParamGroup {
    /// Every per-layer query projection (weight and bias).
    ThetaQ,
    /// The rest of the backbone: keys, values, output projections, MLPs,
    /// norms, patch embedding, special tokens and positional embedding.
    BackboneRest,
    HeadTask,
    HeadDomain,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 4] = [
        ParamGroup::ThetaQ,
        ParamGroup::BackboneRest,
        ParamGroup::HeadTask,
        ParamGroup::HeadDomain,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ParamGroup::ThetaQ => "theta_Q",
            ParamGroup::BackboneRest => "backbone_rest",
            ParamGroup::HeadTask => "head_task",
            ParamGroup::HeadDomain => "head_domain",
        }
    }
}

impl fmt::Display for ParamGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub group: ParamGroup,
    pub tensor: Tensor,
    velocity: Option<Vec<f64>>,
}

impl Param {
    pub fn velocity(&self) -> Option<&[f64]> {
        self.velocity.as_deref()
    }

    /// Splits out the mutable tensor and its (lazily created) momentum buffer.
    pub fn tensor_and_velocity(&mut self) -> (&mut Tensor, &mut Vec<f64>) {
        let n = self.tensor.numel();
        let v = self.velocity.get_or_insert_with(|| vec![0.0; n]);
        (&mut self.tensor, v)
    }
}

/// All model parameters, in registration order, each tagged with a group.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub(crate) fn push(&mut self, name: impl Into<String>, group: ParamGroup, tensor: Tensor) -> usize {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        self.index.insert(name.clone(), self.params.len());
        self.params.push(Param {
            name,
            group,
            tensor: tensor.with_requires_grad(true),
            velocity: None,
        });
        self.params.len() - 1
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    pub fn at(&self, i: usize) -> &Param {
        &self.params[i]
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.index.get(name).map(|&i| &self.params[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param> {
        self.index.get(name).map(|&i| &mut self.params[i])
    }

    pub fn in_group(&self, group: ParamGroup) -> impl Iterator<Item = &Param> {
        self.params.iter().filter(move |p| p.group == group)
    }

    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.tensor.numel()).sum()
    }

    /// Drops all momentum buffers, as for a fresh optimizer.
    pub fn reset_velocities(&mut self) {
        for p in &mut self.params {
            p.velocity = None;
        }
    }

    pub fn clear_grads(&mut self) {
        for p in &mut self.params {
            p.tensor.clear_grad();
        }
    }

    /// SHA-256 over names and raw bits of every parameter in `groups`.
    pub fn checksum(&self, groups: &[ParamGroup]) -> String {
        let mut hasher = Sha256::new();
        for p in self.params.iter().filter(|p| groups.contains(&p.group)) {
            hasher.update((p.name.len() as u32).to_le_bytes());
            hasher.update(p.name.as_bytes());
            for v in p.tensor.data() {
                hasher.update(v.to_le_bytes());
            }
        }
        hex::encode(hasher.finalize())
    }

    /// Records every parameter on `tape`. Only parameters whose group is in
    /// `trainable` are marked as requiring gradients.
    pub fn bind<'t>(&self, tape: &'t Tape, trainable: &[ParamGroup]) -> BoundParams<'t> {
        let vars = self
            .params
            .iter()
            .map(|p| tape.leaf(&p.tensor, trainable.contains(&p.group)))
            .collect();
        BoundParams { vars }
    }

    /// Copies gradients from a backward pass into the parameters' grad slots.
    /// Parameters without a gradient get their slot cleared.
    pub fn store_grads(&mut self, bound: &BoundParams<'_>, grads: &mut Gradients) {
        for (p, var) in self.params.iter_mut().zip(&bound.vars) {
            match grads.take(*var) {
                Some(g) => p.tensor.set_grad(g).expect("gradient matches parameter"),
                None => p.tensor.clear_grad(),
            }
        }
    }
}

/// Tape handles for a [`ParamStore`], index-aligned with it.
pub struct BoundParams<'t> {
    vars: Vec<Var<'t>>,
}

impl<'t> BoundParams<'t> {
    pub fn var(&self, index: usize) -> Var<'t> {
        self.vars[index]
    }

    pub fn vars(&self) -> &[Var<'t>] {
        &self.vars
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store() -> ParamStore {
        let mut s = ParamStore::default();
        s.push("a", ParamGroup::ThetaQ, Tensor::full(vec![2], 1.0));
        s.push("b", ParamGroup::BackboneRest, Tensor::full(vec![3], 2.0));
        s
    }

    #[test]
    fn checksum_tracks_only_selected_groups() {
        let mut s = store();
        let q = s.checksum(&[ParamGroup::ThetaQ]);
        let rest = s.checksum(&[ParamGroup::BackboneRest]);
        s.get_mut("b").unwrap().tensor.data_mut()[0] = 5.0;
        assert_eq!(q, s.checksum(&[ParamGroup::ThetaQ]));
        assert_ne!(rest, s.checksum(&[ParamGroup::BackboneRest]));
    }

    #[test]
    fn bind_respects_trainable_groups() {
        let s = store();
        let tape = Tape::new();
        let bound = s.bind(&tape, &[ParamGroup::BackboneRest]);
        assert!(!bound.var(0).requires_grad());
        assert!(bound.var(1).requires_grad());
    }

    #[test]
    #[should_panic(expected = "duplicate")]
    fn duplicate_names_rejected() {
        let mut s = store();
        s.push("a", ParamGroup::HeadTask, Tensor::zeros(vec![1]));
    }
}
