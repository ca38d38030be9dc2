//! Named parameter storage shared by the backbone, adapters and heads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::rng::derive_seed;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// What a parameter tensor is, for counting purposes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ParamKind {
    /// Conv kernel or linear weight matrix.
    Weight,
    Bias,
    /// LayerNorm gain/shift.
    NormAffine,
    /// Layer-mixing scalars of the weighted-sum combiner.
    Mixing,
}

/// Where a parameter lives in the model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(tag = "part", rename_all = "kebab-case")]
pub enum Component {
    BackboneConv { block: usize },
    BackboneProjection,
    BackboneLayer { layer: usize },
    CnnAdapter { block: usize },
    Houlsby { layer: usize, site: HoulsbySite },
    WeightedSum,
    Head,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HoulsbySite {
    Attention,
    FeedForward,
}

impl Component {
    pub fn is_backbone(&self) -> bool {
        matches!(
            self,
            Component::BackboneConv { .. } | Component::BackboneProjection | Component::BackboneLayer { .. }
        )
    }

    pub fn is_head(&self) -> bool {
        matches!(self, Component::Head)
    }

    pub fn label(&self) -> String {
        match self {
            Component::BackboneConv { block } => format!("backbone.conv.{block}"),
            Component::BackboneProjection => "backbone.projection".to_string(),
            Component::BackboneLayer { layer } => format!("backbone.layer.{layer}"),
            Component::CnnAdapter { block } => format!("cnn_adapter.{block}"),
            Component::Houlsby { layer, site } => match site {
                HoulsbySite::Attention => format!("houlsby.{layer}.attn"),
                HoulsbySite::FeedForward => format!("houlsby.{layer}.ff"),
            },
            Component::WeightedSum => "weighted_sum".to_string(),
            Component::Head => "head".to_string(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    Normal { std: f64 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub path: String,
    pub shape: Vec<usize>,
    pub component: Component,
    pub kind: ParamKind,
    pub init: Init,
}

impl ParamSpec {
    pub fn new(path: impl Into<String>, shape: impl Into<Vec<usize>>, component: Component, kind: ParamKind, init: Init) -> Self {
        Self {
            path: path.into(),
            shape: shape.into(),
            component,
            kind,
            init,
        }
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    /// Draws the initial values. The stream depends only on `(seed, path)`,
    /// so a parameter's init does not depend on what else is in the model.
    pub fn materialize(&self, seed: u64) -> Tensor {
        let n = self.numel();
        let data = match self.init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Normal { std } => {
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &self.path));
                let normal = Normal::new(0.0, std).expect("finite std");
                (0..n).map(|_| normal.sample(&mut rng)).collect()
            }
        };
        Tensor::new(self.shape.clone(), data).expect("spec shape is valid")
    }
}

#[derive(Clone, Debug)]
pub struct Param {
    pub spec: ParamSpec,
    pub tensor: Tensor,
}

/// Flat, ordered owner of every parameter in one model instance.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, spec: ParamSpec, seed: u64, trainable: bool) -> ParamId {
        let tensor = spec.materialize(seed).with_trainable(trainable);
        self.params.push(Param { spec, tensor });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].tensor
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].tensor
    }

    pub fn spec(&self, id: ParamId) -> &ParamSpec {
        &self.params[id.0].spec
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (ParamId, &mut Param)> {
        self.params.iter_mut().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn find(&self, path: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.spec.path == path).map(ParamId)
    }

    pub fn trainable_ids(&self) -> Vec<ParamId> {
        self.iter().filter(|(_, p)| p.tensor.trainable()).map(|(id, _)| id).collect()
    }

    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.tensor.numel()).sum()
    }

    /// Re-draws the values of `ids` from their declared init.
    pub fn reinit(&mut self, ids: &[ParamId], seed: u64) {
        for &id in ids {
            let p = &mut self.params[id.0];
            let trainable = p.tensor.trainable();
            p.tensor = p.spec.materialize(seed).with_trainable(trainable);
        }
    }

    /// Concatenation of every parameter's values, in store order.
    pub fn flat_values(&self) -> Vec<f64> {
        self.params.iter().flat_map(|p| p.tensor.data().iter().copied()).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn materialize_depends_on_path_and_seed_only() {
        let a = ParamSpec::new("x.weight", [4, 3], Component::Head, ParamKind::Weight, Init::Normal { std: 0.1 });
        let mut b = a.clone();
        b.component = Component::WeightedSum;
        assert_eq!(a.materialize(7), b.materialize(7));
        assert_ne!(a.materialize(7), a.materialize(8));
        let mut c = a.clone();
        c.path = "y.weight".into();
        assert_ne!(a.materialize(7), c.materialize(7));
    }
}
