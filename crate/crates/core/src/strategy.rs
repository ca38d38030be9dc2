//! Declarative PET strategies and their injection into a backbone.

use serde::{Deserialize, Serialize};

use crate::adapters::{CnnAdapter, CnnAdapterSpec, HoulsbyAdapter, HoulsbyAttachment, HoulsbySpec, WeightedSum};
use crate::backbone::{Backbone, BackboneConfig};
use crate::error::{PetError, Result};
use crate::graph::{Graph, NodeId};
use crate::param::{ParamId, ParamSpec, ParamStore};
use crate::tensor::Tensor;

/// CNN adapter placement on the feature extractor.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CnnStrategy {
    /// Adapters go on the last `top_n` conv blocks.
    pub top_n: usize,
    #[serde(default = "one")]
    pub compression: usize,
    #[serde(default = "unit_alpha")]
    pub alpha: f64,
}

fn one() -> usize {
    1
}

fn unit_alpha() -> f64 {
    1.0
}

impl CnnStrategy {
    pub fn all_blocks(config: &BackboneConfig) -> Self {
        Self {
            top_n: config.conv_blocks.len(),
            compression: 1,
            alpha: 1.0,
        }
    }

    pub fn host_blocks(&self, n_blocks: usize) -> std::ops::Range<usize> {
        n_blocks.saturating_sub(self.top_n)..n_blocks
    }

    fn adapter_spec(&self, block: usize) -> CnnAdapterSpec {
        CnnAdapterSpec::new(block).with_compression(self.compression).with_alpha(self.alpha)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum PetStrategy {
    /// Every backbone parameter trainable.
    FineTune,
    /// Backbone frozen; only the downstream head trains.
    Frozen,
    /// Learned softmax mixture of the transformer layer outputs.
    WeightedSum {
        #[serde(default)]
        include_conv_tap: bool,
    },
    Houlsby { houlsby: HoulsbySpec },
    CnnAdapter { cnn: CnnStrategy },
    /// CNN adapters on the feature extractor plus Houlsby adapters in the
    /// transformer layers.
    Chapter { cnn: CnnStrategy, houlsby: HoulsbySpec },
}

impl PetStrategy {
    pub fn name(&self) -> &'static str {
        match self {
            PetStrategy::FineTune => "fine-tune",
            PetStrategy::Frozen => "frozen",
            PetStrategy::WeightedSum { .. } => "weighted-sum",
            PetStrategy::Houlsby { .. } => "houlsby",
            PetStrategy::CnnAdapter { .. } => "cnn-adapter",
            PetStrategy::Chapter { .. } => "chapter",
        }
    }

    /// Chapter with CNN adapters on every conv block and default Houlsby adapters.
    pub fn chapter(config: &BackboneConfig) -> Self {
        PetStrategy::Chapter {
            cnn: CnnStrategy::all_blocks(config),
            houlsby: HoulsbySpec::default(),
        }
    }

    pub fn cnn(&self) -> Option<&CnnStrategy> {
        match self {
            PetStrategy::CnnAdapter { cnn } | PetStrategy::Chapter { cnn, .. } => Some(cnn),
            _ => None,
        }
    }

    pub fn houlsby(&self) -> Option<&HoulsbySpec> {
        match self {
            PetStrategy::Houlsby { houlsby } | PetStrategy::Chapter { houlsby, .. } => Some(houlsby),
            _ => None,
        }
    }

    pub fn trains_backbone(&self) -> bool {
        matches!(self, PetStrategy::FineTune)
    }

    pub fn validate(&self, config: &BackboneConfig) -> Result<()> {
        let n_blocks = config.conv_blocks.len();
        if let Some(cnn) = self.cnn() {
            if cnn.top_n == 0 || cnn.top_n > n_blocks {
                return Err(PetError::config(format!("top_n {} outside [1, {n_blocks}]", cnn.top_n)));
            }
            if !cnn.alpha.is_finite() {
                return Err(PetError::config("alpha must be finite"));
            }
            for b in cnn.host_blocks(n_blocks) {
                cnn.adapter_spec(b).branch_channels(&config.conv_blocks[b])?;
            }
        }
        if let Some(h) = self.houlsby() {
            if h.bottleneck == 0 {
                return Err(PetError::config("Houlsby bottleneck must be >= 1"));
            }
        }
        Ok(())
    }

    /// Parameter declarations this strategy adds on top of the backbone.
    pub fn adapter_specs(&self, config: &BackboneConfig) -> Result<Vec<ParamSpec>> {
        self.validate(config)?;
        let mut specs = Vec::new();
        if let Some(cnn) = self.cnn() {
            for b in cnn.host_blocks(config.conv_blocks.len()) {
                specs.extend(cnn.adapter_spec(b).param_specs(&config.conv_blocks[b])?);
            }
        }
        if let Some(h) = self.houlsby() {
            for l in 0..config.n_layers {
                for &site in h.placement.sites() {
                    specs.extend(h.param_specs(l, site, config.hidden)?);
                }
            }
        }
        if let PetStrategy::WeightedSum { include_conv_tap } = self {
            specs.push(WeightedSum::param_spec(config.n_layers + usize::from(*include_conv_tap)));
        }
        Ok(specs)
    }
}

/// Per-tensor trainability, in parameter-store order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FreezeMask {
    pub entries: Vec<(String, bool)>,
}

impl FreezeMask {
    pub fn from_store(store: &ParamStore) -> Self {
        Self {
            entries: store
                .iter()
                .map(|(_, p)| (p.spec.path.clone(), p.tensor.trainable()))
                .collect(),
        }
    }

    pub fn is_trainable(&self, path: &str) -> Option<bool> {
        self.entries.iter().find(|(p, _)| p == path).map(|(_, t)| *t)
    }

    pub fn trainable_count(&self) -> usize {
        self.entries.iter().filter(|(_, t)| *t).count()
    }
}

/// A backbone with a strategy's adapters attached and its freeze mask applied.
#[derive(Clone, Debug)]
pub struct InjectedModel {
    strategy: PetStrategy,
    backbone: Backbone,
    cnn: Vec<Option<CnnAdapter>>,
    houlsby: Vec<HoulsbyAttachment>,
    weighted_sum: Option<WeightedSum>,
}

/// Attaches the strategy's adapters (near-identity init from `seed`) and sets
/// trainability: backbone tensors train only under FineTune, adapter tensors
/// always train.
pub fn apply_strategy(mut backbone: Backbone, strategy: &PetStrategy, seed: u64) -> Result<InjectedModel> {
    let config = backbone.config().clone();
    strategy.validate(&config)?;
    let train_backbone = strategy.trains_backbone();
    for (_, p) in backbone.params_mut().iter_mut() {
        if p.spec.component.is_backbone() {
            p.tensor.set_trainable(train_backbone);
        }
    }
    let store = backbone.params_mut();
    let mut cnn = Vec::new();
    if let Some(c) = strategy.cnn() {
        let n = config.conv_blocks.len();
        cnn = vec![None; n];
        for b in c.host_blocks(n) {
            cnn[b] = Some(CnnAdapter::attach(store, c.adapter_spec(b), &config.conv_blocks[b], seed)?);
        }
    }
    let mut houlsby = Vec::new();
    if let Some(h) = strategy.houlsby() {
        for l in 0..config.n_layers {
            let mut slot = HoulsbyAttachment::default();
            for &site in h.placement.sites() {
                let adapter = HoulsbyAdapter::attach(store, h, l, site, config.hidden, seed)?;
                match site {
                    crate::param::HoulsbySite::Attention => slot.attn = Some(adapter),
                    crate::param::HoulsbySite::FeedForward => slot.ff = Some(adapter),
                }
            }
            houlsby.push(slot);
        }
    }
    let weighted_sum = match strategy {
        PetStrategy::WeightedSum { include_conv_tap } => Some(WeightedSum::attach(
            store,
            config.n_layers + usize::from(*include_conv_tap),
            seed,
        )?),
        _ => None,
    };
    Ok(InjectedModel {
        strategy: strategy.clone(),
        backbone,
        cnn,
        houlsby,
        weighted_sum,
    })
}

impl InjectedModel {
    pub fn strategy(&self) -> &PetStrategy {
        &self.strategy
    }

    pub fn backbone(&self) -> &Backbone {
        &self.backbone
    }

    pub fn config(&self) -> &BackboneConfig {
        self.backbone.config()
    }

    pub fn params(&self) -> &ParamStore {
        self.backbone.params()
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        self.backbone.params_mut()
    }

    pub fn cnn_adapters(&self) -> &[Option<CnnAdapter>] {
        &self.cnn
    }

    pub fn houlsby_adapters(&self) -> &[HoulsbyAttachment] {
        &self.houlsby
    }

    pub fn weighted_sum(&self) -> Option<&WeightedSum> {
        self.weighted_sum.as_ref()
    }

    pub fn freeze_mask(&self) -> FreezeMask {
        FreezeMask::from_store(self.params())
    }

    /// Ids of every adapter tensor (CNN, Houlsby and mixing weights).
    pub fn adapter_param_ids(&self) -> Vec<ParamId> {
        let mut ids: Vec<ParamId> = self.cnn.iter().flatten().flat_map(CnnAdapter::param_ids).collect();
        for slot in &self.houlsby {
            ids.extend(slot.attn.iter().chain(slot.ff.iter()).flat_map(HoulsbyAdapter::param_ids));
        }
        ids.extend(self.weighted_sum.iter().map(|w| w.weights));
        ids
    }

    /// Re-applies near-identity init to every adapter tensor.
    pub fn reinit_adapters(&mut self, seed: u64) {
        let ids = self.adapter_param_ids();
        crate::adapters::init_near_identity(self.params_mut(), &ids, seed);
    }

    pub fn feature_extract<'a>(&'a self, g: &mut Graph<'a>, wave: NodeId) -> Result<NodeId> {
        self.backbone.feature_extract(g, wave, &self.cnn)
    }

    /// Every tap a head may read: the per-layer transformer outputs, preceded
    /// by the projected conv features when the weighted sum includes them.
    pub fn taps<'a>(&'a self, g: &mut Graph<'a>, wave: NodeId) -> Result<Vec<NodeId>> {
        let frames = self.feature_extract(g, wave)?;
        let projected = self.backbone.project(g, frames)?;
        let layers = self.backbone.encode_projected(g, projected, &self.houlsby)?;
        let include_conv = matches!(self.strategy, PetStrategy::WeightedSum { include_conv_tap: true });
        Ok(if include_conv {
            std::iter::once(projected).chain(layers).collect()
        } else {
            layers
        })
    }

    /// Per-layer hidden states for a waveform, as plain tensors.
    pub fn forward_values(&self, wave: &Tensor) -> Result<Vec<Tensor>> {
        let mut g = Graph::new(crate::graph::Precision::F64);
        let w = g.constant(wave.clone());
        let taps = self.taps(&mut g, w)?;
        Ok(taps.iter().map(|&t| g.value(t).clone()).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn top_n_selects_last_blocks() {
        let c = CnnStrategy {
            top_n: 2,
            compression: 1,
            alpha: 1.0,
        };
        assert_eq!(c.host_blocks(7), 5..7);
    }

    #[test]
    fn invalid_strategies_are_config_errors() {
        let config = BackboneConfig::mini();
        let bad_top = PetStrategy::CnnAdapter {
            cnn: CnnStrategy {
                top_n: 4,
                compression: 1,
                alpha: 1.0,
            },
        };
        assert!(matches!(bad_top.validate(&config), Err(PetError::Config(_))));
        let bad_n = PetStrategy::CnnAdapter {
            cnn: CnnStrategy {
                top_n: 1,
                compression: 3,
                alpha: 1.0,
            },
        };
        assert!(matches!(bad_n.validate(&config), Err(PetError::Config(_))));
    }

    #[test]
    fn freeze_mask_follows_strategy() {
        let config = BackboneConfig::mini();
        let ft = apply_strategy(Backbone::build(config.clone(), 0).unwrap(), &PetStrategy::FineTune, 0).unwrap();
        assert!(ft.freeze_mask().entries.iter().all(|(_, t)| *t));
        let fr = apply_strategy(Backbone::build(config.clone(), 0).unwrap(), &PetStrategy::Frozen, 0).unwrap();
        assert_eq!(fr.freeze_mask().trainable_count(), 0);
        let ch = apply_strategy(Backbone::build(config.clone(), 0).unwrap(), &PetStrategy::chapter(&config), 0).unwrap();
        for (path, t) in &ch.freeze_mask().entries {
            assert_eq!(*t, path.starts_with("adapter."), "{path}");
        }
        assert_eq!(ch.cnn_adapters().iter().flatten().count(), 3);
        assert_eq!(ch.houlsby_adapters().len(), 2);
    }

    #[test]
    fn strategy_serde_uses_kind_tag() {
        let s: PetStrategy = serde_json::from_str(r#"{"kind":"cnn-adapter","cnn":{"top_n":3,"compression":2}}"#).unwrap();
        assert_eq!(s.cnn().unwrap().alpha, 1.0);
        assert!(serde_json::from_str::<PetStrategy>(r#"{"kind":"cnn-adapter","cnn":{"top_n":3,"n":2}}"#).is_err());
    }
}
