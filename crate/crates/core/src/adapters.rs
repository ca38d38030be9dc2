//! Adapter modules: CNN adapter branches for conv blocks, Houlsby bottleneck
//! adapters for transformer layers, and the softmax-weighted layer combiner.
//!
//! All three follow the residual update `h <- h + alpha * delta_h`. At
//! near-identity init every branch outputs exactly zero, so an injected model
//! computes its base model's function bit for bit.

use serde::{Deserialize, Serialize};

use crate::backbone::{ConvBlockSpec, NormIds};
use crate::error::{PetError, Result};
use crate::graph::{Graph, NodeId};
use crate::param::{Component, HoulsbySite, Init, ParamId, ParamKind, ParamSpec, ParamStore};

/// Standard deviation of the Houlsby down-projection at init.
pub const HOULSBY_DOWN_STD: f64 = 1e-2;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CnnAdapterSpec {
    pub host_block: usize,
    pub compression: usize,
    /// Defaults to the host block's kernel.
    pub kernel: Option<usize>,
    /// Defaults to the host block's stride.
    pub stride: Option<usize>,
    pub alpha: f64,
}

impl CnnAdapterSpec {
    pub fn new(host_block: usize) -> Self {
        Self {
            host_block,
            compression: 1,
            kernel: None,
            stride: None,
            alpha: 1.0,
        }
    }

    pub fn with_compression(mut self, n: usize) -> Self {
        self.compression = n;
        self
    }

    pub fn with_alpha(mut self, alpha: f64) -> Self {
        self.alpha = alpha;
        self
    }

    /// Output channels of the adapter's own convolution (before tiling).
    pub fn branch_channels(&self, host: &ConvBlockSpec) -> Result<usize> {
        if self.compression == 0 || !host.out_channels.is_multiple_of(self.compression) {
            return Err(PetError::config(format!(
                "compression {} does not divide {} output channels of block {}",
                self.compression, host.out_channels, self.host_block
            )));
        }
        Ok(host.out_channels / self.compression)
    }

    pub fn param_specs(&self, host: &ConvBlockSpec) -> Result<Vec<ParamSpec>> {
        let c = self.branch_channels(host)?;
        let k = self.kernel.unwrap_or(host.kernel);
        if k == 0 || self.stride == Some(0) {
            return Err(PetError::config("adapter kernel and stride must be positive"));
        }
        let b = self.host_block;
        let comp = Component::CnnAdapter { block: b };
        Ok(vec![
            ParamSpec::new(format!("adapter.cnn.{b}.conv.weight"), [c, host.in_channels, k], comp, ParamKind::Weight, Init::Zeros),
            ParamSpec::new(format!("adapter.cnn.{b}.conv.bias"), [c], comp, ParamKind::Bias, Init::Zeros),
            ParamSpec::new(format!("adapter.cnn.{b}.norm.gain"), [c], comp, ParamKind::NormAffine, Init::Ones),
            ParamSpec::new(format!("adapter.cnn.{b}.norm.shift"), [c], comp, ParamKind::NormAffine, Init::Zeros),
        ])
    }
}

/// Conv1d -> LayerNorm -> GELU branch run in parallel with a host conv block.
#[derive(Clone, Debug)]
pub struct CnnAdapter {
    pub spec: CnnAdapterSpec,
    pub stride: usize,
    pub weight: ParamId,
    pub bias: ParamId,
    pub norm: NormIds,
}

impl CnnAdapter {
    /// Appends trainable, near-identity parameters to `store`.
    pub fn attach(store: &mut ParamStore, spec: CnnAdapterSpec, host: &ConvBlockSpec, seed: u64) -> Result<Self> {
        let specs = spec.param_specs(host)?;
        let mut ids = specs.into_iter().map(|s| store.push(s, seed, true));
        let (weight, bias, gain, shift) = (
            ids.next().unwrap(),
            ids.next().unwrap(),
            ids.next().unwrap(),
            ids.next().unwrap(),
        );
        Ok(Self {
            spec,
            stride: spec.stride.unwrap_or(host.stride),
            weight,
            bias,
            norm: NormIds { gain, shift },
        })
    }

    pub fn param_ids(&self) -> [ParamId; 4] {
        [self.weight, self.bias, self.norm.gain, self.norm.shift]
    }

    /// `alpha * tile(GELU(LN(conv(x_in))))`, shaped like the host block output.
    pub fn forward<'a>(&self, g: &mut Graph<'a>, store: &'a ParamStore, x_in: NodeId) -> Result<NodeId> {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        let y = g.conv1d(x_in, w, Some(b), self.stride)?;
        let y = crate::backbone::channel_norm(g, store, y, self.norm)?;
        let y = g.gelu(y)?;
        let y = compress_concat(g, y, self.spec.compression)?;
        if self.spec.alpha == 1.0 {
            Ok(y)
        } else {
            g.scale(y, self.spec.alpha)
        }
    }
}

/// Tiles a `[C/n, L]` branch output `n` times along channels, giving `[C, L]`
/// where channel `c` is input channel `c mod (C/n)`. Identity for `n = 1`.
pub fn compress_concat(g: &mut Graph<'_>, y: NodeId, n: usize) -> Result<NodeId> {
    match n {
        0 => Err(PetError::config("compression factor must be >= 1")),
        1 => Ok(y),
        _ => g.tile_rows(y, n),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HoulsbyPlacement {
    /// Only after the second feed-forward projection.
    #[default]
    AfterSecondFf,
    /// After the attention output and after the second feed-forward projection.
    AfterAttentionAndFf,
}

impl HoulsbyPlacement {
    pub fn sites(self) -> &'static [HoulsbySite] {
        match self {
            HoulsbyPlacement::AfterSecondFf => &[HoulsbySite::FeedForward],
            HoulsbyPlacement::AfterAttentionAndFf => &[HoulsbySite::Attention, HoulsbySite::FeedForward],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HoulsbySpec {
    pub bottleneck: usize,
    pub placement: HoulsbyPlacement,
}

impl Default for HoulsbySpec {
    fn default() -> Self {
        Self {
            bottleneck: 32,
            placement: HoulsbyPlacement::AfterSecondFf,
        }
    }
}

impl HoulsbySpec {
    pub fn param_specs(&self, layer: usize, site: HoulsbySite, hidden: usize) -> Result<Vec<ParamSpec>> {
        if self.bottleneck == 0 {
            return Err(PetError::config("Houlsby bottleneck must be >= 1"));
        }
        let b = self.bottleneck;
        let comp = Component::Houlsby { layer, site };
        let tag = match site {
            HoulsbySite::Attention => "attn",
            HoulsbySite::FeedForward => "ff",
        };
        let p = |name: &str| format!("adapter.houlsby.{layer}.{tag}.{name}");
        Ok(vec![
            ParamSpec::new(p("down.weight"), [hidden, b], comp, ParamKind::Weight, Init::Normal { std: HOULSBY_DOWN_STD }),
            ParamSpec::new(p("down.bias"), [b], comp, ParamKind::Bias, Init::Zeros),
            ParamSpec::new(p("up.weight"), [b, hidden], comp, ParamKind::Weight, Init::Zeros),
            ParamSpec::new(p("up.bias"), [hidden], comp, ParamKind::Bias, Init::Zeros),
        ])
    }

    /// Parameters of one adapter instance, bias included.
    pub fn params_per_adapter(&self, hidden: usize) -> usize {
        2 * hidden * self.bottleneck + self.bottleneck + hidden
    }
}

/// `h + up(GELU(down(h)))`, position-wise.
#[derive(Clone, Debug)]
pub struct HoulsbyAdapter {
    pub down: (ParamId, ParamId),
    pub up: (ParamId, ParamId),
}

impl HoulsbyAdapter {
    pub fn attach(store: &mut ParamStore, spec: &HoulsbySpec, layer: usize, site: HoulsbySite, hidden: usize, seed: u64) -> Result<Self> {
        let ids: Vec<ParamId> = spec
            .param_specs(layer, site, hidden)?
            .into_iter()
            .map(|s| store.push(s, seed, true))
            .collect();
        Ok(Self {
            down: (ids[0], ids[1]),
            up: (ids[2], ids[3]),
        })
    }

    pub fn param_ids(&self) -> [ParamId; 4] {
        [self.down.0, self.down.1, self.up.0, self.up.1]
    }

    pub fn forward<'a>(&self, g: &mut Graph<'a>, store: &'a ParamStore, h: NodeId) -> Result<NodeId> {
        let (dw, db) = (g.param(store, self.down.0), g.param(store, self.down.1));
        let z = g.linear(h, dw, Some(db))?;
        let z = g.gelu(z)?;
        let (uw, ub) = (g.param(store, self.up.0), g.param(store, self.up.1));
        let delta = g.linear(z, uw, Some(ub))?;
        g.add(h, delta)
    }
}

/// Houlsby adapters inserted into one transformer layer.
#[derive(Clone, Debug, Default)]
pub struct HoulsbyAttachment {
    pub attn: Option<HoulsbyAdapter>,
    pub ff: Option<HoulsbyAdapter>,
}

/// One mixing scalar per tapped layer, combined through a softmax.
#[derive(Clone, Debug)]
pub struct WeightedSum {
    pub weights: ParamId,
    pub count: usize,
}

impl WeightedSum {
    pub fn param_spec(count: usize) -> ParamSpec {
        ParamSpec::new("weighted_sum.weights", [count], Component::WeightedSum, ParamKind::Mixing, Init::Zeros)
    }

    pub fn attach(store: &mut ParamStore, count: usize, seed: u64) -> Result<Self> {
        if count == 0 {
            return Err(PetError::config("weighted sum needs at least one layer"));
        }
        Ok(Self {
            weights: store.push(Self::param_spec(count), seed, true),
            count,
        })
    }

    /// `sum_k softmax(w)_k * layer_k`.
    pub fn forward<'a>(&self, g: &mut Graph<'a>, store: &'a ParamStore, layers: &[NodeId]) -> Result<NodeId> {
        weighted_sum(g, store, self.weights, layers)
    }
}

pub fn weighted_sum<'a>(g: &mut Graph<'a>, store: &'a ParamStore, weights: ParamId, layers: &[NodeId]) -> Result<NodeId> {
    if layers.is_empty() || store.get(weights).numel() != layers.len() {
        return Err(PetError::config(format!(
            "{} mixing weights for {} layers",
            store.get(weights).numel(),
            layers.len()
        )));
    }
    let w = g.param(store, weights);
    let coeffs = g.softmax(w)?;
    g.combine(coeffs, layers)
}

/// Re-draws adapter parameters from their declared near-identity init: CNN
/// adapter conv weight and bias zero with LN gain 1 and shift 0; Houlsby
/// down-projection N(0, 0.01^2) with zero bias, up-projection and bias zero.
pub fn init_near_identity(store: &mut ParamStore, ids: &[ParamId], seed: u64) {
    store.reinit(ids, seed);
}
