//! HuBERT-shaped backbone: a strided 1-D conv feature extractor, a feature
//! projection, and a stack of pre-LN transformer encoder layers.
//!
//! Every backbone parameter is frozen when built. Adapter branches are passed
//! in by the caller and must live in the backbone's own [`ParamStore`].

use serde::{Deserialize, Serialize};

use crate::adapters::{CnnAdapter, HoulsbyAttachment};
use crate::error::{PetError, Result};
use crate::graph::{Graph, NodeId};
use crate::param::{Component, Init, ParamId, ParamKind, ParamSpec, ParamStore};
use crate::tensor::Tensor;

pub const LN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvBlockSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    #[serde(default = "default_true")]
    pub has_norm: bool,
}

fn default_true() -> bool {
    true
}

impl ConvBlockSpec {
    pub const fn new(in_channels: usize, out_channels: usize, kernel: usize, stride: usize) -> Self {
        Self {
            in_channels,
            out_channels,
            kernel,
            stride,
            has_norm: true,
        }
    }

    /// Valid-convolution output length, 0 if the input is shorter than the kernel.
    pub fn output_length(&self, l_in: usize) -> usize {
        if self.stride == 0 || l_in < self.kernel {
            0
        } else {
            (l_in - self.kernel) / self.stride + 1
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneConfig {
    pub conv_blocks: Vec<ConvBlockSpec>,
    pub n_layers: usize,
    pub hidden: usize,
    pub n_heads: usize,
    pub ff_dim: usize,
}

/// Chained valid-conv length through `blocks`; 0 if any stage underflows.
pub fn output_length(blocks: &[ConvBlockSpec], l_in: usize) -> usize {
    blocks.iter().fold(l_in, |len, b| if len == 0 { 0 } else { b.output_length(len) })
}

impl BackboneConfig {
    /// Conv stack 512 channels, kernels (10,3,3,3,3,2,2), strides (5,2,2,2,2,2,2);
    /// 12 layers of width 768 with 12 heads and feed-forward width 3072.
    pub fn hubert_base_shape() -> Self {
        let mut conv_blocks = vec![ConvBlockSpec::new(1, 512, 10, 5)];
        conv_blocks.extend((0..4).map(|_| ConvBlockSpec::new(512, 512, 3, 2)));
        conv_blocks.extend((0..2).map(|_| ConvBlockSpec::new(512, 512, 2, 2)));
        Self {
            conv_blocks,
            n_layers: 12,
            hidden: 768,
            n_heads: 12,
            ff_dim: 3072,
        }
    }

    pub fn mini() -> Self {
        Self {
            conv_blocks: vec![
                ConvBlockSpec::new(1, 16, 10, 5),
                ConvBlockSpec::new(16, 16, 3, 2),
                ConvBlockSpec::new(16, 16, 2, 2),
            ],
            n_layers: 2,
            hidden: 32,
            n_heads: 4,
            ff_dim: 64,
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "hubert-base-shape" => Ok(Self::hubert_base_shape()),
            "mini" => Ok(Self::mini()),
            other => Err(PetError::config(format!(
                "unknown backbone preset {other:?} (expected \"hubert-base-shape\" or \"mini\")"
            ))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let first = self
            .conv_blocks
            .first()
            .ok_or_else(|| PetError::config("backbone needs at least one conv block"))?;
        if first.in_channels != 1 {
            return Err(PetError::config("first conv block must take a single waveform channel"));
        }
        for (i, b) in self.conv_blocks.iter().enumerate() {
            if b.in_channels == 0 || b.out_channels == 0 || b.kernel == 0 || b.stride == 0 {
                return Err(PetError::config(format!("conv block {i} has a zero dimension")));
            }
        }
        for (i, pair) in self.conv_blocks.windows(2).enumerate() {
            if pair[0].out_channels != pair[1].in_channels {
                return Err(PetError::config(format!(
                    "conv block {} outputs {} channels but block {} expects {}",
                    i,
                    pair[0].out_channels,
                    i + 1,
                    pair[1].in_channels
                )));
            }
        }
        if self.n_layers == 0 || self.hidden == 0 || self.ff_dim == 0 || self.n_heads == 0 {
            return Err(PetError::config("transformer dimensions must be positive"));
        }
        if !self.hidden.is_multiple_of(self.n_heads) {
            return Err(PetError::config(format!(
                "hidden {} is not divisible by {} heads",
                self.hidden, self.n_heads
            )));
        }
        Ok(())
    }

    pub fn feature_channels(&self) -> usize {
        self.conv_blocks.last().map_or(0, |b| b.out_channels)
    }

    pub fn downsampling(&self) -> usize {
        self.conv_blocks.iter().map(|b| b.stride).product()
    }

    pub fn output_length(&self, l_in: usize) -> usize {
        output_length(&self.conv_blocks, l_in)
    }

    /// Every backbone parameter in construction order.
    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let mut specs = Vec::new();
        let normal = |fan_in: usize| Init::Normal {
            std: 1.0 / (fan_in as f64).sqrt(),
        };
        for (i, b) in self.conv_blocks.iter().enumerate() {
            let comp = Component::BackboneConv { block: i };
            specs.push(ParamSpec::new(
                format!("backbone.conv.{i}.weight"),
                [b.out_channels, b.in_channels, b.kernel],
                comp,
                ParamKind::Weight,
                normal(b.in_channels * b.kernel),
            ));
            if b.has_norm {
                specs.push(norm_spec(format!("backbone.conv.{i}.norm.gain"), b.out_channels, comp, Init::Ones));
                specs.push(norm_spec(format!("backbone.conv.{i}.norm.shift"), b.out_channels, comp, Init::Zeros));
            }
        }
        let c = self.feature_channels();
        let h = self.hidden;
        let comp = Component::BackboneProjection;
        specs.push(norm_spec("backbone.projection.norm.gain".into(), c, comp, Init::Ones));
        specs.push(norm_spec("backbone.projection.norm.shift".into(), c, comp, Init::Zeros));
        specs.push(ParamSpec::new("backbone.projection.weight", [c, h], comp, ParamKind::Weight, normal(c)));
        specs.push(ParamSpec::new("backbone.projection.bias", [h], comp, ParamKind::Bias, Init::Zeros));
        for l in 0..self.n_layers {
            let comp = Component::BackboneLayer { layer: l };
            let p = |name: &str| format!("backbone.layer.{l}.{name}");
            specs.push(norm_spec(p("attn_norm.gain"), h, comp, Init::Ones));
            specs.push(norm_spec(p("attn_norm.shift"), h, comp, Init::Zeros));
            for proj in ["q", "k", "v", "o"] {
                specs.push(ParamSpec::new(p(&format!("attn.{proj}.weight")), [h, h], comp, ParamKind::Weight, normal(h)));
                specs.push(ParamSpec::new(p(&format!("attn.{proj}.bias")), [h], comp, ParamKind::Bias, Init::Zeros));
            }
            specs.push(norm_spec(p("ff_norm.gain"), h, comp, Init::Ones));
            specs.push(norm_spec(p("ff_norm.shift"), h, comp, Init::Zeros));
            specs.push(ParamSpec::new(p("ff1.weight"), [h, self.ff_dim], comp, ParamKind::Weight, normal(h)));
            specs.push(ParamSpec::new(p("ff1.bias"), [self.ff_dim], comp, ParamKind::Bias, Init::Zeros));
            specs.push(ParamSpec::new(p("ff2.weight"), [self.ff_dim, h], comp, ParamKind::Weight, normal(self.ff_dim)));
            specs.push(ParamSpec::new(p("ff2.bias"), [h], comp, ParamKind::Bias, Init::Zeros));
        }
        specs
    }
}

fn norm_spec(path: String, c: usize, component: Component, init: Init) -> ParamSpec {
    ParamSpec::new(path, [c], component, ParamKind::NormAffine, init)
}

#[derive(Clone, Copy, Debug)]
pub struct NormIds {
    pub gain: ParamId,
    pub shift: ParamId,
}

#[derive(Clone, Copy, Debug)]
pub struct ConvBlockIds {
    pub weight: ParamId,
    pub norm: Option<NormIds>,
}

#[derive(Clone, Copy, Debug)]
pub struct ProjectionIds {
    pub norm: NormIds,
    pub weight: ParamId,
    pub bias: ParamId,
}

#[derive(Clone, Copy, Debug)]
pub struct AttentionIds {
    pub q: (ParamId, ParamId),
    pub k: (ParamId, ParamId),
    pub v: (ParamId, ParamId),
    pub o: (ParamId, ParamId),
}

#[derive(Clone, Copy, Debug)]
pub struct LayerIds {
    pub attn_norm: NormIds,
    pub attn: AttentionIds,
    pub ff_norm: NormIds,
    pub ff1: (ParamId, ParamId),
    pub ff2: (ParamId, ParamId),
}

/// Built backbone. Owns the parameter store that adapters and heads are
/// later appended to.
#[derive(Clone, Debug)]
pub struct Backbone {
    config: BackboneConfig,
    params: ParamStore,
    conv: Vec<ConvBlockIds>,
    projection: ProjectionIds,
    layers: Vec<LayerIds>,
}

impl Backbone {
    /// Materializes every parameter (all frozen) from `seed`.
    pub fn build(config: BackboneConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        for spec in config.param_specs() {
            params.push(spec, seed, false);
        }
        let id = |path: String| params.find(&path).expect("path declared in param_specs");
        let norm = |prefix: String| NormIds {
            gain: id(format!("{prefix}.gain")),
            shift: id(format!("{prefix}.shift")),
        };
        let conv = config
            .conv_blocks
            .iter()
            .enumerate()
            .map(|(i, b)| ConvBlockIds {
                weight: id(format!("backbone.conv.{i}.weight")),
                norm: b.has_norm.then(|| norm(format!("backbone.conv.{i}.norm"))),
            })
            .collect();
        let projection = ProjectionIds {
            norm: norm("backbone.projection.norm".into()),
            weight: id("backbone.projection.weight".into()),
            bias: id("backbone.projection.bias".into()),
        };
        let layers = (0..config.n_layers)
            .map(|l| {
                let pair = |name: &str| {
                    (
                        id(format!("backbone.layer.{l}.{name}.weight")),
                        id(format!("backbone.layer.{l}.{name}.bias")),
                    )
                };
                LayerIds {
                    attn_norm: norm(format!("backbone.layer.{l}.attn_norm")),
                    attn: AttentionIds {
                        q: pair("attn.q"),
                        k: pair("attn.k"),
                        v: pair("attn.v"),
                        o: pair("attn.o"),
                    },
                    ff_norm: norm(format!("backbone.layer.{l}.ff_norm")),
                    ff1: pair("ff1"),
                    ff2: pair("ff2"),
                }
            })
            .collect();
        Ok(Self {
            config,
            params,
            conv,
            projection,
            layers,
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn conv_ids(&self) -> &[ConvBlockIds] {
        &self.conv
    }

    pub fn layer_ids(&self) -> &[LayerIds] {
        &self.layers
    }

    /// Number of parameters declared by the backbone itself.
    pub fn backbone_param_count(&self) -> usize {
        self.params
            .iter()
            .filter(|(_, p)| p.spec.component.is_backbone())
            .map(|(_, p)| p.tensor.numel())
            .sum()
    }

    fn conv_block<'a>(&'a self, g: &mut Graph<'a>, i: usize, x: NodeId) -> Result<NodeId> {
        let spec = &self.config.conv_blocks[i];
        let ids = &self.conv[i];
        let w = g.param(&self.params, ids.weight);
        let y = g.conv1d(x, w, None, spec.stride)?;
        let y = match ids.norm {
            Some(n) => channel_norm(g, &self.params, y, n)?,
            None => y,
        };
        g.gelu(y)
    }

    /// Runs the conv stack on a `[1, L]` waveform. Block `i` outputs
    /// `ConvBlock_i(x) + adapter_i(x)` when `adapters[i]` is set; `adapters`
    /// may be empty.
    pub fn feature_extract<'a>(
        &'a self,
        g: &mut Graph<'a>,
        wave: NodeId,
        adapters: &'a [Option<CnnAdapter>],
    ) -> Result<NodeId> {
        if !adapters.is_empty() && adapters.len() != self.conv.len() {
            return Err(PetError::config(format!(
                "{} adapter slots for {} conv blocks",
                adapters.len(),
                self.conv.len()
            )));
        }
        let mut x = wave;
        for i in 0..self.conv.len() {
            let spec = &self.config.conv_blocks[i];
            let len = g.shape(x).get(1).copied().unwrap_or(0);
            if len < spec.kernel {
                return Err(PetError::EmptyOutput {
                    op: "feature_extract",
                    detail: format!("conv block {i} (kernel {}) receives only {len} samples", spec.kernel),
                });
            }
            let host = self.conv_block(g, i, x)?;
            x = match adapters.get(i).and_then(Option::as_ref) {
                Some(adapter) => {
                    let branch = adapter.forward(g, &self.params, x)?;
                    if g.shape(branch) != g.shape(host) {
                        return Err(PetError::Alignment(format!(
                            "adapter on block {i} yields {:?}, host yields {:?}",
                            g.shape(branch),
                            g.shape(host)
                        )));
                    }
                    g.add(host, branch)?
                }
                None => host,
            };
        }
        Ok(x)
    }

    /// Frozen feature projection `[C, T] -> [T, hidden]`.
    pub fn project<'a>(&'a self, g: &mut Graph<'a>, frames: NodeId) -> Result<NodeId> {
        let ids = &self.projection;
        let t = g.transpose(frames)?;
        let gain = g.param(&self.params, ids.norm.gain);
        let shift = g.param(&self.params, ids.norm.shift);
        let n = g.layer_norm(t, gain, shift, LN_EPS)?;
        let w = g.param(&self.params, ids.weight);
        let b = g.param(&self.params, ids.bias);
        g.linear(n, w, Some(b))
    }

    /// Transformer stack on projected features; returns every layer's output.
    pub fn encode_projected<'a>(
        &'a self,
        g: &mut Graph<'a>,
        x: NodeId,
        houlsby: &'a [HoulsbyAttachment],
    ) -> Result<Vec<NodeId>> {
        if !houlsby.is_empty() && houlsby.len() != self.layers.len() {
            return Err(PetError::config(format!(
                "{} Houlsby slots for {} layers",
                houlsby.len(),
                self.layers.len()
            )));
        }
        let mut x = x;
        let mut taps = Vec::with_capacity(self.layers.len());
        for (l, ids) in self.layers.iter().enumerate() {
            let attach = houlsby.get(l);
            let n = layer_norm(g, &self.params, x, ids.attn_norm)?;
            let mut a = multi_head_self_attention(g, &self.params, n, &ids.attn, self.config.n_heads)?;
            if let Some(adapter) = attach.and_then(|h| h.attn.as_ref()) {
                a = adapter.forward(g, &self.params, a)?;
            }
            x = g.add(x, a)?;

            let n = layer_norm(g, &self.params, x, ids.ff_norm)?;
            let (w1, b1) = (g.param(&self.params, ids.ff1.0), g.param(&self.params, ids.ff1.1));
            let f = g.linear(n, w1, Some(b1))?;
            let f = g.gelu(f)?;
            let (w2, b2) = (g.param(&self.params, ids.ff2.0), g.param(&self.params, ids.ff2.1));
            let mut f = g.linear(f, w2, Some(b2))?;
            if let Some(adapter) = attach.and_then(|h| h.ff.as_ref()) {
                f = adapter.forward(g, &self.params, f)?;
            }
            x = g.add(x, f)?;
            taps.push(x);
        }
        Ok(taps)
    }

    /// Projects `[C, T]` frames and runs every transformer layer.
    pub fn encode<'a>(&'a self, g: &mut Graph<'a>, frames: NodeId, houlsby: &'a [HoulsbyAttachment]) -> Result<Vec<NodeId>> {
        let x = self.project(g, frames)?;
        self.encode_projected(g, x, houlsby)
    }

    /// Convenience wrapper: waveform in, per-layer hidden states out.
    pub fn hidden_states(&self, wave: &Tensor) -> Result<Vec<Tensor>> {
        let mut g = Graph::new(crate::graph::Precision::F64);
        let w = g.constant(wave.clone());
        let frames = self.feature_extract(&mut g, w, &[])?;
        let taps = self.encode(&mut g, frames, &[])?;
        Ok(taps.iter().map(|&t| g.value(t).clone()).collect())
    }
}

fn layer_norm<'a>(g: &mut Graph<'a>, store: &'a ParamStore, x: NodeId, ids: NormIds) -> Result<NodeId> {
    let gain = g.param(store, ids.gain);
    let shift = g.param(store, ids.shift);
    g.layer_norm(x, gain, shift, LN_EPS)
}

/// LayerNorm over the channel axis of a `[C, L]` tensor, at each time step.
pub fn channel_norm<'a>(g: &mut Graph<'a>, store: &'a ParamStore, x: NodeId, ids: NormIds) -> Result<NodeId> {
    let t = g.transpose(x)?;
    let n = layer_norm(g, store, t, ids)?;
    g.transpose(n)
}

/// Bidirectional scaled dot-product attention over `[T, H]`.
pub fn multi_head_self_attention<'a>(
    g: &mut Graph<'a>,
    store: &'a ParamStore,
    x: NodeId,
    ids: &AttentionIds,
    n_heads: usize,
) -> Result<NodeId> {
    let hidden = *g.shape(x).last().unwrap_or(&0);
    if n_heads == 0 || !hidden.is_multiple_of(n_heads) {
        return Err(PetError::config(format!("hidden {hidden} is not divisible by {n_heads} heads")));
    }
    let head_dim = hidden / n_heads;
    let proj = |g: &mut Graph<'a>, (w, b): (ParamId, ParamId)| {
        let (w, b) = (g.param(store, w), g.param(store, b));
        g.linear(x, w, Some(b))
    };
    let q = proj(g, ids.q)?;
    let k = proj(g, ids.k)?;
    let v = proj(g, ids.v)?;
    let scale = 1.0 / (head_dim as f64).sqrt();
    let mut heads = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let qh = g.slice_cols(q, h * head_dim, head_dim)?;
        let kh = g.slice_cols(k, h * head_dim, head_dim)?;
        let vh = g.slice_cols(v, h * head_dim, head_dim)?;
        let kt = g.transpose(kh)?;
        let scores = g.matmul(qh, kt)?;
        let scores = g.scale(scores, scale)?;
        let weights = g.softmax(scores)?;
        heads.push(g.matmul(weights, vh)?);
    }
    let cat = if heads.len() == 1 { heads[0] } else { g.concat_cols(&heads)? };
    let (w, b) = (g.param(store, ids.o.0), g.param(store, ids.o.1));
    g.linear(cat, w, Some(b))
}
