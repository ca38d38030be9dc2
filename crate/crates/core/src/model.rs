//! Downstream classification heads on top of an injected backbone.

use serde::{Deserialize, Serialize};

use crate::accounting::{count_params, Convention, ModelLayout, ParamReport};
use crate::error::{PetError, Result};
use crate::graph::{BackwardFault, Graph, NodeId, Precision};
use crate::param::{Component, Init, ParamId, ParamKind, ParamSpec, ParamStore};
use crate::strategy::{InjectedModel, PetStrategy};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HeadKind {
    /// Mean over frames of the last transformer layer, then an affine map.
    MeanPoolLinear,
    /// Softmax-weighted sum of the taps, then mean pool and affine map.
    WeightedSumMeanPoolLinear,
}

impl HeadKind {
    pub fn for_strategy(strategy: &PetStrategy) -> Self {
        match strategy {
            PetStrategy::WeightedSum { .. } => HeadKind::WeightedSumMeanPoolLinear,
            _ => HeadKind::MeanPoolLinear,
        }
    }

    pub fn param_specs(hidden: usize, n_classes: usize) -> Vec<ParamSpec> {
        vec![
            ParamSpec::new(
                "head.weight",
                [hidden, n_classes],
                Component::Head,
                ParamKind::Weight,
                Init::Normal {
                    std: 1.0 / (hidden as f64).sqrt(),
                },
            ),
            ParamSpec::new("head.bias", [n_classes], Component::Head, ParamKind::Bias, Init::Zeros),
        ]
    }
}

#[derive(Clone, Debug)]
pub struct Head {
    pub kind: HeadKind,
    pub weight: ParamId,
    pub bias: ParamId,
    pub n_classes: usize,
}

/// An injected model plus a trainable head.
#[derive(Clone, Debug)]
pub struct TaskModel {
    model: InjectedModel,
    head: Head,
    precision: Precision,
}

pub fn attach_head(mut model: InjectedModel, kind: HeadKind, n_classes: usize, seed: u64) -> Result<TaskModel> {
    if n_classes < 2 {
        return Err(PetError::config(format!("need at least 2 classes, got {n_classes}")));
    }
    let has_mixing = model.weighted_sum().is_some();
    if has_mixing != (kind == HeadKind::WeightedSumMeanPoolLinear) {
        return Err(PetError::config(format!(
            "head {kind:?} does not fit strategy {}",
            model.strategy().name()
        )));
    }
    let hidden = model.config().hidden;
    let store = model.params_mut();
    let mut ids = HeadKind::param_specs(hidden, n_classes).into_iter().map(|s| store.push(s, seed, true));
    let (weight, bias) = (ids.next().unwrap(), ids.next().unwrap());
    Ok(TaskModel {
        model,
        head: Head {
            kind,
            weight,
            bias,
            n_classes,
        },
        precision: Precision::F64,
    })
}

impl TaskModel {
    pub fn injected(&self) -> &InjectedModel {
        &self.model
    }

    pub fn head(&self) -> &Head {
        &self.head
    }

    pub fn params(&self) -> &ParamStore {
        self.model.params()
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        self.model.params_mut()
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    pub fn set_precision(&mut self, precision: Precision) {
        self.precision = precision;
    }

    pub fn n_classes(&self) -> usize {
        self.head.n_classes
    }

    pub fn layout(&self) -> ModelLayout {
        ModelLayout::from_store(self.params())
    }

    pub fn param_report(&self, convention: Convention) -> ParamReport {
        count_params(&self.layout(), convention)
    }

    /// Logits node for a `[1, L]` waveform.
    pub fn logits<'a>(&'a self, g: &mut Graph<'a>, wave: NodeId) -> Result<NodeId> {
        let taps = self.model.taps(g, wave)?;
        let store = self.params();
        let pooled_in = match (self.head.kind, self.model.weighted_sum()) {
            (HeadKind::WeightedSumMeanPoolLinear, Some(ws)) => ws.forward(g, store, &taps)?,
            _ => *taps.last().ok_or_else(|| PetError::config("backbone has no layers"))?,
        };
        let pooled = g.mean_rows(pooled_in)?;
        let w = g.param(store, self.head.weight);
        let b = g.param(store, self.head.bias);
        g.linear(pooled, w, Some(b))
    }

    pub fn logits_value(&self, wave: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new(self.precision);
        let w = g.constant(wave.clone());
        let out = self.logits(&mut g, w)?;
        Ok(g.value(out).clone())
    }

    pub fn predict(&self, wave: &Tensor) -> Result<usize> {
        let logits = self.logits_value(wave)?;
        Ok(argmax(logits.data()))
    }

    /// Cross-entropy loss and per-tensor gradients for one labelled waveform.
    pub fn loss_and_grads(&self, wave: &Tensor, label: usize) -> Result<(f64, Vec<Option<Vec<f64>>>)> {
        self.loss_and_grads_with(wave, label, BackwardFault::None)
    }

    #[doc(hidden)]
    pub fn loss_and_grads_with(&self, wave: &Tensor, label: usize, fault: BackwardFault) -> Result<(f64, Vec<Option<Vec<f64>>>)> {
        let mut g = Graph::new(self.precision).with_fault(fault);
        let w = g.constant(wave.clone());
        let logits = self.logits(&mut g, w)?;
        let loss = g.cross_entropy(logits, label)?;
        let value = g.value(loss).data()[0];
        let grads = g.backward(loss)?;
        Ok((value, grads.into_param_grads(self.params().len())))
    }

    /// Mean loss over several labelled waveforms.
    pub fn batch_loss(&self, batch: &[(&Tensor, usize)], fault: BackwardFault) -> Result<(f64, Vec<Option<Vec<f64>>>)> {
        let n = self.params().len();
        let mut total = 0.0;
        let mut acc: Vec<Option<Vec<f64>>> = vec![None; n];
        for (wave, label) in batch {
            let (l, grads) = self.loss_and_grads_with(wave, *label, fault)?;
            total += l;
            accumulate(&mut acc, grads);
        }
        let k = batch.len().max(1) as f64;
        scale_grads(&mut acc, 1.0 / k);
        Ok((total / k, acc))
    }
}

pub(crate) fn accumulate(acc: &mut [Option<Vec<f64>>], grads: Vec<Option<Vec<f64>>>) {
    for (slot, g) in acc.iter_mut().zip(grads) {
        let Some(g) = g else { continue };
        match slot {
            Some(a) => a.iter_mut().zip(&g).for_each(|(x, y)| *x += y),
            None => *slot = Some(g),
        }
    }
}

pub(crate) fn scale_grads(acc: &mut [Option<Vec<f64>>], factor: f64) {
    for g in acc.iter_mut().flatten() {
        g.iter_mut().for_each(|v| *v *= factor);
    }
}

/// Index of the largest value; the first one on ties.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{Backbone, BackboneConfig};
    use crate::strategy::apply_strategy;

    fn task(strategy: PetStrategy) -> TaskModel {
        let config = BackboneConfig::mini();
        let m = apply_strategy(Backbone::build(config, 1).unwrap(), &strategy, 2).unwrap();
        attach_head(m, HeadKind::for_strategy(&strategy), 10, 3).unwrap()
    }

    #[test]
    fn head_adds_affine_count() {
        let t = task(PetStrategy::Frozen);
        let r = t.param_report(Convention::All);
        assert_eq!(r.head, 330);
        assert_eq!(r.trainable_total, 0);
    }

    #[test]
    fn logits_have_one_entry_per_class() {
        let t = task(PetStrategy::WeightedSum { include_conv_tap: false });
        let wave = Tensor::full([1, 400], 0.1);
        assert_eq!(t.logits_value(&wave).unwrap().shape(), &[10]);
    }

    #[test]
    fn mismatched_head_is_rejected() {
        let config = BackboneConfig::mini();
        let m = apply_strategy(Backbone::build(config, 1).unwrap(), &PetStrategy::Frozen, 2).unwrap();
        assert!(attach_head(m, HeadKind::WeightedSumMeanPoolLinear, 10, 3).is_err());
    }

    #[test]
    fn frozen_gradients_reach_only_the_head() {
        let t = task(PetStrategy::Frozen);
        let wave = Tensor::full([1, 400], 0.1);
        let (_, grads) = t.loss_and_grads(&wave, 3).unwrap();
        for (id, p) in t.params().iter() {
            assert_eq!(grads[id.0].is_some(), p.spec.component.is_head(), "{}", p.spec.path);
        }
    }

    #[test]
    fn argmax_prefers_first_tie() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
    }
}
