//! Central-difference verification of analytic gradients.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{PetError, Result};
use crate::graph::{BackwardFault, Graph, NodeId, Precision};
use crate::model::TaskModel;
use crate::param::{ParamId, ParamStore};
use crate::rng::derive_seed;
use crate::tensor::Tensor;

pub const DEFAULT_EPS: f64 = 1e-5;

/// Anything holding an indexable list of tensors that can be perturbed in place.
pub trait ParamAccess {
    fn param_count(&self) -> usize;
    fn param_name(&self, i: usize) -> String;
    fn param(&self, i: usize) -> &Tensor;
    fn param_mut(&mut self, i: usize) -> &mut Tensor;
}

impl ParamAccess for ParamStore {
    fn param_count(&self) -> usize {
        self.len()
    }
    fn param_name(&self, i: usize) -> String {
        self.spec(ParamId(i)).path.clone()
    }
    fn param(&self, i: usize) -> &Tensor {
        self.get(ParamId(i))
    }
    fn param_mut(&mut self, i: usize) -> &mut Tensor {
        self.get_mut(ParamId(i))
    }
}

impl ParamAccess for [Tensor] {
    fn param_count(&self) -> usize {
        self.len()
    }
    fn param_name(&self, i: usize) -> String {
        format!("param[{i}]")
    }
    fn param(&self, i: usize) -> &Tensor {
        &self[i]
    }
    fn param_mut(&mut self, i: usize) -> &mut Tensor {
        &mut self[i]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct WorstEntry {
    pub path: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// max over entries of `|a - n| / max(1, |a|, |n|)`
    pub max_rel_error: f64,
    pub worst: Option<WorstEntry>,
    pub entries_checked: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_error < tolerance
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / 1f64.max(analytic.abs()).max(numeric.abs())
}

/// Compares the analytic gradient returned by `f` with central differences
/// for every entry of every trainable tensor in `params`.
///
/// `f` evaluates the loss at the current parameter values and returns it with
/// one optional gradient per tensor (absent means zero).
pub fn grad_check<S, F>(params: &mut S, eps: f64, f: F) -> Result<GradCheckReport>
where
    S: ParamAccess + ?Sized,
    F: Fn(&S) -> Result<(f64, Vec<Option<Vec<f64>>>)>,
{
    if !(eps > 0.0) {
        return Err(PetError::Numeric(format!("eps must be positive, got {eps}")));
    }
    let (_, analytic) = f(params)?;
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        entries_checked: 0,
    };
    for p in 0..params.param_count() {
        if !params.param(p).trainable() {
            continue;
        }
        let n = params.param(p).numel();
        let grad = analytic.get(p).and_then(|g| g.as_deref());
        if let Some(g) = grad {
            if g.len() != n {
                return Err(PetError::dim("grad_check", format!("gradient for {} has wrong length", params.param_name(p))));
            }
            if let Some(bad) = g.iter().position(|v| !v.is_finite()) {
                return Err(PetError::Numeric(format!(
                    "non-finite gradient at {}[{bad}]",
                    params.param_name(p)
                )));
            }
        }
        for j in 0..n {
            let original = params.param(p).data()[j];
            params.param_mut(p).data_mut()[j] = original + eps;
            let plus = f(params).map(|r| r.0);
            params.param_mut(p).data_mut()[j] = original - eps;
            let minus = f(params).map(|r| r.0);
            params.param_mut(p).data_mut()[j] = original;
            let numeric = (plus? - minus?) / (2.0 * eps);
            let a = grad.map_or(0.0, |g| g[j]);
            let err = relative_error(a, numeric);
            if !err.is_finite() {
                return Err(PetError::Numeric(format!(
                    "non-finite difference at {}[{j}]",
                    params.param_name(p)
                )));
            }
            report.entries_checked += 1;
            if report.worst.is_none() || err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = Some(WorstEntry {
                    path: params.param_name(p),
                    index: j,
                    analytic: a,
                    numeric,
                });
            }
        }
    }
    Ok(report)
}

/// Gradient check for a scalar function written directly against the tape.
/// Every tensor in `params` becomes a leaf that requires a gradient when its
/// `trainable` flag is set.
pub fn grad_check_graph<F>(params: &mut [Tensor], eps: f64, build: F) -> Result<GradCheckReport>
where
    F: for<'g> Fn(&mut Graph<'g>, &[NodeId]) -> Result<NodeId>,
{
    grad_check(params, eps, |ps: &[Tensor]| {
        let mut g = Graph::new(Precision::F64);
        let leaves: Vec<NodeId> = ps.iter().map(|t| g.input(t.clone(), t.trainable())).collect();
        let out = build(&mut g, &leaves)?;
        let loss = g.value(out).data()[0];
        let grads = g.backward(out)?;
        let per = leaves.iter().map(|&l| grads.wrt(l).map(<[f64]>::to_vec)).collect();
        Ok((loss, per))
    })
}

/// Adds `N(0, std^2)` noise to every trainable tensor, so that a check does
/// not run at a point where adapter gradients vanish by construction.
pub fn perturb_trainable(store: &mut ParamStore, std: f64, seed: u64) -> Result<()> {
    if std == 0.0 {
        return Ok(());
    }
    let normal = Normal::new(0.0, std).map_err(|e| PetError::config(format!("perturbation std {std}: {e}")))?;
    for (_, p) in store.iter_mut() {
        if !p.tensor.trainable() {
            continue;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &format!("perturb.{}", p.spec.path)));
        for v in p.tensor.data_mut() {
            *v += normal.sample(&mut rng);
        }
    }
    Ok(())
}

impl ParamAccess for TaskModel {
    fn param_count(&self) -> usize {
        self.params().len()
    }
    fn param_name(&self, i: usize) -> String {
        self.params().param_name(i)
    }
    fn param(&self, i: usize) -> &Tensor {
        self.params().get(ParamId(i))
    }
    fn param_mut(&mut self, i: usize) -> &mut Tensor {
        self.params_mut().get_mut(ParamId(i))
    }
}

/// Checks the cross-entropy gradient of a full task model (backbone,
/// adapters and head) on one labelled waveform, always in 64-bit mode.
pub fn check_task_model(model: &mut TaskModel, wave: &Tensor, label: usize, eps: f64, fault: BackwardFault) -> Result<GradCheckReport> {
    model.set_precision(Precision::F64);
    grad_check(model, eps, |m: &TaskModel| m.loss_and_grads_with(wave, label, fault))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_at_three() {
        let mut ps = vec![Tensor::scalar(3.0).with_trainable(true)];
        let report = grad_check_graph(&mut ps, DEFAULT_EPS, |g, l| g.mul(l[0], l[0])).unwrap();
        let worst = report.worst.unwrap();
        assert_eq!(worst.analytic, 6.0);
        assert!((worst.numeric - 6.0).abs() < 1e-8);
        assert_eq!(report.entries_checked, 1);
    }

    #[test]
    fn frozen_tensors_are_skipped() {
        let mut ps = vec![Tensor::scalar(3.0), Tensor::scalar(2.0).with_trainable(true)];
        let report = grad_check_graph(&mut ps, DEFAULT_EPS, |g, l| g.mul(l[0], l[1])).unwrap();
        assert_eq!(report.entries_checked, 1);
        assert!(report.passes(1e-8));
    }

    #[test]
    fn non_finite_gradient_names_the_parameter() {
        let mut ps = vec![Tensor::scalar(1.0).with_trainable(true)];
        let err = grad_check(ps.as_mut_slice(), DEFAULT_EPS, |_: &[Tensor]| Ok((0.0, vec![Some(vec![f64::NAN])])))
            .unwrap_err();
        assert!(err.to_string().contains("param[0]"), "{err}");
    }

    #[test]
    fn zero_tolerance_never_passes() {
        let r = GradCheckReport {
            max_rel_error: 0.0,
            worst: None,
            entries_checked: 1,
        };
        assert!(!r.passes(0.0));
    }
}
