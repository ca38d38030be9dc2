//! First-order optimizers that only ever write trainable tensors.

use serde::{Deserialize, Serialize};

use crate::param::ParamStore;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizerKind {
    #[default]
    Adam,
    /// Plain gradient descent with momentum 0.9.
    SgdMomentum,
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;
const MOMENTUM: f64 = 0.9;

#[derive(Clone, Debug)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    steps: u64,
    first: Vec<Option<Vec<f64>>>,
    second: Vec<Option<Vec<f64>>>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64, n_params: usize) -> Self {
        Self {
            kind,
            lr,
            steps: 0,
            first: vec![None; n_params],
            second: vec![None; n_params],
        }
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    /// Applies one update. `grads` is aligned with `store`; tensors that are
    /// frozen or have no gradient are left untouched.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Option<Vec<f64>>]) {
        self.steps += 1;
        let t = self.steps as i32;
        for (id, p) in store.iter_mut() {
            if !p.tensor.trainable() {
                continue;
            }
            let Some(g) = grads.get(id.0).and_then(|g| g.as_ref()) else {
                continue;
            };
            let n = g.len();
            let m = self.first[id.0].get_or_insert_with(|| vec![0.0; n]);
            match self.kind {
                OptimizerKind::SgdMomentum => {
                    for ((w, v), gi) in p.tensor.data_mut().iter_mut().zip(m.iter_mut()).zip(g) {
                        *v = MOMENTUM * *v + gi;
                        *w -= self.lr * *v;
                    }
                }
                OptimizerKind::Adam => {
                    let v2 = self.second[id.0].get_or_insert_with(|| vec![0.0; n]);
                    let c1 = 1.0 - BETA1.powi(t);
                    let c2 = 1.0 - BETA2.powi(t);
                    for (((w, m1), m2), gi) in p.tensor.data_mut().iter_mut().zip(m.iter_mut()).zip(v2.iter_mut()).zip(g) {
                        *m1 = BETA1 * *m1 + (1.0 - BETA1) * gi;
                        *m2 = BETA2 * *m2 + (1.0 - BETA2) * gi * gi;
                        let mhat = *m1 / c1;
                        let vhat = *m2 / c2;
                        *w -= self.lr * mhat / (vhat.sqrt() + ADAM_EPS);
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::param::{Component, Init, ParamKind, ParamSpec};

    fn store() -> ParamStore {
        let mut s = ParamStore::new();
        s.push(ParamSpec::new("a", [2], Component::Head, ParamKind::Weight, Init::Ones), 0, true);
        s.push(ParamSpec::new("b", [2], Component::Head, ParamKind::Weight, Init::Ones), 0, false);
        s
    }

    #[test]
    fn frozen_tensors_never_move() {
        for kind in [OptimizerKind::Adam, OptimizerKind::SgdMomentum] {
            let mut s = store();
            let mut opt = Optimizer::new(kind, 0.1, 2);
            let grads = vec![Some(vec![1.0, -1.0]), Some(vec![5.0, 5.0])];
            for _ in 0..10 {
                opt.step(&mut s, &grads);
            }
            assert_eq!(s.get(crate::param::ParamId(1)).data(), &[1.0, 1.0]);
            assert_ne!(s.get(crate::param::ParamId(0)).data(), &[1.0, 1.0]);
        }
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut s = store();
        let mut opt = Optimizer::new(OptimizerKind::Adam, 0.01, 2);
        opt.step(&mut s, &[Some(vec![3.0, -0.5]), None]);
        let a = s.get(crate::param::ParamId(0)).data();
        assert!((a[0] - 0.99).abs() < 1e-8);
        assert!((a[1] - 1.01).abs() < 1e-8);
    }
}
