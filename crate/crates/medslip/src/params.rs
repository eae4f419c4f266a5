//! Named parameter storage, the AdamW optimizer, and the learning-rate
//! schedule.
//!
//! Parameters are `Arc`-backed so a training step can register them on many
//! per-image tapes without copying; the optimizer mutates them in place once
//! those tapes are gone.

use std::collections::BTreeMap;
use std::sync::Arc;

use ndarray::ArrayD;

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};

/// Ordered, name-addressed parameter tensors.
///
/// Insertion order is the canonical index order: tapes register parameters
/// as their first nodes in this order, so gradients line up by index.
#[derive(Clone, Default)]
pub struct ParamSet {
    entries: Vec<(String, Arc<ArrayD<f64>>)>,
    index: BTreeMap<String, usize>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, value: ArrayD<f64>) -> Result<()> {
        if self.index.contains_key(name) {
            return Err(Error::Config(format!("duplicate parameter {name:?}")));
        }
        self.index.insert(name.to_string(), self.entries.len());
        self.entries.push((name.to_string(), Arc::new(value)));
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&ArrayD<f64>> {
        self.index.get(name).map(|&i| self.entries[i].1.as_ref())
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn value_at(&self, i: usize) -> &ArrayD<f64> {
        &self.entries[i].1
    }

    pub fn name_at(&self, i: usize) -> &str {
        &self.entries[i].0
    }

    pub fn set(&mut self, name: &str, value: ArrayD<f64>) -> Result<()> {
        let i = *self
            .index
            .get(name)
            .ok_or_else(|| Error::Config(format!("unknown parameter {name:?}")))?;
        if self.entries[i].1.shape() != value.shape() {
            return Err(Error::Shape(format!(
                "parameter {name:?} has shape {:?}, got {:?}",
                self.entries[i].1.shape(),
                value.shape()
            )));
        }
        self.entries[i].1 = Arc::new(value);
        Ok(())
    }

    /// Register every parameter as a shared leaf, in index order, returning
    /// name-addressed tape variables.
    pub fn register(&self, tape: &mut Tape) -> ParamVars {
        let mut by_name = BTreeMap::new();
        let mut ordered = Vec::with_capacity(self.entries.len());
        for (name, value) in &self.entries {
            let var = tape.leaf_shared(Arc::clone(value));
            by_name.insert(name.clone(), var);
            ordered.push(var);
        }
        ParamVars { by_name, ordered }
    }

    /// Total number of scalar entries across all tensors.
    pub fn scalar_count(&self) -> usize {
        self.entries.iter().map(|(_, v)| v.len()).sum()
    }

    fn value_mut(&mut self, i: usize) -> &mut ArrayD<f64> {
        Arc::make_mut(&mut self.entries[i].1)
    }
}

/// Tape handles for one registration of a [`ParamSet`].
pub struct ParamVars {
    by_name: BTreeMap<String, Var>,
    ordered: Vec<Var>,
}

impl ParamVars {
    /// Panics on unknown names: model code addressing a missing parameter is
    /// a programming error, not an input condition.
    pub fn var(&self, name: &str) -> Var {
        match self.by_name.get(name) {
            Some(v) => *v,
            None => panic!("parameter {name:?} not registered"),
        }
    }

    pub fn count(&self) -> usize {
        self.ordered.len()
    }

    /// Vars in parameter insertion order, aligned with [`ParamSet`] indices.
    pub fn ordered(&self) -> &[Var] {
        &self.ordered
    }
}

/// Cosine learning rate with linear warmup.
pub fn cosine_lr(step: usize, warmup: usize, total: usize, lr_max: f64) -> f64 {
    assert!(total > 0, "schedule needs at least one step");
    if warmup > 0 && step < warmup {
        return lr_max * (step + 1) as f64 / warmup as f64;
    }
    if step >= total {
        return 0.0;
    }
    let span = (total - warmup).max(1) as f64;
    let progress = (step - warmup) as f64 / span;
    lr_max * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// AdamW with decoupled weight decay; decay skips vectors and scalars
/// (biases, gains).
pub struct AdamW {
    pub lr_max: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
    step: usize,
    m: Vec<ArrayD<f64>>,
    v: Vec<ArrayD<f64>>,
}

impl AdamW {
    pub fn new(
        params: &ParamSet,
        lr_max: f64,
        weight_decay: f64,
        warmup_steps: usize,
        total_steps: usize,
    ) -> Self {
        let m = (0..params.len()).map(|i| ArrayD::zeros(params.value_at(i).raw_dim())).collect();
        let v = (0..params.len()).map(|i| ArrayD::zeros(params.value_at(i).raw_dim())).collect();
        AdamW {
            lr_max,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            warmup_steps,
            total_steps,
            step: 0,
            m,
            v,
        }
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    /// Apply one update. `grads` is aligned with the parameter index; `None`
    /// entries (parameters unused this step) are skipped entirely.
    pub fn apply(&mut self, params: &mut ParamSet, grads: &[Option<ArrayD<f64>>]) -> f64 {
        assert_eq!(grads.len(), params.len(), "gradient count");
        let lr = cosine_lr(self.step, self.warmup_steps, self.total_steps, self.lr_max);
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (i, grad) in grads.iter().enumerate() {
            let Some(g) = grad else { continue };
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            m.zip_mut_with(g, |m, &g| *m = self.beta1 * *m + (1.0 - self.beta1) * g);
            v.zip_mut_with(g, |v, &g| *v = self.beta2 * *v + (1.0 - self.beta2) * g * g);
            let decay = if params.value_at(i).ndim() >= 2 { self.weight_decay } else { 0.0 };
            let (beta_eps, b1, b2) = (self.eps, bc1, bc2);
            let p = params.value_mut(i);
            ndarray::Zip::from(&mut *p).and(&*m).and(&*v).for_each(|p, &m, &v| {
                let mhat = m / b1;
                let vhat = v / b2;
                *p -= lr * (mhat / (vhat.sqrt() + beta_eps) + decay * *p);
            });
        }
        lr
    }
}
