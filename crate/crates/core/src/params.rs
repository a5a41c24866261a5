//! Sources of parameter tensors for model assembly.
//!
//! Every block pulls its tensors by name through [`ParamSource`], so the same
//! construction code serves seeded initialization, empty placeholders and
//! binding a loaded [`WeightStore`].

use std::collections::HashSet;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::kernels::BatchNorm;
use crate::kernels::BN_EPS;
use crate::tensor::Tensor;
use crate::weights::WeightStore;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    Bias,
    Gamma,
    Beta,
    RunningMean,
    RunningVar,
}

impl ParamKind {
    /// Running statistics are stored with the weights but are not learnable.
    pub fn is_statistic(self) -> bool {
        matches!(self, ParamKind::RunningMean | ParamKind::RunningVar)
    }

    pub fn of_name(name: &str) -> ParamKind {
        match name.rsplit('.').next() {
            Some("mean") => ParamKind::RunningMean,
            Some("var") => ParamKind::RunningVar,
            Some("gamma") => ParamKind::Gamma,
            Some("beta") => ParamKind::Beta,
            Some("b") | Some("bias") => ParamKind::Bias,
            _ => ParamKind::Weight,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Init {
    /// Truncated normal (sigma 0.02, cut at 2 sigma) weights, zero biases,
    /// identity batch norm.
    Random { seed: u64 },
    /// Zero placeholders; the model refuses to run until weights are loaded.
    Empty,
}

pub trait ParamSource {
    fn take(&mut self, name: &str, shape: &[usize], kind: ParamKind) -> Result<Tensor>;

    /// Whether `name` is available; used to tell folded from unfolded layouts.
    fn has(&self, name: &str) -> bool;

    fn take_bn(&mut self, prefix: &str, channels: usize) -> Result<BatchNorm> {
        Ok(BatchNorm {
            gamma: self.take(&format!("{prefix}.gamma"), &[channels], ParamKind::Gamma)?,
            beta: self.take(&format!("{prefix}.beta"), &[channels], ParamKind::Beta)?,
            mean: self.take(&format!("{prefix}.mean"), &[channels], ParamKind::RunningMean)?,
            var: self.take(&format!("{prefix}.var"), &[channels], ParamKind::RunningVar)?,
            eps: BN_EPS,
        })
    }
}

pub const INIT_STD: f64 = 0.02;

pub struct Initializer {
    rng: Option<ChaCha8Rng>,
    normal: Normal<f64>,
}

impl Initializer {
    pub fn new(init: Init) -> Self {
        let rng = match init {
            Init::Random { seed } => Some(ChaCha8Rng::seed_from_u64(seed)),
            Init::Empty => None,
        };
        Self {
            rng,
            normal: Normal::new(0.0, INIT_STD).expect("valid std"),
        }
    }

    fn truncated(&mut self) -> f32 {
        let rng = self.rng.as_mut().expect("random init");
        loop {
            let v = self.normal.sample(rng);
            if v.abs() <= 2.0 * INIT_STD {
                return v as f32;
            }
        }
    }
}

impl ParamSource for Initializer {
    fn take(&mut self, _name: &str, shape: &[usize], kind: ParamKind) -> Result<Tensor> {
        let t = match (kind, self.rng.is_some()) {
            (_, false) => Tensor::zeros(shape.to_vec()),
            (ParamKind::Weight, true) => Tensor::from_fn(shape.to_vec(), |_| self.truncated()),
            (ParamKind::Gamma | ParamKind::RunningVar, true) => Tensor::full(shape.to_vec(), 1.0),
            (ParamKind::Bias | ParamKind::Beta | ParamKind::RunningMean, true) => Tensor::zeros(shape.to_vec()),
        };
        Ok(t)
    }

    fn has(&self, _name: &str) -> bool {
        true
    }
}

/// Binds tensors from a store, checking shapes and tracking which names were
/// consumed.
pub struct StoreBinder<'a> {
    store: &'a WeightStore,
    used: HashSet<String>,
}

impl<'a> StoreBinder<'a> {
    pub fn new(store: &'a WeightStore) -> Self {
        Self {
            store,
            used: HashSet::new(),
        }
    }

    /// Fails if any stored tensor was never requested.
    pub fn finish(self) -> Result<()> {
        let unbound: Vec<&str> = self.store.names().filter(|n| !self.used.contains(*n)).collect();
        if unbound.is_empty() {
            Ok(())
        } else {
            Err(Error::Binding(format!("{} unbound tensors: {}", unbound.len(), preview(&unbound))))
        }
    }
}

fn preview(names: &[&str]) -> String {
    let mut s = names.iter().take(8).copied().collect::<Vec<_>>().join(", ");
    if names.len() > 8 {
        s.push_str(", ...");
    }
    s
}

impl ParamSource for StoreBinder<'_> {
    fn take(&mut self, name: &str, shape: &[usize], _kind: ParamKind) -> Result<Tensor> {
        let t = self
            .store
            .get(name)
            .ok_or_else(|| Error::Binding(format!("missing tensor {name:?}")))?;
        if t.shape() != shape {
            return Err(Error::Binding(format!(
                "{name:?} has shape {:?}, model expects {shape:?}",
                t.shape()
            )));
        }
        self.used.insert(name.to_string());
        Ok(t.clone())
    }

    fn has(&self, name: &str) -> bool {
        self.store.contains(name)
    }
}
