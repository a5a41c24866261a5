//! Layer-by-layer comparison against recorded activations.

use std::time::Duration;

use serde::Serialize;

use crate::blocks::Observer;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::tensor::Tensor;
use crate::weights::WeightStore;

pub const INPUT_NAME: &str = "input";
pub const ACT_PREFIX: &str = "act.";

/// Observer that keeps a copy of every block output in forward order.
#[derive(Debug, Default)]
pub struct ActivationRecorder {
    pub outputs: Vec<(String, Tensor)>,
}

impl Observer for ActivationRecorder {
    fn record(&mut self, name: &str, output: &Tensor, _: Duration) {
        self.outputs.push((name.to_string(), output.clone()));
    }
}

/// The input plus `act.<block>` for every block boundary.
pub fn golden_bundle(model: &Model, input: &Tensor) -> Result<WeightStore> {
    let mut rec = ActivationRecorder::default();
    model.forward_observed(input, &mut rec)?;
    let mut store = WeightStore::new();
    store.insert(INPUT_NAME, input.clone())?;
    for (name, t) in rec.outputs {
        store.insert(format!("{ACT_PREFIX}{name}"), t)?;
    }
    Ok(store)
}

#[derive(Debug, Clone, Serialize)]
pub struct LayerDiff {
    pub name: String,
    /// Infinite when the shapes disagree.
    pub max_abs: f32,
}

#[derive(Debug, Clone, Serialize)]
pub struct ParityReport {
    pub tol: f32,
    pub layers: Vec<LayerDiff>,
}

impl ParityReport {
    pub fn first_failure(&self) -> Option<&LayerDiff> {
        self.layers.iter().find(|l| !(l.max_abs <= self.tol))
    }

    pub fn passed(&self) -> bool {
        self.first_failure().is_none()
    }
}

/// Runs `model` on `input` and compares each block output with the matching
/// `act.<block>` tensor of `golden`, in forward order.
pub fn verify_activations(model: &Model, input: &Tensor, golden: &WeightStore, tol: f32) -> Result<ParityReport> {
    let mut rec = ActivationRecorder::default();
    model.forward_observed(input, &mut rec)?;
    let mut layers = Vec::with_capacity(rec.outputs.len());
    for (name, got) in &rec.outputs {
        let key = format!("{ACT_PREFIX}{name}");
        let want = golden
            .get(&key)
            .ok_or_else(|| Error::Data(format!("golden bundle has no tensor {key:?}")))?;
        let max_abs = got.max_abs_diff(want).unwrap_or(f32::INFINITY);
        layers.push(LayerDiff {
            name: name.clone(),
            max_abs: if max_abs.is_nan() { f32::INFINITY } else { max_abs },
        });
    }
    Ok(ParityReport { tol, layers })
}
