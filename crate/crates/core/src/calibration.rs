//! Grid search for the hyperparameters the variant table leaves open.
//!
//! Every candidate is scored against the reference parameter and MAC budgets
//! with closed-form counts only, so the sweep runs in well under a second.
//! Candidates must reproduce the reference size ordering of the B ablations:
//! full > without local stream > with standard attention.

use serde::Serialize;

use crate::audit::{analytic_params, count_macs};
use crate::config::{AblationFlags, Hyperparams, StemWidths, Variant, VariantSpec};

/// The sweep winner; a test keeps it in sync with [`calibrate`].
pub const CALIBRATED: Hyperparams = Hyperparams {
    expansion: [2, 2, 2],
    ffn_ratio: 2,
    attn_ratio: 3,
    head_dim: 32,
    stem: StemWidths::Full,
};

/// Reference sizes for XS, S, B, L in millions of parameters.
pub const TARGET_PARAMS_M: [f64; 4] = [5.6, 8.5, 13.8, 18.5];
/// Reference compute for XS, S, B, L in GMACs.
pub const TARGET_GMACS: [f64; 4] = [0.7, 0.9, 1.6, 2.7];
pub const TARGET_NO_LOCAL_M: f64 = 13.6;
pub const TARGET_STD_ATTN_M: f64 = 12.8;

pub const EXPANSION_GRID: [usize; 4] = [2, 3, 4, 6];
pub const FFN_GRID: [usize; 3] = [2, 3, 4];
pub const ATTN_RATIO_GRID: [usize; 4] = [1, 2, 3, 4];
pub const HEAD_DIM_GRID: [usize; 3] = [16, 32, 64];

#[derive(Debug, Clone, Serialize)]
pub struct Candidate {
    pub hyper: Hyperparams,
    /// XS, S, B, L in millions.
    pub params_m: [f64; 4],
    pub gmacs: [f64; 4],
    pub no_local_m: f64,
    pub std_attn_m: f64,
    /// Sum of relative deviations over the ten reference figures.
    pub objective: f64,
}

impl Candidate {
    pub fn max_param_deviation(&self) -> f64 {
        (0..4).map(|i| rel(self.params_m[i], TARGET_PARAMS_M[i])).fold(0.0, f64::max)
    }

    pub fn max_mac_deviation(&self) -> f64 {
        (0..4).map(|i| rel(self.gmacs[i], TARGET_GMACS[i])).fold(0.0, f64::max)
    }
}

fn rel(got: f64, target: f64) -> f64 {
    (got - target).abs() / target
}

/// Scores one hyperparameter set, or `None` if it breaks the ablation
/// ordering.
pub fn evaluate(hyper: Hyperparams) -> Option<Candidate> {
    let mut params_m = [0.0; 4];
    let mut gmacs = [0.0; 4];
    for (i, v) in Variant::ALL.into_iter().enumerate() {
        let spec = VariantSpec::with_hyper(v, hyper);
        params_m[i] = analytic_params(&spec, AblationFlags::NONE) as f64 / 1e6;
        gmacs[i] = count_macs(&spec, AblationFlags::NONE) as f64 / 1e9;
    }
    let b = VariantSpec::with_hyper(Variant::B, hyper);
    let no_local_m = analytic_params(&b, AblationFlags::NO_LOCAL) as f64 / 1e6;
    let std_attn_m = analytic_params(&b, AblationFlags::STANDARD_ATTENTION) as f64 / 1e6;
    if !(params_m[2] > no_local_m && no_local_m > std_attn_m) {
        return None;
    }
    let objective = (0..4)
        .map(|i| rel(params_m[i], TARGET_PARAMS_M[i]) + rel(gmacs[i], TARGET_GMACS[i]))
        .sum::<f64>()
        + rel(no_local_m, TARGET_NO_LOCAL_M)
        + rel(std_attn_m, TARGET_STD_ATTN_M);
    Some(Candidate {
        hyper,
        params_m,
        gmacs,
        no_local_m,
        std_attn_m,
        objective,
    })
}

/// Head width does not change any count, so it is fixed to the largest grid
/// value dividing every attention width of every variant in both attention
/// forms.
pub fn pick_head_dim(attn_ratio: usize) -> Option<usize> {
    HEAD_DIM_GRID.into_iter().rev().find(|&d| {
        Variant::ALL
            .iter()
            .flat_map(|v| v.stage_dims())
            .all(|c| c % d == 0 && (attn_ratio * c) % d == 0)
    })
}

/// All feasible candidates, best first. Ties keep grid order.
pub fn calibrate() -> Vec<Candidate> {
    let mut out = Vec::new();
    for stem in StemWidths::ALL {
        for attn_ratio in ATTN_RATIO_GRID {
            let Some(head_dim) = pick_head_dim(attn_ratio) else { continue };
            for e0 in EXPANSION_GRID {
                for e1 in EXPANSION_GRID {
                    for e2 in EXPANSION_GRID {
                        for ffn_ratio in FFN_GRID {
                            let hyper = Hyperparams {
                                expansion: [e0, e1, e2],
                                ffn_ratio,
                                attn_ratio,
                                head_dim,
                                stem,
                            };
                            out.extend(evaluate(hyper));
                        }
                    }
                }
            }
        }
    }
    out.sort_by(|a, b| a.objective.total_cmp(&b.objective));
    out
}
