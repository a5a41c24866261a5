//! Closed-form parameter and multiply-accumulate counts.
//!
//! Conventions: a convolution costs `C_out * C_in / groups * k^2 * H' * W'`,
//! a linear layer `n * d_in * d_out`, attention `2 * T^2 * D` for `T` tokens
//! of width `D`, and a transposed convolution `C_in * C_out * f^2 * h * w`.
//! Normalization, activations, pooling and residual adds are free. Parameter
//! counts include batch-norm scale and shift but not running statistics.

use serde::{Deserialize, Serialize};

use crate::config::{AblationFlags, VariantSpec};
use crate::model::block_names;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockCost {
    pub name: String,
    pub macs: u64,
    pub params: u64,
}

#[derive(Debug, Clone, Copy, Default)]
struct Cost {
    macs: u64,
    params: u64,
}

impl std::ops::Add for Cost {
    type Output = Cost;
    fn add(self, o: Cost) -> Cost {
        Cost {
            macs: self.macs + o.macs,
            params: self.params + o.params,
        }
    }
}

fn conv_bn(c_in: u64, c_out: u64, k: u64, groups: u64, out_pixels: u64) -> Cost {
    Cost {
        macs: c_out * c_in / groups * k * k * out_pixels,
        params: c_out * c_in / groups * k * k + 2 * c_out,
    }
}

fn linear(d_in: u64, d_out: u64, tokens: u64) -> Cost {
    Cost {
        macs: tokens * d_in * d_out,
        params: d_in * d_out + d_out,
    }
}

fn invres(c: u64, e: u64, pixels: u64) -> Cost {
    let h = c * e;
    conv_bn(c, h, 1, 1, pixels) + conv_bn(h, h, 3, h, pixels) + conv_bn(h, c, 1, 1, pixels)
}

fn ffn(c: u64, r: u64, tokens: u64) -> Cost {
    linear(c, r * c, tokens) + linear(r * c, c, tokens)
}

fn attention_core(width: u64, tokens: u64) -> Cost {
    Cost {
        macs: 2 * tokens * tokens * width,
        params: 0,
    }
}

fn mattn(c: u64, d: u64, r: u64, tokens: u64) -> Cost {
    let prenorm = Cost { macs: 0, params: 2 * c };
    let pw = Cost {
        macs: tokens * c * d,
        params: c * d + d,
    };
    let value = Cost {
        macs: 9 * d * tokens,
        params: 2 * d + 9 * d + d,
    };
    let bias = Cost { macs: 0, params: tokens };
    prenorm + pw + value + bias + attention_core(d, tokens) + linear(d, c, tokens) + ffn(c, r, tokens)
}

fn std_attn(c: u64, r: u64, tokens: u64) -> Cost {
    let norm = Cost { macs: 0, params: 2 * c };
    let qkv = linear(c, c, tokens) + linear(c, c, tokens) + linear(c, c, tokens);
    norm + qkv + attention_core(c, tokens) + linear(c, c, tokens) + ffn(c, r, tokens)
}

/// Per-block costs in forward order, named like the observer boundaries.
pub fn block_costs(spec: &VariantSpec, flags: AblationFlags) -> Vec<BlockCost> {
    let u = |v: usize| v as u64;
    let tokens = u(spec.attn_hw * spec.attn_hw);
    let mut costs: Vec<Cost> = Vec::new();

    let ch = spec.hyper.stem.channels(spec.stage_dims[0]);
    let mut stem = Cost::default();
    for i in 0..3 {
        let hw = u(spec.input_hw >> (i + 1));
        stem = stem + conv_bn(u(ch[i]), u(ch[i + 1]), 3, 1, hw * hw);
    }
    costs.push(stem);

    for s in 0..3 {
        let c = u(spec.stage_dims[s]);
        let e = u(spec.hyper.expansion[s]);
        let r = u(spec.hyper.ffn_ratio);
        let pixels = u(spec.stage_hw(s) * spec.stage_hw(s));
        for _ in 0..spec.invres_counts[s] {
            costs.push(invres(c, e, pixels));
        }
        costs.push((0..2 * spec.mixer_counts[s]).fold(Cost::default(), |acc, _| acc + invres(c, e, tokens)));
        for _ in 0..spec.mattn_counts[s] {
            costs.push(if flags.standard_attention {
                std_attn(c, r, tokens)
            } else {
                mattn(c, u(spec.attn_width(s)), r, tokens)
            });
        }
        let f = u(spec.upsample_factor(s));
        costs.push(Cost {
            macs: c * c * f * f * tokens,
            params: c * c * f * f + c,
        });
        costs.push(if flags.no_local_stream {
            conv_bn(c, c, 1, 1, pixels)
        } else {
            conv_bn(c, c, 1, 1, pixels) + conv_bn(2 * c, c, 1, 1, pixels)
        });
        if s < 2 {
            costs.push(conv_bn(c, u(spec.stage_dims[s + 1]), 3, 1, pixels / 4));
        }
    }
    costs.push(linear(u(spec.stage_dims[2]), u(spec.num_classes), 1));

    block_names(spec)
        .into_iter()
        .zip(costs)
        .map(|(name, c)| BlockCost {
            name,
            macs: c.macs,
            params: c.params,
        })
        .collect()
}

pub fn count_macs(spec: &VariantSpec, flags: AblationFlags) -> u64 {
    block_costs(spec, flags).iter().map(|b| b.macs).sum()
}

pub fn analytic_params(spec: &VariantSpec, flags: AblationFlags) -> u64 {
    block_costs(spec, flags).iter().map(|b| b.params).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Variant;

    #[test]
    fn one_cost_per_block() {
        for v in Variant::ALL {
            let spec = VariantSpec::named(v);
            assert_eq!(block_costs(&spec, AblationFlags::NONE).len(), block_names(&spec).len());
        }
    }

    #[test]
    fn hand_counted_pieces() {
        // 3x3 conv 3 -> 8 on a 4x4 output: 8*3*9*16 multiply-adds
        let c = conv_bn(3, 8, 3, 1, 16);
        assert_eq!((c.macs, c.params), (3456, 216 + 16));
        // depthwise 3x3 over 10 channels at 7x7
        assert_eq!(conv_bn(10, 10, 3, 10, 49).macs, 10 * 9 * 49);
        assert_eq!(attention_core(64, 49).macs, 2 * 49 * 49 * 64);
    }

    #[test]
    fn no_local_drops_gate_and_half_the_merge() {
        let spec = VariantSpec::named(Variant::B);
        let full = analytic_params(&spec, AblationFlags::NONE);
        let ablated = analytic_params(&spec, AblationFlags::NO_LOCAL);
        let expect: u64 = spec
            .stage_dims
            .iter()
            .map(|&c| {
                let c = c as u64;
                (c * c + 2 * c) + c * c
            })
            .sum();
        assert_eq!(full - ablated, expect);
    }
}
