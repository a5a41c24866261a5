//! Shared fixtures for the criterion benches in `benches/`.

use sbcformer::Tensor;

/// Deterministic values in [-0.5, 0.5); benches only need non-trivial data.
pub fn fixture(shape: &[usize], salt: usize) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |i| ((i.wrapping_mul(7919) + salt * 104_729) % 1000) as f32 / 1000.0 - 0.5)
}
