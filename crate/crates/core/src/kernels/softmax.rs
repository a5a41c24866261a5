use crate::error::Result;
use crate::tensor::Tensor;

/// Numerically stable softmax over each row of an `[r, c]` matrix.
pub fn softmax_rows(m: &Tensor) -> Result<Tensor> {
    let [_, c] = m.dims2("softmax_rows")?;
    let mut out = m.clone();
    out.data_mut().chunks_mut(c).for_each(softmax_in_place);
    Ok(out)
}

pub(crate) fn softmax_in_place(row: &mut [f32]) {
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut sum = 0.0f32;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    let inv = 1.0 / sum;
    row.iter_mut().for_each(|v| *v *= inv);
}
