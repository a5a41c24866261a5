use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Adaptive average pooling with the usual window rule: output cell `i`
/// averages input rows `floor(i * H / out)` up to `ceil((i + 1) * H / out)`.
pub fn adaptive_avg_pool2d(input: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let [n, c, h, w] = input.dims4("adaptive_avg_pool2d")?;
    if out_h == 0 || out_w == 0 || out_h > h || out_w > w {
        return Err(Error::geometry(
            "adaptive_avg_pool2d",
            format!("cannot pool {h}x{w} to {out_h}x{out_w}"),
        ));
    }
    if out_h == h && out_w == w {
        return Ok(input.clone());
    }
    let window = |i: usize, out: usize, extent: usize| (i * extent / out, ((i + 1) * extent).div_ceil(out));
    let mut data = Vec::with_capacity(n * c * out_h * out_w);
    for src in input.data().chunks(h * w) {
        for oy in 0..out_h {
            let (y0, y1) = window(oy, out_h, h);
            for ox in 0..out_w {
                let (x0, x1) = window(ox, out_w, w);
                let mut acc = 0.0f32;
                for y in y0..y1 {
                    acc += src[y * w + x0..y * w + x1].iter().sum::<f32>();
                }
                data.push(acc / ((y1 - y0) * (x1 - x0)) as f32);
            }
        }
    }
    Tensor::new(vec![n, c, out_h, out_w], data)
}

/// Mean over spatial positions: `[N, C, H, W] -> [N, C]`.
pub fn global_avg_pool(input: &Tensor) -> Result<Tensor> {
    let [n, c, h, w] = input.dims4("global_avg_pool")?;
    let inv = 1.0 / (h * w) as f32;
    let data = input
        .data()
        .chunks(h * w)
        .map(|plane| plane.iter().sum::<f32>() * inv)
        .collect();
    Tensor::new(vec![n, c], data)
}
