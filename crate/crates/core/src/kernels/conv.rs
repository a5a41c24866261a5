//! 2-D convolutions in `[N, C, H, W]` layout.
//!
//! Two interchangeable paths are provided: a direct sliding-window kernel and
//! an im2col unfold followed by GEMM. [`conv2d_auto`] picks the cheaper one for
//! the geometry at hand; both must agree to within fp32 reassociation error.

use rayon::prelude::*;

use super::gemm::{gemm, MatRef};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl ConvSpec {
    /// Square kernel with "same"-style padding (`k / 2`).
    pub fn square(kernel: usize, stride: usize) -> Self {
        Self {
            kernel_h: kernel,
            kernel_w: kernel,
            stride,
            padding: kernel / 2,
            groups: 1,
        }
    }

    pub fn pointwise() -> Self {
        Self::square(1, 1)
    }

    pub fn depthwise(kernel: usize, channels: usize) -> Self {
        Self {
            groups: channels,
            ..Self::square(kernel, 1)
        }
    }

    pub fn output_extent(&self, input: usize, kernel: usize) -> Option<usize> {
        let padded = input + 2 * self.padding;
        (padded >= kernel).then(|| (padded - kernel) / self.stride + 1)
    }

    pub fn is_pointwise(&self) -> bool {
        self.kernel_h == 1 && self.kernel_w == 1 && self.stride == 1 && self.padding == 0
    }
}

#[derive(Debug, Clone, Copy)]
struct Geometry {
    n: usize,
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    oh: usize,
    ow: usize,
    cin_g: usize,
    cout_g: usize,
}

fn check(input: &Tensor, weight: &Tensor, bias: Option<&Tensor>, spec: &ConvSpec) -> Result<Geometry> {
    let [n, c_in, h, w] = input.dims4("conv2d")?;
    let [c_out, cin_g, kh, kw] = weight.dims4("conv2d")?;
    if spec.stride == 0 || spec.groups == 0 {
        return Err(Error::geometry("conv2d", "stride and groups must be >= 1"));
    }
    if kh != spec.kernel_h || kw != spec.kernel_w {
        return Err(Error::shape("conv2d kernel", weight.shape(), &[spec.kernel_h, spec.kernel_w]));
    }
    if c_in % spec.groups != 0 || c_out % spec.groups != 0 || cin_g * spec.groups != c_in {
        return Err(Error::shape("conv2d channels", input.shape(), weight.shape()));
    }
    if let Some(b) = bias {
        if b.numel() != c_out {
            return Err(Error::shape("conv2d bias", weight.shape(), b.shape()));
        }
    }
    let (oh, ow) = match (spec.output_extent(h, kh), spec.output_extent(w, kw)) {
        (Some(oh), Some(ow)) if oh >= 1 && ow >= 1 => (oh, ow),
        _ => {
            return Err(Error::geometry(
                "conv2d",
                format!("{kh}x{kw} kernel with padding {} does not fit a {h}x{w} input", spec.padding),
            ))
        }
    };
    Ok(Geometry {
        n,
        c_in,
        h,
        w,
        c_out,
        oh,
        ow,
        cin_g,
        cout_g: c_out / spec.groups,
    })
}

fn init_output(g: &Geometry, bias: Option<&Tensor>) -> Vec<f32> {
    let plane = g.oh * g.ow;
    let mut out = vec![0.0; g.n * g.c_out * plane];
    if let Some(b) = bias {
        for (i, ch) in out.chunks_mut(plane).enumerate() {
            ch.fill(b.data()[i % g.c_out]);
        }
    }
    out
}

/// Range of output columns `ox` whose input column `ox * stride + k - pad`
/// lands inside `[0, extent)`.
fn valid_range(out: usize, extent: usize, k: usize, stride: usize, pad: usize) -> (usize, usize) {
    let lo = if k >= pad { 0 } else { (pad - k).div_ceil(stride) };
    // largest ox with ox*stride + k - pad <= extent - 1
    let hi = if extent + pad > k {
        ((extent + pad - k - 1) / stride + 1).min(out)
    } else {
        0
    };
    (lo, hi.max(lo))
}

/// Direct convolution. Each output plane accumulates its taps in
/// (input channel, ky, kx) order.
pub fn conv2d(input: &Tensor, weight: &Tensor, bias: Option<&Tensor>, spec: &ConvSpec) -> Result<Tensor> {
    let g = check(input, weight, bias, spec)?;
    let mut out = init_output(&g, bias);
    let plane_in = g.h * g.w;
    let plane_out = g.oh * g.ow;
    let (kh, kw, s, p) = (spec.kernel_h, spec.kernel_w, spec.stride, spec.padding);
    let x = input.data();
    let wt = weight.data();
    super::counter::add(g.n * g.c_out * g.cin_g * kh * kw * plane_out);
    let col_ranges: Vec<(usize, usize)> = (0..kw).map(|kx| valid_range(g.ow, g.w, kx, s, p)).collect();

    out.par_chunks_mut(plane_out).enumerate().for_each(|(idx, dst)| {
        let (b, oc) = (idx / g.c_out, idx % g.c_out);
        let group = oc / g.cout_g;
        for icg in 0..g.cin_g {
            let ic = group * g.cin_g + icg;
            let src = &x[(b * g.c_in + ic) * plane_in..][..plane_in];
            let taps = &wt[(oc * g.cin_g + icg) * kh * kw..][..kh * kw];
            for ky in 0..kh {
                for kx in 0..kw {
                    let wv = taps[ky * kw + kx];
                    let (lo, hi) = col_ranges[kx];
                    for oy in 0..g.oh {
                        let iy = (oy * s + ky) as isize - p as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let row = &src[iy as usize * g.w..][..g.w];
                        let drow = &mut dst[oy * g.ow..][..g.ow];
                        for ox in lo..hi {
                            drow[ox] += wv * row[ox * s + kx - p];
                        }
                    }
                }
            }
        }
    });
    Tensor::new(vec![g.n, g.c_out, g.oh, g.ow], out)
}

/// Unfolds one batch item's channel range into a `[cin * kh * kw, oh * ow]`
/// column matrix.
pub fn im2col(
    image: &[f32],
    channels: usize,
    h: usize,
    w: usize,
    spec: &ConvSpec,
    oh: usize,
    ow: usize,
) -> Vec<f32> {
    let (kh, kw, s, p) = (spec.kernel_h, spec.kernel_w, spec.stride, spec.padding);
    let cols = oh * ow;
    let mut m = vec![0.0; channels * kh * kw * cols];
    m.par_chunks_mut(cols).enumerate().for_each(|(r, dst)| {
        let c = r / (kh * kw);
        let ky = (r / kw) % kh;
        let kx = r % kw;
        let src = &image[c * h * w..][..h * w];
        let (lo, hi) = valid_range(ow, w, kx, s, p);
        for oy in 0..oh {
            let iy = (oy * s + ky) as isize - p as isize;
            if iy < 0 || iy >= h as isize {
                continue;
            }
            let row = &src[iy as usize * w..][..w];
            let drow = &mut dst[oy * ow..][..ow];
            for ox in lo..hi {
                drow[ox] = row[ox * s + kx - p];
            }
        }
    });
    m
}

/// Convolution as im2col followed by one GEMM per (batch item, group).
pub fn conv2d_im2col(input: &Tensor, weight: &Tensor, bias: Option<&Tensor>, spec: &ConvSpec) -> Result<Tensor> {
    let g = check(input, weight, bias, spec)?;
    let mut out = init_output(&g, bias);
    let plane_in = g.h * g.w;
    let plane_out = g.oh * g.ow;
    let kk = spec.kernel_h * spec.kernel_w;
    let depth = g.cin_g * kk;
    for b in 0..g.n {
        for grp in 0..spec.groups {
            let start = (b * g.c_in + grp * g.cin_g) * plane_in;
            let src = &input.data()[start..start + g.cin_g * plane_in];
            let owned;
            let cols: &[f32] = if spec.is_pointwise() {
                src
            } else {
                owned = im2col(src, g.cin_g, g.h, g.w, spec, g.oh, g.ow);
                &owned
            };
            let w = &weight.data()[grp * g.cout_g * depth..][..g.cout_g * depth];
            let dst = &mut out[(b * g.c_out + grp * g.cout_g) * plane_out..][..g.cout_g * plane_out];
            gemm(
                MatRef::row_major(w, g.cout_g, depth),
                MatRef::row_major(cols, depth, plane_out),
                dst,
                bias.is_some(),
            );
        }
    }
    Tensor::new(vec![g.n, g.c_out, g.oh, g.ow], out)
}

/// Routes depthwise and grouped convolutions to the direct kernel and dense
/// ones to im2col + GEMM.
pub fn conv2d_auto(input: &Tensor, weight: &Tensor, bias: Option<&Tensor>, spec: &ConvSpec) -> Result<Tensor> {
    if spec.groups > 1 {
        conv2d(input, weight, bias, spec)
    } else {
        conv2d_im2col(input, weight, bias, spec)
    }
}

pub const SUPPORTED_UPSAMPLE_FACTORS: [usize; 3] = [1, 2, 4];

/// Transposed convolution with `kernel == stride == factor`: every input
/// pixel scatters into its own disjoint `factor x factor` output patch.
///
/// `weight` is `[C_in, C_out, factor, factor]`.
pub fn conv_transpose2d(input: &Tensor, weight: &Tensor, bias: Option<&Tensor>, factor: usize) -> Result<Tensor> {
    if !SUPPORTED_UPSAMPLE_FACTORS.contains(&factor) {
        return Err(Error::config(
            "conv_transpose2d.factor",
            format!("{factor} is not one of {SUPPORTED_UPSAMPLE_FACTORS:?}"),
        ));
    }
    let [n, c_in, h, w] = input.dims4("conv_transpose2d")?;
    let [wc_in, c_out, kh, kw] = weight.dims4("conv_transpose2d")?;
    if wc_in != c_in || kh != factor || kw != factor {
        return Err(Error::shape("conv_transpose2d", input.shape(), weight.shape()));
    }
    if let Some(b) = bias {
        if b.numel() != c_out {
            return Err(Error::shape("conv_transpose2d bias", weight.shape(), b.shape()));
        }
    }
    let (oh, ow) = (h * factor, w * factor);
    let ff = factor * factor;
    let rows = c_out * ff;
    let plane = h * w;
    let mut out = vec![0.0; n * c_out * oh * ow];
    let mut patches = vec![0.0; rows * plane];
    for b in 0..n {
        let src = &input.data()[b * c_in * plane..][..c_in * plane];
        // [c_out * f * f, c_in] x [c_in, h * w]
        gemm(
            MatRef::transposed(weight.data(), rows, c_in),
            MatRef::row_major(src, c_in, plane),
            &mut patches,
            false,
        );
        let dst = &mut out[b * c_out * oh * ow..][..c_out * oh * ow];
        dst.par_chunks_mut(oh * ow).enumerate().for_each(|(co, plane_out)| {
            let bv = bias.map_or(0.0, |b| b.data()[co]);
            for ky in 0..factor {
                for kx in 0..factor {
                    let row = &patches[(co * ff + ky * factor + kx) * plane..][..plane];
                    for y in 0..h {
                        let orow = &mut plane_out[(y * factor + ky) * ow..][..ow];
                        for x in 0..w {
                            orow[x * factor + kx] = row[y * w + x] + bv;
                        }
                    }
                }
            }
        });
    }
    Tensor::new(vec![n, c_out, oh, ow], out)
}
