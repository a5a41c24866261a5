//! Network building blocks.
//!
//! Each parameter struct knows how to pull its tensors from a
//! [`ParamSource`] under a dotted name prefix, write them back to a
//! [`WeightStore`], and run its forward transform on `[N, C, H, W]` maps.

use std::time::{Duration, Instant};

use crate::config::{AblationFlags, BiasMode, VariantSpec};
use crate::error::{Error, Result};
use crate::kernels::{
    adaptive_avg_pool2d, conv2d_auto, conv_transpose2d, gelu_in_place, gemm, linear, sigmoid, softmax_in_place,
    BatchNorm, ConvSpec, MatRef,
};
use crate::params::{ParamKind, ParamSource};
use crate::tensor::Tensor;
use crate::weights::WeightStore;

/// Receives the output of every named block boundary during a forward pass.
pub trait Observer {
    fn record(&mut self, name: &str, output: &Tensor, elapsed: Duration);
}

impl Observer for () {
    fn record(&mut self, _: &str, _: &Tensor, _: Duration) {}
}

pub(crate) fn timed<T>(f: impl FnOnce() -> Result<T>) -> Result<(T, Duration)> {
    let start = Instant::now();
    let out = f()?;
    Ok((out, start.elapsed()))
}

fn put(store: &mut WeightStore, name: String, t: &Tensor) {
    store.insert(name, t.clone()).expect("model parameter names are unique");
}

fn put_bn(store: &mut WeightStore, prefix: &str, bn: &BatchNorm) {
    put(store, format!("{prefix}.gamma"), &bn.gamma);
    put(store, format!("{prefix}.beta"), &bn.beta);
    put(store, format!("{prefix}.mean"), &bn.mean);
    put(store, format!("{prefix}.var"), &bn.var);
}

/// Plain convolution with optional bias.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
    pub spec: ConvSpec,
}

impl Conv2d {
    pub fn bind(src: &mut dyn ParamSource, prefix: &str, c_in: usize, c_out: usize, spec: ConvSpec) -> Result<Self> {
        let shape = [c_out, c_in / spec.groups, spec.kernel_h, spec.kernel_w];
        Ok(Self {
            weight: src.take(&format!("{prefix}.w"), &shape, ParamKind::Weight)?,
            bias: Some(src.take(&format!("{prefix}.b"), &[c_out], ParamKind::Bias)?),
            spec,
        })
    }

    pub fn export(&self, prefix: &str, store: &mut WeightStore) {
        put(store, format!("{prefix}.w"), &self.weight);
        if let Some(b) = &self.bias {
            put(store, format!("{prefix}.b"), b);
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        conv2d_auto(x, &self.weight, self.bias.as_ref(), &self.spec)
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }
}

/// Convolution followed by inference batch norm. After folding, `bn` is gone
/// and the convolution carries a bias instead.
#[derive(Debug, Clone)]
pub struct ConvBn {
    pub conv: Conv2d,
    pub bn: Option<BatchNorm>,
}

impl ConvBn {
    pub fn bind(
        src: &mut dyn ParamSource,
        prefix: &str,
        c_in: usize,
        c_out: usize,
        spec: ConvSpec,
    ) -> Result<Self> {
        let shape = [c_out, c_in / spec.groups, spec.kernel_h, spec.kernel_w];
        let weight = src.take(&format!("{prefix}.w"), &shape, ParamKind::Weight)?;
        let bn_prefix = format!("{prefix}.bn");
        let (bias, bn) = if src.has(&format!("{bn_prefix}.gamma")) {
            (None, Some(src.take_bn(&bn_prefix, c_out)?))
        } else {
            (Some(src.take(&format!("{prefix}.b"), &[c_out], ParamKind::Bias)?), None)
        };
        Ok(Self {
            conv: Conv2d { weight, bias, spec },
            bn,
        })
    }

    pub fn export(&self, prefix: &str, store: &mut WeightStore) {
        self.conv.export(prefix, store);
        if let Some(bn) = &self.bn {
            put_bn(store, &format!("{prefix}.bn"), bn);
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut y = self.conv.forward(x)?;
        if let Some(bn) = &self.bn {
            bn.apply_in_place(&mut y)?;
        }
        Ok(y)
    }

    fn out_shape(&self, [n, c, h, w]: [usize; 4]) -> Result<[usize; 4]> {
        let spec = &self.conv.spec;
        let cin = self.conv.weight.shape()[1] * spec.groups;
        if c != cin {
            return Err(Error::shape("conv", &[n, c, h, w], self.conv.weight.shape()));
        }
        let oh = spec.output_extent(h, spec.kernel_h).filter(|&v| v > 0);
        let ow = spec.output_extent(w, spec.kernel_w).filter(|&v| v > 0);
        match (oh, ow) {
            (Some(oh), Some(ow)) => Ok([n, self.conv.out_channels(), oh, ow]),
            _ => Err(Error::geometry("conv", format!("kernel does not fit {h}x{w}"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
}

impl Linear {
    pub fn bind(src: &mut dyn ParamSource, prefix: &str, d_in: usize, d_out: usize) -> Result<Self> {
        Ok(Self {
            weight: src.take(&format!("{prefix}.w"), &[d_out, d_in], ParamKind::Weight)?,
            bias: Some(src.take(&format!("{prefix}.b"), &[d_out], ParamKind::Bias)?),
        })
    }

    pub fn export(&self, prefix: &str, store: &mut WeightStore) {
        put(store, format!("{prefix}.w"), &self.weight);
        if let Some(b) = &self.bias {
            put(store, format!("{prefix}.b"), b);
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        linear(x, &self.weight, self.bias.as_ref())
    }
}

/// `[1, C, H, W]` map to `[H * W, C]` tokens in row-major spatial order.
pub fn to_tokens(x: &Tensor) -> Result<Tensor> {
    let [n, c, h, w] = x.dims4("to_tokens")?;
    if n != 1 {
        return Err(Error::geometry("to_tokens", format!("expected a single map, got batch {n}")));
    }
    x.clone().reshape(vec![c, h * w])?.transpose2d()
}

pub fn from_tokens(t: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let [hw, c] = t.dims2("from_tokens")?;
    if hw != h * w {
        return Err(Error::shape("from_tokens", t.shape(), &[h, w]));
    }
    t.transpose2d()?.reshape(vec![1, c, h, w])
}

fn per_item(x: &Tensor, mut f: impl FnMut(&Tensor) -> Result<Tensor>) -> Result<Tensor> {
    let [n, c, h, w] = x.dims4("per_item")?;
    if n == 1 {
        return f(x);
    }
    let plane = c * h * w;
    let mut out = Vec::with_capacity(x.numel());
    let mut shape = None;
    for item in x.data().chunks(plane) {
        let y = f(&Tensor::new(vec![1, c, h, w], item.to_vec())?)?;
        shape.get_or_insert_with(|| y.shape().to_vec());
        out.extend_from_slice(y.data());
    }
    let mut shape = shape.expect("n >= 1");
    shape[0] = n;
    Tensor::new(shape, out)
}

// ---------------------------------------------------------------------------
// InvRes

/// Inverted residual: 1x1 expand, 3x3 depthwise, 1x1 project, each with batch
/// norm; GeLU after the first two; identity shortcut.
#[derive(Debug, Clone)]
pub struct InvResParams {
    pub expand: ConvBn,
    pub dw: ConvBn,
    pub project: ConvBn,
}

impl InvResParams {
    pub fn bind(src: &mut dyn ParamSource, prefix: &str, channels: usize, expansion: usize) -> Result<Self> {
        let hidden = channels * expansion;
        Ok(Self {
            expand: ConvBn::bind(src, &format!("{prefix}.expand"), channels, hidden, ConvSpec::pointwise())?,
            dw: ConvBn::bind(src, &format!("{prefix}.dw"), hidden, hidden, ConvSpec::depthwise(3, hidden))?,
            project: ConvBn::bind(src, &format!("{prefix}.project"), hidden, channels, ConvSpec::pointwise())?,
        })
    }

    pub fn export(&self, prefix: &str, store: &mut WeightStore) {
        self.expand.export(&format!("{prefix}.expand"), store);
        self.dw.export(&format!("{prefix}.dw"), store);
        self.project.export(&format!("{prefix}.project"), store);
    }

    pub fn channels(&self) -> usize {
        self.project.conv.out_channels()
    }

    pub fn expansion(&self) -> usize {
        self.expand.conv.out_channels() / self.channels()
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let [_, c, _, _] = x.dims4("invres")?;
        if c != self.channels() {
            return Err(Error::shape("invres", x.shape(), self.expand.conv.weight.shape()));
        }
        let mut h = self.expand.forward(x)?;
        gelu_in_place(&mut h);
        let mut h = self.dw.forward(&h)?;
        gelu_in_place(&mut h);
        let mut y = self.project.forward(&h)?;
        y.add_assign(x)?;
        Ok(y)
    }
}

/// Two InvRes blocks applied to the pooled attention-resolution map.
#[derive(Debug, Clone)]
pub struct Mixer {
    pub blocks: Vec<InvResParams>,
    pub resolution: usize,
}

impl Mixer {
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let [n, c, h, w] = x.dims4("mixer")?;
        if h != self.resolution || w != self.resolution {
            return Err(Error::shape("mixer", &[n, c, h, w], &[n, c, self.resolution, self.resolution]));
        }
        let mut y = x.clone();
        for b in &self.blocks {
            y = b.forward(&y)?;
        }
        Ok(y)
    }
}

// ---------------------------------------------------------------------------
// Stem and embeddings

/// Three stride-2 3x3 convolutions with batch norm and GeLU.
#[derive(Debug, Clone)]
pub struct Stem {
    pub convs: Vec<ConvBn>,
}

impl Stem {
    pub fn bind(src: &mut dyn ParamSource, spec: &VariantSpec) -> Result<Self> {
        let ch = spec.hyper.stem.channels(spec.stage_dims[0]);
        let convs = (0..3)
            .map(|i| ConvBn::bind(src, &format!("stem.conv{i}"), ch[i], ch[i + 1], ConvSpec::square(3, 2)))
            .collect::<Result<_>>()?;
        Ok(Self { convs })
    }

    pub fn export(&self, store: &mut WeightStore) {
        for (i, c) in self.convs.iter().enumerate() {
            c.export(&format!("stem.conv{i}"), store);
        }
    }

    pub fn forward(&self, img: &Tensor) -> Result<Tensor> {
        let [_, _, h, w] = img.dims4("stem")?;
        if h % 8 != 0 || w % 8 != 0 {
            return Err(Error::geometry("stem", format!("input {h}x{w} is not divisible by 8")));
        }
        let mut x = img.clone();
        for c in &self.convs {
            x = c.forward(&x)?;
            gelu_in_place(&mut x);
        }
        Ok(x)
    }
}

/// Stride-2 3x3 convolution with batch norm between stages.
#[derive(Debug, Clone)]
pub struct Embedding(pub ConvBn);

impl Embedding {
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let [_, _, h, w] = x.dims4("embedding")?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::geometry("embedding", format!("input {h}x{w} has an odd extent")));
        }
        self.0.forward(x)
    }
}

// ---------------------------------------------------------------------------
// Attention

/// Multi-head attention over token matrices `[T, width]`. Scores are
/// `q k^T / sqrt(d)` plus the optional positional bias; rows are softmaxed and
/// applied to `v`. When `capture` is given, each head's weight matrix is
/// appended to it.
fn attend(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    heads: usize,
    bias: Option<(&Tensor, BiasMode)>,
    mut capture: Option<&mut Vec<Tensor>>,
) -> Result<Tensor> {
    let [t, width] = q.dims2("attention")?;
    if k.shape() != q.shape() || v.shape() != q.shape() {
        return Err(Error::shape("attention", q.shape(), v.shape()));
    }
    if heads == 0 || width % heads != 0 {
        return Err(Error::config("heads", format!("{heads} heads do not divide width {width}")));
    }
    if let Some((b, _)) = bias {
        if b.numel() != t {
            return Err(Error::config(
                "pos_bias",
                format!("bias has {} entries but the map has {t} tokens", b.numel()),
            ));
        }
    }
    let d = width / heads;
    let scale = 1.0 / (d as f32).sqrt();
    let mut out = vec![0.0; t * width];
    let mut scores = vec![0.0; t * t];
    let mut head_out = vec![0.0; t * d];
    fn column(data: &[f32], offset: usize, rows: usize, cols: usize, rs: usize) -> MatRef<'_> {
        MatRef {
            data: &data[offset..],
            rows,
            cols,
            rs,
            cs: 1,
        }
    }
    for h in 0..heads {
        let kt = MatRef {
            data: &k.data()[h * d..],
            rows: d,
            cols: t,
            rs: 1,
            cs: width,
        };
        gemm(column(q.data(), h * d, t, d, width), kt, &mut scores, false);
        for (i, row) in scores.chunks_mut(t).enumerate() {
            row.iter_mut().for_each(|s| *s *= scale);
            match bias {
                Some((b, BiasMode::PerKey)) => row.iter_mut().zip(b.data()).for_each(|(s, b)| *s += b),
                Some((b, BiasMode::PerQuery)) => row.iter_mut().for_each(|s| *s += b.data()[i]),
                None => {}
            }
            softmax_in_place(row);
        }
        if let Some(c) = capture.as_deref_mut() {
            c.push(Tensor::new(vec![t, t], scores.clone())?);
        }
        gemm(MatRef::row_major(&scores, t, t), column(v.data(), h * d, t, d, width), &mut head_out, false);
        for (dst, src) in out.chunks_mut(width).zip(head_out.chunks(d)) {
            dst[h * d..(h + 1) * d].copy_from_slice(src);
        }
    }
    Tensor::new(vec![t, width], out)
}

/// Self-attention where query and key are both the shared projection `y`
/// and values come from the convolutional value branch `y_value`.
pub fn mhsa(y: &Tensor, y_value: &Tensor, pos_bias: &Tensor, heads: usize, mode: BiasMode) -> Result<Tensor> {
    attend(y, y, y_value, heads, Some((pos_bias, mode)), None)
}

/// Per-head attention weight matrices of [`mhsa`].
pub fn mhsa_weights(y: &Tensor, pos_bias: &Tensor, heads: usize, mode: BiasMode) -> Result<Vec<Tensor>> {
    let mut weights = Vec::with_capacity(heads);
    attend(y, y, y, heads, Some((pos_bias, mode)), Some(&mut weights))?;
    Ok(weights)
}

/// `GeLU(DW(BN(y))) + y` on the attention-resolution map.
pub fn value_branch(y: &Tensor, norm: &BatchNorm, dw: &Conv2d) -> Result<Tensor> {
    let mut v = dw.forward(&norm.apply(y)?)?;
    gelu_in_place(&mut v);
    v.add_assign(y)?;
    Ok(v)
}

/// Linear -> GeLU -> Linear on tokens.
#[derive(Debug, Clone)]
pub struct Ffn {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Ffn {
    pub fn bind(src: &mut dyn ParamSource, prefix: &str, channels: usize, ratio: usize) -> Result<Self> {
        Ok(Self {
            fc1: Linear::bind(src, &format!("{prefix}.0"), channels, channels * ratio)?,
            fc2: Linear::bind(src, &format!("{prefix}.1"), channels * ratio, channels)?,
        })
    }

    pub fn export(&self, prefix: &str, store: &mut WeightStore) {
        self.fc1.export(&format!("{prefix}.0"), store);
        self.fc2.export(&format!("{prefix}.1"), store);
    }

    pub fn forward(&self, tokens: &Tensor) -> Result<Tensor> {
        let mut h = self.fc1.forward(tokens)?;
        gelu_in_place(&mut h);
        self.fc2.forward(&h)
    }
}

/// Residual feed-forward sub-layer on a map: `x + FFN(x)`.
fn ffn_residual(ffn: &Ffn, x: &Tensor) -> Result<Tensor> {
    let [_, _, h, w] = x.dims4("ffn")?;
    let update = from_tokens(&ffn.forward(&to_tokens(x)?)?, h, w)?;
    x.add(&update)
}

/// Modified attention block parameters.
#[derive(Debug, Clone)]
pub struct MAttnParams {
    /// Batch norm on the block input; folded into `pw` when absent.
    pub prenorm: Option<BatchNorm>,
    /// The single point-wise projection shared by query, key and value.
    pub pw: Conv2d,
    pub value_norm: BatchNorm,
    pub value_dw: Conv2d,
    /// One learnable bias per token position.
    pub pos_bias: Tensor,
    pub out_linear: Linear,
    pub ffn: Ffn,
    pub heads: usize,
    pub bias_mode: BiasMode,
}

impl MAttnParams {
    pub fn bind(src: &mut dyn ParamSource, prefix: &str, spec: &VariantSpec, stage: usize) -> Result<Self> {
        let c = spec.stage_dims[stage];
        let width = spec.attn_width(stage);
        let tokens = spec.attn_hw * spec.attn_hw;
        let pw_norm = format!("{prefix}.pw.prenorm");
        let prenorm = if src.has(&format!("{pw_norm}.gamma")) {
            Some(src.take_bn(&pw_norm, c)?)
        } else {
            None
        };
        Ok(Self {
            prenorm,
            pw: Conv2d::bind(src, &format!("{prefix}.pw"), c, width, ConvSpec::pointwise())?,
            value_norm: src.take_bn(&format!("{prefix}.dw.prenorm"), width)?,
            value_dw: Conv2d::bind(src, &format!("{prefix}.dw"), width, width, ConvSpec::depthwise(3, width))?,
            pos_bias: src.take(&format!("{prefix}.bias"), &[tokens], ParamKind::Bias)?,
            out_linear: Linear::bind(src, &format!("{prefix}.linear"), width, c)?,
            ffn: Ffn::bind(src, &format!("{prefix}.ffn"), c, spec.hyper.ffn_ratio)?,
            heads: spec.heads(stage, false),
            bias_mode: spec.bias_mode,
        })
    }

    pub fn export(&self, prefix: &str, store: &mut WeightStore) {
        if let Some(bn) = &self.prenorm {
            put_bn(store, &format!("{prefix}.pw.prenorm"), bn);
        }
        self.pw.export(&format!("{prefix}.pw"), store);
        put_bn(store, &format!("{prefix}.dw.prenorm"), &self.value_norm);
        self.value_dw.export(&format!("{prefix}.dw"), store);
        put(store, format!("{prefix}.bias"), &self.pos_bias);
        self.out_linear.export(&format!("{prefix}.linear"), store);
        self.ffn.export(&format!("{prefix}.ffn"), store);
    }

    /// `x' = x + Linear(MHSA(PW(x)))`, the attention half of the block.
    pub fn attention_residual(&self, x: &Tensor) -> Result<Tensor> {
        let [_, _, h, w] = x.dims4("mattn")?;
        let normed;
        let input = match &self.prenorm {
            Some(bn) => {
                normed = bn.apply(x)?;
                &normed
            }
            None => x,
        };
        let y = self.pw.forward(input)?;
        let y_value = value_branch(&y, &self.value_norm, &self.value_dw)?;
        let attn = mhsa(&to_tokens(&y)?, &to_tokens(&y_value)?, &self.pos_bias, self.heads, self.bias_mode)?;
        let update = from_tokens(&self.out_linear.forward(&attn)?, h, w)?;
        x.add(&update)
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        per_item(x, |x| ffn_residual(&self.ffn, &self.attention_residual(x)?))
    }
}

/// Canonical transformer attention used by the standard-attention ablation.
#[derive(Debug, Clone)]
pub struct StdAttnParams {
    pub norm: BatchNorm,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub proj: Linear,
    pub ffn: Ffn,
    pub heads: usize,
}

impl StdAttnParams {
    pub fn bind(src: &mut dyn ParamSource, prefix: &str, spec: &VariantSpec, stage: usize) -> Result<Self> {
        let c = spec.stage_dims[stage];
        Ok(Self {
            norm: src.take_bn(&format!("{prefix}.norm"), c)?,
            q: Linear::bind(src, &format!("{prefix}.q"), c, c)?,
            k: Linear::bind(src, &format!("{prefix}.k"), c, c)?,
            v: Linear::bind(src, &format!("{prefix}.v"), c, c)?,
            proj: Linear::bind(src, &format!("{prefix}.proj"), c, c)?,
            ffn: Ffn::bind(src, &format!("{prefix}.ffn"), c, spec.hyper.ffn_ratio)?,
            heads: spec.heads(stage, true),
        })
    }

    pub fn export(&self, prefix: &str, store: &mut WeightStore) {
        put_bn(store, &format!("{prefix}.norm"), &self.norm);
        self.q.export(&format!("{prefix}.q"), store);
        self.k.export(&format!("{prefix}.k"), store);
        self.v.export(&format!("{prefix}.v"), store);
        self.proj.export(&format!("{prefix}.proj"), store);
        self.ffn.export(&format!("{prefix}.ffn"), store);
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        per_item(x, |x| {
            let [_, _, h, w] = x.dims4("std_attn")?;
            let t = to_tokens(&self.norm.apply(x)?)?;
            let (q, k, v) = (self.q.forward(&t)?, self.k.forward(&t)?, self.v.forward(&t)?);
            let attn = attend(&q, &k, &v, self.heads, None, None)?;
            let x1 = x.add(&from_tokens(&self.proj.forward(&attn)?, h, w)?)?;
            ffn_residual(&self.ffn, &x1)
        })
    }
}

#[derive(Debug, Clone)]
pub enum AttentionLayer {
    Modified(MAttnParams),
    Standard(StdAttnParams),
}

impl AttentionLayer {
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        match self {
            AttentionLayer::Modified(p) => p.forward(x),
            AttentionLayer::Standard(p) => p.forward(x),
        }
    }

    pub fn export(&self, prefix: &str, store: &mut WeightStore) {
        match self {
            AttentionLayer::Modified(p) => p.export(prefix, store),
            AttentionLayer::Standard(p) => p.export(prefix, store),
        }
    }
}

// ---------------------------------------------------------------------------
// Upsampling, fusion, stage block

/// Learnable transposed convolution with `kernel == stride == factor`.
#[derive(Debug, Clone)]
pub struct ConvTranspose {
    pub weight: Tensor,
    pub bias: Tensor,
    pub factor: usize,
}

impl ConvTranspose {
    pub fn bind(src: &mut dyn ParamSource, prefix: &str, channels: usize, factor: usize) -> Result<Self> {
        Ok(Self {
            weight: src.take(&format!("{prefix}.w"), &[channels, channels, factor, factor], ParamKind::Weight)?,
            bias: src.take(&format!("{prefix}.b"), &[channels], ParamKind::Bias)?,
            factor,
        })
    }

    pub fn export(&self, prefix: &str, store: &mut WeightStore) {
        put(store, format!("{prefix}.w"), &self.weight);
        put(store, format!("{prefix}.b"), &self.bias);
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        conv_transpose2d(x, &self.weight, Some(&self.bias), self.factor)
    }
}

/// Gate projection and channel-halving merge projection.
#[derive(Debug, Clone)]
pub struct FuseParams {
    /// Absent when the local stream is ablated.
    pub gate: Option<ConvBn>,
    pub merge: ConvBn,
}

impl FuseParams {
    pub fn bind(src: &mut dyn ParamSource, prefix: &str, channels: usize, local_stream: bool) -> Result<Self> {
        let gate = if local_stream {
            Some(ConvBn::bind(src, &format!("{prefix}.gate"), channels, channels, ConvSpec::pointwise())?)
        } else {
            None
        };
        let merge_in = if local_stream { 2 * channels } else { channels };
        Ok(Self {
            gate,
            merge: ConvBn::bind(src, &format!("{prefix}.merge"), merge_in, channels, ConvSpec::pointwise())?,
        })
    }

    pub fn export(&self, prefix: &str, store: &mut WeightStore) {
        if let Some(g) = &self.gate {
            g.export(&format!("{prefix}.gate"), store);
        }
        self.merge.export(&format!("{prefix}.merge"), store);
    }
}

/// Gates the local stream with `sigmoid(Proj(x_g))`, concatenates it with the
/// global stream along channels and projects `2C -> C`. Without a gate the
/// global stream goes straight to the merge projection.
pub fn fuse_streams(x_l: &Tensor, x_g: &Tensor, p: &FuseParams) -> Result<Tensor> {
    match &p.gate {
        Some(gate) => {
            if x_l.shape() != x_g.shape() {
                return Err(Error::shape("fuse_streams", x_l.shape(), x_g.shape()));
            }
            let mut w = gate.forward(x_g)?;
            w.data_mut().iter_mut().for_each(|v| *v = sigmoid(*v));
            let gated = x_l.mul(&w)?;
            p.merge.forward(&Tensor::concat_channels(&gated, x_g)?)
        }
        None => p.merge.forward(x_g),
    }
}

/// Which sub-blocks a stage contains.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StageGraph {
    pub invres_blocks: usize,
    pub mixer_blocks: usize,
    pub attention_blocks: usize,
    pub standard_attention: bool,
    pub local_stream: bool,
}

impl StageGraph {
    pub fn for_stage(spec: &VariantSpec, stage: usize) -> Self {
        Self {
            invres_blocks: spec.invres_counts[stage],
            mixer_blocks: 2 * spec.mixer_counts[stage],
            attention_blocks: spec.mattn_counts[stage],
            standard_attention: false,
            local_stream: true,
        }
    }
}

/// Rewrites a stage graph for the ablation flags.
pub fn apply_ablation(graph: StageGraph, flags: AblationFlags) -> StageGraph {
    StageGraph {
        standard_attention: graph.standard_attention || flags.standard_attention,
        local_stream: graph.local_stream && !flags.no_local_stream,
        ..graph
    }
}

#[derive(Debug, Clone)]
pub struct StageParams {
    pub invres: Vec<InvResParams>,
    pub mixer: Mixer,
    pub attention: Vec<AttentionLayer>,
    pub convt: ConvTranspose,
    pub fuse: FuseParams,
    pub attn_hw: usize,
}

impl StageParams {
    pub fn bind(
        src: &mut dyn ParamSource,
        spec: &VariantSpec,
        stage: usize,
        graph: StageGraph,
    ) -> Result<Self> {
        let prefix = format!("stage{}", stage + 1);
        let c = spec.stage_dims[stage];
        let e = spec.hyper.expansion[stage];
        let invres = (0..graph.invres_blocks)
            .map(|k| InvResParams::bind(src, &format!("{prefix}.invres{k}"), c, e))
            .collect::<Result<_>>()?;
        let mixer = Mixer {
            blocks: (0..graph.mixer_blocks)
                .map(|k| InvResParams::bind(src, &format!("{prefix}.mixer.{k}"), c, e))
                .collect::<Result<_>>()?,
            resolution: spec.attn_hw,
        };
        let attention = (0..graph.attention_blocks)
            .map(|k| {
                let p = format!("{prefix}.mattn{k}");
                Ok(if graph.standard_attention {
                    AttentionLayer::Standard(StdAttnParams::bind(src, &p, spec, stage)?)
                } else {
                    AttentionLayer::Modified(MAttnParams::bind(src, &p, spec, stage)?)
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            invres,
            mixer,
            attention,
            convt: ConvTranspose::bind(src, &format!("{prefix}.convt"), c, spec.upsample_factor(stage))?,
            fuse: FuseParams::bind(src, &format!("{prefix}.fuse"), c, graph.local_stream)?,
            attn_hw: spec.attn_hw,
        })
    }

    pub fn export(&self, prefix: &str, store: &mut WeightStore) {
        for (k, b) in self.invres.iter().enumerate() {
            b.export(&format!("{prefix}.invres{k}"), store);
        }
        for (k, b) in self.mixer.blocks.iter().enumerate() {
            b.export(&format!("{prefix}.mixer.{k}"), store);
        }
        for (k, a) in self.attention.iter().enumerate() {
            a.export(&format!("{prefix}.mattn{k}"), store);
        }
        self.convt.export(&format!("{prefix}.convt"), store);
        self.fuse.export(&format!("{prefix}.fuse"), store);
    }

    pub fn channels(&self) -> usize {
        self.fuse.merge.conv.out_channels()
    }

    /// Pool to the attention resolution, Mixer, attention stack, ConvT back.
    pub fn global_stream(&self, x_l: &Tensor) -> Result<Tensor> {
        self.global_stream_observed(x_l, "", &mut ())
    }

    fn global_stream_observed(&self, x_l: &Tensor, prefix: &str, obs: &mut dyn Observer) -> Result<Tensor> {
        let [_, _, h, w] = x_l.dims4("global_stream")?;
        if h != self.attn_hw * self.convt.factor || w != self.attn_hw * self.convt.factor {
            return Err(Error::geometry(
                "global_stream",
                format!(
                    "{h}x{w} map cannot be restored from {0}x{0} with factor {1}",
                    self.attn_hw, self.convt.factor
                ),
            ));
        }
        let (mut x, dt) = timed(|| self.mixer.forward(&adaptive_avg_pool2d(x_l, self.attn_hw, self.attn_hw)?))?;
        obs.record(&format!("{prefix}.mixer"), &x, dt);
        for (k, a) in self.attention.iter().enumerate() {
            let (y, dt) = timed(|| a.forward(&x))?;
            obs.record(&format!("{prefix}.mattn{k}"), &y, dt);
            x = y;
        }
        let (y, dt) = timed(|| self.convt.forward(&x))?;
        obs.record(&format!("{prefix}.convt"), &y, dt);
        Ok(y)
    }

    /// InvRes stack, then the local pass-through and global stream, fused.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.forward_observed(x, "", &mut ())
    }

    pub fn forward_observed(&self, x: &Tensor, prefix: &str, obs: &mut dyn Observer) -> Result<Tensor> {
        let mut x_l = x.clone();
        for (k, b) in self.invres.iter().enumerate() {
            let (y, dt) = timed(|| b.forward(&x_l))?;
            obs.record(&format!("{prefix}.invres{k}"), &y, dt);
            x_l = y;
        }
        let x_g = self.global_stream_observed(&x_l, prefix, obs)?;
        let (y, dt) = timed(|| fuse_streams(&x_l, &x_g, &self.fuse))?;
        obs.record(&format!("{prefix}.fuse"), &y, dt);
        Ok(y)
    }

    pub(crate) fn out_shape(&self, shape: [usize; 4]) -> Result<[usize; 4]> {
        let [n, c, h, w] = shape;
        if c != self.channels() {
            return Err(Error::shape("stage", &shape, &[n, self.channels(), h, w]));
        }
        if h != self.attn_hw * self.convt.factor || w != h {
            return Err(Error::geometry("stage", format!("unexpected {h}x{w} map")));
        }
        Ok(shape)
    }
}

pub(crate) fn conv_out_shape(c: &ConvBn, shape: [usize; 4]) -> Result<[usize; 4]> {
    c.out_shape(shape)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Variant;
    use crate::params::{Init, Initializer};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn uniform(shape: Vec<usize>, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.random_range(-1.0f32..1.0))
    }

    fn init() -> Initializer {
        Initializer::new(Init::Random { seed: 9 })
    }

    fn exact_bn(c: usize) -> BatchNorm {
        BatchNorm {
            eps: 0.0,
            ..BatchNorm::identity(c)
        }
    }

    #[test]
    fn invres_with_zero_branch_is_identity() {
        let mut p = InvResParams::bind(&mut init(), "b", 16, 2).unwrap();
        p.project.conv.weight = Tensor::zeros(p.project.conv.weight.shape().to_vec());
        let x = uniform(vec![1, 16, 7, 7], 1);
        assert_eq!(p.forward(&x).unwrap(), x);
        p.project.conv.weight.data_mut()[0] = 1.0;
        assert_ne!(p.forward(&x).unwrap(), x);
    }

    #[test]
    fn mattn_with_zero_branches_is_identity() {
        let spec = VariantSpec::named(Variant::XS);
        let mut p = MAttnParams::bind(&mut init(), "a", &spec, 0).unwrap();
        p.out_linear.weight = Tensor::zeros(p.out_linear.weight.shape().to_vec());
        p.ffn.fc2.weight = Tensor::zeros(p.ffn.fc2.weight.shape().to_vec());
        let x = uniform(vec![1, 96, 7, 7], 2);
        assert_eq!(p.forward(&x).unwrap(), x);
    }

    #[test]
    fn value_branch_with_zero_kernel_is_identity() {
        let y = uniform(vec![1, 8, 7, 7], 3);
        let dw = Conv2d {
            weight: Tensor::zeros(vec![8, 1, 3, 3]),
            bias: Some(Tensor::zeros(vec![8])),
            spec: ConvSpec::depthwise(3, 8),
        };
        assert_eq!(value_branch(&y, &BatchNorm::identity(8), &dw).unwrap(), y);
    }

    #[test]
    fn attention_rows_are_distributions() {
        let y = uniform(vec![49, 64], 4);
        let bias = uniform(vec![49], 5);
        for w in mhsa_weights(&y, &bias, 2, BiasMode::PerKey).unwrap() {
            assert_eq!(w.shape(), &[49, 49]);
            for row in w.data().chunks(49) {
                assert!(row.iter().all(|&v| v >= 0.0));
                assert!((row.iter().map(|&v| v as f64).sum::<f64>() - 1.0).abs() <= 1e-6);
            }
        }
    }

    #[test]
    fn three_token_single_head_oracle() {
        let y = [[1.0f64, 0.0], [0.0, 1.0], [1.0, 1.0]];
        let v = [[1.0f64, 2.0], [3.0, 4.0], [5.0, 6.0]];
        let b = [0.1f64, -0.2, 0.3];
        let scale = 1.0 / 2f64.sqrt();
        let mut expect = vec![];
        for yi in &y {
            let s: Vec<f64> = (0..3).map(|j| (yi[0] * y[j][0] + yi[1] * y[j][1]) * scale + b[j]).collect();
            let m = s.iter().cloned().fold(f64::MIN, f64::max);
            let e: Vec<f64> = s.iter().map(|x| (x - m).exp()).collect();
            let z: f64 = e.iter().sum();
            for c in 0..2 {
                expect.push((0..3).map(|j| e[j] / z * v[j][c]).sum::<f64>());
            }
        }
        let t = |rows: &[[f64; 2]; 3]| Tensor::new(vec![3, 2], rows.iter().flatten().map(|&x| x as f32).collect()).unwrap();
        let bias = Tensor::new(vec![3], b.iter().map(|&x| x as f32).collect()).unwrap();
        let got = mhsa(&t(&y), &t(&v), &bias, 1, BiasMode::PerKey).unwrap();
        for (g, e) in got.data().iter().zip(&expect) {
            assert!((*g as f64 - e).abs() <= 1e-6, "{g} vs {e}");
        }
    }

    #[test]
    fn heads_are_independent_column_blocks() {
        let y = uniform(vec![9, 8], 6);
        let v = uniform(vec![9, 8], 7);
        let bias = uniform(vec![9], 8);
        let both = mhsa(&y, &v, &bias, 2, BiasMode::PerKey).unwrap();
        for h in 0..2 {
            let cols = |t: &Tensor| {
                let d: Vec<f32> = t.data().chunks(8).flat_map(|r| r[h * 4..h * 4 + 4].to_vec()).collect();
                Tensor::new(vec![9, 4], d).unwrap()
            };
            let single = mhsa(&cols(&y), &cols(&v), &bias, 1, BiasMode::PerKey).unwrap();
            assert!(cols(&both).max_abs_diff(&single).unwrap() <= 1e-6);
        }
    }

    #[test]
    fn per_query_bias_is_a_softmax_no_op_but_per_key_is_not() {
        let y = uniform(vec![49, 32], 9);
        let v = uniform(vec![49, 32], 10);
        let zero = Tensor::zeros(vec![49]);
        let bias = Tensor::from_fn(vec![49], |i| i as f32 * 0.1);
        let base = mhsa(&y, &v, &zero, 1, BiasMode::PerKey).unwrap();
        let per_query = mhsa(&y, &v, &bias, 1, BiasMode::PerQuery).unwrap();
        assert!(per_query.max_abs_diff(&base).unwrap() <= 1e-6);
        let per_key = mhsa(&y, &v, &bias, 1, BiasMode::PerKey).unwrap();
        assert!(per_key.max_abs_diff(&base).unwrap() > 1e-3);
        // a uniform per-key shift is still a no-op
        let shifted = mhsa(&y, &v, &Tensor::full(vec![49], 3.0), 1, BiasMode::PerKey).unwrap();
        assert!(shifted.max_abs_diff(&base).unwrap() <= 1e-6);
    }

    #[test]
    fn attention_rejects_mismatched_bias() {
        let y = uniform(vec![49, 32], 11);
        let err = mhsa(&y, &y, &Tensor::zeros(vec![48]), 1, BiasMode::PerKey).unwrap_err();
        assert!(matches!(err, Error::Config { .. }));
    }

    fn selector(c: usize, take_local: bool) -> ConvBn {
        let w = Tensor::from_fn(vec![c, 2 * c, 1, 1], |i| {
            let (o, k) = (i / (2 * c), i % (2 * c));
            let target = if take_local { o } else { c + o };
            if k == target {
                1.0
            } else {
                0.0
            }
        });
        ConvBn {
            conv: Conv2d {
                weight: w,
                bias: None,
                spec: ConvSpec::pointwise(),
            },
            bn: Some(exact_bn(c)),
        }
    }

    #[test]
    fn fuse_merge_selectors() {
        let c = 4;
        let gate = ConvBn {
            conv: Conv2d {
                weight: uniform(vec![c, c, 1, 1], 12),
                bias: None,
                spec: ConvSpec::pointwise(),
            },
            bn: Some(exact_bn(c)),
        };
        let x_l = uniform(vec![1, c, 5, 5], 13);
        let x_g = uniform(vec![1, c, 5, 5], 14);

        let global = FuseParams {
            gate: Some(gate.clone()),
            merge: selector(c, false),
        };
        assert_eq!(fuse_streams(&x_l, &x_g, &global).unwrap(), x_g);

        let local = FuseParams {
            gate: Some(gate.clone()),
            merge: selector(c, true),
        };
        let mut w = gate.forward(&x_g).unwrap();
        w.data_mut().iter_mut().for_each(|v| *v = sigmoid(*v));
        let expect = x_l.mul(&w).unwrap();
        assert!(fuse_streams(&x_l, &x_g, &local).unwrap().max_abs_diff(&expect).unwrap() <= 1e-6);
    }

    #[test]
    fn fuse_rejects_mismatched_streams() {
        let p = FuseParams::bind(&mut init(), "f", 4, true).unwrap();
        let err = fuse_streams(&Tensor::zeros(vec![1, 4, 6, 6]), &Tensor::zeros(vec![1, 4, 7, 7]), &p).unwrap_err();
        assert!(matches!(err, Error::Shape { .. }));
    }

    #[test]
    fn ablation_rewrites() {
        let spec = VariantSpec::named(Variant::B);
        let g = StageGraph::for_stage(&spec, 1);
        assert_eq!(apply_ablation(g, AblationFlags::NONE), g);
        let nl = apply_ablation(g, AblationFlags::NO_LOCAL);
        assert!(!nl.local_stream && !nl.standard_attention);
        let sa = apply_ablation(g, AblationFlags::STANDARD_ATTENTION);
        assert!(sa.local_stream && sa.standard_attention);
        assert_eq!(sa.attention_blocks, g.attention_blocks);
    }

    #[derive(Default)]
    struct Shapes(Vec<(String, Vec<usize>)>);

    impl Observer for Shapes {
        fn record(&mut self, name: &str, output: &Tensor, _: Duration) {
            self.0.push((name.to_string(), output.shape().to_vec()));
        }
    }

    #[test]
    fn global_stream_attends_at_seven_by_seven() {
        let spec = VariantSpec::named(Variant::XS);
        let g = StageGraph::for_stage(&spec, 0);
        let stage = StageParams::bind(&mut init(), &spec, 0, g).unwrap();
        let mut obs = Shapes::default();
        let x = uniform(vec![1, 96, 28, 28], 15);
        let y = stage.forward_observed(&x, "stage1", &mut obs).unwrap();
        assert_eq!(y.shape(), &[1, 96, 28, 28]);
        for (name, shape) in &obs.0 {
            let hw = if name.contains("mixer") || name.contains("mattn") { 7 } else { 28 };
            assert_eq!(shape, &[1, 96, hw, hw], "{name}");
        }
        assert_eq!(obs.0.len(), 2 + 1 + 2 + 1 + 1);
    }

    #[test]
    fn stem_and_embedding_geometry() {
        let spec = VariantSpec::named(Variant::XS);
        let stem = Stem::bind(&mut init(), &spec).unwrap();
        let y = stem.forward(&uniform(vec![1, 3, 64, 64], 16)).unwrap();
        assert_eq!(y.shape(), &[1, 96, 8, 8]);
        assert!(matches!(stem.forward(&Tensor::zeros(vec![1, 3, 60, 60])), Err(Error::Geometry { .. })));

        let e = Embedding(ConvBn::bind(&mut init(), "e", 4, 8, ConvSpec::square(3, 2)).unwrap());
        assert_eq!(e.forward(&Tensor::zeros(vec![1, 4, 14, 14])).unwrap().shape(), &[1, 8, 7, 7]);
        assert!(matches!(e.forward(&Tensor::zeros(vec![1, 4, 7, 7])), Err(Error::Geometry { .. })));
    }

    #[test]
    fn tokens_round_trip() {
        let x = uniform(vec![1, 5, 3, 4], 17);
        let t = to_tokens(&x).unwrap();
        assert_eq!(t.shape(), &[12, 5]);
        // token (row 1, col 2) channel 3
        assert_eq!(t.data()[(4 + 2) * 5 + 3], x.data()[3 * 12 + 4 + 2]);
        assert_eq!(from_tokens(&t, 3, 4).unwrap(), x);
    }

    #[test]
    fn batched_attention_matches_per_item() {
        let spec = VariantSpec::named(Variant::XS);
        let p = AttentionLayer::Modified(MAttnParams::bind(&mut init(), "a", &spec, 0).unwrap());
        let a = uniform(vec![1, 96, 7, 7], 18);
        let b = uniform(vec![1, 96, 7, 7], 19);
        let mut both = a.data().to_vec();
        both.extend_from_slice(b.data());
        let y = p.forward(&Tensor::new(vec![2, 96, 7, 7], both).unwrap()).unwrap();
        let mut expect = p.forward(&a).unwrap().into_data();
        expect.extend(p.forward(&b).unwrap().into_data());
        assert_eq!(y.data(), &expect[..]);
    }
}
