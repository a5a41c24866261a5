use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const BN_EPS: f32 = 1e-5;

/// Inference-form batch normalization parameters for one channel set.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub mean: Tensor,
    pub var: Tensor,
    pub eps: f32,
}

impl BatchNorm {
    pub fn identity(channels: usize) -> Self {
        Self {
            gamma: Tensor::full(vec![channels], 1.0),
            beta: Tensor::zeros(vec![channels]),
            mean: Tensor::zeros(vec![channels]),
            var: Tensor::full(vec![channels], 1.0),
            eps: BN_EPS,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.numel()
    }

    /// Per-channel `(scale, shift)` with `y = scale * x + shift`.
    pub fn scale_shift(&self) -> Result<(Vec<f32>, Vec<f32>)> {
        let c = self.channels();
        if [&self.beta, &self.mean, &self.var].iter().any(|t| t.numel() != c) {
            return Err(Error::shape("batch_norm", self.gamma.shape(), self.var.shape()));
        }
        let mut scale = Vec::with_capacity(c);
        let mut shift = Vec::with_capacity(c);
        for i in 0..c {
            let var = self.var.data()[i];
            if var < 0.0 || var.is_nan() {
                return Err(Error::Data(format!("negative variance {var} in channel {i}")));
            }
            let s = self.gamma.data()[i] / (var + self.eps).sqrt();
            scale.push(s);
            shift.push(self.beta.data()[i] - s * self.mean.data()[i]);
        }
        Ok((scale, shift))
    }

    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        let mut out = x.clone();
        self.apply_in_place(&mut out)?;
        Ok(out)
    }

    pub fn apply_in_place(&self, x: &mut Tensor) -> Result<()> {
        let [_, c, h, w] = x.dims4("batch_norm")?;
        if c != self.channels() {
            return Err(Error::shape("batch_norm", x.shape(), self.gamma.shape()));
        }
        let (scale, shift) = self.scale_shift()?;
        for (i, plane) in x.data_mut().chunks_mut(h * w).enumerate() {
            let (s, t) = (scale[i % c], shift[i % c]);
            plane.iter_mut().for_each(|v| *v = s * *v + t);
        }
        Ok(())
    }
}

/// `y = gamma * (x - mean) / sqrt(var + eps) + beta`, per channel of `[N, C, H, W]`.
pub fn batch_norm_inference(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    mean: &Tensor,
    var: &Tensor,
    eps: f32,
) -> Result<Tensor> {
    BatchNorm {
        gamma: gamma.clone(),
        beta: beta.clone(),
        mean: mean.clone(),
        var: var.clone(),
        eps,
    }
    .apply(x)
}
