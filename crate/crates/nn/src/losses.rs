//! Adversarial and renderer objectives.

use candle_core::{Result, Tensor};
use serde::{Deserialize, Serialize};

use crate::layers::softplus;

/// Logits are clamped to this magnitude before any log-sigmoid.
pub const LOGIT_CLAMP: f64 = 30.0;

#[derive(Debug, thiserror::Error)]
pub enum LossError {
    #[error("empty score batch")]
    EmptyBatch,
    #[error("embedding lengths differ: {0:?} vs {1:?}")]
    EmbeddingMismatch(Vec<usize>, Vec<usize>),
    #[error("binary maps differ in shape: {0:?} vs {1:?}")]
    ShapeMismatch(Vec<usize>, Vec<usize>),
    #[error(transparent)]
    Candle(#[from] candle_core::Error),
}

pub struct AdversarialLosses {
    /// `-mean log sigmoid(d_fake)`.
    pub loss_g: Tensor,
    /// `-mean log sigmoid(d_real) - mean log(1 - sigmoid(d_fake))`.
    pub loss_d: Tensor,
}

fn log_sigmoid(x: &Tensor) -> Result<Tensor> {
    softplus(&x.clamp(-LOGIT_CLAMP, LOGIT_CLAMP)?.neg()?)?.neg()
}

/// Non-saturating GAN losses from discriminator logits.
pub fn adversarial_loss(d_real: &Tensor, d_fake: &Tensor) -> std::result::Result<AdversarialLosses, LossError> {
    if d_real.elem_count() == 0 || d_fake.elem_count() == 0 {
        return Err(LossError::EmptyBatch);
    }
    let real_term = log_sigmoid(d_real)?.mean_all()?;
    // log(1 - sigmoid(x)) = log sigmoid(-x)
    let fake_term = log_sigmoid(&d_fake.neg()?)?.mean_all()?;
    let loss_d = (real_term.neg()? - fake_term)?;
    let loss_g = log_sigmoid(d_fake)?.mean_all()?.neg()?;
    Ok(AdversarialLosses { loss_g, loss_d })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_adv: f64,
    pub lambda_dp: f64,
    pub lambda_i: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda_adv: 1.0, lambda_dp: 2.0, lambda_i: 10.0 }
    }
}

impl LossWeights {
    /// `lambda_adv * adv + lambda_dp * dp + lambda_i * i` on scalars.
    pub fn combine(&self, adv: f64, dp: f64, i: f64) -> f64 {
        self.lambda_adv * adv + self.lambda_dp * dp + self.lambda_i * i
    }

    pub fn combine_tensors(&self, adv: &Tensor, dp: &Tensor, i: &Tensor) -> Result<Tensor> {
        ((adv * self.lambda_adv)? + (dp * self.lambda_dp)?)? + (i * self.lambda_i)?
    }
}

/// `1/2 * sum_k (R - R_hat)^2` per row, averaged over the batch. Inputs are `(N, D)`.
pub fn identity_loss(r: &Tensor, r_hat: &Tensor) -> std::result::Result<Tensor, LossError> {
    if r.dims() != r_hat.dims() {
        return Err(LossError::EmbeddingMismatch(r.dims().to_vec(), r_hat.dims().to_vec()));
    }
    let n = r.dim(0)?;
    Ok(((r - r_hat)?.sqr()?.sum_all()? * (0.5 / n as f64))?)
}

/// `1/2 * sum_xy (I_w - I_w_hat)^2` per image, averaged over the batch.
pub fn pixel_loss(i_w: &Tensor, i_w_hat: &Tensor) -> std::result::Result<Tensor, LossError> {
    if i_w.dims() != i_w_hat.dims() {
        return Err(LossError::ShapeMismatch(i_w.dims().to_vec(), i_w_hat.dims().to_vec()));
    }
    let n = i_w.dim(0)?;
    Ok(((i_w - i_w_hat)?.sqr()?.sum_all()? * (0.5 / n as f64))?)
}

pub struct RendererLosses {
    pub adv: Tensor,
    pub dp: Tensor,
    pub i: Tensor,
    pub generator: Tensor,
    pub discriminator: Tensor,
}

/// All renderer terms; `i_w_hat` is the binarization of the rendered image
/// in the same polarity as `i_w`.
pub fn renderer_losses(
    r: &Tensor,
    r_hat: &Tensor,
    i_w: &Tensor,
    i_w_hat: &Tensor,
    d_real: &Tensor,
    d_fake: &Tensor,
    w: &LossWeights,
) -> std::result::Result<RendererLosses, LossError> {
    let AdversarialLosses { loss_g, loss_d } = adversarial_loss(d_real, d_fake)?;
    let dp = identity_loss(r, r_hat)?;
    let i = pixel_loss(i_w, i_w_hat)?;
    let generator = w.combine_tensors(&loss_g, &dp, &i)?;
    Ok(RendererLosses { adv: loss_g, dp, i, generator, discriminator: loss_d })
}
