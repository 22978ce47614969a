//! Small building blocks on top of candle tensors.

use candle_core::{CpuStorage, CustomOp1, DType, Device, Layout, Result, Shape, Tensor, D};
use forge_core::image::GrayImage;
use ndarray::Array2;

use crate::conv;
use crate::params::{Init, ParamStore};

pub const LRELU_SLOPE: f64 = 0.2;

pub struct Conv {
    w: Tensor,
    b: Tensor,
    stride: usize,
    pad: usize,
}

impl Conv {
    /// He-initialized `k x k` convolution with "same" padding for odd `k`.
    pub fn new(p: &mut ParamStore, name: &str, cin: usize, cout: usize, k: usize, stride: usize) -> Result<Self> {
        let std = (2.0 / (cin * k * k) as f64).sqrt();
        Ok(Self {
            w: p.var(&format!("{name}.w"), &[cout, cin, k, k], Init::Normal(std))?,
            b: p.var(&format!("{name}.b"), &[cout], Init::Zeros)?,
            stride,
            pad: k / 2,
        })
    }

    /// Runs in the dtype of `x`; weights are cast when it differs (f64 gradient checks).
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = conv::conv2d(x, &self.w.to_dtype(x.dtype())?, self.stride, self.pad)?;
        let c = self.b.dim(0)?;
        y.broadcast_add(&self.b.to_dtype(x.dtype())?.reshape((1, c, 1, 1))?)
    }
}

pub struct Linear {
    w: Tensor,
    b: Tensor,
}

impl Linear {
    pub fn new(p: &mut ParamStore, name: &str, din: usize, dout: usize, gain: f64) -> Result<Self> {
        Ok(Self {
            w: p.var(&format!("{name}.w"), &[dout, din], Init::Normal(gain / (din as f64).sqrt()))?,
            b: p.var(&format!("{name}.b"), &[dout], Init::Zeros)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        x.matmul(&self.w.to_dtype(x.dtype())?.t()?)?.broadcast_add(&self.b.to_dtype(x.dtype())?)
    }
}

pub fn lrelu(x: &Tensor) -> Result<Tensor> {
    // relu + slope * min(x, 0), written so the backward pass stays elementwise
    (x.relu()? * (1.0 - LRELU_SLOPE))? + (x * LRELU_SLOPE)?
}

/// Nearest-neighbour 2x upsampling; the gradient is a 2x2 block sum.
pub fn up2(x: &Tensor) -> Result<Tensor> {
    x.contiguous()?.apply_op1(Up2)
}

struct Up2;

fn up2_slice<T: Copy>(x: &[T], planes: usize, h: usize, w: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(planes * 4 * h * w);
    for plane in x.chunks_exact(h * w).take(planes) {
        for row in plane.chunks_exact(w) {
            for _ in 0..2 {
                for &v in row {
                    out.push(v);
                    out.push(v);
                }
            }
        }
    }
    out
}

impl CustomOp1 for Up2 {
    fn name(&self) -> &'static str {
        "up2-nearest"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> Result<(CpuStorage, Shape)> {
        let (n, c, h, w) = l.shape().dims4()?;
        let (a, b) = l.contiguous_offsets().ok_or_else(|| candle_core::Error::Msg("up2 needs contiguous input".into()))?;
        let out = match s {
            CpuStorage::F32(v) => CpuStorage::F32(up2_slice(&v[a..b], n * c, h, w)),
            CpuStorage::F64(v) => CpuStorage::F64(up2_slice(&v[a..b], n * c, h, w)),
            _ => candle_core::bail!("up2: only f32 and f64 are supported"),
        };
        Ok((out, Shape::from((n, c, 2 * h, 2 * w))))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad: &Tensor) -> Result<Option<Tensor>> {
        Ok(Some((grad.avg_pool2d(2)? * 4.0)?))
    }
}

pub fn down2(x: &Tensor) -> Result<Tensor> {
    x.avg_pool2d(2)
}

/// Per-sample, per-channel normalization over the spatial axes.
pub fn instance_norm(x: &Tensor, eps: f64) -> Result<Tensor> {
    let mean = x.mean_keepdim(D::Minus1)?.mean_keepdim(D::Minus2)?;
    let xc = x.broadcast_sub(&mean)?;
    let var = xc.sqr()?.mean_keepdim(D::Minus1)?.mean_keepdim(D::Minus2)?;
    xc.broadcast_div(&(var + eps)?.sqrt()?)
}

/// `(1 + gamma) * IN(x) + beta` with `gamma, beta: (N, C)`.
pub fn adain(x: &Tensor, gamma: &Tensor, beta: &Tensor) -> Result<Tensor> {
    let (n, c) = gamma.dims2()?;
    let g = (gamma.reshape((n, c, 1, 1))? + 1.0)?;
    let b = beta.reshape((n, c, 1, 1))?;
    instance_norm(x, 1e-5)?.broadcast_mul(&g)?.broadcast_add(&b)
}

/// `log(1 + exp(x))` from primitive ops, stable for large `|x|`.
pub fn softplus(x: &Tensor) -> Result<Tensor> {
    let pos = x.relu()?;
    let tail = (x.abs()?.neg()?.exp()? + 1.0)?.log()?;
    pos + tail
}

/// Mean binary cross-entropy on logits.
pub fn bce_with_logits(logits: &Tensor, targets: &Tensor) -> Result<Tensor> {
    // softplus(x) - t*x
    (softplus(logits)? - (logits * targets)?)?.mean_all()
}

/// Stacks equally sized images into an `(N, 1, H, W)` f32 tensor.
pub fn images_to_tensor(images: &[&GrayImage], device: &Device) -> Result<Tensor> {
    let (h, w) = images.first().map(|i| i.dim()).unwrap_or((0, 0));
    let mut data = Vec::with_capacity(images.len() * h * w);
    for img in images {
        if img.dim() != (h, w) {
            candle_core::bail!("batch images differ in size: {:?} vs {:?}", img.dim(), (h, w));
        }
        data.extend(img.iter().copied());
    }
    Tensor::from_vec(data, (images.len(), 1, h, w), device)
}

/// Splits an `(N, 1, H, W)` tensor back into images.
pub fn tensor_to_images(t: &Tensor) -> Result<Vec<GrayImage>> {
    let (n, c, h, w) = t.dims4()?;
    if c != 1 {
        candle_core::bail!("expected one channel, got {c}");
    }
    let flat = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
    Ok(flat.chunks_exact(h * w).take(n).map(|c| Array2::from_shape_vec((h, w), c.to_vec()).expect("chunk size")).collect())
}

pub fn scalar(t: &Tensor) -> Result<f64> {
    t.to_dtype(DType::F64)?.to_scalar::<f64>()
}
