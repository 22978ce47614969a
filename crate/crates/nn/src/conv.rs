//! 2-D convolution as candle custom ops.
//!
//! Two paths: a direct loop over kernel taps with contiguous row updates,
//! which wins on large planes with few channels, and patch extraction feeding
//! a matrix product, which wins on small planes. Both carry their own
//! gradient kernels.

use candle_core::{CpuStorage, CustomOp1, CustomOp2, Layout, Result, Shape, Tensor};
use num_traits::Float;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Geom {
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    stride: usize,
    pad: usize,
}

impl Geom {
    fn new(input: (usize, usize, usize, usize), weight: (usize, usize, usize, usize), stride: usize, pad: usize) -> Result<Self> {
        let (n, cin, h, w) = input;
        let (cout, wcin, kh, kw) = weight;
        if wcin != cin {
            candle_core::bail!("conv2d: input has {cin} channels, weight expects {wcin}");
        }
        if h + 2 * pad < kh || w + 2 * pad < kw {
            candle_core::bail!("conv2d: kernel {kh}x{kw} larger than padded input {h}x{w}");
        }
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (w + 2 * pad - kw) / stride + 1;
        Ok(Self { n, cin, h, w, cout, kh, kw, oh, ow, stride, pad })
    }

    /// Output columns `ox` whose tap `kx` lands inside the input row.
    #[inline]
    fn valid_cols(&self, kx: usize) -> (usize, usize) {
        // ix = ox*stride + kx - pad must satisfy 0 <= ix < w
        let lo = if kx >= self.pad { 0 } else { (self.pad - kx).div_ceil(self.stride) };
        let hi_excl = if self.w + self.pad > kx { (self.w + self.pad - kx - 1) / self.stride + 1 } else { 0 };
        (lo, hi_excl.min(self.ow).max(lo))
    }

    #[inline]
    fn in_row(&self, oy: usize, ky: usize) -> Option<usize> {
        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
        (iy >= 0 && (iy as usize) < self.h).then_some(iy as usize)
    }
}

fn slice<'a, T: candle_core::WithDType>(s: &'a CpuStorage, l: &Layout) -> Result<&'a [T]> {
    match l.contiguous_offsets() {
        Some((a, b)) => Ok(&s.as_slice::<T>()?[a..b]),
        None => candle_core::bail!("conv2d custom op needs contiguous inputs"),
    }
}

/// Rows of width `w` split into `stride` column phases of width `pw`, so a
/// strided walk along a row becomes a contiguous slice. Phase `p` of row `r`
/// starts at `(r * stride + p) * pw`.
struct Phased<'a, T: Clone> {
    data: std::borrow::Cow<'a, [T]>,
    stride: usize,
    pw: usize,
}

impl<'a, T: Float> Phased<'a, T> {
    fn split(x: &'a [T], rows: usize, w: usize, stride: usize) -> Self {
        if stride == 1 {
            return Self { data: std::borrow::Cow::Borrowed(x), stride, pw: w };
        }
        let pw = w.div_ceil(stride);
        let mut data = vec![T::zero(); rows * stride * pw];
        for r in 0..rows {
            for (i, &v) in x[r * w..][..w].iter().enumerate() {
                data[(r * stride + i % stride) * pw + i / stride] = v;
            }
        }
        Self { data: std::borrow::Cow::Owned(data), stride, pw }
    }

    /// `len` elements of row `r` starting at column `col` with step `stride`.
    #[inline]
    fn run(&self, r: usize, col: usize, len: usize) -> &[T] {
        &self.data[(r * self.stride + col % self.stride) * self.pw + col / self.stride..][..len]
    }
}

#[inline]
fn axpy<T: Float>(out: &mut [T], a: T, x: &[T]) {
    for (o, &v) in out.iter_mut().zip(x) {
        *o = *o + a * v;
    }
}

/// Dot product with eight independent partial sums so the loop vectorizes.
#[inline]
fn dot<T: Float>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..8 {
            acc[l] = acc[l] + x[l] * y[l];
        }
    }
    let mut s = acc.iter().fold(T::zero(), |s, &v| s + v);
    for (&x, &y) in ra.iter().zip(rb) {
        s = s + x * y;
    }
    s
}

fn forward<T: Float>(g: &Geom, x: &[T], wt: &[T]) -> Vec<T> {
    let xs = Phased::split(x, g.n * g.cin * g.h, g.w, g.stride);
    let mut out = vec![T::zero(); g.n * g.cout * g.oh * g.ow];
    for n in 0..g.n {
        for co in 0..g.cout {
            let o_plane = &mut out[(n * g.cout + co) * g.oh * g.ow..][..g.oh * g.ow];
            for ci in 0..g.cin {
                let row0 = (n * g.cin + ci) * g.h;
                for ky in 0..g.kh {
                    for kx in 0..g.kw {
                        let wv = wt[((co * g.cin + ci) * g.kh + ky) * g.kw + kx];
                        let (lo, hi) = g.valid_cols(kx);
                        if lo >= hi {
                            continue;
                        }
                        let base = lo * g.stride + kx - g.pad;
                        for oy in 0..g.oh {
                            let Some(iy) = g.in_row(oy, ky) else { continue };
                            axpy(&mut o_plane[oy * g.ow + lo..oy * g.ow + hi], wv, xs.run(row0 + iy, base, hi - lo));
                        }
                    }
                }
            }
        }
    }
    out
}

fn input_grad<T: Float>(g: &Geom, gout: &[T], wt: &[T]) -> Vec<T> {
    let pw = g.w.div_ceil(g.stride);
    let rows = g.n * g.cin * g.h;
    // accumulate in phase layout, interleave at the end
    let mut gs = vec![T::zero(); rows * g.stride * pw];
    for n in 0..g.n {
        for ci in 0..g.cin {
            let row0 = (n * g.cin + ci) * g.h;
            for co in 0..g.cout {
                let go_plane = &gout[(n * g.cout + co) * g.oh * g.ow..][..g.oh * g.ow];
                for ky in 0..g.kh {
                    for kx in 0..g.kw {
                        let wv = wt[((co * g.cin + ci) * g.kh + ky) * g.kw + kx];
                        let (lo, hi) = g.valid_cols(kx);
                        if lo >= hi {
                            continue;
                        }
                        let base = lo * g.stride + kx - g.pad;
                        for oy in 0..g.oh {
                            let Some(iy) = g.in_row(oy, ky) else { continue };
                            let at = ((row0 + iy) * g.stride + base % g.stride) * pw + base / g.stride;
                            axpy(&mut gs[at..at + hi - lo], wv, &go_plane[oy * g.ow + lo..oy * g.ow + hi]);
                        }
                    }
                }
            }
        }
    }
    if g.stride == 1 {
        return gs;
    }
    let mut gin = vec![T::zero(); rows * g.w];
    for r in 0..rows {
        for (i, v) in gin[r * g.w..][..g.w].iter_mut().enumerate() {
            *v = gs[(r * g.stride + i % g.stride) * pw + i / g.stride];
        }
    }
    gin
}

fn weight_grad<T: Float>(g: &Geom, gout: &[T], x: &[T]) -> Vec<T> {
    let xs = Phased::split(x, g.n * g.cin * g.h, g.w, g.stride);
    let mut gw = vec![T::zero(); g.cout * g.cin * g.kh * g.kw];
    for co in 0..g.cout {
        for ci in 0..g.cin {
            for ky in 0..g.kh {
                for kx in 0..g.kw {
                    let (lo, hi) = g.valid_cols(kx);
                    if lo >= hi {
                        continue;
                    }
                    let base = lo * g.stride + kx - g.pad;
                    let mut acc = T::zero();
                    for n in 0..g.n {
                        let go_plane = &gout[(n * g.cout + co) * g.oh * g.ow..][..g.oh * g.ow];
                        let row0 = (n * g.cin + ci) * g.h;
                        for oy in 0..g.oh {
                            let Some(iy) = g.in_row(oy, ky) else { continue };
                            acc = acc + dot(&go_plane[oy * g.ow + lo..oy * g.ow + hi], xs.run(row0 + iy, base, hi - lo));
                        }
                    }
                    gw[((co * g.cin + ci) * g.kh + ky) * g.kw + kx] = acc;
                }
            }
        }
    }
    gw
}

/// Patch matrix `(N, Cin*KH*KW, OH*OW)`; row `(ci, ky, kx)` holds the input
/// value under that tap for every output position, zero where it falls in the padding.
fn im2col<T: Float>(g: &Geom, x: &[T]) -> Vec<T> {
    let xs = Phased::split(x, g.n * g.cin * g.h, g.w, g.stride);
    let l = g.oh * g.ow;
    let k = g.cin * g.kh * g.kw;
    let mut cols = vec![T::zero(); g.n * k * l];
    for n in 0..g.n {
        for ci in 0..g.cin {
            let row0 = (n * g.cin + ci) * g.h;
            for ky in 0..g.kh {
                for kx in 0..g.kw {
                    let (lo, hi) = g.valid_cols(kx);
                    if lo >= hi {
                        continue;
                    }
                    let base = lo * g.stride + kx - g.pad;
                    let r = (n * k + (ci * g.kh + ky) * g.kw + kx) * l;
                    for oy in 0..g.oh {
                        let Some(iy) = g.in_row(oy, ky) else { continue };
                        cols[r + oy * g.ow + lo..r + oy * g.ow + hi].copy_from_slice(xs.run(row0 + iy, base, hi - lo));
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatter-adds patch rows back onto the input grid.
fn col2im<T: Float>(g: &Geom, cols: &[T]) -> Vec<T> {
    let pw = g.w.div_ceil(g.stride);
    let rows = g.n * g.cin * g.h;
    let l = g.oh * g.ow;
    let k = g.cin * g.kh * g.kw;
    let mut gs = vec![T::zero(); rows * g.stride * pw];
    for n in 0..g.n {
        for ci in 0..g.cin {
            let row0 = (n * g.cin + ci) * g.h;
            for ky in 0..g.kh {
                for kx in 0..g.kw {
                    let (lo, hi) = g.valid_cols(kx);
                    if lo >= hi {
                        continue;
                    }
                    let base = lo * g.stride + kx - g.pad;
                    let r = (n * k + (ci * g.kh + ky) * g.kw + kx) * l;
                    for oy in 0..g.oh {
                        let Some(iy) = g.in_row(oy, ky) else { continue };
                        let at = ((row0 + iy) * g.stride + base % g.stride) * pw + base / g.stride;
                        axpy(&mut gs[at..at + hi - lo], T::one(), &cols[r + oy * g.ow + lo..r + oy * g.ow + hi]);
                    }
                }
            }
        }
    }
    if g.stride == 1 {
        return gs;
    }
    let mut out = vec![T::zero(); rows * g.w];
    for r in 0..rows {
        for (i, v) in out[r * g.w..][..g.w].iter_mut().enumerate() {
            *v = gs[(r * g.stride + i % g.stride) * pw + i / g.stride];
        }
    }
    out
}

macro_rules! dispatch1 {
    ($s:expr, $l:expr, $f:expr) => {
        match $s {
            CpuStorage::F32(_) => CpuStorage::F32($f(slice::<f32>($s, $l)?)),
            CpuStorage::F64(_) => CpuStorage::F64($f(slice::<f64>($s, $l)?)),
            _ => candle_core::bail!("conv2d custom op supports f32 or f64 inputs only"),
        }
    };
}

struct Im2Col {
    cout: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
}

struct Col2Im {
    g: Geom,
}

impl CustomOp1 for Im2Col {
    fn name(&self) -> &'static str {
        "im2col"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> Result<(CpuStorage, Shape)> {
        let (n, cin, h, w) = l.shape().dims4()?;
        let g = Geom::new((n, cin, h, w), (self.cout, cin, self.kh, self.kw), self.stride, self.pad)?;
        let out = dispatch1!(s, l, |x| im2col(&g, x));
        Ok((out, Shape::from((n, cin * self.kh * self.kw, g.oh * g.ow))))
    }

    fn bwd(&self, x: &Tensor, _res: &Tensor, grad: &Tensor) -> Result<Option<Tensor>> {
        let g = Geom::new(x.dims4()?, (self.cout, x.dim(1)?, self.kh, self.kw), self.stride, self.pad)?;
        Ok(Some(grad.contiguous()?.apply_op1_no_bwd(&Col2Im { g })?))
    }
}

impl CustomOp1 for Col2Im {
    fn name(&self) -> &'static str {
        "col2im"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> Result<(CpuStorage, Shape)> {
        let g = self.g;
        if l.shape().dims() != [g.n, g.cin * g.kh * g.kw, g.oh * g.ow] {
            candle_core::bail!("col2im: patch matrix shape does not match geometry");
        }
        let out = dispatch1!(s, l, |c| col2im(&g, c));
        Ok((out, Shape::from((g.n, g.cin, g.h, g.w))))
    }
}

macro_rules! dispatch {
    ($s1:expr, $l1:expr, $s2:expr, $l2:expr, $f:expr) => {
        match ($s1, $s2) {
            (CpuStorage::F32(_), CpuStorage::F32(_)) => {
                CpuStorage::F32($f(slice::<f32>($s1, $l1)?, slice::<f32>($s2, $l2)?))
            }
            (CpuStorage::F64(_), CpuStorage::F64(_)) => {
                CpuStorage::F64($f(slice::<f64>($s1, $l1)?, slice::<f64>($s2, $l2)?))
            }
            _ => candle_core::bail!("conv2d custom op supports matching f32 or f64 inputs only"),
        }
    };
}

struct Conv2dFwd {
    stride: usize,
    pad: usize,
}

struct Conv2dInputGrad {
    stride: usize,
    pad: usize,
    h: usize,
    w: usize,
}

struct Conv2dWeightGrad {
    stride: usize,
    pad: usize,
    kh: usize,
    kw: usize,
}

impl CustomOp2 for Conv2dFwd {
    fn name(&self) -> &'static str {
        "direct-conv2d"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> Result<(CpuStorage, Shape)> {
        let g = Geom::new(l1.shape().dims4()?, l2.shape().dims4()?, self.stride, self.pad)?;
        let out = dispatch!(s1, l1, s2, l2, |x, w| forward(&g, x, w));
        Ok((out, Shape::from((g.n, g.cout, g.oh, g.ow))))
    }

    fn bwd(&self, x: &Tensor, w: &Tensor, _res: &Tensor, grad: &Tensor) -> Result<(Option<Tensor>, Option<Tensor>)> {
        let (_, _, h, wd) = x.dims4()?;
        let (_, _, kh, kw) = w.dims4()?;
        let grad = grad.contiguous()?;
        let gx = grad.apply_op2_no_bwd(w, &Conv2dInputGrad { stride: self.stride, pad: self.pad, h, w: wd })?;
        let gw = grad.apply_op2_no_bwd(x, &Conv2dWeightGrad { stride: self.stride, pad: self.pad, kh, kw })?;
        Ok((Some(gx), Some(gw)))
    }
}

impl CustomOp2 for Conv2dInputGrad {
    fn name(&self) -> &'static str {
        "direct-conv2d-input-grad"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> Result<(CpuStorage, Shape)> {
        let (n, cout, oh, ow) = l1.shape().dims4()?;
        let (wcout, cin, kh, kw) = l2.shape().dims4()?;
        let g = Geom::new((n, cin, self.h, self.w), (wcout, cin, kh, kw), self.stride, self.pad)?;
        if (g.cout, g.oh, g.ow) != (cout, oh, ow) {
            candle_core::bail!("conv2d input grad: gradient shape does not match geometry");
        }
        let out = dispatch!(s1, l1, s2, l2, |go, w| input_grad(&g, go, w));
        Ok((out, Shape::from((n, cin, self.h, self.w))))
    }
}

impl CustomOp2 for Conv2dWeightGrad {
    fn name(&self) -> &'static str {
        "direct-conv2d-weight-grad"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> Result<(CpuStorage, Shape)> {
        let (n, cout, oh, ow) = l1.shape().dims4()?;
        let (_, cin, h, w) = l2.shape().dims4()?;
        let g = Geom::new((n, cin, h, w), (cout, cin, self.kh, self.kw), self.stride, self.pad)?;
        if (g.oh, g.ow) != (oh, ow) {
            candle_core::bail!("conv2d weight grad: gradient shape does not match geometry");
        }
        let out = dispatch!(s1, l1, s2, l2, |go, x| weight_grad(&g, go, x));
        Ok((out, Shape::from((cout, cin, self.kh, self.kw))))
    }
}

/// Output planes at least this large go through the direct kernel, smaller
/// ones through the matrix product (measured crossover on narrow layers).
const DIRECT_MIN_OUTPUT: usize = 4096;

/// `x: (N, Cin, H, W)`, `w: (Cout, Cin, KH, KW)`; zero padding on all sides.
pub fn conv2d(x: &Tensor, w: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
    if stride == 0 {
        candle_core::bail!("conv2d: stride must be positive");
    }
    let g = Geom::new(x.dims4()?, w.dims4()?, stride, pad)?;
    if g.oh * g.ow >= DIRECT_MIN_OUTPUT {
        conv2d_direct(x, w, stride, pad)
    } else {
        conv2d_gemm(x, w, stride, pad)
    }
}

/// Convolution as patch extraction followed by a batched matrix product.
pub fn conv2d_gemm(x: &Tensor, w: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
    if stride == 0 {
        candle_core::bail!("conv2d: stride must be positive");
    }
    let (n, cin, h, wd) = x.dims4()?;
    let (cout, wcin, kh, kw) = w.dims4()?;
    let g = Geom::new((n, cin, h, wd), (cout, wcin, kh, kw), stride, pad)?;
    let cols = x.contiguous()?.apply_op1(Im2Col { cout, kh, kw, stride, pad })?;
    let y = w.reshape((cout, cin * kh * kw))?.broadcast_matmul(&cols)?;
    y.reshape((n, cout, g.oh, g.ow))
}

/// Direct loop over kernel taps with contiguous row updates.
pub fn conv2d_direct(x: &Tensor, w: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
    if stride == 0 {
        candle_core::bail!("conv2d: stride must be positive");
    }
    x.contiguous()?.apply_op2(&w.contiguous()?, Conv2dFwd { stride, pad })
}
