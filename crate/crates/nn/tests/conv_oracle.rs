//! Both convolution paths against candle's own conv2d, forward and backward.

use candle_core::{DType, Device, Tensor, Var};
use candle_core::Result;
use forge_nn::conv::{conv2d, conv2d_direct, conv2d_gemm};

type ConvFn = fn(&Tensor, &Tensor, usize, usize) -> Result<Tensor>;
const IMPLS: [(&str, ConvFn); 3] = [("dispatch", conv2d), ("gemm", conv2d_gemm), ("direct", conv2d_direct)];

fn seeded(shape: &[usize], seed: u64, dtype: DType) -> Tensor {
    // small LCG so the test needs no RNG crate
    let n: usize = shape.iter().product();
    let mut s = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
    let v: Vec<f64> = (0..n)
        .map(|_| {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        })
        .collect();
    Tensor::from_vec(v, shape, &Device::Cpu).unwrap().to_dtype(dtype).unwrap()
}

fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
    (a - b).unwrap().abs().unwrap().flatten_all().unwrap().max(0).unwrap().to_dtype(DType::F64).unwrap().to_scalar::<f64>().unwrap()
}

#[test]
fn matches_builtin_forward_and_gradients() {
    let cases = [
        // (n, cin, h, w, cout, k, stride, pad)
        (2, 3, 9, 11, 4, 3, 1, 1),
        (1, 2, 10, 8, 3, 3, 2, 1),
        (3, 4, 7, 7, 2, 1, 1, 0),
        (1, 1, 11, 9, 2, 5, 2, 2),
        (2, 2, 6, 6, 3, 3, 1, 0),
    ];
    for ((name, conv2d), (i, &(n, cin, h, w, cout, k, stride, pad))) in
        IMPLS.iter().flat_map(|im| cases.iter().enumerate().map(move |c| (im, c)))
    {
        let x = Var::from_tensor(&seeded(&[n, cin, h, w], i as u64, DType::F64)).unwrap();
        let wt = Var::from_tensor(&seeded(&[cout, cin, k, k], 100 + i as u64, DType::F64)).unwrap();
        let probe = seeded(&[n, cout, (h + 2 * pad - k) / stride + 1, (w + 2 * pad - k) / stride + 1], 200 + i as u64, DType::F64);

        let ours = conv2d(x.as_tensor(), wt.as_tensor(), stride, pad).unwrap();
        let reference = x.as_tensor().conv2d(wt.as_tensor(), pad, stride, 1, 1).unwrap();
        assert_eq!(ours.dims(), reference.dims());
        assert!(max_abs_diff(&ours, &reference) < 1e-12, "{name} case {i} forward");

        let g1 = (ours * &probe).unwrap().sum_all().unwrap().backward().unwrap();
        let g2 = (reference * &probe).unwrap().sum_all().unwrap().backward().unwrap();
        for v in [&x, &wt] {
            let a = g1.get(v.as_tensor()).unwrap();
            let b = g2.get(v.as_tensor()).unwrap();
            assert!(max_abs_diff(a, b) < 1e-11, "{name} case {i} gradient");
        }
    }
}

/// Geometry where the stride leaves unused trailing input rows/columns;
/// checked against central differences instead of the built-in backward.
#[test]
fn gradients_match_finite_differences_with_ragged_stride() {
    for (name, conv2d) in IMPLS {
        ragged_case(name, conv2d);
    }
}

fn ragged_case(name: &str, conv2d: ConvFn) {
    let (n, cin, h, w, cout, k, stride, pad) = (1, 2, 12, 9, 2, 5, 2, 2);
    let x = Var::from_tensor(&seeded(&[n, cin, h, w], 31, DType::F64)).unwrap();
    let wt = Var::from_tensor(&seeded(&[cout, cin, k, k], 32, DType::F64)).unwrap();
    let out = conv2d(x.as_tensor(), wt.as_tensor(), stride, pad).unwrap();
    let probe = seeded(out.dims(), 33, DType::F64);
    let loss = |xv: &Tensor, wv: &Tensor| -> f64 {
        (conv2d(xv, wv, stride, pad).unwrap() * &probe).unwrap().sum_all().unwrap().to_scalar::<f64>().unwrap()
    };
    let grads = (out * &probe).unwrap().sum_all().unwrap().backward().unwrap();
    let gx: Vec<f64> = grads.get(x.as_tensor()).unwrap().flatten_all().unwrap().to_vec1().unwrap();
    let gw: Vec<f64> = grads.get(wt.as_tensor()).unwrap().flatten_all().unwrap().to_vec1().unwrap();
    let xs: Vec<f64> = x.as_tensor().flatten_all().unwrap().to_vec1().unwrap();
    let ws: Vec<f64> = wt.as_tensor().flatten_all().unwrap().to_vec1().unwrap();
    let eps = 1e-6;
    for idx in (0..xs.len()).step_by(7) {
        let (mut p, mut m) = (xs.clone(), xs.clone());
        p[idx] += eps;
        m[idx] -= eps;
        let tp = Tensor::from_vec(p, (n, cin, h, w), &Device::Cpu).unwrap();
        let tm = Tensor::from_vec(m, (n, cin, h, w), &Device::Cpu).unwrap();
        let fd = (loss(&tp, wt.as_tensor()) - loss(&tm, wt.as_tensor())) / (2.0 * eps);
        assert!((fd - gx[idx]).abs() < 1e-6, "{name} input {idx}: {fd} vs {}", gx[idx]);
    }
    for idx in 0..ws.len() {
        let (mut p, mut m) = (ws.clone(), ws.clone());
        p[idx] += eps;
        m[idx] -= eps;
        let tp = Tensor::from_vec(p, (cout, cin, k, k), &Device::Cpu).unwrap();
        let tm = Tensor::from_vec(m, (cout, cin, k, k), &Device::Cpu).unwrap();
        let fd = (loss(x.as_tensor(), &tp) - loss(x.as_tensor(), &tm)) / (2.0 * eps);
        assert!((fd - gw[idx]).abs() < 1e-6, "{name} weight {idx}: {fd} vs {}", gw[idx]);
    }
}

#[test]
fn f32_agrees_with_f64() {
    let x = seeded(&[2, 3, 16, 16], 7, DType::F64);
    let w = seeded(&[5, 3, 3, 3], 8, DType::F64);
    for (_, conv2d) in IMPLS {
        let a = conv2d(&x, &w, 2, 1).unwrap();
        let b = conv2d(&x.to_dtype(DType::F32).unwrap(), &w.to_dtype(DType::F32).unwrap(), 2, 1).unwrap();
        assert!(max_abs_diff(&a, &b.to_dtype(DType::F64).unwrap()) < 1e-5);
    }
}

#[test]
fn channel_mismatch_is_an_error() {
    let x = seeded(&[1, 3, 8, 8], 1, DType::F32);
    let w = seeded(&[2, 4, 3, 3], 2, DType::F32);
    for (_, conv2d) in IMPLS {
        assert!(conv2d(&x, &w, 1, 1).is_err());
    }
}
