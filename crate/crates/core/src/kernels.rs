//! Layer kernels: convolution, max-pool, ReLU, flatten, dense and softmax.
//!
//! Convolution, pooling and dense layers come in two flavours selected by
//! [`KernelMode`]. `Reference` is the plain nested loop; `Fast` lowers
//! convolution to im2col plus a cache-blocked matrix multiply. Both modes
//! accumulate each output in the same term order, so they normally agree
//! bit-for-bit; the contract is agreement within `1e-5` relative error.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KernelMode {
    Reference,
    #[default]
    Fast,
}

impl std::str::FromStr for KernelMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "reference" => Ok(Self::Reference),
            "fast" => Ok(Self::Fast),
            other => Err(format!("unknown mode {other:?} (expected reference|fast)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    Same,
    Valid,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum KernelError {
    #[error("{op}: expected rank {expected} input, got dims {dims:?}")]
    Rank {
        op: &'static str,
        expected: usize,
        dims: Vec<usize>,
    },
    #[error("conv2d: input has {input} channels but kernel expects {kernel}")]
    ChannelMismatch { input: usize, kernel: usize },
    #[error("conv2d: unsupported configuration: {0}")]
    UnsupportedConv(String),
    #[error("conv2d: bias length {bias} does not match {c_out} output channels")]
    BiasMismatch { bias: usize, c_out: usize },
    #[error("maxpool2d: input {height}x{width} smaller than window {window}")]
    InputTooSmall {
        height: usize,
        width: usize,
        window: usize,
    },
    #[error("maxpool2d: window and stride must be positive")]
    BadPool,
    #[error("dense: input length {input} does not match weight rows {rows}")]
    DenseMismatch { input: usize, rows: usize },
    #[error("dense: bias length {bias} does not match {n_out} outputs")]
    DenseBiasMismatch { bias: usize, n_out: usize },
    #[error("softmax: empty logits")]
    EmptyLogits,
    #[error("softmax: non-finite logit at index {0}")]
    NonFiniteLogit(usize),
}

/// Convolution parameters borrowed from a weight store.
///
/// `kernels` has dims `(kh, kw, c_in, c_out)` and `bias` has dims `(c_out)`.
#[derive(Debug, Clone, Copy)]
pub struct ConvParams<'a> {
    pub kernels: &'a Tensor,
    pub bias: &'a Tensor,
    pub stride: usize,
    pub padding: Padding,
}

impl<'a> ConvParams<'a> {
    /// Stride 1, same padding.
    pub fn same(kernels: &'a Tensor, bias: &'a Tensor) -> Self {
        Self {
            kernels,
            bias,
            stride: 1,
            padding: Padding::Same,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PoolParams {
    pub window: usize,
    pub stride: usize,
}

impl Default for PoolParams {
    fn default() -> Self {
        Self {
            window: 2,
            stride: 2,
        }
    }
}

/// Dense parameters: `weights` is `(n_in, n_out)`, `bias` is `(n_out)`.
#[derive(Debug, Clone, Copy)]
pub struct DenseParams<'a> {
    pub weights: &'a Tensor,
    pub bias: &'a Tensor,
}

fn hwc(op: &'static str, t: &Tensor) -> Result<(usize, usize, usize), KernelError> {
    match *t.dims() {
        [h, w, c] => Ok((h, w, c)),
        _ => Err(KernelError::Rank {
            op,
            expected: 3,
            dims: t.dims().to_vec(),
        }),
    }
}

/// Validated conv geometry: `(kernel size, c_in, c_out)`.
fn conv_geometry(input_c: usize, p: &ConvParams<'_>) -> Result<(usize, usize, usize), KernelError> {
    let (k, kw, c_in, c_out) = match *p.kernels.dims() {
        [kh, kw, ci, co] => (kh, kw, ci, co),
        _ => {
            return Err(KernelError::UnsupportedConv(format!(
                "kernel dims {:?} are not (kh, kw, c_in, c_out)",
                p.kernels.dims()
            )))
        }
    };
    if p.stride != 1 || p.padding != Padding::Same {
        return Err(KernelError::UnsupportedConv(format!(
            "stride {} with {:?} padding (only stride 1, same padding)",
            p.stride, p.padding
        )));
    }
    if k != kw || k % 2 == 0 {
        return Err(KernelError::UnsupportedConv(format!(
            "kernel {k}x{kw} (only odd square kernels)"
        )));
    }
    if c_in != input_c {
        return Err(KernelError::ChannelMismatch {
            input: input_c,
            kernel: c_in,
        });
    }
    if p.bias.len() != c_out {
        return Err(KernelError::BiasMismatch {
            bias: p.bias.len(),
            c_out,
        });
    }
    Ok((k, c_in, c_out))
}

pub fn conv2d(input: &Tensor, params: &ConvParams<'_>, mode: KernelMode) -> Result<Tensor, KernelError> {
    let (h, w, c) = hwc("conv2d", input)?;
    let (k, c_in, c_out) = conv_geometry(c, params)?;
    let out = match mode {
        KernelMode::Reference => conv2d_direct(input.data(), h, w, c_in, params, k, c_out),
        KernelMode::Fast => conv2d_im2col(input.data(), h, w, c_in, params, k, c_out),
    };
    Ok(Tensor::from_raw_unchecked(vec![h, w, c_out], out))
}

fn conv2d_direct(
    x: &[f32],
    h: usize,
    w: usize,
    c_in: usize,
    p: &ConvParams<'_>,
    k: usize,
    c_out: usize,
) -> Vec<f32> {
    let kern = p.kernels.data();
    let bias = p.bias.data();
    let pad = (k / 2) as isize;
    let mut out = vec![0.0f32; h * w * c_out];
    for oh in 0..h {
        for ow in 0..w {
            for o in 0..c_out {
                let mut acc = 0.0f32;
                for dh in 0..k {
                    let ih = oh as isize + dh as isize - pad;
                    if ih < 0 || ih >= h as isize {
                        continue;
                    }
                    for dw in 0..k {
                        let iw = ow as isize + dw as isize - pad;
                        if iw < 0 || iw >= w as isize {
                            continue;
                        }
                        for i in 0..c_in {
                            let xv = x[(ih as usize * w + iw as usize) * c_in + i];
                            let kv = kern[((dh * k + dw) * c_in + i) * c_out + o];
                            acc += xv * kv;
                        }
                    }
                }
                out[(oh * w + ow) * c_out + o] = acc + bias[o];
            }
        }
    }
    out
}

/// Unroll every `k x k x c_in` patch into one row of a `(h*w, k*k*c_in)`
/// matrix, columns ordered `(dh, dw, i)` to match the kernel layout.
pub(crate) fn im2col(x: &[f32], h: usize, w: usize, c_in: usize, k: usize) -> Vec<f32> {
    let row_len = k * k * c_in;
    let pad = (k / 2) as isize;
    let mut cols = vec![0.0f32; h * w * row_len];
    for oh in 0..h {
        for ow in 0..w {
            let row = &mut cols[(oh * w + ow) * row_len..][..row_len];
            for dh in 0..k {
                let ih = oh as isize + dh as isize - pad;
                if ih < 0 || ih >= h as isize {
                    continue;
                }
                for dw in 0..k {
                    let iw = ow as isize + dw as isize - pad;
                    if iw < 0 || iw >= w as isize {
                        continue;
                    }
                    let src = (ih as usize * w + iw as usize) * c_in;
                    let dst = (dh * k + dw) * c_in;
                    row[dst..dst + c_in].copy_from_slice(&x[src..src + c_in]);
                }
            }
        }
    }
    cols
}

/// Bytes of im2col scratch the fast path allocates for one conv layer.
pub fn im2col_scratch_bytes(h: usize, w: usize, c_in: usize, k: usize) -> usize {
    h * w * k * k * c_in * std::mem::size_of::<f32>()
}

const K_BLOCK: usize = 256;
const M_BLOCK: usize = 64;

/// `c += a * b` with `a: (m, k)`, `b: (k, n)`, `c: (m, n)`, all row-major.
///
/// Blocks over `k` so a `K_BLOCK x n` panel of `b` stays cache resident.
/// Every element of `c` still receives its `k` terms in ascending order.
pub(crate) fn gemm_acc(a: &[f32], b: &[f32], c: &mut [f32], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for k0 in (0..k).step_by(K_BLOCK) {
        let k1 = (k0 + K_BLOCK).min(k);
        for m0 in (0..m).step_by(M_BLOCK) {
            let m1 = (m0 + M_BLOCK).min(m);
            for i in m0..m1 {
                let arow = &a[i * k..(i + 1) * k];
                let crow = &mut c[i * n..(i + 1) * n];
                for kk in k0..k1 {
                    let av = arow[kk];
                    let brow = &b[kk * n..(kk + 1) * n];
                    for (cv, &bv) in crow.iter_mut().zip(brow) {
                        *cv += av * bv;
                    }
                }
            }
        }
    }
}

fn conv2d_im2col(
    x: &[f32],
    h: usize,
    w: usize,
    c_in: usize,
    p: &ConvParams<'_>,
    k: usize,
    c_out: usize,
) -> Vec<f32> {
    let cols = im2col(x, h, w, c_in, k);
    let mut out = vec![0.0f32; h * w * c_out];
    gemm_acc(&cols, p.kernels.data(), &mut out, h * w, k * k * c_in, c_out);
    let bias = p.bias.data();
    for row in out.chunks_exact_mut(c_out) {
        for (v, &b) in row.iter_mut().zip(bias) {
            *v += b;
        }
    }
    out
}

pub fn pool_output_dims(h: usize, w: usize, p: &PoolParams) -> Option<(usize, usize)> {
    if p.window == 0 || p.stride == 0 || h < p.window || w < p.window {
        return None;
    }
    Some(((h - p.window) / p.stride + 1, (w - p.window) / p.stride + 1))
}

/// Max-pool with floor semantics: trailing rows/columns that do not fill a
/// window are dropped.
pub fn maxpool2d(input: &Tensor, params: &PoolParams, mode: KernelMode) -> Result<Tensor, KernelError> {
    let (h, w, c) = hwc("maxpool2d", input)?;
    if params.window == 0 || params.stride == 0 {
        return Err(KernelError::BadPool);
    }
    let (oh, ow) = pool_output_dims(h, w, params).ok_or(KernelError::InputTooSmall {
        height: h,
        width: w,
        window: params.window,
    })?;
    let x = input.data();
    let out = match mode {
        KernelMode::Reference => maxpool_direct(x, w, c, oh, ow, params),
        KernelMode::Fast if params.window == 2 && params.stride == 2 => maxpool_2x2_rows(x, w, c, oh, ow),
        KernelMode::Fast => maxpool_direct(x, w, c, oh, ow, params),
    };
    Ok(Tensor::from_raw_unchecked(vec![oh, ow, c], out))
}

fn maxpool_direct(x: &[f32], w: usize, c: usize, oh: usize, ow: usize, p: &PoolParams) -> Vec<f32> {
    let mut out = vec![0.0f32; oh * ow * c];
    for y in 0..oh {
        for xo in 0..ow {
            for ch in 0..c {
                let mut best = f32::NEG_INFINITY;
                for dy in 0..p.window {
                    for dx in 0..p.window {
                        let v = x[((y * p.stride + dy) * w + xo * p.stride + dx) * c + ch];
                        if v > best {
                            best = v;
                        }
                    }
                }
                out[(y * ow + xo) * c + ch] = best;
            }
        }
    }
    out
}

/// 2x2 stride-2 pooling over contiguous channel runs.
fn maxpool_2x2_rows(x: &[f32], w: usize, c: usize, oh: usize, ow: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; oh * ow * c];
    let row_stride = w * c;
    for y in 0..oh {
        let top = &x[2 * y * row_stride..][..row_stride];
        let bot = &x[(2 * y + 1) * row_stride..][..row_stride];
        for xo in 0..ow {
            let dst = &mut out[(y * ow + xo) * c..][..c];
            let a = &top[2 * xo * c..][..c];
            let b = &top[(2 * xo + 1) * c..][..c];
            let d = &bot[2 * xo * c..][..c];
            let e = &bot[(2 * xo + 1) * c..][..c];
            for i in 0..c {
                dst[i] = a[i].max(b[i]).max(d[i].max(e[i]));
            }
        }
    }
    out
}

pub fn relu(input: &Tensor) -> Tensor {
    let mut out = input.clone();
    relu_in_place(&mut out);
    out
}

pub fn relu_in_place(t: &mut Tensor) {
    for v in t.data_mut() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
}

pub fn flatten(input: &Tensor) -> Result<Tensor, KernelError> {
    hwc("flatten", input)?;
    Ok(Tensor::from_raw_unchecked(vec![input.len()], input.data().to_vec()))
}

pub fn dense(input: &Tensor, params: &DenseParams<'_>, mode: KernelMode) -> Result<Tensor, KernelError> {
    if input.rank() != 1 {
        return Err(KernelError::Rank {
            op: "dense",
            expected: 1,
            dims: input.dims().to_vec(),
        });
    }
    let (n_in, n_out) = match *params.weights.dims() {
        [r, c] => (r, c),
        _ => {
            return Err(KernelError::Rank {
                op: "dense weights",
                expected: 2,
                dims: params.weights.dims().to_vec(),
            })
        }
    };
    if input.len() != n_in {
        return Err(KernelError::DenseMismatch {
            input: input.len(),
            rows: n_in,
        });
    }
    if params.bias.len() != n_out {
        return Err(KernelError::DenseBiasMismatch {
            bias: params.bias.len(),
            n_out,
        });
    }
    let x = input.data();
    let wts = params.weights.data();
    let mut out = vec![0.0f32; n_out];
    match mode {
        KernelMode::Reference => {
            for (m, o) in out.iter_mut().enumerate() {
                let mut acc = 0.0f32;
                for (n, &xv) in x.iter().enumerate() {
                    acc += xv * wts[n * n_out + m];
                }
                *o = acc;
            }
        }
        KernelMode::Fast => gemm_acc(x, wts, &mut out, 1, n_in, n_out),
    }
    for (o, &b) in out.iter_mut().zip(params.bias.data()) {
        *o += b;
    }
    Ok(Tensor::from_raw_unchecked(vec![n_out], out))
}

/// Numerically stable softmax over a rank-1 logit vector.
pub fn softmax(logits: &Tensor) -> Result<Tensor, KernelError> {
    let l = logits.data();
    if l.is_empty() {
        return Err(KernelError::EmptyLogits);
    }
    if let Some(i) = l.iter().position(|v| !v.is_finite()) {
        return Err(KernelError::NonFiniteLogit(i));
    }
    let max = l.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
    let exps: Vec<f64> = l.iter().map(|&v| (v as f64 - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    let out = exps.iter().map(|e| (e / sum) as f32).collect();
    Ok(Tensor::from_raw_unchecked(vec![l.len()], out))
}
