//! Dense tensor arithmetic, f32 and affine-quantized i8.
//!
//! Operations use fixed accumulation orders so results are bit-reproducible
//! across runs and across the parallel/sequential execution paths. None of
//! the ops trap on non-finite values: weights that have been bit-flipped may
//! legitimately hold ±Inf or NaN and must flow through forward passes.

use crate::error::{Error, Result};
use crate::parallel;

/// Element type of a tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    F32,
    I8,
}

/// Per-tensor affine quantization parameters.
///
/// Dequantization is anchored at the tensor minimum: the minimum quantizes
/// to `zero_point` (always -128), and a stored level `q` dequantizes to
/// `min_val + scale * (q - zero_point)`. Anchoring at the minimum makes the
/// zero-range (constant tensor) case round-trip exactly and keeps the
/// round-trip error of every in-range element at or below `scale / 2`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuantParams {
    /// Step between adjacent levels; `(max - min) / 255`, floored at 1e-12.
    pub scale: f32,
    /// Quantized level of `min_val`; -128 for tensors produced by [`quantize`].
    pub zero_point: i32,
    /// Real value of the lowest level.
    pub min_val: f32,
}

impl QuantParams {
    pub fn dequantize_level(&self, q: i8) -> f32 {
        let steps = (q as i64 - self.zero_point as i64) as f64;
        (self.min_val as f64 + self.scale as f64 * steps) as f32
    }
}

/// Flat buffer of a tensor, tagged by element type.
#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    I8(Vec<i8>),
}

/// Shape-typed dense array, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: TensorData,
    quant: Option<QuantParams>,
}

impl Tensor {
    /// Construct an f32 tensor from user input. All elements must be finite;
    /// non-finite values only ever enter a tensor through bit flips.
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        Self::check_shape(&shape, data.len())?;
        if let Some(bad) = data.iter().find(|v| !v.is_finite()) {
            return Err(Error::Domain(format!(
                "non-finite element {bad} in tensor constructed from input"
            )));
        }
        Ok(Self { shape, data: TensorData::F32(data), quant: None })
    }

    /// Construct an f32 tensor without the finiteness check. Used for
    /// post-flip states and deserialization, where ±Inf/NaN are legal.
    pub fn from_raw_f32(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        Self::check_shape(&shape, data.len())?;
        Ok(Self { shape, data: TensorData::F32(data), quant: None })
    }

    /// Construct an i8 tensor with its quantization parameters.
    pub fn from_i8(shape: Vec<usize>, data: Vec<i8>, quant: QuantParams) -> Result<Self> {
        Self::check_shape(&shape, data.len())?;
        if quant.scale <= 0.0 {
            return Err(Error::Domain(format!("scale must be positive, got {}", quant.scale)));
        }
        Ok(Self { shape, data: TensorData::I8(data), quant: Some(quant) })
    }

    fn check_shape(shape: &[usize], len: usize) -> Result<()> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::Dimension(format!("zero-sized dimension in {shape:?}")));
        }
        let n: usize = shape.iter().product();
        if n != len {
            return Err(Error::Dimension(format!(
                "shape {shape:?} (={n}) does not match buffer length {len}"
            )));
        }
        Ok(())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn dtype(&self) -> DType {
        match self.data {
            TensorData::F32(_) => DType::F32,
            TensorData::I8(_) => DType::I8,
        }
    }

    pub fn len(&self) -> usize {
        match &self.data {
            TensorData::F32(v) => v.len(),
            TensorData::I8(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn quant(&self) -> Option<&QuantParams> {
        self.quant.as_ref()
    }

    pub fn as_f32(&self) -> Result<&[f32]> {
        match &self.data {
            TensorData::F32(v) => Ok(v),
            TensorData::I8(_) => Err(Error::Domain("expected f32 tensor, got i8".into())),
        }
    }

    pub fn as_f32_mut(&mut self) -> Result<&mut [f32]> {
        match &mut self.data {
            TensorData::F32(v) => Ok(v),
            TensorData::I8(_) => Err(Error::Domain("expected f32 tensor, got i8".into())),
        }
    }

    pub fn as_i8(&self) -> Result<&[i8]> {
        match &self.data {
            TensorData::I8(v) => Ok(v),
            TensorData::F32(_) => Err(Error::Domain("expected i8 tensor, got f32".into())),
        }
    }

    pub fn as_i8_mut(&mut self) -> Result<&mut [i8]> {
        match &mut self.data {
            TensorData::I8(v) => Ok(v),
            TensorData::F32(_) => Err(Error::Domain("expected i8 tensor, got f32".into())),
        }
    }

    /// Raw little-endian byte image of the element buffer.
    pub fn to_le_bytes(&self) -> Vec<u8> {
        match &self.data {
            TensorData::F32(v) => v.iter().flat_map(|x| x.to_bits().to_le_bytes()).collect(),
            TensorData::I8(v) => v.iter().map(|&x| x as u8).collect(),
        }
    }

    /// Size of one element in bytes.
    pub fn elem_size(&self) -> usize {
        match self.dtype() {
            DType::F32 => 4,
            DType::I8 => 1,
        }
    }

    fn last_dim(&self) -> usize {
        *self.shape.last().expect("tensors have at least one dimension")
    }
}

/// Minimum m*k*n before matmul rows fan out to worker threads.
const MATMUL_PAR_THRESHOLD: usize = 1 << 16;

pub(crate) fn matmul_raw(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; m * n];
    let fill = |i: usize, row: &mut [f32]| {
        for j in 0..n {
            // Fixed left-to-right accumulation over k.
            let mut acc = 0.0f32;
            for l in 0..k {
                acc += a[i * k + l] * b[l * n + j];
            }
            row[j] = acc;
        }
    };
    if m * k * n >= MATMUL_PAR_THRESHOLD {
        parallel::fill_rows(&mut out, n, fill);
    } else {
        for i in 0..m {
            let row = &mut out[i * n..(i + 1) * n];
            fill(i, row);
        }
    }
    out
}

/// Dense product of `a` (m×k) and `b` (k×n).
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (av, bv) = (a.as_f32()?, b.as_f32()?);
    if a.shape().len() != 2 || b.shape().len() != 2 {
        return Err(Error::Dimension(format!(
            "matmul expects rank-2 tensors, got {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let (k2, n) = (b.shape()[0], b.shape()[1]);
    if k != k2 {
        return Err(Error::Dimension(format!(
            "inner dimensions disagree: {m}x{k} . {k2}x{n}"
        )));
    }
    Tensor::from_raw_f32(vec![m, n], matmul_raw(av, bv, m, k, n))
}

pub(crate) fn softmax_row(row: &mut [f32]) {
    // Max-subtraction for stability; NaN inputs yield an all-NaN row
    // because the NaN term poisons the sum.
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut sum = 0.0f32;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Softmax over the last axis.
pub fn softmax(x: &Tensor) -> Result<Tensor> {
    let n = x.last_dim();
    let mut data = x.as_f32()?.to_vec();
    for row in data.chunks_mut(n) {
        softmax_row(row);
    }
    Tensor::from_raw_f32(x.shape().to_vec(), data)
}

pub(crate) fn layer_norm_row(row: &mut [f32], gamma: &[f32], beta: &[f32], eps: f32) {
    let n = row.len() as f32;
    let mean = row.iter().sum::<f32>() / n;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / n;
    let inv = 1.0 / (var + eps).sqrt();
    for (v, (&g, &b)) in row.iter_mut().zip(gamma.iter().zip(beta)) {
        *v = (*v - mean) * inv * g + b;
    }
}

/// Per-row normalization over the last axis, then affine `gamma * x + beta`.
pub fn layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f32) -> Result<Tensor> {
    let n = x.last_dim();
    let (g, b) = (gamma.as_f32()?, beta.as_f32()?);
    if g.len() != n || b.len() != n {
        return Err(Error::Dimension(format!(
            "gamma/beta lengths {}/{} do not match last dim {n}",
            g.len(),
            b.len()
        )));
    }
    let mut data = x.as_f32()?.to_vec();
    for row in data.chunks_mut(n) {
        layer_norm_row(row, g, b, eps);
    }
    Tensor::from_raw_f32(x.shape().to_vec(), data)
}

/// Floor applied to the quantization scale for zero-range tensors.
pub const SCALE_FLOOR: f32 = 1e-12;

pub(crate) fn quant_params_for(data: &[f32]) -> QuantParams {
    let mut min = f32::INFINITY;
    let mut max = f32::NEG_INFINITY;
    for &v in data {
        min = min.min(v);
        max = max.max(v);
    }
    let scale = ((max - min) / 255.0).max(SCALE_FLOOR);
    QuantParams { scale, zero_point: -128, min_val: min }
}

pub(crate) fn quantize_value(x: f32, q: &QuantParams) -> i8 {
    // f64 intermediates keep the rounding error within scale/2.
    let steps = ((x as f64 - q.min_val as f64) / q.scale as f64).round();
    let level = q.zero_point as f64 + steps;
    level.clamp(-128.0, 127.0) as i8
}

/// Per-tensor affine quantization of an f32 tensor to i8.
pub fn quantize(t: &Tensor) -> Result<Tensor> {
    let data = t.as_f32()?;
    if data.is_empty() {
        return Err(Error::Domain("cannot quantize an empty tensor".into()));
    }
    let params = quant_params_for(data);
    let q: Vec<i8> = data.iter().map(|&x| quantize_value(x, &params)).collect();
    Tensor::from_i8(t.shape().to_vec(), q, params)
}

/// Reconstruct an f32 tensor from a quantized one.
pub fn dequantize(t: &Tensor) -> Result<Tensor> {
    let data = t.as_i8()?;
    let params = *t
        .quant()
        .ok_or_else(|| Error::Domain("i8 tensor without quant params".into()))?;
    let out: Vec<f32> = data.iter().map(|&q| params.dequantize_level(q)).collect();
    Tensor::from_raw_f32(t.shape().to_vec(), out)
}


#[cfg(test)]
mod props {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(128))]

        #[test]
        fn softmax_rows_sum_to_one(xs in prop::collection::vec(-50.0f32..50.0, 1..32)) {
            let n = xs.len();
            let t = Tensor::new(vec![n], xs).unwrap();
            let y = softmax(&t).unwrap();
            let sum: f32 = y.as_f32().unwrap().iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-6);
        }

        #[test]
        fn quantize_roundtrip_within_half_scale(
            xs in prop::collection::vec(-100.0f32..100.0, 1..48)
        ) {
            let n = xs.len();
            let t = Tensor::new(vec![n], xs.clone()).unwrap();
            let q = quantize(&t).unwrap();
            let scale = q.quant().unwrap().scale;
            let back = dequantize(&q).unwrap();
            for (a, b) in xs.iter().zip(back.as_f32().unwrap()) {
                prop_assert!((a - b).abs() <= scale * 0.5 * (1.0 + 1e-4));
            }
        }

        #[test]
        fn matmul_oracle_agreement_up_to_8x8(
            m in 1usize..=8, k in 1usize..=8, n in 1usize..=8, seed in any::<u64>()
        ) {
            use rand::prelude::*;
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let a: Vec<f32> = (0..m * k).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let b: Vec<f32> = (0..k * n).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let ta = Tensor::new(vec![m, k], a.clone()).unwrap();
            let tb = Tensor::new(vec![k, n], b.clone()).unwrap();
            let got = matmul(&ta, &tb).unwrap();
            let mut want = vec![0.0f32; m * n];
            for i in 0..m {
                for j in 0..n {
                    for l in 0..k {
                        want[i * n + j] += a[i * k + l] * b[l * n + j];
                    }
                }
            }
            for (g, w) in got.as_f32().unwrap().iter().zip(&want) {
                prop_assert!((g - w).abs() < 1e-6);
            }
        }
    }
}
