//! Dense row-major `f64` tensors and the forward kernels built on them.
//!
//! Every reduction walks its axis in ascending index order, so results are
//! bit-stable for fixed inputs on one platform.

use rand::Rng;

use crate::error::{Result, SftError};

/// Default layer-norm epsilon.
pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(SftError::Contract(format!(
                "tensor extents must be positive, got {shape:?}"
            )));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(SftError::Dimension {
                op: "Tensor::new",
                lhs: shape,
                rhs: vec![data.len()],
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        assert!(
            !shape.is_empty() && shape.iter().all(|&e| e > 0),
            "tensor extents must be positive, got {shape:?}"
        );
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn from_vec(data: Vec<f64>) -> Self {
        let n = data.len();
        Tensor {
            shape: vec![n],
            data,
        }
    }

    /// Builds a matrix from equal-length rows.
    pub fn matrix(rows: &[&[f64]]) -> Result<Self> {
        let m = rows.len();
        let n = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != n) {
            return Err(SftError::Contract("ragged matrix rows".into()));
        }
        Self::new(vec![m, n], rows.concat())
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    /// Samples every element uniformly from `[-bound, bound)`.
    pub fn uniform<R: Rng + ?Sized>(shape: &[usize], bound: f64, rng: &mut R) -> Self {
        let mut t = Self::zeros(shape);
        if bound > 0.0 {
            for x in &mut t.data {
                *x = rng.gen_range(-bound..bound);
            }
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        if shape.iter().product::<usize>() != self.numel() || shape.contains(&0) {
            return Err(SftError::dim("reshape", &self.shape, shape));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    /// `(rows, cols)` of a rank-2 tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape[..] {
            [m, n] => Ok((m, n)),
            _ => Err(SftError::Contract(format!(
                "expected a matrix, got shape {:?}",
                self.shape
            ))),
        }
    }

    /// `(channels, rows, cols)` of a rank-3 feature map.
    pub fn dims3(&self) -> Result<(usize, usize, usize)> {
        match self.shape[..] {
            [c, h, w] => Ok((c, h, w)),
            _ => Err(SftError::Contract(format!(
                "expected a feature map, got shape {:?}",
                self.shape
            ))),
        }
    }

    pub fn get(&self, idx: &[usize]) -> f64 {
        assert_eq!(idx.len(), self.shape.len(), "index rank mismatch");
        let mut flat = 0;
        for (&i, &e) in idx.iter().zip(&self.shape) {
            assert!(i < e, "index {idx:?} out of bounds for {:?}", self.shape);
            flat = flat * e + i;
        }
        self.data[flat]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let n = *self.shape.last().unwrap();
        &self.data[i * n..(i + 1) * n]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    fn zip_with(&self, other: &Tensor, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(SftError::dim(op, &self.shape, &other.shape));
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, "mul", |a, b| a * b)
    }

    pub fn scale(&self, c: f64) -> Tensor {
        self.map(|x| x * c)
    }

    pub(crate) fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f64> {
        if self.shape != other.shape {
            return Err(SftError::dim("max_abs_diff", &self.shape, &other.shape));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }

    /// Matrix product. Each output element accumulates over the inner
    /// index in ascending order.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = self.dims2()?;
        let (k2, n) = other.dims2()?;
        if k != k2 {
            return Err(SftError::dim("matmul", &self.shape, &other.shape));
        }
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let out_row = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let a = self.data[i * k + p];
                let b_row = &other.data[p * n..(p + 1) * n];
                for (o, &b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Tensor::new(vec![m, n], out)
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let (m, n) = self.dims2()?;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Tensor::new(vec![n, m], out)
    }

    /// Adds `bias` to every row of a matrix.
    pub fn add_row(&self, bias: &Tensor) -> Result<Tensor> {
        let (_, n) = self.dims2()?;
        if bias.shape != [n] {
            return Err(SftError::dim("add_row", &self.shape, &bias.shape));
        }
        let mut out = self.clone();
        for row in out.data.chunks_mut(n) {
            for (x, b) in row.iter_mut().zip(&bias.data) {
                *x += b;
            }
        }
        Ok(out)
    }

    /// Softmax over the trailing axis with max subtraction.
    pub fn softmax_last(&self) -> Tensor {
        let n = *self.shape.last().unwrap();
        let mut out = self.clone();
        for row in out.data.chunks_mut(n) {
            softmax_in_place(row);
        }
        out
    }

    /// Normalizes each trailing-axis slice to zero mean and unit (population)
    /// variance, then applies `gamma * x + beta`.
    pub fn layer_norm(&self, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
        let d = *self.shape.last().unwrap();
        if gamma.shape != [d] || beta.shape != [d] {
            return Err(SftError::dim("layer_norm", &self.shape, &gamma.shape));
        }
        if !(eps > 0.0) {
            return Err(SftError::Contract(format!("layer_norm eps must be > 0, got {eps}")));
        }
        let mut out = self.clone();
        for row in out.data.chunks_mut(d) {
            let (mean, inv_std) = moments(row, eps);
            for (j, x) in row.iter_mut().enumerate() {
                *x = gamma.data[j] * ((*x - mean) * inv_std) + beta.data[j];
            }
        }
        Ok(out)
    }

    /// Concatenates tensors along axis 0. Trailing extents must agree.
    pub fn concat0(parts: &[&Tensor]) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| SftError::Contract("concat of zero tensors".into()))?;
        let tail = &first.shape[1..];
        let mut lead = 0;
        let mut data = Vec::new();
        for p in parts {
            if &p.shape[1..] != tail {
                return Err(SftError::dim("concat0", &first.shape, &p.shape));
            }
            lead += p.shape[0];
            data.extend_from_slice(&p.data);
        }
        let mut shape = vec![lead];
        shape.extend_from_slice(tail);
        Tensor::new(shape, data)
    }

    /// Slice `[start, start + len)` along axis 0.
    pub fn narrow0(&self, start: usize, len: usize) -> Result<Tensor> {
        if start + len > self.shape[0] || len == 0 {
            return Err(SftError::Index(format!(
                "narrow0 [{start}, {}) outside extent {}",
                start + len,
                self.shape[0]
            )));
        }
        let stride: usize = self.shape[1..].iter().product();
        let mut shape = self.shape.clone();
        shape[0] = len;
        Tensor::new(shape, self.data[start * stride..(start + len) * stride].to_vec())
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        total += *x;
    }
    for x in row.iter_mut() {
        *x /= total;
    }
}

/// Mean and `1 / sqrt(var + eps)` of a slice.
pub(crate) fn moments(row: &[f64], eps: f64) -> (f64, f64) {
    let d = row.len() as f64;
    let mean = row.iter().sum::<f64>() / d;
    let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / d;
    (mean, 1.0 / (var + eps).sqrt())
}

/// Per-pixel linear map across channels of a `[C, H, W]` feature map.
pub fn pointwise_conv(f: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (c, h, w) = f.dims3()?;
    let (c_out, c_in) = weight.dims2()?;
    if c_in != c {
        return Err(SftError::dim("pointwise_conv", weight.shape(), f.shape()));
    }
    if bias.shape() != [c_out] {
        return Err(SftError::dim("pointwise_conv", weight.shape(), bias.shape()));
    }
    let flat = f.clone().reshape(&[c, h * w])?;
    let mut out = weight.matmul(&flat)?;
    let hw = h * w;
    for (o, row) in out.data.chunks_mut(hw).enumerate() {
        let b = bias.data[o];
        row.iter_mut().for_each(|x| *x += b);
    }
    out.reshape(&[c_out, h, w])
}

/// Geometry of a square-kernel 2-d convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub fn output_extent(&self, input: usize) -> Option<usize> {
        let padded = input + 2 * self.padding;
        if padded < self.kernel || self.stride == 0 {
            return None;
        }
        Some((padded - self.kernel) / self.stride + 1)
    }
}

/// 2-d cross-correlation of `x: [C_in, H, W]` with `weight: [C_out, C_in, k, k]`
/// and zero padding.
pub fn conv2d(x: &Tensor, weight: &Tensor, bias: &Tensor, geom: ConvGeometry) -> Result<Tensor> {
    let (c_in, h, w) = x.dims3()?;
    let ws = weight.shape();
    if ws.len() != 4 || ws[1] != c_in || ws[2] != geom.kernel || ws[3] != geom.kernel {
        return Err(SftError::dim("conv2d", ws, x.shape()));
    }
    let c_out = ws[0];
    if bias.shape() != [c_out] {
        return Err(SftError::dim("conv2d", ws, bias.shape()));
    }
    let (oh, ow) = match (geom.output_extent(h), geom.output_extent(w)) {
        (Some(a), Some(b)) => (a, b),
        _ => return Err(SftError::dim("conv2d", ws, x.shape())),
    };
    let k = geom.kernel;
    let mut out = vec![0.0; c_out * oh * ow];
    for co in 0..c_out {
        let plane = &mut out[co * oh * ow..(co + 1) * oh * ow];
        plane.iter_mut().for_each(|v| *v = bias.data[co]);
        for ci in 0..c_in {
            let src = &x.data[ci * h * w..(ci + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let wv = weight.data[((co * c_in + ci) * k + ky) * k + kx];
                    for oy in 0..oh {
                        let iy = (oy * geom.stride + ky) as isize - geom.padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let src_row = &src[iy as usize * w..(iy as usize + 1) * w];
                        let dst_row = &mut plane[oy * ow..(oy + 1) * ow];
                        for (ox, d) in dst_row.iter_mut().enumerate() {
                            let ix = (ox * geom.stride + kx) as isize - geom.padding as isize;
                            if ix >= 0 && ix < w as isize {
                                *d += wv * src_row[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![c_out, oh, ow], out)
}

/// Multi-head scaled dot-product attention over the column blocks of
/// `q: [n, d]`, `k: [m, d]`, `v: [m, d]`.
///
/// Head `h` uses columns `h * d/heads .. (h + 1) * d/heads` and scales its
/// logits by `1 / sqrt(d / heads)`. With `causal`, query `i` only sees keys
/// `j <= i + (m - n)`, i.e. the trailing `n` keys align with the queries.
/// Returns the concatenated head outputs `[n, d]` and weights `[heads, n, m]`.
pub fn multi_head_attention(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    heads: usize,
    causal: bool,
) -> Result<(Tensor, Tensor)> {
    let (n, d) = q.dims2()?;
    let (m, dk) = k.dims2()?;
    if dk != d || k.shape() != v.shape() {
        return Err(SftError::dim("multi_head_attention", q.shape(), k.shape()));
    }
    if heads == 0 || d % heads != 0 {
        return Err(SftError::Config(format!("width {d} not divisible by {heads} heads")));
    }
    if causal && m < n {
        return Err(SftError::dim("multi_head_attention(causal)", q.shape(), k.shape()));
    }
    let hd = d / heads;
    let scale = 1.0 / (hd as f64).sqrt();
    let offset = if causal { m - n } else { 0 };
    let mut out = vec![0.0; n * d];
    let mut weights = vec![0.0; heads * n * m];
    for h in 0..heads {
        let cols = h * hd..(h + 1) * hd;
        for i in 0..n {
            let visible = if causal { i + offset + 1 } else { m };
            let row = &mut weights[(h * n + i) * m..(h * n + i) * m + visible];
            let qi = &q.data[i * d + cols.start..i * d + cols.end];
            for (j, slot) in row.iter_mut().enumerate() {
                let kj = &k.data[j * d + cols.start..j * d + cols.end];
                *slot = qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale;
            }
            softmax_in_place(row);
            let out_row = &mut out[i * d + cols.start..i * d + cols.end];
            for (j, &a) in row.iter().enumerate() {
                let vj = &v.data[j * d + cols.start..j * d + cols.end];
                for (o, &x) in out_row.iter_mut().zip(vj) {
                    *o += a * x;
                }
            }
        }
    }
    Ok((Tensor::new(vec![n, d], out)?, Tensor::new(vec![heads, n, m], weights)?))
}
