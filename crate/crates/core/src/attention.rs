//! Axial sparse-focus attention and its dense masked reference.
//!
//! Feature maps are `[C, H, W]` tensors. Pixel `(row, col)` has flat index
//! `row * W + col`. Each pixel attends over its axial neighborhood: pixels in
//! its own row and column, either the whole line (`FullLength`) or a window of
//! `l` pixels along each line (`FixedLength`).

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Result, SftError};
use crate::format;
use crate::tensor::{softmax_in_place, Tensor};

/// Logit written into masked-out slots of the dense reference.
pub const MASKED_LOGIT: f64 = -1e30;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AxialVariant {
    FullLength,
    FixedLength { l: usize },
}

impl AxialVariant {
    pub fn validate(&self, width: usize, height: usize) -> Result<()> {
        if let AxialVariant::FixedLength { l } = *self {
            if l == 0 || l > width.max(height) {
                return Err(SftError::Config(format!(
                    "fixed-length window l = {l} must lie in [1, {}]",
                    width.max(height)
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Pixel {
    pub row: usize,
    pub col: usize,
}

impl Pixel {
    pub fn new(row: usize, col: usize) -> Self {
        Pixel { row, col }
    }

    pub fn index(&self, width: usize) -> usize {
        self.row * width + self.col
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AxialNeighborhood {
    pub center: Pixel,
    /// Row segment left to right (center included), then the column
    /// segment top to bottom with the center skipped.
    pub members: Vec<Pixel>,
}

/// Window of `min(l, extent)` consecutive positions around `pos`.
///
/// The window nominally spans offsets `-(l-1)/2 ..= l-1-(l-1)/2` and is
/// shifted inward at the borders so it never leaves the line.
fn window(pos: usize, extent: usize, l: usize) -> std::ops::Range<usize> {
    let len = l.min(extent);
    let start = pos.saturating_sub((l - 1) / 2).min(extent - len);
    start..start + len
}

pub fn axial_neighborhood(
    p: Pixel,
    width: usize,
    height: usize,
    variant: AxialVariant,
) -> Result<AxialNeighborhood> {
    if p.row >= height || p.col >= width {
        return Err(SftError::Index(format!(
            "pixel ({}, {}) outside {height}x{width} grid",
            p.row, p.col
        )));
    }
    variant.validate(width, height)?;
    let (cols, rows) = match variant {
        AxialVariant::FullLength => (0..width, 0..height),
        AxialVariant::FixedLength { l } => (window(p.col, width, l), window(p.row, height, l)),
    };
    let mut members: Vec<Pixel> = cols.map(|c| Pixel::new(p.row, c)).collect();
    members.extend(rows.filter(|&r| r != p.row).map(|r| Pixel::new(r, p.col)));
    Ok(AxialNeighborhood { center: p, members })
}

/// Neighborhoods of every pixel in a grid, as flat indices.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AxialLayout {
    pub width: usize,
    pub height: usize,
    pub variant: AxialVariant,
    members: Vec<Vec<usize>>,
}

impl AxialLayout {
    pub fn new(width: usize, height: usize, variant: AxialVariant) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(SftError::Config("grid extents must be positive".into()));
        }
        variant.validate(width, height)?;
        let mut members = Vec::with_capacity(width * height);
        for row in 0..height {
            for col in 0..width {
                let nb = axial_neighborhood(Pixel::new(row, col), width, height, variant)?;
                members.push(nb.members.iter().map(|m| m.index(width)).collect());
            }
        }
        Ok(AxialLayout {
            width,
            height,
            variant,
            members,
        })
    }

    pub fn pixels(&self) -> usize {
        self.width * self.height
    }

    pub fn members(&self, p: usize) -> &[usize] {
        &self.members[p]
    }

    /// Widest neighborhood in the grid.
    pub fn n_max(&self) -> usize {
        self.members.iter().map(Vec::len).max().unwrap_or(0)
    }

    /// `sum_p |N(p)|`.
    pub fn total_members(&self) -> usize {
        self.members.iter().map(Vec::len).sum()
    }

    pub fn mask(&self) -> AttentionMask {
        let n = self.pixels();
        let mut allowed = vec![false; n * n];
        for (p, ms) in self.members.iter().enumerate() {
            for &m in ms {
                allowed[p * n + m] = true;
            }
        }
        AttentionMask { n, allowed }
    }
}

/// Boolean `n x n` attention mask; `true` marks an allowed (query, key) pair.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttentionMask {
    n: usize,
    allowed: Vec<bool>,
}

impl AttentionMask {
    pub fn new(n: usize, allowed: Vec<bool>) -> Result<Self> {
        if allowed.len() != n * n {
            return Err(SftError::dim("AttentionMask::new", &[n, n], &[allowed.len()]));
        }
        Ok(AttentionMask { n, allowed })
    }

    pub fn all(n: usize) -> Self {
        AttentionMask {
            n,
            allowed: vec![true; n * n],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut allowed = vec![false; n * n];
        for i in 0..n {
            allowed[i * n + i] = true;
        }
        AttentionMask { n, allowed }
    }

    pub fn size(&self) -> usize {
        self.n
    }

    pub fn get(&self, query: usize, key: usize) -> bool {
        self.allowed[query * self.n + key]
    }
}

/// Per-pixel attention weights over the axial neighborhood.
///
/// Row `p` of `weights` holds the distribution over `layout.members(p)` in
/// order; slots past `|N(p)|` are exactly zero.
#[derive(Clone, Debug)]
pub struct AxialAttentionMap {
    pub layout: AxialLayout,
    pub weights: Tensor,
}

impl AxialAttentionMap {
    pub fn row(&self, p: usize) -> &[f64] {
        &self.weights.row(p)[..self.layout.members(p).len()]
    }

    /// Writes `<stem>.sft1` (weights) and `<stem>.json` (mask descriptor).
    pub fn export(&self, dir: &Path, stem: &str) -> Result<()> {
        format::save(&dir.join(format!("{stem}.sft1")), &self.weights)?;
        let descriptor = serde_json::json!({
            "height": self.layout.height,
            "width": self.layout.width,
            "variant": self.layout.variant,
            "n_max": self.layout.n_max(),
            "pixel_index": "row * width + col",
            "members": self.layout.members,
        });
        let path = dir.join(format!("{stem}.json"));
        let text = serde_json::to_string_pretty(&descriptor)
            .map_err(|e| SftError::json("mask descriptor", e))?;
        std::fs::write(&path, text).map_err(|e| SftError::io(&path, e))
    }
}

struct Inputs {
    c_qk: usize,
    c_v: usize,
    height: usize,
    width: usize,
}

fn check_inputs(q: &Tensor, k: &Tensor, v: &Tensor, f: &Tensor) -> Result<Inputs> {
    let (c_qk, height, width) = q.dims3()?;
    let (c_k, hk, wk) = k.dims3()?;
    if (c_k, hk, wk) != (c_qk, height, width) {
        return Err(SftError::dim("sparse_focus_attention(q, k)", q.shape(), k.shape()));
    }
    let (c_v, hv, wv) = v.dims3()?;
    if (hv, wv) != (height, width) {
        return Err(SftError::dim("sparse_focus_attention(q, v)", q.shape(), v.shape()));
    }
    if f.shape() != v.shape() {
        return Err(SftError::dim("sparse_focus_attention(v, f)", v.shape(), f.shape()));
    }
    Ok(Inputs {
        c_qk,
        c_v,
        height,
        width,
    })
}

fn logit_scale(c_qk: usize, scale_qk: bool) -> f64 {
    if scale_qk {
        1.0 / (c_qk as f64).sqrt()
    } else {
        1.0
    }
}

/// Attention weights over each pixel's axial neighborhood.
pub fn axial_attention_map(
    q: &Tensor,
    k: &Tensor,
    layout: &AxialLayout,
    scale_qk: bool,
) -> Result<AxialAttentionMap> {
    let dims = check_inputs(q, k, q, q)?;
    if (dims.height, dims.width) != (layout.height, layout.width) {
        return Err(SftError::dim(
            "axial_attention_map",
            q.shape(),
            &[layout.height, layout.width],
        ));
    }
    let n = layout.pixels();
    let n_max = layout.n_max();
    let scale = logit_scale(dims.c_qk, scale_qk);
    let (qd, kd) = (q.data(), k.data());
    let mut weights = vec![0.0; n * n_max];
    for p in 0..n {
        let row = &mut weights[p * n_max..p * n_max + layout.members(p).len()];
        for (slot, &m) in row.iter_mut().zip(layout.members(p)) {
            let mut dot = 0.0;
            for c in 0..dims.c_qk {
                dot += qd[c * n + p] * kd[c * n + m];
            }
            *slot = dot * scale;
        }
        softmax_in_place(row);
    }
    Ok(AxialAttentionMap {
        layout: layout.clone(),
        weights: Tensor::new(vec![n, n_max], weights)?,
    })
}

/// `out[:, p] = sum_i A[p, i] * V[:, N(p)_i] + F[:, p]`.
fn aggregate(map: &AxialAttentionMap, v: &Tensor, f: &Tensor) -> Result<Tensor> {
    let n = map.layout.pixels();
    let c_v = v.numel() / n;
    let vd = v.data();
    let mut out = f.clone();
    let od = out.data_mut();
    for p in 0..n {
        let weights = map.row(p);
        for c in 0..c_v {
            let mut acc = 0.0;
            for (&a, &m) in weights.iter().zip(map.layout.members(p)) {
                acc += a * vd[c * n + m];
            }
            od[c * n + p] += acc;
        }
    }
    Ok(out)
}

/// Sparse focus attention with residual: for each pixel, softmax of
/// `Q_p . K_m` over its axial neighborhood (divided by `sqrt(C')` when
/// `scale_qk`), weighted sum of `V` over the same neighborhood, plus `F_p`.
pub fn sparse_focus_attention(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    f: &Tensor,
    variant: AxialVariant,
    scale_qk: bool,
) -> Result<Tensor> {
    let dims = check_inputs(q, k, v, f)?;
    let layout = AxialLayout::new(dims.width, dims.height, variant)?;
    sparse_focus_attention_with_layout(q, k, v, f, &layout, scale_qk).map(|(out, _)| out)
}

/// Same as [`sparse_focus_attention`] with a prebuilt layout; also returns the map.
pub fn sparse_focus_attention_with_layout(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    f: &Tensor,
    layout: &AxialLayout,
    scale_qk: bool,
) -> Result<(Tensor, AxialAttentionMap)> {
    check_inputs(q, k, v, f)?;
    let map = axial_attention_map(q, k, layout, scale_qk)?;
    let out = aggregate(&map, v, f)?;
    Ok((out, map))
}

/// Gradients of sparse focus attention w.r.t. `(q, k, v, f)`.
pub(crate) fn sparse_focus_backward(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    map: &AxialAttentionMap,
    scale_qk: bool,
    grad_out: &Tensor,
) -> (Tensor, Tensor, Tensor, Tensor) {
    let layout = &map.layout;
    let n = layout.pixels();
    let c_qk = q.numel() / n;
    let c_v = v.numel() / n;
    let scale = logit_scale(c_qk, scale_qk);
    let (qd, kd, vd, gd) = (q.data(), k.data(), v.data(), grad_out.data());
    let mut dq = Tensor::zeros(q.shape());
    let mut dk = Tensor::zeros(k.shape());
    let mut dv = Tensor::zeros(v.shape());
    let mut d_weights = Vec::with_capacity(layout.n_max());
    for p in 0..n {
        let members = layout.members(p);
        let weights = map.row(p);
        d_weights.clear();
        for (&a, &m) in weights.iter().zip(members) {
            let mut da = 0.0;
            for c in 0..c_v {
                let g = gd[c * n + p];
                da += g * vd[c * n + m];
                dv.data_mut()[c * n + m] += a * g;
            }
            d_weights.push(da);
        }
        let expected: f64 = weights.iter().zip(&d_weights).map(|(a, d)| a * d).sum();
        for ((&a, &da), &m) in weights.iter().zip(&d_weights).zip(members) {
            let d_logit = a * (da - expected) * scale;
            for c in 0..c_qk {
                dq.data_mut()[c * n + p] += d_logit * kd[c * n + m];
                dk.data_mut()[c * n + m] += d_logit * qd[c * n + p];
            }
        }
    }
    (dq, dk, dv, grad_out.clone())
}

/// Brute-force reference: full `Q^T K` over all pixels, masked logits set
/// to [`MASKED_LOGIT`], row softmax, `A V + F`.
pub fn dense_masked_attention(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    f: &Tensor,
    mask: &AttentionMask,
    scale_qk: bool,
) -> Result<Tensor> {
    dense_masked_weights(q, k, v, f, mask, scale_qk).map(|(out, _)| out)
}

/// Dense reference that also returns the full `[HW, HW]` weight matrix.
pub fn dense_masked_weights(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    f: &Tensor,
    mask: &AttentionMask,
    scale_qk: bool,
) -> Result<(Tensor, Tensor)> {
    let dims = check_inputs(q, k, v, f)?;
    let n = dims.height * dims.width;
    if mask.size() != n {
        return Err(SftError::dim("dense_masked_attention(mask)", &[n, n], &[mask.size(), mask.size()]));
    }
    for p in 0..n {
        if !(0..n).any(|j| mask.get(p, j)) {
            return Err(SftError::Contract(format!("mask row {p} has no allowed key")));
        }
    }
    let qt = q.clone().reshape(&[dims.c_qk, n])?.transpose()?;
    let kf = k.clone().reshape(&[dims.c_qk, n])?;
    let mut logits = qt.matmul(&kf)?.scale(logit_scale(dims.c_qk, scale_qk));
    for (idx, x) in logits.data_mut().iter_mut().enumerate() {
        if !mask.get(idx / n, idx % n) {
            *x = MASKED_LOGIT;
        }
    }
    let weights = logits.softmax_last();
    // out[c, p] = sum_j V[c, j] * A[p, j]
    let vf = v.clone().reshape(&[dims.c_v, n])?;
    let out = vf
        .matmul(&weights.transpose()?)?
        .reshape(v.shape())?
        .add(f)?;
    Ok((out, weights))
}
