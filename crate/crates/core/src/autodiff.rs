//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Graph`] records every operation in creation order. [`Graph::backward`]
//! walks the tape in reverse, so parents always precede children and each
//! node's gradient is complete before it is propagated.

use crate::attention::{self, AxialAttentionMap, AxialLayout};
use crate::error::{Result, SftError};
use crate::tensor::{self, moments, ConvGeometry, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddRow(Var, Var),
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Concat0(Vec<Var>),
    Narrow0(Var, usize),
    Sum(Var),
    Tanh(Var),
    Relu(Var),
    SoftmaxLast(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    },
    PointwiseConv {
        f: Var,
        weight: Var,
        bias: Var,
    },
    Conv2d {
        x: Var,
        weight: Var,
        bias: Var,
        geom: ConvGeometry,
    },
    SparseFocus {
        q: Var,
        k: Var,
        v: Var,
        f: Var,
        map: Box<AxialAttentionMap>,
        scale_qk: bool,
    },
    MultiHead {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        weights: Tensor,
    },
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        pad_id: usize,
        probs: Tensor,
    },
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Recorded computation. Values are immutable once pushed.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of one scalar output w.r.t. every node of a graph.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient for `v`; zeros when `v` does not influence the output.
    pub fn get(&self, v: Var) -> Tensor {
        self.grads[v.0]
            .clone()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).add(self.value(b))?;
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).sub(self.value(b))?;
        Ok(self.push(out, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).mul(self.value(b))?;
        Ok(self.push(out, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).scale(c);
        self.push(out, Op::Scale(a, c))
    }

    /// Matrix plus a row-broadcast bias.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let out = self.value(a).add_row(self.value(bias))?;
        Ok(self.push(out, Op::AddRow(a, bias)))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    /// `x W + b` for `x: [n, in]`, `W: [in, out]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, weight: Var, bias: Var) -> Result<Var> {
        let xw = self.matmul(x, weight)?;
        self.add_row(xw, bias)
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).transpose()?;
        Ok(self.push(out, Op::Transpose(a)))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshape(shape)?;
        Ok(self.push(out, Op::Reshape(a)))
    }

    pub fn concat0(&mut self, parts: &[Var]) -> Result<Var> {
        let values: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let out = Tensor::concat0(&values)?;
        Ok(self.push(out, Op::Concat0(parts.to_vec())))
    }

    pub fn narrow0(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let out = self.value(a).narrow0(start, len)?;
        Ok(self.push(out, Op::Narrow0(a, start)))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        self.push(out, Op::Sum(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::tanh);
        self.push(out, Op::Tanh(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.max(0.0));
        self.push(out, Op::Relu(a))
    }

    pub fn softmax_last(&mut self, a: Var) -> Var {
        let out = self.value(a).softmax_last();
        self.push(out, Op::SoftmaxLast(a))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let out = self.value(x).layer_norm(self.value(gamma), self.value(beta), eps)?;
        Ok(self.push(out, Op::LayerNorm { x, gamma, beta, eps }))
    }

    pub fn pointwise_conv(&mut self, f: Var, weight: Var, bias: Var) -> Result<Var> {
        let out = tensor::pointwise_conv(self.value(f), self.value(weight), self.value(bias))?;
        Ok(self.push(out, Op::PointwiseConv { f, weight, bias }))
    }

    pub fn conv2d(&mut self, x: Var, weight: Var, bias: Var, geom: ConvGeometry) -> Result<Var> {
        let out = tensor::conv2d(self.value(x), self.value(weight), self.value(bias), geom)?;
        Ok(self.push(
            out,
            Op::Conv2d {
                x,
                weight,
                bias,
                geom,
            },
        ))
    }

    pub fn sparse_focus(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        f: Var,
        layout: &AxialLayout,
        scale_qk: bool,
    ) -> Result<Var> {
        let (out, map) = attention::sparse_focus_attention_with_layout(
            self.value(q),
            self.value(k),
            self.value(v),
            self.value(f),
            layout,
            scale_qk,
        )?;
        Ok(self.push(
            out,
            Op::SparseFocus {
                q,
                k,
                v,
                f,
                map: Box::new(map),
                scale_qk,
            },
        ))
    }

    /// Attention weights of the most recent [`Graph::sparse_focus`] node `v`.
    pub fn attention_map(&self, v: Var) -> Option<&AxialAttentionMap> {
        match &self.nodes[v.0].op {
            Op::SparseFocus { map, .. } => Some(map),
            _ => None,
        }
    }

    /// Weights `[heads, n, m]` of a [`Graph::multi_head`] node.
    pub fn head_weights(&self, v: Var) -> Option<&Tensor> {
        match &self.nodes[v.0].op {
            Op::MultiHead { weights, .. } => Some(weights),
            _ => None,
        }
    }

    pub fn multi_head(&mut self, q: Var, k: Var, v: Var, heads: usize, causal: bool) -> Result<Var> {
        let (out, weights) =
            tensor::multi_head_attention(self.value(q), self.value(k), self.value(v), heads, causal)?;
        Ok(self.push(
            out,
            Op::MultiHead {
                q,
                k,
                v,
                heads,
                weights,
            },
        ))
    }

    /// Row lookup `table[ids[i]]` into an `[ids.len(), d]` matrix.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (rows, d) = self.value(table).dims2()?;
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(SftError::Vocabulary(format!("token id {bad} >= vocabulary size {rows}")));
        }
        let t = self.value(table);
        let data: Vec<f64> = ids.iter().flat_map(|&i| t.row(i).iter().copied()).collect();
        let out = Tensor::new(vec![ids.len(), d], data)?;
        Ok(self.push(
            out,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    /// Mean negative log-likelihood of `targets` under `softmax(logits)`,
    /// skipping positions whose target is `pad_id`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], pad_id: usize) -> Result<Var> {
        let (n, vocab) = self.value(logits).dims2()?;
        if targets.len() != n {
            return Err(SftError::dim("cross_entropy", &[n, vocab], &[targets.len()]));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= vocab) {
            return Err(SftError::Vocabulary(format!("target id {bad} >= vocabulary size {vocab}")));
        }
        let counted = targets.iter().filter(|&&t| t != pad_id).count();
        if counted == 0 {
            return Err(SftError::Contract("cross_entropy over an all-PAD target".into()));
        }
        let probs = self.value(logits).softmax_last();
        let lv = self.value(logits);
        let mut total = 0.0;
        for (i, &t) in targets.iter().enumerate() {
            if t == pad_id {
                continue;
            }
            let row = lv.row(i);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            total += lse - row[t];
        }
        let out = Tensor::scalar(total / counted as f64);
        Ok(self.push(
            out,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                pad_id,
                probs,
            },
        ))
    }

    /// Reverse pass from a single-element node.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        let out_value = self.value(output);
        if out_value.numel() != 1 {
            return Err(SftError::Contract(format!(
                "backward needs a scalar output, got shape {:?}",
                out_value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; output.0 + 1];
        grads[output.0] = Some(Tensor::full(out_value.shape(), 1.0));
        for i in (0..=output.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            let mut pending: Vec<(Var, Tensor)> = Vec::with_capacity(4);
            let mut acc = |v: Var, t: Tensor| pending.push((v, t));
            match &node.op {
                Op::Leaf => {
                    grads[i] = Some(g);
                    continue;
                }
                Op::Add(a, b) => {
                    acc(*a, g.clone());
                    acc(*b, g);
                }
                Op::Sub(a, b) => {
                    acc(*b, g.scale(-1.0));
                    acc(*a, g);
                }
                Op::Mul(a, b) => {
                    acc(*a, g.mul(self.value(*b))?);
                    acc(*b, g.mul(self.value(*a))?);
                }
                Op::Scale(a, c) => acc(*a, g.scale(*c)),
                Op::AddRow(a, b) => {
                    let (_, n) = g.dims2()?;
                    let mut db = vec![0.0; n];
                    for row in g.data().chunks(n) {
                        for (d, x) in db.iter_mut().zip(row) {
                            *d += x;
                        }
                    }
                    acc(*b, Tensor::from_vec(db));
                    acc(*a, g);
                }
                Op::MatMul(a, b) => {
                    acc(*a, g.matmul(&self.value(*b).transpose()?)?);
                    acc(*b, self.value(*a).transpose()?.matmul(&g)?);
                }
                Op::Transpose(a) => acc(*a, g.transpose()?),
                Op::Reshape(a) => acc(*a, g.reshape(self.value(*a).shape())?),
                Op::Concat0(parts) => {
                    let mut start = 0;
                    for p in parts {
                        let len = self.value(*p).shape()[0];
                        acc(*p, g.narrow0(start, len)?);
                        start += len;
                    }
                }
                Op::Narrow0(a, start) => {
                    let src = self.value(*a);
                    let stride: usize = src.shape()[1..].iter().product();
                    let mut full = Tensor::zeros(src.shape());
                    full.data_mut()[start * stride..start * stride + g.numel()].copy_from_slice(g.data());
                    acc(*a, full);
                }
                Op::Sum(a) => {
                    let s = g.data()[0];
                    acc(*a, Tensor::full(self.value(*a).shape(), s));
                }
                Op::Tanh(a) => {
                    let mut d = g;
                    for (x, y) in d.data_mut().iter_mut().zip(node.value.data()) {
                        *x *= 1.0 - y * y;
                    }
                    acc(*a, d);
                }
                Op::Relu(a) => {
                    let mut d = g;
                    for (x, y) in d.data_mut().iter_mut().zip(self.value(*a).data()) {
                        if *y <= 0.0 {
                            *x = 0.0;
                        }
                    }
                    acc(*a, d);
                }
                Op::SoftmaxLast(a) => acc(*a, softmax_backward(&node.value, &g)),
                Op::LayerNorm { x, gamma, beta, eps } => {
                    let (dx, dg, db) =
                        layer_norm_backward(self.value(*x), self.value(*gamma), *eps, &g);
                    acc(*x, dx);
                    acc(*gamma, dg);
                    acc(*beta, db);
                }
                Op::PointwiseConv { f, weight, bias } => {
                    let (c, h, w) = self.value(*f).dims3()?;
                    let c_out = g.shape()[0];
                    let g2 = g.reshape(&[c_out, h * w])?;
                    let f2 = self.value(*f).clone().reshape(&[c, h * w])?;
                    acc(*weight, g2.matmul(&f2.transpose()?)?);
                    let db: Vec<f64> = g2.data().chunks(h * w).map(|r| r.iter().sum()).collect();
                    acc(*bias, Tensor::from_vec(db));
                    let df = self.value(*weight).transpose()?.matmul(&g2)?;
                    acc(*f, df.reshape(&[c, h, w])?);
                }
                Op::Conv2d {
                    x,
                    weight,
                    bias,
                    geom,
                } => {
                    let (dx, dw, db) = conv2d_backward(self.value(*x), self.value(*weight), *geom, &g);
                    acc(*x, dx);
                    acc(*weight, dw);
                    acc(*bias, db);
                }
                Op::SparseFocus {
                    q,
                    k,
                    v,
                    f,
                    map,
                    scale_qk,
                } => {
                    let (dq, dk, dv, df) = attention::sparse_focus_backward(
                        self.value(*q),
                        self.value(*k),
                        self.value(*v),
                        map,
                        *scale_qk,
                        &g,
                    );
                    acc(*q, dq);
                    acc(*k, dk);
                    acc(*v, dv);
                    acc(*f, df);
                }
                Op::MultiHead {
                    q,
                    k,
                    v,
                    heads,
                    weights,
                } => {
                    let (dq, dk, dv) =
                        multi_head_backward(self.value(*q), self.value(*k), self.value(*v), *heads, weights, &g);
                    acc(*q, dq);
                    acc(*k, dk);
                    acc(*v, dv);
                }
                Op::Gather { table, ids } => {
                    let t = self.value(*table);
                    let d = t.shape()[1];
                    let mut dt = Tensor::zeros(t.shape());
                    for (r, &id) in ids.iter().enumerate() {
                        for j in 0..d {
                            dt.data_mut()[id * d + j] += g.data()[r * d + j];
                        }
                    }
                    acc(*table, dt);
                }
                Op::CrossEntropy {
                    logits,
                    targets,
                    pad_id,
                    probs,
                } => {
                    let s = g.data()[0];
                    let vocab = probs.shape()[1];
                    let counted = targets.iter().filter(|&&t| t != *pad_id).count() as f64;
                    let mut d = probs.clone();
                    for (i, &t) in targets.iter().enumerate() {
                        let row = &mut d.data_mut()[i * vocab..(i + 1) * vocab];
                        if t == *pad_id {
                            row.iter_mut().for_each(|x| *x = 0.0);
                            continue;
                        }
                        row[t] -= 1.0;
                        row.iter_mut().for_each(|x| *x *= s / counted);
                    }
                    acc(*logits, d);
                }
            }
            for (v, t) in pending {
                match &mut grads[v.0] {
                    Some(existing) => existing.add_assign(&t),
                    slot @ None => *slot = Some(t),
                }
            }
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes[..=output.0]
                .iter()
                .map(|n| n.value.shape().to_vec())
                .collect(),
        })
    }
}

fn softmax_backward(y: &Tensor, g: &Tensor) -> Tensor {
    let n = *y.shape().last().unwrap();
    let mut d = g.clone();
    for (drow, yrow) in d.data_mut().chunks_mut(n).zip(y.data().chunks(n)) {
        let dot: f64 = drow.iter().zip(yrow).map(|(a, b)| a * b).sum();
        for (dx, &yv) in drow.iter_mut().zip(yrow) {
            *dx = yv * (*dx - dot);
        }
    }
    d
}

fn layer_norm_backward(x: &Tensor, gamma: &Tensor, eps: f64, g: &Tensor) -> (Tensor, Tensor, Tensor) {
    let d = gamma.numel();
    let mut dx = Tensor::zeros(x.shape());
    let mut dg = vec![0.0; d];
    let mut db = vec![0.0; d];
    let mut xhat = vec![0.0; d];
    let mut dxhat = vec![0.0; d];
    for ((xrow, grow), dxrow) in x
        .data()
        .chunks(d)
        .zip(g.data().chunks(d))
        .zip(dx.data_mut().chunks_mut(d))
    {
        let (mean, inv) = moments(xrow, eps);
        for j in 0..d {
            xhat[j] = (xrow[j] - mean) * inv;
            dg[j] += grow[j] * xhat[j];
            db[j] += grow[j];
            dxhat[j] = grow[j] * gamma.data()[j];
        }
        let sum_d: f64 = dxhat.iter().sum();
        let sum_dx: f64 = dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum();
        for j in 0..d {
            dxrow[j] = inv / d as f64 * (d as f64 * dxhat[j] - sum_d - xhat[j] * sum_dx);
        }
    }
    (dx, Tensor::from_vec(dg), Tensor::from_vec(db))
}

fn conv2d_backward(x: &Tensor, w: &Tensor, geom: ConvGeometry, g: &Tensor) -> (Tensor, Tensor, Tensor) {
    let (c_in, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (c_out, oh, ow) = (g.shape()[0], g.shape()[1], g.shape()[2]);
    let k = geom.kernel;
    let mut dx = Tensor::zeros(x.shape());
    let mut dw = Tensor::zeros(w.shape());
    let db: Vec<f64> = g.data().chunks(oh * ow).map(|p| p.iter().sum()).collect();
    for co in 0..c_out {
        let gplane = &g.data()[co * oh * ow..(co + 1) * oh * ow];
        for ci in 0..c_in {
            let src = &x.data()[ci * h * wd..(ci + 1) * h * wd];
            for ky in 0..k {
                for kx in 0..k {
                    let widx = ((co * c_in + ci) * k + ky) * k + kx;
                    let wv = w.data()[widx];
                    let mut dwv = 0.0;
                    for oy in 0..oh {
                        let iy = (oy * geom.stride + ky) as isize - geom.padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let base = ci * h * wd + iy as usize * wd;
                        for ox in 0..ow {
                            let ix = (ox * geom.stride + kx) as isize - geom.padding as isize;
                            if ix < 0 || ix >= wd as isize {
                                continue;
                            }
                            let gv = gplane[oy * ow + ox];
                            dwv += gv * src[iy as usize * wd + ix as usize];
                            dx.data_mut()[base + ix as usize] += gv * wv;
                        }
                    }
                    dw.data_mut()[widx] += dwv;
                }
            }
        }
    }
    (dx, dw, Tensor::from_vec(db))
}

fn multi_head_backward(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    heads: usize,
    weights: &Tensor,
    g: &Tensor,
) -> (Tensor, Tensor, Tensor) {
    let (n, d) = (q.shape()[0], q.shape()[1]);
    let m = k.shape()[0];
    let hd = d / heads;
    let scale = 1.0 / (hd as f64).sqrt();
    let mut dq = Tensor::zeros(q.shape());
    let mut dk = Tensor::zeros(k.shape());
    let mut dv = Tensor::zeros(v.shape());
    let mut dw = vec![0.0; m];
    for h in 0..heads {
        let c0 = h * hd;
        for i in 0..n {
            let w = &weights.data()[(h * n + i) * m..(h * n + i + 1) * m];
            let gi = &g.data()[i * d + c0..i * d + c0 + hd];
            for j in 0..m {
                let vj = &v.data()[j * d + c0..j * d + c0 + hd];
                dw[j] = gi.iter().zip(vj).map(|(a, b)| a * b).sum();
                if w[j] != 0.0 {
                    for t in 0..hd {
                        dv.data_mut()[j * d + c0 + t] += w[j] * gi[t];
                    }
                }
            }
            let expected: f64 = w.iter().zip(&dw).map(|(a, b)| a * b).sum();
            for j in 0..m {
                let dl = w[j] * (dw[j] - expected) * scale;
                if dl == 0.0 {
                    continue;
                }
                for t in 0..hd {
                    dq.data_mut()[i * d + c0 + t] += dl * k.data()[j * d + c0 + t];
                    dk.data_mut()[j * d + c0 + t] += dl * q.data()[i * d + c0 + t];
                }
            }
        }
    }
    (dq, dk, dv)
}

/// Evaluates `f` on fresh leaves for `params` and returns the scalar value
/// with its gradient w.r.t. each parameter.
pub fn grad<F>(f: F, params: &[Tensor]) -> Result<(f64, Vec<Tensor>)>
where
    F: FnOnce(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.leaf(p.clone())).collect();
    let out = f(&mut g, &vars)?;
    let value = g.value(out).data()[0];
    let grads = g.backward(out)?;
    Ok((value, vars.iter().map(|&v| grads.get(v)).collect()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gives_ones() {
        let x = Tensor::from_vec(vec![0.3, -2.0, 5.0]);
        let (_, g) = grad(|g, v| Ok(g.sum(v[0])), &[x]).unwrap();
        assert_eq!(g[0].data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn quadratic() {
        let x = Tensor::from_vec(vec![1.0, 2.0]);
        let (val, g) = grad(
            |g, v| {
                let sq = g.mul(v[0], v[0])?;
                Ok(g.sum(sq))
            },
            &[x],
        )
        .unwrap();
        assert_eq!(val, 5.0);
        assert_eq!(g[0].data(), &[2.0, 4.0]);
    }

    #[test]
    fn non_scalar_output_is_a_contract_error() {
        let x = Tensor::from_vec(vec![1.0, 2.0]);
        let err = grad(|_, v| Ok(v[0]), &[x]).unwrap_err();
        assert!(matches!(err, SftError::Contract(_)));
    }

    #[test]
    fn unused_parameter_gets_zero_gradient() {
        let (_, g) = grad(
            |g, v| Ok(g.sum(v[0])),
            &[Tensor::from_vec(vec![1.0]), Tensor::zeros(&[2, 2])],
        )
        .unwrap();
        assert_eq!(g[1], Tensor::zeros(&[2, 2]));
    }

    #[test]
    fn cross_entropy_of_zero_logits_is_ln_v() {
        let mut g = Graph::new();
        let l = g.leaf(Tensor::zeros(&[3, 7]));
        let loss = g.cross_entropy(l, &[1, 0, 4], 0).unwrap();
        assert!((g.value(loss).data()[0] - 7f64.ln()).abs() < 1e-15);
    }
}
