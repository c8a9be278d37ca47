//! Reverse-mode tape over whole-tensor operations.
//!
//! Each op appends a node holding its output value and enough structure to
//! replay the chain rule. Nodes only reference earlier nodes, so the vector
//! index order is already a topological order and `backward` is a single
//! reverse sweep. The tape is deliberately not shareable across threads.

use std::rc::Rc;

use rand::Rng;

use crate::error::{CafeError, Result};

use super::kernels;
use super::precision::round_buf;
use super::sparse::SparseMatrix;
use super::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Leaf,
    Add(Var, Var),
    Mul(Var, Var),
    AddScalar(Var),
    ScalarMul(Var, f64),
    /// x + s where s is a learnable single-element tensor
    AddScalarVar(Var, Var),
    /// x * s where s is a learnable single-element tensor
    MulScalarVar(Var, Var),
    Sigmoid(Var),
    Relu(Var),
    Tanh(Var),
    Linear {
        x: Var,
        w: Var,
        b: Var,
        rows: usize,
        in_dim: usize,
        out_dim: usize,
    },
    MatMul {
        a: Var,
        b: Var,
        m: usize,
        k: usize,
        n: usize,
    },
    Conv7x7 {
        x: Var,
        k: Var,
        b: Var,
        dims: [usize; 4], // B, C_in, H, W
        c_out: usize,
    },
    InstanceNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    },
    Reshape(Var),
    Permute {
        x: Var,
        perm: Vec<usize>,
    },
    Concat {
        parts: Vec<Var>,
        dim: usize,
    },
    GatherRows {
        table: Var,
        indices: Vec<usize>,
    },
    PadRows {
        x: Var,
        src_rows: usize,
    },
    MeanRows(Var),
    MaskedMeanRow {
        x: Var,
        row: usize,
        mask: Vec<f64>,
    },
    MulBcastChan {
        x: Var,
        g: Var,
    },
    SpmmRows {
        matrix: Rc<SparseMatrix>,
        rows: Vec<usize>,
        e: Var,
    },
    Dropout {
        x: Var,
        mask: Vec<f64>,
    },
    Sum(Var),
    BceWithLogits {
        logits: Var,
        targets: Vec<f64>,
    },
    DdiPenalty {
        logits: Var,
        pairs: Rc<Vec<(usize, usize)>>,
    },
}

struct Node {
    value: Tensor,
    grad: Option<Tensor>,
    requires_grad: bool,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_rounded(&mut self, mut value: Tensor, requires_grad: bool, op: Op) -> Var {
        round_buf(value.data_mut());
        self.push(value, requires_grad, op)
    }

    fn requires(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, requires_grad, Op::Leaf)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    fn check_same_shape(&self, a: Var, b: Var, op: &str) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(CafeError::shape(format!("{op}: {sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same_shape(a, b, "add")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let value = Tensor::new(self.value(a).shape().to_vec(), data)?;
        Ok(self.push_rounded(value, self.requires(&[a, b]), Op::Add(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same_shape(a, b, "mul")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let value = Tensor::new(self.value(a).shape().to_vec(), data)?;
        Ok(self.push_rounded(value, self.requires(&[a, b]), Op::Mul(a, b)))
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let data = self.value(a).data().iter().map(|x| x + s).collect();
        let value = Tensor::new(self.value(a).shape().to_vec(), data).unwrap();
        self.push_rounded(value, self.requires(&[a]), Op::AddScalar(a))
    }

    pub fn scalar_mul(&mut self, a: Var, s: f64) -> Var {
        let data = self.value(a).data().iter().map(|x| x * s).collect();
        let value = Tensor::new(self.value(a).shape().to_vec(), data).unwrap();
        self.push_rounded(value, self.requires(&[a]), Op::ScalarMul(a, s))
    }

    /// x + s, broadcasting a single-element tensor s over x.
    pub fn add_scalar_var(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.value(s).numel() != 1 {
            return Err(CafeError::shape("add_scalar_var: s must be a scalar"));
        }
        let sv = self.value(s).item();
        let data = self.value(x).data().iter().map(|v| v + sv).collect();
        let value = Tensor::new(self.value(x).shape().to_vec(), data)?;
        Ok(self.push_rounded(value, self.requires(&[x, s]), Op::AddScalarVar(x, s)))
    }

    /// x * s, broadcasting a single-element tensor s over x.
    pub fn mul_scalar_var(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.value(s).numel() != 1 {
            return Err(CafeError::shape("mul_scalar_var: s must be a scalar"));
        }
        let sv = self.value(s).item();
        let data = self.value(x).data().iter().map(|v| v * sv).collect();
        let value = Tensor::new(self.value(x).shape().to_vec(), data)?;
        Ok(self.push_rounded(value, self.requires(&[x, s]), Op::MulScalarVar(x, s)))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let data = self.value(a).data().iter().map(|&x| sigmoid(x)).collect();
        let value = Tensor::new(self.value(a).shape().to_vec(), data).unwrap();
        self.push_rounded(value, self.requires(&[a]), Op::Sigmoid(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let data = self.value(a).data().iter().map(|&x| x.max(0.0)).collect();
        let value = Tensor::new(self.value(a).shape().to_vec(), data).unwrap();
        self.push_rounded(value, self.requires(&[a]), Op::Relu(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let data = self.value(a).data().iter().map(|&x| x.tanh()).collect();
        let value = Tensor::new(self.value(a).shape().to_vec(), data).unwrap();
        self.push_rounded(value, self.requires(&[a]), Op::Tanh(a))
    }

    /// y[..., j] = sum_k x[..., k] * W[k, j] + b[j]
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        let bs = self.value(b).shape().to_vec();
        if ws.len() != 2 || xs.is_empty() || xs[xs.len() - 1] != ws[0] {
            return Err(CafeError::shape(format!(
                "linear: x {xs:?} is incompatible with W {ws:?}"
            )));
        }
        if bs != [ws[1]] {
            return Err(CafeError::shape(format!(
                "linear: b {bs:?} must be [{}]",
                ws[1]
            )));
        }
        let (in_dim, out_dim) = (ws[0], ws[1]);
        let rows = self.value(x).numel() / in_dim;
        let mut data = kernels::mm(self.value(x).data(), self.value(w).data(), rows, in_dim, out_dim);
        for r in 0..rows {
            for j in 0..out_dim {
                data[r * out_dim + j] += self.value(b).data()[j];
            }
        }
        let mut out_shape = xs;
        *out_shape.last_mut().unwrap() = out_dim;
        let value = Tensor::new(out_shape, data)?;
        Ok(self.push_rounded(
            value,
            self.requires(&[x, w, b]),
            Op::Linear {
                x,
                w,
                b,
                rows,
                in_dim,
                out_dim,
            },
        ))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.value(a).shape().to_vec();
        let sb = self.value(b).shape().to_vec();
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(CafeError::shape(format!("matmul: {sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let data = kernels::mm(self.value(a).data(), self.value(b).data(), m, k, n);
        let value = Tensor::new(vec![m, n], data)?;
        Ok(self.push_rounded(value, self.requires(&[a, b]), Op::MatMul { a, b, m, k, n }))
    }

    /// 7x7 cross-correlation, stride 1, zero padding 3; spatial size preserved.
    pub fn conv7x7(&mut self, x: Var, k: Var, b: Var) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        let ks = self.value(k).shape().to_vec();
        if xs.len() != 4 || ks.len() != 4 || ks[2] != 7 || ks[3] != 7 {
            return Err(CafeError::shape(format!("conv7x7: x {xs:?}, kernel {ks:?}")));
        }
        if xs[1] != ks[1] {
            return Err(CafeError::shape(format!(
                "conv7x7: input has {} channels, kernel expects {}",
                xs[1], ks[1]
            )));
        }
        let c_out = ks[0];
        if self.value(b).shape() != [c_out] {
            return Err(CafeError::shape(format!(
                "conv7x7: bias {:?} must be [{c_out}]",
                self.value(b).shape()
            )));
        }
        let [bn, c_in, h, w] = [xs[0], xs[1], xs[2], xs[3]];
        let cols = kernels::im2col(self.value(x).data(), bn, c_in, h, w);
        let patch = c_in * 49;
        // y_mat[(b,h,w), co] = cols . k[co,:]
        let mut data = kernels::mm_nt(&cols, self.value(k).data(), bn * h * w, patch, c_out);
        for r in 0..bn * h * w {
            for co in 0..c_out {
                data[r * c_out + co] += self.value(b).data()[co];
            }
        }
        // rearrange [(b,h,w), co] -> [b, co, h, w]
        let mut out = vec![0.0; bn * c_out * h * w];
        for bi in 0..bn {
            for p in 0..h * w {
                for co in 0..c_out {
                    out[(bi * c_out + co) * h * w + p] = data[(bi * h * w + p) * c_out + co];
                }
            }
        }
        let value = Tensor::new(vec![bn, c_out, h, w], out)?;
        Ok(self.push_rounded(
            value,
            self.requires(&[x, k, b]),
            Op::Conv7x7 {
                x,
                k,
                b,
                dims: [bn, c_in, h, w],
                c_out,
            },
        ))
    }

    /// Per (sample, channel) normalization over the spatial plane,
    /// population variance, learned affine.
    pub fn instance_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        if xs.len() != 4 {
            return Err(CafeError::shape(format!("instance_norm: x {xs:?}")));
        }
        let [bn, c, h, w] = [xs[0], xs[1], xs[2], xs[3]];
        if self.value(gamma).shape() != [c] || self.value(beta).shape() != [c] {
            return Err(CafeError::shape(format!(
                "instance_norm: affine shapes {:?}/{:?} must be [{c}]",
                self.value(gamma).shape(),
                self.value(beta).shape()
            )));
        }
        let plane = h * w;
        let (mean, var) = kernels::instance_stats(self.value(x).data(), bn, c, plane);
        let mut data = vec![0.0; bn * c * plane];
        for bi in 0..bn {
            for ci in 0..c {
                let i = bi * c + ci;
                let inv = 1.0 / (var[i] + eps).sqrt();
                let (g, be) = (self.value(gamma).data()[ci], self.value(beta).data()[ci]);
                for p in 0..plane {
                    let xv = self.value(x).data()[i * plane + p];
                    data[i * plane + p] = g * (xv - mean[i]) * inv + be;
                }
            }
        }
        let value = Tensor::new(xs, data)?;
        Ok(self.push_rounded(
            value,
            self.requires(&[x, gamma, beta]),
            Op::InstanceNorm { x, gamma, beta, eps },
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshaped(shape)?;
        Ok(self.push(value, self.requires(&[x]), Op::Reshape(x)))
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        let mut seen = vec![false; xs.len()];
        let valid = perm.len() == xs.len()
            && perm.iter().all(|&p| p < xs.len() && !std::mem::replace(&mut seen[p], true));
        if !valid {
            return Err(CafeError::shape(format!(
                "permute: {perm:?} is not a permutation of {} dims",
                xs.len()
            )));
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| xs[p]).collect();
        let data = permute_data(self.value(x).data(), &xs, perm);
        let value = Tensor::new(out_shape, data)?;
        Ok(self.push(
            value,
            self.requires(&[x]),
            Op::Permute {
                x,
                perm: perm.to_vec(),
            },
        ))
    }

    pub fn concat(&mut self, parts: &[Var], dim: usize) -> Result<Var> {
        if parts.is_empty() {
            return Err(CafeError::shape("concat: no inputs"));
        }
        let base = self.value(parts[0]).shape().to_vec();
        if dim >= base.len() {
            return Err(CafeError::shape(format!(
                "concat: dim {dim} out of range for rank {}",
                base.len()
            )));
        }
        let mut dim_total = 0;
        for &p in parts {
            let s = self.value(p).shape();
            if s.len() != base.len()
                || s.iter()
                    .enumerate()
                    .any(|(i, &d)| i != dim && d != base[i])
            {
                return Err(CafeError::shape(format!(
                    "concat: incompatible shapes {:?} vs {:?} on dim {dim}",
                    base, s
                )));
            }
            dim_total += s[dim];
        }
        let mut out_shape = base.clone();
        out_shape[dim] = dim_total;
        let outer: usize = base[..dim].iter().product();
        let inner: usize = base[dim + 1..].iter().product();
        let mut data = vec![0.0; outer * dim_total * inner];
        let mut offset = 0;
        for &p in parts {
            let d = self.value(p).shape()[dim];
            let src = self.value(p).data();
            for o in 0..outer {
                let dst_start = (o * dim_total + offset) * inner;
                let src_start = o * d * inner;
                data[dst_start..dst_start + d * inner]
                    .copy_from_slice(&src[src_start..src_start + d * inner]);
            }
            offset += d;
        }
        let value = Tensor::new(out_shape, data)?;
        Ok(self.push(
            value,
            self.requires(parts),
            Op::Concat {
                parts: parts.to_vec(),
                dim,
            },
        ))
    }

    /// Select rows of a [n, d] table; gradient scatter-adds back.
    pub fn gather_rows(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let ts = self.value(table).shape().to_vec();
        if ts.len() != 2 {
            return Err(CafeError::shape(format!("gather_rows: table {ts:?}")));
        }
        let (n, d) = (ts[0], ts[1]);
        if let Some(&bad) = indices.iter().find(|&&i| i >= n) {
            return Err(CafeError::shape(format!(
                "gather_rows: index {bad} out of range for {n} rows"
            )));
        }
        let mut data = vec![0.0; indices.len() * d];
        for (r, &i) in indices.iter().enumerate() {
            data[r * d..(r + 1) * d].copy_from_slice(&self.value(table).data()[i * d..(i + 1) * d]);
        }
        let value = Tensor::new(vec![indices.len(), d], data)?;
        Ok(self.push(
            value,
            self.requires(&[table]),
            Op::GatherRows {
                table,
                indices: indices.to_vec(),
            },
        ))
    }

    /// Zero-pad a [k, d] tensor to [rows, d], k <= rows.
    pub fn pad_rows(&mut self, x: Var, rows: usize) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        if xs.len() != 2 || xs[0] > rows {
            return Err(CafeError::shape(format!("pad_rows: {xs:?} into {rows} rows")));
        }
        let (k, d) = (xs[0], xs[1]);
        let mut data = vec![0.0; rows * d];
        data[..k * d].copy_from_slice(self.value(x).data());
        let value = Tensor::new(vec![rows, d], data)?;
        Ok(self.push(value, self.requires(&[x]), Op::PadRows { x, src_rows: k }))
    }

    /// Mean over the rows of a [k, d] tensor -> [d].
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        if xs.len() != 2 || xs[0] == 0 {
            return Err(CafeError::shape(format!("mean_rows: {xs:?}")));
        }
        let (k, d) = (xs[0], xs[1]);
        let mut data = vec![0.0; d];
        for r in 0..k {
            for j in 0..d {
                data[j] += self.value(x).data()[r * d + j];
            }
        }
        for v in data.iter_mut() {
            *v /= k as f64;
        }
        let value = Tensor::new(vec![d], data)?;
        Ok(self.push_rounded(value, self.requires(&[x]), Op::MeanRows(x)))
    }

    /// Masked mean over the W slots of row `row` of a [B,C,H,W] tensor -> [B,C].
    /// `mask` is laid out [B,W] with 0/1 entries; a zero-support (b) yields zeros.
    pub fn masked_mean_row(&mut self, x: Var, row: usize, mask: &[f64]) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        if xs.len() != 4 || row >= xs[2] || mask.len() != xs[0] * xs[3] {
            return Err(CafeError::shape(format!(
                "masked_mean_row: x {xs:?}, row {row}, mask len {}",
                mask.len()
            )));
        }
        let [bn, c, h, w] = [xs[0], xs[1], xs[2], xs[3]];
        let mut data = vec![0.0; bn * c];
        for bi in 0..bn {
            let count: f64 = mask[bi * w..(bi + 1) * w].iter().sum();
            if count == 0.0 {
                continue;
            }
            for ci in 0..c {
                let base = ((bi * c + ci) * h + row) * w;
                let mut acc = 0.0;
                for wi in 0..w {
                    acc += mask[bi * w + wi] * self.value(x).data()[base + wi];
                }
                data[bi * c + ci] = acc / count;
            }
        }
        let value = Tensor::new(vec![bn, c], data)?;
        Ok(self.push_rounded(
            value,
            self.requires(&[x]),
            Op::MaskedMeanRow {
                x,
                row,
                mask: mask.to_vec(),
            },
        ))
    }

    /// x[B,C,H,W] * g[B,1,H,W], broadcasting g over the channel dim.
    pub fn mul_bcast_chan(&mut self, x: Var, g: Var) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        let gs = self.value(g).shape().to_vec();
        if xs.len() != 4 || gs != [xs[0], 1, xs[2], xs[3]] {
            return Err(CafeError::shape(format!("mul_bcast_chan: x {xs:?}, g {gs:?}")));
        }
        let [bn, c, h, w] = [xs[0], xs[1], xs[2], xs[3]];
        let plane = h * w;
        let mut data = vec![0.0; bn * c * plane];
        for bi in 0..bn {
            for ci in 0..c {
                for p in 0..plane {
                    data[(bi * c + ci) * plane + p] = self.value(x).data()
                        [(bi * c + ci) * plane + p]
                        * self.value(g).data()[bi * plane + p];
                }
            }
        }
        let value = Tensor::new(xs, data)?;
        Ok(self.push_rounded(value, self.requires(&[x, g]), Op::MulBcastChan { x, g }))
    }

    /// Rows of a sparse matrix times a dense [n, d] table: A[rows,:] . E -> [len(rows), d].
    pub fn spmm_rows(&mut self, matrix: Rc<SparseMatrix>, rows: &[usize], e: Var) -> Result<Var> {
        let es = self.value(e).shape().to_vec();
        if es.len() != 2 || es[0] != matrix.n() {
            return Err(CafeError::shape(format!(
                "spmm_rows: table {es:?} vs matrix of size {}",
                matrix.n()
            )));
        }
        if let Some(&bad) = rows.iter().find(|&&r| r >= matrix.n()) {
            return Err(CafeError::shape(format!("spmm_rows: row {bad} out of range")));
        }
        let d = es[1];
        let mut data = vec![0.0; rows.len() * d];
        for (out_r, &i) in rows.iter().enumerate() {
            for (j, v) in matrix.row(i) {
                let src = &self.value(e).data()[j * d..(j + 1) * d];
                let dst = &mut data[out_r * d..(out_r + 1) * d];
                for (o, s) in dst.iter_mut().zip(src) {
                    *o += v * s;
                }
            }
        }
        let value = Tensor::new(vec![rows.len(), d], data)?;
        Ok(self.push_rounded(
            value,
            self.requires(&[e]),
            Op::SpmmRows {
                matrix,
                rows: rows.to_vec(),
            e,
            },
        ))
    }

    /// Inverted dropout: zero with probability p, scale survivors by 1/(1-p).
    /// Identity in eval mode or at p = 0.
    pub fn dropout(&mut self, x: Var, p: f64, train: bool, rng: &mut impl Rng) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(CafeError::config(format!("dropout: p = {p} outside [0, 1)")));
        }
        if !train || p == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - p);
        let mask: Vec<f64> = (0..self.value(x).numel())
            .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
            .collect();
        let data = self
            .value(x)
            .data()
            .iter()
            .zip(&mask)
            .map(|(v, m)| v * m)
            .collect();
        let value = Tensor::new(self.value(x).shape().to_vec(), data)?;
        Ok(self.push_rounded(value, self.requires(&[x]), Op::Dropout { x, mask }))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let total: f64 = self.value(x).data().iter().sum();
        let mut value = Tensor::scalar(total);
        round_buf(value.data_mut());
        self.push(value, self.requires(&[x]), Op::Sum(x))
    }

    /// Mean binary cross-entropy over labels, stable log-sum-exp form.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &[f64]) -> Result<Var> {
        let n = self.value(logits).numel();
        if targets.len() != n {
            return Err(CafeError::shape(format!(
                "bce_with_logits: {n} logits vs {} targets",
                targets.len()
            )));
        }
        let mut total = 0.0;
        for (&s, &y) in self.value(logits).data().iter().zip(targets) {
            total += s.max(0.0) - s * y + (-s.abs()).exp().ln_1p();
        }
        let mut value = Tensor::scalar(total / n as f64);
        round_buf(value.data_mut());
        Ok(self.push(
            value,
            self.requires(&[logits]),
            Op::BceWithLogits {
                logits,
                targets: targets.to_vec(),
            },
        ))
    }

    /// Expected pairwise co-prescription mass over interacting pairs:
    /// (1/|M|^2) * sum_{i<j in pairs} 2 sigma(s_i) sigma(s_j).
    pub fn ddi_penalty(&mut self, logits: Var, pairs: Rc<Vec<(usize, usize)>>) -> Result<Var> {
        let n = self.value(logits).numel();
        if let Some(&(i, j)) = pairs.iter().find(|&&(i, j)| i >= n || j >= n) {
            return Err(CafeError::shape(format!(
                "ddi_penalty: pair ({i},{j}) out of range for {n} medications"
            )));
        }
        let probs: Vec<f64> = self.value(logits).data().iter().map(|&s| sigmoid(s)).collect();
        let mut total = 0.0;
        for &(i, j) in pairs.iter() {
            total += 2.0 * probs[i] * probs[j];
        }
        let mut value = Tensor::scalar(total / (n * n) as f64);
        round_buf(value.data_mut());
        Ok(self.push(
            value,
            self.requires(&[logits]),
            Op::DdiPenalty { logits, pairs },
        ))
    }

    fn accumulate(&mut self, v: Var, delta: &[f64]) {
        let node = &mut self.nodes[v.0];
        if !node.requires_grad {
            return;
        }
        let grad = node
            .grad
            .get_or_insert_with(|| Tensor::zeros(node.value.shape()));
        for (g, d) in grad.data_mut().iter_mut().zip(delta) {
            *g += d;
        }
    }

    /// Reverse sweep from a scalar output. Gradients of all
    /// `requires_grad` nodes become available through [`Tape::grad`].
    pub fn backward(&mut self, output: Var) -> Result<()> {
        if self.value(output).numel() != 1 {
            return Err(CafeError::shape(format!(
                "backward: output must be scalar, got {:?}",
                self.value(output).shape()
            )));
        }
        for node in self.nodes.iter_mut() {
            node.grad = None;
        }
        self.nodes[output.0].grad = Some(Tensor::scalar(1.0));
        for idx in (0..=output.0).rev() {
            if !self.nodes[idx].requires_grad || self.nodes[idx].grad.is_none() {
                continue;
            }
            self.backprop_node(idx)?;
        }
        Ok(())
    }

    fn backprop_node(&mut self, idx: usize) -> Result<()> {
        let dy = self.nodes[idx].grad.as_ref().unwrap().data().to_vec();
        // Move the op out so its metadata can be read while grads accumulate.
        let op = std::mem::replace(&mut self.nodes[idx].op, Op::Leaf);
        match &op {
            Op::Leaf => {}
            &Op::Add(a, b) => {
                self.accumulate(a, &dy);
                self.accumulate(b, &dy);
            }
            &Op::Mul(a, b) => {
                let da: Vec<f64> = self
                    .value(b)
                    .data()
                    .iter()
                    .zip(&dy)
                    .map(|(bv, d)| bv * d)
                    .collect();
                let db: Vec<f64> = self
                    .value(a)
                    .data()
                    .iter()
                    .zip(&dy)
                    .map(|(av, d)| av * d)
                    .collect();
                self.accumulate(a, &da);
                self.accumulate(b, &db);
            }
            &Op::AddScalar(a) => self.accumulate(a, &dy),
            &Op::ScalarMul(a, s) => {
                let da: Vec<f64> = dy.iter().map(|d| d * s).collect();
                self.accumulate(a, &da);
            }
            &Op::AddScalarVar(x, s) => {
                self.accumulate(x, &dy);
                self.accumulate(s, &[dy.iter().sum()]);
            }
            &Op::MulScalarVar(x, s) => {
                let sv = self.value(s).item();
                let dx: Vec<f64> = dy.iter().map(|d| d * sv).collect();
                let ds: f64 = self
                    .value(x)
                    .data()
                    .iter()
                    .zip(&dy)
                    .map(|(xv, d)| xv * d)
                    .sum();
                self.accumulate(x, &dx);
                self.accumulate(s, &[ds]);
            }
            &Op::Sigmoid(a) => {
                let da: Vec<f64> = self
                    .nodes[idx]
                    .value
                    .data()
                    .iter()
                    .zip(&dy)
                    .map(|(y, d)| d * y * (1.0 - y))
                    .collect();
                self.accumulate(a, &da);
            }
            &Op::Relu(a) => {
                let da: Vec<f64> = self
                    .value(a)
                    .data()
                    .iter()
                    .zip(&dy)
                    .map(|(x, d)| if *x > 0.0 { *d } else { 0.0 })
                    .collect();
                self.accumulate(a, &da);
            }
            &Op::Tanh(a) => {
                let da: Vec<f64> = self
                    .nodes[idx]
                    .value
                    .data()
                    .iter()
                    .zip(&dy)
                    .map(|(y, d)| d * (1.0 - y * y))
                    .collect();
                self.accumulate(a, &da);
            }
            &Op::Linear {
                x,
                w,
                b,
                rows,
                in_dim,
                out_dim,
            } => {
                let dx = kernels::mm_nt(&dy, self.value(w).data(), rows, out_dim, in_dim);
                let dw = kernels::mm_tn(self.value(x).data(), &dy, in_dim, rows, out_dim);
                let mut db = vec![0.0; out_dim];
                for r in 0..rows {
                    for j in 0..out_dim {
                        db[j] += dy[r * out_dim + j];
                    }
                }
                self.accumulate(x, &dx);
                self.accumulate(w, &dw);
                self.accumulate(b, &db);
            }
            &Op::MatMul { a, b, m, k, n } => {
                let da = kernels::mm_nt(&dy, self.value(b).data(), m, n, k);
                let db = kernels::mm_tn(self.value(a).data(), &dy, k, m, n);
                self.accumulate(a, &da);
                self.accumulate(b, &db);
            }
            Op::Conv7x7 { x, k, b, dims, c_out } => {
                let (x, k, b, dims, c_out) = (*x, *k, *b, *dims, *c_out);
                let [bn, c_in, h, w] = dims;
                let patch = c_in * 49;
                // dy in [b, co, h, w]; rearrange to [(b,h,w), co]
                let mut dy_mat = vec![0.0; bn * h * w * c_out];
                for bi in 0..bn {
                    for co in 0..c_out {
                        for p in 0..h * w {
                            dy_mat[(bi * h * w + p) * c_out + co] =
                                dy[(bi * c_out + co) * h * w + p];
                        }
                    }
                }
                let cols = kernels::im2col(self.value(x).data(), bn, c_in, h, w);
                let dk = kernels::mm_tn(&dy_mat, &cols, c_out, bn * h * w, patch);
                let dcols = kernels::mm(&dy_mat, self.value(k).data(), bn * h * w, c_out, patch);
                let dx = kernels::col2im(&dcols, bn, c_in, h, w);
                let mut db = vec![0.0; c_out];
                for r in 0..bn * h * w {
                    for co in 0..c_out {
                        db[co] += dy_mat[r * c_out + co];
                    }
                }
                self.accumulate(x, &dx);
                self.accumulate(k, &dk);
                self.accumulate(b, &db);
            }
            &Op::InstanceNorm { x, gamma, beta, eps } => {
                let xs = self.value(x).shape().to_vec();
                let [bn, c, h, w] = [xs[0], xs[1], xs[2], xs[3]];
                let plane = h * w;
                let (mean, var) = kernels::instance_stats(self.value(x).data(), bn, c, plane);
                let mut dx = vec![0.0; bn * c * plane];
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for bi in 0..bn {
                    for ci in 0..c {
                        let i = bi * c + ci;
                        let inv = 1.0 / (var[i] + eps).sqrt();
                        let g = self.value(gamma).data()[ci];
                        let xd = &self.value(x).data()[i * plane..(i + 1) * plane];
                        let dyd = &dy[i * plane..(i + 1) * plane];
                        let mut sum_dxhat = 0.0;
                        let mut sum_dxhat_xhat = 0.0;
                        for p in 0..plane {
                            let xhat = (xd[p] - mean[i]) * inv;
                            let dxhat = dyd[p] * g;
                            sum_dxhat += dxhat;
                            sum_dxhat_xhat += dxhat * xhat;
                            dgamma[ci] += dyd[p] * xhat;
                            dbeta[ci] += dyd[p];
                        }
                        let npl = plane as f64;
                        for p in 0..plane {
                            let xhat = (xd[p] - mean[i]) * inv;
                            let dxhat = dyd[p] * g;
                            dx[i * plane + p] =
                                inv * (dxhat - sum_dxhat / npl - xhat * sum_dxhat_xhat / npl);
                        }
                    }
                }
                self.accumulate(x, &dx);
                self.accumulate(gamma, &dgamma);
                self.accumulate(beta, &dbeta);
            }
            &Op::Reshape(x) => self.accumulate(x, &dy),
            Op::Permute { x, perm } => {
                let (x, perm) = (*x, perm.clone());
                // gradient is the inverse relocation
                let mut inv = vec![0usize; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                let out_shape = self.nodes[idx].value.shape().to_vec();
                let dx = permute_data(&dy, &out_shape, &inv);
                self.accumulate(x, &dx);
            }
            Op::Concat { parts, dim } => {
                let (parts, dim) = (parts.clone(), *dim);
                let out_shape = self.nodes[idx].value.shape().to_vec();
                let outer: usize = out_shape[..dim].iter().product();
                let inner: usize = out_shape[dim + 1..].iter().product();
                let dim_total = out_shape[dim];
                let mut offset = 0;
                for &p in &parts {
                    let d = self.value(p).shape()[dim];
                    let mut dp = vec![0.0; outer * d * inner];
                    for o in 0..outer {
                        let src_start = (o * dim_total + offset) * inner;
                        dp[o * d * inner..(o + 1) * d * inner]
                            .copy_from_slice(&dy[src_start..src_start + d * inner]);
                    }
                    self.accumulate(p, &dp);
                    offset += d;
                }
            }
            Op::GatherRows { table, indices } => {
                let (table, indices) = (*table, indices.clone());
                let d = self.value(table).shape()[1];
                let mut dt = vec![0.0; self.value(table).numel()];
                for (r, &i) in indices.iter().enumerate() {
                    for j in 0..d {
                        dt[i * d + j] += dy[r * d + j];
                    }
                }
                self.accumulate(table, &dt);
            }
            &Op::PadRows { x, src_rows } => {
                let d = self.value(x).shape()[1];
                let dx = dy[..src_rows * d].to_vec();
                self.accumulate(x, &dx);
            }
            &Op::MeanRows(x) => {
                let xs = self.value(x).shape().to_vec();
                let (k, d) = (xs[0], xs[1]);
                let mut dx = vec![0.0; k * d];
                for r in 0..k {
                    for j in 0..d {
                        dx[r * d + j] = dy[j] / k as f64;
                    }
                }
                self.accumulate(x, &dx);
            }
            Op::MaskedMeanRow { x, row, mask } => {
                let (x, row, mask) = (*x, *row, mask.clone());
                let xs = self.value(x).shape().to_vec();
                let [bn, c, h, w] = [xs[0], xs[1], xs[2], xs[3]];
                let mut dx = vec![0.0; bn * c * h * w];
                for bi in 0..bn {
                    let count: f64 = mask[bi * w..(bi + 1) * w].iter().sum();
                    if count == 0.0 {
                        continue;
                    }
                    for ci in 0..c {
                        let base = ((bi * c + ci) * h + row) * w;
                        for wi in 0..w {
                            dx[base + wi] = mask[bi * w + wi] * dy[bi * c + ci] / count;
                        }
                    }
                }
                self.accumulate(x, &dx);
            }
            &Op::MulBcastChan { x, g } => {
                let xs = self.value(x).shape().to_vec();
                let [bn, c, h, w] = [xs[0], xs[1], xs[2], xs[3]];
                let plane = h * w;
                let mut dx = vec![0.0; bn * c * plane];
                let mut dg = vec![0.0; bn * plane];
                for bi in 0..bn {
                    for ci in 0..c {
                        for p in 0..plane {
                            let i = (bi * c + ci) * plane + p;
                            dx[i] = dy[i] * self.value(g).data()[bi * plane + p];
                            dg[bi * plane + p] += dy[i] * self.value(x).data()[i];
                        }
                    }
                }
                self.accumulate(x, &dx);
                self.accumulate(g, &dg);
            }
            Op::SpmmRows { matrix, rows, e } => {
                let (matrix, rows, e) = (matrix.clone(), rows.clone(), *e);
                let d = self.value(e).shape()[1];
                let mut de = vec![0.0; self.value(e).numel()];
                for (out_r, &i) in rows.iter().enumerate() {
                    for (j, v) in matrix.row(i) {
                        for jj in 0..d {
                            de[j * d + jj] += v * dy[out_r * d + jj];
                        }
                    }
                }
                self.accumulate(e, &de);
            }
            Op::Dropout { x, mask } => {
                let (x, mask) = (*x, mask.clone());
                let dx: Vec<f64> = dy.iter().zip(&mask).map(|(d, m)| d * m).collect();
                self.accumulate(x, &dx);
            }
            &Op::Sum(x) => {
                let dx = vec![dy[0]; self.value(x).numel()];
                self.accumulate(x, &dx);
            }
            Op::BceWithLogits { logits, targets } => {
                let (logits, targets) = (*logits, targets.clone());
                let n = targets.len() as f64;
                let dl: Vec<f64> = self
                    .value(logits)
                    .data()
                    .iter()
                    .zip(&targets)
                    .map(|(&s, &y)| dy[0] * (sigmoid(s) - y) / n)
                    .collect();
                self.accumulate(logits, &dl);
            }
            Op::DdiPenalty { logits, pairs } => {
                let (logits, pairs) = (*logits, pairs.clone());
                let n = self.value(logits).numel();
                let probs: Vec<f64> =
                    self.value(logits).data().iter().map(|&s| sigmoid(s)).collect();
                let mut dl = vec![0.0; n];
                let scale = dy[0] * 2.0 / (n * n) as f64;
                for &(i, j) in pairs.iter() {
                    dl[i] += scale * probs[j] * probs[i] * (1.0 - probs[i]);
                    dl[j] += scale * probs[i] * probs[j] * (1.0 - probs[j]);
                }
                self.accumulate(logits, &dl);
            }
        }
        self.nodes[idx].op = op;
        Ok(())
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn permute_data(data: &[f64], shape: &[usize], perm: &[usize]) -> Vec<f64> {
    let rank = shape.len();
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let mut out = vec![0.0; data.len()];
    let mut idx = vec![0usize; rank];
    for (o, slot) in out.iter_mut().enumerate() {
        // decompose o into output multi-index, map through perm to input offset
        let mut rem = o;
        for d in (0..rank).rev() {
            idx[d] = rem % out_shape[d];
            rem /= out_shape[d];
        }
        let mut src = 0;
        for d in 0..rank {
            src += idx[d] * in_strides[perm[d]];
        }
        *slot = data[src];
    }
    out
}
