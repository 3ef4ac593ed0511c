//! Reverse-mode differentiation over dense f64 tensors.
//!
//! A `Tape` records every operation of one forward pass; `backward` walks the
//! record in reverse and accumulates gradients. Values are immutable once
//! pushed. The contract this module must satisfy is finite-difference
//! agreement (see `numerics::grad_check`), not any particular internal form.

use crate::tensor::{dot, matmul, matmul_nt, matmul_tn, Tensor};

const GELU_C: f64 = 0.7978845608028654; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    MulElem(usize, usize),
    DivElem(usize, usize),
    Scale(usize, f64),
    AddScalarC(usize),
    /// broadcast a length-1 var over all elements of `a`
    AddB(usize, usize),
    MulB(usize, usize),
    Matmul(usize, usize),
    /// C = A · Bᵀ
    MatmulNT(usize, usize),
    /// y_ij = a_ij + b_j, b a vector var
    AddRowBroadcast(usize, usize),
    /// y_ij = a_ij + c_j for a constant c (no gradient to c)
    AddRowsConst(usize),
    Gelu(usize),
    Relu(usize),
    Log(usize),
    Exp(usize),
    Sqrt(usize),
    Recip(usize),
    SumAll(usize),
    MeanAll(usize),
    ConcatRows(Vec<usize>),
    SliceRows(usize, usize),
    SliceCols(usize, usize, usize),
    ConcatCols(Vec<usize>),
    RowNormalize(usize),
    SoftmaxRows(usize),
    LogSumExpRows(usize),
    SelectElems(usize, Vec<usize>),
    LayerNormRows {
        x: usize,
        gamma: usize,
        beta: usize,
        eps: f64,
    },
}

struct Node {
    value: Tensor,
    op: Op,
}

pub struct Tape {
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
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

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        // a leaf whose gradient is simply never read
        self.push(t, Op::Leaf)
    }

    fn zip(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(ta.len(), tb.len(), "elementwise op on mismatched sizes");
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| f(*x, *y)).collect();
        let shape = ta.shape().to_vec();
        self.push(Tensor::new(shape, data), op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, |x, y| x + y, Op::Add(a.0, b.0))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, |x, y| x - y, Op::Sub(a.0, b.0))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, |x, y| x * y, Op::MulElem(a.0, b.0))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, |x, y| x / y, Op::DivElem(a.0, b.0))
    }

    fn map(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let ta = &self.nodes[a.0].value;
        let data = ta.data().iter().map(|x| f(*x)).collect();
        let shape = ta.shape().to_vec();
        self.push(Tensor::new(shape, data), op)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.map(a, |x| x * c, Op::Scale(a.0, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        self.map(a, |x| x + c, Op::AddScalarC(a.0))
    }

    /// Broadcast-add a length-1 var to every element.
    pub fn add_b(&mut self, a: Var, s: Var) -> Var {
        let sv = self.nodes[s.0].value.item();
        self.map(a, |x| x + sv, Op::AddB(a.0, s.0))
    }

    /// Broadcast-multiply by a length-1 var.
    pub fn mul_b(&mut self, a: Var, s: Var) -> Var {
        let sv = self.nodes[s.0].value.item();
        self.map(a, |x| x * sv, Op::MulB(a.0, s.0))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = matmul(&self.nodes[a.0].value, &self.nodes[b.0].value);
        self.push(v, Op::Matmul(a.0, b.0))
    }

    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let v = matmul_nt(&self.nodes[a.0].value, &self.nodes[b.0].value);
        self.push(v, Op::MatmulNT(a.0, b.0))
    }

    /// Add vector var `b` (length n) to every row of `a` (m×n).
    pub fn add_row_broadcast(&mut self, a: Var, b: Var) -> Var {
        let ta = &self.nodes[a.0].value;
        let tb = &self.nodes[b.0].value;
        let (m, n) = (ta.rows(), ta.cols());
        assert_eq!(tb.len(), n);
        let mut data = ta.data().to_vec();
        for i in 0..m {
            for j in 0..n {
                data[i * n + j] += tb.data()[j];
            }
        }
        self.push(Tensor::new(ta.shape().to_vec(), data), Op::AddRowBroadcast(a.0, b.0))
    }

    /// Add a constant vector (length n) to every row; no gradient to the constant.
    pub fn add_rows_const(&mut self, a: Var, c: &[f64]) -> Var {
        let ta = &self.nodes[a.0].value;
        let (m, n) = (ta.rows(), ta.cols());
        assert_eq!(c.len(), n);
        let mut data = ta.data().to_vec();
        for i in 0..m {
            for j in 0..n {
                data[i * n + j] += c[j];
            }
        }
        self.push(Tensor::new(ta.shape().to_vec(), data), Op::AddRowsConst(a.0))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        self.map(a, gelu_f, Op::Gelu(a.0))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.map(a, |x| x.max(0.0), Op::Relu(a.0))
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.map(a, |x| x.ln(), Op::Log(a.0))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.map(a, |x| x.exp(), Op::Exp(a.0))
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.map(a, |x| x.sqrt(), Op::Sqrt(a.0))
    }

    pub fn recip(&mut self, a: Var) -> Var {
        self.map(a, |x| 1.0 / x, Op::Recip(a.0))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s: f64 = self.nodes[a.0].value.data().iter().sum();
        self.push(Tensor::scalar(s), Op::SumAll(a.0))
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let t = &self.nodes[a.0].value;
        let s: f64 = t.data().iter().sum();
        let n = t.len() as f64;
        self.push(Tensor::scalar(s / n), Op::MeanAll(a.0))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let cols = self.nodes[parts[0].0].value.cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            let t = &self.nodes[p.0].value;
            assert_eq!(t.cols(), cols);
            rows += t.rows();
            data.extend_from_slice(t.data());
        }
        self.push(
            Tensor::new(vec![rows, cols], data),
            Op::ConcatRows(parts.iter().map(|v| v.0).collect()),
        )
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let t = &self.nodes[a.0].value;
        let n = t.cols();
        let data = t.data()[start * n..(start + len) * n].to_vec();
        self.push(Tensor::new(vec![len, n], data), Op::SliceRows(a.0, start))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let t = &self.nodes[a.0].value;
        let (m, n) = (t.rows(), t.cols());
        let mut data = Vec::with_capacity(m * len);
        for i in 0..m {
            data.extend_from_slice(&t.data()[i * n + start..i * n + start + len]);
        }
        self.push(Tensor::new(vec![m, len], data), Op::SliceCols(a.0, start, len))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let m = self.nodes[parts[0].0].value.rows();
        let total: usize = parts.iter().map(|p| self.nodes[p.0].value.cols()).sum();
        let mut data = Vec::with_capacity(m * total);
        for i in 0..m {
            for p in parts {
                let t = &self.nodes[p.0].value;
                assert_eq!(t.rows(), m);
                data.extend_from_slice(t.row(i));
            }
        }
        self.push(
            Tensor::new(vec![m, total], data),
            Op::ConcatCols(parts.iter().map(|v| v.0).collect()),
        )
    }

    /// L2-normalize each row. Zero rows are rejected upstream.
    pub fn row_normalize(&mut self, a: Var) -> Var {
        let t = &self.nodes[a.0].value;
        let (m, n) = (t.rows(), t.cols());
        let mut data = Vec::with_capacity(m * n);
        for i in 0..m {
            let r = t.row(i);
            let nrm = dot(r, r).sqrt();
            data.extend(r.iter().map(|v| v / nrm));
        }
        self.push(Tensor::new(t.shape().to_vec(), data), Op::RowNormalize(a.0))
    }

    /// Row-wise softmax; tolerates -inf entries (masked-out keys).
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let t = &self.nodes[a.0].value;
        let (m, n) = (t.rows(), t.cols());
        let mut data = Vec::with_capacity(m * n);
        for i in 0..m {
            let r = t.row(i);
            let mx = r.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = r.iter().map(|v| (v - mx).exp()).collect();
            let z: f64 = exps.iter().sum();
            data.extend(exps.iter().map(|e| e / z));
        }
        self.push(Tensor::new(t.shape().to_vec(), data), Op::SoftmaxRows(a.0))
    }

    /// Row-wise log-sum-exp, returns a length-m vector.
    pub fn logsumexp_rows(&mut self, a: Var) -> Var {
        let t = &self.nodes[a.0].value;
        let m = t.rows();
        let mut data = Vec::with_capacity(m);
        for i in 0..m {
            let r = t.row(i);
            let mx = r.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = r.iter().map(|v| (v - mx).exp()).sum();
            data.push(mx + z.ln());
        }
        self.push(Tensor::new(vec![m], data), Op::LogSumExpRows(a.0))
    }

    /// Gather flat elements by index into a vector.
    pub fn select_elems(&mut self, a: Var, idxs: &[usize]) -> Var {
        let t = &self.nodes[a.0].value;
        let data: Vec<f64> = idxs.iter().map(|&i| t.data()[i]).collect();
        self.push(Tensor::new(vec![idxs.len()], data), Op::SelectElems(a.0, idxs.to_vec()))
    }

    /// Per-row layer normalization with learnable gain/offset vectors.
    pub fn layer_norm_rows(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let t = &self.nodes[x.0].value;
        let g = &self.nodes[gamma.0].value;
        let b = &self.nodes[beta.0].value;
        let (m, n) = (t.rows(), t.cols());
        assert_eq!(g.len(), n);
        assert_eq!(b.len(), n);
        let mut data = Vec::with_capacity(m * n);
        for i in 0..m {
            let r = t.row(i);
            let mu = r.iter().sum::<f64>() / n as f64;
            let var = r.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n as f64;
            let s = (var + eps).sqrt();
            for j in 0..n {
                data.push(g.data()[j] * (r[j] - mu) / s + b.data()[j]);
            }
        }
        self.push(
            Tensor::new(t.shape().to_vec(), data),
            Op::LayerNormRows { x: x.0, gamma: gamma.0, beta: beta.0, eps },
        )
    }

    /// Run backpropagation from a scalar root. Returns per-node gradients.
    pub fn backward(&self, root: Var) -> Grads {
        assert_eq!(self.nodes[root.0].value.len(), 1, "backward root must be scalar");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::scalar(1.0));

        for idx in (0..=root.0).rev() {
            let g = match grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {
                    grads[idx] = Some(g);
                }
                Op::Add(a, b) => {
                    self.accum(&mut grads, *a, g.data());
                    self.accum(&mut grads, *b, g.data());
                }
                Op::Sub(a, b) => {
                    self.accum(&mut grads, *a, g.data());
                    let neg: Vec<f64> = g.data().iter().map(|v| -v).collect();
                    self.accum(&mut grads, *b, &neg);
                }
                Op::MulElem(a, b) => {
                    let (va, vb) = (&self.nodes[*a].value, &self.nodes[*b].value);
                    let da: Vec<f64> =
                        g.data().iter().zip(vb.data()).map(|(g, y)| g * y).collect();
                    let db: Vec<f64> =
                        g.data().iter().zip(va.data()).map(|(g, x)| g * x).collect();
                    self.accum(&mut grads, *a, &da);
                    self.accum(&mut grads, *b, &db);
                }
                Op::DivElem(a, b) => {
                    let (va, vb) = (&self.nodes[*a].value, &self.nodes[*b].value);
                    let da: Vec<f64> =
                        g.data().iter().zip(vb.data()).map(|(g, y)| g / y).collect();
                    let db: Vec<f64> = g
                        .data()
                        .iter()
                        .zip(va.data().iter().zip(vb.data()))
                        .map(|(g, (x, y))| -g * x / (y * y))
                        .collect();
                    self.accum(&mut grads, *a, &da);
                    self.accum(&mut grads, *b, &db);
                }
                Op::Scale(a, c) => {
                    let da: Vec<f64> = g.data().iter().map(|v| v * c).collect();
                    self.accum(&mut grads, *a, &da);
                }
                Op::AddScalarC(a) | Op::AddRowsConst(a) => {
                    self.accum(&mut grads, *a, g.data());
                }
                Op::AddB(a, s) => {
                    self.accum(&mut grads, *a, g.data());
                    let total: f64 = g.data().iter().sum();
                    self.accum(&mut grads, *s, &[total]);
                }
                Op::MulB(a, s) => {
                    let sv = self.nodes[*s].value.item();
                    let da: Vec<f64> = g.data().iter().map(|v| v * sv).collect();
                    self.accum(&mut grads, *a, &da);
                    let ds: f64 = g
                        .data()
                        .iter()
                        .zip(self.nodes[*a].value.data())
                        .map(|(g, x)| g * x)
                        .sum();
                    self.accum(&mut grads, *s, &[ds]);
                }
                Op::Matmul(a, b) => {
                    let gm = self.as_matrix(&g, node.value.rows(), node.value.cols());
                    let da = matmul_nt(&gm, &self.nodes[*b].value);
                    let db = matmul_tn(&self.nodes[*a].value, &gm);
                    self.accum(&mut grads, *a, da.data());
                    self.accum(&mut grads, *b, db.data());
                }
                Op::MatmulNT(a, b) => {
                    let gm = self.as_matrix(&g, node.value.rows(), node.value.cols());
                    let da = matmul(&gm, &self.nodes[*b].value);
                    let db = matmul_tn(&gm, &self.nodes[*a].value);
                    self.accum(&mut grads, *a, da.data());
                    self.accum(&mut grads, *b, db.data());
                }
                Op::AddRowBroadcast(a, b) => {
                    self.accum(&mut grads, *a, g.data());
                    let n = self.nodes[*b].value.len();
                    let m = node.value.rows();
                    let mut db = vec![0.0; n];
                    for i in 0..m {
                        for j in 0..n {
                            db[j] += g.data()[i * n + j];
                        }
                    }
                    self.accum(&mut grads, *b, &db);
                }
                Op::Gelu(a) => {
                    let da: Vec<f64> = g
                        .data()
                        .iter()
                        .zip(self.nodes[*a].value.data())
                        .map(|(g, x)| g * gelu_df(*x))
                        .collect();
                    self.accum(&mut grads, *a, &da);
                }
                Op::Relu(a) => {
                    let da: Vec<f64> = g
                        .data()
                        .iter()
                        .zip(self.nodes[*a].value.data())
                        .map(|(g, x)| if *x > 0.0 { *g } else { 0.0 })
                        .collect();
                    self.accum(&mut grads, *a, &da);
                }
                Op::Log(a) => {
                    let da: Vec<f64> = g
                        .data()
                        .iter()
                        .zip(self.nodes[*a].value.data())
                        .map(|(g, x)| g / x)
                        .collect();
                    self.accum(&mut grads, *a, &da);
                }
                Op::Exp(a) => {
                    let da: Vec<f64> =
                        g.data().iter().zip(node.value.data()).map(|(g, y)| g * y).collect();
                    self.accum(&mut grads, *a, &da);
                }
                Op::Sqrt(a) => {
                    let da: Vec<f64> = g
                        .data()
                        .iter()
                        .zip(node.value.data())
                        .map(|(g, y)| g / (2.0 * y))
                        .collect();
                    self.accum(&mut grads, *a, &da);
                }
                Op::Recip(a) => {
                    let da: Vec<f64> = g
                        .data()
                        .iter()
                        .zip(node.value.data())
                        .map(|(g, y)| -g * y * y)
                        .collect();
                    self.accum(&mut grads, *a, &da);
                }
                Op::SumAll(a) => {
                    let g0 = g.item();
                    let da = vec![g0; self.nodes[*a].value.len()];
                    self.accum(&mut grads, *a, &da);
                }
                Op::MeanAll(a) => {
                    let n = self.nodes[*a].value.len();
                    let g0 = g.item() / n as f64;
                    let da = vec![g0; n];
                    self.accum(&mut grads, *a, &da);
                }
                Op::ConcatRows(parts) => {
                    let n = node.value.cols();
                    let mut offset = 0;
                    for p in parts {
                        let rows = self.nodes[*p].value.rows();
                        self.accum(&mut grads, *p, &g.data()[offset..offset + rows * n]);
                        offset += rows * n;
                    }
                }
                Op::SliceRows(a, start) => {
                    let n = self.nodes[*a].value.cols();
                    let mut da = vec![0.0; self.nodes[*a].value.len()];
                    da[start * n..start * n + g.len()].copy_from_slice(g.data());
                    self.accum(&mut grads, *a, &da);
                }
                Op::SliceCols(a, start, len) => {
                    let (m, n) = (self.nodes[*a].value.rows(), self.nodes[*a].value.cols());
                    let mut da = vec![0.0; m * n];
                    for i in 0..m {
                        for j in 0..*len {
                            da[i * n + start + j] = g.data()[i * len + j];
                        }
                    }
                    self.accum(&mut grads, *a, &da);
                }
                Op::ConcatCols(parts) => {
                    let m = node.value.rows();
                    let total = node.value.cols();
                    let mut offset = 0;
                    for p in parts {
                        let pc = self.nodes[*p].value.cols();
                        let mut dp = vec![0.0; m * pc];
                        for i in 0..m {
                            for j in 0..pc {
                                dp[i * pc + j] = g.data()[i * total + offset + j];
                            }
                        }
                        self.accum(&mut grads, *p, &dp);
                        offset += pc;
                    }
                }
                Op::RowNormalize(a) => {
                    let x = &self.nodes[*a].value;
                    let y = &node.value;
                    let (m, n) = (x.rows(), x.cols());
                    let mut da = vec![0.0; m * n];
                    for i in 0..m {
                        let xr = x.row(i);
                        let yr = y.row(i);
                        let gr = &g.data()[i * n..(i + 1) * n];
                        let nrm = dot(xr, xr).sqrt();
                        let gy = dot(gr, yr);
                        for j in 0..n {
                            da[i * n + j] = (gr[j] - gy * yr[j]) / nrm;
                        }
                    }
                    self.accum(&mut grads, *a, &da);
                }
                Op::SoftmaxRows(a) => {
                    let y = &node.value;
                    let (m, n) = (y.rows(), y.cols());
                    let mut da = vec![0.0; m * n];
                    for i in 0..m {
                        let yr = y.row(i);
                        let gr = &g.data()[i * n..(i + 1) * n];
                        let s = dot(gr, yr);
                        for j in 0..n {
                            da[i * n + j] = yr[j] * (gr[j] - s);
                        }
                    }
                    self.accum(&mut grads, *a, &da);
                }
                Op::LogSumExpRows(a) => {
                    let x = &self.nodes[*a].value;
                    let (m, n) = (x.rows(), x.cols());
                    let mut da = vec![0.0; m * n];
                    for i in 0..m {
                        let r = x.row(i);
                        let lse = node.value.data()[i];
                        let gi = g.data()[i];
                        for j in 0..n {
                            // softmax weight; exp(-inf - lse) = 0 as required
                            da[i * n + j] = gi * (r[j] - lse).exp();
                        }
                    }
                    self.accum(&mut grads, *a, &da);
                }
                Op::SelectElems(a, idxs) => {
                    let mut da = vec![0.0; self.nodes[*a].value.len()];
                    for (k, &i) in idxs.iter().enumerate() {
                        da[i] += g.data()[k];
                    }
                    self.accum(&mut grads, *a, &da);
                }
                Op::LayerNormRows { x, gamma, beta, eps } => {
                    let xv = &self.nodes[*x].value;
                    let gv = &self.nodes[*gamma].value;
                    let (m, n) = (xv.rows(), xv.cols());
                    let mut dx = vec![0.0; m * n];
                    let mut dgamma = vec![0.0; n];
                    let mut dbeta = vec![0.0; n];
                    for i in 0..m {
                        let r = xv.row(i);
                        let gr = &g.data()[i * n..(i + 1) * n];
                        let mu = r.iter().sum::<f64>() / n as f64;
                        let var = r.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n as f64;
                        let s = (var + eps).sqrt();
                        let xhat: Vec<f64> = r.iter().map(|v| (v - mu) / s).collect();
                        let h: Vec<f64> =
                            gr.iter().zip(gv.data()).map(|(g, gm)| g * gm).collect();
                        let mean_h = h.iter().sum::<f64>() / n as f64;
                        let mean_hx =
                            h.iter().zip(&xhat).map(|(h, x)| h * x).sum::<f64>() / n as f64;
                        for j in 0..n {
                            dx[i * n + j] = (h[j] - mean_h - xhat[j] * mean_hx) / s;
                            dgamma[j] += gr[j] * xhat[j];
                            dbeta[j] += gr[j];
                        }
                    }
                    self.accum(&mut grads, *x, &dx);
                    self.accum(&mut grads, *gamma, &dgamma);
                    self.accum(&mut grads, *beta, &dbeta);
                }
            }
        }
        Grads { grads }
    }

    fn accum(&self, grads: &mut [Option<Tensor>], idx: usize, contribution: &[f64]) {
        match &mut grads[idx] {
            Some(t) => {
                for (g, c) in t.data_mut().iter_mut().zip(contribution) {
                    *g += c;
                }
            }
            None => {
                grads[idx] = Some(Tensor::new(
                    self.nodes[idx].value.shape().to_vec(),
                    contribution.to_vec(),
                ));
            }
        }
    }

    fn as_matrix(&self, g: &Tensor, m: usize, n: usize) -> Tensor {
        Tensor::new(vec![m, n], g.data().to_vec())
    }
}

pub struct Grads {
    grads: Vec<Option<Tensor>>,
}

impl Grads {
    /// Gradient of the root with respect to `v`; zero if `v` did not
    /// contribute to the root.
    pub fn get(&self, tape: &Tape, v: Var) -> Tensor {
        match &self.grads[v.0] {
            Some(t) => t.clone(),
            None => Tensor::zeros(tape.value(v).shape().to_vec()),
        }
    }
}

fn gelu_f(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_df(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}
