//! Tape-based reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! Every operation appends a node to the [`Tape`]; node ids are assigned in
//! creation order, so the tape is always topologically sorted and
//! [`Tape::backward`] is a single reverse sweep. Nodes that do not depend on
//! any `requires_grad` leaf are stored as plain constants and never revisited.
//!
//! A tape and its nodes belong to one thread. Independent tapes share nothing.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Additive guard inside [`Tape::log`].
pub const LOG_EPS: f64 = 1e-12;
/// Default variance guard for [`Tape::layer_norm`].
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul {
        a: usize,
        b: usize,
        trans_b: bool,
    },
    Transpose(usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddRow {
        x: usize,
        bias: usize,
    },
    Scale {
        x: usize,
        c: f64,
    },
    Gelu(usize),
    Softmax {
        x: usize,
        axis: usize,
    },
    LogSoftmax(usize),
    LayerNorm {
        x: usize,
        gain: usize,
        bias: usize,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    MaxOverTokens {
        x: usize,
        argmax: Vec<usize>,
    },
    NormalizeRows {
        x: usize,
        norms: Vec<f64>,
    },
    RowNorms(usize),
    Sum(usize),
    Mean(usize),
    SelectRows {
        x: usize,
        idx: Vec<usize>,
    },
    ConcatRows(Vec<usize>),
    SliceCols {
        x: usize,
        start: usize,
    },
    ConcatCols(Vec<usize>),
    Pick {
        x: usize,
        targets: Vec<usize>,
    },
    Log(usize),
    Reshape(usize),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Append-only record of a forward computation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar loss with respect to every `requires_grad` leaf.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient for a leaf that requires grad; `None` for anything else.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }
}

/// `c = beta * c + op(a) * op(b)` for strided operands, `op(a)` is `m x k`
/// and `op(b)` is `k x n`; `c` is dense row-major `m x n`.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
) {
    assert!(c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.iter_mut().take(m * n).for_each(|v| *v *= beta);
        return;
    }
    assert!((m - 1) * rsa + (k - 1) * csa < a.len());
    assert!((k - 1) * rsb + (n - 1) * csb < b.len());
    // SAFETY: the asserts above bound every offset the kernel touches in
    // `a`, `b` and `c`; `c` is exclusively borrowed and does not alias them.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn gelu_parts(x: f64) -> (f64, f64) {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    let u = C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let y = 0.5 * x * (1.0 + t);
    let du = C * (1.0 + 3.0 * 0.044715 * x * x);
    let dy = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du;
    (y, dy)
}

/// Splits `shape` around `axis` into (outer, axis length, inner).
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn softmax_inplace(data: &mut [f64], outer: usize, len: usize, inner: usize) {
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let mut max = f64::NEG_INFINITY;
            for t in 0..len {
                max = max.max(data[base + t * inner]);
            }
            let mut sum = 0.0;
            for t in 0..len {
                let e = (data[base + t * inner] - max).exp();
                data[base + t * inner] = e;
                sum += e;
            }
            for t in 0..len {
                data[base + t * inner] /= sum;
            }
        }
    }
}

fn accumulate<'g>(grads: &'g mut [Option<Vec<f64>>], id: usize, len: usize) -> &'g mut Vec<f64> {
    grads[id].get_or_insert_with(|| vec![0.0; len])
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn dims2(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        match self.shape(v) {
            &[r, c] => Ok((r, c)),
            s => Err(Error::Shape {
                op,
                lhs: s.to_vec(),
                rhs: vec![],
            }),
        }
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    /// `a · b` for `a: m×k`, `b: k×n`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a · bᵀ` for `a: m×k`, `b: n×k`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (m, k) = self.dims2(a, "matmul")?;
        let (br, bc) = self.dims2(b, "matmul")?;
        let (kb, n) = if trans_b { (bc, br) } else { (br, bc) };
        if k != kb {
            return Err(Error::Shape {
                op: "matmul",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let mut out = vec![0.0; m * n];
        let bs = if trans_b { (1, k) } else { (n, 1) };
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            (k, 1),
            self.value(b).data(),
            bs,
            0.0,
            &mut out,
        );
        let rg = self.rg(&[a, b]);
        Ok(self.push(
            Tensor::new(vec![m, n], out)?,
            Op::MatMul {
                a: a.0,
                b: b.0,
                trans_b,
            },
            rg,
        ))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.dims2(x, "transpose")?;
        let src = self.value(x).data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(vec![c, r], out)?, Op::Transpose(x.0), rg))
    }

    fn zip_with(
        &mut self,
        a: Var,
        b: Var,
        op: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        self.same_shape(a, b, op)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(self.shape(a).to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_with(a, b, "add", |x, y| x + y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Add(a.0, b.0), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_with(a, b, "sub", |x, y| x - y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Sub(a.0, b.0), rg))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_with(a, b, "mul", |x, y| x * y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Mul(a.0, b.0), rg))
    }

    /// Adds a `[d]` vector to every row of an `[..., d]` tensor.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let d = *self.shape(x).last().unwrap_or(&0);
        if self.shape(bias) != [d] {
            return Err(Error::Shape {
                op: "add_row",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(bias).to_vec(),
            });
        }
        let b = self.value(bias).data();
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_mut(d.max(1)) {
            row.iter_mut().zip(b).for_each(|(v, bv)| *v += bv);
        }
        let t = Tensor::new(self.shape(x).to_vec(), out)?;
        let rg = self.rg(&[x, bias]);
        Ok(self.push(
            t,
            Op::AddRow {
                x: x.0,
                bias: bias.0,
            },
            rg,
        ))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let data = self.value(x).data().iter().map(|v| v * c).collect();
        let t = Tensor::new(self.shape(x).to_vec(), data).expect("same shape");
        let rg = self.rg(&[x]);
        self.push(t, Op::Scale { x: x.0, c }, rg)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let data = self
            .value(x)
            .data()
            .iter()
            .map(|&v| gelu_parts(v).0)
            .collect();
        let t = Tensor::new(self.shape(x).to_vec(), data).expect("same shape");
        let rg = self.rg(&[x]);
        self.push(t, Op::Gelu(x.0), rg)
    }

    /// Max-subtracted softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::Shape {
                op: "softmax",
                lhs: shape,
                rhs: vec![axis],
            });
        }
        let (outer, len, inner) = axis_split(&shape, axis);
        let mut data = self.value(x).data().to_vec();
        softmax_inplace(&mut data, outer, len, inner);
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(shape, data)?, Op::Softmax { x: x.0, axis }, rg))
    }

    /// Log-softmax along the last axis.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().ok_or(Error::Shape {
            op: "log_softmax",
            lhs: vec![],
            rhs: vec![],
        })?;
        let mut data = self.value(x).data().to_vec();
        for row in data.chunks_mut(d.max(1)) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            row.iter_mut().for_each(|v| *v -= lse);
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(shape, data)?, Op::LogSoftmax(x.0), rg))
    }

    /// Standardizes each length-`d` row, then applies `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().unwrap_or(&0);
        if d < 2 {
            return Err(Error::Degenerate {
                op: "layer_norm",
                detail: format!("normalized width {d} < 2"),
            });
        }
        for p in [gain, bias] {
            if self.shape(p) != [d] {
                return Err(Error::Shape {
                    op: "layer_norm",
                    lhs: shape,
                    rhs: self.shape(p).to_vec(),
                });
            }
        }
        let src = self.value(x).data();
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let rows = src.len() / d;
        let mut xhat = vec![0.0; src.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; src.len()];
        for r in 0..rows {
            let row = &src[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                let h = (row[j] - mean) * is;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + b[j];
            }
        }
        let rg = self.rg(&[x, gain, bias]);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::LayerNorm {
                x: x.0,
                gain: gain.0,
                bias: bias.0,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    /// Column-wise max of an `N×d` matrix; ties resolve to the lowest row.
    pub fn max_over_tokens(&mut self, x: Var) -> Result<Var> {
        let (n, d) = self.dims2(x, "max_over_tokens")?;
        if n == 0 {
            return Err(Error::EmptyPool {
                op: "max_over_tokens",
            });
        }
        let src = self.value(x).data();
        let mut argmax = vec![0usize; d];
        let mut out = src[..d].to_vec();
        for i in 1..n {
            for j in 0..d {
                if src[i * d + j] > out[j] {
                    out[j] = src[i * d + j];
                    argmax[j] = i;
                }
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::vector(out),
            Op::MaxOverTokens { x: x.0, argmax },
            rg,
        ))
    }

    /// Scales every row (or a single vector) to unit Euclidean norm.
    pub fn normalize_rows(&mut self, x: Var, context: &str) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().unwrap_or(&1);
        let mut data = self.value(x).data().to_vec();
        let mut norms = Vec::with_capacity(data.len() / d.max(1));
        for (i, row) in data.chunks_mut(d.max(1)).enumerate() {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm == 0.0 || !norm.is_finite() {
                return Err(Error::ZeroNorm {
                    context: context.to_string(),
                    index: i,
                });
            }
            row.iter_mut().for_each(|v| *v /= norm);
            norms.push(norm);
        }
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::new(shape, data)?,
            Op::NormalizeRows { x: x.0, norms },
            rg,
        ))
    }

    /// `u·v / (‖u‖‖v‖)` for two vectors of equal length.
    pub fn cosine_similarity(&mut self, u: Var, v: Var) -> Result<Var> {
        self.same_shape(u, v, "cosine_similarity")?;
        let d = self.value(u).numel();
        let u2 = self.reshape(u, vec![1, d])?;
        let v2 = self.reshape(v, vec![1, d])?;
        let un = self.normalize_rows(u2, "cosine_similarity (first argument)")?;
        let vn = self.normalize_rows(v2, "cosine_similarity (second argument)")?;
        let c = self.matmul_t(un, vn)?;
        self.reshape(c, vec![])
    }

    /// Euclidean norm of each row of an `N×d` matrix, as an `[N]` vector.
    pub fn row_norms(&mut self, x: Var) -> Result<Var> {
        let (_, d) = self.dims2(x, "row_norms")?;
        let out = self
            .value(x)
            .data()
            .chunks(d.max(1))
            .map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt())
            .collect();
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::vector(out), Op::RowNorms(x.0), rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x.0), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).numel().max(1) as f64;
        let s = self.value(x).data().iter().sum::<f64>() / n;
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Mean(x.0), rg)
    }

    /// Gathers rows `idx` of an `N×d` matrix (repeats allowed).
    pub fn select_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let (n, d) = self.dims2(x, "select_rows")?;
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            if i >= n {
                return Err(Error::Shape {
                    op: "select_rows",
                    lhs: vec![n, d],
                    rhs: vec![i],
                });
            }
            out.extend_from_slice(&src[i * d..(i + 1) * d]);
        }
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::new(vec![idx.len(), d], out)?,
            Op::SelectRows {
                x: x.0,
                idx: idx.to_vec(),
            },
            rg,
        ))
    }

    /// Stacks matrices with equal column counts vertically.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let (_, d) = self.dims2(parts[0], "concat_rows")?;
        let mut out = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let (r, c) = self.dims2(p, "concat_rows")?;
            if c != d {
                return Err(Error::Shape {
                    op: "concat_rows",
                    lhs: self.shape(parts[0]).to_vec(),
                    rhs: self.shape(p).to_vec(),
                });
            }
            rows += r;
            out.extend_from_slice(self.value(p).data());
        }
        let rg = self.rg(parts);
        Ok(self.push(
            Tensor::new(vec![rows, d], out)?,
            Op::ConcatRows(parts.iter().map(|v| v.0).collect()),
            rg,
        ))
    }

    /// Columns `start..start+len` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (n, d) = self.dims2(x, "slice_cols")?;
        if start + len > d {
            return Err(Error::Shape {
                op: "slice_cols",
                lhs: vec![n, d],
                rhs: vec![start, len],
            });
        }
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(n * len);
        for i in 0..n {
            out.extend_from_slice(&src[i * d + start..i * d + start + len]);
        }
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::new(vec![n, len], out)?,
            Op::SliceCols { x: x.0, start },
            rg,
        ))
    }

    /// Joins matrices with equal row counts horizontally.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let (n, _) = self.dims2(parts[0], "concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.dims2(p, "concat_cols")?;
            if r != n {
                return Err(Error::Shape {
                    op: "concat_cols",
                    lhs: self.shape(parts[0]).to_vec(),
                    rhs: self.shape(p).to_vec(),
                });
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(n * total);
        for i in 0..n {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
            }
        }
        let rg = self.rg(parts);
        Ok(self.push(
            Tensor::new(vec![n, total], out)?,
            Op::ConcatCols(parts.iter().map(|v| v.0).collect()),
            rg,
        ))
    }

    /// `out[i] = x[i, targets[i]]`.
    pub fn pick(&mut self, x: Var, targets: &[usize]) -> Result<Var> {
        let (n, v) = self.dims2(x, "pick")?;
        if targets.len() != n || targets.iter().any(|&t| t >= v) {
            return Err(Error::Shape {
                op: "pick",
                lhs: vec![n, v],
                rhs: vec![targets.len()],
            });
        }
        let src = self.value(x).data();
        let out = targets
            .iter()
            .enumerate()
            .map(|(i, &t)| src[i * v + t])
            .collect();
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::vector(out),
            Op::Pick {
                x: x.0,
                targets: targets.to_vec(),
            },
            rg,
        ))
    }

    /// Guarded natural log, `ln(x + 1e-12)`.
    pub fn log(&mut self, x: Var) -> Var {
        let data = self
            .value(x)
            .data()
            .iter()
            .map(|v| (v + LOG_EPS).ln())
            .collect();
        let t = Tensor::new(self.shape(x).to_vec(), data).expect("same shape");
        let rg = self.rg(&[x]);
        self.push(t, Op::Log(x.0), rg)
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let t = self.value(x).clone().reshaped(shape)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::Reshape(x.0), rg))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        if !lv.data()[0].is_finite() {
            return Err(Error::Contract("backward on a non-finite loss".into()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);

        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else {
                continue;
            };
            self.backprop_node(node, &g, &mut grads);
        }

        let grads = self
            .nodes
            .iter()
            .enumerate()
            .map(|(id, node)| {
                if !(node.requires_grad && matches!(node.op, Op::Leaf)) {
                    return None;
                }
                let shape = node.value.shape().to_vec();
                let data = grads
                    .get_mut(id)
                    .and_then(Option::take)
                    .unwrap_or_else(|| vec![0.0; node.value.numel()]);
                Some(Tensor::new(shape, data).expect("gradient shape"))
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn wants(&self, id: usize) -> bool {
        self.nodes[id].requires_grad
    }

    fn backprop_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul { a, b, trans_b } => {
                let av = &self.nodes[a].value;
                let bv = &self.nodes[b].value;
                let (m, k) = (av.shape()[0], av.shape()[1]);
                let n = out.shape()[1];
                if self.wants(a) {
                    // dA = dC · op(B)ᵀ
                    let bs = if trans_b { (k, 1) } else { (1, n) };
                    let da = accumulate(grads, a, m * k);
                    gemm(m, n, k, g, (n, 1), bv.data(), bs, 1.0, da);
                }
                if self.wants(b) {
                    let db = accumulate(grads, b, k * n);
                    if trans_b {
                        // dB (n×k) = dCᵀ · A
                        gemm(n, m, k, g, (1, n), av.data(), (k, 1), 1.0, db);
                    } else {
                        // dB (k×n) = Aᵀ · dC
                        gemm(k, m, n, av.data(), (1, k), g, (n, 1), 1.0, db);
                    }
                }
            }
            &Op::Transpose(x) => {
                let (r, c) = (out.shape()[1], out.shape()[0]);
                let dx = accumulate(grads, x, r * c);
                for i in 0..r {
                    for j in 0..c {
                        dx[i * c + j] += g[j * r + i];
                    }
                }
            }
            &Op::Add(a, b) => {
                for (id, sign) in [(a, 1.0), (b, 1.0)] {
                    if self.wants(id) {
                        let d = accumulate(grads, id, g.len());
                        d.iter_mut().zip(g).for_each(|(d, g)| *d += sign * g);
                    }
                }
            }
            &Op::Sub(a, b) => {
                for (id, sign) in [(a, 1.0), (b, -1.0)] {
                    if self.wants(id) {
                        let d = accumulate(grads, id, g.len());
                        d.iter_mut().zip(g).for_each(|(d, g)| *d += sign * g);
                    }
                }
            }
            &Op::Mul(a, b) => {
                for (id, other) in [(a, b), (b, a)] {
                    if self.wants(id) {
                        let o = self.nodes[other].value.data();
                        let d = accumulate(grads, id, g.len());
                        for i in 0..g.len() {
                            d[i] += g[i] * o[i];
                        }
                    }
                }
            }
            &Op::AddRow { x, bias } => {
                if self.wants(x) {
                    let d = accumulate(grads, x, g.len());
                    d.iter_mut().zip(g).for_each(|(d, g)| *d += g);
                }
                if self.wants(bias) {
                    let w = self.nodes[bias].value.numel();
                    let d = accumulate(grads, bias, w);
                    for row in g.chunks(w.max(1)) {
                        d.iter_mut().zip(row).for_each(|(d, g)| *d += g);
                    }
                }
            }
            &Op::Scale { x, c } => {
                let d = accumulate(grads, x, g.len());
                d.iter_mut().zip(g).for_each(|(d, g)| *d += c * g);
            }
            &Op::Gelu(x) => {
                let xv = self.nodes[x].value.data();
                let d = accumulate(grads, x, g.len());
                for i in 0..g.len() {
                    d[i] += g[i] * gelu_parts(xv[i]).1;
                }
            }
            &Op::Softmax { x, axis } => {
                let (outer, len, inner) = axis_split(out.shape(), axis);
                let y = out.data();
                let d = accumulate(grads, x, g.len());
                for o in 0..outer {
                    for i in 0..inner {
                        let base = o * len * inner + i;
                        let dot: f64 = (0..len)
                            .map(|t| g[base + t * inner] * y[base + t * inner])
                            .sum();
                        for t in 0..len {
                            let p = base + t * inner;
                            d[p] += y[p] * (g[p] - dot);
                        }
                    }
                }
            }
            &Op::LogSoftmax(x) => {
                let w = *out.shape().last().unwrap();
                let y = out.data();
                let d = accumulate(grads, x, g.len());
                for r in 0..g.len() / w.max(1) {
                    let gs: f64 = g[r * w..(r + 1) * w].iter().sum();
                    for j in 0..w {
                        let p = r * w + j;
                        d[p] += g[p] - y[p].exp() * gs;
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let (x, gain, bias) = (*x, *gain, *bias);
                let dw = *out.shape().last().unwrap();
                let gv = self.nodes[gain].value.data();
                let rows = g.len() / dw;
                if self.wants(gain) {
                    let d = accumulate(grads, gain, dw);
                    for r in 0..rows {
                        for j in 0..dw {
                            d[j] += g[r * dw + j] * xhat[r * dw + j];
                        }
                    }
                }
                if self.wants(bias) {
                    let d = accumulate(grads, bias, dw);
                    for r in 0..rows {
                        for j in 0..dw {
                            d[j] += g[r * dw + j];
                        }
                    }
                }
                if self.wants(x) {
                    let d = accumulate(grads, x, g.len());
                    let nf = dw as f64;
                    for r in 0..rows {
                        let s = r * dw;
                        let mut sum_dh = 0.0;
                        let mut sum_dh_h = 0.0;
                        for j in 0..dw {
                            let dh = g[s + j] * gv[j];
                            sum_dh += dh;
                            sum_dh_h += dh * xhat[s + j];
                        }
                        for j in 0..dw {
                            let dh = g[s + j] * gv[j];
                            d[s + j] +=
                                inv_std[r] / nf * (nf * dh - sum_dh - xhat[s + j] * sum_dh_h);
                        }
                    }
                }
            }
            Op::MaxOverTokens { x, argmax } => {
                let x = *x;
                let dw = argmax.len();
                let d = accumulate(grads, x, self.nodes[x].value.numel());
                for (j, &i) in argmax.iter().enumerate() {
                    d[i * dw + j] += g[j];
                }
            }
            Op::NormalizeRows { x, norms } => {
                let x = *x;
                let dw = *out.shape().last().unwrap_or(&1);
                let y = out.data();
                let d = accumulate(grads, x, g.len());
                for (r, &norm) in norms.iter().enumerate() {
                    let s = r * dw;
                    let dot: f64 = (0..dw).map(|j| y[s + j] * g[s + j]).sum();
                    for j in 0..dw {
                        d[s + j] += (g[s + j] - y[s + j] * dot) / norm;
                    }
                }
            }
            &Op::RowNorms(x) => {
                let xv = self.nodes[x].value.data();
                let dw = self.nodes[x].value.shape()[1];
                let norms = out.data();
                let d = accumulate(grads, x, xv.len());
                for (r, &norm) in norms.iter().enumerate() {
                    if norm > 0.0 {
                        for j in 0..dw {
                            d[r * dw + j] += g[r] * xv[r * dw + j] / norm;
                        }
                    }
                }
            }
            &Op::Sum(x) => {
                let n = self.nodes[x].value.numel();
                let d = accumulate(grads, x, n);
                d.iter_mut().for_each(|v| *v += g[0]);
            }
            &Op::Mean(x) => {
                let n = self.nodes[x].value.numel();
                let d = accumulate(grads, x, n);
                let s = g[0] / n.max(1) as f64;
                d.iter_mut().for_each(|v| *v += s);
            }
            Op::SelectRows { x, idx } => {
                let x = *x;
                let dw = out.shape()[1];
                let d = accumulate(grads, x, self.nodes[x].value.numel());
                for (r, &i) in idx.iter().enumerate() {
                    for j in 0..dw {
                        d[i * dw + j] += g[r * dw + j];
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.nodes[p].value.numel();
                    if self.wants(p) {
                        let d = accumulate(grads, p, n);
                        d.iter_mut()
                            .zip(&g[offset..offset + n])
                            .for_each(|(d, g)| *d += g);
                    }
                    offset += n;
                }
            }
            &Op::SliceCols { x, start } => {
                let (n, len) = (out.shape()[0], out.shape()[1]);
                let dw = self.nodes[x].value.shape()[1];
                let d = accumulate(grads, x, n * dw);
                for i in 0..n {
                    for j in 0..len {
                        d[i * dw + start + j] += g[i * len + j];
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let n = out.shape()[0];
                let total = out.shape()[1];
                let mut col = 0;
                for &p in parts {
                    let w = self.nodes[p].value.shape()[1];
                    if self.wants(p) {
                        let d = accumulate(grads, p, n * w);
                        for i in 0..n {
                            for j in 0..w {
                                d[i * w + j] += g[i * total + col + j];
                            }
                        }
                    }
                    col += w;
                }
            }
            Op::Pick { x, targets } => {
                let x = *x;
                let v = self.nodes[x].value.shape()[1];
                let d = accumulate(grads, x, targets.len() * v);
                for (i, &t) in targets.iter().enumerate() {
                    d[i * v + t] += g[i];
                }
            }
            &Op::Log(x) => {
                let xv = self.nodes[x].value.data();
                let d = accumulate(grads, x, g.len());
                for i in 0..g.len() {
                    d[i] += g[i] / (xv[i] + LOG_EPS);
                }
            }
            &Op::Reshape(x) => {
                let d = accumulate(grads, x, g.len());
                d.iter_mut().zip(g).for_each(|(d, g)| *d += g);
            }
        }
    }
}
