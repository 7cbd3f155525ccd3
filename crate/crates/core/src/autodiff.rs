//! A small reverse-mode autodiff tape over dense `f64` matrices.
//!
//! Every value is a row-major 2-D [`Mat`]. Operations append a node to the
//! [`Tape`]; [`Tape::backward`] walks the nodes in reverse and accumulates
//! gradients for every node that depends on a tracked leaf.

use std::rc::Rc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, v: f64) -> Self {
        Self {
            rows,
            cols,
            data: vec![v; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(rows * cols, data.len(), "Mat::from_vec shape");
        Self { rows, cols, data }
    }

    pub fn scalar(v: f64) -> Self {
        Self::from_vec(1, 1, vec![v])
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn transpose(&self) -> Mat {
        let mut out = Mat::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    pub fn matmul(&self, b: &Mat) -> Mat {
        matmul_nn(self, b)
    }

    fn add_assign(&mut self, other: &Mat) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

/// `a · b`
pub fn matmul_nn(a: &Mat, b: &Mat) -> Mat {
    assert_eq!(a.cols, b.rows, "matmul inner dimension");
    let mut out = Mat::zeros(a.rows, b.cols);
    let n = b.cols;
    for i in 0..a.rows {
        let out_row = &mut out.data[i * n..(i + 1) * n];
        for p in 0..a.cols {
            let aip = a.data[i * a.cols + p];
            if aip == 0.0 {
                continue;
            }
            let b_row = &b.data[p * n..(p + 1) * n];
            for (o, bv) in out_row.iter_mut().zip(b_row) {
                *o += aip * bv;
            }
        }
    }
    out
}

/// `aᵀ · b`
pub fn matmul_tn(a: &Mat, b: &Mat) -> Mat {
    assert_eq!(a.rows, b.rows, "matmul_tn inner dimension");
    let mut out = Mat::zeros(a.cols, b.cols);
    let n = b.cols;
    for i in 0..a.rows {
        let b_row = &b.data[i * n..(i + 1) * n];
        for p in 0..a.cols {
            let aip = a.data[i * a.cols + p];
            if aip == 0.0 {
                continue;
            }
            let out_row = &mut out.data[p * n..(p + 1) * n];
            for (o, bv) in out_row.iter_mut().zip(b_row) {
                *o += aip * bv;
            }
        }
    }
    out
}

/// `a · bᵀ`
pub fn matmul_nt(a: &Mat, b: &Mat) -> Mat {
    assert_eq!(a.cols, b.cols, "matmul_nt inner dimension");
    let mut out = Mat::zeros(a.rows, b.rows);
    for i in 0..a.rows {
        let ar = a.row(i);
        for j in 0..b.rows {
            out.data[i * b.rows + j] = ar.iter().zip(b.row(j)).map(|(x, y)| x * y).sum();
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unary {
    Gelu,
    Sigmoid,
    Tanh,
    Softplus,
    Exp,
    Log,
    Abs,
    Square,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Unary {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Unary::Gelu => 0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh()),
            Unary::Sigmoid => sigmoid(x),
            Unary::Tanh => x.tanh(),
            Unary::Softplus => softplus(x),
            Unary::Exp => x.exp(),
            Unary::Log => x.ln(),
            Unary::Abs => x.abs(),
            Unary::Square => x * x,
        }
    }

    /// Derivative given input `x` and output `y`.
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Unary::Gelu => {
                let u = GELU_C * (x + 0.044715 * x * x * x);
                let t = u.tanh();
                let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
                0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
            }
            Unary::Sigmoid => y * (1.0 - y),
            Unary::Tanh => 1.0 - y * y,
            Unary::Softplus => sigmoid(x),
            Unary::Exp => y,
            Unary::Log => 1.0 / x,
            Unary::Abs => {
                if x > 0.0 {
                    1.0
                } else if x < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            }
            Unary::Square => 2.0 * x,
        }
    }
}

/// Geometry of a 2-D convolution over a `C × (H·W)` feature map.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.pad - self.kernel) / self.stride + 1
    }
}

/// Fixed sparse linear map over columns: `out[:, o] = Σ w · in[:, i]`.
#[derive(Clone, Debug)]
pub struct ColumnMap {
    pub in_cols: usize,
    pub taps: Vec<Vec<(usize, f64)>>,
}

type BackwardFn = Box<dyn Fn(&Mat) -> Vec<Mat>>;

enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    AddCol(Var, Var),
    Scale(Var, f64),
    Offset(Var),
    Unary(Var, Unary),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Mat,
        inv_std: Vec<f64>,
    },
    Softmax(Var),
    LogSoftmax(Var),
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    Sum(Var),
    RowSum(Var),
    RowNormalize(Var),
    Rope {
        x: Var,
        angles: Rc<Mat>,
        head_dim: usize,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        geom: ConvGeom,
        cols: Mat,
    },
    Resample(Var, Rc<ColumnMap>),
    Custom(Vec<Var>, BackwardFn),
}

struct Node {
    value: Mat,
    op: Op,
    tracked: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Grads {
    grads: Vec<Option<Mat>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Mat> {
        self.grads[v.0].as_ref()
    }

    /// Gradient of `v`, zeros if nothing flowed into it.
    pub fn get_or_zeros(&self, v: Var, shape: (usize, usize)) -> Mat {
        self.grads[v.0]
            .clone()
            .unwrap_or_else(|| Mat::zeros(shape.0, shape.1))
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
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

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        debug_assert_eq!(m.len(), 1);
        m.data[0]
    }

    pub fn is_tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    fn push(&mut self, value: Mat, op: Op, tracked: bool) -> Var {
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    fn any_tracked(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].tracked)
    }

    /// A leaf whose gradient is wanted.
    pub fn param(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf treated as a constant.
    pub fn constant(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = matmul_nn(self.value(a), self.value(b));
        let t = self.any_tracked(&[a, b]);
        self.push(v, Op::MatMul(a, b), t)
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let v = matmul_nt(self.value(a), self.value(b));
        let t = self.any_tracked(&[a, b]);
        self.push(v, Op::MatMulNt(a, b), t)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.value(a).transpose();
        let t = self.any_tracked(&[a]);
        self.push(v, Op::Transpose(a), t)
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, what: &str) -> Mat {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!(x.shape(), y.shape(), "{what} shape");
        let data = x.data.iter().zip(&y.data).map(|(p, q)| f(*p, *q)).collect();
        Mat::from_vec(x.rows, x.cols, data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.zip_with(a, b, |p, q| p + q, "add");
        let t = self.any_tracked(&[a, b]);
        self.push(v, Op::Add(a, b), t)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.zip_with(a, b, |p, q| p - q, "sub");
        let t = self.any_tracked(&[a, b]);
        self.push(v, Op::Sub(a, b), t)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.zip_with(a, b, |p, q| p * q, "mul");
        let t = self.any_tracked(&[a, b]);
        self.push(v, Op::Mul(a, b), t)
    }

    /// Adds a `1 × n` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (x, r) = (self.value(a), self.value(row));
        assert!(r.rows == 1 && r.cols == x.cols, "add_row shape");
        let mut v = x.clone();
        for i in 0..v.rows {
            for (o, b) in v.row_mut(i).iter_mut().zip(&r.data) {
                *o += b;
            }
        }
        let t = self.any_tracked(&[a, row]);
        self.push(v, Op::AddRow(a, row), t)
    }

    /// Multiplies every row of `a` elementwise by a `1 × n` row.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        let (x, r) = (self.value(a), self.value(row));
        assert!(r.rows == 1 && r.cols == x.cols, "mul_row shape");
        let mut v = x.clone();
        for i in 0..v.rows {
            for (o, b) in v.row_mut(i).iter_mut().zip(&r.data) {
                *o *= b;
            }
        }
        let t = self.any_tracked(&[a, row]);
        self.push(v, Op::MulRow(a, row), t)
    }

    /// Adds an `m × 1` column to every column of `a`.
    pub fn add_col(&mut self, a: Var, col: Var) -> Var {
        let (x, c) = (self.value(a), self.value(col));
        assert!(c.cols == 1 && c.rows == x.rows, "add_col shape");
        let mut v = x.clone();
        for i in 0..v.rows {
            let b = c.data[i];
            v.row_mut(i).iter_mut().for_each(|o| *o += b);
        }
        let t = self.any_tracked(&[a, col]);
        self.push(v, Op::AddCol(a, col), t)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let x = self.value(a);
        let v = Mat::from_vec(x.rows, x.cols, x.data.iter().map(|p| p * c).collect());
        let t = self.any_tracked(&[a]);
        self.push(v, Op::Scale(a, c), t)
    }

    pub fn offset(&mut self, a: Var, c: f64) -> Var {
        let x = self.value(a);
        let v = Mat::from_vec(x.rows, x.cols, x.data.iter().map(|p| p + c).collect());
        let t = self.any_tracked(&[a]);
        self.push(v, Op::Offset(a), t)
    }

    pub fn unary(&mut self, a: Var, f: Unary) -> Var {
        let x = self.value(a);
        let v = Mat::from_vec(x.rows, x.cols, x.data.iter().map(|&p| f.apply(p)).collect());
        let t = self.any_tracked(&[a]);
        self.push(v, Op::Unary(a, f), t)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Gelu)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Sigmoid)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Tanh)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Softplus)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Exp)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Abs)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Square)
    }

    /// Row-wise layer norm with `1 × n` gain and offset.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let xv = self.value(x);
        let (g, b) = (self.value(gamma), self.value(beta));
        assert!(g.cols == xv.cols && b.cols == xv.cols, "layer_norm shape");
        let n = xv.cols as f64;
        let mut xhat = Mat::zeros(xv.rows, xv.cols);
        let mut inv_std = Vec::with_capacity(xv.rows);
        let mut out = Mat::zeros(xv.rows, xv.cols);
        for i in 0..xv.rows {
            let r = xv.row(i);
            let mean = r.iter().sum::<f64>() / n;
            let var = r.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let is = 1.0 / (var + eps).sqrt();
            inv_std.push(is);
            for j in 0..xv.cols {
                let h = (r[j] - mean) * is;
                xhat.data[i * xv.cols + j] = h;
                out.data[i * xv.cols + j] = h * g.data[j] + b.data[j];
            }
        }
        let t = self.any_tracked(&[x, gamma, beta]);
        self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            t,
        )
    }

    /// Row-wise softmax. `mask[i][j] == false` excludes entry `j` of row `i`.
    pub fn softmax(&mut self, a: Var, mask: Option<&[bool]>) -> Var {
        let x = self.value(a);
        if let Some(m) = mask {
            assert_eq!(m.len(), x.len(), "softmax mask shape");
        }
        let mut out = Mat::zeros(x.rows, x.cols);
        for i in 0..x.rows {
            let r = x.row(i);
            let allowed = |j: usize| mask.is_none_or(|m| m[i * x.cols + j]);
            let mx = (0..x.cols)
                .filter(|&j| allowed(j))
                .map(|j| r[j])
                .fold(f64::NEG_INFINITY, f64::max);
            let o = out.row_mut(i);
            let mut s = 0.0;
            for j in 0..x.cols {
                if allowed(j) {
                    o[j] = (r[j] - mx).exp();
                    s += o[j];
                }
            }
            if s > 0.0 {
                o.iter_mut().for_each(|v| *v /= s);
            }
        }
        let t = self.any_tracked(&[a]);
        self.push(out, Op::Softmax(a), t)
    }

    pub fn log_softmax(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let mut out = Mat::zeros(x.rows, x.cols);
        for i in 0..x.rows {
            let r = x.row(i);
            let mx = r.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + r.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
            for (o, v) in out.row_mut(i).iter_mut().zip(r) {
                *o = v - lse;
            }
        }
        let t = self.any_tracked(&[a]);
        self.push(out, Op::LogSoftmax(a), t)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let x = self.value(a);
        assert!(start + len <= x.cols, "slice_cols range");
        let mut out = Mat::zeros(x.rows, len);
        for i in 0..x.rows {
            out.row_mut(i)
                .copy_from_slice(&x.row(i)[start..start + len]);
        }
        let t = self.any_tracked(&[a]);
        self.push(out, Op::SliceCols(a, start), t)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let x = self.value(a);
        assert!(start + len <= x.rows, "slice_rows range");
        let out = Mat::from_vec(
            len,
            x.cols,
            x.data[start * x.cols..(start + len) * x.cols].to_vec(),
        );
        let t = self.any_tracked(&[a]);
        self.push(out, Op::SliceRows(a, start), t)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows;
        let cols: usize = parts.iter().map(|&p| self.value(p).cols).sum();
        let mut out = Mat::zeros(rows, cols);
        let mut off = 0;
        for &p in parts {
            let x = self.value(p);
            assert_eq!(x.rows, rows, "concat_cols rows");
            for i in 0..rows {
                out.data[i * cols + off..i * cols + off + x.cols].copy_from_slice(x.row(i));
            }
            off += x.cols;
        }
        let t = self.any_tracked(parts);
        self.push(out, Op::ConcatCols(parts.to_vec()), t)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let cols = self.value(parts[0]).cols;
        let mut data = Vec::new();
        for &p in parts {
            let x = self.value(p);
            assert_eq!(x.cols, cols, "concat_rows cols");
            data.extend_from_slice(&x.data);
        }
        let rows = data.len() / cols.max(1);
        let t = self.any_tracked(parts);
        self.push(
            Mat::from_vec(rows, cols, data),
            Op::ConcatRows(parts.to_vec()),
            t,
        )
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data.iter().sum();
        let t = self.any_tracked(&[a]);
        self.push(Mat::scalar(s), Op::Sum(a), t)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Sums each row into an `m × 1` column.
    pub fn row_sum(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let data = (0..x.rows).map(|i| x.row(i).iter().sum()).collect();
        let out = Mat::from_vec(x.rows, 1, data);
        let t = self.any_tracked(&[a]);
        self.push(out, Op::RowSum(a), t)
    }

    /// Scales each row to unit L2 norm (with a `1e-12` floor on the squared norm).
    pub fn row_normalize(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let mut out = x.clone();
        for i in 0..x.rows {
            let n = (x.row(i).iter().map(|v| v * v).sum::<f64>() + ROW_NORM_EPS).sqrt();
            out.row_mut(i).iter_mut().for_each(|v| *v /= n);
        }
        let t = self.any_tracked(&[a]);
        self.push(out, Op::RowNormalize(a), t)
    }

    /// Rotates consecutive pairs within each head by per-row angles.
    /// `angles` is `rows × head_dim/2`; every head of a row shares them.
    pub fn rope(&mut self, a: Var, angles: Rc<Mat>, head_dim: usize) -> Var {
        let x = self.value(a);
        assert_eq!(angles.rows, x.rows, "rope rows");
        assert_eq!(angles.cols * 2, head_dim, "rope head_dim");
        assert_eq!(x.cols % head_dim, 0, "rope width");
        let out = rotate_pairs(x, &angles, head_dim, 1.0);
        let t = self.any_tracked(&[a]);
        self.push(
            out,
            Op::Rope {
                x: a,
                angles,
                head_dim,
            },
            t,
        )
    }

    /// 2-D convolution. `x` is `C_in × (H·W)`, `w` is `C_out × (C_in·k·k)`,
    /// `b` is `C_out × 1`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, geom: ConvGeom) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.rows, geom.in_channels, "conv2d channels");
        assert_eq!(xv.cols, geom.height * geom.width, "conv2d spatial");
        let cols = im2col(xv, geom);
        let mut out = matmul_nn(self.value(w), &cols);
        let bv = self.value(b);
        assert_eq!(bv.rows, out.rows, "conv2d bias");
        for i in 0..out.rows {
            let bi = bv.data[i];
            out.row_mut(i).iter_mut().for_each(|o| *o += bi);
        }
        let t = self.any_tracked(&[x, w, b]);
        self.push(
            out,
            Op::Conv2d {
                x,
                w,
                b,
                geom,
                cols,
            },
            t,
        )
    }

    pub fn resample(&mut self, a: Var, map: Rc<ColumnMap>) -> Var {
        let x = self.value(a);
        assert_eq!(x.cols, map.in_cols, "resample width");
        let mut out = Mat::zeros(x.rows, map.taps.len());
        for i in 0..x.rows {
            let r = x.row(i);
            for (o, taps) in out.row_mut(i).iter_mut().zip(&map.taps) {
                *o = taps.iter().map(|&(j, w)| w * r[j]).sum();
            }
        }
        let t = self.any_tracked(&[a]);
        self.push(out, Op::Resample(a, map), t)
    }

    /// An operation with a caller-supplied vector-Jacobian product. The
    /// closure maps the output gradient to one gradient per input.
    pub fn custom(
        &mut self,
        inputs: &[Var],
        value: Mat,
        backward: impl Fn(&Mat) -> Vec<Mat> + 'static,
    ) -> Var {
        let t = self.any_tracked(inputs);
        self.push(value, Op::Custom(inputs.to_vec(), Box::new(backward)), t)
    }

    /// Reverse sweep from a scalar output.
    pub fn backward(&self, out: Var) -> Grads {
        let mut grads: Vec<Option<Mat>> = (0..self.nodes.len()).map(|_| None).collect();
        let ov = self.value(out);
        grads[out.0] = Some(Mat::filled(ov.rows, ov.cols, 1.0));
        for idx in (0..=out.0).rev() {
            let node = &self.nodes[idx];
            if !node.tracked {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Grads { grads }
    }

    fn accumulate(&self, grads: &mut [Option<Mat>], v: Var, g: Mat) {
        if !self.nodes[v.0].tracked {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    fn tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    fn propagate(&self, idx: usize, g: &Mat, grads: &mut [Option<Mat>]) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.tracked(*a) {
                    self.accumulate(grads, *a, matmul_nt(g, self.value(*b)));
                }
                if self.tracked(*b) {
                    self.accumulate(grads, *b, matmul_tn(self.value(*a), g));
                }
            }
            Op::MatMulNt(a, b) => {
                if self.tracked(*a) {
                    self.accumulate(grads, *a, matmul_nn(g, self.value(*b)));
                }
                if self.tracked(*b) {
                    self.accumulate(grads, *b, matmul_tn(g, self.value(*a)));
                }
            }
            Op::Transpose(a) => self.accumulate(grads, *a, g.transpose()),
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                let neg = Mat::from_vec(g.rows, g.cols, g.data.iter().map(|v| -v).collect());
                self.accumulate(grads, *b, neg);
            }
            Op::Mul(a, b) => {
                let (x, y) = (self.value(*a), self.value(*b));
                if self.tracked(*a) {
                    let d = g.data.iter().zip(&y.data).map(|(p, q)| p * q).collect();
                    self.accumulate(grads, *a, Mat::from_vec(g.rows, g.cols, d));
                }
                if self.tracked(*b) {
                    let d = g.data.iter().zip(&x.data).map(|(p, q)| p * q).collect();
                    self.accumulate(grads, *b, Mat::from_vec(g.rows, g.cols, d));
                }
            }
            Op::AddRow(a, row) => {
                self.accumulate(grads, *a, g.clone());
                if self.tracked(*row) {
                    self.accumulate(grads, *row, col_sums(g));
                }
            }
            Op::MulRow(a, row) => {
                let (x, r) = (self.value(*a), self.value(*row));
                if self.tracked(*a) {
                    let mut ga = g.clone();
                    for i in 0..ga.rows {
                        for (o, s) in ga.row_mut(i).iter_mut().zip(&r.data) {
                            *o *= s;
                        }
                    }
                    self.accumulate(grads, *a, ga);
                }
                if self.tracked(*row) {
                    let mut gr = Mat::zeros(1, g.cols);
                    for i in 0..g.rows {
                        for j in 0..g.cols {
                            gr.data[j] += g.get(i, j) * x.get(i, j);
                        }
                    }
                    self.accumulate(grads, *row, gr);
                }
            }
            Op::AddCol(a, col) => {
                self.accumulate(grads, *a, g.clone());
                if self.tracked(*col) {
                    let d = (0..g.rows).map(|i| g.row(i).iter().sum()).collect();
                    self.accumulate(grads, *col, Mat::from_vec(g.rows, 1, d));
                }
            }
            Op::Scale(a, c) => {
                let d = g.data.iter().map(|v| v * c).collect();
                self.accumulate(grads, *a, Mat::from_vec(g.rows, g.cols, d));
            }
            Op::Offset(a) => self.accumulate(grads, *a, g.clone()),
            Op::Unary(a, f) => {
                let x = self.value(*a);
                let y = &node.value;
                let d = g
                    .data
                    .iter()
                    .zip(x.data.iter().zip(&y.data))
                    .map(|(gv, (xv, yv))| gv * f.derivative(*xv, *yv))
                    .collect();
                self.accumulate(grads, *a, Mat::from_vec(g.rows, g.cols, d));
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let gam = self.value(*gamma);
                let n = g.cols as f64;
                if self.tracked(*x) {
                    let mut gx = Mat::zeros(g.rows, g.cols);
                    for i in 0..g.rows {
                        let gr = g.row(i);
                        let hr = xhat.row(i);
                        let mut s1 = 0.0;
                        let mut s2 = 0.0;
                        for j in 0..g.cols {
                            let dh = gr[j] * gam.data[j];
                            s1 += dh;
                            s2 += dh * hr[j];
                        }
                        let o = gx.row_mut(i);
                        for j in 0..g.cols {
                            let dh = gr[j] * gam.data[j];
                            o[j] = inv_std[i] * (dh - s1 / n - hr[j] * s2 / n);
                        }
                    }
                    self.accumulate(grads, *x, gx);
                }
                if self.tracked(*gamma) {
                    let mut gg = Mat::zeros(1, g.cols);
                    for i in 0..g.rows {
                        for j in 0..g.cols {
                            gg.data[j] += g.get(i, j) * xhat.get(i, j);
                        }
                    }
                    self.accumulate(grads, *gamma, gg);
                }
                if self.tracked(*beta) {
                    self.accumulate(grads, *beta, col_sums(g));
                }
            }
            Op::Softmax(a) => {
                let y = &node.value;
                let mut gx = Mat::zeros(g.rows, g.cols);
                for i in 0..g.rows {
                    let (yr, gr) = (y.row(i), g.row(i));
                    let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                    for (o, (yv, gv)) in gx.row_mut(i).iter_mut().zip(yr.iter().zip(gr)) {
                        *o = yv * (gv - dot);
                    }
                }
                self.accumulate(grads, *a, gx);
            }
            Op::LogSoftmax(a) => {
                let y = &node.value;
                let mut gx = Mat::zeros(g.rows, g.cols);
                for i in 0..g.rows {
                    let (yr, gr) = (y.row(i), g.row(i));
                    let s: f64 = gr.iter().sum();
                    for (o, (yv, gv)) in gx.row_mut(i).iter_mut().zip(yr.iter().zip(gr)) {
                        *o = gv - yv.exp() * s;
                    }
                }
                self.accumulate(grads, *a, gx);
            }
            Op::SliceCols(a, start) => {
                let x = self.value(*a);
                let mut gx = Mat::zeros(x.rows, x.cols);
                for i in 0..g.rows {
                    gx.row_mut(i)[*start..*start + g.cols].copy_from_slice(g.row(i));
                }
                self.accumulate(grads, *a, gx);
            }
            Op::SliceRows(a, start) => {
                let x = self.value(*a);
                let mut gx = Mat::zeros(x.rows, x.cols);
                gx.data[start * x.cols..(start + g.rows) * x.cols].copy_from_slice(&g.data);
                self.accumulate(grads, *a, gx);
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let cols = self.value(p).cols;
                    if self.tracked(p) {
                        let mut gp = Mat::zeros(g.rows, cols);
                        for i in 0..g.rows {
                            gp.row_mut(i).copy_from_slice(&g.row(i)[off..off + cols]);
                        }
                        self.accumulate(grads, p, gp);
                    }
                    off += cols;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let rows = self.value(p).rows;
                    if self.tracked(p) {
                        let gp = Mat::from_vec(
                            rows,
                            g.cols,
                            g.data[off * g.cols..(off + rows) * g.cols].to_vec(),
                        );
                        self.accumulate(grads, p, gp);
                    }
                    off += rows;
                }
            }
            Op::Sum(a) => {
                let x = self.value(*a);
                self.accumulate(grads, *a, Mat::filled(x.rows, x.cols, g.data[0]));
            }
            Op::RowSum(a) => {
                let x = self.value(*a);
                let mut gx = Mat::zeros(x.rows, x.cols);
                for i in 0..x.rows {
                    let gi = g.data[i];
                    gx.row_mut(i).iter_mut().for_each(|o| *o = gi);
                }
                self.accumulate(grads, *a, gx);
            }
            Op::RowNormalize(a) => {
                let x = self.value(*a);
                let mut gx = Mat::zeros(x.rows, x.cols);
                for i in 0..x.rows {
                    let xr = x.row(i);
                    let gr = g.row(i);
                    let s: f64 = xr.iter().map(|v| v * v).sum::<f64>() + ROW_NORM_EPS;
                    let n = s.sqrt();
                    let xg: f64 = xr.iter().zip(gr).map(|(p, q)| p * q).sum();
                    for (o, (xv, gv)) in gx.row_mut(i).iter_mut().zip(xr.iter().zip(gr)) {
                        *o = gv / n - xv * xg / (n * s);
                    }
                }
                self.accumulate(grads, *a, gx);
            }
            Op::Rope {
                x,
                angles,
                head_dim,
            } => {
                let gx = rotate_pairs(g, angles, *head_dim, -1.0);
                self.accumulate(grads, *x, gx);
            }
            Op::Conv2d {
                x,
                w,
                b,
                geom,
                cols,
            } => {
                if self.tracked(*w) {
                    self.accumulate(grads, *w, matmul_nt(g, cols));
                }
                if self.tracked(*b) {
                    let d = (0..g.rows).map(|i| g.row(i).iter().sum()).collect();
                    self.accumulate(grads, *b, Mat::from_vec(g.rows, 1, d));
                }
                if self.tracked(*x) {
                    let dcols = matmul_tn(self.value(*w), g);
                    self.accumulate(grads, *x, col2im(&dcols, *geom));
                }
            }
            Op::Resample(a, map) => {
                let mut gx = Mat::zeros(g.rows, map.in_cols);
                for i in 0..g.rows {
                    let gr = g.row(i);
                    let o = gx.row_mut(i);
                    for (gv, taps) in gr.iter().zip(&map.taps) {
                        for &(j, w) in taps {
                            o[j] += w * gv;
                        }
                    }
                }
                self.accumulate(grads, *a, gx);
            }
            Op::Custom(inputs, f) => {
                let gs = f(g);
                assert_eq!(gs.len(), inputs.len(), "custom op gradient count");
                for (&v, gv) in inputs.iter().zip(gs) {
                    self.accumulate(grads, v, gv);
                }
            }
        }
    }
}

const ROW_NORM_EPS: f64 = 1e-12;

fn col_sums(g: &Mat) -> Mat {
    let mut out = Mat::zeros(1, g.cols);
    for i in 0..g.rows {
        for (o, v) in out.data.iter_mut().zip(g.row(i)) {
            *o += v;
        }
    }
    out
}

fn rotate_pairs(x: &Mat, angles: &Mat, head_dim: usize, sign: f64) -> Mat {
    let mut out = x.clone();
    let pairs = head_dim / 2;
    for i in 0..x.rows {
        let ang = angles.row(i);
        let row = out.row_mut(i);
        for head in row.chunks_mut(head_dim) {
            for j in 0..pairs {
                let (s, c) = (sign * ang[j]).sin_cos();
                let (a, b) = (head[2 * j], head[2 * j + 1]);
                head[2 * j] = a * c - b * s;
                head[2 * j + 1] = a * s + b * c;
            }
        }
    }
    out
}

fn im2col(x: &Mat, g: ConvGeom) -> Mat {
    let (oh, ow) = (g.out_height(), g.out_width());
    let k = g.kernel;
    let mut cols = Mat::zeros(g.in_channels * k * k, oh * ow);
    for c in 0..g.in_channels {
        for ky in 0..k {
            for kx in 0..k {
                let r = (c * k + ky) * k + kx;
                let row = cols.row_mut(r);
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    for ox in 0..ow {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix < 0 || ix >= g.width as isize {
                            continue;
                        }
                        row[oy * ow + ox] =
                            x.data[c * g.height * g.width + iy as usize * g.width + ix as usize];
                    }
                }
            }
        }
    }
    cols
}

fn col2im(cols: &Mat, g: ConvGeom) -> Mat {
    let (oh, ow) = (g.out_height(), g.out_width());
    let k = g.kernel;
    let mut x = Mat::zeros(g.in_channels, g.height * g.width);
    for c in 0..g.in_channels {
        for ky in 0..k {
            for kx in 0..k {
                let row = cols.row((c * k + ky) * k + kx);
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    for ox in 0..ow {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix < 0 || ix >= g.width as isize {
                            continue;
                        }
                        x.data[c * g.height * g.width + iy as usize * g.width + ix as usize] +=
                            row[oy * ow + ox];
                    }
                }
            }
        }
    }
    x
}

/// Compares the tape gradient of a scalar function against central finite
/// differences with step `eps` (so the stencil spans `2·eps`).
///
/// Returns `max |g_ad − g_fd| / max(1, |g_fd|)` over every coordinate of
/// every input.
pub fn grad_check<F>(f: F, point: &[Mat], eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Var,
{
    let coords: Vec<(usize, usize)> = point
        .iter()
        .enumerate()
        .flat_map(|(k, m)| (0..m.len()).map(move |i| (k, i)))
        .collect();
    grad_check_at(&f, point, eps, &coords)
}

/// Like [`grad_check`] but probes at most `max_coords` coordinates chosen
/// with a seeded shuffle.
pub fn grad_check_sampled<F>(
    f: F,
    point: &[Mat],
    eps: f64,
    max_coords: usize,
    seed: u64,
) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Var,
{
    let mut coords: Vec<(usize, usize)> = point
        .iter()
        .enumerate()
        .flat_map(|(k, m)| (0..m.len()).map(move |i| (k, i)))
        .collect();
    coords.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    coords.truncate(max_coords);
    grad_check_at(&f, point, eps, &coords)
}

fn grad_check_at<F>(f: &F, point: &[Mat], eps: f64, coords: &[(usize, usize)]) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Var,
{
    let eval = |pt: &[Mat]| -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = pt.iter().map(|m| tape.constant(m.clone())).collect();
        let out = f(&mut tape, &vars);
        tape.scalar(out)
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = point.iter().map(|m| tape.param(m.clone())).collect();
    let out = f(&mut tape, &vars);
    if !tape.scalar(out).is_finite() {
        return Err(Error::NonFiniteGradient(format!(
            "function value {}",
            tape.scalar(out)
        )));
    }
    let grads = tape.backward(out);
    let analytic: Vec<Mat> = vars
        .iter()
        .zip(point)
        .map(|(&v, m)| grads.get_or_zeros(v, m.shape()))
        .collect();
    for (k, g) in analytic.iter().enumerate() {
        if let Some(i) = g.data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFiniteGradient(format!("input {k} index {i}")));
        }
    }

    let mut worst: f64 = 0.0;
    let mut probe = point.to_vec();
    for &(k, i) in coords {
        let orig = probe[k].data[i];
        probe[k].data[i] = orig + eps;
        let up = eval(&probe);
        probe[k].data[i] = orig - eps;
        let down = eval(&probe);
        probe[k].data[i] = orig;
        let fd = (up - down) / (2.0 * eps);
        if !fd.is_finite() {
            return Err(Error::NonFiniteGradient(format!(
                "finite difference at input {k} index {i}"
            )));
        }
        let err = (analytic[k].data[i] - fd).abs() / fd.abs().max(1.0);
        worst = worst.max(err);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random(rows: usize, cols: usize, seed: u64) -> Mat {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Mat::from_vec(
            rows,
            cols,
            (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
    }

    #[test]
    fn square_at_three() {
        let mut tape = Tape::new();
        let x = tape.param(Mat::scalar(3.0));
        let y = tape.square(x);
        let g = tape.backward(y);
        assert_eq!(g.get(x).unwrap().data[0], 6.0);

        let err = grad_check(|t, v| t.square(v[0]), &[Mat::scalar(3.0)], 1e-4).unwrap();
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn nan_input_is_reported() {
        let r = grad_check(|t, v| t.square(v[0]), &[Mat::scalar(f64::NAN)], 1e-4);
        assert!(matches!(r, Err(Error::NonFiniteGradient(_))));
    }

    #[test]
    fn dense_ops_match_finite_differences() {
        let a = random(3, 4, 1);
        let b = random(4, 5, 2);
        let row = random(1, 5, 3);
        let err = grad_check(
            |t, v| {
                let m = t.matmul(v[0], v[1]);
                let m = t.add_row(m, v[2]);
                let m = t.gelu(m);
                let s = t.softmax(m, None);
                let l = t.log_softmax(m);
                let p = t.mul(s, l);
                t.sum(p)
            },
            &[a, b, row],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-7, "{err}");
    }

    #[test]
    fn norm_and_shape_ops_match_finite_differences() {
        let x = random(4, 6, 4);
        let g = random(1, 6, 5);
        let b = random(1, 6, 6);
        let other = random(4, 6, 7);
        let err = grad_check(
            |t, v| {
                let n = t.layer_norm(v[0], v[1], v[2], 1e-6);
                let r = t.row_normalize(n);
                let nt = t.matmul_nt(r, v[3]);
                let tr = t.transpose(nt);
                let left = t.slice_cols(tr, 1, 2);
                let right = t.slice_rows(tr, 0, 4);
                let right = t.slice_cols(right, 0, 2);
                let c = t.concat_rows(&[left, right]);
                let c = t.concat_cols(&[c, c]);
                let sq = t.square(c);
                let rs = t.row_sum(sq);
                let th = t.tanh(rs);
                t.sum(th)
            },
            &[x, g, b, other],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-7, "{err}");
    }

    #[test]
    fn masked_softmax_ignores_masked_entries() {
        let mut tape = Tape::new();
        let x = tape.constant(Mat::from_vec(1, 3, vec![1.0, 100.0, 1.0]));
        let s = tape.softmax(x, Some(&[true, false, true]));
        assert_eq!(tape.value(s).data, vec![0.5, 0.0, 0.5]);
    }

    #[test]
    fn conv_and_resample_match_finite_differences() {
        let geom = ConvGeom {
            in_channels: 2,
            height: 5,
            width: 4,
            kernel: 3,
            stride: 2,
            pad: 1,
        };
        let x = random(2, 20, 8);
        let w = random(3, 18, 9);
        let b = random(3, 1, 10);
        let map = Rc::new(ColumnMap {
            in_cols: geom.out_height() * geom.out_width(),
            taps: vec![
                vec![(0, 0.5), (1, 0.5)],
                vec![(2, 1.0)],
                vec![(3, 0.25), (5, 0.75)],
            ],
        });
        let err = grad_check(
            move |t, v| {
                let y = t.conv2d(v[0], v[1], v[2], geom);
                let y = t.resample(y, map.clone());
                let y = t.sigmoid(y);
                let y = t.square(y);
                t.sum(y)
            },
            &[x, w, b],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-7, "{err}");
    }

    #[test]
    fn rope_backward_is_inverse_rotation() {
        let x = random(3, 8, 11);
        let angles = Rc::new(random(3, 2, 12));
        let w = random(3, 8, 13);
        let err = grad_check(
            move |t, v| {
                let r = t.rope(v[0], angles.clone(), 4);
                let p = t.mul(r, v[1]);
                let p = t.softplus(p);
                t.sum(p)
            },
            &[x, w],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-7, "{err}");
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut tape = Tape::new();
        let c = tape.constant(Mat::scalar(2.0));
        let p = tape.param(Mat::scalar(3.0));
        let y = tape.mul(c, p);
        let g = tape.backward(y);
        assert!(g.get(c).is_none());
        assert_eq!(g.get(p).unwrap().data[0], 2.0);
    }
}
