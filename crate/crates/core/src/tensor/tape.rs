//! Record-and-replay reverse-mode differentiation.
//!
//! A [`Tape`] is rebuilt for every training step. Operations execute eagerly,
//! appending one node per primitive with the saved forward intermediates its
//! backward rule needs. [`Tape::backward`] replays the record once in reverse
//! creation order, which is a valid topological order because an operation can
//! only reference nodes created before it.
//!
//! There is no implicit broadcasting: binary elementwise operations require
//! identical shapes, and scalar results are `[1]` tensors.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{dropout_mask, shape_str, Tensor};

/// Handle to a node in the active computation record.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum EwKind {
    Add,
    Sub,
    Mul,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum ActKind {
    Sigmoid,
    Tanh,
    Relu,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Ew { kind: EwKind, a: Var, b: Var },
    /// `scale * x + shift`, elementwise with constant coefficients (the
    /// shift drops out of the backward rule, so only the scale is saved).
    Affine { x: Var, scale: f64 },
    Act { kind: ActKind, x: Var },
    MatMul { a: Var, b: Var },
    MatVec { m: Var, v: Var },
    VecMat { v: Var, m: Var },
    Softmax { x: Var },
    /// Linear wide convolution (pre-activation): input is zero-padded by
    /// `width - 1` on both ends so every filter position reaches every column.
    ConvWide { x: Var, w: Var, b: Var },
    MaxPoolRows { x: Var, argmax: Vec<usize> },
    Concat { xs: Vec<Var>, axis: usize },
    StackCols { xs: Vec<Var> },
    Col { x: Var, idx: usize },
    /// Gathers table rows as output columns; row 0 of the table is treated as
    /// a frozen padding row and never receives gradient.
    LookupCols { table: Var, indices: Vec<usize> },
    Dropout { x: Var, mask: Vec<f64> },
    Outer { a: Var, b: Var },
    /// Cosine similarity with the zero-vector convention: score and gradient
    /// are 0 whenever either side has zero norm.
    Cosine { a: Var, b: Var },
    /// Per-row cosine similarity between each row of a matrix and a key.
    CosineRows { m: Var, k: Var },
    /// Negative log-likelihood of `target` under softmax(logits); saves the
    /// probabilities for the backward pass.
    CrossEntropy { logits: Var, target: usize, probs: Vec<f64> },
    Sum { x: Var },
    Dot { a: Var, b: Var },
    Reshape { x: Var },
    /// Elementwise multiplication by a `[1]` scalar node.
    ScaleBy { x: Var, s: Var },
}

struct Node {
    op: Op,
    shape: Vec<usize>,
    value: Vec<f64>,
    needs_grad: bool,
    grad: Vec<f64>,
}

/// The active computation record: an append-only arena of nodes.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
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

    /// Clears the record for the next step.
    pub fn clear(&mut self) {
        self.nodes.clear();
    }

    fn push(&mut self, op: Op, shape: Vec<usize>, value: Vec<f64>, needs_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node { op, shape, value, needs_grad, grad: Vec::new() });
        Var(self.nodes.len() - 1)
    }

    /// Registers a tensor as a leaf. Trainable leaves collect gradients.
    pub fn leaf(&mut self, t: &Tensor, trainable: bool) -> Var {
        self.push(Op::Leaf, t.shape().to_vec(), t.data().to_vec(), trainable)
    }

    /// Registers a non-trainable constant leaf.
    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Result<Var> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape("constant", format!("{} values", numel), format!("{}", data.len())));
        }
        Ok(self.push(Op::Leaf, shape, data, false))
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    /// Gradient of a node after [`Tape::backward`]; `None` before backward or
    /// for nodes outside the loss's ancestry.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        let n = &self.nodes[v.0];
        if n.grad.is_empty() { None } else { Some(&n.grad) }
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        Tensor::new(self.shape(v).to_vec(), self.value(v).to_vec()).expect("node shape is consistent")
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn check_same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, shape_str(self.shape(a)), shape_str(self.shape(b))));
        }
        Ok(())
    }

    fn ew(&mut self, kind: EwKind, a: Var, b: Var) -> Result<Var> {
        let name = match kind {
            EwKind::Add => "add",
            EwKind::Sub => "sub",
            EwKind::Mul => "mul",
        };
        self.check_same_shape(name, a, b)?;
        let value: Vec<f64> = self.value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| match kind {
                EwKind::Add => x + y,
                EwKind::Sub => x - y,
                EwKind::Mul => x * y,
            })
            .collect();
        let needs = self.needs(a) || self.needs(b);
        let shape = self.shape(a).to_vec();
        Ok(self.push(Op::Ew { kind, a, b }, shape, value, needs))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.ew(EwKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.ew(EwKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.ew(EwKind::Mul, a, b)
    }

    /// `scale * x + shift` elementwise with constants.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        let value = self.value(x).iter().map(|&v| scale * v + shift).collect();
        let needs = self.needs(x);
        let shape = self.shape(x).to_vec();
        self.push(Op::Affine { x, scale }, shape, value, needs)
    }

    fn act(&mut self, kind: ActKind, x: Var) -> Var {
        let value: Vec<f64> = self.value(x)
            .iter()
            .map(|&v| match kind {
                ActKind::Sigmoid => sigmoid(v),
                ActKind::Tanh => v.tanh(),
                // f64::max would swallow NaN; keep divergence observable.
                ActKind::Relu => {
                    if v > 0.0 || v.is_nan() {
                        v
                    } else {
                        0.0
                    }
                }
            })
            .collect();
        let needs = self.needs(x);
        let shape = self.shape(x).to_vec();
        self.push(Op::Act { kind, x }, shape, value, needs)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.act(ActKind::Sigmoid, x)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.act(ActKind::Tanh, x)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.act(ActKind::Relu, x)
    }

    /// `[m,k] x [k,n] -> [m,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", "[m,k] x [k,n]", format!("{} x {}", shape_str(sa), shape_str(sb))));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let value = matmul_raw(self.value(a), self.value(b), m, k, n);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Op::MatMul { a, b }, vec![m, n], value, needs))
    }

    /// `[m,k] x [k] -> [m]`.
    pub fn matvec(&mut self, m: Var, v: Var) -> Result<Var> {
        let (sm, sv) = (self.shape(m), self.shape(v));
        if sm.len() != 2 || sv.len() != 1 || sm[1] != sv[0] {
            return Err(Error::shape("matvec", "[m,k] x [k]", format!("{} x {}", shape_str(sm), shape_str(sv))));
        }
        let (rows, cols) = (sm[0], sm[1]);
        let (md, vd) = (self.value(m), self.value(v));
        let mut value = vec![0.0; rows];
        for r in 0..rows {
            let mut acc = 0.0;
            for c in 0..cols {
                acc += md[r * cols + c] * vd[c];
            }
            value[r] = acc;
        }
        let needs = self.needs(m) || self.needs(v);
        Ok(self.push(Op::MatVec { m, v }, vec![rows], value, needs))
    }

    /// `[k] x [k,n] -> [n]` (row vector times matrix).
    pub fn vecmat(&mut self, v: Var, m: Var) -> Result<Var> {
        let (sv, sm) = (self.shape(v), self.shape(m));
        if sv.len() != 1 || sm.len() != 2 || sv[0] != sm[0] {
            return Err(Error::shape("vecmat", "[k] x [k,n]", format!("{} x {}", shape_str(sv), shape_str(sm))));
        }
        let (rows, cols) = (sm[0], sm[1]);
        let (vd, md) = (self.value(v), self.value(m));
        let mut value = vec![0.0; cols];
        for r in 0..rows {
            let w = vd[r];
            for c in 0..cols {
                value[c] += w * md[r * cols + c];
            }
        }
        let needs = self.needs(m) || self.needs(v);
        Ok(self.push(Op::VecMat { v, m }, vec![cols], value, needs))
    }

    /// Numerically stable softmax over a vector: max-shifted exponentials.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 1 || s[0] == 0 {
            return Err(Error::shape("softmax", "[n], n >= 1", shape_str(s)));
        }
        let value = softmax_raw(self.value(x));
        let needs = self.needs(x);
        let shape = s.to_vec();
        Ok(self.push(Op::Softmax { x }, shape, value, needs))
    }

    /// Wide 1-d convolution, linear part only: `x` is `[c_in, t]`, `w` is
    /// `[c_out, c_in, l]`, `b` is `[c_out]`; output is `[c_out, t + l - 1]`.
    pub fn conv_wide(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (sx, sw, sb) = (self.shape(x), self.shape(w), self.shape(b));
        if sx.len() != 2 || sw.len() != 3 || sb.len() != 1 {
            return Err(Error::shape(
                "conv_wide",
                "[c_in,t], [c_out,c_in,l], [c_out]",
                format!("{}, {}, {}", shape_str(sx), shape_str(sw), shape_str(sb)),
            ));
        }
        let (c_in, t) = (sx[0], sx[1]);
        let (c_out, w_cin, l) = (sw[0], sw[1], sw[2]);
        if w_cin != c_in || sb[0] != c_out {
            return Err(Error::shape(
                "conv_wide",
                format!("filters [{},{},l], bias [{}]", c_out, c_in, c_out),
                format!("{}, {}", shape_str(sw), shape_str(sb)),
            ));
        }
        if l < 1 {
            return Err(Error::invalid("conv_wide", "filter width must be >= 1"));
        }
        let t_out = t + l - 1;
        let (xd, wd, bd) = (self.value(x), self.value(w), self.value(b));
        let mut value = vec![0.0; c_out * t_out];
        for o in 0..c_out {
            for j in 0..t_out {
                let mut acc = bd[o];
                for c in 0..c_in {
                    for u in 0..l {
                        // padded position j+u maps to input column j+u-(l-1)
                        let i = (j + u).wrapping_sub(l - 1);
                        if i < t {
                            acc += wd[(o * c_in + c) * l + u] * xd[c * t + i];
                        }
                    }
                }
                value[o * t_out + j] = acc;
            }
        }
        let needs = self.needs(x) || self.needs(w) || self.needs(b);
        Ok(self.push(Op::ConvWide { x, w, b }, vec![c_out, t_out], value, needs))
    }

    /// Per-row maximum over the time axis: `[h,t] -> [h]`. Gradient flows to
    /// the first maximal position of each row.
    pub fn max_pool_rows(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 2 || s[1] == 0 {
            return Err(Error::shape("max_pool_rows", "[h,t], t >= 1", shape_str(s)));
        }
        let (h, t) = (s[0], s[1]);
        let xd = self.value(x);
        let mut value = vec![0.0; h];
        let mut argmax = vec![0usize; h];
        for r in 0..h {
            let row = &xd[r * t..(r + 1) * t];
            let mut best = row[0];
            let mut best_i = 0;
            for (i, &v) in row.iter().enumerate().skip(1) {
                if v > best {
                    best = v;
                    best_i = i;
                }
            }
            value[r] = best;
            argmax[r] = best_i;
        }
        let needs = self.needs(x);
        Ok(self.push(Op::MaxPoolRows { x, argmax }, vec![h], value, needs))
    }

    /// Concatenates along `axis`. Vectors concatenate along axis 0; matrices
    /// along axis 0 (rows) or 1 (columns). All other extents must agree.
    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        if xs.is_empty() {
            return Err(Error::invalid("concat", "empty input list"));
        }
        let ndim = self.shape(xs[0]).len();
        if axis >= ndim {
            return Err(Error::invalid("concat", format!("axis {} for {}-d input", axis, ndim)));
        }
        for &x in xs {
            let s = self.shape(x);
            if s.len() != ndim {
                return Err(Error::shape("concat", format!("{}-d", ndim), shape_str(s)));
            }
            for d in 0..ndim {
                if d != axis && s[d] != self.shape(xs[0])[d] {
                    return Err(Error::shape("concat", shape_str(self.shape(xs[0])), shape_str(s)));
                }
            }
        }
        let mut shape = self.shape(xs[0]).to_vec();
        shape[axis] = xs.iter().map(|&x| self.shape(x)[axis]).sum();

        let value = match (ndim, axis) {
            (1, 0) => {
                let mut out = Vec::with_capacity(shape[0]);
                for &x in xs {
                    out.extend_from_slice(self.value(x));
                }
                out
            }
            (2, 0) => {
                let mut out = Vec::with_capacity(shape[0] * shape[1]);
                for &x in xs {
                    out.extend_from_slice(self.value(x));
                }
                out
            }
            (2, 1) => {
                let rows = shape[0];
                let mut out = vec![0.0; rows * shape[1]];
                for r in 0..rows {
                    let mut col = 0;
                    for &x in xs {
                        let xc = self.shape(x)[1];
                        let xd = self.value(x);
                        out[r * shape[1] + col..r * shape[1] + col + xc]
                            .copy_from_slice(&xd[r * xc..(r + 1) * xc]);
                        col += xc;
                    }
                }
                out
            }
            _ => return Err(Error::invalid("concat", format!("unsupported ndim {} axis {}", ndim, axis))),
        };
        let needs = xs.iter().any(|&x| self.needs(x));
        Ok(self.push(Op::Concat { xs: xs.to_vec(), axis }, shape, value, needs))
    }

    /// Stacks `t` vectors of length `h` as the columns of an `[h,t]` matrix.
    pub fn stack_cols(&mut self, xs: &[Var]) -> Result<Var> {
        if xs.is_empty() {
            return Err(Error::invalid("stack_cols", "empty input list"));
        }
        let h = {
            let s = self.shape(xs[0]);
            if s.len() != 1 {
                return Err(Error::shape("stack_cols", "[h] vectors", shape_str(s)));
            }
            s[0]
        };
        for &x in xs {
            if self.shape(x) != [h] {
                return Err(Error::shape("stack_cols", format!("[{}]", h), shape_str(self.shape(x))));
            }
        }
        let t = xs.len();
        let mut value = vec![0.0; h * t];
        for (j, &x) in xs.iter().enumerate() {
            let xd = self.value(x);
            for r in 0..h {
                value[r * t + j] = xd[r];
            }
        }
        let needs = xs.iter().any(|&x| self.needs(x));
        Ok(self.push(Op::StackCols { xs: xs.to_vec() }, vec![h, t], value, needs))
    }

    /// Extracts column `idx` of an `[h,t]` matrix as an `[h]` vector.
    pub fn col(&mut self, x: Var, idx: usize) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 2 || idx >= s[1] {
            return Err(Error::invalid("col", format!("column {} of {}", idx, shape_str(s))));
        }
        let (h, t) = (s[0], s[1]);
        let xd = self.value(x);
        let value: Vec<f64> = (0..h).map(|r| xd[r * t + idx]).collect();
        let needs = self.needs(x);
        Ok(self.push(Op::Col { x, idx }, vec![h], value, needs))
    }

    /// Embedding-style gather: output column `j` is row `indices[j]` of the
    /// `[v,d]` table, giving a `[d,n]` matrix. Row 0 of the table is the
    /// frozen padding row and receives no gradient.
    pub fn lookup_cols(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let s = self.shape(table);
        if s.len() != 2 {
            return Err(Error::shape("lookup_cols", "[v,d] table", shape_str(s)));
        }
        let (v, d) = (s[0], s[1]);
        if indices.is_empty() {
            return Err(Error::invalid("lookup_cols", "empty index list"));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= v) {
            return Err(Error::invalid("lookup_cols", format!("index {} out of range for {} rows", bad, v)));
        }
        let n = indices.len();
        let td = self.value(table);
        let mut value = vec![0.0; d * n];
        for (j, &idx) in indices.iter().enumerate() {
            for r in 0..d {
                value[r * n + j] = td[idx * d + r];
            }
        }
        let needs = self.needs(table);
        Ok(self.push(Op::LookupCols { table, indices: indices.to_vec() }, vec![d, n], value, needs))
    }

    /// Inverted dropout as a recorded operation; the sampled mask is saved for
    /// the backward pass.
    pub fn dropout(&mut self, x: Var, p: f64, training: bool, rng: &mut impl Rng) -> Result<Var> {
        let mask = dropout_mask(self.value(x).len(), p, training, rng)?;
        let value = self.value(x).iter().zip(&mask).map(|(v, m)| v * m).collect();
        let needs = self.needs(x);
        let shape = self.shape(x).to_vec();
        Ok(self.push(Op::Dropout { x, mask }, shape, value, needs))
    }

    /// Outer product `[n] x [m] -> [n,m]`.
    pub fn outer(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 1 || sb.len() != 1 {
            return Err(Error::shape("outer", "[n] x [m]", format!("{} x {}", shape_str(sa), shape_str(sb))));
        }
        let (n, m) = (sa[0], sb[0]);
        let (ad, bd) = (self.value(a), self.value(b));
        let mut value = vec![0.0; n * m];
        for i in 0..n {
            for j in 0..m {
                value[i * m + j] = ad[i] * bd[j];
            }
        }
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Outer { a, b }, vec![n, m], value, needs))
    }

    /// Cosine similarity of two equal-length vectors as a `[1]` scalar.
    pub fn cosine(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same_shape("cosine", a, b)?;
        if self.shape(a).len() != 1 {
            return Err(Error::shape("cosine", "[n] vectors", shape_str(self.shape(a))));
        }
        let value = vec![cosine_raw(self.value(a), self.value(b))];
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Cosine { a, b }, vec![1], value, needs))
    }

    /// Cosine similarity between each row of `[n,mw]` and a key `[mw]`.
    pub fn cosine_rows(&mut self, m: Var, k: Var) -> Result<Var> {
        let (sm, sk) = (self.shape(m), self.shape(k));
        if sm.len() != 2 || sk.len() != 1 || sm[1] != sk[0] {
            return Err(Error::shape("cosine_rows", "[n,mw] x [mw]", format!("{} x {}", shape_str(sm), shape_str(sk))));
        }
        let (n, mw) = (sm[0], sm[1]);
        let (md, kd) = (self.value(m), self.value(k));
        let value: Vec<f64> = (0..n).map(|r| cosine_raw(&md[r * mw..(r + 1) * mw], kd)).collect();
        let needs = self.needs(m) || self.needs(k);
        Ok(self.push(Op::CosineRows { m, k }, vec![n], value, needs))
    }

    /// Negative log-likelihood of class `target` under `softmax(logits)`.
    pub fn cross_entropy(&mut self, logits: Var, target: usize) -> Result<Var> {
        let s = self.shape(logits);
        if s.len() != 1 || target >= s[0] {
            return Err(Error::invalid(
                "cross_entropy",
                format!("target {} for logits {}", target, shape_str(s)),
            ));
        }
        let probs = softmax_raw(self.value(logits));
        let value = if probs[target].is_nan() {
            vec![f64::NAN]
        } else {
            vec![-(probs[target].max(f64::MIN_POSITIVE)).ln()]
        };
        let needs = self.needs(logits);
        Ok(self.push(Op::CrossEntropy { logits, target, probs }, vec![1], value, needs))
    }

    /// Sum of all elements as a `[1]` scalar.
    pub fn sum(&mut self, x: Var) -> Var {
        let value = vec![self.value(x).iter().sum()];
        let needs = self.needs(x);
        self.push(Op::Sum { x }, vec![1], value, needs)
    }

    /// Dot product of two equal-length vectors as a `[1]` scalar.
    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same_shape("dot", a, b)?;
        let value = vec![self.value(a).iter().zip(self.value(b)).map(|(x, y)| x * y).sum()];
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Dot { a, b }, vec![1], value, needs))
    }

    /// Multiplies every element of `x` by the `[1]` scalar node `s`.
    pub fn scale_by(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.value(s).len() != 1 {
            return Err(Error::shape("scale_by", "[1] scalar", shape_str(self.shape(s))));
        }
        let sv = self.value(s)[0];
        let value = self.value(x).iter().map(|&v| v * sv).collect();
        let needs = self.needs(x) || self.needs(s);
        let shape = self.shape(x).to_vec();
        Ok(self.push(Op::ScaleBy { x, s }, shape, value, needs))
    }

    /// Reinterprets the data under a new shape with the same element count.
    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let numel: usize = shape.iter().product();
        if numel != self.value(x).len() {
            return Err(Error::shape("reshape", format!("{} elements", self.value(x).len()), shape_str(&shape)));
        }
        let value = self.value(x).to_vec();
        let needs = self.needs(x);
        Ok(self.push(Op::Reshape { x }, shape, value, needs))
    }

    /// Reverse sweep from a scalar loss. Populates gradients of every node in
    /// the loss's ancestry, visiting each node exactly once.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::shape("backward", "scalar loss [1]", shape_str(self.shape(loss))));
        }
        for n in &mut self.nodes {
            n.grad = if n.needs_grad { vec![0.0; n.value.len()] } else { Vec::new() };
        }
        if !self.nodes[loss.0].needs_grad {
            // Loss does not depend on any trainable leaf; nothing to do.
            return Ok(());
        }
        self.nodes[loss.0].grad[0] = 1.0;

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let grad = std::mem::take(&mut self.nodes[i].grad);
            let op = self.nodes[i].op.clone();
            self.backward_node(&op, i, &grad);
            self.nodes[i].grad = grad;
        }
        Ok(())
    }

    fn add_grad(&mut self, v: Var, contrib: impl FnOnce(&mut [f64])) {
        let n = &mut self.nodes[v.0];
        if n.needs_grad {
            contrib(&mut n.grad);
        }
    }

    fn backward_node(&mut self, op: &Op, idx: usize, g: &[f64]) {
        match op {
            Op::Leaf => {}
            Op::Ew { kind, a, b } => match kind {
                EwKind::Add => {
                    self.add_grad(*a, |d| accumulate(d, g, 1.0));
                    self.add_grad(*b, |d| accumulate(d, g, 1.0));
                }
                EwKind::Sub => {
                    self.add_grad(*a, |d| accumulate(d, g, 1.0));
                    self.add_grad(*b, |d| accumulate(d, g, -1.0));
                }
                EwKind::Mul => {
                    let av = self.nodes[a.0].value.clone();
                    let bv = self.nodes[b.0].value.clone();
                    self.add_grad(*a, |d| {
                        for (i, gi) in g.iter().enumerate() {
                            d[i] += gi * bv[i];
                        }
                    });
                    self.add_grad(*b, |d| {
                        for (i, gi) in g.iter().enumerate() {
                            d[i] += gi * av[i];
                        }
                    });
                }
            },
            Op::Affine { x, scale } => {
                let s = *scale;
                self.add_grad(*x, |d| accumulate(d, g, s));
            }
            Op::Act { kind, x } => {
                let y = self.nodes[idx].value.clone();
                let xv = self.nodes[x.0].value.clone();
                self.add_grad(*x, |d| {
                    for i in 0..g.len() {
                        let dy = match kind {
                            ActKind::Sigmoid => y[i] * (1.0 - y[i]),
                            ActKind::Tanh => 1.0 - y[i] * y[i],
                            ActKind::Relu => {
                                if xv[i] > 0.0 {
                                    1.0
                                } else {
                                    0.0
                                }
                            }
                        };
                        d[i] += g[i] * dy;
                    }
                });
            }
            Op::MatMul { a, b } => {
                let (m, k) = (self.nodes[a.0].shape[0], self.nodes[a.0].shape[1]);
                let n = self.nodes[b.0].shape[1];
                let av = self.nodes[a.0].value.clone();
                let bv = self.nodes[b.0].value.clone();
                // dA = G * B^T
                self.add_grad(*a, |d| {
                    for i in 0..m {
                        for p in 0..k {
                            let mut acc = 0.0;
                            for j in 0..n {
                                acc += g[i * n + j] * bv[p * n + j];
                            }
                            d[i * k + p] += acc;
                        }
                    }
                });
                // dB = A^T * G
                self.add_grad(*b, |d| {
                    for p in 0..k {
                        for j in 0..n {
                            let mut acc = 0.0;
                            for i in 0..m {
                                acc += av[i * k + p] * g[i * n + j];
                            }
                            d[p * n + j] += acc;
                        }
                    }
                });
            }
            Op::MatVec { m, v } => {
                let (rows, cols) = (self.nodes[m.0].shape[0], self.nodes[m.0].shape[1]);
                let mv = self.nodes[m.0].value.clone();
                let vv = self.nodes[v.0].value.clone();
                self.add_grad(*m, |d| {
                    for r in 0..rows {
                        for c in 0..cols {
                            d[r * cols + c] += g[r] * vv[c];
                        }
                    }
                });
                self.add_grad(*v, |d| {
                    for c in 0..cols {
                        let mut acc = 0.0;
                        for r in 0..rows {
                            acc += mv[r * cols + c] * g[r];
                        }
                        d[c] += acc;
                    }
                });
            }
            Op::VecMat { v, m } => {
                let (rows, cols) = (self.nodes[m.0].shape[0], self.nodes[m.0].shape[1]);
                let mv = self.nodes[m.0].value.clone();
                let vv = self.nodes[v.0].value.clone();
                self.add_grad(*v, |d| {
                    for r in 0..rows {
                        let mut acc = 0.0;
                        for c in 0..cols {
                            acc += mv[r * cols + c] * g[c];
                        }
                        d[r] += acc;
                    }
                });
                self.add_grad(*m, |d| {
                    for r in 0..rows {
                        for c in 0..cols {
                            d[r * cols + c] += vv[r] * g[c];
                        }
                    }
                });
            }
            Op::Softmax { x } => {
                let y = self.nodes[idx].value.clone();
                let dot: f64 = g.iter().zip(&y).map(|(gi, yi)| gi * yi).sum();
                self.add_grad(*x, |d| {
                    for i in 0..g.len() {
                        d[i] += y[i] * (g[i] - dot);
                    }
                });
            }
            Op::ConvWide { x, w, b } => {
                let (c_in, t) = (self.nodes[x.0].shape[0], self.nodes[x.0].shape[1]);
                let (c_out, l) = (self.nodes[w.0].shape[0], self.nodes[w.0].shape[2]);
                let t_out = t + l - 1;
                let xv = self.nodes[x.0].value.clone();
                let wv = self.nodes[w.0].value.clone();
                self.add_grad(*b, |d| {
                    for o in 0..c_out {
                        let mut acc = 0.0;
                        for j in 0..t_out {
                            acc += g[o * t_out + j];
                        }
                        d[o] += acc;
                    }
                });
                self.add_grad(*w, |d| {
                    for o in 0..c_out {
                        for c in 0..c_in {
                            for u in 0..l {
                                let mut acc = 0.0;
                                for j in 0..t_out {
                                    let i = (j + u).wrapping_sub(l - 1);
                                    if i < t {
                                        acc += g[o * t_out + j] * xv[c * t + i];
                                    }
                                }
                                d[(o * c_in + c) * l + u] += acc;
                            }
                        }
                    }
                });
                self.add_grad(*x, |d| {
                    for c in 0..c_in {
                        for i in 0..t {
                            let mut acc = 0.0;
                            for o in 0..c_out {
                                for u in 0..l {
                                    let j = i + (l - 1) - u;
                                    acc += g[o * t_out + j] * wv[(o * c_in + c) * l + u];
                                }
                            }
                            d[c * t + i] += acc;
                        }
                    }
                });
            }
            Op::MaxPoolRows { x, argmax } => {
                let t = self.nodes[x.0].shape[1];
                self.add_grad(*x, |d| {
                    for (r, &j) in argmax.iter().enumerate() {
                        d[r * t + j] += g[r];
                    }
                });
            }
            Op::Concat { xs, axis } => {
                let out_shape = self.nodes[idx].shape.clone();
                match (out_shape.len(), axis) {
                    (1, 0) | (2, 0) => {
                        let mut offset = 0;
                        for &x in xs {
                            let len = self.nodes[x.0].value.len();
                            self.add_grad(x, |d| {
                                for i in 0..len {
                                    d[i] += g[offset + i];
                                }
                            });
                            offset += len;
                        }
                    }
                    (2, 1) => {
                        let rows = out_shape[0];
                        let total_cols = out_shape[1];
                        let mut col = 0;
                        for &x in xs {
                            let xc = self.nodes[x.0].shape[1];
                            self.add_grad(x, |d| {
                                for r in 0..rows {
                                    for c in 0..xc {
                                        d[r * xc + c] += g[r * total_cols + col + c];
                                    }
                                }
                            });
                            col += xc;
                        }
                    }
                    _ => unreachable!("validated at construction"),
                }
            }
            Op::StackCols { xs } => {
                let t = xs.len();
                for (j, &x) in xs.iter().enumerate() {
                    let h = self.nodes[x.0].shape[0];
                    self.add_grad(x, |d| {
                        for r in 0..h {
                            d[r] += g[r * t + j];
                        }
                    });
                }
            }
            Op::Col { x, idx: col } => {
                let t = self.nodes[x.0].shape[1];
                self.add_grad(*x, |d| {
                    for (r, gi) in g.iter().enumerate() {
                        d[r * t + col] += gi;
                    }
                });
            }
            Op::LookupCols { table, indices } => {
                let d_dim = self.nodes[table.0].shape[1];
                let n = indices.len();
                self.add_grad(*table, |d| {
                    for (j, &idx) in indices.iter().enumerate() {
                        if idx == 0 {
                            continue; // frozen padding row
                        }
                        for r in 0..d_dim {
                            d[idx * d_dim + r] += g[r * n + j];
                        }
                    }
                });
            }
            Op::Dropout { x, mask } => {
                self.add_grad(*x, |d| {
                    for i in 0..g.len() {
                        d[i] += g[i] * mask[i];
                    }
                });
            }
            Op::Outer { a, b } => {
                let av = self.nodes[a.0].value.clone();
                let bv = self.nodes[b.0].value.clone();
                let (n, m) = (av.len(), bv.len());
                self.add_grad(*a, |d| {
                    for i in 0..n {
                        let mut acc = 0.0;
                        for j in 0..m {
                            acc += g[i * m + j] * bv[j];
                        }
                        d[i] += acc;
                    }
                });
                self.add_grad(*b, |d| {
                    for j in 0..m {
                        let mut acc = 0.0;
                        for i in 0..n {
                            acc += g[i * m + j] * av[i];
                        }
                        d[j] += acc;
                    }
                });
            }
            Op::Cosine { a, b } => {
                let av = self.nodes[a.0].value.clone();
                let bv = self.nodes[b.0].value.clone();
                let (da, db) = cosine_grads(&av, &bv, g[0]);
                self.add_grad(*a, |d| accumulate(d, &da, 1.0));
                self.add_grad(*b, |d| accumulate(d, &db, 1.0));
            }
            Op::CosineRows { m, k } => {
                let (n, mw) = (self.nodes[m.0].shape[0], self.nodes[m.0].shape[1]);
                let mv = self.nodes[m.0].value.clone();
                let kv = self.nodes[k.0].value.clone();
                let mut dm = vec![0.0; n * mw];
                let mut dk = vec![0.0; mw];
                for r in 0..n {
                    let (dr, dkr) = cosine_grads(&mv[r * mw..(r + 1) * mw], &kv, g[r]);
                    dm[r * mw..(r + 1) * mw].copy_from_slice(&dr);
                    for j in 0..mw {
                        dk[j] += dkr[j];
                    }
                }
                self.add_grad(*m, |d| accumulate(d, &dm, 1.0));
                self.add_grad(*k, |d| accumulate(d, &dk, 1.0));
            }
            Op::CrossEntropy { logits, target, probs } => {
                let t = *target;
                self.add_grad(*logits, |d| {
                    for (i, &p) in probs.iter().enumerate() {
                        let onehot = if i == t { 1.0 } else { 0.0 };
                        d[i] += g[0] * (p - onehot);
                    }
                });
            }
            Op::Sum { x } => {
                self.add_grad(*x, |d| {
                    for di in d.iter_mut() {
                        *di += g[0];
                    }
                });
            }
            Op::Dot { a, b } => {
                let av = self.nodes[a.0].value.clone();
                let bv = self.nodes[b.0].value.clone();
                self.add_grad(*a, |d| accumulate(d, &bv, g[0]));
                self.add_grad(*b, |d| accumulate(d, &av, g[0]));
            }
            Op::Reshape { x } => {
                self.add_grad(*x, |d| accumulate(d, g, 1.0));
            }
            Op::ScaleBy { x, s } => {
                let sv = self.nodes[s.0].value[0];
                let xv = self.nodes[x.0].value.clone();
                self.add_grad(*x, |d| accumulate(d, g, sv));
                self.add_grad(*s, |d| {
                    let mut acc = 0.0;
                    for (gi, xi) in g.iter().zip(&xv) {
                        acc += gi * xi;
                    }
                    d[0] += acc;
                });
            }
        }
    }
}

fn accumulate(dst: &mut [f64], src: &[f64], scale: f64) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s * scale;
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            for j in 0..n {
                out[i * n + j] += av * b[p * n + j];
            }
        }
    }
    out
}

/// Max-shifted softmax over a slice.
pub fn softmax_raw(x: &[f64]) -> Vec<f64> {
    let max = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = x.iter().map(|&v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|&e| e / sum).collect()
}

/// Cosine similarity with the zero-vector convention (score 0 when either
/// side has zero norm).
pub fn cosine_raw(a: &[f64], b: &[f64]) -> f64 {
    let na = norm(a);
    let nb = norm(b);
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    dot / (na * nb)
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Gradients of `g * cosine(a, b)` with respect to `a` and `b`; zero when
/// either norm is zero, matching the forward convention.
fn cosine_grads(a: &[f64], b: &[f64], g: f64) -> (Vec<f64>, Vec<f64>) {
    let na = norm(a);
    let nb = norm(b);
    if na == 0.0 || nb == 0.0 {
        return (vec![0.0; a.len()], vec![0.0; b.len()]);
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let cos = dot / (na * nb);
    let da: Vec<f64> = a
        .iter()
        .zip(b)
        .map(|(&ai, &bi)| g * (bi / (na * nb) - cos * ai / (na * na)))
        .collect();
    let db: Vec<f64> = a
        .iter()
        .zip(b)
        .map(|(&ai, &bi)| g * (ai / (na * nb) - cos * bi / (nb * nb)))
        .collect();
    (da, db)
}
