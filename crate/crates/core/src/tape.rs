//! Reverse-mode differentiation on an operation tape.
//!
//! A `Tape` records every primitive applied during a forward pass and replays
//! them in reverse to accumulate gradients. One tape per training step; a tape
//! never crosses threads. All reductions run in fixed index order so results
//! are bitwise reproducible.
//!
//! Conventions baked in here:
//! - relu'(0) = 0 (strict `x > 0` test everywhere);
//! - arccos inputs are clamped to [-1+1e-7, 1-1e-7] before evaluation, and the
//!   backward rule evaluates -1/sqrt(1-u^2) at the clamped point, which bounds
//!   the derivative magnitude by ~2.2e3;
//! - max reductions break ties toward the first (lowest) index.

use crate::error::{contract, numeric, Result};
use crate::tensor::Tensor;

/// Handle to a node on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    pub fn index(&self) -> usize {
        self.0
    }
}

/// Clamp bound used by `arccos`: inputs are pulled into
/// [-1 + ARCCOS_CLAMP, 1 - ARCCOS_CLAMP].
pub const ARCCOS_CLAMP: f64 = 1e-7;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Matmul { a: Var, b: Var },
    Add { a: Var, b: Var },
    /// Broadcast a row vector over every row of a matrix.
    AddRow { a: Var, row: Var },
    Mul { a: Var, b: Var },
    Relu { x: Var },
    Negate { x: Var },
    Scale { x: Var, c: f64 },
    Sum { x: Var },
    Mean { x: Var },
    /// Row-wise (axis=1) or column-wise (axis=0) sum with kept axis.
    SumAxis { x: Var, axis: usize },
    /// Row-wise (axis=1) or column-wise (axis=0) l2 norm with kept axis.
    L2NormAxis { x: Var, axis: usize },
    /// Elementwise a / b; b may broadcast as (r,1), (1,c) or scalar.
    Divide { a: Var, b: Var },
    /// arccos with pre-clamped inputs; `clamped` caches the clamp output.
    Arccos { x: Var, clamped: Vec<f64> },
    Log { x: Var },
    Exp { x: Var },
    /// Max over an axis with kept axis; `arg` caches flat argmax indices.
    MaxAxis { x: Var, arg: Vec<usize> },
    /// Concatenate along axis 0.
    Concat { parts: Vec<Var> },
    /// Numerically stable log-softmax over rows.
    LogSoftmax { x: Var },
    /// Per-row gather: out[i] = x[i, idx[i]].
    Pick { x: Var, idx: Vec<usize> },
    /// Fused z / ||z|| per row; `norms` caches the row norms.
    FnNormalizeRows { x: Var, norms: Vec<f64> },
    /// Fused W_l / ||W_l|| per column; `norms` caches the column norms.
    WnNormalizeCols { x: Var, norms: Vec<f64> },
    /// Valid (no padding) stride-1 2-D convolution with bias.
    Conv2d { x: Var, w: Var, b: Var },
    /// 2x2 stride-2 max pooling; `arg` caches flat argmax indices.
    MaxPool2 { x: Var, arg: Vec<usize> },
    /// Shape-only view change.
    Reshape { x: Var },
}

struct Node {
    op: Op,
    value: Tensor,
}

/// Operation tape. Values are owned by the tape; gradients are produced by
/// [`Tape::backward`] and queried per [`Var`].
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), grads: Vec::new() }
    }

    fn push(&mut self, op: Op, value: Tensor) -> Var {
        self.nodes.push(Node { op, value });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    /// Register an input (data, parameter, or frozen constant) on the tape.
    pub fn leaf(&mut self, t: Tensor) -> Result<Var> {
        t.check_finite("leaf")?;
        Ok(self.push(Op::Leaf, t))
    }

    /// Value of a node.
    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    /// Two-dimensional view of a node's shape: 1-D `(n)` reads as `(1, n)`.
    fn dims2(&self, v: Var) -> (usize, usize) {
        let s = self.shape(v);
        match s.len() {
            1 => (1, s[0]),
            2 => (s[0], s[1]),
            _ => (s[0], s[1..].iter().product()),
        }
    }

    // ── Forward primitives ───────────────────────────────────────────────

    /// Matrix product. 1-D operands are promoted: `a` as a row, `b` as a
    /// column; the unit axis is dropped from the output.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let (m, k) = if sa.len() == 1 { (1, sa[0]) } else { (sa[0], sa[1]) };
        let (k2, n) = if sb.len() == 1 { (sb[0], 1) } else { (sb[0], sb[1]) };
        if sa.len() > 2 || sb.len() > 2 {
            return Err(contract(format!("matmul on shapes {sa:?} x {sb:?}")));
        }
        if k != k2 {
            return Err(contract(format!(
                "matmul inner dims differ: {sa:?} x {sb:?}"
            )));
        }
        let out = matmul_kernel(self.data(a), self.data(b), m, k, n);
        let shape = match (sa.len(), sb.len()) {
            (1, 1) => vec![1],
            (1, 2) => vec![n],
            (2, 1) => vec![m],
            _ => vec![m, n],
        };
        let t = Tensor::new(shape, out).map_err(|_| numeric("non-finite value in op matmul"))?;
        Ok(self.push(Op::Matmul { a, b }, t))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(contract(format!(
                "add shapes differ: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let data: Vec<f64> = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(x, y)| x + y)
            .collect();
        let t = Tensor::new(self.shape(a).to_vec(), data)
            .map_err(|_| numeric("non-finite value in op add"))?;
        Ok(self.push(Op::Add { a, b }, t))
    }

    /// a - b, recorded as add(a, negate(b)).
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let nb = self.negate(b)?;
        self.add(a, nb)
    }

    /// Add a length-`c` row vector to every row of an `(r, c)` matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (r, c) = self.dims2(a);
        if self.shape(row).iter().product::<usize>() != c {
            return Err(contract(format!(
                "add_row: {:?} rows cannot take row of shape {:?}",
                self.shape(a),
                self.shape(row)
            )));
        }
        let mut data = self.data(a).to_vec();
        let rowd = self.data(row);
        for i in 0..r {
            for j in 0..c {
                data[i * c + j] += rowd[j];
            }
        }
        let t = Tensor::new(self.shape(a).to_vec(), data)
            .map_err(|_| numeric("non-finite value in op add_row"))?;
        Ok(self.push(Op::AddRow { a, row }, t))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(contract(format!(
                "mul shapes differ: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let data: Vec<f64> = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(x, y)| x * y)
            .collect();
        let t = Tensor::new(self.shape(a).to_vec(), data)
            .map_err(|_| numeric("non-finite value in op mul"))?;
        Ok(self.push(Op::Mul { a, b }, t))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let data: Vec<f64> = self.data(x).iter().map(|v| v.max(0.0)).collect();
        let t = Tensor::new(self.shape(x).to_vec(), data)
            .map_err(|_| numeric("non-finite value in op relu"))?;
        Ok(self.push(Op::Relu { x }, t))
    }

    pub fn negate(&mut self, x: Var) -> Result<Var> {
        let data: Vec<f64> = self.data(x).iter().map(|v| -v).collect();
        let t = Tensor::new(self.shape(x).to_vec(), data)
            .map_err(|_| numeric("non-finite value in op negate"))?;
        Ok(self.push(Op::Negate { x }, t))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        if !c.is_finite() {
            return Err(numeric(format!("non-finite scale factor {c}")));
        }
        let data: Vec<f64> = self.data(x).iter().map(|v| c * v).collect();
        let t = Tensor::new(self.shape(x).to_vec(), data)
            .map_err(|_| numeric("non-finite value in op scale"))?;
        Ok(self.push(Op::Scale { x, c }, t))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s: f64 = self.data(x).iter().sum();
        if !s.is_finite() {
            return Err(numeric("non-finite value in op sum"));
        }
        Ok(self.push(Op::Sum { x }, Tensor::scalar(s)))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.data(x).len() as f64;
        let s: f64 = self.data(x).iter().sum::<f64>() / n;
        if !s.is_finite() {
            return Err(numeric("non-finite value in op mean"));
        }
        Ok(self.push(Op::Mean { x }, Tensor::scalar(s)))
    }

    /// Sum over one axis of a 2-D tensor, keeping the axis with extent 1.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let (r, c) = self.dims2(x);
        if axis > 1 {
            return Err(contract(format!("sum_axis axis {axis} out of range")));
        }
        let d = self.data(x);
        let (shape, data) = if axis == 1 {
            let mut out = vec![0.0; r];
            for i in 0..r {
                for j in 0..c {
                    out[i] += d[i * c + j];
                }
            }
            (vec![r, 1], out)
        } else {
            let mut out = vec![0.0; c];
            for i in 0..r {
                for j in 0..c {
                    out[j] += d[i * c + j];
                }
            }
            (vec![1, c], out)
        };
        let t = Tensor::new(shape, data).map_err(|_| numeric("non-finite value in op sum_axis"))?;
        Ok(self.push(Op::SumAxis { x, axis }, t))
    }

    /// ℓ2 norm over one axis of a 2-D tensor, keeping the axis with extent 1.
    /// A 1-D input is treated as a single row (axis=1 gives its norm).
    pub fn l2norm_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let (r, c) = self.dims2(x);
        if axis > 1 {
            return Err(contract(format!("l2norm_axis axis {axis} out of range")));
        }
        let d = self.data(x);
        let (shape, data) = if axis == 1 {
            let mut out = vec![0.0; r];
            for i in 0..r {
                let mut s = 0.0;
                for j in 0..c {
                    let v = d[i * c + j];
                    s += v * v;
                }
                out[i] = s.sqrt();
            }
            (vec![r, 1], out)
        } else {
            let mut out = vec![0.0; c];
            for j in 0..c {
                let mut s = 0.0;
                for i in 0..r {
                    let v = d[i * c + j];
                    s += v * v;
                }
                out[j] = s.sqrt();
            }
            (vec![1, c], out)
        };
        let t =
            Tensor::new(shape, data).map_err(|_| numeric("non-finite value in op l2norm_axis"))?;
        Ok(self.push(Op::L2NormAxis { x, axis }, t))
    }

    /// Elementwise division. `b` may share `a`'s shape or broadcast as a
    /// column `(r,1)`, a row `(1,c)`, or a scalar.
    pub fn divide(&mut self, a: Var, b: Var) -> Result<Var> {
        let (r, c) = self.dims2(a);
        let (br, bc) = self.dims2(b);
        let ok = (br == r && bc == c) || (br == r && bc == 1) || (br == 1 && bc == c)
            || (br == 1 && bc == 1);
        if !ok {
            return Err(contract(format!(
                "divide shapes incompatible: {:?} / {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let (ad, bd) = (self.data(a), self.data(b));
        let mut data = vec![0.0; ad.len()];
        for i in 0..r {
            for j in 0..c {
                let bi = broadcast_index(i, j, br, bc);
                data[i * c + j] = ad[i * c + j] / bd[bi];
            }
        }
        let t = Tensor::new(self.shape(a).to_vec(), data)
            .map_err(|_| numeric("non-finite value in op divide"))?;
        Ok(self.push(Op::Divide { a, b }, t))
    }

    /// Elementwise arccos with inputs clamped to `[-1+1e-7, 1-1e-7]`.
    pub fn arccos(&mut self, x: Var) -> Result<Var> {
        let lim = 1.0 - ARCCOS_CLAMP;
        let clamped: Vec<f64> = self.data(x).iter().map(|v| v.clamp(-lim, lim)).collect();
        let data: Vec<f64> = clamped.iter().map(|v| v.acos()).collect();
        let t = Tensor::new(self.shape(x).to_vec(), data)
            .map_err(|_| numeric("non-finite value in op arccos"))?;
        Ok(self.push(Op::Arccos { x, clamped }, t))
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        let data: Vec<f64> = self.data(x).iter().map(|v| v.ln()).collect();
        let t = Tensor::new(self.shape(x).to_vec(), data)
            .map_err(|_| numeric("non-finite value in op log"))?;
        Ok(self.push(Op::Log { x }, t))
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        let data: Vec<f64> = self.data(x).iter().map(|v| v.exp()).collect();
        let t = Tensor::new(self.shape(x).to_vec(), data)
            .map_err(|_| numeric("non-finite value in op exp"))?;
        Ok(self.push(Op::Exp { x }, t))
    }

    /// Max over one axis of a 2-D tensor, keeping the axis with extent 1.
    /// Ties break toward the first index.
    pub fn max_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let (r, c) = self.dims2(x);
        if axis > 1 {
            return Err(contract(format!("max_axis axis {axis} out of range")));
        }
        let d = self.data(x);
        let (shape, data, arg) = if axis == 1 {
            let mut out = vec![f64::NEG_INFINITY; r];
            let mut arg = vec![0usize; r];
            for i in 0..r {
                for j in 0..c {
                    let v = d[i * c + j];
                    if v > out[i] {
                        out[i] = v;
                        arg[i] = i * c + j;
                    }
                }
            }
            (vec![r, 1], out, arg)
        } else {
            let mut out = vec![f64::NEG_INFINITY; c];
            let mut arg = vec![0usize; c];
            for j in 0..c {
                for i in 0..r {
                    let v = d[i * c + j];
                    if v > out[j] {
                        out[j] = v;
                        arg[j] = i * c + j;
                    }
                }
            }
            (vec![1, c], out, arg)
        };
        let t = Tensor::new(shape, data).map_err(|_| numeric("non-finite value in op max_axis"))?;
        Ok(self.push(Op::MaxAxis { x, arg }, t))
    }

    /// Concatenate along axis 0. All parts must agree on trailing extents.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(contract("concat of zero tensors"));
        }
        let tail = self.shape(parts[0])[1..].to_vec();
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            if self.shape(p)[1..] != tail[..] {
                return Err(contract(format!(
                    "concat trailing shapes differ: {:?} vs {:?}",
                    self.shape(parts[0]),
                    self.shape(p)
                )));
            }
            rows += self.shape(p)[0];
            data.extend_from_slice(self.data(p));
        }
        let mut shape = vec![rows];
        shape.extend_from_slice(&tail);
        let t = Tensor::new(shape, data).map_err(|_| numeric("non-finite value in op concat"))?;
        Ok(self.push(Op::Concat { parts: parts.to_vec() }, t))
    }

    /// Numerically stable log-softmax over the rows of a 2-D tensor
    /// (a 1-D tensor is one row). Computed via max-shifted log-sum-exp.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.dims2(x);
        if c == 0 {
            return Err(contract("log_softmax on empty rows"));
        }
        let data = log_softmax_kernel(self.data(x), r, c);
        let t = Tensor::new(self.shape(x).to_vec(), data)
            .map_err(|_| numeric("non-finite value in op log_softmax"))?;
        Ok(self.push(Op::LogSoftmax { x }, t))
    }

    /// Per-row gather: out[i] = x[i, idx[i]] for a `(B, L)` input.
    pub fn pick(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let (r, c) = self.dims2(x);
        if idx.len() != r {
            return Err(contract(format!(
                "pick needs {r} indices, got {}",
                idx.len()
            )));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= c) {
            return Err(contract(format!("pick index {bad} out of range 0..{c}")));
        }
        let d = self.data(x);
        let data: Vec<f64> = idx.iter().enumerate().map(|(i, &j)| d[i * c + j]).collect();
        let t = Tensor::new(vec![r], data).map_err(|_| numeric("non-finite value in op pick"))?;
        Ok(self.push(Op::Pick { x, idx: idx.to_vec() }, t))
    }

    /// Project every row of a 2-D tensor onto the unit sphere: z / ||z||.
    /// Errors if any row norm falls below 1e-12.
    pub fn fn_normalize_rows(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.dims2(x);
        let d = self.data(x);
        let mut norms = vec![0.0; r];
        let mut data = vec![0.0; d.len()];
        for i in 0..r {
            let mut s = 0.0;
            for j in 0..c {
                s += d[i * c + j] * d[i * c + j];
            }
            let n = s.sqrt();
            if n < 1e-12 {
                return Err(numeric(format!(
                    "feature row {i} has near-zero norm {n:.3e} in fn_normalize"
                )));
            }
            norms[i] = n;
            for j in 0..c {
                data[i * c + j] = d[i * c + j] / n;
            }
        }
        let t = Tensor::new(self.shape(x).to_vec(), data)
            .map_err(|_| numeric("non-finite value in op fn_normalize"))?;
        Ok(self.push(Op::FnNormalizeRows { x, norms }, t))
    }

    /// Project every column of a 2-D tensor onto the unit sphere.
    /// Errors if any column norm falls below 1e-12.
    pub fn wn_normalize_cols(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.dims2(x);
        let d = self.data(x);
        let mut norms = vec![0.0; c];
        let mut data = vec![0.0; d.len()];
        for j in 0..c {
            let mut s = 0.0;
            for i in 0..r {
                s += d[i * c + j] * d[i * c + j];
            }
            let n = s.sqrt();
            if n < 1e-12 {
                return Err(numeric(format!(
                    "weight column {j} has near-zero norm {n:.3e} in wn_normalize"
                )));
            }
            norms[j] = n;
        }
        for i in 0..r {
            for j in 0..c {
                data[i * c + j] = d[i * c + j] / norms[j];
            }
        }
        let t = Tensor::new(self.shape(x).to_vec(), data)
            .map_err(|_| numeric("non-finite value in op wn_normalize"))?;
        Ok(self.push(Op::WnNormalizeCols { x, norms }, t))
    }

    /// Valid stride-1 2-D convolution: x `(B,Cin,H,W)`, w `(Cout,Cin,KH,KW)`,
    /// b `(Cout)` -> `(B,Cout,H-KH+1,W-KW+1)`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 4 || ws.len() != 4 || xs[1] != ws[1] {
            return Err(contract(format!("conv2d on shapes {xs:?}, {ws:?}")));
        }
        let (bn, cin, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (cout, _, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
        if kh > h || kw > wd {
            return Err(contract(format!("conv2d kernel {kh}x{kw} exceeds input {h}x{wd}")));
        }
        if self.data(b).len() != cout {
            return Err(contract("conv2d bias length must equal out channels"));
        }
        let (oh, ow) = (h - kh + 1, wd - kw + 1);
        let out = conv2d_kernel(
            self.data(x),
            self.data(w),
            self.data(b),
            bn,
            cin,
            h,
            wd,
            cout,
            kh,
            kw,
        );
        let t = Tensor::new(vec![bn, cout, oh, ow], out)
            .map_err(|_| numeric("non-finite value in op conv2d"))?;
        Ok(self.push(Op::Conv2d { x, w, b }, t))
    }

    /// 2x2 stride-2 max pooling on `(B,C,H,W)`; trailing odd row/column is
    /// dropped. Ties go to the first element in scan order.
    pub fn max_pool2(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 {
            return Err(contract(format!("max_pool2 on shape {xs:?}")));
        }
        let (bn, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (oh, ow) = (h / 2, w / 2);
        if oh == 0 || ow == 0 {
            return Err(contract(format!("max_pool2 input {h}x{w} too small")));
        }
        let d = self.data(x);
        let mut out = vec![0.0; bn * c * oh * ow];
        let mut arg = vec![0usize; out.len()];
        for b in 0..bn {
            for ch in 0..c {
                let base = (b * c + ch) * h * w;
                for i in 0..oh {
                    for j in 0..ow {
                        let mut best = f64::NEG_INFINITY;
                        let mut bi = 0;
                        for di in 0..2 {
                            for dj in 0..2 {
                                let idx = base + (2 * i + di) * w + (2 * j + dj);
                                if d[idx] > best {
                                    best = d[idx];
                                    bi = idx;
                                }
                            }
                        }
                        let o = ((b * c + ch) * oh + i) * ow + j;
                        out[o] = best;
                        arg[o] = bi;
                    }
                }
            }
        }
        let t = Tensor::new(vec![bn, c, oh, ow], out)
            .map_err(|_| numeric("non-finite value in op max_pool2"))?;
        Ok(self.push(Op::MaxPool2 { x, arg }, t))
    }

    /// Shape-only view change.
    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let t = self.nodes[x.0].value.reshaped(shape)?;
        Ok(self.push(Op::Reshape { x }, t))
    }

    // ── Backward ─────────────────────────────────────────────────────────

    /// Reverse sweep from a scalar seed node. Populates gradients for every
    /// node that influences the seed; query them with [`Tape::grad`].
    pub fn backward(&mut self, seed: Var) -> Result<()> {
        if self.nodes[seed.0].value.len() != 1 {
            return Err(contract(format!(
                "backward seed must be scalar, got shape {:?}",
                self.shape(seed)
            )));
        }
        for g in self.grads.iter_mut() {
            *g = None;
        }
        self.grads[seed.0] = Some(vec![1.0]);
        for id in (0..self.nodes.len()).rev() {
            let g = match self.grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            if let Some(bad) = g.iter().find(|v| !v.is_finite()) {
                return Err(numeric(format!("non-finite gradient {bad} at node {id}")));
            }
            self.propagate(id, &g)?;
            self.grads[id] = Some(g);
        }
        Ok(())
    }

    /// Gradient of the last backward seed w.r.t. `v`; zero tensor if the
    /// node did not influence the seed.
    pub fn grad(&self, v: Var) -> Tensor {
        match &self.grads[v.0] {
            Some(g) => Tensor::new(self.shape(v).to_vec(), g.clone())
                .expect("gradient finiteness checked during backward"),
            None => Tensor::zeros(self.shape(v).to_vec()),
        }
    }

    fn accumulate(&mut self, v: Var, delta: &[f64]) {
        let slot = &mut self.grads[v.0];
        match slot {
            Some(g) => {
                for (gi, di) in g.iter_mut().zip(delta) {
                    *gi += di;
                }
            }
            None => *slot = Some(delta.to_vec()),
        }
    }

    fn propagate(&mut self, id: usize, g: &[f64]) -> Result<()> {
        let op = self.nodes[id].op.clone();
        match op {
            Op::Leaf => {}
            Op::Matmul { a, b } => {
                let (m, k) = self.dims2(a);
                let (_, n) = self.dims2(b);
                let (ad, bd) = (self.data(a).to_vec(), self.data(b).to_vec());
                // dA = G B^T
                let mut da = vec![0.0; m * k];
                for i in 0..m {
                    for j in 0..n {
                        let gij = g[i * n + j];
                        for kk in 0..k {
                            da[i * k + kk] += gij * bd[kk * n + j];
                        }
                    }
                }
                // dB = A^T G
                let mut db = vec![0.0; k * n];
                for i in 0..m {
                    for kk in 0..k {
                        let aik = ad[i * k + kk];
                        for j in 0..n {
                            db[kk * n + j] += aik * g[i * n + j];
                        }
                    }
                }
                self.accumulate(a, &da);
                self.accumulate(b, &db);
            }
            Op::Add { a, b } => {
                self.accumulate(a, g);
                self.accumulate(b, g);
            }
            Op::AddRow { a, row } => {
                self.accumulate(a, g);
                let (r, c) = self.dims2(a);
                let mut dr = vec![0.0; c];
                for i in 0..r {
                    for j in 0..c {
                        dr[j] += g[i * c + j];
                    }
                }
                self.accumulate(row, &dr);
            }
            Op::Mul { a, b } => {
                let bd: Vec<f64> = self.data(b).iter().zip(g).map(|(x, gi)| x * gi).collect();
                let ad: Vec<f64> = self.data(a).iter().zip(g).map(|(x, gi)| x * gi).collect();
                self.accumulate(a, &bd);
                self.accumulate(b, &ad);
            }
            Op::Relu { x } => {
                let dx: Vec<f64> = self
                    .data(x)
                    .iter()
                    .zip(g)
                    .map(|(v, gi)| if *v > 0.0 { *gi } else { 0.0 })
                    .collect();
                self.accumulate(x, &dx);
            }
            Op::Negate { x } => {
                let dx: Vec<f64> = g.iter().map(|v| -v).collect();
                self.accumulate(x, &dx);
            }
            Op::Scale { x, c } => {
                let dx: Vec<f64> = g.iter().map(|v| c * v).collect();
                self.accumulate(x, &dx);
            }
            Op::Sum { x } => {
                let dx = vec![g[0]; self.data(x).len()];
                self.accumulate(x, &dx);
            }
            Op::Mean { x } => {
                let n = self.data(x).len() as f64;
                let dx = vec![g[0] / n; self.data(x).len()];
                self.accumulate(x, &dx);
            }
            Op::SumAxis { x, axis } => {
                let (r, c) = self.dims2(x);
                let mut dx = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        dx[i * c + j] = if axis == 1 { g[i] } else { g[j] };
                    }
                }
                self.accumulate(x, &dx);
            }
            Op::L2NormAxis { x, axis } => {
                // d||v|| / dv = v / ||v||; a vanished norm contributes zero.
                let (r, c) = self.dims2(x);
                let xd = self.data(x).to_vec();
                let norms = self.data(Var(id)).to_vec();
                let mut dx = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        let (n, gi) = if axis == 1 {
                            (norms[i], g[i])
                        } else {
                            (norms[j], g[j])
                        };
                        if n > 0.0 {
                            dx[i * c + j] = gi * xd[i * c + j] / n;
                        }
                    }
                }
                self.accumulate(x, &dx);
            }
            Op::Divide { a, b } => {
                let (r, c) = self.dims2(a);
                let (br, bc) = self.dims2(b);
                let (ad, bd) = (self.data(a).to_vec(), self.data(b).to_vec());
                let mut da = vec![0.0; ad.len()];
                let mut db = vec![0.0; bd.len()];
                for i in 0..r {
                    for j in 0..c {
                        let bi = broadcast_index(i, j, br, bc);
                        let gi = g[i * c + j];
                        da[i * c + j] = gi / bd[bi];
                        db[bi] += -gi * ad[i * c + j] / (bd[bi] * bd[bi]);
                    }
                }
                self.accumulate(a, &da);
                self.accumulate(b, &db);
            }
            Op::Arccos { x, clamped } => {
                // Derivative taken at the clamped point; never zeroed, so the
                // magnitude stays below 1/sqrt(2e-7 - 1e-14) ~ 2.24e3.
                let dx: Vec<f64> = clamped
                    .iter()
                    .zip(g)
                    .map(|(u, gi)| -gi / (1.0 - u * u).sqrt())
                    .collect();
                self.accumulate(x, &dx);
            }
            Op::Log { x } => {
                let dx: Vec<f64> = self.data(x).iter().zip(g).map(|(v, gi)| gi / v).collect();
                self.accumulate(x, &dx);
            }
            Op::Exp { x } => {
                let out = self.data(Var(id)).to_vec();
                let dx: Vec<f64> = out.iter().zip(g).map(|(v, gi)| gi * v).collect();
                self.accumulate(x, &dx);
            }
            Op::MaxAxis { x, arg, .. } => {
                let mut dx = vec![0.0; self.data(x).len()];
                for (o, &src) in arg.iter().enumerate() {
                    dx[src] += g[o];
                }
                self.accumulate(x, &dx);
            }
            Op::Concat { parts } => {
                let mut off = 0;
                for p in parts {
                    let n = self.data(p).len();
                    let slice = g[off..off + n].to_vec();
                    self.accumulate(p, &slice);
                    off += n;
                }
            }
            Op::LogSoftmax { x } => {
                // dx = g - softmax(x) * rowsum(g)
                let (r, c) = self.dims2(x);
                let out = self.data(Var(id)).to_vec();
                let mut dx = vec![0.0; r * c];
                for i in 0..r {
                    let mut gs = 0.0;
                    for j in 0..c {
                        gs += g[i * c + j];
                    }
                    for j in 0..c {
                        dx[i * c + j] = g[i * c + j] - out[i * c + j].exp() * gs;
                    }
                }
                self.accumulate(x, &dx);
            }
            Op::Pick { x, idx } => {
                let (_, c) = self.dims2(x);
                let mut dx = vec![0.0; self.data(x).len()];
                for (i, &j) in idx.iter().enumerate() {
                    dx[i * c + j] += g[i];
                }
                self.accumulate(x, &dx);
            }
            Op::FnNormalizeRows { x, norms } => {
                // d(z/||z||) pullback: (g*s - z~*t) / ||z|| per row, with
                // s = z~.z~ and t = z~.g summed in one fixed order so that a
                // gradient parallel to z~ cancels exactly.
                let (r, c) = self.dims2(x);
                let zt = self.data(Var(id)).to_vec();
                let mut dx = vec![0.0; r * c];
                for i in 0..r {
                    let mut s = 0.0;
                    let mut t = 0.0;
                    for j in 0..c {
                        s += zt[i * c + j] * zt[i * c + j];
                        t += zt[i * c + j] * g[i * c + j];
                    }
                    for j in 0..c {
                        dx[i * c + j] = (g[i * c + j] * s - zt[i * c + j] * t) / norms[i];
                    }
                }
                self.accumulate(x, &dx);
            }
            Op::WnNormalizeCols { x, norms } => {
                let (r, c) = self.dims2(x);
                let wt = self.data(Var(id)).to_vec();
                let mut dx = vec![0.0; r * c];
                for j in 0..c {
                    let mut s = 0.0;
                    let mut t = 0.0;
                    for i in 0..r {
                        s += wt[i * c + j] * wt[i * c + j];
                        t += wt[i * c + j] * g[i * c + j];
                    }
                    for i in 0..r {
                        dx[i * c + j] = (g[i * c + j] * s - wt[i * c + j] * t) / norms[j];
                    }
                }
                self.accumulate(x, &dx);
            }
            Op::Conv2d { x, w, b } => {
                let xs = self.shape(x).to_vec();
                let ws = self.shape(w).to_vec();
                let (bn, cin, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
                let (cout, kh, kw) = (ws[0], ws[2], ws[3]);
                let (oh, ow) = (h - kh + 1, wd - kw + 1);
                let xd = self.data(x).to_vec();
                let wdat = self.data(w).to_vec();
                let mut dx = vec![0.0; xd.len()];
                let mut dw = vec![0.0; wdat.len()];
                let mut db = vec![0.0; cout];
                for bi in 0..bn {
                    for co in 0..cout {
                        let gbase = ((bi * cout) + co) * oh * ow;
                        for i in 0..oh {
                            for j in 0..ow {
                                let gv = g[gbase + i * ow + j];
                                if gv == 0.0 {
                                    continue;
                                }
                                db[co] += gv;
                                for ci in 0..cin {
                                    let xbase = ((bi * cin) + ci) * h * wd;
                                    let wbase = ((co * cin) + ci) * kh * kw;
                                    for di in 0..kh {
                                        for dj in 0..kw {
                                            let xi = xbase + (i + di) * wd + (j + dj);
                                            let wi = wbase + di * kw + dj;
                                            dx[xi] += gv * wdat[wi];
                                            dw[wi] += gv * xd[xi];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                self.accumulate(x, &dx);
                self.accumulate(w, &dw);
                self.accumulate(b, &db);
            }
            Op::MaxPool2 { x, arg } => {
                let mut dx = vec![0.0; self.data(x).len()];
                for (o, &src) in arg.iter().enumerate() {
                    dx[src] += g[o];
                }
                self.accumulate(x, &dx);
            }
            Op::Reshape { x } => {
                self.accumulate(x, g);
            }
        }
        Ok(())
    }
}

#[inline]
fn broadcast_index(i: usize, j: usize, br: usize, bc: usize) -> usize {
    let bi = if br == 1 { 0 } else { i };
    let bj = if bc == 1 { 0 } else { j };
    bi * bc + bj
}

fn matmul_kernel(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for kk in 0..k {
            let aik = a[i * k + kk];
            if aik == 0.0 {
                continue;
            }
            let brow = &b[kk * n..(kk + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += aik * brow[j];
            }
        }
    }
    out
}

/// Max-shifted log-softmax over `r` rows of length `c`.
pub(crate) fn log_softmax_kernel(x: &[f64], r: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        let row = &x[i * c..(i + 1) * c];
        let m = row.iter().fold(f64::NEG_INFINITY, |a, &v| a.max(v));
        let lse = row.iter().map(|v| (v - m).exp()).sum::<f64>().ln() + m;
        for j in 0..c {
            out[i * c + j] = row[j] - lse;
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn conv2d_kernel(
    x: &[f64],
    w: &[f64],
    b: &[f64],
    bn: usize,
    cin: usize,
    h: usize,
    wd: usize,
    cout: usize,
    kh: usize,
    kw: usize,
) -> Vec<f64> {
    let (oh, ow) = (h - kh + 1, wd - kw + 1);
    let mut out = vec![0.0; bn * cout * oh * ow];
    for bi in 0..bn {
        for co in 0..cout {
            let obase = ((bi * cout) + co) * oh * ow;
            for v in &mut out[obase..obase + oh * ow] {
                *v = b[co];
            }
            for ci in 0..cin {
                let xbase = ((bi * cin) + ci) * h * wd;
                let wbase = ((co * cin) + ci) * kh * kw;
                for i in 0..oh {
                    for j in 0..ow {
                        let mut acc = 0.0;
                        for di in 0..kh {
                            let xrow = xbase + (i + di) * wd + j;
                            let wrow = wbase + di * kw;
                            for dj in 0..kw {
                                acc += x[xrow + dj] * w[wrow + dj];
                            }
                        }
                        out[obase + i * ow + j] += acc;
                    }
                }
            }
        }
    }
    out
}

/// Stable log-softmax on a plain tensor (rows of a 2-D tensor, or one row
/// for 1-D input). Shares the kernel with the tape op.
pub fn stable_log_softmax(logits: &Tensor) -> Result<Tensor> {
    if logits.is_empty() {
        return Err(contract("log_softmax on empty tensor"));
    }
    let (r, c) = match logits.shape().len() {
        1 => (1, logits.shape()[0]),
        2 => (logits.shape()[0], logits.shape()[1]),
        s => return Err(contract(format!("log_softmax on {s}-d tensor"))),
    };
    let data = log_softmax_kernel(logits.data(), r, c);
    Tensor::new(logits.shape().to_vec(), data)
}

/// Softmax probabilities on a plain tensor, via `stable_log_softmax`.
pub fn softmax(logits: &Tensor) -> Result<Tensor> {
    let ls = stable_log_softmax(logits)?;
    let data: Vec<f64> = ls.data().iter().map(|v| v.exp()).collect();
    Tensor::new(ls.shape().to_vec(), data)
}
