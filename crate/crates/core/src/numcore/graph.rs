use super::conv::{correlate_valid, correlate_valid_adjoint, pad_plane, pad_plane_adjoint, Padding};
use super::tensor::reduce_sum_axes;
use super::{Real, Tensor};
use crate::error::{dim_err, Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op<T: Real> {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, T),
    Offset(Var),
    Tanh(Var),
    Sigmoid(Var),
    Square(Var),
    LogClamp(Var, T, T),
    Sum(Var),
    Mean(Var, Vec<usize>, usize),
    Softmax(Var),
    LayerNorm(Var, Var, Var),
    Pad(Var, Padding<T>),
    Window { src: Var, row: usize, col: usize },
    Conv(Var, Var),
    Reshape(Var),
    Slice(Var, usize),
    Concat(Vec<Var>),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    Gather(Var, Vec<Vec<(usize, T)>>),
}

const LN_EPS: f64 = 1e-5;

/// Reverse-mode tape.
///
/// Nodes are appended in evaluation order, so the node list is already a
/// topological order and backward is a single reverse sweep.
#[derive(Clone, Debug, Default)]
pub struct Graph<T: Real = f64> {
    ops: Vec<Op<T>>,
    shapes: Vec<Vec<usize>>,
    values: Vec<Vec<T>>,
    needs_grad: Vec<bool>,
    grads: Vec<Option<Vec<T>>>,
}

pub(crate) fn matmul_into<T: Real>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
}

/// Dot product with eight interleaved partial sums, which lets the
/// compiler vectorize; the summation order is fixed, so results stay
/// deterministic.
fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..8 {
            acc[l] += x[l] * y[l];
        }
    }
    let mut tail = T::zero();
    for (x, y) in ra.iter().zip(rb) {
        tail += *x * *y;
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

fn add_into<T: Real>(dst: &mut Option<Vec<T>>, len: usize, f: impl FnOnce(&mut [T])) {
    let buf = dst.get_or_insert_with(|| vec![T::zero(); len]);
    f(buf);
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            ops: Vec::new(),
            shapes: Vec::new(),
            values: Vec::new(),
            needs_grad: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    fn push(&mut self, op: Op<T>, shape: Vec<usize>, value: Vec<T>, needs_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.ops.push(op);
        self.shapes.push(shape);
        self.values.push(value);
        self.needs_grad.push(needs_grad);
        self.grads.push(None);
        Var(self.ops.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.needs_grad[v.0]
    }

    /// Records a leaf; it is differentiable when `tensor.requires_grad`.
    pub fn leaf(&mut self, tensor: &Tensor<T>) -> Var {
        self.push(
            Op::Leaf,
            tensor.shape().to_vec(),
            tensor.data().to_vec(),
            tensor.requires_grad,
        )
    }

    pub fn param(&mut self, shape: &[usize], data: Vec<T>) -> Result<Var> {
        let t = Tensor::new(shape, data)?.with_grad();
        Ok(self.leaf(&t))
    }

    pub fn constant(&mut self, tensor: &Tensor<T>) -> Var {
        self.push(Op::Leaf, tensor.shape().to_vec(), tensor.data().to_vec(), false)
    }

    pub fn constant_from(&mut self, shape: &[usize], data: Vec<T>) -> Result<Var> {
        let t = Tensor::new(shape, data)?;
        Ok(self.constant(&t))
    }

    pub fn scalar_const(&mut self, v: T) -> Var {
        self.push(Op::Leaf, vec![], vec![v], false)
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.values[v.0]
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.shapes[v.0]
    }

    pub fn scalar(&self, v: Var) -> T {
        self.values[v.0][0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.needs_grad[v.0]
    }

    pub fn tensor(&self, v: Var) -> Tensor<T> {
        Tensor::new(&self.shapes[v.0], self.values[v.0].clone()).expect("node shape is consistent")
    }

    /// Gradient accumulated on a leaf by [`Graph::backward`].
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads[v.0].as_deref()
    }

    pub fn zero_grads(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
    }

    // ---- linear algebra ----

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (&self.shapes[a.0], &self.shapes[b.0]);
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(dim_err(format!("matmul of {:?} and {:?}", sa, sb)));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        matmul_into(&self.values[a.0], &self.values[b.0], &mut out, m, k, n);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Op::MatMul(a, b), vec![m, n], out, ng))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = &self.shapes[a.0];
        if s.len() != 2 {
            return Err(dim_err(format!("transpose of rank-{} tensor", s.len())));
        }
        let (m, n) = (s[0], s[1]);
        let src = &self.values[a.0];
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = src[i * n + j];
            }
        }
        let ng = self.ng(a);
        Ok(self.push(Op::Transpose(a), vec![n, m], out, ng))
    }

    // ---- elementwise ----

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shapes[a.0] != self.shapes[b.0] {
            return Err(dim_err(format!(
                "{} of {:?} and {:?}",
                what, self.shapes[a.0], self.shapes[b.0]
            )));
        }
        Ok(())
    }

    fn binary(&mut self, a: Var, b: Var, op: Op<T>, f: impl Fn(T, T) -> T, what: &str) -> Result<Var> {
        self.same_shape(a, b, what)?;
        let out: Vec<T> = self.values[a.0]
            .iter()
            .zip(&self.values[b.0])
            .map(|(&x, &y)| f(x, y))
            .collect();
        let ng = self.ng(a) || self.ng(b);
        let shape = self.shapes[a.0].clone();
        Ok(self.push(op, shape, out, ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Add(a, b), |x, y| x + y, "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Sub(a, b), |x, y| x - y, "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Mul(a, b), |x, y| x * y, "mul")
    }

    /// `a[m, n] + b[n]` broadcast over rows.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (&self.shapes[a.0], &self.shapes[b.0]);
        if sa.len() != 2 || sb.len() != 1 || sa[1] != sb[0] {
            return Err(dim_err(format!("row broadcast of {:?} onto {:?}", sb, sa)));
        }
        let n = sa[1];
        let bias = &self.values[b.0];
        let out: Vec<T> = self.values[a.0]
            .iter()
            .enumerate()
            .map(|(i, &x)| x + bias[i % n])
            .collect();
        let ng = self.ng(a) || self.ng(b);
        let shape = sa.clone();
        Ok(self.push(Op::AddRow(a, b), shape, out, ng))
    }

    fn unary(&mut self, a: Var, op: Op<T>, f: impl Fn(T) -> T) -> Var {
        let out: Vec<T> = self.values[a.0].iter().map(|&x| f(x)).collect();
        let ng = self.ng(a);
        let shape = self.shapes[a.0].clone();
        self.push(op, shape, out, ng)
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        self.unary(a, Op::Scale(a, s), |x| x * s)
    }

    pub fn offset(&mut self, a: Var, s: T) -> Var {
        self.unary(a, Op::Offset(a), |x| x + s)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -T::one())
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Op::Tanh(a), |x| x.tanh())
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sigmoid(a), sigmoid)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, Op::Square(a), |x| x * x)
    }

    /// `ln(clamp(x, lo, hi))`; zero derivative where the clamp is active.
    pub fn log_clamped(&mut self, a: Var, lo: T, hi: T) -> Var {
        self.unary(a, Op::LogClamp(a, lo, hi), |x| x.max(lo).min(hi).ln())
    }

    // ---- reductions ----

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.values[a.0].iter().copied().sum();
        let ng = self.ng(a);
        self.push(Op::Sum(a), vec![], vec![s], ng)
    }

    /// Mean over `axes` (all axes when empty).
    pub fn reduce_mean(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let (shape, sums, count) = reduce_sum_axes(&self.shapes[a.0], &self.values[a.0], axes)?;
        let inv = T::one() / T::from_usize(count).unwrap();
        let out = sums.into_iter().map(|s| s * inv).collect();
        let ng = self.ng(a);
        Ok(self.push(Op::Mean(a, axes.to_vec(), count), shape, out, ng))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        self.reduce_mean(a, &[])
    }

    // ---- attention pieces ----

    /// Row softmax of `[m, n]`. With `causal`, row `i` only sees columns
    /// `j <= i + (n - m)`; masked entries are exactly zero.
    pub fn softmax_rows(&mut self, a: Var, causal: bool) -> Result<Var> {
        let s = &self.shapes[a.0];
        if s.len() != 2 {
            return Err(dim_err(format!("softmax of {:?}", s)));
        }
        let (m, n) = (s[0], s[1]);
        if causal && m > n {
            return Err(dim_err(format!("causal softmax needs rows <= cols, got {:?}", s)));
        }
        let x = &self.values[a.0];
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            let lim = if causal { i + (n - m) + 1 } else { n };
            let row = &x[i * n..i * n + lim];
            let mx = row.iter().fold(T::neg_infinity(), |acc, &v| acc.max(v));
            let mut tot = T::zero();
            for (j, &v) in row.iter().enumerate() {
                let e = (v - mx).exp();
                out[i * n + j] = e;
                tot += e;
            }
            for o in &mut out[i * n..i * n + lim] {
                *o /= tot;
            }
        }
        let ng = self.ng(a);
        let shape = vec![m, n];
        Ok(self.push(Op::Softmax(a), shape, out, ng))
    }

    /// Row layer normalization with affine gain and bias of length `n`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let s = self.shapes[x.0].clone();
        if s.len() != 2 || self.shapes[gamma.0] != [s[1]] || self.shapes[beta.0] != [s[1]] {
            return Err(dim_err(format!(
                "layer norm of {:?} with gain {:?}",
                s, self.shapes[gamma.0]
            )));
        }
        let (m, n) = (s[0], s[1]);
        let xv = &self.values[x.0];
        let (g, b) = (&self.values[gamma.0], &self.values[beta.0]);
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            let row = &xv[i * n..(i + 1) * n];
            let (mu, inv) = row_stats(row);
            for j in 0..n {
                out[i * n + j] = g[j] * ((row[j] - mu) * inv) + b[j];
            }
        }
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        Ok(self.push(Op::LayerNorm(x, gamma, beta), s, out, ng))
    }

    // ---- stencils ----

    /// Pads a `[h, w]` plane with a one-cell halo.
    pub fn pad(&mut self, a: Var, mode: Padding<T>) -> Result<Var> {
        let s = &self.shapes[a.0];
        if s.len() != 2 {
            return Err(dim_err(format!("pad expects a plane, got {:?}", s)));
        }
        let (h, w) = (s[0], s[1]);
        let out = pad_plane(&self.values[a.0], h, w, &mode)?;
        let ng = self.ng(a);
        Ok(self.push(Op::Pad(a, mode), vec![h + 2, w + 2], out, ng))
    }

    /// `[h, w]` window of a plane starting at `(row, col)`.
    pub fn window(&mut self, a: Var, row: usize, col: usize, h: usize, w: usize) -> Result<Var> {
        let s = &self.shapes[a.0];
        if s.len() != 2 || row + h > s[0] || col + w > s[1] {
            return Err(dim_err(format!(
                "window {}x{} at ({}, {}) of {:?}",
                h, w, row, col, s
            )));
        }
        let sw = s[1];
        let src = &self.values[a.0];
        let mut out = Vec::with_capacity(h * w);
        for i in 0..h {
            out.extend_from_slice(&src[(row + i) * sw + col..(row + i) * sw + col + w]);
        }
        let ng = self.ng(a);
        Ok(self.push(Op::Window { src: a, row, col }, vec![h, w], out, ng))
    }

    /// Valid 3x3 cross-correlation of `[c, H, W]` with `[co, c, 3, 3]`.
    pub fn conv_valid(&mut self, field: Var, kernel: Var) -> Result<Var> {
        let (sf, sk) = (&self.shapes[field.0], &self.shapes[kernel.0]);
        if sf.len() != 3 || sk.len() != 4 || sk[1] != sf[0] || sk[2] != 3 || sk[3] != 3 {
            return Err(dim_err(format!("conv of field {:?} with kernel {:?}", sf, sk)));
        }
        let (c, hh, ww, co) = (sf[0], sf[1], sf[2], sk[0]);
        let out = correlate_valid(&self.values[field.0], c, hh, ww, &self.values[kernel.0], co)?;
        let ng = self.ng(field) || self.ng(kernel);
        Ok(self.push(Op::Conv(field, kernel), vec![co, hh - 2, ww - 2], out, ng))
    }

    /// Same-size 3x3 convolution: every channel plane is padded, then
    /// correlated. `None` padding shrinks the output by two in each axis.
    pub fn conv2d(&mut self, field: Var, kernel: Var, padding: Option<Padding<T>>) -> Result<Var> {
        let sf = self.shapes[field.0].clone();
        if sf.len() != 3 {
            return Err(dim_err(format!("conv2d expects [c, h, w], got {:?}", sf)));
        }
        let sk = &self.shapes[kernel.0];
        if sk.len() != 4 || sk[1] != sf[0] {
            return Err(dim_err(format!(
                "kernel {:?} does not match {} input channels",
                sk, sf[0]
            )));
        }
        let Some(mode) = padding else {
            return self.conv_valid(field, kernel);
        };
        let (c, h, w) = (sf[0], sf[1], sf[2]);
        let mut planes = Vec::with_capacity(c);
        for ci in 0..c {
            let p = self.slice(field, ci * h * w, &[h, w])?;
            planes.push(self.pad(p, mode.clone())?);
        }
        let padded = self.concat(&planes, &[c, h + 2, w + 2])?;
        self.conv_valid(padded, kernel)
    }

    // ---- layout ----

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        if shape.iter().product::<usize>() != self.values[a.0].len() {
            return Err(dim_err(format!(
                "reshape {:?} into {:?}",
                self.shapes[a.0], shape
            )));
        }
        let out = self.values[a.0].clone();
        let ng = self.ng(a);
        Ok(self.push(Op::Reshape(a), shape.to_vec(), out, ng))
    }

    /// Contiguous flat slice starting at `start`, viewed as `shape`.
    pub fn slice(&mut self, a: Var, start: usize, shape: &[usize]) -> Result<Var> {
        let len: usize = shape.iter().product();
        if start + len > self.values[a.0].len() {
            return Err(dim_err(format!(
                "slice [{}, {}) of {} values",
                start,
                start + len,
                self.values[a.0].len()
            )));
        }
        let out = self.values[a.0][start..start + len].to_vec();
        let ng = self.ng(a);
        Ok(self.push(Op::Slice(a, start), shape.to_vec(), out, ng))
    }

    /// Flat concatenation viewed as `shape`.
    pub fn concat(&mut self, parts: &[Var], shape: &[usize]) -> Result<Var> {
        let total: usize = parts.iter().map(|p| self.values[p.0].len()).sum();
        if total != shape.iter().product::<usize>() {
            return Err(dim_err(format!(
                "concat of {} values into {:?}",
                total, shape
            )));
        }
        let mut out = Vec::with_capacity(total);
        for p in parts {
            out.extend_from_slice(&self.values[p.0]);
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(Op::Concat(parts.to_vec()), shape.to_vec(), out, ng))
    }

    /// Stacks `[r_i, n]` matrices vertically.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let n = match parts.first() {
            Some(p) => *self.shapes[p.0].last().unwrap_or(&1),
            None => return Err(Error::Degenerate("concat of zero tensors".into())),
        };
        let mut rows = 0;
        for p in parts {
            let s = &self.shapes[p.0];
            if s.len() != 2 || s[1] != n {
                return Err(dim_err(format!("row concat of {:?} with width {}", s, n)));
            }
            rows += s[0];
        }
        self.concat(parts, &[rows, n])
    }

    /// Columns `[start, start + len)` of a matrix.
    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let s = &self.shapes[a.0];
        if s.len() != 2 || start + len > s[1] {
            return Err(dim_err(format!("columns [{}, {}) of {:?}", start, start + len, s)));
        }
        let (m, n) = (s[0], s[1]);
        let src = &self.values[a.0];
        let mut out = Vec::with_capacity(m * len);
        for i in 0..m {
            out.extend_from_slice(&src[i * n + start..i * n + start + len]);
        }
        let ng = self.ng(a);
        Ok(self.push(Op::SliceCols(a, start), vec![m, len], out, ng))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let m = match parts.first() {
            Some(p) => self.shapes[p.0][0],
            None => return Err(Error::Degenerate("concat of zero tensors".into())),
        };
        let mut n = 0;
        for p in parts {
            let s = &self.shapes[p.0];
            if s.len() != 2 || s[0] != m {
                return Err(dim_err(format!("column concat of {:?} with {} rows", s, m)));
            }
            n += s[1];
        }
        let mut out = vec![T::zero(); m * n];
        let mut col = 0;
        for p in parts {
            let w = self.shapes[p.0][1];
            let src = &self.values[p.0];
            for i in 0..m {
                out[i * n + col..i * n + col + w].copy_from_slice(&src[i * w..(i + 1) * w]);
            }
            col += w;
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(Op::ConcatCols(parts.to_vec()), vec![m, n], out, ng))
    }

    /// `out[k] = sum_{(i, w) in entries[k]} w * a[i]` over flat indices.
    pub fn gather(&mut self, a: Var, entries: Vec<Vec<(usize, T)>>) -> Result<Var> {
        let src = &self.values[a.0];
        let mut out = Vec::with_capacity(entries.len());
        for e in &entries {
            let mut acc = T::zero();
            for &(i, w) in e {
                if i >= src.len() {
                    return Err(dim_err(format!("gather index {} of {}", i, src.len())));
                }
                acc += w * src[i];
            }
            out.push(acc);
        }
        let ng = self.ng(a);
        let shape = vec![entries.len()];
        Ok(self.push(Op::Gather(a, entries), shape, out, ng))
    }

    // ---- backward ----

    /// Reverse sweep from a scalar `loss`. Leaf gradients accumulate across
    /// calls; intermediate gradients are rebuilt each time.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.values[loss.0].len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shapes[loss.0]
            )));
        }
        for (i, op) in self.ops.iter().enumerate() {
            if !matches!(op, Op::Leaf) {
                self.grads[i] = None;
            }
        }
        if !self.needs_grad[loss.0] {
            return Ok(());
        }
        match &self.ops[loss.0] {
            Op::Leaf => {
                add_into(&mut self.grads[loss.0], 1, |g| g[0] += T::one());
                return Ok(());
            }
            _ => self.grads[loss.0] = Some(vec![T::one()]),
        }
        for i in (0..=loss.0).rev() {
            if !self.needs_grad[i] || matches!(self.ops[i], Op::Leaf) {
                continue;
            }
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            self.propagate(i, &g);
        }
        Ok(())
    }

    fn propagate(&mut self, i: usize, g: &[T]) {
        let Self {
            ops,
            shapes,
            values,
            needs_grad,
            grads,
        } = self;
        let val = |v: Var| -> &[T] { &values[v.0] };
        let len = |v: Var| values[v.0].len();
        match &ops[i] {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (shapes[a.0][0], shapes[a.0][1]);
                let n = shapes[b.0][1];
                if needs_grad[a.0] {
                    let bv = val(*b);
                    add_into(&mut grads[a.0], m * k, |ga| {
                        for r in 0..m {
                            let grow = &g[r * n..(r + 1) * n];
                            for p in 0..k {
                                ga[r * k + p] += dot(grow, &bv[p * n..(p + 1) * n]);
                            }
                        }
                    });
                }
                if needs_grad[b.0] {
                    let av = val(*a);
                    add_into(&mut grads[b.0], k * n, |gb| {
                        for r in 0..m {
                            let grow = &g[r * n..(r + 1) * n];
                            for p in 0..k {
                                let arp = av[r * k + p];
                                let dst = &mut gb[p * n..(p + 1) * n];
                                for (d, &x) in dst.iter_mut().zip(grow) {
                                    *d += arp * x;
                                }
                            }
                        }
                    });
                }
            }
            Op::Transpose(a) => {
                let (m, n) = (shapes[a.0][0], shapes[a.0][1]);
                add_into(&mut grads[a.0], m * n, |ga| {
                    for r in 0..m {
                        for c in 0..n {
                            ga[r * n + c] += g[c * m + r];
                        }
                    }
                });
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(ops[i], Op::Sub(..)) {
                    -T::one()
                } else {
                    T::one()
                };
                if needs_grad[a.0] {
                    add_into(&mut grads[a.0], g.len(), |ga| {
                        ga.iter_mut().zip(g).for_each(|(d, &x)| *d += x)
                    });
                }
                if needs_grad[b.0] {
                    add_into(&mut grads[b.0], g.len(), |gb| {
                        gb.iter_mut().zip(g).for_each(|(d, &x)| *d += sign * x)
                    });
                }
            }
            Op::Mul(a, b) => {
                if needs_grad[a.0] {
                    let bv = val(*b);
                    add_into(&mut grads[a.0], g.len(), |ga| {
                        for j in 0..g.len() {
                            ga[j] += g[j] * bv[j];
                        }
                    });
                }
                if needs_grad[b.0] {
                    let av = val(*a);
                    add_into(&mut grads[b.0], g.len(), |gb| {
                        for j in 0..g.len() {
                            gb[j] += g[j] * av[j];
                        }
                    });
                }
            }
            Op::AddRow(a, b) => {
                let n = shapes[b.0][0];
                if needs_grad[a.0] {
                    add_into(&mut grads[a.0], g.len(), |ga| {
                        ga.iter_mut().zip(g).for_each(|(d, &x)| *d += x)
                    });
                }
                if needs_grad[b.0] {
                    add_into(&mut grads[b.0], n, |gb| {
                        for (j, &x) in g.iter().enumerate() {
                            gb[j % n] += x;
                        }
                    });
                }
            }
            Op::Scale(a, s) => {
                let s = *s;
                add_into(&mut grads[a.0], g.len(), |ga| {
                    ga.iter_mut().zip(g).for_each(|(d, &x)| *d += s * x)
                });
            }
            Op::Offset(a) => {
                add_into(&mut grads[a.0], g.len(), |ga| {
                    ga.iter_mut().zip(g).for_each(|(d, &x)| *d += x)
                });
            }
            Op::Tanh(a) => {
                let y = &values[i];
                add_into(&mut grads[a.0], g.len(), |ga| {
                    for j in 0..g.len() {
                        ga[j] += g[j] * (T::one() - y[j] * y[j]);
                    }
                });
            }
            Op::Sigmoid(a) => {
                let y = &values[i];
                add_into(&mut grads[a.0], g.len(), |ga| {
                    for j in 0..g.len() {
                        ga[j] += g[j] * y[j] * (T::one() - y[j]);
                    }
                });
            }
            Op::Square(a) => {
                let x = val(*a);
                let two = T::lit(2.0);
                add_into(&mut grads[a.0], g.len(), |ga| {
                    for j in 0..g.len() {
                        ga[j] += two * x[j] * g[j];
                    }
                });
            }
            Op::LogClamp(a, lo, hi) => {
                let x = val(*a);
                let (lo, hi) = (*lo, *hi);
                add_into(&mut grads[a.0], g.len(), |ga| {
                    for j in 0..g.len() {
                        if x[j] >= lo && x[j] <= hi {
                            ga[j] += g[j] / x[j];
                        }
                    }
                });
            }
            Op::Sum(a) => {
                let n = len(*a);
                add_into(&mut grads[a.0], n, |ga| ga.iter_mut().for_each(|d| *d += g[0]));
            }
            Op::Mean(a, axes, count) => {
                let shape = &shapes[a.0];
                let n = len(*a);
                let inv = T::one() / T::from_usize(*count).unwrap();
                add_into(&mut grads[a.0], n, |ga| {
                    let mut idx = vec![0usize; shape.len()];
                    for d in ga.iter_mut() {
                        let mut o = 0;
                        for (ax, &ix) in idx.iter().enumerate() {
                            if !(axes.is_empty() || axes.contains(&ax)) {
                                o = o * shape[ax] + ix;
                            }
                        }
                        *d += g[o] * inv;
                        for ax in (0..shape.len()).rev() {
                            idx[ax] += 1;
                            if idx[ax] < shape[ax] {
                                break;
                            }
                            idx[ax] = 0;
                        }
                    }
                });
            }
            Op::Softmax(a) => {
                let (m, n) = (shapes[a.0][0], shapes[a.0][1]);
                let y = &values[i];
                add_into(&mut grads[a.0], m * n, |ga| {
                    for r in 0..m {
                        let yr = &y[r * n..(r + 1) * n];
                        let gr = &g[r * n..(r + 1) * n];
                        let dot: T = yr.iter().zip(gr).map(|(&p, &q)| p * q).sum();
                        for c in 0..n {
                            ga[r * n + c] += yr[c] * (gr[c] - dot);
                        }
                    }
                });
            }
            Op::LayerNorm(x, gamma, beta) => {
                let (m, n) = (shapes[x.0][0], shapes[x.0][1]);
                let xv = val(*x);
                let gm = val(*gamma);
                let nf = T::from_usize(n).unwrap();
                let mut dx = vec![T::zero(); if needs_grad[x.0] { m * n } else { 0 }];
                let mut dg = vec![T::zero(); n];
                let mut db = vec![T::zero(); n];
                let mut xhat = vec![T::zero(); n];
                let mut dxhat = vec![T::zero(); n];
                for r in 0..m {
                    let row = &xv[r * n..(r + 1) * n];
                    let gr = &g[r * n..(r + 1) * n];
                    let (mu, inv) = row_stats(row);
                    let mut s1 = T::zero();
                    let mut s2 = T::zero();
                    for j in 0..n {
                        xhat[j] = (row[j] - mu) * inv;
                        dg[j] += gr[j] * xhat[j];
                        db[j] += gr[j];
                        dxhat[j] = gr[j] * gm[j];
                        s1 += dxhat[j];
                        s2 += dxhat[j] * xhat[j];
                    }
                    if !dx.is_empty() {
                        for j in 0..n {
                            dx[r * n + j] = inv / nf * (nf * dxhat[j] - s1 - xhat[j] * s2);
                        }
                    }
                }
                if needs_grad[x.0] {
                    add_into(&mut grads[x.0], m * n, |d| {
                        d.iter_mut().zip(&dx).for_each(|(a, &b)| *a += b)
                    });
                }
                if needs_grad[gamma.0] {
                    add_into(&mut grads[gamma.0], n, |d| {
                        d.iter_mut().zip(&dg).for_each(|(a, &b)| *a += b)
                    });
                }
                if needs_grad[beta.0] {
                    add_into(&mut grads[beta.0], n, |d| {
                        d.iter_mut().zip(&db).for_each(|(a, &b)| *a += b)
                    });
                }
            }
            Op::Pad(a, mode) => {
                let (h, w) = (shapes[a.0][0], shapes[a.0][1]);
                add_into(&mut grads[a.0], h * w, |ga| pad_plane_adjoint(g, h, w, mode, ga));
            }
            Op::Window { src, row, col } => {
                let sw = shapes[src.0][1];
                let (h, w) = (shapes[i][0], shapes[i][1]);
                let n = len(*src);
                add_into(&mut grads[src.0], n, |ga| {
                    for r in 0..h {
                        for c in 0..w {
                            ga[(row + r) * sw + col + c] += g[r * w + c];
                        }
                    }
                });
            }
            Op::Conv(field, kernel) => {
                let sf = &shapes[field.0];
                let (c, hh, ww) = (sf[0], sf[1], sf[2]);
                let co = shapes[kernel.0][0];
                let (fv, kv) = (val(*field), val(*kernel));
                let mut gf = needs_grad[field.0].then(|| vec![T::zero(); c * hh * ww]);
                let mut gk = needs_grad[kernel.0].then(|| vec![T::zero(); co * c * 9]);
                correlate_valid_adjoint(
                    fv,
                    c,
                    hh,
                    ww,
                    kv,
                    co,
                    g,
                    gf.as_deref_mut(),
                    gk.as_deref_mut(),
                );
                if let Some(gf) = gf {
                    add_into(&mut grads[field.0], gf.len(), |d| {
                        d.iter_mut().zip(&gf).for_each(|(a, &b)| *a += b)
                    });
                }
                if let Some(gk) = gk {
                    add_into(&mut grads[kernel.0], gk.len(), |d| {
                        d.iter_mut().zip(&gk).for_each(|(a, &b)| *a += b)
                    });
                }
            }
            Op::Reshape(a) => {
                add_into(&mut grads[a.0], g.len(), |ga| {
                    ga.iter_mut().zip(g).for_each(|(d, &x)| *d += x)
                });
            }
            Op::Slice(a, start) => {
                let n = len(*a);
                let start = *start;
                add_into(&mut grads[a.0], n, |ga| {
                    ga[start..start + g.len()]
                        .iter_mut()
                        .zip(g)
                        .for_each(|(d, &x)| *d += x)
                });
            }
            Op::Concat(parts) => {
                let mut off = 0;
                for p in parts {
                    let n = len(*p);
                    if needs_grad[p.0] {
                        add_into(&mut grads[p.0], n, |gp| {
                            gp.iter_mut()
                                .zip(&g[off..off + n])
                                .for_each(|(d, &x)| *d += x)
                        });
                    }
                    off += n;
                }
            }
            Op::SliceCols(a, start) => {
                let (m, n) = (shapes[a.0][0], shapes[a.0][1]);
                let w = shapes[i][1];
                let start = *start;
                add_into(&mut grads[a.0], m * n, |ga| {
                    for r in 0..m {
                        for c in 0..w {
                            ga[r * n + start + c] += g[r * w + c];
                        }
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let (m, n) = (shapes[i][0], shapes[i][1]);
                let mut col = 0;
                for p in parts {
                    let w = shapes[p.0][1];
                    if needs_grad[p.0] {
                        add_into(&mut grads[p.0], m * w, |gp| {
                            for r in 0..m {
                                for c in 0..w {
                                    gp[r * w + c] += g[r * n + col + c];
                                }
                            }
                        });
                    }
                    col += w;
                }
            }
            Op::Gather(a, entries) => {
                let n = len(*a);
                add_into(&mut grads[a.0], n, |ga| {
                    for (k, e) in entries.iter().enumerate() {
                        for &(idx, w) in e {
                            ga[idx] += w * g[k];
                        }
                    }
                });
            }
        }
    }
}

fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn row_stats<T: Real>(row: &[T]) -> (T, T) {
    let n = T::from_usize(row.len()).unwrap();
    let mu = row.iter().copied().sum::<T>() / n;
    let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<T>() / n;
    (mu, T::one() / (var + T::lit(LN_EPS)).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mat(g: &mut Graph, shape: &[usize], data: &[f64], grad: bool) -> Var {
        let t = Tensor::new(shape, data.to_vec()).unwrap();
        if grad {
            g.leaf(&t.with_grad())
        } else {
            g.constant(&t)
        }
    }

    #[test]
    fn matmul_examples() {
        let mut g = Graph::new();
        let a = mat(&mut g, &[2, 2], &[1., 2., 3., 4.], false);
        let b = mat(&mut g, &[2, 1], &[1., 1.], false);
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c), &[3.0, 7.0]);

        let id = g.constant(&Tensor::identity(3));
        let bb = mat(&mut g, &[3, 2], &[1., -2., 3., 0.5, 7., 8.], false);
        let p = g.matmul(id, bb).unwrap();
        assert_eq!(g.value(p), g.value(bb));

        let z = g.constant(&Tensor::zeros(&[2, 3]));
        let q = g.matmul(z, bb).unwrap();
        assert!(g.value(q).iter().all(|&v| v == 0.0));

        assert!(matches!(g.matmul(a, bb), Err(Error::Dimension(_))));
    }

    #[test]
    fn sum_and_square_grads() {
        let mut g = Graph::new();
        let th = mat(&mut g, &[2], &[1.0, 2.0], true);
        let s = g.sum(th);
        g.backward(s).unwrap();
        assert_eq!(g.grad(th).unwrap(), &[1.0, 1.0]);

        let mut g = Graph::new();
        let th = mat(&mut g, &[2], &[1.0, 2.0], true);
        let sq = g.square(th);
        let s = g.sum(sq);
        g.backward(s).unwrap();
        assert_eq!(g.grad(th).unwrap(), &[2.0, 4.0]);
        // second call accumulates
        g.backward(s).unwrap();
        assert_eq!(g.grad(th).unwrap(), &[4.0, 8.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut g = Graph::new();
        let th = mat(&mut g, &[2], &[1.0, 2.0], true);
        assert!(matches!(g.backward(th), Err(Error::Contract(_))));
    }

    #[test]
    fn causal_softmax_zeroes_future() {
        let mut g = Graph::new();
        let a = mat(&mut g, &[3, 3], &[0.1, 5.0, 9.0, 0.3, 0.2, 7.0, 1.0, 2.0, 3.0], false);
        let s = g.softmax_rows(a, true).unwrap();
        let v = g.value(s);
        assert_eq!(v[0], 1.0);
        assert_eq!(v[1], 0.0);
        assert_eq!(v[2], 0.0);
        assert_eq!(v[5], 0.0);
        for r in 0..3 {
            let tot: f64 = v[r * 3..r * 3 + 3].iter().sum();
            assert!((tot - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn mean_distributes_inverse_count() {
        let mut g = Graph::new();
        let a = mat(&mut g, &[2, 3], &[1., 2., 3., 4., 5., 6.], true);
        let m = g.reduce_mean(a, &[0]).unwrap();
        assert_eq!(g.value(m), &[2.5, 3.5, 4.5]);
        let s = g.sum(m);
        g.backward(s).unwrap();
        assert_eq!(g.grad(a).unwrap(), &[0.5; 6]);
    }
}
