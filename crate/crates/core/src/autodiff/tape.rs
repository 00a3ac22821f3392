use super::{AutodiffError, Real, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Unary {
    Relu,
    Softplus,
    Sigmoid,
    Sin,
    Cos,
    Exp,
    Square,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Binary(Binary, Var, Var),
    MatMul(Var, Var),
    Sum(Var),
    Mean(Var),
    SumAxis(Var, usize),
    Unary(Unary, Var),
    Pow(Var, T, Option<T>),
    Scale(Var, T),
    ClampMin(Var, T),
    SoftmaxLast(Var),
    Concat(Vec<Var>, usize),
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    BroadcastTo(Var),
    Reshape(Var),
    GatherRows(Var, Vec<usize>),
    Encode(Var, usize),
    NormLast(Var),
    Composite {
        sigma: Var,
        rgb: Var,
        deltas: Vec<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
}

/// Ordered record of executed tensor operations.
///
/// Nodes are appended in execution order, so every node's inputs precede it
/// and a single reverse sweep visits each node once. Operations whose inputs
/// carry no gradient are stored as constants without saved state.
pub struct Tape<T: Real = f32> {
    nodes: Vec<Node<T>>,
    backward_done: bool,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> AutodiffError {
    AutodiffError::ShapeMismatch {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

fn invalid(op: &'static str, msg: impl Into<String>) -> AutodiffError {
    AutodiffError::InvalidArgument {
        op,
        msg: msg.into(),
    }
}

fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>, AutodiffError> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return Err(shape_err(op, a, b)),
        };
    }
    Ok(out)
}

/// Element strides of `shape` aligned to `out`, zero on broadcast axes.
fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let rank = out.len();
    let mut strides = vec![0; rank];
    let mut acc = 1;
    for i in (0..shape.len()).rev() {
        let o = i + rank - shape.len();
        strides[o] = if shape[i] == 1 && out[o] != 1 { 0 } else { acc };
        acc *= shape[i];
    }
    strides
}

/// Visits `(out_index, a_index, b_index)` over `out` in row-major order.
fn for_each_index2(
    out: &[usize],
    sa: &[usize],
    sb: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let total: usize = out.iter().product();
    if total == 0 {
        return;
    }
    let rank = out.len();
    if rank == 0 {
        f(0, 0, 0);
        return;
    }
    let inner = out[rank - 1];
    let (sa_in, sb_in) = (sa[rank - 1], sb[rank - 1]);
    let mut idx = vec![0usize; rank];
    let (mut ia, mut ib, mut o) = (0usize, 0usize, 0usize);
    loop {
        let (mut a, mut b) = (ia, ib);
        for _ in 0..inner {
            f(o, a, b);
            o += 1;
            a += sa_in;
            b += sb_in;
        }
        let mut d = rank - 1;
        loop {
            if d == 0 {
                return;
            }
            d -= 1;
            idx[d] += 1;
            ia += sa[d];
            ib += sb[d];
            if idx[d] < out[d] {
                break;
            }
            ia -= sa[d] * out[d];
            ib -= sb[d] * out[d];
            idx[d] = 0;
        }
    }
}

/// `(outer, axis_len, inner)` decomposition of a shape around `axis`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn softplus<T: Real>(x: T) -> T {
    if x > T::lit(20.0) {
        x
    } else {
        x.exp().ln_1p()
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

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            backward_done: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a leaf. It participates in differentiation iff
    /// `tensor.requires_grad()`.
    pub fn var(&mut self, tensor: Tensor<T>) -> Var {
        self.push(tensor, Op::Leaf)
    }

    pub fn constant(&mut self, mut tensor: Tensor<T>) -> Var {
        tensor.set_requires_grad(false);
        self.push(tensor, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn data(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient of the last backward pass with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].value.grad()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].value.requires_grad()
    }

    /// Clears gradients so that `backward` may run again.
    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.value.set_grad(None).expect("clearing grad");
        }
        self.backward_done = false;
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    fn record(&mut self, shape: Vec<usize>, data: Vec<T>, inputs: &[Var], op: Op<T>) -> Var {
        let rg = inputs.iter().any(|v| self.requires_grad(*v));
        let op = if rg { op } else { Op::Leaf };
        self.push(Tensor::from_parts(shape, data, rg), op)
    }

    fn binary(&mut self, kind: Binary, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let name = match kind {
            Binary::Add => "add",
            Binary::Sub => "sub",
            Binary::Mul => "mul",
            Binary::Div => "div",
        };
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let out_shape = broadcast_shape(name, &sa, &sb)?;
        let f = |x: T, y: T| match kind {
            Binary::Add => x + y,
            Binary::Sub => x - y,
            Binary::Mul => x * y,
            Binary::Div => x / y,
        };
        let (da, db) = (self.data(a), self.data(b));
        let data: Vec<T> = if sa == sb {
            da.iter().zip(db).map(|(&x, &y)| f(x, y)).collect()
        } else if db.len() == 1 {
            let y = db[0];
            let n: usize = out_shape.iter().product();
            if da.len() == n {
                da.iter().map(|&x| f(x, y)).collect()
            } else {
                let mut out = vec![T::zero(); n];
                let st_a = broadcast_strides(&sa, &out_shape);
                let zeros = vec![0; out_shape.len()];
                for_each_index2(&out_shape, &st_a, &zeros, |o, ia, _| out[o] = f(da[ia], y));
                out
            }
        } else {
            let n: usize = out_shape.iter().product();
            let mut out = vec![T::zero(); n];
            let st_a = broadcast_strides(&sa, &out_shape);
            let st_b = broadcast_strides(&sb, &out_shape);
            for_each_index2(&out_shape, &st_a, &st_b, |o, ia, ib| out[o] = f(da[ia], db[ib]));
            out
        };
        Ok(self.record(out_shape, data, &[a, b], Op::Binary(kind, a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.binary(Binary::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.binary(Binary::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.binary(Binary::Div, a, b)
    }

    /// `[m, k] × [k, n] → [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_err("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        T::gemm(
            m,
            k,
            n,
            self.data(a),
            (k as isize, 1),
            self.data(b),
            (n as isize, 1),
            T::zero(),
            &mut out,
            (n as isize, 1),
        );
        Ok(self.record(vec![m, n], out, &[a, b], Op::MatMul(a, b)))
    }

    /// Sum of all elements as a scalar.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.data(x).iter().copied().sum();
        self.record(Vec::new(), vec![s], &[x], Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var, AutodiffError> {
        let n = self.data(x).len();
        if n == 0 {
            return Err(invalid("mean", "empty tensor"));
        }
        let s: T = self.data(x).iter().copied().sum();
        Ok(self.record(Vec::new(), vec![s / T::lit(n as f64)], &[x], Op::Mean(x)))
    }

    /// Sums over `axis`, keeping it with size 1.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var, AutodiffError> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(invalid("sum_axis", format!("axis {axis} out of range for {shape:?}")));
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let d = self.data(x);
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for a in 0..len {
                let base = (o * len + a) * inner;
                for i in 0..inner {
                    out[o * inner + i] = out[o * inner + i] + d[base + i];
                }
            }
        }
        let mut out_shape = shape;
        out_shape[axis] = 1;
        Ok(self.record(out_shape, out, &[x], Op::SumAxis(x, axis)))
    }

    fn unary(&mut self, kind: Unary, x: Var) -> Var {
        let f = |v: T| match kind {
            Unary::Relu => v.max(T::zero()),
            Unary::Softplus => softplus(v),
            Unary::Sigmoid => sigmoid(v),
            Unary::Sin => v.sin(),
            Unary::Cos => v.cos(),
            Unary::Exp => v.exp(),
            Unary::Square => v * v,
        };
        let data = self.data(x).iter().map(|&v| f(v)).collect();
        let shape = self.shape(x).to_vec();
        self.record(shape, data, &[x], Op::Unary(kind, x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(Unary::Relu, x)
    }

    /// `ln(1 + eˣ)`, returning `x` itself above 20 to avoid overflow.
    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(Unary::Softplus, x)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(Unary::Sigmoid, x)
    }

    pub fn sin(&mut self, x: Var) -> Var {
        self.unary(Unary::Sin, x)
    }

    pub fn cos(&mut self, x: Var) -> Var {
        self.unary(Unary::Cos, x)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(Unary::Exp, x)
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(Unary::Square, x)
    }

    /// Elementwise `x^p` for a constant exponent.
    pub fn pow(&mut self, x: Var, p: T) -> Var {
        let data = self.data(x).iter().map(|&v| v.powf(p)).collect();
        let shape = self.shape(x).to_vec();
        self.record(shape, data, &[x], Op::Pow(x, p, None))
    }

    /// `x^p` whose derivative is evaluated at `max(x, floor)`.
    pub fn pow_floored(&mut self, x: Var, p: T, floor: T) -> Var {
        let data = self.data(x).iter().map(|&v| v.powf(p)).collect();
        let shape = self.shape(x).to_vec();
        self.record(shape, data, &[x], Op::Pow(x, p, Some(floor)))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let data = self.data(x).iter().map(|&v| v * c).collect();
        let shape = self.shape(x).to_vec();
        self.record(shape, data, &[x], Op::Scale(x, c))
    }

    /// `max(x, lo)`; the gradient is zero where the clamp is active.
    pub fn clamp_min(&mut self, x: Var, lo: T) -> Var {
        let data = self.data(x).iter().map(|&v| v.max(lo)).collect();
        let shape = self.shape(x).to_vec();
        self.record(shape, data, &[x], Op::ClampMin(x, lo))
    }

    pub fn softmax_last(&mut self, x: Var) -> Result<Var, AutodiffError> {
        let shape = self.shape(x).to_vec();
        let Some(&n) = shape.last() else {
            return Err(invalid("softmax_last", "scalar input"));
        };
        let d = self.data(x);
        let mut out = vec![T::zero(); d.len()];
        if n > 0 {
            for (row, dst) in d.chunks(n).zip(out.chunks_mut(n)) {
                let m = row.iter().copied().fold(T::neg_infinity(), T::max);
                let mut s = T::zero();
                for (o, &v) in dst.iter_mut().zip(row) {
                    *o = (v - m).exp();
                    s = s + *o;
                }
                for o in dst.iter_mut() {
                    *o = *o / s;
                }
            }
        }
        Ok(self.record(shape, out, &[x], Op::SoftmaxLast(x)))
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var, AutodiffError> {
        let Some(&first) = xs.first() else {
            return Err(invalid("concat", "no inputs"));
        };
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return Err(invalid("concat", format!("axis {axis} out of range for {base:?}")));
        }
        let mut total = 0;
        for &v in xs {
            let s = self.shape(v);
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(shape_err("concat", &base, s));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in xs {
                let w = self.shape(v)[axis] * inner;
                out.extend_from_slice(&self.data(v)[o * w..(o + 1) * w]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        Ok(self.record(shape, out, xs, Op::Concat(xs.to_vec(), axis)))
    }

    /// Elements `start..end` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, end: usize) -> Result<Var, AutodiffError> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || start > end || end > shape[axis] {
            return Err(invalid(
                "slice",
                format!("range {start}..{end} on axis {axis} of {shape:?}"),
            ));
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let d = self.data(x);
        let w = (end - start) * inner;
        let mut out = Vec::with_capacity(outer * w);
        for o in 0..outer {
            let s = (o * len + start) * inner;
            out.extend_from_slice(&d[s..s + w]);
        }
        let mut out_shape = shape;
        out_shape[axis] = end - start;
        Ok(self.record(out_shape, out, &[x], Op::Slice { x, axis, start }))
    }

    pub fn broadcast_to(&mut self, x: Var, shape: &[usize]) -> Result<Var, AutodiffError> {
        let sx = self.shape(x).to_vec();
        let out = broadcast_shape("broadcast", &sx, shape)?;
        if out != shape {
            return Err(shape_err("broadcast", &sx, shape));
        }
        let st = broadcast_strides(&sx, &out);
        let zeros = vec![0; out.len()];
        let d = self.data(x);
        let mut data = vec![T::zero(); out.iter().product()];
        for_each_index2(&out, &st, &zeros, |o, i, _| data[o] = d[i]);
        Ok(self.record(out, data, &[x], Op::BroadcastTo(x)))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, AutodiffError> {
        let sx = self.shape(x);
        if shape.iter().product::<usize>() != sx.iter().product::<usize>() {
            return Err(shape_err("reshape", sx, shape));
        }
        let data = self.data(x).to_vec();
        Ok(self.record(shape.to_vec(), data, &[x], Op::Reshape(x)))
    }

    /// Selects rows of a 2-D tensor; backward scatter-adds in index order.
    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var, AutodiffError> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 2 {
            return Err(invalid("gather_rows", format!("expected 2-D input, got {shape:?}")));
        }
        let c = shape[1];
        if let Some(&r) = rows.iter().find(|&&r| r >= shape[0]) {
            return Err(invalid("gather_rows", format!("row {r} out of range for {shape:?}")));
        }
        let d = self.data(x);
        let mut out = Vec::with_capacity(rows.len() * c);
        for &r in rows {
            out.extend_from_slice(&d[r * c..(r + 1) * c]);
        }
        Ok(self.record(vec![rows.len(), c], out, &[x], Op::GatherRows(x, rows.to_vec())))
    }

    /// Sinusoidal encoding of the last axis: each scalar `v` becomes
    /// `[sin(2⁰πv), cos(2⁰πv), …, sin(2^(L−1)πv), cos(2^(L−1)πv)]`.
    pub fn encode(&mut self, x: Var, freqs: usize) -> Result<Var, AutodiffError> {
        let shape = self.shape(x).to_vec();
        if shape.is_empty() {
            return Err(invalid("encode", "scalar input"));
        }
        let d = self.data(x);
        let mut out = Vec::with_capacity(d.len() * 2 * freqs);
        for &v in d {
            let mut scale = T::lit(std::f64::consts::PI);
            for _ in 0..freqs {
                let (s, c) = (v * scale).sin_cos();
                out.push(s);
                out.push(c);
                scale = scale + scale;
            }
        }
        let mut out_shape = shape;
        *out_shape.last_mut().expect("nonempty") *= 2 * freqs;
        Ok(self.record(out_shape, out, &[x], Op::Encode(x, freqs)))
    }

    /// Euclidean norm over the last axis (kept with size 1). The gradient at
    /// a zero vector is taken as zero.
    pub fn norm_last(&mut self, x: Var) -> Result<Var, AutodiffError> {
        let shape = self.shape(x).to_vec();
        let Some(&n) = shape.last() else {
            return Err(invalid("norm_last", "scalar input"));
        };
        let d = self.data(x);
        let out: Vec<T> = if n == 0 {
            vec![T::zero(); d.len()]
        } else {
            d.chunks(n)
                .map(|r| r.iter().fold(T::zero(), |a, &v| a + v * v).sqrt())
                .collect()
        };
        let mut out_shape = shape;
        *out_shape.last_mut().expect("nonempty") = 1;
        Ok(self.record(out_shape, out, &[x], Op::NormLast(x)))
    }

    /// Volume compositing of `R` rays with `D` samples each.
    ///
    /// `sigma` is `[R, D]`, `rgb` is `[R, D, 3]` and `deltas` holds the
    /// `[R, D]` inter-sample distances. Returns `[R, 3]`.
    pub fn composite(&mut self, sigma: Var, rgb: Var, deltas: Vec<T>) -> Result<Var, AutodiffError> {
        let ss = self.shape(sigma).to_vec();
        let sc = self.shape(rgb).to_vec();
        if ss.len() != 2 || sc != [ss[0], ss[1], 3] || deltas.len() != ss[0] * ss[1] {
            return Err(shape_err("composite", &ss, &sc));
        }
        let (r, d) = (ss[0], ss[1]);
        let (sd, cd) = (self.data(sigma), self.data(rgb));
        if sd.iter().any(|&s| s < T::zero() || !s.is_finite()) {
            return Err(invalid("composite", "densities must be finite and non-negative"));
        }
        let mut out = vec![T::zero(); r * 3];
        for ray in 0..r {
            let mut depth = T::zero();
            let mut acc = [T::zero(); 3];
            for i in 0..d {
                let k = ray * d + i;
                let tau = sd[k] * deltas[k];
                let w = (-depth).exp() * (T::one() - (-tau).exp());
                for (ch, a) in acc.iter_mut().enumerate() {
                    *a = *a + w * cd[k * 3 + ch];
                }
                depth = depth + tau;
            }
            out[ray * 3..ray * 3 + 3].copy_from_slice(&acc);
        }
        Ok(self.record(
            vec![r, 3],
            out,
            &[sigma, rgb],
            Op::Composite { sigma, rgb, deltas },
        ))
    }

    /// Reverse sweep from a scalar `loss`, storing gradients on every node
    /// that requires them.
    pub fn backward(&mut self, loss: Var) -> Result<(), AutodiffError> {
        if self.nodes.is_empty() {
            return Err(AutodiffError::EmptyTape);
        }
        if self.backward_done {
            return Err(AutodiffError::BackwardTwice);
        }
        let ls = self.shape(loss);
        if ls.iter().product::<usize>() != 1 {
            return Err(AutodiffError::NonScalarLoss(ls.to_vec()));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if self.nodes[idx].value.requires_grad() {
                self.backprop_node(idx, &g, &mut grads);
            }
            grads[idx] = Some(g);
        }
        for (node, g) in self.nodes.iter_mut().zip(grads) {
            if node.value.requires_grad() {
                node.value.set_grad(g)?;
            }
        }
        self.backward_done = true;
        Ok(())
    }

    fn backprop_node(&self, idx: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[idx];
        let out = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Binary(kind, a, b) => self.backprop_binary(*kind, *a, *b, &node.value, g, grads),
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if self.requires_grad(*a) {
                    let ga = slot(grads, *a, m * k);
                    // ga += g · bᵀ
                    T::gemm(m, n, k, g, (n as isize, 1), self.data(*b), (1, n as isize), T::one(), ga, (k as isize, 1));
                }
                if self.requires_grad(*b) {
                    let gb = slot(grads, *b, k * n);
                    // gb += aᵀ · g
                    T::gemm(k, m, n, self.data(*a), (1, k as isize), g, (n as isize, 1), T::one(), gb, (n as isize, 1));
                }
            }
            Op::Sum(x) => {
                let n = self.data(*x).len();
                if self.requires_grad(*x) {
                    for v in slot(grads, *x, n) {
                        *v = *v + g[0];
                    }
                }
            }
            Op::Mean(x) => {
                let n = self.data(*x).len();
                if self.requires_grad(*x) {
                    let gv = g[0] / T::lit(n as f64);
                    for v in slot(grads, *x, n) {
                        *v = *v + gv;
                    }
                }
            }
            Op::SumAxis(x, axis) => {
                if self.requires_grad(*x) {
                    let shape = self.shape(*x);
                    let (outer, len, inner) = split_axis(shape, *axis);
                    let gx = slot(grads, *x, outer * len * inner);
                    for o in 0..outer {
                        for a in 0..len {
                            let base = (o * len + a) * inner;
                            for i in 0..inner {
                                gx[base + i] = gx[base + i] + g[o * inner + i];
                            }
                        }
                    }
                }
            }
            Op::Unary(kind, x) => {
                if !self.requires_grad(*x) {
                    return;
                }
                let xd = self.data(*x);
                let gx = slot(grads, *x, xd.len());
                for i in 0..xd.len() {
                    let v = xd[i];
                    let local = match kind {
                        Unary::Relu => {
                            if v > T::zero() {
                                T::one()
                            } else {
                                T::zero()
                            }
                        }
                        Unary::Softplus => sigmoid(v),
                        Unary::Sigmoid => out[i] * (T::one() - out[i]),
                        Unary::Sin => v.cos(),
                        Unary::Cos => -v.sin(),
                        Unary::Exp => out[i],
                        Unary::Square => v + v,
                    };
                    gx[i] = gx[i] + g[i] * local;
                }
            }
            Op::Pow(x, p, floor) => {
                if self.requires_grad(*x) {
                    let xd = self.data(*x);
                    let gx = slot(grads, *x, xd.len());
                    let pm1 = *p - T::one();
                    for i in 0..xd.len() {
                        let base = floor.map_or(xd[i], |f| xd[i].max(f));
                        gx[i] = gx[i] + g[i] * *p * base.powf(pm1);
                    }
                }
            }
            Op::Scale(x, c) => {
                if self.requires_grad(*x) {
                    let gx = slot(grads, *x, g.len());
                    for i in 0..g.len() {
                        gx[i] = gx[i] + g[i] * *c;
                    }
                }
            }
            Op::ClampMin(x, lo) => {
                if self.requires_grad(*x) {
                    let xd = self.data(*x);
                    let gx = slot(grads, *x, xd.len());
                    for i in 0..xd.len() {
                        if xd[i] >= *lo {
                            gx[i] = gx[i] + g[i];
                        }
                    }
                }
            }
            Op::SoftmaxLast(x) => {
                if self.requires_grad(*x) {
                    let n = *node.value.shape().last().expect("nonscalar");
                    let gx = slot(grads, *x, out.len());
                    if n > 0 {
                        for ((y, gy), dst) in out.chunks(n).zip(g.chunks(n)).zip(gx.chunks_mut(n)) {
                            let dot = y.iter().zip(gy).fold(T::zero(), |a, (&yv, &gv)| a + yv * gv);
                            for j in 0..n {
                                dst[j] = dst[j] + y[j] * (gy[j] - dot);
                            }
                        }
                    }
                }
            }
            Op::Concat(xs, axis) => {
                let (outer, total, inner) = split_axis(node.value.shape(), *axis);
                let mut offset = 0;
                for &v in xs {
                    let w = self.shape(v)[*axis] * inner;
                    if self.requires_grad(v) {
                        let gv = slot(grads, v, outer * w);
                        for o in 0..outer {
                            let src = &g[o * total * inner + offset..o * total * inner + offset + w];
                            for (d, &s) in gv[o * w..(o + 1) * w].iter_mut().zip(src) {
                                *d = *d + s;
                            }
                        }
                    }
                    offset += w;
                }
            }
            Op::Slice { x, axis, start } => {
                if self.requires_grad(*x) {
                    let shape = self.shape(*x);
                    let (outer, len, inner) = split_axis(shape, *axis);
                    let w = node.value.shape()[*axis] * inner;
                    let gx = slot(grads, *x, outer * len * inner);
                    for o in 0..outer {
                        let s = (o * len + start) * inner;
                        for (d, &v) in gx[s..s + w].iter_mut().zip(&g[o * w..(o + 1) * w]) {
                            *d = *d + v;
                        }
                    }
                }
            }
            Op::BroadcastTo(x) => {
                if self.requires_grad(*x) {
                    let out_shape = node.value.shape();
                    let st = broadcast_strides(self.shape(*x), out_shape);
                    let zeros = vec![0; out_shape.len()];
                    let gx = slot(grads, *x, self.data(*x).len());
                    for_each_index2(out_shape, &st, &zeros, |o, i, _| gx[i] = gx[i] + g[o]);
                }
            }
            Op::Reshape(x) => {
                if self.requires_grad(*x) {
                    let gx = slot(grads, *x, g.len());
                    for (d, &v) in gx.iter_mut().zip(g) {
                        *d = *d + v;
                    }
                }
            }
            Op::GatherRows(x, rows) => {
                if self.requires_grad(*x) {
                    let c = self.shape(*x)[1];
                    let gx = slot(grads, *x, self.data(*x).len());
                    for (i, &r) in rows.iter().enumerate() {
                        for j in 0..c {
                            gx[r * c + j] = gx[r * c + j] + g[i * c + j];
                        }
                    }
                }
            }
            Op::Encode(x, freqs) => {
                if self.requires_grad(*x) {
                    let n = self.data(*x).len();
                    let gx = slot(grads, *x, n);
                    let block = 2 * freqs;
                    for i in 0..n {
                        let mut scale = T::lit(std::f64::consts::PI);
                        let mut acc = T::zero();
                        for f in 0..*freqs {
                            let k = i * block + 2 * f;
                            // d sin(ax) = a·cos(ax), d cos(ax) = −a·sin(ax)
                            acc = acc + scale * (g[k] * out[k + 1] - g[k + 1] * out[k]);
                            scale = scale + scale;
                        }
                        gx[i] = gx[i] + acc;
                    }
                }
            }
            Op::NormLast(x) => {
                if self.requires_grad(*x) {
                    let xd = self.data(*x);
                    let n = *self.shape(*x).last().expect("nonscalar");
                    let gx = slot(grads, *x, xd.len());
                    for (r, (&norm, &gr)) in out.iter().zip(g).enumerate() {
                        if norm > T::zero() {
                            for j in 0..n {
                                let k = r * n + j;
                                gx[k] = gx[k] + gr * xd[k] / norm;
                            }
                        }
                    }
                }
            }
            Op::Composite { sigma, rgb, deltas } => {
                self.backprop_composite(*sigma, *rgb, deltas, g, grads);
            }
        }
    }

    fn backprop_binary(
        &self,
        kind: Binary,
        a: Var,
        b: Var,
        out: &Tensor<T>,
        g: &[T],
        grads: &mut [Option<Vec<T>>],
    ) {
        let (da, db) = (self.data(a), self.data(b));
        let (ra, rb) = (self.requires_grad(a), self.requires_grad(b));
        let out_shape = out.shape();
        let same = self.shape(a) == out_shape && self.shape(b) == out_shape;
        // (∂out/∂a, ∂out/∂b) at one element
        let local = |x: T, y: T| match kind {
            Binary::Add => (T::one(), T::one()),
            Binary::Sub => (T::one(), -T::one()),
            Binary::Mul => (y, x),
            Binary::Div => (T::one() / y, -x / (y * y)),
        };
        let mut ga = ra.then(|| vec![T::zero(); da.len()]);
        let mut gb = rb.then(|| vec![T::zero(); db.len()]);
        if same {
            for o in 0..g.len() {
                let (la, lb) = local(da[o], db[o]);
                if let Some(ga) = ga.as_mut() {
                    ga[o] = g[o] * la;
                }
                if let Some(gb) = gb.as_mut() {
                    gb[o] = g[o] * lb;
                }
            }
        } else {
            let st_a = broadcast_strides(self.shape(a), out_shape);
            let st_b = broadcast_strides(self.shape(b), out_shape);
            for_each_index2(out_shape, &st_a, &st_b, |o, ia, ib| {
                let (la, lb) = local(da[ia], db[ib]);
                if let Some(ga) = ga.as_mut() {
                    ga[ia] = ga[ia] + g[o] * la;
                }
                if let Some(gb) = gb.as_mut() {
                    gb[ib] = gb[ib] + g[o] * lb;
                }
            });
        }
        if let Some(ga) = ga {
            accumulate(grads, a, ga);
        }
        if let Some(gb) = gb {
            accumulate(grads, b, gb);
        }
    }

    fn backprop_composite(
        &self,
        sigma: Var,
        rgb: Var,
        deltas: &[T],
        g: &[T],
        grads: &mut [Option<Vec<T>>],
    ) {
        let ss = self.shape(sigma);
        let (r, d) = (ss[0], ss[1]);
        let (sd, cd) = (self.data(sigma), self.data(rgb));
        let (rs, rc) = (self.requires_grad(sigma), self.requires_grad(rgb));
        let mut gs = rs.then(|| vec![T::zero(); r * d]);
        let mut gc = rc.then(|| vec![T::zero(); r * d * 3]);
        let mut trans_after = vec![T::zero(); d];
        let mut weight = vec![T::zero(); d];
        for ray in 0..r {
            let gr = &g[ray * 3..ray * 3 + 3];
            let mut depth = T::zero();
            for i in 0..d {
                let k = ray * d + i;
                let tau = sd[k] * deltas[k];
                weight[i] = (-depth).exp() * (T::one() - (-tau).exp());
                depth = depth + tau;
                trans_after[i] = (-depth).exp();
            }
            // ∂out/∂τᵢ = T⁽ⁱ⁺¹⁾cᵢ − Σ_{j>i} wⱼcⱼ
            let mut suffix = T::zero();
            for i in (0..d).rev() {
                let k = ray * d + i;
                let cg = (0..3).fold(T::zero(), |a, ch| a + cd[k * 3 + ch] * gr[ch]);
                if let Some(gs) = gs.as_mut() {
                    gs[k] = deltas[k] * (trans_after[i] * cg - suffix);
                }
                if let Some(gc) = gc.as_mut() {
                    for ch in 0..3 {
                        gc[k * 3 + ch] = weight[i] * gr[ch];
                    }
                }
                suffix = suffix + weight[i] * cg;
            }
        }
        if let Some(gs) = gs {
            accumulate(grads, sigma, gs);
        }
        if let Some(gc) = gc {
            accumulate(grads, rgb, gc);
        }
    }
}

fn slot<T: Real>(grads: &mut [Option<Vec<T>>], v: Var, len: usize) -> &mut [T] {
    grads[v.0].get_or_insert_with(|| vec![T::zero(); len])
}

fn accumulate<T: Real>(grads: &mut [Option<Vec<T>>], v: Var, g: Vec<T>) {
    match &mut grads[v.0] {
        Some(existing) => {
            for (e, x) in existing.iter_mut().zip(g) {
                *e = *e + x;
            }
        }
        empty => *empty = Some(g),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_slice(shape, data).unwrap()
    }

    #[test]
    fn relu_clamps_negative() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::scalar(-1.0));
        let y = tape.relu(x);
        assert_eq!(tape.data(y), &[0.0]);
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::zeros([5]));
        let y = tape.softmax_last(x).unwrap();
        for &v in tape.data(y) {
            assert!((v - 0.2).abs() < 1e-7);
        }
    }

    #[test]
    fn identity_matmul() {
        let mut tape = Tape::<f64>::new();
        let eye = tape.constant(t(&[3, 3], &[1., 0., 0., 0., 1., 0., 0., 0., 1.]));
        let v = tape.constant(t(&[3, 1], &[0.3, -2.0, 7.5]));
        let y = tape.matmul(eye, v).unwrap();
        assert_eq!(tape.data(y), &[0.3, -2.0, 7.5]);
    }

    #[test]
    fn square_power_rule() {
        let mut tape = Tape::<f64>::new();
        let x = tape.var(Tensor::scalar(3.0).with_grad());
        let y = tape.square(x);
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[6.0]);
    }

    #[test]
    fn relu_dead_region_has_zero_grad() {
        let mut tape = Tape::<f64>::new();
        let x = tape.var(Tensor::scalar(-1.0).with_grad());
        let y = tape.relu(x);
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[0.0]);
    }

    #[test]
    fn grads_accumulate_across_uses() {
        let mut tape = Tape::<f64>::new();
        let x = tape.var(Tensor::scalar(2.0).with_grad());
        let y = tape.mul(x, x).unwrap();
        let z = tape.add(y, x).unwrap();
        tape.backward(z).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[5.0]);
    }

    #[test]
    fn matmul_shape_error_names_op_and_shapes() {
        let mut tape = Tape::<f32>::new();
        let a = tape.constant(Tensor::zeros([2, 3]));
        let b = tape.constant(Tensor::zeros([2, 3]));
        let err = tape.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("matmul") && msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn broadcast_rejects_non_unit_axes() {
        let mut tape = Tape::<f32>::new();
        let a = tape.constant(Tensor::zeros([2, 3]));
        let b = tape.constant(Tensor::zeros([2, 2]));
        assert!(matches!(
            tape.add(a, b),
            Err(AutodiffError::ShapeMismatch { op: "add", .. })
        ));
    }

    #[test]
    fn backward_errors() {
        let mut tape = Tape::<f64>::new();
        let x = tape.var(t(&[2], &[1.0, 2.0]).with_grad());
        let y = tape.square(x);
        assert!(matches!(tape.backward(y), Err(AutodiffError::NonScalarLoss(_))));
        let s = tape.sum(y);
        tape.backward(s).unwrap();
        assert!(matches!(tape.backward(s), Err(AutodiffError::BackwardTwice)));
        tape.zero_grad();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[2.0, 4.0]);
        let mut empty = Tape::<f64>::new();
        assert!(matches!(empty.backward(Var(0)), Err(AutodiffError::EmptyTape)));
    }

    #[test]
    fn broadcast_add_reduces_gradient() {
        let mut tape = Tape::<f64>::new();
        let a = tape.var(t(&[2, 3], &[1., 2., 3., 4., 5., 6.]).with_grad());
        let b = tape.var(t(&[1, 3], &[10., 20., 30.]).with_grad());
        let c = tape.add(a, b).unwrap();
        assert_eq!(tape.data(c), &[11., 22., 33., 14., 25., 36.]);
        let s = tape.sum(c);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(b).unwrap(), &[2., 2., 2.]);
        assert_eq!(tape.grad(a).unwrap(), &[1.; 6]);
    }

    #[test]
    fn three_way_broadcast() {
        let mut tape = Tape::<f64>::new();
        let o = tape.constant(t(&[2, 1, 3], &[0., 0., 0., 1., 1., 1.]));
        let tt = tape.constant(t(&[2, 2, 1], &[1., 2., 3., 4.]));
        let p = tape.mul(tt, o).unwrap();
        assert_eq!(tape.shape(p), &[2, 2, 3]);
        assert_eq!(tape.data(p), &[0., 0., 0., 0., 0., 0., 3., 3., 3., 4., 4., 4.]);
    }

    #[test]
    fn constant_ops_are_not_recorded_for_grad() {
        let mut tape = Tape::<f32>::new();
        let a = tape.constant(Tensor::full([3], 2.0));
        let b = tape.exp(a);
        assert!(!tape.requires_grad(b));
    }

    #[test]
    fn encode_layout() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(&[1, 1], &[0.5]));
        let y = tape.encode(x, 2).unwrap();
        let expected = [1.0, 0.0, 0.0, -1.0];
        for (a, b) in tape.data(y).iter().zip(expected) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn norm_of_zero_has_zero_grad() {
        let mut tape = Tape::<f64>::new();
        let x = tape.var(t(&[1, 2], &[0.0, 0.0]).with_grad());
        let n = tape.norm_last(x).unwrap();
        let s = tape.sum(n);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[0.0, 0.0]);
    }

    /// f(x) = Σ sin(x)·x², g(x) = Σ softplus(x)·w; returns ∇ of `a·f + b·g`.
    fn combo_grad(x: &[f64], w: &[f64], a: f64, b: f64) -> Vec<f64> {
        let mut tape = Tape::<f64>::new();
        let xv = tape.var(t(&[x.len()], x).with_grad());
        let wv = tape.constant(t(&[w.len()], w));
        let sx = tape.sin(xv);
        let x2 = tape.square(xv);
        let fx = tape.mul(sx, x2).unwrap();
        let f = tape.sum(fx);
        let sp = tape.softplus(xv);
        let gx = tape.mul(sp, wv).unwrap();
        let g = tape.sum(gx);
        let fa = tape.scale(f, a);
        let gb = tape.scale(g, b);
        let total = tape.add(fa, gb).unwrap();
        tape.backward(total).unwrap();
        tape.grad(xv).unwrap().to_vec()
    }

    proptest::proptest! {
        #[test]
        fn gradient_is_linear_in_the_objective(
            x in proptest::collection::vec(-3.0f64..3.0, 1..12),
            a in -4.0f64..4.0,
            b in -4.0f64..4.0,
            seed in 0u64..1000,
        ) {
            let w: Vec<f64> = (0..x.len()).map(|i| ((i as u64 + seed) as f64 * 0.37).sin()).collect();
            let both = combo_grad(&x, &w, a, b);
            let f = combo_grad(&x, &w, 1.0, 0.0);
            let g = combo_grad(&x, &w, 0.0, 1.0);
            for i in 0..x.len() {
                let want = a * f[i] + b * g[i];
                proptest::prop_assert!((both[i] - want).abs() <= 1e-6 * want.abs().max(1.0));
            }
        }

        #[test]
        fn forward_and_backward_are_bit_reproducible(
            x in proptest::collection::vec(-3.0f32..3.0, 6),
            m in proptest::collection::vec(-1.0f32..1.0, 12),
        ) {
            let run = || {
                let mut tape = Tape::<f32>::new();
                let xv = tape.var(Tensor::from_slice(&[3, 2], &x).unwrap().with_grad());
                let mv = tape.var(Tensor::from_slice(&[2, 6], &m).unwrap().with_grad());
                let h = tape.matmul(xv, mv).unwrap();
                let h = tape.softplus(h);
                let p = tape.softmax_last(h).unwrap();
                let n = tape.norm_last(p).unwrap();
                let s = tape.sum(n);
                tape.backward(s).unwrap();
                (
                    tape.data(s).to_vec(),
                    tape.grad(xv).unwrap().to_vec(),
                    tape.grad(mv).unwrap().to_vec(),
                )
            };
            let (a, b) = (run(), run());
            proptest::prop_assert_eq!(a.0.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.0.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
            proptest::prop_assert_eq!(a.1.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.1.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
            proptest::prop_assert_eq!(a.2.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.2.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        }

        #[test]
        fn forward_values_stay_finite(x in proptest::collection::vec(-50.0f32..50.0, 1..16)) {
            let mut tape = Tape::<f32>::new();
            let xv = tape.var(Tensor::from_slice(&[x.len()], &x).unwrap());
            let sp = tape.softplus(xv);
            let sg = tape.sigmoid(xv);
            let sm = tape.softmax_last(xv).unwrap();
            let e = tape.encode(xv, 4).unwrap();
            for v in [sp, sg, sm, e] {
                proptest::prop_assert!(tape.data(v).iter().all(|y| y.is_finite()));
            }
        }
    }
}
