//! Primitive differentiable operations.
//!
//! Broadcasting is deliberately narrow: in binary operations the right operand
//! either has the left operand's shape, a trailing suffix of it (repeated over
//! the leading axes), or a single element.

use crate::autodiff::{Function, Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{numel, strides, Scalar, Tensor};

/// Number of trailing elements the right operand covers.
fn broadcast_inner(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Result<usize> {
    let rn = numel(rhs);
    if rn == 1 {
        return Ok(1);
    }
    if rhs.len() <= lhs.len() && lhs[lhs.len() - rhs.len()..] == *rhs {
        return Ok(rn);
    }
    Err(Error::shape(op, lhs, rhs))
}

fn reduce_to_inner<F: Scalar>(grad: &[F], inner: usize, shape: &[usize]) -> Tensor<F> {
    let mut out = vec![F::zero(); inner];
    for chunk in grad.chunks(inner) {
        for (o, &g) in out.iter_mut().zip(chunk) {
            *o += g;
        }
    }
    Tensor::from_parts(shape.to_vec(), out)
}

#[derive(Debug, Clone, Copy)]
enum BinaryKind {
    Add,
    Sub,
    Mul,
}

struct Binary {
    kind: BinaryKind,
    inner: usize,
}

impl<F: Scalar> Function<F> for Binary {
    fn name(&self) -> &'static str {
        match self.kind {
            BinaryKind::Add => "add",
            BinaryKind::Sub => "sub",
            BinaryKind::Mul => "mul",
        }
    }

    fn backward(
        &self,
        inputs: &[&Tensor<F>],
        _output: &Tensor<F>,
        grad: &Tensor<F>,
    ) -> Result<Vec<Option<Tensor<F>>>> {
        let (lhs, rhs) = (inputs[0], inputs[1]);
        let inner = self.inner;
        let g = grad.data();
        Ok(match self.kind {
            BinaryKind::Add => vec![
                Some(grad.clone()),
                Some(reduce_to_inner(g, inner, rhs.shape())),
            ],
            BinaryKind::Sub => {
                let neg: Vec<F> = g.iter().map(|&v| -v).collect();
                vec![
                    Some(grad.clone()),
                    Some(reduce_to_inner(&neg, inner, rhs.shape())),
                ]
            }
            BinaryKind::Mul => {
                let r = rhs.data();
                let l = lhs.data();
                let gl: Vec<F> = g
                    .iter()
                    .enumerate()
                    .map(|(i, &v)| v * r[i % inner])
                    .collect();
                let mut gr = vec![F::zero(); inner];
                for (i, (&v, &x)) in g.iter().zip(l).enumerate() {
                    gr[i % inner] += v * x;
                }
                vec![
                    Some(Tensor::from_parts(lhs.shape().to_vec(), gl)),
                    Some(Tensor::from_parts(rhs.shape().to_vec(), gr)),
                ]
            }
        })
    }
}

#[derive(Debug, Clone, Copy)]
enum UnaryKind<F> {
    Neg,
    Exp,
    Log,
    Tanh,
    Erf,
    Scale(F),
    Shift(F),
}

struct Unary<F> {
    kind: UnaryKind<F>,
}

impl<F: Scalar> Function<F> for Unary<F> {
    fn name(&self) -> &'static str {
        match self.kind {
            UnaryKind::Neg => "neg",
            UnaryKind::Exp => "exp",
            UnaryKind::Log => "log",
            UnaryKind::Tanh => "tanh",
            UnaryKind::Erf => "erf",
            UnaryKind::Scale(_) => "scale",
            UnaryKind::Shift(_) => "shift",
        }
    }

    fn backward(
        &self,
        inputs: &[&Tensor<F>],
        output: &Tensor<F>,
        grad: &Tensor<F>,
    ) -> Result<Vec<Option<Tensor<F>>>> {
        let x = inputs[0];
        let g = match self.kind {
            UnaryKind::Neg => grad.map(|v| -v),
            UnaryKind::Exp => grad.zip_map(output, |g, y| g * y),
            UnaryKind::Log => grad.zip_map(x, |g, x| g / x),
            UnaryKind::Tanh => grad.zip_map(output, |g, y| g * (F::one() - y * y)),
            UnaryKind::Erf => {
                let c = F::lit(2.0 / std::f64::consts::PI.sqrt());
                grad.zip_map(x, |g, x| g * c * (-(x * x)).exp())
            }
            UnaryKind::Scale(s) => grad.map(|v| v * s),
            UnaryKind::Shift(_) => grad.clone(),
        };
        Ok(vec![Some(g)])
    }
}

/// Matrix product; `shared_rhs` means the right operand is 2-D and reused for
/// every leading index of the left operand.
struct MatMul {
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    shared_rhs: bool,
}

/// out[m,n] += a[m,k] * b[k,n]
pub(crate) fn gemm_acc<F: Scalar>(a: &[F], b: &[F], out: &mut [F], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == F::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// out[m,k] += g[m,n] * b[k,n]^T
fn gemm_nt_acc<F: Scalar>(g: &[F], b: &[F], out: &mut [F], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            let mut acc = F::zero();
            for (&x, &y) in grow.iter().zip(brow) {
                acc += x * y;
            }
            out[i * k + p] += acc;
        }
    }
}

/// out[k,n] += a[m,k]^T * g[m,n]
fn gemm_tn_acc<F: Scalar>(a: &[F], g: &[F], out: &mut [F], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == F::zero() {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &gv) in orow.iter_mut().zip(grow) {
                *o += av * gv;
            }
        }
    }
}

impl<F: Scalar> Function<F> for MatMul {
    fn name(&self) -> &'static str {
        "matmul"
    }

    fn backward(
        &self,
        inputs: &[&Tensor<F>],
        _output: &Tensor<F>,
        grad: &Tensor<F>,
    ) -> Result<Vec<Option<Tensor<F>>>> {
        let (a, b) = (inputs[0], inputs[1]);
        let (m, k, n) = (self.m, self.k, self.n);
        let mut ga = vec![F::zero(); a.len()];
        let mut gb = vec![F::zero(); b.len()];
        for bi in 0..self.batch {
            let a_s = &a.data()[bi * m * k..(bi + 1) * m * k];
            let g_s = &grad.data()[bi * m * n..(bi + 1) * m * n];
            let b_off = if self.shared_rhs { 0 } else { bi * k * n };
            let b_s = &b.data()[b_off..b_off + k * n];
            gemm_nt_acc(g_s, b_s, &mut ga[bi * m * k..(bi + 1) * m * k], m, k, n);
            gemm_tn_acc(a_s, g_s, &mut gb[b_off..b_off + k * n], m, k, n);
        }
        Ok(vec![
            Some(Tensor::from_parts(a.shape().to_vec(), ga)),
            Some(Tensor::from_parts(b.shape().to_vec(), gb)),
        ])
    }
}

struct Reshape;

impl<F: Scalar> Function<F> for Reshape {
    fn name(&self) -> &'static str {
        "reshape"
    }

    fn backward(
        &self,
        inputs: &[&Tensor<F>],
        _output: &Tensor<F>,
        grad: &Tensor<F>,
    ) -> Result<Vec<Option<Tensor<F>>>> {
        Ok(vec![Some(Tensor::from_parts(
            inputs[0].shape().to_vec(),
            grad.data().to_vec(),
        ))])
    }
}

fn permute_data<F: Scalar>(data: &[F], shape: &[usize], axes: &[usize]) -> (Vec<usize>, Vec<F>) {
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let in_strides = strides(shape);
    // stride in the input for each output axis
    let src_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let mut out = Vec::with_capacity(data.len());
    let nd = out_shape.len();
    let mut idx = vec![0usize; nd];
    let mut offset = 0usize;
    for _ in 0..data.len() {
        out.push(data[offset]);
        for d in (0..nd).rev() {
            idx[d] += 1;
            offset += src_strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            offset -= src_strides[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    (out_shape, out)
}

struct Permute {
    inverse: Vec<usize>,
}

impl<F: Scalar> Function<F> for Permute {
    fn name(&self) -> &'static str {
        "transpose"
    }

    fn backward(
        &self,
        _inputs: &[&Tensor<F>],
        _output: &Tensor<F>,
        grad: &Tensor<F>,
    ) -> Result<Vec<Option<Tensor<F>>>> {
        let (shape, data) = permute_data(grad.data(), grad.shape(), &self.inverse);
        Ok(vec![Some(Tensor::from_parts(shape, data))])
    }
}

struct Concat {
    outer: usize,
    inners: Vec<usize>,
}

impl<F: Scalar> Function<F> for Concat {
    fn name(&self) -> &'static str {
        "concat"
    }

    fn backward(
        &self,
        inputs: &[&Tensor<F>],
        _output: &Tensor<F>,
        grad: &Tensor<F>,
    ) -> Result<Vec<Option<Tensor<F>>>> {
        let total: usize = self.inners.iter().sum();
        let g = grad.data();
        let mut grads: Vec<Vec<F>> = self
            .inners
            .iter()
            .map(|&w| Vec::with_capacity(w * self.outer))
            .collect();
        for o in 0..self.outer {
            let mut off = o * total;
            for (gi, &w) in grads.iter_mut().zip(&self.inners) {
                gi.extend_from_slice(&g[off..off + w]);
                off += w;
            }
        }
        Ok(grads
            .into_iter()
            .zip(inputs)
            .map(|(d, t)| Some(Tensor::from_parts(t.shape().to_vec(), d)))
            .collect())
    }
}

struct Slice {
    outer: usize,
    full: usize,
    start: usize,
    width: usize,
}

impl<F: Scalar> Function<F> for Slice {
    fn name(&self) -> &'static str {
        "slice"
    }

    fn backward(
        &self,
        inputs: &[&Tensor<F>],
        _output: &Tensor<F>,
        grad: &Tensor<F>,
    ) -> Result<Vec<Option<Tensor<F>>>> {
        let mut out = vec![F::zero(); inputs[0].len()];
        for o in 0..self.outer {
            let dst = o * self.full + self.start;
            out[dst..dst + self.width]
                .copy_from_slice(&grad.data()[o * self.width..(o + 1) * self.width]);
        }
        Ok(vec![Some(Tensor::from_parts(
            inputs[0].shape().to_vec(),
            out,
        ))])
    }
}

/// Sum over one axis (or everything), optionally divided by the count.
struct Reduce {
    outer: usize,
    extent: usize,
    inner: usize,
    mean: bool,
}

impl<F: Scalar> Function<F> for Reduce {
    fn name(&self) -> &'static str {
        if self.mean {
            "reduce-mean"
        } else {
            "reduce-sum"
        }
    }

    fn backward(
        &self,
        inputs: &[&Tensor<F>],
        _output: &Tensor<F>,
        grad: &Tensor<F>,
    ) -> Result<Vec<Option<Tensor<F>>>> {
        let scale = if self.mean {
            F::one() / F::lit(self.extent as f64)
        } else {
            F::one()
        };
        let g = grad.data();
        let mut out = Vec::with_capacity(inputs[0].len());
        for o in 0..self.outer {
            for _ in 0..self.extent {
                for i in 0..self.inner {
                    out.push(g[o * self.inner + i] * scale);
                }
            }
        }
        Ok(vec![Some(Tensor::from_parts(
            inputs[0].shape().to_vec(),
            out,
        ))])
    }
}

struct MaxLast {
    argmax: Vec<usize>,
}

impl<F: Scalar> Function<F> for MaxLast {
    fn name(&self) -> &'static str {
        "max"
    }

    fn backward(
        &self,
        inputs: &[&Tensor<F>],
        _output: &Tensor<F>,
        grad: &Tensor<F>,
    ) -> Result<Vec<Option<Tensor<F>>>> {
        let mut out = vec![F::zero(); inputs[0].len()];
        for (&pos, &g) in self.argmax.iter().zip(grad.data()) {
            out[pos] += g;
        }
        Ok(vec![Some(Tensor::from_parts(
            inputs[0].shape().to_vec(),
            out,
        ))])
    }
}

/// `x * s` where `s` is a one-element variable.
struct ScaleBy;

impl<F: Scalar> Function<F> for ScaleBy {
    fn name(&self) -> &'static str {
        "broadcast-scale"
    }

    fn backward(
        &self,
        inputs: &[&Tensor<F>],
        _output: &Tensor<F>,
        grad: &Tensor<F>,
    ) -> Result<Vec<Option<Tensor<F>>>> {
        let (x, s) = (inputs[0], inputs[1].item());
        let gs: F = grad.data().iter().zip(x.data()).map(|(&g, &v)| g * v).sum();
        Ok(vec![Some(grad.map(|g| g * s)), Some(Tensor::scalar(gs))])
    }
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = numel(&shape[..axis]);
    let inner = numel(&shape[axis + 1..]);
    (outer, shape[axis], inner)
}

fn reduced_shape(shape: &[usize], axis: usize) -> Vec<usize> {
    let mut s: Vec<usize> = shape
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != axis)
        .map(|(_, &d)| d)
        .collect();
    if s.is_empty() {
        s.push(1);
    }
    s
}

impl<F: Scalar> Graph<F> {
    fn binary(&mut self, kind: BinaryKind, name: &'static str, a: Var, b: Var) -> Result<Var> {
        let inner = broadcast_inner(name, self.shape(a), self.shape(b))?;
        let (x, y) = (self.value(a), self.value(b));
        let yd = y.data();
        let data: Vec<F> = x
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let w = yd[i % inner];
                match kind {
                    BinaryKind::Add => v + w,
                    BinaryKind::Sub => v - w,
                    BinaryKind::Mul => v * w,
                }
            })
            .collect();
        let value = Tensor::from_parts(x.shape().to_vec(), data);
        self.record(value, &[a, b], Box::new(Binary { kind, inner }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Add, "add", a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Sub, "sub", a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Mul, "mul", a, b)
    }

    fn unary(&mut self, kind: UnaryKind<F>, a: Var) -> Result<Var> {
        let x = self.value(a);
        let value = match kind {
            UnaryKind::Neg => x.map(|v| -v),
            UnaryKind::Exp => x.map(|v| v.exp()),
            UnaryKind::Log => {
                if x.data().iter().any(|&v| v <= F::zero()) {
                    return Err(Error::invalid("log", "argument must be positive"));
                }
                x.map(|v| v.ln())
            }
            UnaryKind::Tanh => x.map(|v| v.tanh()),
            UnaryKind::Erf => x.map(|v| v.erf()),
            UnaryKind::Scale(s) => x.map(|v| v * s),
            UnaryKind::Shift(s) => x.map(|v| v + s),
        };
        self.record(value, &[a], Box::new(Unary { kind }))
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryKind::Neg, a)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryKind::Exp, a)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryKind::Log, a)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryKind::Tanh, a)
    }

    pub fn erf(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryKind::Erf, a)
    }

    /// Multiplies by a constant.
    pub fn mul_scalar(&mut self, a: Var, s: F) -> Result<Var> {
        self.unary(UnaryKind::Scale(s), a)
    }

    /// Adds a constant.
    pub fn add_scalar(&mut self, a: Var, s: F) -> Result<Var> {
        self.unary(UnaryKind::Shift(s), a)
    }

    /// Multiplies every element of `a` by the single-element variable `s`.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Result<Var> {
        if self.value(s).len() != 1 {
            return Err(Error::shape(
                "broadcast-scale",
                self.shape(a),
                self.shape(s),
            ));
        }
        let sv = self.value(s).item();
        let value = self.value(a).map(|v| v * sv);
        self.record(value, &[a, s], Box::new(ScaleBy))
    }

    /// `[.., m, k] x [k, n]` (right operand shared across leading axes) or
    /// `[b, m, k] x [b, k, n]` (batched).
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() < 2 || !(sb.len() == 2 || (sb.len() == 3 && sa.len() == 3 && sa[0] == sb[0])) {
            return Err(Error::shape("matmul", &sa, &sb));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (kb, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != kb {
            return Err(Error::shape("matmul", &sa, &sb));
        }
        let shared_rhs = sb.len() == 2;
        let batch = numel(&sa[..sa.len() - 2]);
        let mut out = vec![F::zero(); batch * m * n];
        {
            let (x, y) = (self.value(a).data(), self.value(b).data());
            for bi in 0..batch {
                let b_off = if shared_rhs { 0 } else { bi * k * n };
                gemm_acc(
                    &x[bi * m * k..(bi + 1) * m * k],
                    &y[b_off..b_off + k * n],
                    &mut out[bi * m * n..(bi + 1) * m * n],
                    m,
                    k,
                    n,
                );
            }
        }
        let mut shape = sa[..sa.len() - 2].to_vec();
        shape.extend([m, n]);
        self.record(
            Tensor::from_parts(shape, out),
            &[a, b],
            Box::new(MatMul {
                batch,
                m,
                k,
                n,
                shared_rhs,
            }),
        )
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).reshape(shape)?;
        self.record(value, &[a], Box::new(Reshape))
    }

    /// General axis permutation: output axis `i` is input axis `axes[i]`.
    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let mut seen = vec![false; shape.len()];
        if axes.len() != shape.len()
            || axes
                .iter()
                .any(|&ax| ax >= shape.len() || std::mem::replace(&mut seen[ax], true))
        {
            return Err(Error::invalid(
                "transpose",
                format!("invalid permutation {axes:?} for shape {shape:?}"),
            ));
        }
        let mut inverse = vec![0; axes.len()];
        for (i, &ax) in axes.iter().enumerate() {
            inverse[ax] = i;
        }
        let (out_shape, data) = permute_data(self.value(a).data(), &shape, axes);
        self.record(
            Tensor::from_parts(out_shape, data),
            &[a],
            Box::new(Permute { inverse }),
        )
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let nd = self.shape(a).len();
        if nd < 2 {
            return Err(Error::invalid("transpose", "needs at least two axes"));
        }
        let mut axes: Vec<usize> = (0..nd).collect();
        axes.swap(nd - 2, nd - 1);
        self.permute(a, &axes)
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self
            .shape(
                *parts
                    .first()
                    .ok_or_else(|| Error::invalid("concat", "no inputs"))?,
            )
            .to_vec();
        if axis >= first.len() {
            return Err(Error::invalid(
                "concat",
                format!("axis {axis} out of range for {first:?}"),
            ));
        }
        let mut out_shape = first.clone();
        out_shape[axis] = 0;
        let mut inners = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            let ok = s.len() == first.len()
                && s.iter()
                    .enumerate()
                    .all(|(i, &d)| i == axis || d == first[i]);
            if !ok {
                return Err(Error::shape("concat", &first, s));
            }
            out_shape[axis] += s[axis];
            inners.push(numel(&s[axis..]));
        }
        let outer = numel(&first[..axis]);
        let mut data = Vec::with_capacity(numel(&out_shape));
        for o in 0..outer {
            for (&p, &w) in parts.iter().zip(&inners) {
                data.extend_from_slice(&self.value(p).data()[o * w..(o + 1) * w]);
            }
        }
        self.record(
            Tensor::from_parts(out_shape, data),
            parts,
            Box::new(Concat { outer, inners }),
        )
    }

    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(Error::invalid(
                "slice",
                format!("[{start}, {}) on axis {axis} of {shape:?}", start + len),
            ));
        }
        let (outer, extent, inner) = axis_split(&shape, axis);
        let full = extent * inner;
        let width = len * inner;
        let mut data = Vec::with_capacity(outer * width);
        let src = self.value(a).data();
        for o in 0..outer {
            let s = o * full + start * inner;
            data.extend_from_slice(&src[s..s + width]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        self.record(
            Tensor::from_parts(out_shape, data),
            &[a],
            Box::new(Slice {
                outer,
                full,
                start: start * inner,
                width,
            }),
        )
    }

    fn reduce(&mut self, a: Var, axis: Option<usize>, mean: bool) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let (outer, extent, inner, out_shape) = match axis {
            None => (1, numel(&shape), 1, vec![1]),
            Some(ax) if ax < shape.len() => {
                let (o, e, i) = axis_split(&shape, ax);
                (o, e, i, reduced_shape(&shape, ax))
            }
            Some(ax) => {
                return Err(Error::invalid(
                    "reduce",
                    format!("axis {ax} out of range for {shape:?}"),
                ))
            }
        };
        let src = self.value(a).data();
        let mut data = vec![F::zero(); outer * inner];
        for o in 0..outer {
            for e in 0..extent {
                let base = (o * extent + e) * inner;
                for i in 0..inner {
                    data[o * inner + i] += src[base + i];
                }
            }
        }
        if mean {
            let n = F::lit(extent as f64);
            data.iter_mut().for_each(|v| *v /= n);
        }
        self.record(
            Tensor::from_parts(out_shape, data),
            &[a],
            Box::new(Reduce {
                outer,
                extent,
                inner,
                mean,
            }),
        )
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.reduce(a, None, false)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        self.reduce(a, None, true)
    }

    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.reduce(a, Some(axis), false)
    }

    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.reduce(a, Some(axis), true)
    }

    /// Maximum over the last axis; ties route the gradient to the first maximum.
    pub fn max_last(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let n = *shape.last().expect("non-empty shape");
        let src = self.value(a).data();
        let mut argmax = Vec::with_capacity(src.len() / n);
        let mut data = Vec::with_capacity(src.len() / n);
        for (r, row) in src.chunks(n).enumerate() {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            argmax.push(r * n + best);
            data.push(row[best]);
        }
        let out_shape = reduced_shape(&shape, shape.len() - 1);
        self.record(
            Tensor::from_parts(out_shape, data),
            &[a],
            Box::new(MaxLast { argmax }),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, v).unwrap()
    }

    #[test]
    fn add_elementwise() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(t(&[2], &[1.0, 2.0]));
        let b = g.constant(t(&[2], &[3.0, 4.0]));
        let c = g.add(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[4.0, 6.0]);
    }

    #[test]
    fn add_shape_mismatch_names_op_and_shapes() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2]));
        let err = g.add(a, b).unwrap_err().to_string();
        assert!(
            err.contains("add") && err.contains("[2, 3]") && err.contains("[2]"),
            "{err}"
        );
    }

    #[test]
    fn matmul_identity() {
        let mut g = Graph::<f64>::new();
        let a_vals = [1.0, -2.0, 3.5, 0.25, 5.0, 6.0, -7.0, 8.0, 9.0];
        let eye = g.constant(t(&[3, 3], &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]));
        let a = g.constant(t(&[3, 3], &a_vals));
        let p = g.matmul(eye, a).unwrap();
        assert_eq!(g.value(p).data(), &a_vals);
    }

    #[test]
    fn reduce_mean_of_2x2() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let m = g.mean(a).unwrap();
        assert_eq!(g.value(m).item(), 2.5);
        let rows = g.mean_axis(a, 1).unwrap();
        assert_eq!(g.value(rows).data(), &[1.5, 3.5]);
    }

    #[test]
    fn linear_form_gradient() {
        let mut g = Graph::<f64>::new();
        let w = g.input(t(&[3], &[1.0, 2.0, 3.0]));
        let x = g.constant(t(&[3], &[1.0, 2.0, 3.0]));
        let p = g.mul(w, x).unwrap();
        let root = g.sum(p).unwrap();
        let grads = g.backward(root).unwrap();
        assert_eq!(grads.input(w).unwrap().data(), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn quadratic_gradient() {
        let mut g = Graph::<f64>::new();
        let w = g.input(Tensor::scalar(5.0));
        let d = g.add_scalar(w, -2.0).unwrap();
        let sq = g.mul(d, d).unwrap();
        let grads = g.backward(sq).unwrap();
        assert_eq!(grads.input(w).unwrap().item(), 6.0);
    }

    #[test]
    fn backward_errors() {
        let mut g = Graph::<f64>::new();
        let w = g.input(t(&[2], &[1.0, 2.0]));
        let e = g.exp(w).unwrap();
        assert!(g.backward(e).is_err(), "non-scalar root");
        let s = g.sum(e).unwrap();
        g.backward(s).unwrap();
        assert!(g.backward(s).is_err(), "second backward");

        let mut ng = Graph::<f64>::no_grad();
        let w = ng.input(Tensor::scalar(1.0));
        assert!(ng.backward(w).is_err());
    }

    #[test]
    fn unreachable_params_are_absent() {
        use crate::autodiff::ParamId;
        let mut g = Graph::<f64>::new();
        let a = g.param(ParamId(0), Tensor::scalar(2.0));
        let _b = g.param(ParamId(1), Tensor::scalar(3.0));
        let y = g.mul(a, a).unwrap();
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.param(ParamId(0)).unwrap().item(), 4.0);
        assert!(grads.param(ParamId(1)).is_none());
    }

    #[test]
    fn reused_param_accumulates() {
        use crate::autodiff::ParamId;
        let mut g = Graph::<f64>::new();
        let w1 = g.param(ParamId(0), Tensor::scalar(3.0));
        let w2 = g.param(ParamId(0), Tensor::scalar(3.0));
        let x = g.constant(Tensor::scalar(2.0));
        let a = g.mul(w1, x).unwrap();
        let b = g.mul(w2, w2).unwrap();
        let y = g.add(a, b).unwrap();
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.param(ParamId(0)).unwrap().item(), 2.0 + 6.0);
    }

    #[test]
    fn permute_round_trip() {
        let mut g = Graph::<f64>::new();
        let vals: Vec<f64> = (0..24).map(|v| v as f64).collect();
        let a = g.constant(t(&[2, 3, 4], &vals));
        let p = g.permute(a, &[2, 0, 1]).unwrap();
        assert_eq!(g.shape(p), &[4, 2, 3]);
        // element [i,j,k] of a lands at [k,i,j]
        assert_eq!(
            g.value(p).data()[3 * 6 + 1 * 3 + 2],
            vals[1 * 12 + 2 * 4 + 3]
        );
        let back = g.permute(p, &[1, 2, 0]).unwrap();
        assert_eq!(g.value(back).data(), &vals[..]);
    }

    #[test]
    fn concat_and_slice_are_inverse() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let b = g.constant(t(&[2, 1], &[9.0, 8.0]));
        let c = g.concat(&[a, b], 1).unwrap();
        assert_eq!(g.value(c).data(), &[1.0, 2.0, 9.0, 3.0, 4.0, 8.0]);
        let s = g.slice(c, 1, 2, 1).unwrap();
        assert_eq!(g.value(s).data(), &[9.0, 8.0]);
    }

    #[test]
    fn non_finite_output_is_an_error_in_debug() {
        if !cfg!(debug_assertions) {
            return;
        }
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::scalar(1000.0));
        assert!(matches!(g.exp(a), Err(Error::NonFinite { op: "exp" })));
    }
}
