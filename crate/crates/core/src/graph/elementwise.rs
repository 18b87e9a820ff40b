use super::{GradBuf, Graph, Node, Op, Var};
use crate::error::{shape_err, Result};
use crate::scalar::{sigmoid, Scalar};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
pub(crate) enum UnaryKind<S> {
    Swish,
    Sigmoid,
    Tanh,
    Exp,
    Log,
    Scale(S),
}

pub(crate) struct Unary<S> {
    x: Var,
    kind: UnaryKind<S>,
}

impl<S: Scalar> Unary<S> {
    pub(super) fn backward(&self, nodes: &[Node<S>], y: &Tensor<S>, dy: &[S], g: &mut GradBuf<'_, S>) {
        let x = nodes[self.x.0].value.data();
        let y = y.data();
        let Some(dx) = g.slot(self.x) else { return };
        match self.kind {
            UnaryKind::Swish => {
                for i in 0..dx.len() {
                    let s = sigmoid(x[i]);
                    dx[i] += dy[i] * (s + x[i] * s * (S::one() - s));
                }
            }
            UnaryKind::Sigmoid => {
                for i in 0..dx.len() {
                    dx[i] += dy[i] * y[i] * (S::one() - y[i]);
                }
            }
            UnaryKind::Tanh => {
                for i in 0..dx.len() {
                    dx[i] += dy[i] * (S::one() - y[i] * y[i]);
                }
            }
            UnaryKind::Exp => {
                for i in 0..dx.len() {
                    dx[i] += dy[i] * y[i];
                }
            }
            UnaryKind::Log => {
                for i in 0..dx.len() {
                    dx[i] += dy[i] / x[i];
                }
            }
            UnaryKind::Scale(c) => {
                for i in 0..dx.len() {
                    dx[i] += dy[i] * c;
                }
            }
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) enum BinaryKind {
    Add,
    Sub,
    Mul,
}

pub(crate) struct Binary {
    a: Var,
    b: Var,
    kind: BinaryKind,
}

impl Binary {
    pub(super) fn backward<S: Scalar>(&self, nodes: &[Node<S>], dy: &[S], g: &mut GradBuf<'_, S>) {
        match self.kind {
            BinaryKind::Add => {
                g.add(self.a, dy);
                g.add(self.b, dy);
            }
            BinaryKind::Sub => {
                g.add(self.a, dy);
                if let Some(db) = g.slot(self.b) {
                    for (d, &u) in db.iter_mut().zip(dy) {
                        *d -= u;
                    }
                }
            }
            BinaryKind::Mul => {
                let a = nodes[self.a.0].value.data();
                let b = nodes[self.b.0].value.data();
                if let Some(da) = g.slot(self.a) {
                    for i in 0..da.len() {
                        da[i] += dy[i] * b[i];
                    }
                }
                if let Some(db) = g.slot(self.b) {
                    for i in 0..db.len() {
                        db[i] += dy[i] * a[i];
                    }
                }
            }
        }
    }
}

/// `x * scale + shift` broadcast over the last dimension; either side optional.
pub(crate) struct Bias {
    x: Var,
    scale: Option<Var>,
    shift: Option<Var>,
}

impl Bias {
    pub(super) fn backward<S: Scalar>(&self, nodes: &[Node<S>], dy: &[S], g: &mut GradBuf<'_, S>) {
        let x = nodes[self.x.0].value.data();
        let c = nodes[self.x.0].value.dim(-1);
        match self.scale {
            None => g.add(self.x, dy),
            Some(sv) => {
                let s = nodes[sv.0].value.data();
                if let Some(dx) = g.slot(self.x) {
                    for i in 0..dx.len() {
                        dx[i] += dy[i] * s[i % c];
                    }
                }
                if let Some(ds) = g.slot(sv) {
                    for i in 0..dy.len() {
                        ds[i % c] += dy[i] * x[i];
                    }
                }
            }
        }
        if let Some(bv) = self.shift {
            if let Some(db) = g.slot(bv) {
                for i in 0..dy.len() {
                    db[i % c] += dy[i];
                }
            }
        }
    }
}

/// Elementwise product with a constant (dropout and frame masks).
pub(crate) struct MulConst<S> {
    x: Var,
    c: Vec<S>,
}

impl<S: Scalar> MulConst<S> {
    pub(super) fn backward(&self, dy: &[S], g: &mut GradBuf<'_, S>) {
        if let Some(dx) = g.slot(self.x) {
            for i in 0..dx.len() {
                dx[i] += dy[i] * self.c[i];
            }
        }
    }
}

pub(crate) struct ConcatLast {
    a: Var,
    b: Var,
}

impl ConcatLast {
    pub(super) fn backward<S: Scalar>(&self, nodes: &[Node<S>], dy: &[S], g: &mut GradBuf<'_, S>) {
        let ca = nodes[self.a.0].value.dim(-1);
        let cb = nodes[self.b.0].value.dim(-1);
        let rows = nodes[self.a.0].value.numel() / ca;
        if let Some(da) = g.slot(self.a) {
            for r in 0..rows {
                for j in 0..ca {
                    da[r * ca + j] += dy[r * (ca + cb) + j];
                }
            }
        }
        if let Some(db) = g.slot(self.b) {
            for r in 0..rows {
                for j in 0..cb {
                    db[r * cb + j] += dy[r * (ca + cb) + ca + j];
                }
            }
        }
    }
}

pub(crate) struct Reduce {
    x: Var,
    mean: bool,
}

impl Reduce {
    pub(super) fn backward<S: Scalar>(&self, nodes: &[Node<S>], dy: &[S], g: &mut GradBuf<'_, S>) {
        let n = nodes[self.x.0].value.numel();
        let d = if self.mean {
            dy[0] / S::of(n as f64)
        } else {
            dy[0]
        };
        if let Some(dx) = g.slot(self.x) {
            for v in dx.iter_mut() {
                *v += d;
            }
        }
    }
}

impl<S: Scalar> Graph<S> {
    fn unary(&mut self, x: Var, kind: UnaryKind<S>) -> Var {
        let xs = self.value(x);
        let f: Box<dyn Fn(S) -> S> = match kind {
            UnaryKind::Swish => Box::new(|v| v * sigmoid(v)),
            UnaryKind::Sigmoid => Box::new(sigmoid),
            UnaryKind::Tanh => Box::new(|v: S| v.tanh()),
            UnaryKind::Exp => Box::new(|v: S| v.exp()),
            UnaryKind::Log => Box::new(|v: S| v.ln()),
            UnaryKind::Scale(c) => Box::new(move |v| v * c),
        };
        let data = xs.data().iter().map(|&v| f(v)).collect();
        let out = Tensor::new(xs.shape().to_vec(), data).expect("same shape");
        self.push(out, Op::Unary(Unary { x, kind }), &[x])
    }

    /// `x * sigmoid(x)`.
    pub fn swish(&mut self, x: Var) -> Var {
        self.unary(x, UnaryKind::Swish)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, UnaryKind::Sigmoid)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, UnaryKind::Tanh)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, UnaryKind::Exp)
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.unary(x, UnaryKind::Log)
    }

    pub fn scale(&mut self, x: Var, c: S) -> Var {
        self.unary(x, UnaryKind::Scale(c))
    }

    fn binary(&mut self, a: Var, b: Var, kind: BinaryKind) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return shape_err(
                "elementwise",
                format!("{:?} vs {:?}", av.shape(), bv.shape()),
            );
        }
        let data = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(&x, &y)| match kind {
                BinaryKind::Add => x + y,
                BinaryKind::Sub => x - y,
                BinaryKind::Mul => x * y,
            })
            .collect();
        let out = Tensor::new(av.shape().to_vec(), data)?;
        Ok(self.push(out, Op::Binary(Binary { a, b, kind }), &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinaryKind::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinaryKind::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinaryKind::Mul)
    }

    fn bias_op(&mut self, x: Var, scale: Option<Var>, shift: Option<Var>) -> Result<Var> {
        let xv = self.value(x);
        let c = xv.dim(-1);
        for p in scale.iter().chain(shift.iter()) {
            if self.shape(*p) != [c] {
                return shape_err(
                    "bias",
                    format!("vector {:?} against last dim {c}", self.shape(*p)),
                );
            }
        }
        let s = scale.map(|v| self.data(v));
        let b = shift.map(|v| self.data(v));
        let data = xv
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let mut y = v;
                if let Some(s) = s {
                    y *= s[i % c];
                }
                if let Some(b) = b {
                    y += b[i % c];
                }
                y
            })
            .collect();
        let out = Tensor::new(xv.shape().to_vec(), data)?;
        let mut inputs = vec![x];
        inputs.extend(scale);
        inputs.extend(shift);
        Ok(self.push(out, Op::Bias(Bias { x, scale, shift }), &inputs))
    }

    /// Adds a vector along the last dimension.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        self.bias_op(x, None, Some(bias))
    }

    /// `x * gamma + beta` along the last dimension.
    pub fn affine(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        self.bias_op(x, Some(gamma), Some(beta))
    }

    pub(crate) fn mul_const(&mut self, x: Var, c: Vec<S>) -> Result<Var> {
        let xv = self.value(x);
        if c.len() != xv.numel() {
            return shape_err("mul_const", format!("{} vs {}", c.len(), xv.numel()));
        }
        let data = xv.data().iter().zip(&c).map(|(&a, &b)| a * b).collect();
        let out = Tensor::new(xv.shape().to_vec(), data)?;
        Ok(self.push(out, Op::MulConst(MulConst { x, c }), &[x]))
    }

    /// Zeroes frames of `x: [B, T, ...]` whose entry in `valid` (`B * T`,
    /// row-major) is false.
    pub fn mask_frames(&mut self, x: Var, valid: &[bool]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 || shape[0] * shape[1] != valid.len() {
            return shape_err(
                "mask_frames",
                format!("{shape:?} with {} mask entries", valid.len()),
            );
        }
        if valid.iter().all(|&v| v) {
            return Ok(x);
        }
        let inner: usize = shape[2..].iter().product();
        let mut c = Vec::with_capacity(valid.len() * inner);
        for &keep in valid {
            let k = if keep { S::one() } else { S::zero() };
            c.extend(std::iter::repeat_n(k, inner));
        }
        self.mul_const(x, c)
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        Ok(self.push(out, Op::Reshape(x), &[x]))
    }

    /// Concatenates along the last dimension; leading dimensions must agree.
    pub fn concat_last(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != sb.len() || sa[..sa.len() - 1] != sb[..sb.len() - 1] {
            return shape_err("concat_last", format!("{sa:?} vs {sb:?}"));
        }
        let (ca, cb) = (sa[sa.len() - 1], sb[sb.len() - 1]);
        let rows = self.value(a).numel() / ca;
        let (da, db) = (self.data(a), self.data(b));
        let mut data = Vec::with_capacity(rows * (ca + cb));
        for r in 0..rows {
            data.extend_from_slice(&da[r * ca..(r + 1) * ca]);
            data.extend_from_slice(&db[r * cb..(r + 1) * cb]);
        }
        let mut shape = sa;
        *shape.last_mut().unwrap() = ca + cb;
        let out = Tensor::new(shape, data)?;
        Ok(self.push(out, Op::Concat(ConcatLast { a, b }), &[a, b]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: S = self.data(x).iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Reduce(Reduce { x, mean: false }), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let s: S = xv.data().iter().copied().sum::<S>() / S::of(xv.numel() as f64);
        self.push(Tensor::scalar(s), Op::Reduce(Reduce { x, mean: true }), &[x])
    }
}
