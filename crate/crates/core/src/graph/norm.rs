use super::{GradBuf, Graph, Node, Op, Var};
use crate::error::{shape_err, Result};
use crate::scalar::{sigmoid, Scalar};
use crate::tensor::Tensor;

/// Normalisation over the last dimension, without the affine part.
pub(crate) struct LayerNorm<S> {
    x: Var,
    xhat: Vec<S>,
    rstd: Vec<S>,
}

impl<S: Scalar> LayerNorm<S> {
    pub(super) fn backward(&self, dy: &[S], g: &mut GradBuf<'_, S>) {
        let c = self.xhat.len() / self.rstd.len();
        let inv_c = S::of(1.0 / c as f64);
        let Some(dx) = g.slot(self.x) else { return };
        for (r, &rstd) in self.rstd.iter().enumerate() {
            let row = r * c..(r + 1) * c;
            let (dyr, xh) = (&dy[row.clone()], &self.xhat[row.clone()]);
            let mean_dy = dyr.iter().copied().sum::<S>() * inv_c;
            let mean_dyx = dyr.iter().zip(xh).map(|(&a, &b)| a * b).sum::<S>() * inv_c;
            for (j, d) in dx[row].iter_mut().enumerate() {
                *d += rstd * (dyr[j] - mean_dy - xh[j] * mean_dyx);
            }
        }
    }
}

/// Softmax over the last dimension. With a key mask, masked entries get
/// probability zero and a fully masked row is all zeros.
pub(crate) struct Softmax {
    x: Var,
}

impl Softmax {
    pub(super) fn backward<S: Scalar>(&self, y: &Tensor<S>, dy: &[S], g: &mut GradBuf<'_, S>) {
        let c = y.dim(-1);
        let y = y.data();
        let Some(dx) = g.slot(self.x) else { return };
        for r in 0..y.len() / c {
            let row = r * c..(r + 1) * c;
            let dot: S = dy[row.clone()].iter().zip(&y[row.clone()]).map(|(&a, &b)| a * b).sum();
            for j in row {
                dx[j] += y[j] * (dy[j] - dot);
            }
        }
    }
}

/// Gated linear unit over the last dimension: `a * sigmoid(b)` for `[a | b]`.
pub(crate) struct Glu {
    x: Var,
}

impl Glu {
    pub(super) fn backward<S: Scalar>(&self, nodes: &[Node<S>], dy: &[S], g: &mut GradBuf<'_, S>) {
        let xv = &nodes[self.x.0].value;
        let c2 = xv.dim(-1);
        let c = c2 / 2;
        let x = xv.data();
        let Some(dx) = g.slot(self.x) else { return };
        for r in 0..x.len() / c2 {
            for j in 0..c {
                let a = x[r * c2 + j];
                let s = sigmoid(x[r * c2 + c + j]);
                let d = dy[r * c + j];
                dx[r * c2 + j] += d * s;
                dx[r * c2 + c + j] += d * a * s * (S::one() - s);
            }
        }
    }
}

impl<S: Scalar> Graph<S> {
    pub fn layer_norm(&mut self, x: Var, eps: f64) -> Var {
        let xv = self.value(x);
        let c = xv.dim(-1);
        let rows = xv.numel() / c;
        let inv_c = S::of(1.0 / c as f64);
        let mut xhat = Vec::with_capacity(xv.numel());
        let mut rstd = Vec::with_capacity(rows);
        for row in xv.data().chunks(c) {
            let mean = row.iter().copied().sum::<S>() * inv_c;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() * inv_c;
            let rs = S::one() / (var + S::of(eps)).sqrt();
            rstd.push(rs);
            xhat.extend(row.iter().map(|&v| (v - mean) * rs));
        }
        let out = Tensor::new(xv.shape().to_vec(), xhat.clone()).expect("same shape");
        self.push(out, Op::LayerNorm(LayerNorm { x, xhat, rstd }), &[x])
    }

    pub fn softmax(&mut self, x: Var) -> Var {
        self.softmax_impl(x, None).expect("unmasked softmax")
    }

    /// Softmax over keys with `key_valid[b * T_k + j]` selecting usable keys;
    /// rows are grouped so that `rows_per_batch` consecutive rows share one
    /// batch entry.
    pub fn masked_softmax(&mut self, x: Var, key_valid: &[bool], rows_per_batch: usize) -> Result<Var> {
        self.softmax_impl(x, Some((key_valid, rows_per_batch)))
    }

    fn softmax_impl(&mut self, x: Var, mask: Option<(&[bool], usize)>) -> Result<Var> {
        let xv = self.value(x);
        let c = xv.dim(-1);
        let rows = xv.numel() / c;
        if let Some((m, rpb)) = mask {
            if rpb == 0 || !rows.is_multiple_of(rpb) || m.len() != (rows / rpb) * c {
                return shape_err(
                    "masked_softmax",
                    format!("{:?} with {} mask entries, {rpb} rows/batch", xv.shape(), m.len()),
                );
            }
        }
        let mut data = vec![S::zero(); xv.numel()];
        for (r, row) in xv.data().chunks(c).enumerate() {
            let valid = |j: usize| match mask {
                None => true,
                Some((m, rpb)) => m[(r / rpb) * c + j],
            };
            let mut max = S::neg_infinity();
            for (j, &v) in row.iter().enumerate() {
                if valid(j) && v > max {
                    max = v;
                }
            }
            if max == S::neg_infinity() {
                continue;
            }
            let out = &mut data[r * c..(r + 1) * c];
            let mut z = S::zero();
            for (j, &v) in row.iter().enumerate() {
                if valid(j) {
                    out[j] = (v - max).exp();
                    z += out[j];
                }
            }
            for o in out.iter_mut() {
                *o /= z;
            }
        }
        let out = Tensor::new(xv.shape().to_vec(), data)?;
        Ok(self.push(out, Op::Softmax(Softmax { x }), &[x]))
    }

    pub fn glu(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let c2 = xv.dim(-1);
        if !c2.is_multiple_of(2) {
            return shape_err("glu", format!("odd last dim {c2}"));
        }
        let c = c2 / 2;
        let mut data = Vec::with_capacity(xv.numel() / 2);
        for row in xv.data().chunks(c2) {
            data.extend((0..c).map(|j| row[j] * sigmoid(row[c + j])));
        }
        let mut shape = xv.shape().to_vec();
        *shape.last_mut().unwrap() = c;
        let out = Tensor::new(shape, data)?;
        Ok(self.push(out, Op::Glu(Glu { x }), &[x]))
    }
}
