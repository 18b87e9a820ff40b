use super::{GradBuf, Graph, Op, Var};
use crate::error::{shape_err, Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Frame-level training criterion applied to label logits.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Criterion {
    /// `-log p_t`
    CrossEntropy,
    /// `-(1 - p_t)^gamma · log p_t`
    Focal { gamma: f64 },
}

impl Criterion {
    /// Loss of one frame and the factor `c` such that the logit gradient is
    /// `c · (p - onehot)`.
    fn frame<S: Scalar>(self, p: S, log_p: S) -> (S, S) {
        match self {
            Criterion::CrossEntropy => (-log_p, S::one()),
            Criterion::Focal { gamma: 0.0 } => (-log_p, S::one()),
            Criterion::Focal { gamma } => {
                let g = S::of(gamma);
                let q = S::one() - p;
                let w = q.powf(g);
                // d/dp of the weight, folded into the softmax Jacobian; the
                // term vanishes as p -> 1 for every gamma > 0.
                let extra = if q > S::zero() {
                    g * q.powf(g - S::one()) * p * log_p
                } else {
                    S::zero()
                };
                (-(w * log_p), w - extra)
            }
        }
    }
}

/// Summed criterion over valid frames of `[B, T, V]` logits.
pub(crate) struct FrameLoss<S> {
    logits: Var,
    /// Per valid row: (row index, target, gradient factor).
    rows: Vec<(usize, usize, S)>,
    /// Softmax of each valid row, same order as `rows`.
    probs: Vec<S>,
    v: usize,
}

impl<S: Scalar> FrameLoss<S> {
    pub(super) fn backward(&self, dy: &[S], g: &mut GradBuf<'_, S>) {
        let v = self.v;
        let Some(dx) = g.slot(self.logits) else { return };
        for (k, &(row, target, factor)) in self.rows.iter().enumerate() {
            let c = dy[0] * factor;
            let p = &self.probs[k * v..(k + 1) * v];
            let d = &mut dx[row * v..(row + 1) * v];
            for j in 0..v {
                let onehot = if j == target { S::one() } else { S::zero() };
                d[j] += c * (p[j] - onehot);
            }
        }
    }
}

/// Numerically stable softmax of one row and `log p[target]`.
pub(crate) fn softmax_row<S: Scalar>(row: &[S], target: usize, out: &mut [S]) -> S {
    let max = row.iter().copied().fold(S::neg_infinity(), S::max);
    let mut z = S::zero();
    for (o, &x) in out.iter_mut().zip(row) {
        *o = (x - max).exp();
        z += *o;
    }
    for o in out.iter_mut() {
        *o /= z;
    }
    row[target] - max - z.ln()
}

impl<S: Scalar> Graph<S> {
    /// Sum of the per-frame criterion over frames where `valid` is set.
    /// `targets` and `valid` are indexed by `b * T + t`.
    pub fn frame_loss(&mut self, logits: Var, targets: &[usize], valid: &[bool], criterion: Criterion) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        if shape.len() != 3 || targets.len() != shape[0] * shape[1] || valid.len() != targets.len() {
            return shape_err(
                "frame_loss",
                format!("logits {shape:?}, {} targets, {} mask entries", targets.len(), valid.len()),
            );
        }
        if let Criterion::Focal { gamma } = criterion {
            if !(gamma >= 0.0) {
                return Err(Error::Config(format!("focal gamma must be >= 0, got {gamma}")));
            }
        }
        let v = shape[2];
        let x = self.data(logits);
        let mut rows = Vec::new();
        let mut probs = Vec::new();
        let mut total = S::zero();
        let mut p = vec![S::zero(); v];
        for (r, (&target, &ok)) in targets.iter().zip(valid).enumerate() {
            if !ok {
                continue;
            }
            if target >= v {
                return Err(Error::Contract(format!("label {target} out of range for {v} outputs")));
            }
            let log_pt = softmax_row(&x[r * v..(r + 1) * v], target, &mut p);
            let (l, factor) = criterion.frame(log_pt.exp(), log_pt);
            total += l;
            rows.push((r, target, factor));
            probs.extend_from_slice(&p);
        }
        let op = FrameLoss {
            logits,
            rows,
            probs,
            v,
        };
        Ok(self.push(Tensor::scalar(total), Op::Loss(op), &[logits]))
    }
}
