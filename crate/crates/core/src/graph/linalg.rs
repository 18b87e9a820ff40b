use super::{GradBuf, Graph, Node, Op, Var};
use crate::error::{shape_err, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// `c[m×n] += a[m×k] · b[k×n]`
pub(crate) fn gemm<S: Scalar>(a: &[S], b: &[S], c: &mut [S], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let ci = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == S::zero() {
                continue;
            }
            let bp = &b[p * n..(p + 1) * n];
            for (cj, &bj) in ci.iter_mut().zip(bp) {
                *cj += aip * bj;
            }
        }
    }
}

/// `a_grad[m×k] += dc[m×n] · bᵀ`
fn gemm_nt<S: Scalar>(dc: &[S], b: &[S], da: &mut [S], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let dci = &dc[i * n..(i + 1) * n];
        for p in 0..k {
            let bp = &b[p * n..(p + 1) * n];
            let mut s = S::zero();
            for (&x, &y) in dci.iter().zip(bp) {
                s += x * y;
            }
            da[i * k + p] += s;
        }
    }
}

/// `b_grad[k×n] += aᵀ · dc[m×n]`
fn gemm_tn<S: Scalar>(a: &[S], dc: &[S], db: &mut [S], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let dci = &dc[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == S::zero() {
                continue;
            }
            let dbp = &mut db[p * n..(p + 1) * n];
            for (d, &g) in dbp.iter_mut().zip(dci) {
                *d += aip * g;
            }
        }
    }
}

pub(crate) struct MatMul {
    a: Var,
    b: Var,
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    shared_rhs: bool,
}

impl MatMul {
    pub(super) fn backward<S: Scalar>(&self, nodes: &[Node<S>], dy: &[S], g: &mut GradBuf<'_, S>) {
        let (m, k, n) = (self.m, self.k, self.n);
        let a = nodes[self.a.0].value.data();
        let b = nodes[self.b.0].value.data();
        let b_off = |i: usize| if self.shared_rhs { 0 } else { i * k * n };
        if let Some(da) = g.slot(self.a) {
            for i in 0..self.batch {
                gemm_nt(
                    &dy[i * m * n..(i + 1) * m * n],
                    &b[b_off(i)..b_off(i) + k * n],
                    &mut da[i * m * k..(i + 1) * m * k],
                    m,
                    k,
                    n,
                );
            }
        }
        if let Some(db) = g.slot(self.b) {
            for i in 0..self.batch {
                let o = b_off(i);
                gemm_tn(
                    &a[i * m * k..(i + 1) * m * k],
                    &dy[i * m * n..(i + 1) * m * n],
                    &mut db[o..o + k * n],
                    m,
                    k,
                    n,
                );
            }
        }
    }
}

pub(crate) struct Permute {
    x: Var,
    perm: Vec<usize>,
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// For each output position, the flat source offset in the input.
fn permute_index(in_shape: &[usize], perm: &[usize]) -> Vec<usize> {
    let out_shape: Vec<usize> = perm.iter().map(|&p| in_shape[p]).collect();
    let in_strides = strides(in_shape);
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let n: usize = out_shape.iter().product();
    let mut idx = vec![0usize; out_shape.len()];
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        out.push(idx.iter().zip(&src_strides).map(|(i, s)| i * s).sum());
        for d in (0..idx.len()).rev() {
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    out
}

impl Permute {
    pub(super) fn backward<S: Scalar>(&self, nodes: &[Node<S>], dy: &[S], g: &mut GradBuf<'_, S>) {
        let src = permute_index(nodes[self.x.0].value.shape(), &self.perm);
        if let Some(dx) = g.slot(self.x) {
            for (o, &s) in src.iter().enumerate() {
                dx[s] += dy[o];
            }
        }
    }
}

/// Expands per-distance scores `[N, T, 2c+1]` into `[N, T, T]`, where entry
/// `(i, j)` reads distance `clamp(j - i, -c, c)`.
pub(crate) struct RelPosGather {
    x: Var,
    clamp: usize,
}

fn rel_index(i: usize, j: usize, clamp: usize) -> usize {
    let d = j as isize - i as isize;
    (d.clamp(-(clamp as isize), clamp as isize) + clamp as isize) as usize
}

impl RelPosGather {
    pub(super) fn backward<S: Scalar>(&self, nodes: &[Node<S>], dy: &[S], g: &mut GradBuf<'_, S>) {
        let shape = nodes[self.x.0].value.shape();
        let (t, r) = (shape[shape.len() - 2], shape[shape.len() - 1]);
        let n = nodes[self.x.0].value.numel() / (t * r);
        if let Some(dx) = g.slot(self.x) {
            for b in 0..n {
                for i in 0..t {
                    for j in 0..t {
                        dx[(b * t + i) * r + rel_index(i, j, self.clamp)] += dy[(b * t + i) * t + j];
                    }
                }
            }
        }
    }
}

impl<S: Scalar> Graph<S> {
    /// `[.., m, k] x [k, n]` (shared right operand) or `[.., m, k] x [.., k, n]`
    /// with identical leading dimensions.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() < 2 || sb.len() < 2 {
            return shape_err("matmul", format!("rank too small: {sa:?} x {sb:?}"));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (k2, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != k2 {
            return shape_err("matmul", format!("inner dims differ: {sa:?} x {sb:?}"));
        }
        let lead = &sa[..sa.len() - 2];
        let shared_rhs = sb.len() == 2;
        if !shared_rhs && sb[..sb.len() - 2] != *lead {
            return shape_err("matmul", format!("batch dims differ: {sa:?} x {sb:?}"));
        }
        let batch: usize = lead.iter().product();
        let (ad, bd) = (self.data(a), self.data(b));
        let mut c = vec![S::zero(); batch * m * n];
        for i in 0..batch {
            let bo = if shared_rhs { 0 } else { i * k * n };
            gemm(
                &ad[i * m * k..(i + 1) * m * k],
                &bd[bo..bo + k * n],
                &mut c[i * m * n..(i + 1) * m * n],
                m,
                k,
                n,
            );
        }
        let mut shape = lead.to_vec();
        shape.extend([m, n]);
        let out = Tensor::new(shape, c)?;
        let op = MatMul {
            a,
            b,
            batch,
            m,
            k,
            n,
            shared_rhs,
        };
        Ok(self.push(out, Op::MatMul(op), &[a, b]))
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true)) {
            return shape_err("permute", format!("{perm:?} for {shape:?}"));
        }
        let src = permute_index(&shape, perm);
        let xd = self.data(x);
        let data = src.iter().map(|&s| xd[s]).collect();
        let out = Tensor::new(perm.iter().map(|&p| shape[p]).collect::<Vec<_>>(), data)?;
        Ok(self.push(
            out,
            Op::Permute(Permute {
                x,
                perm: perm.to_vec(),
            }),
            &[x],
        ))
    }

    /// See [`RelPosGather`]. Input `[.., T, 2*clamp+1]`, output `[.., T, T]`.
    pub fn rel_pos_gather(&mut self, x: Var, clamp: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let r = 2 * clamp + 1;
        if shape.len() < 2 || shape[shape.len() - 1] != r {
            return shape_err("rel_pos_gather", format!("{shape:?} with clamp {clamp}"));
        }
        let t = shape[shape.len() - 2];
        let n = self.value(x).numel() / (t * r);
        let xd = self.data(x);
        let mut data = Vec::with_capacity(n * t * t);
        for b in 0..n {
            for i in 0..t {
                for j in 0..t {
                    data.push(xd[(b * t + i) * r + rel_index(i, j, clamp)]);
                }
            }
        }
        let mut out_shape = shape;
        *out_shape.last_mut().unwrap() = t;
        let out = Tensor::new(out_shape, data)?;
        Ok(self.push(out, Op::RelPos(RelPosGather { x, clamp }), &[x]))
    }
}
