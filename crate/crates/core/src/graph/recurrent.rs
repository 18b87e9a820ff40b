use super::{GradBuf, Graph, Node, Op, Var};
use crate::error::{shape_err, Result};
use crate::scalar::{sigmoid, Scalar};
use crate::tensor::Tensor;

/// LSTM recurrence over precomputed input projections. Gate order in the
/// last dimension is input, forget, cell, output.
pub(crate) struct Lstm<S> {
    gx: Var,
    u: Var,
    lengths: Vec<usize>,
    reverse: bool,
    /// Activated gates per step, `[B, T, 4H]`.
    gates: Vec<S>,
    /// Cell state per step, `[B, T, H]`.
    cells: Vec<S>,
}

fn steps(len: usize, reverse: bool) -> Box<dyn Iterator<Item = usize>> {
    if reverse {
        Box::new((0..len).rev())
    } else {
        Box::new(0..len)
    }
}

impl<S: Scalar> Lstm<S> {
    pub(super) fn backward(&self, nodes: &[Node<S>], dy: &[S], g: &mut GradBuf<'_, S>) {
        let gs = nodes[self.gx.0].value.shape();
        let (b, t, h4) = (gs[0], gs[1], gs[2]);
        let h = h4 / 4;
        let u = nodes[self.u.0].value.data();
        let mut dgx = vec![S::zero(); b * t * h4];
        let mut du = vec![S::zero(); h * h4];
        for bi in 0..b {
            let order: Vec<usize> = steps(self.lengths[bi].min(t), self.reverse).collect();
            let mut dh_next = vec![S::zero(); h];
            let mut dc_next = vec![S::zero(); h];
            for (pos, &ti) in order.iter().enumerate().rev() {
                let prev = pos.checked_sub(1).map(|p| order[p]);
                let gate = &self.gates[(bi * t + ti) * h4..(bi * t + ti + 1) * h4];
                let cell = &self.cells[(bi * t + ti) * h..(bi * t + ti + 1) * h];
                let mut dz = vec![S::zero(); h4];
                for j in 0..h {
                    let (ig, fg, cg, og) = (gate[j], gate[h + j], gate[2 * h + j], gate[3 * h + j]);
                    let tc = cell[j].tanh();
                    let dh = dy[(bi * t + ti) * h + j] + dh_next[j];
                    let dc = dh * og * (S::one() - tc * tc) + dc_next[j];
                    let c_prev = prev.map_or(S::zero(), |p| self.cells[(bi * t + p) * h + j]);
                    dz[j] = dc * cg * ig * (S::one() - ig);
                    dz[h + j] = dc * c_prev * fg * (S::one() - fg);
                    dz[2 * h + j] = dc * ig * (S::one() - cg * cg);
                    dz[3 * h + j] = dh * tc * og * (S::one() - og);
                    dc_next[j] = dc * fg;
                }
                dgx[(bi * t + ti) * h4..(bi * t + ti + 1) * h4].copy_from_slice(&dz);
                // recurrent contribution: z += h_prev · U
                for v in dh_next.iter_mut() {
                    *v = S::zero();
                }
                if let Some(p) = prev {
                    let h_prev = self.hidden(bi, p, t, h);
                    for r in 0..h {
                        let urow = &u[r * h4..(r + 1) * h4];
                        dh_next[r] = urow.iter().zip(&dz).map(|(&a, &b)| a * b).sum();
                        let hp = h_prev[r];
                        for (d, &z) in du[r * h4..(r + 1) * h4].iter_mut().zip(&dz) {
                            *d += hp * z;
                        }
                    }
                }
            }
        }
        if let Some(d) = g.slot(self.gx) {
            for (a, b) in d.iter_mut().zip(&dgx) {
                *a += *b;
            }
        }
        if let Some(d) = g.slot(self.u) {
            for (a, b) in d.iter_mut().zip(&du) {
                *a += *b;
            }
        }
    }

    fn hidden(&self, bi: usize, ti: usize, t: usize, h: usize) -> Vec<S> {
        let h4 = 4 * h;
        let gate = &self.gates[(bi * t + ti) * h4..(bi * t + ti + 1) * h4];
        let cell = &self.cells[(bi * t + ti) * h..(bi * t + ti + 1) * h];
        (0..h).map(|j| gate[3 * h + j] * cell[j].tanh()).collect()
    }
}

impl<S: Scalar> Graph<S> {
    /// Runs one LSTM direction. `gx: [B, T, 4H]` holds `x·W + b`, `u: [H, 4H]`.
    /// Frames at or past a sequence's length output zero and are skipped.
    pub fn lstm(&mut self, gx: Var, u: Var, lengths: &[usize], reverse: bool) -> Result<Var> {
        let (gs, us) = (self.shape(gx).to_vec(), self.shape(u).to_vec());
        if gs.len() != 3 || gs[2] % 4 != 0 || us != [gs[2] / 4, gs[2]] || lengths.len() != gs[0] {
            return shape_err("lstm", format!("gates {gs:?}, recurrent {us:?}"));
        }
        let (b, t, h4) = (gs[0], gs[1], gs[2]);
        let h = h4 / 4;
        let (x, ud) = (self.data(gx), self.data(u));
        let mut gates = vec![S::zero(); b * t * h4];
        let mut cells = vec![S::zero(); b * t * h];
        let mut out = vec![S::zero(); b * t * h];
        for bi in 0..b {
            let mut h_prev = vec![S::zero(); h];
            let mut c_prev = vec![S::zero(); h];
            for ti in steps(lengths[bi].min(t), reverse) {
                let mut z = x[(bi * t + ti) * h4..(bi * t + ti + 1) * h4].to_vec();
                for (r, &hp) in h_prev.iter().enumerate() {
                    if hp == S::zero() {
                        continue;
                    }
                    for (zj, &uj) in z.iter_mut().zip(&ud[r * h4..(r + 1) * h4]) {
                        *zj += hp * uj;
                    }
                }
                for j in 0..h {
                    let ig = sigmoid(z[j]);
                    let fg = sigmoid(z[h + j]);
                    let cg = z[2 * h + j].tanh();
                    let og = sigmoid(z[3 * h + j]);
                    let c = fg * c_prev[j] + ig * cg;
                    let hv = og * c.tanh();
                    let gi = (bi * t + ti) * h4;
                    gates[gi + j] = ig;
                    gates[gi + h + j] = fg;
                    gates[gi + 2 * h + j] = cg;
                    gates[gi + 3 * h + j] = og;
                    cells[(bi * t + ti) * h + j] = c;
                    out[(bi * t + ti) * h + j] = hv;
                    c_prev[j] = c;
                    h_prev[j] = hv;
                }
            }
        }
        let out = Tensor::new([b, t, h], out)?;
        let op = Lstm {
            gx,
            u,
            lengths: lengths.to_vec(),
            reverse,
            gates,
            cells,
        };
        Ok(self.push(out, Op::Lstm(op), &[gx, u]))
    }
}
