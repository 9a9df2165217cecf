//! Bidirectional GRU layer as a single fused tape op.
//!
//! The recurrence is sequential, so running it through primitive graph ops
//! would scatter thousands of small nodes per segment; instead the whole
//! scan (both directions) is one op with a hand-rolled backward pass through
//! time, verified against finite differences.

use super::graph::{BackwardCtx, BackwardStep, GradSink, Graph, NodeId, OpError};
use super::tensor::{gemm_acc, Scalar, Tensor};

/// Weights of one scan direction. Gate blocks are ordered `[r | z | n]`
/// along the `3H` axis:
///
/// ```text
/// r_t = sigma(x_t W_xr + b_xr + h_{t-1} W_hr + b_hr)
/// z_t = sigma(x_t W_xz + b_xz + h_{t-1} W_hz + b_hz)
/// n_t = tanh (x_t W_xn + b_xn + r_t * (h_{t-1} W_hn + b_hn))
/// h_t = z_t * h_{t-1} + (1 - z_t) * n_t
/// ```
#[derive(Clone, Copy, Debug)]
pub struct GruDirection {
    /// `(C, 3H)` input projection.
    pub w_x: NodeId,
    /// `(H, 3H)` recurrent projection.
    pub w_h: NodeId,
    /// `(3H)` input bias.
    pub b_x: NodeId,
    /// `(3H)` recurrent bias.
    pub b_h: NodeId,
}

#[derive(Clone, Copy, Debug)]
pub struct BgruWeights {
    pub fwd: GruDirection,
    pub bwd: GruDirection,
}

struct DirSaved<T> {
    r: Vec<T>,
    z: Vec<T>,
    n: Vec<T>,
    /// recurrent candidate pre-gate `h_{t-1} W_hn + b_hn`
    cn: Vec<T>,
    h_prev: Vec<T>,
}

struct BgruStep<T> {
    x: usize,
    dirs: [GruDirection; 2],
    saved: [DirSaved<T>; 2],
    /// `(T*B, C)` time-major copy of the input, row `t*B + b`.
    x_tm: Vec<T>,
    bsz: usize,
    c_in: usize,
    t_len: usize,
    hidden: usize,
}

fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

#[allow(clippy::too_many_arguments)]
fn scan_direction<T: Scalar>(
    g: &Graph<T>,
    dir: &GruDirection,
    reverse: bool,
    x_tm: &[T],
    out: &mut [T],
    out_chan_off: usize,
    bsz: usize,
    c_in: usize,
    t_len: usize,
    hidden: usize,
) -> DirSaved<T> {
    let h3 = 3 * hidden;
    let steps = t_len * bsz;

    // input projections for every step at once
    let mut p = vec![T::zero(); steps * h3];
    gemm_acc(
        steps,
        c_in,
        h3,
        x_tm,
        (c_in as isize, 1),
        g.value(dir.w_x).data(),
        (h3 as isize, 1),
        &mut p,
        (h3 as isize, 1),
    );
    let bx = g.value(dir.b_x).data();
    for row in p.chunks_exact_mut(h3) {
        for (v, b) in row.iter_mut().zip(bx) {
            *v = *v + *b;
        }
    }

    let mut saved = DirSaved {
        r: vec![T::zero(); steps * hidden],
        z: vec![T::zero(); steps * hidden],
        n: vec![T::zero(); steps * hidden],
        cn: vec![T::zero(); steps * hidden],
        h_prev: vec![T::zero(); steps * hidden],
    };
    let mut h = vec![T::zero(); bsz * hidden];
    let mut ct = vec![T::zero(); bsz * h3];
    let bh = g.value(dir.b_h).data();
    let wh = g.value(dir.w_h).data();
    let two_h = 2 * hidden;

    for s in 0..t_len {
        let t = if reverse { t_len - 1 - s } else { s };
        for (v, b) in ct.iter_mut().zip(bh.iter().cycle()) {
            *v = *b;
        }
        gemm_acc(
            bsz,
            hidden,
            h3,
            &h,
            (hidden as isize, 1),
            wh,
            (h3 as isize, 1),
            &mut ct,
            (h3 as isize, 1),
        );
        let a = &p[t * bsz * h3..][..bsz * h3];
        for b in 0..bsz {
            let ar = &a[b * h3..][..h3];
            let cr = &ct[b * h3..][..h3];
            let save = t * bsz * hidden + b * hidden;
            for hh in 0..hidden {
                let h_old = h[b * hidden + hh];
                let r = sigmoid(ar[hh] + cr[hh]);
                let z = sigmoid(ar[hidden + hh] + cr[hidden + hh]);
                let cn = cr[two_h + hh];
                let n = (ar[two_h + hh] + r * cn).tanh();
                let h_new = z * h_old + (T::one() - z) * n;
                saved.r[save + hh] = r;
                saved.z[save + hh] = z;
                saved.n[save + hh] = n;
                saved.cn[save + hh] = cn;
                saved.h_prev[save + hh] = h_old;
                out[(b * two_h + out_chan_off + hh) * t_len + t] = h_new;
                h[b * hidden + hh] = h_new;
            }
        }
    }
    saved
}

impl<T: Scalar> BackwardStep<T> for BgruStep<T> {
    fn backward(&self, grad: &Tensor<T>, ctx: &BackwardCtx<'_, T>, out: &mut GradSink<T>) {
        let (bsz, c_in, t_len, hidden) = (self.bsz, self.c_in, self.t_len, self.hidden);
        let h3 = 3 * hidden;
        let two_h = 2 * hidden;
        let steps = t_len * bsz;
        let mut dx_tm = vec![T::zero(); steps * c_in];
        let x_needed = ctx.needs[self.x];

        for (d, dir) in self.dirs.iter().enumerate() {
            let reverse = d == 1;
            let sv = &self.saved[d];
            let wh = ctx.values[dir.w_h.index()].data();
            let mut da = vec![T::zero(); steps * h3];
            let mut dwh = Tensor::zeros(&[hidden, h3]);
            let mut dbh = Tensor::zeros(&[h3]);
            let mut dh = vec![T::zero(); bsz * hidden];
            let mut dct = vec![T::zero(); bsz * h3];

            for s in (0..t_len).rev() {
                let t = if reverse { t_len - 1 - s } else { s };
                let save = t * bsz * hidden;
                for b in 0..bsz {
                    let off = save + b * hidden;
                    let da_row = &mut da[(t * bsz + b) * h3..][..h3];
                    let dct_row = &mut dct[b * h3..][..h3];
                    for hh in 0..hidden {
                        let go = grad.data()[(b * two_h + d * hidden + hh) * t_len + t];
                        let dh_total = dh[b * hidden + hh] + go;
                        let r = sv.r[off + hh];
                        let z = sv.z[off + hh];
                        let n = sv.n[off + hh];
                        let cn = sv.cn[off + hh];
                        let hp = sv.h_prev[off + hh];
                        let d_z = dh_total * (hp - n);
                        let d_n = dh_total * (T::one() - z);
                        let d_pre_n = d_n * (T::one() - n * n);
                        let d_r = d_pre_n * cn;
                        let d_pre_z = d_z * z * (T::one() - z);
                        let d_pre_r = d_r * r * (T::one() - r);
                        da_row[hh] = d_pre_r;
                        da_row[hidden + hh] = d_pre_z;
                        da_row[two_h + hh] = d_pre_n;
                        dct_row[hh] = d_pre_r;
                        dct_row[hidden + hh] = d_pre_z;
                        dct_row[two_h + hh] = d_pre_n * r;
                        // the pure state path; the projection path lands below
                        dh[b * hidden + hh] = dh_total * z;
                    }
                }
                // dh += dC_t . W_h^T
                gemm_acc(
                    bsz,
                    h3,
                    hidden,
                    &dct,
                    (h3 as isize, 1),
                    wh,
                    (1, h3 as isize),
                    &mut dh,
                    (hidden as isize, 1),
                );
                if ctx.needs[dir.w_h.index()] {
                    // dW_h += h_prev^T . dC_t
                    gemm_acc(
                        hidden,
                        bsz,
                        h3,
                        &sv.h_prev[save * 1..][..bsz * hidden],
                        (1, hidden as isize),
                        &dct,
                        (h3 as isize, 1),
                        dwh.data_mut(),
                        (h3 as isize, 1),
                    );
                }
                if ctx.needs[dir.b_h.index()] {
                    for row in dct.chunks_exact(h3) {
                        for (acc, v) in dbh.data_mut().iter_mut().zip(row) {
                            *acc = *acc + *v;
                        }
                    }
                }
            }

            if ctx.needs[dir.w_x.index()] {
                let mut dwx = Tensor::zeros(&[c_in, h3]);
                gemm_acc(
                    c_in,
                    steps,
                    h3,
                    &self.x_tm,
                    (1, c_in as isize),
                    &da,
                    (h3 as isize, 1),
                    dwx.data_mut(),
                    (h3 as isize, 1),
                );
                out.push((dir.w_x.index(), dwx));
            }
            if ctx.needs[dir.b_x.index()] {
                let mut dbx = Tensor::zeros(&[h3]);
                for row in da.chunks_exact(h3) {
                    for (acc, v) in dbx.data_mut().iter_mut().zip(row) {
                        *acc = *acc + *v;
                    }
                }
                out.push((dir.b_x.index(), dbx));
            }
            if ctx.needs[dir.w_h.index()] {
                out.push((dir.w_h.index(), dwh));
            }
            if ctx.needs[dir.b_h.index()] {
                out.push((dir.b_h.index(), dbh));
            }
            if x_needed {
                // dX_tm += dA . W_x^T
                gemm_acc(
                    steps,
                    h3,
                    c_in,
                    &da,
                    (h3 as isize, 1),
                    ctx.values[dir.w_x.index()].data(),
                    (1, h3 as isize),
                    &mut dx_tm,
                    (c_in as isize, 1),
                );
            }
        }

        if x_needed {
            let mut dx = Tensor::zeros(&[bsz, c_in, t_len]);
            for t in 0..t_len {
                for b in 0..bsz {
                    let src = &dx_tm[(t * bsz + b) * c_in..][..c_in];
                    for (c, v) in src.iter().enumerate() {
                        dx.data_mut()[(b * c_in + c) * t_len + t] = *v;
                    }
                }
            }
            out.push((self.x, dx));
        }
    }
}

impl<T: Scalar> Graph<T> {
    /// Bidirectional GRU over `x (B, C, T)` with `hidden` units per
    /// direction, producing `(B, 2*hidden, T)`: forward-scan states in
    /// channels `0..hidden`, reverse-scan states in `hidden..2*hidden`.
    pub fn bgru(&mut self, x: NodeId, weights: &BgruWeights) -> Result<NodeId, OpError> {
        let xsh = self.value(x).shape().to_vec();
        if xsh.len() != 3 {
            return Err(OpError::ShapeMismatch {
                op: "bgru",
                detail: format!("x {xsh:?}"),
            });
        }
        let (bsz, c_in, t_len) = (xsh[0], xsh[1], xsh[2]);
        let wsh = self.value(weights.fwd.w_x).shape().to_vec();
        if wsh.len() != 2 || wsh[0] != c_in || wsh[1] % 3 != 0 {
            return Err(OpError::ShapeMismatch {
                op: "bgru",
                detail: format!("w_x {wsh:?} for C={c_in}"),
            });
        }
        let hidden = wsh[1] / 3;
        for dir in [&weights.fwd, &weights.bwd] {
            if self.value(dir.w_x).shape() != [c_in, 3 * hidden]
                || self.value(dir.w_h).shape() != [hidden, 3 * hidden]
                || self.value(dir.b_x).shape() != [3 * hidden]
                || self.value(dir.b_h).shape() != [3 * hidden]
            {
                return Err(OpError::ShapeMismatch {
                    op: "bgru",
                    detail: "direction weight shapes disagree".into(),
                });
            }
        }

        let mut x_tm = vec![T::zero(); t_len * bsz * c_in];
        {
            let xd = self.value(x).data();
            for b in 0..bsz {
                for c in 0..c_in {
                    let row = &xd[(b * c_in + c) * t_len..][..t_len];
                    for (t, v) in row.iter().enumerate() {
                        x_tm[(t * bsz + b) * c_in + c] = *v;
                    }
                }
            }
        }

        let mut value = Tensor::zeros(&[bsz, 2 * hidden, t_len]);
        let saved_f = scan_direction(
            self,
            &weights.fwd,
            false,
            &x_tm,
            value.data_mut(),
            0,
            bsz,
            c_in,
            t_len,
            hidden,
        );
        let saved_b = scan_direction(
            self,
            &weights.bwd,
            true,
            &x_tm,
            value.data_mut(),
            hidden,
            bsz,
            c_in,
            t_len,
            hidden,
        );

        let parents = [
            x,
            weights.fwd.w_x,
            weights.fwd.w_h,
            weights.fwd.b_x,
            weights.fwd.b_h,
            weights.bwd.w_x,
            weights.bwd.w_h,
            weights.bwd.b_x,
            weights.bwd.b_h,
        ];
        let needs = parents.iter().any(|id| self.node_needs(*id));
        let step = BgruStep {
            x: x.index(),
            dirs: [weights.fwd, weights.bwd],
            saved: [saved_f, saved_b],
            x_tm,
            bsz,
            c_in,
            t_len,
            hidden,
        };
        Ok(self.push_external("bgru", value, needs, Box::new(step)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn leaf_weights(
        g: &mut Graph<f64>,
        c: usize,
        h: usize,
        fill: impl Fn(usize) -> f64,
    ) -> BgruWeights {
        let mut mk = |shape: &[usize], salt: usize| {
            let len: usize = shape.iter().product();
            let data = (0..len).map(|i| fill(i * 7 + salt)).collect();
            g.leaf(Tensor::from_vec(shape, data), true)
        };
        let fwd = GruDirection {
            w_x: mk(&[c, 3 * h], 1),
            w_h: mk(&[h, 3 * h], 2),
            b_x: mk(&[3 * h], 3),
            b_h: mk(&[3 * h], 4),
        };
        let bwd = GruDirection {
            w_x: mk(&[c, 3 * h], 5),
            w_h: mk(&[h, 3 * h], 6),
            b_x: mk(&[3 * h], 7),
            b_h: mk(&[3 * h], 8),
        };
        BgruWeights { fwd, bwd }
    }

    #[test]
    fn zero_weights_zero_input_gives_zero_output() {
        let mut g: Graph<f64> = Graph::new();
        let x = g.leaf(Tensor::zeros(&[1, 2, 4]), false);
        let w = leaf_weights(&mut g, 2, 3, |_| 0.0);
        let y = g.bgru(x, &w).unwrap();
        assert_eq!(g.value(y).shape(), &[1, 6, 4]);
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_step_directions_agree_for_shared_weights() {
        let mut g: Graph<f64> = Graph::new();
        let x = g.leaf(
            Tensor::from_vec(&[2, 3, 1], vec![0.3, -0.2, 0.8, -0.5, 0.1, 0.9]),
            false,
        );
        let shared = leaf_weights(&mut g, 3, 4, |i| ((i % 13) as f64 - 6.0) * 0.05);
        let tied = BgruWeights {
            fwd: shared.fwd,
            bwd: shared.fwd,
        };
        let y = g.bgru(x, &tied).unwrap();
        let v = g.value(y);
        for b in 0..2 {
            for h in 0..4 {
                let f = v.data()[(b * 8 + h) * 1];
                let r = v.data()[(b * 8 + 4 + h) * 1];
                assert!((f - r).abs() < 1e-15);
            }
        }
    }
}
