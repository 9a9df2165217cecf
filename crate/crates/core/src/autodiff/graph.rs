//! Define-by-run reverse-mode differentiation.
//!
//! A [`Graph`] records one forward pass as a flat tape of nodes. Insertion
//! order is a topological order, so [`Graph::backward`] is a single reverse
//! sweep that accumulates gradients additively into every node that requires
//! them. Parameters enter as leaves; a fresh graph is built per step and
//! dropped afterwards, releasing all saved activations.

use super::tensor::{gemm_acc, Scalar, Tensor};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum OpError {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("batch norm needs at least 2 elements per channel in training mode")]
    DegenerateVariance,
    #[error("no windows selected for the loss reduction")]
    EmptyTargetSet,
}

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

pub(crate) struct BackwardCtx<'a, T> {
    pub(crate) values: &'a [Tensor<T>],
    pub(crate) needs: &'a [bool],
}

pub(crate) type GradSink<T> = Vec<(usize, Tensor<T>)>;

pub(crate) trait BackwardStep<T: Scalar> {
    fn backward(&self, grad: &Tensor<T>, ctx: &BackwardCtx<'_, T>, out: &mut GradSink<T>);
}

pub struct Graph<T: Scalar> {
    values: Vec<Tensor<T>>,
    needs: Vec<bool>,
    steps: Vec<Option<Box<dyn BackwardStep<T>>>>,
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph {
            values: Vec::new(),
            needs: Vec::new(),
            steps: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    fn push(
        &mut self,
        label: &'static str,
        value: Tensor<T>,
        needs: bool,
        step: Option<Box<dyn BackwardStep<T>>>,
    ) -> NodeId {
        debug_assert!(value.all_finite(), "non-finite values out of {label}");
        let _ = label;
        self.values.push(value);
        self.needs.push(needs);
        self.steps.push(step);
        self.grads.push(None);
        NodeId(self.values.len() - 1)
    }

    pub(crate) fn push_external(
        &mut self,
        label: &'static str,
        value: Tensor<T>,
        needs: bool,
        step: Box<dyn BackwardStep<T>>,
    ) -> NodeId {
        self.push(label, value, needs, Some(step))
    }

    pub(crate) fn node_needs(&self, id: NodeId) -> bool {
        self.needs[id.0]
    }

    /// Insert an input tensor. Gradients flow into it iff `requires_grad`.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> NodeId {
        self.push("leaf", value, requires_grad, None)
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.values[id.0]
    }

    pub fn grad(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.grads[id.0].as_ref()
    }

    fn needs_any(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.needs[id.0])
    }

    /// Reverse sweep from a scalar root. Clears previous gradients.
    pub fn backward(&mut self, root: NodeId) {
        assert_eq!(
            self.values[root.0].len(),
            1,
            "backward root must be a scalar"
        );
        for g in self.grads.iter_mut() {
            *g = None;
        }
        self.grads[root.0] = Some(Tensor::from_vec(
            self.values[root.0].shape(),
            vec![T::one()],
        ));
        let mut contribs: GradSink<T> = Vec::new();
        for i in (0..self.values.len()).rev() {
            if self.grads[i].is_none() || !self.needs[i] {
                continue;
            }
            let Some(step) = self.steps[i].as_ref() else {
                continue;
            };
            let ctx = BackwardCtx {
                values: &self.values,
                needs: &self.needs,
            };
            contribs.clear();
            let grad = self.grads[i].take().expect("grad present");
            step.backward(&grad, &ctx, &mut contribs);
            if self.needs[i] {
                // keep leaf-reachable intermediates inspectable
                self.grads[i] = Some(grad);
            }
            for (pid, g) in contribs.drain(..) {
                debug_assert!(g.all_finite(), "non-finite gradient into node {pid}");
                match &mut self.grads[pid] {
                    Some(acc) => {
                        debug_assert_eq!(acc.shape(), g.shape());
                        for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                            *a = *a + *b;
                        }
                    }
                    slot => *slot = Some(g),
                }
            }
        }
    }
}

fn elementwise_shape_check<T: Scalar>(
    op: &'static str,
    a: &Tensor<T>,
    b: &Tensor<T>,
) -> Result<(), OpError> {
    if a.shape() != b.shape() {
        return Err(OpError::ShapeMismatch {
            op,
            detail: format!("{:?} vs {:?}", a.shape(), b.shape()),
        });
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// elementwise ops
// ---------------------------------------------------------------------------

struct AddStep {
    a: usize,
    b: usize,
}

impl<T: Scalar> BackwardStep<T> for AddStep {
    fn backward(&self, grad: &Tensor<T>, ctx: &BackwardCtx<'_, T>, out: &mut GradSink<T>) {
        if ctx.needs[self.a] {
            out.push((self.a, grad.clone()));
        }
        if ctx.needs[self.b] {
            out.push((self.b, grad.clone()));
        }
    }
}

struct MulStep {
    a: usize,
    b: usize,
}

impl<T: Scalar> BackwardStep<T> for MulStep {
    fn backward(&self, grad: &Tensor<T>, ctx: &BackwardCtx<'_, T>, out: &mut GradSink<T>) {
        if ctx.needs[self.a] {
            let bv = &ctx.values[self.b];
            let mut g = grad.clone();
            for (g, b) in g.data_mut().iter_mut().zip(bv.data()) {
                *g = *g * *b;
            }
            out.push((self.a, g));
        }
        if ctx.needs[self.b] {
            let av = &ctx.values[self.a];
            let mut g = grad.clone();
            for (g, a) in g.data_mut().iter_mut().zip(av.data()) {
                *g = *g * *a;
            }
            out.push((self.b, g));
        }
    }
}

struct ScaleStep<T> {
    x: usize,
    factor: T,
}

impl<T: Scalar> BackwardStep<T> for ScaleStep<T> {
    fn backward(&self, grad: &Tensor<T>, ctx: &BackwardCtx<'_, T>, out: &mut GradSink<T>) {
        if ctx.needs[self.x] {
            out.push((self.x, grad.map(|g| g * self.factor)));
        }
    }
}

struct ReluStep {
    x: usize,
}

impl<T: Scalar> BackwardStep<T> for ReluStep {
    fn backward(&self, grad: &Tensor<T>, ctx: &BackwardCtx<'_, T>, out: &mut GradSink<T>) {
        if !ctx.needs[self.x] {
            return;
        }
        let xv = &ctx.values[self.x];
        let mut g = grad.clone();
        for (g, x) in g.data_mut().iter_mut().zip(xv.data()) {
            if *x <= T::zero() {
                *g = T::zero();
            }
        }
        out.push((self.x, g));
    }
}

struct ReshapeStep {
    x: usize,
    orig_shape: Vec<usize>,
}

impl<T: Scalar> BackwardStep<T> for ReshapeStep {
    fn backward(&self, grad: &Tensor<T>, ctx: &BackwardCtx<'_, T>, out: &mut GradSink<T>) {
        if ctx.needs[self.x] {
            out.push((self.x, grad.reshaped(&self.orig_shape)));
        }
    }
}

struct AddRowBiasStep {
    x: usize,
    bias: usize,
    cols: usize,
}

impl<T: Scalar> BackwardStep<T> for AddRowBiasStep {
    fn backward(&self, grad: &Tensor<T>, ctx: &BackwardCtx<'_, T>, out: &mut GradSink<T>) {
        if ctx.needs[self.x] {
            out.push((self.x, grad.clone()));
        }
        if ctx.needs[self.bias] {
            let mut db = Tensor::zeros(&[self.cols]);
            for row in grad.data().chunks_exact(self.cols) {
                for (d, g) in db.data_mut().iter_mut().zip(row) {
                    *d = *d + *g;
                }
            }
            out.push((self.bias, db));
        }
    }
}

impl<T: Scalar> Graph<T> {
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, OpError> {
        elementwise_shape_check("add", self.value(a), self.value(b))?;
        let v = {
            let (av, bv) = (self.value(a), self.value(b));
            let data = av
                .data()
                .iter()
                .zip(bv.data())
                .map(|(&x, &y)| x + y)
                .collect();
            Tensor::from_vec(av.shape(), data)
        };
        let needs = self.needs_any(&[a, b]);
        Ok(self.push("add", v, needs, Some(Box::new(AddStep { a: a.0, b: b.0 }))))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, OpError> {
        elementwise_shape_check("mul", self.value(a), self.value(b))?;
        let v = {
            let (av, bv) = (self.value(a), self.value(b));
            let data = av
                .data()
                .iter()
                .zip(bv.data())
                .map(|(&x, &y)| x * y)
                .collect();
            Tensor::from_vec(av.shape(), data)
        };
        let needs = self.needs_any(&[a, b]);
        Ok(self.push("mul", v, needs, Some(Box::new(MulStep { a: a.0, b: b.0 }))))
    }

    pub fn scale(&mut self, x: NodeId, factor: T) -> NodeId {
        let v = self.value(x).map(|v| v * factor);
        let needs = self.needs[x.0];
        self.push(
            "scale",
            v,
            needs,
            Some(Box::new(ScaleStep { x: x.0, factor })),
        )
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        let needs = self.needs[x.0];
        self.push("relu", v, needs, Some(Box::new(ReluStep { x: x.0 })))
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> NodeId {
        let orig_shape = self.value(x).shape().to_vec();
        let v = self.value(x).reshaped(shape);
        let needs = self.needs[x.0];
        self.push(
            "reshape",
            v,
            needs,
            Some(Box::new(ReshapeStep {
                x: x.0,
                orig_shape,
            })),
        )
    }

    /// `(R, C) + (C)` broadcast over rows.
    pub fn add_row_bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId, OpError> {
        let cols = *self.value(x).shape().last().ok_or(OpError::ShapeMismatch {
            op: "add_row_bias",
            detail: "input must have at least one axis".into(),
        })?;
        if self.value(bias).shape() != [cols] {
            return Err(OpError::ShapeMismatch {
                op: "add_row_bias",
                detail: format!(
                    "bias {:?} vs row width {}",
                    self.value(bias).shape(),
                    cols
                ),
            });
        }
        let v = {
            let (xv, bv) = (self.value(x), self.value(bias));
            let mut v = xv.clone();
            for row in v.data_mut().chunks_exact_mut(cols) {
                for (r, b) in row.iter_mut().zip(bv.data()) {
                    *r = *r + *b;
                }
            }
            v
        };
        let needs = self.needs_any(&[x, bias]);
        Ok(self.push(
            "add_row_bias",
            v,
            needs,
            Some(Box::new(AddRowBiasStep {
                x: x.0,
                bias: bias.0,
                cols,
            })),
        ))
    }
}

// ---------------------------------------------------------------------------
// matmul
// ---------------------------------------------------------------------------

struct MatmulStep {
    a: usize,
    b: usize,
    m: usize,
    k: usize,
    n: usize,
}

impl<T: Scalar> BackwardStep<T> for MatmulStep {
    fn backward(&self, grad: &Tensor<T>, ctx: &BackwardCtx<'_, T>, out: &mut GradSink<T>) {
        let (m, k, n) = (self.m, self.k, self.n);
        if ctx.needs[self.a] {
            // dA = dC . B^T
            let mut da = Tensor::zeros(&[m, k]);
            gemm_acc(
                m,
                n,
                k,
                grad.data(),
                (n as isize, 1),
                ctx.values[self.b].data(),
                (1, n as isize),
                da.data_mut(),
                (k as isize, 1),
            );
            out.push((self.a, da));
        }
        if ctx.needs[self.b] {
            // dB = A^T . dC
            let mut db = Tensor::zeros(&[k, n]);
            gemm_acc(
                k,
                m,
                n,
                ctx.values[self.a].data(),
                (1, k as isize),
                grad.data(),
                (n as isize, 1),
                db.data_mut(),
                (n as isize, 1),
            );
            out.push((self.b, db));
        }
    }
}

impl<T: Scalar> Graph<T> {
    /// Row-major `(m, k) @ (k, n)`.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, OpError> {
        let (ash, bsh) = (self.value(a).shape(), self.value(b).shape());
        if ash.len() != 2 || bsh.len() != 2 || ash[1] != bsh[0] {
            return Err(OpError::ShapeMismatch {
                op: "matmul",
                detail: format!("{ash:?} @ {bsh:?}"),
            });
        }
        let (m, k, n) = (ash[0], ash[1], bsh[1]);
        let mut v = Tensor::zeros(&[m, n]);
        gemm_acc(
            m,
            k,
            n,
            self.value(a).data(),
            (k as isize, 1),
            self.value(b).data(),
            (n as isize, 1),
            v.data_mut(),
            (n as isize, 1),
        );
        let needs = self.needs_any(&[a, b]);
        Ok(self.push(
            "matmul",
            v,
            needs,
            Some(Box::new(MatmulStep {
                a: a.0,
                b: b.0,
                m,
                k,
                n,
            })),
        ))
    }
}

// ---------------------------------------------------------------------------
// conv1d
// ---------------------------------------------------------------------------

struct Conv1dStep<T> {
    x: usize,
    w: usize,
    b: usize,
    stride: usize,
    padding: usize,
    bsz: usize,
    c_in: usize,
    t_in: usize,
    c_out: usize,
    k: usize,
    t_out: usize,
    /// `(c_in*k, bsz*t_out)` patch matrix; `None` on the whole-volume fast
    /// path where the input itself serves as the patch matrix.
    im2col: Option<Vec<T>>,
}

fn im2col_fill<T: Scalar>(
    x: &[T],
    m: &mut [T],
    bsz: usize,
    c_in: usize,
    t_in: usize,
    k: usize,
    t_out: usize,
    stride: usize,
    padding: usize,
) {
    let n = bsz * t_out;
    for b in 0..bsz {
        for ci in 0..c_in {
            let xrow = &x[(b * c_in + ci) * t_in..][..t_in];
            for kk in 0..k {
                let dst = &mut m[(ci * k + kk) * n + b * t_out..][..t_out];
                if stride == 1 {
                    let lo = (padding as isize - kk as isize).max(0) as usize;
                    let hi = ((t_in + padding) as isize - kk as isize)
                        .clamp(0, t_out as isize) as usize;
                    if hi > lo {
                        let src = lo + kk - padding;
                        dst[lo..hi].copy_from_slice(&xrow[src..src + (hi - lo)]);
                    }
                } else {
                    for (to, d) in dst.iter_mut().enumerate() {
                        let t = (to * stride + kk) as isize - padding as isize;
                        if t >= 0 && (t as usize) < t_in {
                            *d = xrow[t as usize];
                        }
                    }
                }
            }
        }
    }
}

fn col2im_acc<T: Scalar>(
    dm: &[T],
    dx: &mut [T],
    bsz: usize,
    c_in: usize,
    t_in: usize,
    k: usize,
    t_out: usize,
    stride: usize,
    padding: usize,
) {
    let n = bsz * t_out;
    for b in 0..bsz {
        for ci in 0..c_in {
            let xrow = &mut dx[(b * c_in + ci) * t_in..][..t_in];
            for kk in 0..k {
                let src = &dm[(ci * k + kk) * n + b * t_out..][..t_out];
                if stride == 1 {
                    let lo = (padding as isize - kk as isize).max(0) as usize;
                    let hi = ((t_in + padding) as isize - kk as isize)
                        .clamp(0, t_out as isize) as usize;
                    if hi > lo {
                        let off = lo + kk - padding;
                        for (x, s) in xrow[off..off + (hi - lo)].iter_mut().zip(&src[lo..hi]) {
                            *x = *x + *s;
                        }
                    }
                } else {
                    for (to, s) in src.iter().enumerate() {
                        let t = (to * stride + kk) as isize - padding as isize;
                        if t >= 0 && (t as usize) < t_in {
                            xrow[t as usize] = xrow[t as usize] + *s;
                        }
                    }
                }
            }
        }
    }
}

impl<T: Scalar> BackwardStep<T> for Conv1dStep<T> {
    fn backward(&self, grad: &Tensor<T>, ctx: &BackwardCtx<'_, T>, out: &mut GradSink<T>) {
        let (bsz, c_in, t_in) = (self.bsz, self.c_in, self.t_in);
        let (c_out, k, t_out) = (self.c_out, self.k, self.t_out);
        let kw = c_in * k;
        let n = bsz * t_out;

        if ctx.needs[self.b] {
            let mut db = Tensor::zeros(&[c_out]);
            for b in 0..bsz {
                for co in 0..c_out {
                    let row = &grad.data()[(b * c_out + co) * t_out..][..t_out];
                    let mut acc = T::zero();
                    for g in row {
                        acc = acc + *g;
                    }
                    db.data_mut()[co] = db.data_mut()[co] + acc;
                }
            }
            out.push((self.b, db));
        }

        match &self.im2col {
            None => {
                // fast path: k == t_in, stride == k, no padding, t_out == 1.
                // grad viewed as (c_out, bsz) with strides (1, c_out);
                // x viewed as (bsz, kw) row-major.
                let xv = ctx.values[self.x].data();
                if ctx.needs[self.w] {
                    let mut dw = Tensor::zeros(&[c_out, c_in, k]);
                    gemm_acc(
                        c_out,
                        bsz,
                        kw,
                        grad.data(),
                        (1, c_out as isize),
                        xv,
                        (kw as isize, 1),
                        dw.data_mut(),
                        (kw as isize, 1),
                    );
                    out.push((self.w, dw));
                }
                if ctx.needs[self.x] {
                    let wv = ctx.values[self.w].data();
                    let mut dx = Tensor::zeros(&[bsz, c_in, t_in]);
                    // dX^T (kw, bsz) written with strides (1, kw) lands in
                    // the (bsz, kw) layout directly.
                    gemm_acc(
                        kw,
                        c_out,
                        bsz,
                        wv,
                        (1, kw as isize),
                        grad.data(),
                        (1, c_out as isize),
                        dx.data_mut(),
                        (1, kw as isize),
                    );
                    out.push((self.x, dx));
                }
            }
            Some(m) => {
                // rearrange grad (bsz, c_out, t_out) -> dY (c_out, n)
                let mut dy = vec![T::zero(); c_out * n];
                for b in 0..bsz {
                    for co in 0..c_out {
                        dy[co * n + b * t_out..][..t_out].copy_from_slice(
                            &grad.data()[(b * c_out + co) * t_out..][..t_out],
                        );
                    }
                }
                if ctx.needs[self.w] {
                    let mut dw = Tensor::zeros(&[c_out, c_in, k]);
                    gemm_acc(
                        c_out,
                        n,
                        kw,
                        &dy,
                        (n as isize, 1),
                        m,
                        (1, n as isize),
                        dw.data_mut(),
                        (kw as isize, 1),
                    );
                    out.push((self.w, dw));
                }
                if ctx.needs[self.x] {
                    let wv = ctx.values[self.w].data();
                    let mut dm = vec![T::zero(); kw * n];
                    gemm_acc(
                        kw,
                        c_out,
                        n,
                        wv,
                        (1, kw as isize),
                        &dy,
                        (n as isize, 1),
                        &mut dm,
                        (n as isize, 1),
                    );
                    let mut dx = Tensor::zeros(&[bsz, c_in, t_in]);
                    col2im_acc(
                        &dm,
                        dx.data_mut(),
                        bsz,
                        c_in,
                        t_in,
                        k,
                        t_out,
                        self.stride,
                        self.padding,
                    );
                    out.push((self.x, dx));
                }
            }
        }
    }
}

impl<T: Scalar> Graph<T> {
    /// Cross-correlation over the last axis: `x (B, C_in, T)`,
    /// `w (C_out, C_in, k)`, `b (C_out)` -> `(B, C_out, T_out)` with
    /// `T_out = (T + 2*padding - k) / stride + 1`.
    pub fn conv1d(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: NodeId,
        stride: usize,
        padding: usize,
    ) -> Result<NodeId, OpError> {
        let xsh = self.value(x).shape().to_vec();
        let wsh = self.value(w).shape().to_vec();
        if xsh.len() != 3 || wsh.len() != 3 || xsh[1] != wsh[1] {
            return Err(OpError::ShapeMismatch {
                op: "conv1d",
                detail: format!("x {xsh:?} w {wsh:?}"),
            });
        }
        let (bsz, c_in, t_in) = (xsh[0], xsh[1], xsh[2]);
        let (c_out, k) = (wsh[0], wsh[2]);
        if self.value(b).shape() != [c_out] {
            return Err(OpError::ShapeMismatch {
                op: "conv1d",
                detail: format!("bias {:?} vs C_out {}", self.value(b).shape(), c_out),
            });
        }
        if stride == 0 || t_in + 2 * padding < k {
            return Err(OpError::ShapeMismatch {
                op: "conv1d",
                detail: format!("T={t_in} pad={padding} k={k} stride={stride}"),
            });
        }
        let t_out = (t_in + 2 * padding - k) / stride + 1;
        let kw = c_in * k;
        let n = bsz * t_out;

        let fast = padding == 0 && k == t_in && stride == k;
        let mut value = Tensor::zeros(&[bsz, c_out, t_out]);
        let im2col = if fast {
            // y (c_out, bsz) written with strides (1, c_out) is exactly the
            // (bsz, c_out, 1) output layout.
            gemm_acc(
                c_out,
                kw,
                bsz,
                self.value(w).data(),
                (kw as isize, 1),
                self.value(x).data(),
                (1, kw as isize),
                value.data_mut(),
                (1, c_out as isize),
            );
            None
        } else {
            let mut m = vec![T::zero(); kw * n];
            im2col_fill(
                self.value(x).data(),
                &mut m,
                bsz,
                c_in,
                t_in,
                k,
                t_out,
                stride,
                padding,
            );
            let mut y = vec![T::zero(); c_out * n];
            gemm_acc(
                c_out,
                kw,
                n,
                self.value(w).data(),
                (kw as isize, 1),
                &m,
                (n as isize, 1),
                &mut y,
                (n as isize, 1),
            );
            for bi in 0..bsz {
                for co in 0..c_out {
                    value.data_mut()[(bi * c_out + co) * t_out..][..t_out]
                        .copy_from_slice(&y[co * n + bi * t_out..][..t_out]);
                }
            }
            Some(m)
        };
        {
            let bias = self.value(b).data().to_vec();
            for bi in 0..bsz {
                for (co, bv) in bias.iter().enumerate() {
                    for v in &mut value.data_mut()[(bi * c_out + co) * t_out..][..t_out] {
                        *v = *v + *bv;
                    }
                }
            }
        }
        let needs = self.needs_any(&[x, w, b]);
        Ok(self.push(
            "conv1d",
            value,
            needs,
            Some(Box::new(Conv1dStep {
                x: x.0,
                w: w.0,
                b: b.0,
                stride,
                padding,
                bsz,
                c_in,
                t_in,
                c_out,
                k,
                t_out,
                im2col,
            })),
        ))
    }
}

// ---------------------------------------------------------------------------
// batch norm
// ---------------------------------------------------------------------------

/// Per-layer running statistics, persisted across steps by the model.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormState<T> {
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
}

impl<T: Scalar> BatchNormState<T> {
    pub fn new(channels: usize) -> Self {
        BatchNormState {
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::full(&[channels], T::one()),
        }
    }
}

pub const BATCHNORM_EPS: f64 = 1e-5;
pub const BATCHNORM_MOMENTUM: f64 = 0.1;

struct BatchNormStep<T> {
    x: usize,
    gamma: usize,
    beta: usize,
    xhat: Tensor<T>,
    inv_std: Vec<T>,
    training: bool,
    bsz: usize,
    channels: usize,
    t: usize,
}

impl<T: Scalar> BackwardStep<T> for BatchNormStep<T> {
    fn backward(&self, grad: &Tensor<T>, ctx: &BackwardCtx<'_, T>, out: &mut GradSink<T>) {
        let (bsz, c, t) = (self.bsz, self.channels, self.t);
        let n = T::from_f64((bsz * t) as f64);
        let gamma = ctx.values[self.gamma].data();

        if ctx.needs[self.gamma] {
            let mut dg = Tensor::zeros(&[c]);
            for b in 0..bsz {
                for ci in 0..c {
                    let base = (b * c + ci) * t;
                    let mut acc = T::zero();
                    for i in 0..t {
                        acc = acc + grad.data()[base + i] * self.xhat.data()[base + i];
                    }
                    dg.data_mut()[ci] = dg.data_mut()[ci] + acc;
                }
            }
            out.push((self.gamma, dg));
        }
        if ctx.needs[self.beta] {
            let mut db = Tensor::zeros(&[c]);
            for b in 0..bsz {
                for ci in 0..c {
                    let base = (b * c + ci) * t;
                    let mut acc = T::zero();
                    for i in 0..t {
                        acc = acc + grad.data()[base + i];
                    }
                    db.data_mut()[ci] = db.data_mut()[ci] + acc;
                }
            }
            out.push((self.beta, db));
        }
        if !ctx.needs[self.x] {
            return;
        }
        let mut dx = Tensor::zeros(&[bsz, c, t]);
        if self.training {
            // dx = inv_std/N * gamma * (N*g - sum(g) - xhat * sum(g*xhat))
            for ci in 0..c {
                let mut sum_g = T::zero();
                let mut sum_gx = T::zero();
                for b in 0..bsz {
                    let base = (b * c + ci) * t;
                    for i in 0..t {
                        let g = grad.data()[base + i];
                        sum_g = sum_g + g;
                        sum_gx = sum_gx + g * self.xhat.data()[base + i];
                    }
                }
                let scale = gamma[ci] * self.inv_std[ci] / n;
                for b in 0..bsz {
                    let base = (b * c + ci) * t;
                    for i in 0..t {
                        let g = grad.data()[base + i];
                        let xh = self.xhat.data()[base + i];
                        dx.data_mut()[base + i] = scale * (n * g - sum_g - xh * sum_gx);
                    }
                }
            }
        } else {
            for ci in 0..c {
                let scale = gamma[ci] * self.inv_std[ci];
                for b in 0..bsz {
                    let base = (b * c + ci) * t;
                    for i in 0..t {
                        dx.data_mut()[base + i] = grad.data()[base + i] * scale;
                    }
                }
            }
        }
        out.push((self.x, dx));
    }
}

impl<T: Scalar> Graph<T> {
    /// Channel-wise batch normalization of `x (B, C, T)`.
    ///
    /// Training mode normalizes over the pooled batch and time axes and
    /// updates `state` in place with momentum [`BATCHNORM_MOMENTUM`];
    /// inference mode normalizes with the stored running statistics.
    pub fn batchnorm1d(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        state: &mut BatchNormState<T>,
        training: bool,
    ) -> Result<NodeId, OpError> {
        self.batchnorm1d_impl(x, gamma, beta, state, training)
    }

    /// Inference-mode batch normalization against read-only running stats;
    /// usable on a shared frozen model.
    pub fn batchnorm1d_frozen(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        state: &BatchNormState<T>,
    ) -> Result<NodeId, OpError> {
        let mut scratch = state.clone();
        self.batchnorm1d_impl(x, gamma, beta, &mut scratch, false)
    }

    fn batchnorm1d_impl(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        state: &mut BatchNormState<T>,
        training: bool,
    ) -> Result<NodeId, OpError> {
        let xsh = self.value(x).shape().to_vec();
        if xsh.len() != 3 {
            return Err(OpError::ShapeMismatch {
                op: "batchnorm1d",
                detail: format!("x {xsh:?}"),
            });
        }
        let (bsz, c, t) = (xsh[0], xsh[1], xsh[2]);
        if self.value(gamma).shape() != [c] || self.value(beta).shape() != [c] {
            return Err(OpError::ShapeMismatch {
                op: "batchnorm1d",
                detail: format!("gamma/beta vs {c} channels"),
            });
        }
        if training && bsz * t < 2 {
            return Err(OpError::DegenerateVariance);
        }
        let eps = T::from_f64(BATCHNORM_EPS);
        let n = T::from_f64((bsz * t) as f64);

        let (mean, var): (Vec<T>, Vec<T>) = if training {
            let xd = self.value(x).data();
            let mut mean = vec![T::zero(); c];
            let mut var = vec![T::zero(); c];
            for ci in 0..c {
                let mut acc = T::zero();
                for b in 0..bsz {
                    let base = (b * c + ci) * t;
                    for i in 0..t {
                        acc = acc + xd[base + i];
                    }
                }
                mean[ci] = acc / n;
            }
            for ci in 0..c {
                let mut acc = T::zero();
                for b in 0..bsz {
                    let base = (b * c + ci) * t;
                    for i in 0..t {
                        let d = xd[base + i] - mean[ci];
                        acc = acc + d * d;
                    }
                }
                var[ci] = acc / n;
            }
            let mom = T::from_f64(BATCHNORM_MOMENTUM);
            let keep = T::one() - mom;
            for ci in 0..c {
                let rm = state.running_mean.data_mut();
                rm[ci] = keep * rm[ci] + mom * mean[ci];
                let rv = state.running_var.data_mut();
                rv[ci] = keep * rv[ci] + mom * var[ci];
            }
            (mean, var)
        } else {
            (
                state.running_mean.data().to_vec(),
                state.running_var.data().to_vec(),
            )
        };

        let mut inv_std = vec![T::zero(); c];
        for ci in 0..c {
            let v = var[ci] + eps;
            if v <= T::zero() {
                return Err(OpError::DegenerateVariance);
            }
            inv_std[ci] = T::one() / v.sqrt();
        }

        let mut xhat = Tensor::zeros(&[bsz, c, t]);
        let mut value = Tensor::zeros(&[bsz, c, t]);
        {
            let xd = self.value(x).data();
            let g = self.value(gamma).data().to_vec();
            let be = self.value(beta).data().to_vec();
            for b in 0..bsz {
                for ci in 0..c {
                    let base = (b * c + ci) * t;
                    for i in 0..t {
                        let xh = (xd[base + i] - mean[ci]) * inv_std[ci];
                        xhat.data_mut()[base + i] = xh;
                        value.data_mut()[base + i] = g[ci] * xh + be[ci];
                    }
                }
            }
        }
        let needs = self.needs_any(&[x, gamma, beta]);
        Ok(self.push(
            "batchnorm1d",
            value,
            needs,
            Some(Box::new(BatchNormStep {
                x: x.0,
                gamma: gamma.0,
                beta: beta.0,
                xhat,
                inv_std,
                training,
                bsz,
                channels: c,
                t,
            })),
        ))
    }
}

// ---------------------------------------------------------------------------
// max pool
// ---------------------------------------------------------------------------

struct MaxPoolStep {
    x: usize,
    in_shape: Vec<usize>,
    argmax: Vec<u32>,
}

impl<T: Scalar> BackwardStep<T> for MaxPoolStep {
    fn backward(&self, grad: &Tensor<T>, ctx: &BackwardCtx<'_, T>, out: &mut GradSink<T>) {
        if !ctx.needs[self.x] {
            return;
        }
        let mut dx = Tensor::zeros(&self.in_shape);
        for (g, &src) in grad.data().iter().zip(&self.argmax) {
            let d = &mut dx.data_mut()[src as usize];
            *d = *d + *g;
        }
        out.push((self.x, dx));
    }
}

impl<T: Scalar> Graph<T> {
    /// Max pooling over the last axis of `x (B, C, T)`. Ties resolve to the
    /// earliest index, so every output gradient routes to exactly one input.
    pub fn maxpool1d(&mut self, x: NodeId, k: usize, stride: usize) -> Result<NodeId, OpError> {
        let xsh = self.value(x).shape().to_vec();
        if xsh.len() != 3 || k == 0 || stride == 0 || xsh[2] < k {
            return Err(OpError::ShapeMismatch {
                op: "maxpool1d",
                detail: format!("x {xsh:?} k={k} stride={stride}"),
            });
        }
        let (bsz, c, t_in) = (xsh[0], xsh[1], xsh[2]);
        let t_out = (t_in - k) / stride + 1;
        let mut value = Tensor::zeros(&[bsz, c, t_out]);
        let mut argmax = vec![0u32; bsz * c * t_out];
        {
            let xd = self.value(x).data();
            for bc in 0..bsz * c {
                let base = bc * t_in;
                for to in 0..t_out {
                    let start = base + to * stride;
                    let mut best = xd[start];
                    let mut best_i = start;
                    for i in start + 1..start + k {
                        if xd[i] > best {
                            best = xd[i];
                            best_i = i;
                        }
                    }
                    value.data_mut()[bc * t_out + to] = best;
                    argmax[bc * t_out + to] = best_i as u32;
                }
            }
        }
        let needs = self.needs[x.0];
        Ok(self.push(
            "maxpool1d",
            value,
            needs,
            Some(Box::new(MaxPoolStep {
                x: x.0,
                in_shape: xsh,
                argmax,
            })),
        ))
    }
}

// ---------------------------------------------------------------------------
// softmax
// ---------------------------------------------------------------------------

struct SoftmaxStep {
    x: usize,
    me: usize,
    outer: usize,
    classes: usize,
    inner: usize,
}

impl<T: Scalar> BackwardStep<T> for SoftmaxStep {
    fn backward(&self, grad: &Tensor<T>, ctx: &BackwardCtx<'_, T>, out: &mut GradSink<T>) {
        if !ctx.needs[self.x] {
            return;
        }
        let p = ctx.values[self.me].data();
        let (outer, c, inner) = (self.outer, self.classes, self.inner);
        let mut dx = Tensor::zeros(ctx.values[self.x].shape());
        for o in 0..outer {
            for i in 0..inner {
                let mut dot = T::zero();
                for ci in 0..c {
                    let idx = (o * c + ci) * inner + i;
                    dot = dot + grad.data()[idx] * p[idx];
                }
                for ci in 0..c {
                    let idx = (o * c + ci) * inner + i;
                    dx.data_mut()[idx] = p[idx] * (grad.data()[idx] - dot);
                }
            }
        }
        out.push((self.x, dx));
    }
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let classes = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, classes, inner)
}

impl<T: Scalar> Graph<T> {
    /// Numerically stabilized softmax along `axis`.
    pub fn softmax(&mut self, x: NodeId, axis: usize) -> Result<NodeId, OpError> {
        let shape = self.value(x).shape().to_vec();
        if axis >= shape.len() {
            return Err(OpError::ShapeMismatch {
                op: "softmax",
                detail: format!("axis {axis} of {shape:?}"),
            });
        }
        let (outer, c, inner) = split_axis(&shape, axis);
        let mut value = Tensor::zeros(&shape);
        {
            let xd = self.value(x).data();
            for o in 0..outer {
                for i in 0..inner {
                    let mut mx = xd[(o * c) * inner + i];
                    for ci in 1..c {
                        let v = xd[(o * c + ci) * inner + i];
                        if v > mx {
                            mx = v;
                        }
                    }
                    let mut z = T::zero();
                    for ci in 0..c {
                        let idx = (o * c + ci) * inner + i;
                        let e = (xd[idx] - mx).exp();
                        value.data_mut()[idx] = e;
                        z = z + e;
                    }
                    for ci in 0..c {
                        let idx = (o * c + ci) * inner + i;
                        value.data_mut()[idx] = value.data_mut()[idx] / z;
                    }
                }
            }
        }
        let needs = self.needs[x.0];
        let me = self.values.len();
        Ok(self.push(
            "softmax",
            value,
            needs,
            Some(Box::new(SoftmaxStep {
                x: x.0,
                me,
                outer,
                classes: c,
                inner,
            })),
        ))
    }
}

// ---------------------------------------------------------------------------
// detection losses
// ---------------------------------------------------------------------------

impl<T: Scalar> Graph<T> {
    /// Summed cross-entropy over selected windows.
    ///
    /// `logits (B, classes, N)`; `targets` and `selected` are flat over
    /// `B*N` windows in row-major order. Softmax is fused for stability.
    /// Errors with [`OpError::EmptyTargetSet`] when nothing is selected.
    pub fn cross_entropy_sum(
        &mut self,
        logits: NodeId,
        targets: &[u32],
        selected: &[bool],
    ) -> Result<NodeId, OpError> {
        let shape = self.value(logits).shape().to_vec();
        if shape.len() != 3 {
            return Err(OpError::ShapeMismatch {
                op: "cross_entropy",
                detail: format!("logits {shape:?}"),
            });
        }
        let (bsz, classes, n) = (shape[0], shape[1], shape[2]);
        let windows = bsz * n;
        if targets.len() != windows || selected.len() != windows {
            return Err(OpError::ShapeMismatch {
                op: "cross_entropy",
                detail: format!(
                    "{} windows vs {} targets / {} flags",
                    windows,
                    targets.len(),
                    selected.len()
                ),
            });
        }
        if !selected.iter().any(|&s| s) {
            return Err(OpError::EmptyTargetSet);
        }
        let xd = self.value(logits).data();
        let mut probs = vec![T::zero(); xd.len()];
        let mut loss = T::zero();
        for b in 0..bsz {
            for j in 0..n {
                let w = b * n + j;
                let idx_of = |ci: usize| (b * classes + ci) * n + j;
                let mut mx = xd[idx_of(0)];
                for ci in 1..classes {
                    if xd[idx_of(ci)] > mx {
                        mx = xd[idx_of(ci)];
                    }
                }
                let mut z = T::zero();
                for ci in 0..classes {
                    let e = (xd[idx_of(ci)] - mx).exp();
                    probs[idx_of(ci)] = e;
                    z = z + e;
                }
                for ci in 0..classes {
                    probs[idx_of(ci)] = probs[idx_of(ci)] / z;
                }
                if selected[w] {
                    let tc = targets[w] as usize;
                    debug_assert!(tc < classes);
                    let log_p = xd[idx_of(tc)] - mx - z.ln();
                    loss = loss - log_p;
                }
            }
        }
        let needs = self.needs[logits.0];
        let step = CrossEntropySumStep {
            logits: logits.0,
            probs,
            targets: targets.to_vec(),
            selected: selected.to_vec(),
            bsz,
            classes,
            n,
        };
        Ok(self.push("cross_entropy", Tensor::scalar(loss), needs, Some(Box::new(step))))
    }

    /// Summed smooth-L1 (Huber) loss over selected windows.
    ///
    /// `pred (B, D, N)` against `target` of identical layout; `selected` is
    /// flat over `B*N`. Each selected window contributes the sum over its
    /// `D` components.
    pub fn smooth_l1_sum(
        &mut self,
        pred: NodeId,
        target: &Tensor<T>,
        selected: &[bool],
    ) -> Result<NodeId, OpError> {
        let shape = self.value(pred).shape().to_vec();
        if shape.len() != 3 || target.shape() != shape.as_slice() {
            return Err(OpError::ShapeMismatch {
                op: "smooth_l1",
                detail: format!("pred {:?} target {:?}", shape, target.shape()),
            });
        }
        let (bsz, d, n) = (shape[0], shape[1], shape[2]);
        if selected.len() != bsz * n {
            return Err(OpError::ShapeMismatch {
                op: "smooth_l1",
                detail: format!("{} windows vs {} flags", bsz * n, selected.len()),
            });
        }
        if !selected.iter().any(|&s| s) {
            return Err(OpError::EmptyTargetSet);
        }
        let half = T::from_f64(0.5);
        let mut loss = T::zero();
        {
            let pd = self.value(pred).data();
            for b in 0..bsz {
                for j in 0..n {
                    if !selected[b * n + j] {
                        continue;
                    }
                    for di in 0..d {
                        let idx = (b * d + di) * n + j;
                        let diff = pd[idx] - target.data()[idx];
                        let a = diff.abs();
                        loss = loss
                            + if a < T::one() {
                                half * diff * diff
                            } else {
                                a - half
                            };
                    }
                }
            }
        }
        let needs = self.needs[pred.0];
        let step = SmoothL1Step {
            pred: pred.0,
            target: target.clone(),
            selected: selected.to_vec(),
            bsz,
            d,
            n,
        };
        Ok(self.push("smooth_l1", Tensor::scalar(loss), needs, Some(Box::new(step))))
    }
}

struct CrossEntropySumStep<T> {
    logits: usize,
    probs: Vec<T>,
    targets: Vec<u32>,
    selected: Vec<bool>,
    bsz: usize,
    classes: usize,
    n: usize,
}

impl<T: Scalar> BackwardStep<T> for CrossEntropySumStep<T> {
    fn backward(&self, grad: &Tensor<T>, ctx: &BackwardCtx<'_, T>, out: &mut GradSink<T>) {
        if !ctx.needs[self.logits] {
            return;
        }
        let g = grad.item();
        let mut dx = Tensor::zeros(ctx.values[self.logits].shape());
        for b in 0..self.bsz {
            for j in 0..self.n {
                let w = b * self.n + j;
                if !self.selected[w] {
                    continue;
                }
                for ci in 0..self.classes {
                    let idx = (b * self.classes + ci) * self.n + j;
                    let onehot = if ci as u32 == self.targets[w] {
                        T::one()
                    } else {
                        T::zero()
                    };
                    dx.data_mut()[idx] = (self.probs[idx] - onehot) * g;
                }
            }
        }
        out.push((self.logits, dx));
    }
}

struct SmoothL1Step<T> {
    pred: usize,
    target: Tensor<T>,
    selected: Vec<bool>,
    bsz: usize,
    d: usize,
    n: usize,
}

impl<T: Scalar> BackwardStep<T> for SmoothL1Step<T> {
    fn backward(&self, grad: &Tensor<T>, ctx: &BackwardCtx<'_, T>, out: &mut GradSink<T>) {
        if !ctx.needs[self.pred] {
            return;
        }
        let g = grad.item();
        let pd = ctx.values[self.pred].data();
        let mut dx = Tensor::zeros(ctx.values[self.pred].shape());
        for b in 0..self.bsz {
            for j in 0..self.n {
                if !self.selected[b * self.n + j] {
                    continue;
                }
                for di in 0..self.d {
                    let idx = (b * self.d + di) * self.n + j;
                    let diff = pd[idx] - self.target.data()[idx];
                    let slope = if diff > T::one() {
                        T::one()
                    } else if diff < -T::one() {
                        -T::one()
                    } else {
                        diff
                    };
                    dx.data_mut()[idx] = slope * g;
                }
            }
        }
        out.push((self.pred, dx));
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relu_clamps_negatives() {
        let mut g: Graph<f64> = Graph::new();
        let x = g.leaf(Tensor::from_vec(&[3], vec![-1.0, 0.0, 2.0]), false);
        let y = g.relu(x);
        assert_eq!(g.value(y).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn maxpool_basic_and_tie_break() {
        let mut g: Graph<f64> = Graph::new();
        let x = g.leaf(Tensor::from_vec(&[1, 1, 4], vec![1.0, 3.0, 2.0, 0.0]), true);
        let y = g.maxpool1d(x, 2, 2).unwrap();
        assert_eq!(g.value(y).data(), &[3.0, 2.0]);

        // ties route to the earliest index
        let mut g: Graph<f64> = Graph::new();
        let x = g.leaf(Tensor::from_vec(&[1, 1, 4], vec![5.0, 5.0, 1.0, 1.0]), true);
        let y = g.maxpool1d(x, 2, 2).unwrap();
        let s = g.scale(y, 1.0);
        let total = g.reshape(s, &[2]);
        // reduce to scalar by summing through matmul-free path
        let ones = g.leaf(Tensor::from_vec(&[2, 1], vec![1.0, 1.0]), false);
        let m = g.reshape(total, &[1, 2]);
        let root = g.matmul(m, ones).unwrap();
        let root = g.reshape(root, &[]);
        g.backward(root);
        let dx = g.grad(x).unwrap();
        assert_eq!(dx.data(), &[1.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn softmax_symmetry_and_simplex() {
        let mut g: Graph<f64> = Graph::new();
        let x = g.leaf(Tensor::from_vec(&[2], vec![0.0, 0.0]), false);
        let y = g.softmax(x, 0).unwrap();
        assert_eq!(g.value(y).data(), &[0.5, 0.5]);

        let mut g: Graph<f64> = Graph::new();
        let x = g.leaf(
            Tensor::from_vec(&[1, 3, 2], vec![1.0, -2.0, 0.5, 3.0, 900.0, -900.0]),
            false,
        );
        let y = g.softmax(x, 1).unwrap();
        let v = g.value(y);
        for i in 0..2 {
            let s: f64 = (0..3).map(|c| v.data()[c * 2 + i]).sum();
            assert!((s - 1.0).abs() < 1e-6);
            for c in 0..3 {
                let p = v.data()[c * 2 + i];
                assert!((0.0..=1.0).contains(&p));
            }
        }
    }

    #[test]
    fn conv_identity_kernels() {
        // k=1 identity weight
        let mut g: Graph<f64> = Graph::new();
        let x = g.leaf(Tensor::from_vec(&[1, 1, 3], vec![1.0, 2.0, 3.0]), false);
        let w = g.leaf(Tensor::from_vec(&[1, 1, 1], vec![1.0]), false);
        let b = g.leaf(Tensor::zeros(&[1]), false);
        let y = g.conv1d(x, w, b, 1, 0).unwrap();
        assert_eq!(g.value(y).data(), &[1.0, 2.0, 3.0]);

        // centered delta with same padding
        let mut g: Graph<f64> = Graph::new();
        let x = g.leaf(Tensor::from_vec(&[1, 1, 3], vec![1.0, 2.0, 3.0]), false);
        let w = g.leaf(Tensor::from_vec(&[1, 1, 3], vec![0.0, 1.0, 0.0]), false);
        let b = g.leaf(Tensor::zeros(&[1]), false);
        let y = g.conv1d(x, w, b, 1, 1).unwrap();
        assert_eq!(g.value(y).data(), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn conv_fast_path_matches_general() {
        // k == T, stride == k triggers the whole-volume path; compare against
        // an equivalent padded formulation through the general path.
        let xv: Vec<f64> = (0..2 * 3 * 4).map(|i| (i as f64 * 0.7).sin()).collect();
        let wv: Vec<f64> = (0..5 * 3 * 4).map(|i| (i as f64 * 0.3).cos()).collect();
        let bv: Vec<f64> = (0..5).map(|i| i as f64 * 0.1).collect();

        let mut g: Graph<f64> = Graph::new();
        let x = g.leaf(Tensor::from_vec(&[2, 3, 4], xv.clone()), false);
        let w = g.leaf(Tensor::from_vec(&[5, 3, 4], wv.clone()), false);
        let b = g.leaf(Tensor::from_vec(&[5], bv.clone()), false);
        let fast = g.conv1d(x, w, b, 4, 0).unwrap();

        // general path: stride < k forces im2col
        let mut g2: Graph<f64> = Graph::new();
        let x2 = g2.leaf(Tensor::from_vec(&[2, 3, 4], xv), false);
        let w2 = g2.leaf(Tensor::from_vec(&[5, 3, 4], wv), false);
        let b2 = g2.leaf(Tensor::from_vec(&[5], bv), false);
        let slow = g2.conv1d(x2, w2, b2, 3, 0).unwrap();

        for (a, b) in g.value(fast).data().iter().zip(g2.value(slow).data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn batchnorm_is_affine_on_normalized_input() {
        // per-channel mean 0 / var 1 input passes through up to the eps effect
        let mut g: Graph<f64> = Graph::new();
        let x = g.leaf(
            Tensor::from_vec(&[1, 1, 4], vec![-1.0, 1.0, -1.0, 1.0]),
            false,
        );
        let gamma = g.leaf(Tensor::full(&[1], 1.0), false);
        let beta = g.leaf(Tensor::zeros(&[1]), false);
        let mut st = BatchNormState::new(1);
        let y = g.batchnorm1d(x, gamma, beta, &mut st, true).unwrap();
        for (a, b) in g.value(y).data().iter().zip(&[-1.0, 1.0, -1.0, 1.0]) {
            assert!((a - b).abs() < 1e-4);
        }

        // gamma=2, beta=3 reproduces 2x+3 on the normalized values
        let mut g: Graph<f64> = Graph::new();
        let x = g.leaf(
            Tensor::from_vec(&[1, 1, 4], vec![-1.0, 1.0, -1.0, 1.0]),
            false,
        );
        let gamma = g.leaf(Tensor::full(&[1], 2.0), false);
        let beta = g.leaf(Tensor::full(&[1], 3.0), false);
        let mut st = BatchNormState::new(1);
        let y = g.batchnorm1d(x, gamma, beta, &mut st, true).unwrap();
        for (a, b) in g.value(y).data().iter().zip(&[1.0, 5.0, 1.0, 5.0]) {
            assert!((a - b).abs() < 1e-3);
        }
    }

    #[test]
    fn batchnorm_rejects_single_element() {
        let mut g: Graph<f64> = Graph::new();
        let x = g.leaf(Tensor::from_vec(&[1, 1, 1], vec![1.0]), false);
        let gamma = g.leaf(Tensor::full(&[1], 1.0), false);
        let beta = g.leaf(Tensor::zeros(&[1]), false);
        let mut st = BatchNormState::new(1);
        let err = g.batchnorm1d(x, gamma, beta, &mut st, true).unwrap_err();
        assert_eq!(err, OpError::DegenerateVariance);
    }

    #[test]
    fn cross_entropy_known_values() {
        // one-hot on the correct class: loss ~ 0
        let mut g: Graph<f64> = Graph::new();
        let logits = g.leaf(Tensor::from_vec(&[1, 2, 1], vec![30.0, -30.0]), false);
        let l = g.cross_entropy_sum(logits, &[0], &[true]).unwrap();
        assert!(g.value(l).item() < 1e-9);

        // uniform over K+1 = 2: ln 2
        let mut g: Graph<f64> = Graph::new();
        let logits = g.leaf(Tensor::from_vec(&[1, 2, 1], vec![0.0, 0.0]), false);
        let l = g.cross_entropy_sum(logits, &[1], &[true]).unwrap();
        assert!((g.value(l).item() - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_rejects_empty_selection() {
        let mut g: Graph<f64> = Graph::new();
        let logits = g.leaf(Tensor::from_vec(&[1, 2, 1], vec![0.0, 0.0]), false);
        let err = g.cross_entropy_sum(logits, &[0], &[false]).unwrap_err();
        assert_eq!(err, OpError::EmptyTargetSet);
    }

    #[test]
    fn smooth_l1_zero_at_target() {
        let mut g: Graph<f64> = Graph::new();
        let pred = g.leaf(Tensor::from_vec(&[1, 2, 1], vec![0.3, -1.4]), false);
        let target = Tensor::from_vec(&[1, 2, 1], vec![0.3, -1.4]);
        let l = g.smooth_l1_sum(pred, &target, &[true]).unwrap();
        assert_eq!(g.value(l).item(), 0.0);
    }

    #[test]
    fn gradients_accumulate_additively() {
        // y = x + x  =>  dy/dx = 2
        let mut g: Graph<f64> = Graph::new();
        let x = g.leaf(Tensor::from_vec(&[], vec![3.0]), true);
        let y = g.add(x, x).unwrap();
        g.backward(y);
        assert_eq!(g.grad(x).unwrap().data(), &[2.0]);
    }

    #[test]
    fn backward_is_deterministic() {
        let run = || {
            let mut g: Graph<f32> = Graph::new();
            let x = g.leaf(
                Tensor::from_vec(&[1, 2, 6], (0..12).map(|i| (i as f32).sin()).collect()),
                true,
            );
            let w = g.leaf(
                Tensor::from_vec(&[3, 2, 3], (0..18).map(|i| (i as f32).cos()).collect()),
                true,
            );
            let b = g.leaf(Tensor::zeros(&[3]), true);
            let c = g.conv1d(x, w, b, 1, 1).unwrap();
            let r = g.relu(c);
            let p = g.maxpool1d(r, 2, 2).unwrap();
            let flat = g.reshape(p, &[1, 9]);
            let ones = g.leaf(Tensor::full(&[9, 1], 1.0), false);
            let s = g.matmul(flat, ones).unwrap();
            let root = g.reshape(s, &[]);
            g.backward(root);
            (
                g.grad(x).unwrap().data().to_vec(),
                g.grad(w).unwrap().data().to_vec(),
            )
        };
        let (dx1, dw1) = run();
        let (dx2, dw2) = run();
        assert_eq!(dx1, dx2);
        assert_eq!(dw1, dw2);
    }
}
