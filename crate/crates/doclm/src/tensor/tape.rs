//! Reverse-mode automatic differentiation over a linear operation tape.
//!
//! A `Tape` lives for one forward/backward cycle: operations append nodes in
//! topological order, `backward` walks them once in reverse, and the tape is
//! dropped (not reused) between training steps. Gradients of shared
//! subexpressions accumulate by summation.

use std::cell::{Cell, RefCell};
use std::rc::Rc;

use super::{affine_fwd, gemm, softmax_rows_fwd, ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};

/// Probability floor applied inside the NLL loss before taking logs.
pub const PROB_CLAMP: f32 = 1e-12;

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

type BackFn = Box<dyn Fn(&Tensor, &mut dyn FnMut(usize, Tensor))>;

struct Node {
    value: Rc<Tensor>,
    needs_grad: bool,
    back: Option<BackFn>,
}

#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    bindings: RefCell<Vec<(ParamId, Var)>>,
    clamp_hits: Cell<u64>,
}

/// Per-node gradients produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads[v.0].take()
    }

    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    /// Times the NLL loss clamped a zero probability at a target.
    pub fn clamp_warnings(&self) -> u64 {
        self.clamp_hits.get()
    }

    pub fn value(&self, v: Var) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[v.0].value)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].needs_grad
    }

    fn push(&self, value: Tensor, needs_grad: bool, back: Option<BackFn>) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            needs_grad,
            back,
        });
        Var(nodes.len() - 1)
    }

    /// Leaf with no gradient tracking (inputs, masks, frozen values).
    pub fn constant(&self, value: Tensor) -> Var {
        self.push(value, false, None)
    }

    /// Gradient-tracked leaf that is not bound to a parameter store; used by
    /// the finite-difference oracle.
    pub fn leaf(&self, value: Tensor) -> Var {
        self.push(value, true, None)
    }

    /// Gradient-tracked leaf bound to a stored parameter. Repeated binds of
    /// the same parameter (tied matrices, multi-use weights) return the same
    /// node, so its gradient accumulates every use. The binding list lets
    /// the optimizer route gradients back after `backward`.
    pub fn param(&self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&(_, v)) = self.bindings.borrow().iter().find(|(pid, _)| *pid == id) {
            return v;
        }
        let v = self.push(store.get(id).clone(), true, None);
        self.bindings.borrow_mut().push((id, v));
        v
    }

    pub fn bindings(&self) -> Vec<(ParamId, Var)> {
        self.bindings.borrow().clone()
    }

    /// Reverse pass from a scalar root. Visits each node exactly once.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let root_val = &nodes[root.0].value;
        if root_val.numel() != 1 {
            return Err(Error::Eval(format!(
                "backward root must be scalar, got shape {:?}",
                root_val.shape()
            )));
        }
        if !root_val.is_finite() {
            return Err(Error::NonFinite("backward root".into()));
        }
        let mut grads: Vec<Option<Tensor>> = Vec::with_capacity(nodes.len());
        grads.resize_with(nodes.len(), || None);
        grads[root.0] = Some(Tensor::scalar(1.0));
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if let Some(back) = &nodes[i].back {
                back(&g, &mut |parent, contrib| {
                    debug_assert!(parent < i, "tape order violated");
                    if !nodes[parent].needs_grad {
                        return;
                    }
                    match &mut grads[parent] {
                        Some(acc) => acc.add_assign(&contrib),
                        slot @ None => *slot = Some(contrib),
                    }
                });
            }
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    // ---- arithmetic ----------------------------------------------------

    fn binary_same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(Rc<Tensor>, Rc<Tensor>)> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::ShapeMismatch {
                op,
                lhs: va.shape().to_vec(),
                rhs: vb.shape().to_vec(),
            });
        }
        Ok((va, vb))
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = self.binary_same_shape("add", a, b)?;
        let mut out = (*va).clone();
        out.add_assign(&vb);
        let (na, nb) = (self.needs(a), self.needs(b));
        Ok(self.push(
            out,
            na || nb,
            Some(Box::new(move |g, sink| {
                if na {
                    sink(a.0, g.clone());
                }
                if nb {
                    sink(b.0, g.clone());
                }
            })),
        ))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = self.binary_same_shape("sub", a, b)?;
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(x, y)| x - y)
            .collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        let (na, nb) = (self.needs(a), self.needs(b));
        Ok(self.push(
            out,
            na || nb,
            Some(Box::new(move |g, sink| {
                if na {
                    sink(a.0, g.clone());
                }
                if nb {
                    let mut neg = g.clone();
                    neg.scale_assign(-1.0);
                    sink(b.0, neg);
                }
            })),
        ))
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = self.binary_same_shape("mul", a, b)?;
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(x, y)| x * y)
            .collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        let (na, nb) = (self.needs(a), self.needs(b));
        let (ca, cb) = (Rc::clone(&va), Rc::clone(&vb));
        Ok(self.push(
            out,
            na || nb,
            Some(Box::new(move |g, sink| {
                if na {
                    let data = g.data().iter().zip(cb.data()).map(|(x, y)| x * y).collect();
                    sink(a.0, Tensor::new(cb.shape().to_vec(), data).unwrap());
                }
                if nb {
                    let data = g.data().iter().zip(ca.data()).map(|(x, y)| x * y).collect();
                    sink(b.0, Tensor::new(ca.shape().to_vec(), data).unwrap());
                }
            })),
        ))
    }

    pub fn div(&self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = self.binary_same_shape("div", a, b)?;
        let data: Vec<f32> = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(x, y)| x / y)
            .collect();
        let out = Tensor::new(va.shape().to_vec(), data.clone())?;
        let (na, nb) = (self.needs(a), self.needs(b));
        let (ca, cb) = (Rc::clone(&va), Rc::clone(&vb));
        Ok(self.push(
            out,
            na || nb,
            Some(Box::new(move |g, sink| {
                if na {
                    let data = g.data().iter().zip(cb.data()).map(|(x, y)| x / y).collect();
                    sink(a.0, Tensor::new(cb.shape().to_vec(), data).unwrap());
                }
                if nb {
                    let data = g
                        .data()
                        .iter()
                        .zip(ca.data().iter().zip(cb.data()))
                        .map(|(gv, (av, bv))| -gv * av / (bv * bv))
                        .collect();
                    sink(b.0, Tensor::new(ca.shape().to_vec(), data).unwrap());
                }
            })),
        ))
    }

    pub fn scale(&self, a: Var, c: f32) -> Var {
        let va = self.value(a);
        let mut out = (*va).clone();
        out.scale_assign(c);
        let na = self.needs(a);
        self.push(
            out,
            na,
            Some(Box::new(move |g, sink| {
                if na {
                    let mut gg = g.clone();
                    gg.scale_assign(c);
                    sink(a.0, gg);
                }
            })),
        )
    }

    pub fn sigmoid(&self, a: Var) -> Var {
        let va = self.value(a);
        let data = va.data().iter().map(|&x| sigmoid_scalar(x)).collect();
        let out = Tensor::new(va.shape().to_vec(), data).unwrap();
        let na = self.needs(a);
        let v = self.push(out, na, None);
        let saved = self.value(v);
        self.set_back(
            v,
            Box::new(move |g, sink| {
                if na {
                    let data = g
                        .data()
                        .iter()
                        .zip(saved.data())
                        .map(|(gv, s)| gv * s * (1.0 - s))
                        .collect();
                    sink(a.0, Tensor::new(saved.shape().to_vec(), data).unwrap());
                }
            }),
        );
        v
    }

    pub fn tanh(&self, a: Var) -> Var {
        let va = self.value(a);
        let data = va.data().iter().map(|&x| x.tanh()).collect();
        let out = Tensor::new(va.shape().to_vec(), data).unwrap();
        let na = self.needs(a);
        let v = self.push(out, na, None);
        let saved = self.value(v);
        self.set_back(
            v,
            Box::new(move |g, sink| {
                if na {
                    let data = g
                        .data()
                        .iter()
                        .zip(saved.data())
                        .map(|(gv, t)| gv * (1.0 - t * t))
                        .collect();
                    sink(a.0, Tensor::new(saved.shape().to_vec(), data).unwrap());
                }
            }),
        );
        v
    }

    fn set_back(&self, v: Var, back: BackFn) {
        self.nodes.borrow_mut()[v.0].back = Some(back);
    }

    // ---- linear maps ---------------------------------------------------

    /// out = x . w^T (+ b): x is `[m x k]`, w is `[n x k]`, b is `[n]`.
    pub fn affine(&self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (vx, vw) = (self.value(x), self.value(w));
        let vb = b.map(|b| self.value(b));
        let out = affine_fwd(&vx, &vw, vb.as_deref())?;
        let needs = self.needs(x) || self.needs(w) || b.map(|b| self.needs(b)).unwrap_or(false);
        let (nx, nw) = (self.needs(x), self.needs(w));
        let nb = b.map(|b| self.needs(b)).unwrap_or(false);
        Ok(self.push(
            out,
            needs,
            Some(Box::new(move |g, sink| {
                if nx {
                    let mut dx = Tensor::zeros(vec![vx.shape()[0], vx.shape()[1]]);
                    gemm(1.0, g, false, &vw, false, 0.0, &mut dx);
                    sink(x.0, dx);
                }
                if nw {
                    let mut dw = Tensor::zeros(vec![vw.shape()[0], vw.shape()[1]]);
                    gemm(1.0, g, true, &vx, false, 0.0, &mut dw);
                    sink(w.0, dw);
                }
                if nb {
                    let n = g.cols();
                    let mut db = Tensor::zeros(vec![n]);
                    for r in 0..g.rows() {
                        for (acc, gv) in db.data_mut().iter_mut().zip(g.row(r)) {
                            *acc += gv;
                        }
                    }
                    sink(b.unwrap().0, db);
                }
            })),
        ))
    }

    /// Fused two-input affine, out = x . wx^T + h . wh^T + b. One node per
    /// LSTM gate pre-activation instead of three.
    pub fn affine2(&self, x: Var, wx: Var, h: Var, wh: Var, b: Var) -> Result<Var> {
        let (vx, vwx) = (self.value(x), self.value(wx));
        let (vh, vwh) = (self.value(h), self.value(wh));
        let vb = self.value(b);
        let mut out = affine_fwd(&vx, &vwx, Some(&vb))?;
        let part = affine_fwd(&vh, &vwh, None)?;
        if part.shape() != out.shape() {
            return Err(Error::ShapeMismatch {
                op: "affine2",
                lhs: out.shape().to_vec(),
                rhs: part.shape().to_vec(),
            });
        }
        out.add_assign(&part);
        let flags = (
            self.needs(x),
            self.needs(wx),
            self.needs(h),
            self.needs(wh),
            self.needs(b),
        );
        let needs = flags.0 || flags.1 || flags.2 || flags.3 || flags.4;
        Ok(self.push(
            out,
            needs,
            Some(Box::new(move |g, sink| {
                let (nx, nwx, nh, nwh, nb) = flags;
                if nx {
                    let mut dx = Tensor::zeros(vec![vx.shape()[0], vx.shape()[1]]);
                    gemm(1.0, g, false, &vwx, false, 0.0, &mut dx);
                    sink(x.0, dx);
                }
                if nwx {
                    let mut dw = Tensor::zeros(vec![vwx.shape()[0], vwx.shape()[1]]);
                    gemm(1.0, g, true, &vx, false, 0.0, &mut dw);
                    sink(wx.0, dw);
                }
                if nh {
                    let mut dh = Tensor::zeros(vec![vh.shape()[0], vh.shape()[1]]);
                    gemm(1.0, g, false, &vwh, false, 0.0, &mut dh);
                    sink(h.0, dh);
                }
                if nwh {
                    let mut dw = Tensor::zeros(vec![vwh.shape()[0], vwh.shape()[1]]);
                    gemm(1.0, g, true, &vh, false, 0.0, &mut dw);
                    sink(wh.0, dw);
                }
                if nb {
                    let n = g.cols();
                    let mut db = Tensor::zeros(vec![n]);
                    for r in 0..g.rows() {
                        for (acc, gv) in db.data_mut().iter_mut().zip(g.row(r)) {
                            *acc += gv;
                        }
                    }
                    sink(b.0, db);
                }
            })),
        ))
    }

    // ---- structural ops ------------------------------------------------

    /// Gather rows of `table` at `ids`; the embedding lookup.
    pub fn rows(&self, table: Var, ids: Rc<Vec<usize>>) -> Result<Var> {
        let vt = self.value(table);
        let (v, d) = (vt.rows(), vt.cols());
        for &id in ids.iter() {
            if id >= v {
                return Err(Error::IndexOutOfRange {
                    op: "rows",
                    index: id,
                    size: v,
                });
            }
        }
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids.iter() {
            data.extend_from_slice(vt.row(id));
        }
        let out = Tensor::new(vec![ids.len(), d], data)?;
        let nt = self.needs(table);
        Ok(self.push(
            out,
            nt,
            Some(Box::new(move |g, sink| {
                if nt {
                    let mut dt = Tensor::zeros(vec![v, d]);
                    for (r, &id) in ids.iter().enumerate() {
                        let dst = &mut dt.data_mut()[id * d..(id + 1) * d];
                        for (acc, gv) in dst.iter_mut().zip(g.row(r)) {
                            *acc += gv;
                        }
                    }
                    sink(table.0, dt);
                }
            })),
        ))
    }

    /// Stack 2-D inputs with equal column counts along axis 0.
    pub fn concat_rows(&self, parts: &[Var]) -> Result<Var> {
        assert!(!parts.is_empty());
        let values: Vec<Rc<Tensor>> = parts.iter().map(|&p| self.value(p)).collect();
        let cols = values[0].cols();
        let mut data = Vec::new();
        let mut offsets = Vec::with_capacity(parts.len());
        let mut row_counts = Vec::with_capacity(parts.len());
        let mut total = 0usize;
        for v in &values {
            if v.cols() != cols {
                return Err(Error::ShapeMismatch {
                    op: "concat_rows",
                    lhs: values[0].shape().to_vec(),
                    rhs: v.shape().to_vec(),
                });
            }
            offsets.push(total);
            row_counts.push(v.rows());
            total += v.rows();
            data.extend_from_slice(v.data());
        }
        let out = Tensor::new(vec![total, cols], data)?;
        let needs: Vec<bool> = parts.iter().map(|&p| self.needs(p)).collect();
        let any = needs.iter().any(|&n| n);
        let parts: Vec<usize> = parts.iter().map(|p| p.0).collect();
        Ok(self.push(
            out,
            any,
            Some(Box::new(move |g, sink| {
                for (i, &p) in parts.iter().enumerate() {
                    if !needs[i] {
                        continue;
                    }
                    let lo = offsets[i] * cols;
                    let hi = lo + row_counts[i] * cols;
                    let piece = Tensor::new(vec![row_counts[i], cols], g.data()[lo..hi].to_vec())
                        .unwrap();
                    sink(p, piece);
                }
            })),
        ))
    }

    /// Concatenate two matrices with equal row counts along axis 1.
    pub fn concat_cols(&self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.rows() != vb.rows() {
            return Err(Error::ShapeMismatch {
                op: "concat_cols",
                lhs: va.shape().to_vec(),
                rhs: vb.shape().to_vec(),
            });
        }
        let (m, p, q) = (va.rows(), va.cols(), vb.cols());
        let mut data = Vec::with_capacity(m * (p + q));
        for r in 0..m {
            data.extend_from_slice(va.row(r));
            data.extend_from_slice(vb.row(r));
        }
        let out = Tensor::new(vec![m, p + q], data)?;
        let (na, nb) = (self.needs(a), self.needs(b));
        Ok(self.push(
            out,
            na || nb,
            Some(Box::new(move |g, sink| {
                if na {
                    let mut da = Tensor::zeros(vec![m, p]);
                    for r in 0..m {
                        da.data_mut()[r * p..(r + 1) * p].copy_from_slice(&g.row(r)[..p]);
                    }
                    sink(a.0, da);
                }
                if nb {
                    let mut db = Tensor::zeros(vec![m, q]);
                    for r in 0..m {
                        db.data_mut()[r * q..(r + 1) * q].copy_from_slice(&g.row(r)[p..]);
                    }
                    sink(b.0, db);
                }
            })),
        ))
    }

    // ---- softmax / loss ------------------------------------------------

    pub fn softmax_rows(&self, a: Var) -> Var {
        let va = self.value(a);
        let out = softmax_rows_fwd(&va);
        let na = self.needs(a);
        let v = self.push(out, na, None);
        let saved = self.value(v);
        self.set_back(
            v,
            Box::new(move |g, sink| {
                if na {
                    let (m, n) = (saved.rows(), saved.cols());
                    let mut dx = Tensor::zeros(vec![m, n]);
                    for r in 0..m {
                        let y = saved.row(r);
                        let gr = g.row(r);
                        let dot: f32 = y.iter().zip(gr).map(|(yv, gv)| yv * gv).sum();
                        let dst = &mut dx.data_mut()[r * n..(r + 1) * n];
                        for ((d, &yv), &gv) in dst.iter_mut().zip(y).zip(gr) {
                            *d = yv * (gv - dot);
                        }
                    }
                    sink(a.0, dx);
                }
            }),
        );
        v
    }

    /// Mean negative log-likelihood of `targets` under probability rows.
    /// Zero probabilities are clamped at [`PROB_CLAMP`] and counted.
    pub fn nll_from_probs(&self, probs: Var, targets: Rc<Vec<usize>>) -> Result<Var> {
        let vp = self.value(probs);
        let (m, vocab) = (vp.rows(), vp.cols());
        if targets.len() != m {
            return Err(Error::ShapeMismatch {
                op: "nll_from_probs",
                lhs: vec![m, vocab],
                rhs: vec![targets.len()],
            });
        }
        let mut total = 0.0f64;
        for (i, &t) in targets.iter().enumerate() {
            if t >= vocab {
                return Err(Error::IndexOutOfRange {
                    op: "nll_from_probs",
                    index: t,
                    size: vocab,
                });
            }
            let p = vp.at(i, t);
            if p < PROB_CLAMP {
                self.clamp_hits.set(self.clamp_hits.get() + 1);
            }
            total -= (p.max(PROB_CLAMP) as f64).ln();
        }
        let out = Tensor::scalar((total / m as f64) as f32);
        let np = self.needs(probs);
        Ok(self.push(
            out,
            np,
            Some(Box::new(move |g, sink| {
                if np {
                    let gv = g.data()[0];
                    let mut dp = Tensor::zeros(vec![m, vocab]);
                    for (i, &t) in targets.iter().enumerate() {
                        let p = vp.at(i, t);
                        if p >= PROB_CLAMP {
                            dp.data_mut()[i * vocab + t] = -gv / (m as f32 * p);
                        }
                    }
                    sink(probs.0, dp);
                }
            })),
        ))
    }

    // ---- reductions and per-row scaling ---------------------------------

    /// Column sums: `[m x n]` -> `[n]`.
    pub fn sum_axis0(&self, a: Var) -> Var {
        let va = self.value(a);
        let (m, n) = (va.rows(), va.cols());
        let mut out = Tensor::zeros(vec![n]);
        for r in 0..m {
            for (acc, &v) in out.data_mut().iter_mut().zip(va.row(r)) {
                *acc += v;
            }
        }
        let na = self.needs(a);
        self.push(
            out,
            na,
            Some(Box::new(move |g, sink| {
                if na {
                    let mut da = Tensor::zeros(vec![m, n]);
                    for r in 0..m {
                        da.data_mut()[r * n..(r + 1) * n].copy_from_slice(g.data());
                    }
                    sink(a.0, da);
                }
            })),
        )
    }

    pub fn sum_all(&self, a: Var) -> Var {
        let va = self.value(a);
        let total: f64 = va.data().iter().map(|&x| x as f64).sum();
        let shape = va.shape().to_vec();
        let na = self.needs(a);
        self.push(
            Tensor::scalar(total as f32),
            na,
            Some(Box::new(move |g, sink| {
                if na {
                    sink(a.0, Tensor::full(shape.clone(), g.data()[0]));
                }
            })),
        )
    }

    pub fn mean_all(&self, a: Var) -> Var {
        let n = self.value(a).numel() as f32;
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n)
    }

    /// Fill a shape with a scalar node's value; backward sums.
    pub fn broadcast_scalar(&self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let va = self.value(a);
        if va.numel() != 1 {
            return Err(Error::ShapeMismatch {
                op: "broadcast_scalar",
                lhs: va.shape().to_vec(),
                rhs: shape,
            });
        }
        let out = Tensor::full(shape, va.data()[0]);
        let na = self.needs(a);
        Ok(self.push(
            out,
            na,
            Some(Box::new(move |g, sink| {
                if na {
                    let total: f64 = g.data().iter().map(|&x| x as f64).sum();
                    sink(a.0, Tensor::scalar(total as f32));
                }
            })),
        ))
    }

    /// Scale row i of `x` by `c[i]`.
    pub fn mul_colvec(&self, x: Var, c: Var) -> Result<Var> {
        let (vx, vc) = (self.value(x), self.value(c));
        let (m, n) = (vx.rows(), vx.cols());
        if vc.numel() != m {
            return Err(Error::ShapeMismatch {
                op: "mul_colvec",
                lhs: vx.shape().to_vec(),
                rhs: vc.shape().to_vec(),
            });
        }
        let mut out = (*vx).clone();
        for r in 0..m {
            let cv = vc.data()[r];
            for v in &mut out.data_mut()[r * n..(r + 1) * n] {
                *v *= cv;
            }
        }
        let (nx, nc) = (self.needs(x), self.needs(c));
        Ok(self.push(
            out,
            nx || nc,
            Some(Box::new(move |g, sink| {
                if nx {
                    let mut dx = g.clone();
                    for r in 0..m {
                        let cv = vc.data()[r];
                        for v in &mut dx.data_mut()[r * n..(r + 1) * n] {
                            *v *= cv;
                        }
                    }
                    sink(x.0, dx);
                }
                if nc {
                    let mut dc = Tensor::zeros(vec![m]);
                    for r in 0..m {
                        dc.data_mut()[r] = g
                            .row(r)
                            .iter()
                            .zip(vx.row(r))
                            .map(|(gv, xv)| gv * xv)
                            .sum();
                    }
                    sink(c.0, dc);
                }
            })),
        ))
    }

    /// Column j of a matrix as a length-m vector.
    pub fn select_col(&self, x: Var, j: usize) -> Result<Var> {
        let vx = self.value(x);
        let (m, n) = (vx.rows(), vx.cols());
        if j >= n {
            return Err(Error::IndexOutOfRange {
                op: "select_col",
                index: j,
                size: n,
            });
        }
        let data: Vec<f32> = (0..m).map(|r| vx.at(r, j)).collect();
        let nx = self.needs(x);
        Ok(self.push(
            Tensor::new(vec![m], data)?,
            nx,
            Some(Box::new(move |g, sink| {
                if nx {
                    let mut dx = Tensor::zeros(vec![m, n]);
                    for r in 0..m {
                        dx.data_mut()[r * n + j] = g.data()[r];
                    }
                    sink(x.0, dx);
                }
            })),
        ))
    }

    // ---- attention ------------------------------------------------------

    /// scores[b, s] = sum_d q[b, d] * ann[s*batch + b, d], where `ann` stacks
    /// per-position annotation matrices `[batch x d]` along axis 0.
    pub fn attn_scores(&self, q: Var, ann: Var, positions: usize) -> Result<Var> {
        let (vq, va) = (self.value(q), self.value(ann));
        let (batch, d) = (vq.rows(), vq.cols());
        if va.rows() != positions * batch || va.cols() != d {
            return Err(Error::ShapeMismatch {
                op: "attn_scores",
                lhs: vq.shape().to_vec(),
                rhs: va.shape().to_vec(),
            });
        }
        let mut out = Tensor::zeros(vec![batch, positions]);
        for s in 0..positions {
            for b in 0..batch {
                let dot: f32 = vq
                    .row(b)
                    .iter()
                    .zip(va.row(s * batch + b))
                    .map(|(x, y)| x * y)
                    .sum();
                out.data_mut()[b * positions + s] = dot;
            }
        }
        let (nq, na) = (self.needs(q), self.needs(ann));
        Ok(self.push(
            out,
            nq || na,
            Some(Box::new(move |g, sink| {
                if nq {
                    let mut dq = Tensor::zeros(vec![batch, d]);
                    for s in 0..positions {
                        for b in 0..batch {
                            let gv = g.at(b, s);
                            let dst = &mut dq.data_mut()[b * d..(b + 1) * d];
                            for (acc, &av) in dst.iter_mut().zip(va.row(s * batch + b)) {
                                *acc += gv * av;
                            }
                        }
                    }
                    sink(q.0, dq);
                }
                if na {
                    let mut da = Tensor::zeros(vec![positions * batch, d]);
                    for s in 0..positions {
                        for b in 0..batch {
                            let gv = g.at(b, s);
                            let r = s * batch + b;
                            let dst = &mut da.data_mut()[r * d..(r + 1) * d];
                            for (acc, &qv) in dst.iter_mut().zip(vq.row(b)) {
                                *acc += gv * qv;
                            }
                        }
                    }
                    sink(ann.0, da);
                }
            })),
        ))
    }

    /// context[b, d] = sum_s w[b, s] * ann[s*batch + b, d].
    pub fn attn_context(&self, weights: Var, ann: Var, positions: usize) -> Result<Var> {
        let (vw, va) = (self.value(weights), self.value(ann));
        let batch = vw.rows();
        let d = va.cols();
        if vw.cols() != positions || va.rows() != positions * batch {
            return Err(Error::ShapeMismatch {
                op: "attn_context",
                lhs: vw.shape().to_vec(),
                rhs: va.shape().to_vec(),
            });
        }
        let mut out = Tensor::zeros(vec![batch, d]);
        for s in 0..positions {
            for b in 0..batch {
                let wv = vw.at(b, s);
                let dst = &mut out.data_mut()[b * d..(b + 1) * d];
                for (acc, &av) in dst.iter_mut().zip(va.row(s * batch + b)) {
                    *acc += wv * av;
                }
            }
        }
        let (nw, na) = (self.needs(weights), self.needs(ann));
        Ok(self.push(
            out,
            nw || na,
            Some(Box::new(move |g, sink| {
                if nw {
                    let mut dw = Tensor::zeros(vec![batch, positions]);
                    for s in 0..positions {
                        for b in 0..batch {
                            dw.data_mut()[b * positions + s] = g
                                .row(b)
                                .iter()
                                .zip(va.row(s * batch + b))
                                .map(|(gv, av)| gv * av)
                                .sum();
                        }
                    }
                    sink(weights.0, dw);
                }
                if na {
                    let mut da = Tensor::zeros(vec![positions * batch, d]);
                    for s in 0..positions {
                        for b in 0..batch {
                            let wv = vw.at(b, s);
                            let r = s * batch + b;
                            let dst = &mut da.data_mut()[r * d..(r + 1) * d];
                            for (acc, &gv) in dst.iter_mut().zip(g.row(b)) {
                                *acc += wv * gv;
                            }
                        }
                    }
                    sink(ann.0, da);
                }
            })),
        ))
    }

    // ---- LSTM cell -------------------------------------------------------

    /// One LSTM cell update from pre-activations. `gates` is `[batch x 4H]`
    /// in fixed block order (input, forget, cell, output); `c_prev` is
    /// `[batch x H]`. Returns `(h_new, c_new)` as two tape nodes sharing the
    /// saved activations.
    pub fn lstm_cell(&self, gates: Var, c_prev: Var) -> Result<(Var, Var)> {
        let (vg, vc) = (self.value(gates), self.value(c_prev));
        let batch = vg.rows();
        let h4 = vg.cols();
        let h = h4 / 4;
        if h4 != 4 * h || vc.rows() != batch || vc.cols() != h {
            return Err(Error::ShapeMismatch {
                op: "lstm_cell",
                lhs: vg.shape().to_vec(),
                rhs: vc.shape().to_vec(),
            });
        }
        // Activated gates, same layout as the pre-activations.
        let mut acts = Tensor::zeros(vec![batch, 4 * h]);
        let mut c_new = Tensor::zeros(vec![batch, h]);
        for b in 0..batch {
            let row = vg.row(b);
            let arow = &mut acts.data_mut()[b * 4 * h..(b + 1) * 4 * h];
            for j in 0..h {
                arow[j] = sigmoid_scalar(row[j]); // input
                arow[h + j] = sigmoid_scalar(row[h + j]); // forget
                arow[2 * h + j] = row[2 * h + j].tanh(); // cell candidate
                arow[3 * h + j] = sigmoid_scalar(row[3 * h + j]); // output
                c_new.data_mut()[b * h + j] =
                    arow[h + j] * vc.at(b, j) + arow[j] * arow[2 * h + j];
            }
        }
        let mut tanh_c = Tensor::zeros(vec![batch, h]);
        let mut h_new = Tensor::zeros(vec![batch, h]);
        for i in 0..batch * h {
            let t = c_new.data()[i].tanh();
            tanh_c.data_mut()[i] = t;
            h_new.data_mut()[i] = acts.data()[(i / h) * 4 * h + 3 * h + (i % h)] * t;
        }
        let acts = Rc::new(acts);
        let tanh_c = Rc::new(tanh_c);
        let (ng, nc) = (self.needs(gates), self.needs(c_prev));
        let needs = ng || nc;

        let acts_c = Rc::clone(&acts);
        let vc_prev = Rc::clone(&vc);
        let c_var = self.push(
            c_new,
            needs,
            Some(Box::new(move |g, sink| {
                // c' = f*c_prev + i*g_cand
                if ng {
                    let mut dgates = Tensor::zeros(vec![batch, 4 * h]);
                    for b in 0..batch {
                        let a = acts_c.row(b);
                        let dst = &mut dgates.data_mut()[b * 4 * h..(b + 1) * 4 * h];
                        for j in 0..h {
                            let gv = g.at(b, j);
                            let (i_a, f_a, g_a) = (a[j], a[h + j], a[2 * h + j]);
                            dst[j] = gv * g_a * i_a * (1.0 - i_a);
                            dst[h + j] = gv * vc_prev.at(b, j) * f_a * (1.0 - f_a);
                            dst[2 * h + j] = gv * i_a * (1.0 - g_a * g_a);
                        }
                    }
                    sink(gates.0, dgates);
                }
                if nc {
                    let mut dc = Tensor::zeros(vec![batch, h]);
                    for b in 0..batch {
                        for j in 0..h {
                            dc.data_mut()[b * h + j] = g.at(b, j) * acts_c.at(b, h + j);
                        }
                    }
                    sink(c_prev.0, dc);
                }
            })),
        );

        let acts_h = Rc::clone(&acts);
        let tanh_ch = Rc::clone(&tanh_c);
        let h_var = self.push(
            h_new,
            needs,
            Some(Box::new(move |g, sink| {
                // h = o * tanh(c')
                if ng {
                    let mut dgates = Tensor::zeros(vec![batch, 4 * h]);
                    for b in 0..batch {
                        for j in 0..h {
                            let o_a = acts_h.at(b, 3 * h + j);
                            dgates.data_mut()[b * 4 * h + 3 * h + j] =
                                g.at(b, j) * tanh_ch.at(b, j) * o_a * (1.0 - o_a);
                        }
                    }
                    sink(gates.0, dgates);
                }
                // always flows into c' (itself an op node)
                let mut dc = Tensor::zeros(vec![batch, h]);
                for b in 0..batch {
                    for j in 0..h {
                        let t = tanh_ch.at(b, j);
                        dc.data_mut()[b * h + j] =
                            g.at(b, j) * acts_h.at(b, 3 * h + j) * (1.0 - t * t);
                    }
                }
                sink(c_var.0, dc);
            })),
        );
        Ok((h_var, c_var))
    }
}

fn sigmoid_scalar(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}
