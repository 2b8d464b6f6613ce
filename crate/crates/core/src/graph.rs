//! Reverse-mode automatic differentiation on a flat tape.
//!
//! A `Graph` is an append-only tape of nodes. Every operation records its
//! parents and a closure that maps the incoming gradient to gradient
//! contributions for each parent. Parents always precede children on the
//! tape, so a single reverse sweep in id order is a valid topological
//! traversal.
//!
//! Determinism contract: all reductions run in a fixed index order and the
//! rayon-parallel kernels only write disjoint output regions, so results are
//! bit-identical regardless of thread count.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

type GradFn = Box<dyn Fn(&Graph, usize, &Tensor) -> Vec<(usize, Tensor)>>;

struct Node {
    value: Tensor,
    parents: Vec<usize>,
    grad_fn: Option<GradFn>,
    requires_grad: bool,
    op: &'static str,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Per-node gradients produced by a backward sweep.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Trainable input node; receives a gradient in the backward sweep.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, vec![], None, true, "leaf")
    }

    /// Non-trainable input node; backward never flows into it.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, vec![], None, false, "const")
    }

    pub fn constant_scalar(&mut self, value: f64) -> Var {
        self.constant(Tensor::scalar(value))
    }

    /// Copy of `v` that blocks gradient flow.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.push(value, vec![], None, false, "detach")
    }

    fn push(
        &mut self,
        value: Tensor,
        parents: Vec<usize>,
        grad_fn: Option<GradFn>,
        requires_grad: bool,
        op: &'static str,
    ) -> Var {
        self.nodes.push(Node {
            value,
            parents,
            grad_fn,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_requires(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn unary(
        &mut self,
        x: Var,
        value: Tensor,
        op: &'static str,
        grad_fn: GradFn,
    ) -> Var {
        let rg = self.nodes[x.0].requires_grad;
        self.push(value, vec![x.0], rg.then_some(grad_fn), rg, op)
    }

    fn nary(
        &mut self,
        xs: &[Var],
        value: Tensor,
        op: &'static str,
        grad_fn: GradFn,
    ) -> Var {
        let rg = self.any_requires(xs);
        self.push(
            value,
            xs.iter().map(|v| v.0).collect(),
            rg.then_some(grad_fn),
            rg,
            op,
        )
    }

    /// Reverse sweep from a scalar root. Returns one gradient slot per node.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let root_val = self.value(root);
        if root_val.numel() != 1 {
            return Err(Error::Shape(format!(
                "backward root must be scalar, got shape {:?}",
                root_val.shape()
            )));
        }
        if !root_val.is_finite() {
            return Err(Error::Numerical(format!(
                "non-finite loss; first non-finite node is '{}'",
                self.first_non_finite_op().unwrap_or("<root>")
            )));
        }

        let mut grads: Vec<Option<Tensor>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        grads[root.0] = Some(Tensor::full(root_val.shape(), 1.0));

        for id in (0..=root.0).rev() {
            if !self.nodes[id].requires_grad {
                continue;
            }
            let Some(g) = grads[id].clone() else { continue };
            if let Some(f) = &self.nodes[id].grad_fn {
                // Closures report gradients by parent position; translate to
                // node ids here.
                for (pos, contrib) in f(self, id, &g) {
                    let pid = self.nodes[id].parents[pos];
                    if !self.nodes[pid].requires_grad {
                        continue;
                    }
                    match &mut grads[pid] {
                        Some(acc) => acc.add_assign(&contrib),
                        slot @ None => *slot = Some(contrib),
                    }
                }
            }
        }
        Ok(Gradients { grads })
    }

    fn first_non_finite_op(&self) -> Option<&'static str> {
        self.nodes
            .iter()
            .find(|n| !n.value.is_finite())
            .map(|n| n.op)
    }

    fn parent_value<'a>(&'a self, id: usize, k: usize) -> &'a Tensor {
        &self.nodes[self.nodes[id].parents[k]].value
    }
}

// ---------------------------------------------------------------------------
// Elementwise and reduction ops
// ---------------------------------------------------------------------------

impl Graph {
    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self
            .value(a)
            .zip(self.value(b), |x, y| x + y)
            .expect("add: shape mismatch");
        self.nary(
            &[a, b],
            value,
            "add",
            Box::new(|_, _, g| vec![(0, g.clone()), (1, g.clone())]),
        )
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self
            .value(a)
            .zip(self.value(b), |x, y| x - y)
            .expect("sub: shape mismatch");
        self.nary(
            &[a, b],
            value,
            "sub",
            Box::new(|_, _, g| vec![(0, g.clone()), (1, g.map(|v| -v))]),
        )
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self
            .value(a)
            .zip(self.value(b), |x, y| x * y)
            .expect("mul: shape mismatch");
        self.nary(
            &[a, b],
            value,
            "mul",
            Box::new(|g, id, gout| {
                let av = g.parent_value(id, 0);
                let bv = g.parent_value(id, 1);
                vec![
                    (0, gout.zip(bv, |go, b| go * b).unwrap()),
                    (1, gout.zip(av, |go, a| go * a).unwrap()),
                ]
            }),
        )
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let value = self.value(x).map(|v| v * c);
        self.unary(
            x,
            value,
            "scale",
            Box::new(move |_, _, g| vec![(0, g.map(|v| v * c))]),
        )
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let value = self.value(x).map(|v| v + c);
        self.unary(
            x,
            value,
            "add_scalar",
            Box::new(|_, _, g| vec![(0, g.clone())]),
        )
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.max(0.0));
        self.unary(
            x,
            value,
            "relu",
            Box::new(|g, id, gout| {
                let xv = g.parent_value(id, 0);
                vec![(0, gout.zip(xv, |go, x| if x > 0.0 { go } else { 0.0 }).unwrap())]
            }),
        )
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let value = self.value(x).map(f64::exp);
        self.unary(
            x,
            value,
            "exp",
            Box::new(|g, id, gout| {
                let own = &g.nodes[id].value;
                vec![(0, gout.zip(own, |go, e| go * e).unwrap())]
            }),
        )
    }

    /// Scalar dot product of two same-shape tensors.
    pub fn dot(&mut self, a: Var, b: Var) -> Var {
        let av = self.value(a);
        let bv = self.value(b);
        debug_assert_eq!(av.shape(), bv.shape(), "dot: shape mismatch");
        let s: f64 = av
            .data()
            .iter()
            .zip(bv.data().iter())
            .map(|(&x, &y)| x * y)
            .sum();
        self.nary(
            &[a, b],
            Tensor::scalar(s),
            "dot",
            Box::new(|g, id, gout| {
                let go = gout.item();
                let av = g.parent_value(id, 0);
                let bv = g.parent_value(id, 1);
                vec![(0, bv.map(|v| v * go)), (1, av.map(|v| v * go))]
            }),
        )
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        self.unary(
            x,
            Tensor::scalar(s),
            "sum_all",
            Box::new(|g, id, gout| {
                let shape = g.parent_value(id, 0).shape().to_vec();
                vec![(0, Tensor::full(&shape, gout.item()))]
            }),
        )
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = self.value(x).numel() as f64;
        let s = self.value(x).sum() / n;
        self.unary(
            x,
            Tensor::scalar(s),
            "mean_all",
            Box::new(move |g, id, gout| {
                let shape = g.parent_value(id, 0).shape().to_vec();
                vec![(0, Tensor::full(&shape, gout.item() / n))]
            }),
        )
    }

    /// N-ary elementwise sum of same-shape vars.
    pub fn sum_vars(&mut self, xs: &[Var]) -> Var {
        assert!(!xs.is_empty(), "sum_vars needs at least one input");
        let mut value = self.value(xs[0]).clone();
        for v in &xs[1..] {
            value.add_assign(self.value(*v));
        }
        let n = xs.len();
        self.nary(
            xs,
            value,
            "sum_vars",
            Box::new(move |_, _, g| (0..n).map(|k| (k, g.clone())).collect()),
        )
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Var {
        let value = self
            .value(x)
            .clone()
            .reshaped(shape)
            .expect("reshape: element count mismatch");
        self.unary(
            x,
            value,
            "reshape",
            Box::new(|g, id, gout| {
                let shape = g.parent_value(id, 0).shape().to_vec();
                vec![(0, gout.clone().reshaped(shape).unwrap())]
            }),
        )
    }

    pub fn transpose2(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        debug_assert_eq!(xv.shape().len(), 2, "transpose2 needs a matrix");
        let (r, c) = (xv.dim(0), xv.dim(1));
        let mut out = Tensor::zeros(&[c, r]);
        for i in 0..r {
            for j in 0..c {
                out.data_mut()[j * r + i] = xv.data()[i * c + j];
            }
        }
        self.unary(
            x,
            out,
            "transpose2",
            Box::new(move |_, _, gout| {
                let mut gx = Tensor::zeros(&[r, c]);
                for j in 0..c {
                    for i in 0..r {
                        gx.data_mut()[i * c + j] = gout.data()[j * r + i];
                    }
                }
                vec![(0, gx)]
            }),
        )
    }
}

// ---------------------------------------------------------------------------
// Row-batch linear algebra
// ---------------------------------------------------------------------------

impl Graph {
    /// `a [m,d] * b^T [n,d] -> [m,n]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let av = self.value(a);
        let bv = self.value(b);
        debug_assert_eq!(av.shape().len(), 2);
        debug_assert_eq!(bv.shape().len(), 2);
        debug_assert_eq!(av.dim(1), bv.dim(1), "matmul_nt: inner dim mismatch");
        let (m, d, n) = (av.dim(0), av.dim(1), bv.dim(0));
        let mut out = Tensor::zeros(&[m, n]);
        for i in 0..m {
            let ar = &av.data()[i * d..(i + 1) * d];
            for j in 0..n {
                let br = &bv.data()[j * d..(j + 1) * d];
                out.data_mut()[i * n + j] =
                    ar.iter().zip(br.iter()).map(|(&x, &y)| x * y).sum();
            }
        }
        self.nary(
            &[a, b],
            out,
            "matmul_nt",
            Box::new(move |g, id, gout| {
                let av = g.parent_value(id, 0);
                let bv = g.parent_value(id, 1);
                let mut ga = Tensor::zeros(&[m, d]);
                let mut gb = Tensor::zeros(&[n, d]);
                // ga = gout * b
                for i in 0..m {
                    for j in 0..n {
                        let go = gout.data()[i * n + j];
                        if go == 0.0 {
                            continue;
                        }
                        let br = &bv.data()[j * d..(j + 1) * d];
                        let gr = &mut ga.data_mut()[i * d..(i + 1) * d];
                        for k in 0..d {
                            gr[k] += go * br[k];
                        }
                    }
                }
                // gb = gout^T * a
                for j in 0..n {
                    for i in 0..m {
                        let go = gout.data()[i * n + j];
                        if go == 0.0 {
                            continue;
                        }
                        let ar = &av.data()[i * d..(i + 1) * d];
                        let gr = &mut gb.data_mut()[j * d..(j + 1) * d];
                        for k in 0..d {
                            gr[k] += go * ar[k];
                        }
                    }
                }
                vec![(0, ga), (1, gb)]
            }),
        )
    }

    /// Affine map `x [b,din] -> x*w^T + bias [b,dout]` with `w [dout,din]`.
    pub fn linear(&mut self, x: Var, w: Var, bias: Var) -> Var {
        let xv = self.value(x);
        let wv = self.value(w);
        let bv = self.value(bias);
        debug_assert_eq!(xv.shape().len(), 2);
        debug_assert_eq!(wv.shape().len(), 2);
        debug_assert_eq!(xv.dim(1), wv.dim(1), "linear: input dim mismatch");
        debug_assert_eq!(bv.numel(), wv.dim(0), "linear: bias dim mismatch");
        let (b, din, dout) = (xv.dim(0), xv.dim(1), wv.dim(0));
        let mut out = Tensor::zeros(&[b, dout]);
        for i in 0..b {
            let xr = &xv.data()[i * din..(i + 1) * din];
            let or = &mut out.data_mut()[i * dout..(i + 1) * dout];
            for o in 0..dout {
                let wr = &wv.data()[o * din..(o + 1) * din];
                or[o] = bv.data()[o]
                    + xr.iter().zip(wr.iter()).map(|(&a, &c)| a * c).sum::<f64>();
            }
        }
        self.nary(
            &[x, w, bias],
            out,
            "linear",
            Box::new(move |g, id, gout| {
                let xv = g.parent_value(id, 0);
                let wv = g.parent_value(id, 1);
                let mut gx = Tensor::zeros(&[b, din]);
                let mut gw = Tensor::zeros(&[dout, din]);
                let mut gb = Tensor::zeros(&[dout]);
                for i in 0..b {
                    let gor = &gout.data()[i * dout..(i + 1) * dout];
                    let xr = &xv.data()[i * din..(i + 1) * din];
                    let gxr = &mut gx.data_mut()[i * din..(i + 1) * din];
                    for o in 0..dout {
                        let go = gor[o];
                        if go == 0.0 {
                            continue;
                        }
                        gb.data_mut()[o] += go;
                        let wr = &wv.data()[o * din..(o + 1) * din];
                        let gwr = &mut gw.data_mut()[o * din..(o + 1) * din];
                        for k in 0..din {
                            gxr[k] += go * wr[k];
                            gwr[k] += go * xr[k];
                        }
                    }
                }
                vec![(0, gx), (1, gw), (2, gb)]
            }),
        )
    }

    /// L2-normalize each row of `x [b,d]`; rows with norm below `eps` are
    /// scaled by `1/eps` instead of exploding.
    pub fn row_l2_normalize(&mut self, x: Var, eps: f64) -> Var {
        let xv = self.value(x);
        debug_assert_eq!(xv.shape().len(), 2);
        let (b, d) = (xv.dim(0), xv.dim(1));
        let mut out = Tensor::zeros(&[b, d]);
        let mut norms = vec![0.0; b];
        for i in 0..b {
            let xr = &xv.data()[i * d..(i + 1) * d];
            let n = xr.iter().map(|v| v * v).sum::<f64>().sqrt().max(eps);
            norms[i] = n;
            for k in 0..d {
                out.data_mut()[i * d + k] = xr[k] / n;
            }
        }
        self.unary(
            x,
            out,
            "row_l2_normalize",
            Box::new(move |g, id, gout| {
                let own = &g.nodes[id].value;
                let mut gx = Tensor::zeros(&[b, d]);
                for i in 0..b {
                    let yr = &own.data()[i * d..(i + 1) * d];
                    let gr = &gout.data()[i * d..(i + 1) * d];
                    let dotgy: f64 =
                        gr.iter().zip(yr.iter()).map(|(&a, &c)| a * c).sum();
                    let gxr = &mut gx.data_mut()[i * d..(i + 1) * d];
                    for k in 0..d {
                        gxr[k] = (gr[k] - yr[k] * dotgy) / norms[i];
                    }
                }
                vec![(0, gx)]
            }),
        )
    }

    /// Numerically stable row-wise log-softmax of `x [b,c]`.
    pub fn log_softmax_rows(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        debug_assert_eq!(xv.shape().len(), 2);
        let (b, c) = (xv.dim(0), xv.dim(1));
        let mut out = Tensor::zeros(&[b, c]);
        for i in 0..b {
            let xr = &xv.data()[i * c..(i + 1) * c];
            let mx = xr.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + xr.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
            let or = &mut out.data_mut()[i * c..(i + 1) * c];
            for k in 0..c {
                or[k] = xr[k] - lse;
            }
        }
        self.unary(
            x,
            out,
            "log_softmax",
            Box::new(move |g, id, gout| {
                let own = &g.nodes[id].value;
                let mut gx = Tensor::zeros(&[b, c]);
                for i in 0..b {
                    let lr = &own.data()[i * c..(i + 1) * c];
                    let gr = &gout.data()[i * c..(i + 1) * c];
                    let gsum: f64 = gr.iter().sum();
                    let gxr = &mut gx.data_mut()[i * c..(i + 1) * c];
                    for k in 0..c {
                        gxr[k] = gr[k] - lr[k].exp() * gsum;
                    }
                }
                vec![(0, gx)]
            }),
        )
    }

    /// Row-wise softmax of `x [b,c]`.
    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        debug_assert_eq!(xv.shape().len(), 2);
        let (b, c) = (xv.dim(0), xv.dim(1));
        let mut out = Tensor::zeros(&[b, c]);
        for i in 0..b {
            let xr = &xv.data()[i * c..(i + 1) * c];
            let mx = xr.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            let or = &mut out.data_mut()[i * c..(i + 1) * c];
            for k in 0..c {
                or[k] = (xr[k] - mx).exp();
                s += or[k];
            }
            for v in or.iter_mut() {
                *v /= s;
            }
        }
        self.unary(
            x,
            out,
            "softmax",
            Box::new(move |g, id, gout| {
                let own = &g.nodes[id].value;
                let mut gx = Tensor::zeros(&[b, c]);
                for i in 0..b {
                    let pr = &own.data()[i * c..(i + 1) * c];
                    let gr = &gout.data()[i * c..(i + 1) * c];
                    let gp: f64 = gr.iter().zip(pr.iter()).map(|(&a, &p)| a * p).sum();
                    let gxr = &mut gx.data_mut()[i * c..(i + 1) * c];
                    for k in 0..c {
                        gxr[k] = pr[k] * (gr[k] - gp);
                    }
                }
                vec![(0, gx)]
            }),
        )
    }

    /// Mean negative log-likelihood of `logprobs [b,c]` at `labels`.
    pub fn nll_rows(&mut self, logprobs: Var, labels: &[usize]) -> Var {
        let lv = self.value(logprobs);
        debug_assert_eq!(lv.shape().len(), 2);
        let (b, c) = (lv.dim(0), lv.dim(1));
        assert_eq!(labels.len(), b, "nll_rows: label count mismatch");
        let mut s = 0.0;
        for (i, &y) in labels.iter().enumerate() {
            assert!(y < c, "nll_rows: label out of range");
            s -= lv.data()[i * c + y];
        }
        let labels = labels.to_vec();
        self.unary(
            logprobs,
            Tensor::scalar(s / b as f64),
            "nll",
            Box::new(move |_, _, gout| {
                let go = gout.item();
                let mut gx = Tensor::zeros(&[b, c]);
                for (i, &y) in labels.iter().enumerate() {
                    gx.data_mut()[i * c + y] = -go / b as f64;
                }
                vec![(0, gx)]
            }),
        )
    }

    /// Squared Euclidean distances between all row pairs:
    /// `x [m,d], y [n,d] -> [m,n]`.
    pub fn pairwise_sqdist(&mut self, x: Var, y: Var) -> Var {
        let xv = self.value(x);
        let yv = self.value(y);
        debug_assert_eq!(xv.dim(1), yv.dim(1), "pairwise_sqdist: dim mismatch");
        let (m, n, d) = (xv.dim(0), yv.dim(0), xv.dim(1));
        let mut out = Tensor::zeros(&[m, n]);
        for i in 0..m {
            let xr = &xv.data()[i * d..(i + 1) * d];
            for j in 0..n {
                let yr = &yv.data()[j * d..(j + 1) * d];
                out.data_mut()[i * n + j] = xr
                    .iter()
                    .zip(yr.iter())
                    .map(|(&a, &b)| (a - b) * (a - b))
                    .sum();
            }
        }
        self.nary(
            &[x, y],
            out,
            "pairwise_sqdist",
            Box::new(move |g, id, gout| {
                let xv = g.parent_value(id, 0);
                let yv = g.parent_value(id, 1);
                let mut gx = Tensor::zeros(&[m, d]);
                let mut gy = Tensor::zeros(&[n, d]);
                for i in 0..m {
                    let xr = &xv.data()[i * d..(i + 1) * d];
                    for j in 0..n {
                        let go = gout.data()[i * n + j];
                        if go == 0.0 {
                            continue;
                        }
                        let yr = &yv.data()[j * d..(j + 1) * d];
                        for k in 0..d {
                            let diff = 2.0 * go * (xr[k] - yr[k]);
                            gx.data_mut()[i * d + k] += diff;
                            gy.data_mut()[j * d + k] -= diff;
                        }
                    }
                }
                vec![(0, gx), (1, gy)]
            }),
        )
    }

    /// Row-wise Euclidean distance `x [m,d], y [m,d] -> [m]`. The backward
    /// denominator is clamped at 1e-12 to stay finite at zero distance.
    pub fn rows_euclid(&mut self, x: Var, y: Var) -> Var {
        let xv = self.value(x);
        let yv = self.value(y);
        debug_assert_eq!(xv.shape(), yv.shape(), "rows_euclid: shape mismatch");
        let (m, d) = (xv.dim(0), xv.dim(1));
        let mut out = Tensor::zeros(&[m]);
        for i in 0..m {
            let xr = &xv.data()[i * d..(i + 1) * d];
            let yr = &yv.data()[i * d..(i + 1) * d];
            out.data_mut()[i] = xr
                .iter()
                .zip(yr.iter())
                .map(|(&a, &b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
        }
        self.nary(
            &[x, y],
            out,
            "rows_euclid",
            Box::new(move |g, id, gout| {
                let xv = g.parent_value(id, 0);
                let yv = g.parent_value(id, 1);
                let own = &g.nodes[id].value;
                let mut gx = Tensor::zeros(&[m, d]);
                let mut gy = Tensor::zeros(&[m, d]);
                for i in 0..m {
                    let dist = own.data()[i].max(1e-12);
                    let go = gout.data()[i];
                    let xr = &xv.data()[i * d..(i + 1) * d];
                    let yr = &yv.data()[i * d..(i + 1) * d];
                    for k in 0..d {
                        let v = go * (xr[k] - yr[k]) / dist;
                        gx.data_mut()[i * d + k] = v;
                        gy.data_mut()[i * d + k] = -v;
                    }
                }
                vec![(0, gx), (1, gy)]
            }),
        )
    }

    /// Select rows of `x [n,d]` by index, with scatter-add backward.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Var {
        let xv = self.value(x);
        debug_assert_eq!(xv.shape().len(), 2);
        let (n, d) = (xv.dim(0), xv.dim(1));
        let m = idx.len();
        let mut out = Tensor::zeros(&[m, d]);
        for (i, &j) in idx.iter().enumerate() {
            assert!(j < n, "gather_rows: index out of range");
            out.data_mut()[i * d..(i + 1) * d].copy_from_slice(&xv.data()[j * d..(j + 1) * d]);
        }
        let idx = idx.to_vec();
        self.unary(
            x,
            out,
            "gather_rows",
            Box::new(move |_, _, gout| {
                let mut gx = Tensor::zeros(&[n, d]);
                for (i, &j) in idx.iter().enumerate() {
                    let gr = &gout.data()[i * d..(i + 1) * d];
                    let gxr = &mut gx.data_mut()[j * d..(j + 1) * d];
                    for k in 0..d {
                        gxr[k] += gr[k];
                    }
                }
                vec![(0, gx)]
            }),
        )
    }
}

// ---------------------------------------------------------------------------
// 1-D convolutional network ops (layout [batch, channels, length])
// ---------------------------------------------------------------------------

fn conv_out_len(l: usize, k: usize, stride: usize, pad: usize) -> usize {
    (l + 2 * pad - k) / stride + 1
}

impl Graph {
    /// Grouped 1-D convolution. `x [b,cin,l]`, `w [cout,cin/groups,k]`,
    /// `bias [cout]`.
    pub fn conv1d(
        &mut self,
        x: Var,
        w: Var,
        bias: Var,
        stride: usize,
        pad: usize,
        groups: usize,
    ) -> Var {
        let xv = self.value(x);
        let wv = self.value(w);
        let bv = self.value(bias);
        debug_assert_eq!(xv.shape().len(), 3, "conv1d input must be [b,c,l]");
        debug_assert_eq!(wv.shape().len(), 3, "conv1d weight must be [co,ci,k]");
        let (b, cin, l) = (xv.dim(0), xv.dim(1), xv.dim(2));
        let (cout, cin_g, k) = (wv.dim(0), wv.dim(1), wv.dim(2));
        assert_eq!(cin % groups, 0);
        assert_eq!(cout % groups, 0);
        assert_eq!(cin_g, cin / groups, "conv1d: weight group width mismatch");
        assert_eq!(bv.numel(), cout);
        let lo = conv_out_len(l, k, stride, pad);
        let co_per_g = cout / groups;

        let mut out = Tensor::zeros(&[b, cout, lo]);
        {
            let xd = xv.data();
            let wd = wv.data();
            let bd = bv.data();
            out.data_mut()
                .par_chunks_mut(cout * lo)
                .enumerate()
                .for_each(|(bi, ob)| {
                    conv1d_forward_one(
                        &xd[bi * cin * l..(bi + 1) * cin * l],
                        wd,
                        bd,
                        ob,
                        (cin, l, cout, cin_g, k, lo),
                        stride,
                        pad,
                        groups,
                        co_per_g,
                    );
                });
        }

        self.nary(
            &[x, w, bias],
            out,
            "conv1d",
            Box::new(move |g, id, gout| {
                let xv = g.parent_value(id, 0);
                let wv = g.parent_value(id, 1);
                let xd = xv.data();
                let wd = wv.data();
                let god = gout.data();

                // grad wrt input: each batch element independent.
                let mut gx = Tensor::zeros(&[b, cin, l]);
                gx.data_mut()
                    .par_chunks_mut(cin * l)
                    .enumerate()
                    .for_each(|(bi, gxb)| {
                        let gob = &god[bi * cout * lo..(bi + 1) * cout * lo];
                        for gi in 0..groups {
                            for co_local in 0..co_per_g {
                                let co = gi * co_per_g + co_local;
                                let gor = &gob[co * lo..(co + 1) * lo];
                                for ci_local in 0..cin_g {
                                    let ci = gi * cin_g + ci_local;
                                    let wr = &wd[(co * cin_g + ci_local) * k..][..k];
                                    let gxr = &mut gxb[ci * l..(ci + 1) * l];
                                    for (o, &go) in gor.iter().enumerate() {
                                        if go == 0.0 {
                                            continue;
                                        }
                                        let base = o * stride;
                                        for (kk, &wv) in wr.iter().enumerate() {
                                            let li = base + kk;
                                            if li >= pad && li - pad < l {
                                                gxr[li - pad] += go * wv;
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    });

                // grad wrt weight: parallel over output channels, batch loop
                // inside in fixed order.
                let mut gw = Tensor::zeros(&[cout, cin_g, k]);
                gw.data_mut()
                    .par_chunks_mut(cin_g * k)
                    .enumerate()
                    .for_each(|(co, gwc)| {
                        let gi = co / co_per_g;
                        for bi in 0..b {
                            let gor = &god[(bi * cout + co) * lo..][..lo];
                            let xb = &xd[bi * cin * l..(bi + 1) * cin * l];
                            for ci_local in 0..cin_g {
                                let ci = gi * cin_g + ci_local;
                                let xr = &xb[ci * l..(ci + 1) * l];
                                let gwr = &mut gwc[ci_local * k..(ci_local + 1) * k];
                                for (o, &go) in gor.iter().enumerate() {
                                    if go == 0.0 {
                                        continue;
                                    }
                                    let base = o * stride;
                                    for (kk, gwv) in gwr.iter_mut().enumerate() {
                                        let li = base + kk;
                                        if li >= pad && li - pad < l {
                                            *gwv += go * xr[li - pad];
                                        }
                                    }
                                }
                            }
                        }
                    });

                // grad wrt bias.
                let mut gb = Tensor::zeros(&[cout]);
                for bi in 0..b {
                    for co in 0..cout {
                        gb.data_mut()[co] +=
                            god[(bi * cout + co) * lo..][..lo].iter().sum::<f64>();
                    }
                }
                vec![(0, gx), (1, gw), (2, gb)]
            }),
        )
    }

    /// Batch normalization over `[b,c,l]` using batch statistics. Returns the
    /// output var plus the per-channel biased batch mean and variance so the
    /// caller can maintain running statistics outside the graph.
    pub fn batchnorm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> (Var, Vec<f64>, Vec<f64>) {
        let xv = self.value(x);
        debug_assert_eq!(xv.shape().len(), 3);
        let (b, c, l) = (xv.dim(0), xv.dim(1), xv.dim(2));
        let n = (b * l) as f64;
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for ci in 0..c {
            let mut s = 0.0;
            for bi in 0..b {
                s += xv.data()[(bi * c + ci) * l..][..l].iter().sum::<f64>();
            }
            let m = s / n;
            let mut v = 0.0;
            for bi in 0..b {
                v += xv.data()[(bi * c + ci) * l..][..l]
                    .iter()
                    .map(|&x| (x - m) * (x - m))
                    .sum::<f64>();
            }
            mean[ci] = m;
            var[ci] = v / n;
        }
        let gv = self.value(gamma).data().to_vec();
        let bv = self.value(beta).data().to_vec();
        let mut out = Tensor::zeros(&[b, c, l]);
        for bi in 0..b {
            for ci in 0..c {
                let inv = 1.0 / (var[ci] + eps).sqrt();
                let xr = &xv.data()[(bi * c + ci) * l..][..l];
                let or = &mut out.data_mut()[(bi * c + ci) * l..][..l];
                for i in 0..l {
                    or[i] = gv[ci] * (xr[i] - mean[ci]) * inv + bv[ci];
                }
            }
        }
        let mean_c = mean.clone();
        let var_c = var.clone();
        let out_var = self.nary(
            &[x, gamma, beta],
            out,
            "batchnorm_train",
            Box::new(move |g, id, gout| {
                let xv = g.parent_value(id, 0);
                let gamma_v = g.parent_value(id, 1);
                let mut gx = Tensor::zeros(&[b, c, l]);
                let mut ggamma = Tensor::zeros(&[c]);
                let mut gbeta = Tensor::zeros(&[c]);
                for ci in 0..c {
                    let inv = 1.0 / (var_c[ci] + eps).sqrt();
                    // Accumulate the three reductions the backward needs.
                    let mut sum_g = 0.0;
                    let mut sum_g_xhat = 0.0;
                    for bi in 0..b {
                        let xr = &xv.data()[(bi * c + ci) * l..][..l];
                        let gr = &gout.data()[(bi * c + ci) * l..][..l];
                        for i in 0..l {
                            let xhat = (xr[i] - mean_c[ci]) * inv;
                            sum_g += gr[i];
                            sum_g_xhat += gr[i] * xhat;
                        }
                    }
                    gbeta.data_mut()[ci] = sum_g;
                    ggamma.data_mut()[ci] = sum_g_xhat;
                    let gam = gamma_v.data()[ci];
                    let mg = sum_g / n;
                    let mgx = sum_g_xhat / n;
                    for bi in 0..b {
                        let xr = &xv.data()[(bi * c + ci) * l..][..l];
                        let gr = &gout.data()[(bi * c + ci) * l..][..l];
                        let gxr = &mut gx.data_mut()[(bi * c + ci) * l..][..l];
                        for i in 0..l {
                            let xhat = (xr[i] - mean_c[ci]) * inv;
                            gxr[i] = gam * inv * (gr[i] - mg - xhat * mgx);
                        }
                    }
                }
                vec![(0, gx), (1, ggamma), (2, gbeta)]
            }),
        );
        (out_var, mean, var)
    }

    /// Batch normalization using fixed (running) statistics: a per-channel
    /// affine transform.
    pub fn batchnorm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[f64],
        running_var: &[f64],
        eps: f64,
    ) -> Var {
        let xv = self.value(x);
        debug_assert_eq!(xv.shape().len(), 3);
        let (b, c, l) = (xv.dim(0), xv.dim(1), xv.dim(2));
        assert_eq!(running_mean.len(), c);
        assert_eq!(running_var.len(), c);
        let gv = self.value(gamma).data().to_vec();
        let bv = self.value(beta).data().to_vec();
        let mut out = Tensor::zeros(&[b, c, l]);
        for bi in 0..b {
            for ci in 0..c {
                let inv = 1.0 / (running_var[ci] + eps).sqrt();
                let xr = &xv.data()[(bi * c + ci) * l..][..l];
                let or = &mut out.data_mut()[(bi * c + ci) * l..][..l];
                for i in 0..l {
                    or[i] = gv[ci] * (xr[i] - running_mean[ci]) * inv + bv[ci];
                }
            }
        }
        let rm = running_mean.to_vec();
        let rv = running_var.to_vec();
        self.nary(
            &[x, gamma, beta],
            out,
            "batchnorm_eval",
            Box::new(move |g, id, gout| {
                let xv = g.parent_value(id, 0);
                let gamma_v = g.parent_value(id, 1);
                let mut gx = Tensor::zeros(&[b, c, l]);
                let mut ggamma = Tensor::zeros(&[c]);
                let mut gbeta = Tensor::zeros(&[c]);
                for ci in 0..c {
                    let inv = 1.0 / (rv[ci] + eps).sqrt();
                    let a = gamma_v.data()[ci] * inv;
                    for bi in 0..b {
                        let xr = &xv.data()[(bi * c + ci) * l..][..l];
                        let gr = &gout.data()[(bi * c + ci) * l..][..l];
                        let gxr = &mut gx.data_mut()[(bi * c + ci) * l..][..l];
                        for i in 0..l {
                            gxr[i] = gr[i] * a;
                            ggamma.data_mut()[ci] += gr[i] * (xr[i] - rm[ci]) * inv;
                            gbeta.data_mut()[ci] += gr[i];
                        }
                    }
                }
                vec![(0, gx), (1, ggamma), (2, gbeta)]
            }),
        )
    }

    /// Max pooling with implicit negative-infinity padding. Ties resolve to
    /// the earliest index, which keeps backward deterministic.
    pub fn maxpool1d(&mut self, x: Var, k: usize, stride: usize, pad: usize) -> Var {
        let xv = self.value(x);
        let (b, c, l) = (xv.dim(0), xv.dim(1), xv.dim(2));
        let lo = conv_out_len(l, k, stride, pad);
        let mut out = Tensor::zeros(&[b, c, lo]);
        let mut argmax = vec![0usize; b * c * lo];
        for bi in 0..b {
            for ci in 0..c {
                let xr = &xv.data()[(bi * c + ci) * l..][..l];
                for o in 0..lo {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_i = 0usize;
                    for kk in 0..k {
                        let li = o * stride + kk;
                        if li >= pad && li - pad < l {
                            let v = xr[li - pad];
                            if v > best {
                                best = v;
                                best_i = li - pad;
                            }
                        }
                    }
                    out.data_mut()[(bi * c + ci) * lo + o] = best;
                    argmax[(bi * c + ci) * lo + o] = best_i;
                }
            }
        }
        self.unary(
            x,
            out,
            "maxpool1d",
            Box::new(move |_, _, gout| {
                let mut gx = Tensor::zeros(&[b, c, l]);
                for bi in 0..b {
                    for ci in 0..c {
                        for o in 0..lo {
                            let gi = (bi * c + ci) * lo + o;
                            gx.data_mut()[(bi * c + ci) * l + argmax[gi]] += gout.data()[gi];
                        }
                    }
                }
                vec![(0, gx)]
            }),
        )
    }

    /// Average pooling; zero padding counts toward the divisor.
    pub fn avgpool1d(&mut self, x: Var, k: usize, stride: usize, pad: usize) -> Var {
        let xv = self.value(x);
        let (b, c, l) = (xv.dim(0), xv.dim(1), xv.dim(2));
        let lo = conv_out_len(l, k, stride, pad);
        let mut out = Tensor::zeros(&[b, c, lo]);
        for bi in 0..b {
            for ci in 0..c {
                let xr = &xv.data()[(bi * c + ci) * l..][..l];
                for o in 0..lo {
                    let mut s = 0.0;
                    for kk in 0..k {
                        let li = o * stride + kk;
                        if li >= pad && li - pad < l {
                            s += xr[li - pad];
                        }
                    }
                    out.data_mut()[(bi * c + ci) * lo + o] = s / k as f64;
                }
            }
        }
        self.unary(
            x,
            out,
            "avgpool1d",
            Box::new(move |_, _, gout| {
                let mut gx = Tensor::zeros(&[b, c, l]);
                for bi in 0..b {
                    for ci in 0..c {
                        for o in 0..lo {
                            let go = gout.data()[(bi * c + ci) * lo + o] / k as f64;
                            if go == 0.0 {
                                continue;
                            }
                            for kk in 0..k {
                                let li = o * stride + kk;
                                if li >= pad && li - pad < l {
                                    gx.data_mut()[(bi * c + ci) * l + li - pad] += go;
                                }
                            }
                        }
                    }
                }
                vec![(0, gx)]
            }),
        )
    }

    /// Mean over the temporal axis: `[b,c,l] -> [b,c]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let (b, c, l) = (xv.dim(0), xv.dim(1), xv.dim(2));
        let mut out = Tensor::zeros(&[b, c]);
        for bi in 0..b {
            for ci in 0..c {
                out.data_mut()[bi * c + ci] =
                    xv.data()[(bi * c + ci) * l..][..l].iter().sum::<f64>() / l as f64;
            }
        }
        self.unary(
            x,
            out,
            "global_avg_pool",
            Box::new(move |_, _, gout| {
                let mut gx = Tensor::zeros(&[b, c, l]);
                for bi in 0..b {
                    for ci in 0..c {
                        let go = gout.data()[bi * c + ci] / l as f64;
                        for v in gx.data_mut()[(bi * c + ci) * l..][..l].iter_mut() {
                            *v = go;
                        }
                    }
                }
                vec![(0, gx)]
            }),
        )
    }

    /// Concatenate along the channel axis: `[b,c1,l] ++ [b,c2,l]`.
    pub fn concat_channels(&mut self, a: Var, bvar: Var) -> Var {
        let av = self.value(a);
        let bv = self.value(bvar);
        debug_assert_eq!(av.dim(0), bv.dim(0));
        debug_assert_eq!(av.dim(2), bv.dim(2));
        let (b, c1, c2, l) = (av.dim(0), av.dim(1), bv.dim(1), av.dim(2));
        let mut out = Tensor::zeros(&[b, c1 + c2, l]);
        for bi in 0..b {
            let dst = &mut out.data_mut()[bi * (c1 + c2) * l..][..(c1 + c2) * l];
            dst[..c1 * l].copy_from_slice(&av.data()[bi * c1 * l..][..c1 * l]);
            dst[c1 * l..].copy_from_slice(&bv.data()[bi * c2 * l..][..c2 * l]);
        }
        self.nary(
            &[a, bvar],
            out,
            "concat_channels",
            Box::new(move |_, _, gout| {
                let mut ga = Tensor::zeros(&[b, c1, l]);
                let mut gb = Tensor::zeros(&[b, c2, l]);
                for bi in 0..b {
                    let src = &gout.data()[bi * (c1 + c2) * l..][..(c1 + c2) * l];
                    ga.data_mut()[bi * c1 * l..][..c1 * l].copy_from_slice(&src[..c1 * l]);
                    gb.data_mut()[bi * c2 * l..][..c2 * l].copy_from_slice(&src[c1 * l..]);
                }
                vec![(0, ga), (1, gb)]
            }),
        )
    }

    /// Reorder channels: `out[:, j, :] = x[:, perm[j], :]`.
    pub fn permute_channels(&mut self, x: Var, perm: &[usize]) -> Var {
        let xv = self.value(x);
        let (b, c, l) = (xv.dim(0), xv.dim(1), xv.dim(2));
        assert_eq!(perm.len(), c, "permute_channels: perm length mismatch");
        let mut out = Tensor::zeros(&[b, c, l]);
        for bi in 0..b {
            for (j, &src) in perm.iter().enumerate() {
                out.data_mut()[(bi * c + j) * l..][..l]
                    .copy_from_slice(&xv.data()[(bi * c + src) * l..][..l]);
            }
        }
        let perm = perm.to_vec();
        self.unary(
            x,
            out,
            "permute_channels",
            Box::new(move |_, _, gout| {
                let mut gx = Tensor::zeros(&[b, c, l]);
                for bi in 0..b {
                    for (j, &src) in perm.iter().enumerate() {
                        gx.data_mut()[(bi * c + src) * l..][..l]
                            .copy_from_slice(&gout.data()[(bi * c + j) * l..][..l]);
                    }
                }
                vec![(0, gx)]
            }),
        )
    }
}

#[allow(clippy::too_many_arguments)]
fn conv1d_forward_one(
    xb: &[f64],
    wd: &[f64],
    bd: &[f64],
    ob: &mut [f64],
    dims: (usize, usize, usize, usize, usize, usize),
    stride: usize,
    pad: usize,
    groups: usize,
    co_per_g: usize,
) {
    let (_cin, l, _cout, cin_g, k, lo) = dims;
    for gi in 0..groups {
        for co_local in 0..co_per_g {
            let co = gi * co_per_g + co_local;
            let or = &mut ob[co * lo..(co + 1) * lo];
            or.fill(bd[co]);
            for ci_local in 0..cin_g {
                let ci = gi * cin_g + ci_local;
                let xr = &xb[ci * l..(ci + 1) * l];
                let wr = &wd[(co * cin_g + ci_local) * k..][..k];
                for (kk, &wv) in wr.iter().enumerate() {
                    if wv == 0.0 {
                        continue;
                    }
                    // li = o*stride + kk - pad must land in [0, l)
                    let o_start = pad.saturating_sub(kk).div_ceil(stride.max(1));
                    for (o, ov) in or.iter_mut().enumerate().skip(o_start).take(lo) {
                        let li = o * stride + kk;
                        if li < pad {
                            continue;
                        }
                        let li = li - pad;
                        if li >= l {
                            break;
                        }
                        *ov += wv * xr[li];
                    }
                }
            }
        }
    }
}
