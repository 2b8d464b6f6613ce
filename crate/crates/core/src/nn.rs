//! Layer building blocks on top of the autodiff graph.
//!
//! Model parameters live in a single flat `Vec<f64>` with a named layout
//! (`ParamStore`). A forward pass binds each parameter block to a graph
//! node on first use through a `Binding`; after backward the binding maps
//! node gradients back into a flat gradient vector aligned with the layout.

use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{Gradients, Graph, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    /// Convolution or dense weight; fan-in scaled uniform init.
    Weight,
    /// Additive bias; zero init.
    Bias,
    /// Normalization scale; ones init.
    Gamma,
    /// Normalization shift; zero init.
    Beta,
    /// Running mean buffer; zero init.
    RunningMean,
    /// Running variance buffer; ones init.
    RunningVar,
}

#[derive(Clone, Debug)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub kind: ParamKind,
}

impl ParamSpec {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Flat parameter vector plus its named layout.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    specs: Vec<ParamSpec>,
    by_name: HashMap<String, usize>,
    data: Vec<f64>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: &str, shape: &[usize], kind: ParamKind) -> usize {
        assert!(
            !self.by_name.contains_key(name),
            "duplicate parameter name {name}"
        );
        let numel: usize = shape.iter().product();
        let spec = ParamSpec {
            name: name.to_string(),
            shape: shape.to_vec(),
            offset: self.data.len(),
            kind,
        };
        self.data.extend(std::iter::repeat(0.0).take(numel));
        self.specs.push(spec);
        self.by_name.insert(name.to_string(), self.specs.len() - 1);
        self.specs.len() - 1
    }

    pub fn specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    pub fn spec(&self, idx: usize) -> &ParamSpec {
        &self.specs[idx]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.by_name.get(name).copied()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn slice(&self, idx: usize) -> &[f64] {
        let s = &self.specs[idx];
        &self.data[s.offset..s.offset + s.numel()]
    }

    pub fn slice_mut(&mut self, idx: usize) -> &mut [f64] {
        let (offset, numel) = {
            let s = &self.specs[idx];
            (s.offset, s.numel())
        };
        &mut self.data[offset..offset + numel]
    }

    pub fn tensor(&self, idx: usize) -> Tensor {
        let s = &self.specs[idx];
        Tensor::new(s.shape.clone(), self.slice(idx).to_vec())
            .expect("layout invariant violated")
    }

    /// Seeded init: weights are fan-in scaled uniform, biases and shifts
    /// zero, scales and running variances one. Draw order follows the
    /// registration order, so a given seed always produces the same values.
    pub fn init(&mut self, rng: &mut ChaCha8Rng) {
        for i in 0..self.specs.len() {
            let (kind, shape) = (self.specs[i].kind, self.specs[i].shape.clone());
            let slice = self.slice_mut(i);
            match kind {
                ParamKind::Weight => {
                    // fan-in: product of all dims except the first.
                    let fan_in: usize = shape[1..].iter().product::<usize>().max(1);
                    let bound = 1.0 / (fan_in as f64).sqrt();
                    for v in slice.iter_mut() {
                        *v = rng.gen_range(-bound..bound);
                    }
                }
                ParamKind::Bias | ParamKind::Beta | ParamKind::RunningMean => {
                    slice.fill(0.0);
                }
                ParamKind::Gamma | ParamKind::RunningVar => {
                    slice.fill(1.0);
                }
            }
        }
    }
}

/// Whether a forward pass uses batch statistics (training) or running
/// statistics (inference).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Pending running-statistics update captured during a training forward.
/// The trainer applies these after the optimizer step; the forward pass
/// itself never mutates the model.
#[derive(Clone, Debug)]
pub struct StatUpdate {
    pub mean_spec: usize,
    pub var_spec: usize,
    pub batch_mean: Vec<f64>,
    /// Unbiased batch variance, matching the usual running-var convention.
    pub batch_var_unbiased: Vec<f64>,
}

/// Binds parameter blocks of one model to graph nodes for a single forward
/// pass.
pub struct Binding<'a> {
    params: &'a ParamStore,
    buffers: &'a ParamStore,
    trainable: bool,
    pub mode: Mode,
    bound: HashMap<usize, Var>,
    pub stat_updates: Vec<StatUpdate>,
}

impl<'a> Binding<'a> {
    pub fn new(
        params: &'a ParamStore,
        buffers: &'a ParamStore,
        trainable: bool,
        mode: Mode,
    ) -> Self {
        Binding {
            params,
            buffers,
            trainable,
            mode,
            bound: HashMap::new(),
            stat_updates: Vec::new(),
        }
    }

    pub fn var(&mut self, g: &mut Graph, spec_idx: usize) -> Var {
        if let Some(v) = self.bound.get(&spec_idx) {
            return *v;
        }
        let t = self.params.tensor(spec_idx);
        let v = if self.trainable {
            g.leaf(t)
        } else {
            g.constant(t)
        };
        self.bound.insert(spec_idx, v);
        v
    }

    pub fn buffer_slice(&self, spec_idx: usize) -> &[f64] {
        self.buffers.slice(spec_idx)
    }

    /// Flat gradient vector aligned with the parameter layout. Unbound or
    /// unused parameters get zero gradient.
    pub fn collect_grads(&self, g: &Graph, grads: &Gradients) -> Vec<f64> {
        let mut flat = vec![0.0; self.params.len()];
        for (&spec_idx, &var) in &self.bound {
            if let Some(gt) = grads.get(var) {
                let spec = self.params.spec(spec_idx);
                flat[spec.offset..spec.offset + spec.numel()].copy_from_slice(gt.data());
            }
            let _ = g;
        }
        flat
    }
}

// ---------------------------------------------------------------------------
// Layers
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct Conv1d {
    pub w: usize,
    pub b: usize,
    pub stride: usize,
    pub pad: usize,
    pub groups: usize,
}

impl Conv1d {
    #[allow(clippy::too_many_arguments)]
    pub fn register(
        store: &mut ParamStore,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        k: usize,
        stride: usize,
        pad: usize,
        groups: usize,
    ) -> Self {
        let w = store.register(
            &format!("{name}.w"),
            &[out_ch, in_ch / groups, k],
            ParamKind::Weight,
        );
        let b = store.register(&format!("{name}.b"), &[out_ch], ParamKind::Bias);
        Conv1d {
            w,
            b,
            stride,
            pad,
            groups,
        }
    }

    pub fn forward(&self, g: &mut Graph, ctx: &mut Binding, x: Var) -> Var {
        let w = ctx.var(g, self.w);
        let b = ctx.var(g, self.b);
        g.conv1d(x, w, b, self.stride, self.pad, self.groups)
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm1d {
    pub gamma: usize,
    pub beta: usize,
    pub running_mean: usize,
    pub running_var: usize,
    pub eps: f64,
    pub momentum: f64,
}

impl BatchNorm1d {
    pub fn register(
        params: &mut ParamStore,
        buffers: &mut ParamStore,
        name: &str,
        ch: usize,
    ) -> Self {
        let gamma = params.register(&format!("{name}.gamma"), &[ch], ParamKind::Gamma);
        let beta = params.register(&format!("{name}.beta"), &[ch], ParamKind::Beta);
        let running_mean =
            buffers.register(&format!("{name}.running_mean"), &[ch], ParamKind::RunningMean);
        let running_var =
            buffers.register(&format!("{name}.running_var"), &[ch], ParamKind::RunningVar);
        BatchNorm1d {
            gamma,
            beta,
            running_mean,
            running_var,
            eps: 1e-5,
            momentum: 0.1,
        }
    }

    pub fn forward(&self, g: &mut Graph, ctx: &mut Binding, x: Var) -> Var {
        let gamma = ctx.var(g, self.gamma);
        let beta = ctx.var(g, self.beta);
        match ctx.mode {
            Mode::Train => {
                let (y, mean, var_biased) = g.batchnorm_train(x, gamma, beta, self.eps);
                let n = (g.shape(x)[0] * g.shape(x)[2]) as f64;
                let correction = if n > 1.0 { n / (n - 1.0) } else { 1.0 };
                ctx.stat_updates.push(StatUpdate {
                    mean_spec: self.running_mean,
                    var_spec: self.running_var,
                    batch_mean: mean,
                    batch_var_unbiased: var_biased.iter().map(|v| v * correction).collect(),
                });
                y
            }
            Mode::Eval => {
                let rm = ctx.buffer_slice(self.running_mean).to_vec();
                let rv = ctx.buffer_slice(self.running_var).to_vec();
                g.batchnorm_eval(x, gamma, beta, &rm, &rv, self.eps)
            }
        }
    }

    /// Fold one captured batch statistic into the running buffers.
    pub fn apply_update(buffers: &mut ParamStore, update: &StatUpdate, momentum: f64) {
        let rm = buffers.slice_mut(update.mean_spec);
        for (r, &b) in rm.iter_mut().zip(update.batch_mean.iter()) {
            *r = (1.0 - momentum) * *r + momentum * b;
        }
        let rv = buffers.slice_mut(update.var_spec);
        for (r, &b) in rv.iter_mut().zip(update.batch_var_unbiased.iter()) {
            *r = (1.0 - momentum) * *r + momentum * b;
        }
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: usize,
    pub b: usize,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn register(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize) -> Self {
        let w = store.register(&format!("{name}.w"), &[out_dim, in_dim], ParamKind::Weight);
        let b = store.register(&format!("{name}.b"), &[out_dim], ParamKind::Bias);
        Linear {
            w,
            b,
            in_dim,
            out_dim,
        }
    }

    pub fn forward(&self, g: &mut Graph, ctx: &mut Binding, x: Var) -> Var {
        let w = ctx.var(g, self.w);
        let b = ctx.var(g, self.b);
        g.linear(x, w, b)
    }

    /// Apply the affine map directly to values, outside any graph.
    pub fn apply_plain(&self, params: &ParamStore, x: &Tensor) -> Result<Tensor> {
        if x.shape().len() != 2 || x.dim(1) != self.in_dim {
            return Err(Error::Shape(format!(
                "expected [*, {}], got {:?}",
                self.in_dim,
                x.shape()
            )));
        }
        let w = params.slice(self.w);
        let b = params.slice(self.b);
        let rows = x.dim(0);
        let mut out = Tensor::zeros(&[rows, self.out_dim]);
        for i in 0..rows {
            let xr = &x.data()[i * self.in_dim..(i + 1) * self.in_dim];
            for o in 0..self.out_dim {
                let wr = &w[o * self.in_dim..(o + 1) * self.in_dim];
                out.data_mut()[i * self.out_dim + o] =
                    b[o] + xr.iter().zip(wr.iter()).map(|(&a, &c)| a * c).sum::<f64>();
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::derive_rng;

    #[test]
    fn layout_offsets_are_contiguous() {
        let mut store = ParamStore::new();
        let c = Conv1d::register(&mut store, "stem", 1, 4, 3, 1, 1, 1);
        let l = Linear::register(&mut store, "cls", 4, 2);
        assert_eq!(store.spec(c.w).offset, 0);
        assert_eq!(store.spec(c.b).offset, 12);
        assert_eq!(store.spec(l.w).offset, 16);
        assert_eq!(store.len(), 16 + 8 + 2);
    }

    #[test]
    fn init_is_seed_deterministic() {
        let mut a = ParamStore::new();
        Conv1d::register(&mut a, "c", 2, 4, 3, 1, 1, 1);
        let mut b = a.clone();
        a.init(&mut derive_rng(3, "init"));
        b.init(&mut derive_rng(3, "init"));
        assert_eq!(a.data(), b.data());
        let mut c = a.clone();
        c.init(&mut derive_rng(4, "init"));
        assert_ne!(a.data(), c.data());
    }

    #[test]
    fn binding_collects_grads_in_layout_order() {
        let mut store = ParamStore::new();
        let lin = Linear::register(&mut store, "cls", 2, 1);
        store.init(&mut derive_rng(1, "init"));
        let buffers = ParamStore::new();
        let mut g = Graph::new();
        let mut ctx = Binding::new(&store, &buffers, true, Mode::Eval);
        let x = g.constant(Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap());
        let y = lin.forward(&mut g, &mut ctx, x);
        let loss = g.sum_all(y);
        let grads = g.backward(loss).unwrap();
        let flat = ctx.collect_grads(&g, &grads);
        // d(loss)/dw = x, d(loss)/db = 1
        assert_eq!(flat, vec![1.0, 2.0, 1.0]);
    }
}
