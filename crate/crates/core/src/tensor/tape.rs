//! Reverse-mode differentiation over a linear record of operations.
//!
//! Values are appended to the tape as they are computed, so node order is a
//! topological order by construction. [`Tape::backward`] walks it once in
//! reverse and adds the resulting parameter gradients into a [`ParamStore`].

use super::kernels::{self, ConvGeometry};
use super::{Float, ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

/// Running per-channel statistics for eval-mode batch normalization.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats<T: Float> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
    pub updates: u64,
}

impl<T: Float> RunningStats<T> {
    pub fn new(channels: usize) -> Self {
        RunningStats {
            mean: vec![T::zero(); channels],
            var: vec![T::one(); channels],
            updates: 0,
        }
    }

    pub fn is_populated(&self) -> bool {
        self.updates > 0
    }
}

#[derive(Clone, Copy, Debug)]
pub struct BatchNormConfig {
    pub momentum: f64,
    pub eps: f64,
}

impl Default for BatchNormConfig {
    fn default() -> Self {
        BatchNormConfig {
            momentum: 0.1,
            eps: 1e-5,
        }
    }
}

enum Op<T: Float> {
    Leaf(Option<ParamId>),
    Conv {
        x: Var,
        w: Var,
        b: Var,
        cols: Vec<T>,
        geom: ConvGeometry,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        batch_stats: bool,
    },
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Sum(Var),
    AvgPool {
        x: Var,
        k: usize,
        stride: usize,
    },
    Reshape(Var),
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    GroupedNll {
        logits: Var,
        probs: Tensor<T>,
        group_of: Option<Vec<usize>>,
        targets: Vec<usize>,
    },
}

struct Node<T: Float> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

pub struct Tape<T: Float> {
    nodes: Vec<Node<T>>,
    track_params: bool,
}

impl<T: Float> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Float> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            track_params: true,
        }
    }

    /// A tape on which parameters are recorded as constants, so nothing is
    /// kept for a backward pass.
    pub fn inference() -> Self {
        Tape {
            nodes: Vec::new(),
            track_params: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a value that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf(None), false)
    }

    /// Records a parameter. Frozen parameters behave as constants.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        let mut value = store.get(id).clone();
        value.grad = None;
        let needs = self.track_params && !store.is_frozen(id);
        self.push(value, Op::Leaf(Some(id)), needs)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let (out, cols, geom) =
            kernels::conv2d_forward(self.value(x), self.value(w), self.value(b), stride, pad)?;
        let needs = self.needs(x) || self.needs(w) || self.needs(b);
        let cols = if needs { cols } else { Vec::new() };
        Ok(self.push(out, Op::Conv { x, w, b, cols, geom }, needs))
    }

    /// Batch normalization over `[N, C, H, W]`. In train mode the batch
    /// statistics are used and folded into `stats`; eval mode reads `stats`.
    pub fn batchnorm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mode: Mode,
        stats: &mut RunningStats<T>,
        cfg: BatchNormConfig,
    ) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 4 {
            return Err(Error::shape(format!("batchnorm expects rank-4 input, got {shape:?}")));
        }
        let c = shape[1];
        if self.value(gamma).numel() != c || self.value(beta).numel() != c || stats.mean.len() != c
        {
            return Err(Error::shape(format!(
                "batchnorm parameters do not match {c} channels of {shape:?}"
            )));
        }
        let eps = T::from_f64(cfg.eps);
        let (out, xhat, inv_std, batch_stats) = match mode {
            Mode::Train => {
                let count = shape[0] * shape[2] * shape[3];
                if count < 2 {
                    return Err(Error::contract(format!(
                        "train-mode batchnorm needs at least 2 values per channel, got {count}"
                    )));
                }
                let s = kernels::channel_stats(self.value(x));
                let (out, xhat, inv_std) = kernels::batchnorm_apply(
                    self.value(x),
                    self.value(gamma).data(),
                    self.value(beta).data(),
                    &s.mean,
                    &s.var,
                    eps,
                );
                let m = T::from_f64(cfg.momentum);
                let unbias = T::from_f64(count as f64 / (count - 1) as f64);
                for ch in 0..c {
                    if stats.updates == 0 {
                        stats.mean[ch] = s.mean[ch];
                        stats.var[ch] = s.var[ch] * unbias;
                    } else {
                        stats.mean[ch] = (T::one() - m) * stats.mean[ch] + m * s.mean[ch];
                        stats.var[ch] = (T::one() - m) * stats.var[ch] + m * s.var[ch] * unbias;
                    }
                }
                stats.updates += 1;
                (out, xhat, inv_std, true)
            }
            Mode::Eval => {
                if !stats.is_populated() {
                    return Err(Error::contract(
                        "batchnorm running statistics are empty; train the model first or load a checkpoint",
                    ));
                }
                let (out, xhat, inv_std) = kernels::batchnorm_apply(
                    self.value(x),
                    self.value(gamma).data(),
                    self.value(beta).data(),
                    &stats.mean,
                    &stats.var,
                    eps,
                );
                (out, xhat, inv_std, false)
            }
        };
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        let op = Op::BatchNorm {
            x,
            gamma,
            beta,
            xhat: if needs { xhat } else { Vec::new() },
            inv_std,
            batch_stats,
        };
        Ok(self.push(out, op, needs))
    }

    fn map(&mut self, x: Var, f: impl Fn(T) -> T) -> Tensor<T> {
        let v = self.value(x);
        Tensor::new(v.shape(), v.data().iter().map(|&a| f(a)).collect()).expect("same shape")
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.map(x, kernels::sigmoid);
        let needs = self.needs(x);
        self.push(out, Op::Sigmoid(x), needs)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let out = self.map(x, T::tanh);
        let needs = self.needs(x);
        self.push(out, Op::Tanh(x), needs)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.map(x, |a| a.max(T::zero()));
        let needs = self.needs(x);
        self.push(out, Op::Relu(x), needs)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = kernels::add(self.value(a), self.value(b))?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Add(a, b), needs))
    }

    pub fn hadamard(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = kernels::hadamard(self.value(a), self.value(b))?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Mul(a, b), needs))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let out = self.map(x, |a| a * c);
        let needs = self.needs(x);
        self.push(out, Op::Scale(x, c), needs)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let total: T = self.value(x).data().iter().copied().sum();
        let needs = self.needs(x);
        self.push(Tensor::scalar(total), Op::Sum(x), needs)
    }

    /// Sum of several scalars.
    pub fn add_all(&mut self, terms: &[Var]) -> Result<Var> {
        let (first, rest) = terms
            .split_first()
            .ok_or_else(|| Error::contract("add_all needs at least one term"))?;
        rest.iter().try_fold(*first, |acc, &t| self.add(acc, t))
    }

    pub fn avg_pool(&mut self, x: Var, k: usize, stride: usize) -> Result<Var> {
        let out = kernels::avg_pool_forward(self.value(x), k, stride)?;
        let needs = self.needs(x);
        Ok(self.push(out, Op::AvgPool { x, k, stride }, needs))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        let needs = self.needs(x);
        Ok(self.push(out, Op::Reshape(x), needs))
    }

    /// Collapses all but the leading axis.
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        let shape = [s[0], s[1..].iter().product()];
        self.reshape(x, &shape)
    }

    pub fn fully_connected(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let out = kernels::linear_forward(self.value(x), self.value(w), self.value(b))?;
        let needs = self.needs(x) || self.needs(w) || self.needs(b);
        Ok(self.push(out, Op::Linear { x, w, b }, needs))
    }

    /// Mean softmax cross-entropy of `[N, K]` logits against class indices.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let k = self.shape(logits).get(1).copied().unwrap_or(0);
        self.grouped_nll(logits, None, targets, k)
    }

    /// Mean negative log of the softmax mass that `group_of` assigns to each
    /// target group.
    pub fn grouped_cross_entropy(
        &mut self,
        logits: Var,
        group_of: &[usize],
        targets: &[usize],
        groups: usize,
    ) -> Result<Var> {
        self.grouped_nll(logits, Some(group_of.to_vec()), targets, groups)
    }

    fn grouped_nll(
        &mut self,
        logits: Var,
        group_of: Option<Vec<usize>>,
        targets: &[usize],
        groups: usize,
    ) -> Result<Var> {
        let (loss, probs) =
            kernels::grouped_nll_forward(self.value(logits), group_of.as_deref(), targets, groups)?;
        let needs = self.needs(logits);
        let op = Op::GroupedNll {
            logits,
            probs,
            group_of,
            targets: targets.to_vec(),
        };
        Ok(self.push(Tensor::scalar(loss), op, needs))
    }

    /// Accumulates d(root)/d(param) into every non-frozen parameter reached
    /// from `root`. Gradients add to whatever the store already holds, so
    /// running this twice without zeroing doubles them.
    pub fn backward(&self, root: Var, store: &mut ParamStore<T>) -> Result<()> {
        if !self.value(root).is_scalar() {
            return Err(Error::contract(format!(
                "backward needs a scalar root, got shape {:?}",
                self.shape(root)
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..=root.0).map(|_| None).collect();
        grads[root.0] = Some(vec![T::one()]);
        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            self.propagate(node, &g, &mut grads, store);
        }
        Ok(())
    }

    fn propagate(
        &self,
        node: &Node<T>,
        g: &[T],
        grads: &mut [Option<Vec<T>>],
        store: &mut ParamStore<T>,
    ) {
        let mut send = |v: Var, delta: Vec<T>| {
            if !self.needs(v) {
                return;
            }
            match grads[v.0].as_mut() {
                Some(acc) => acc.iter_mut().zip(&delta).for_each(|(a, &d)| *a += d),
                None => grads[v.0] = Some(delta),
            }
        };
        match &node.op {
            Op::Leaf(param) => {
                if let Some(id) = param {
                    store.accumulate_grad(*id, g);
                }
            }
            Op::Conv { x, w, b, cols, geom } => {
                let cg = kernels::conv2d_backward(
                    geom,
                    self.value(*w).data(),
                    cols,
                    g,
                    self.needs(*x),
                );
                if self.needs(*x) {
                    send(*x, cg.input);
                }
                send(*w, cg.weight);
                send(*b, cg.bias);
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let gm = self.value(*gamma).data();
                let shape = self.shape(*x);
                if *batch_stats {
                    let bg = kernels::batchnorm_backward(shape, gm, xhat, inv_std, g);
                    send(*x, bg.input);
                    send(*gamma, bg.gamma);
                    send(*beta, bg.beta);
                } else {
                    let (c, hw) = (shape[1], shape[2] * shape[3]);
                    let mut gx = vec![T::zero(); g.len()];
                    let mut ggamma = vec![T::zero(); c];
                    let mut gbeta = vec![T::zero(); c];
                    for (i, &gi) in g.iter().enumerate() {
                        let ch = (i / hw) % c;
                        gx[i] = gi * gm[ch] * inv_std[ch];
                        ggamma[ch] += gi * xhat[i];
                        gbeta[ch] += gi;
                    }
                    send(*x, gx);
                    send(*gamma, ggamma);
                    send(*beta, gbeta);
                }
            }
            Op::Sigmoid(x) => {
                let y = node.value.data();
                send(
                    *x,
                    g.iter().zip(y).map(|(&gi, &s)| gi * s * (T::one() - s)).collect(),
                );
            }
            Op::Tanh(x) => {
                let y = node.value.data();
                send(
                    *x,
                    g.iter().zip(y).map(|(&gi, &t)| gi * (T::one() - t * t)).collect(),
                );
            }
            Op::Relu(x) => {
                let xin = self.value(*x).data();
                send(
                    *x,
                    g.iter()
                        .zip(xin)
                        .map(|(&gi, &v)| if v > T::zero() { gi } else { T::zero() })
                        .collect(),
                );
            }
            Op::Add(a, b) => {
                send(*a, g.to_vec());
                send(*b, g.to_vec());
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                send(*a, g.iter().zip(bv).map(|(&gi, &y)| gi * y).collect());
                send(*b, g.iter().zip(av).map(|(&gi, &y)| gi * y).collect());
            }
            Op::Scale(x, c) => send(*x, g.iter().map(|&gi| gi * *c).collect()),
            Op::Sum(x) => send(*x, vec![g[0]; self.value(*x).numel()]),
            Op::AvgPool { x, k, stride } => {
                send(*x, kernels::avg_pool_backward(self.shape(*x), *k, *stride, g));
            }
            Op::Reshape(x) => send(*x, g.to_vec()),
            Op::Linear { x, w, b } => {
                let (xs, ws) = (self.shape(*x), self.shape(*w));
                let (n, f, k) = (xs[0], xs[1], ws[1]);
                if self.needs(*x) {
                    let mut gx = vec![T::zero(); n * f];
                    super::float::matmul(n, k, f, g, false, self.value(*w).data(), true, &mut gx, false);
                    send(*x, gx);
                }
                if self.needs(*w) {
                    let mut gw = vec![T::zero(); f * k];
                    super::float::matmul(f, n, k, self.value(*x).data(), true, g, false, &mut gw, false);
                    send(*w, gw);
                }
                let mut gb = vec![T::zero(); k];
                for row in g.chunks(k) {
                    gb.iter_mut().zip(row).for_each(|(a, &v)| *a += v);
                }
                send(*b, gb);
            }
            Op::GroupedNll {
                logits,
                probs,
                group_of,
                targets,
            } => {
                send(
                    *logits,
                    kernels::grouped_nll_backward(probs, group_of.as_deref(), targets, g[0]),
                );
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scale_gradient() {
        let mut store = ParamStore::<f64>::new();
        let x = store.add("x", Tensor::scalar(3.0));
        let mut tape = Tape::new();
        let xv = tape.param(&store, x);
        let y = tape.scale(xv, 2.0);
        tape.backward(y, &mut store).unwrap();
        assert_eq!(store.get(x).grad.as_ref().unwrap(), &[2.0]);
    }

    #[test]
    fn square_gradient_and_double_backward() {
        let mut store = ParamStore::<f64>::new();
        let x = store.add("x", Tensor::from_f64(&[2], &[1.0, 2.0]).unwrap());
        let mut tape = Tape::new();
        let xv = tape.param(&store, x);
        let sq = tape.hadamard(xv, xv).unwrap();
        let y = tape.sum(sq);
        tape.backward(y, &mut store).unwrap();
        assert_eq!(store.get(x).grad.as_ref().unwrap(), &[2.0, 4.0]);
        tape.backward(y, &mut store).unwrap();
        assert_eq!(store.get(x).grad.as_ref().unwrap(), &[4.0, 8.0]);
    }

    #[test]
    fn non_scalar_root_rejected() {
        let mut store = ParamStore::<f64>::new();
        let x = store.add("x", Tensor::zeros(&[3]));
        let mut tape = Tape::new();
        let xv = tape.param(&store, x);
        assert!(matches!(tape.backward(xv, &mut store), Err(Error::Contract(_))));
    }

    #[test]
    fn frozen_params_get_no_gradient() {
        let mut store = ParamStore::<f64>::new();
        let x = store.add("x", Tensor::scalar(3.0));
        store.set_frozen(x, true);
        let mut tape = Tape::new();
        let xv = tape.param(&store, x);
        let y = tape.scale(xv, 2.0);
        tape.backward(y, &mut store).unwrap();
        assert_eq!(store.get(x).grad.as_ref().unwrap(), &[0.0]);
    }

    #[test]
    fn eval_batchnorm_requires_stats() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::zeros(&[1, 2, 2, 2]));
        let g = tape.constant(Tensor::full(&[2], 1.0));
        let b = tape.constant(Tensor::zeros(&[2]));
        let mut stats = RunningStats::new(2);
        let err = tape
            .batchnorm(x, g, b, Mode::Eval, &mut stats, BatchNormConfig::default())
            .unwrap_err();
        assert!(err.to_string().contains("train the model first"));
    }

    #[test]
    fn train_batchnorm_needs_two_values() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::zeros(&[1, 1, 1, 1]));
        let g = tape.constant(Tensor::full(&[1], 1.0));
        let b = tape.constant(Tensor::zeros(&[1]));
        let mut stats = RunningStats::new(1);
        assert!(tape
            .batchnorm(x, g, b, Mode::Train, &mut stats, BatchNormConfig::default())
            .is_err());
    }

    #[test]
    fn running_stats_follow_momentum() {
        let mut tape = Tape::<f64>::new();
        let g = tape.constant(Tensor::full(&[1], 1.0));
        let b = tape.constant(Tensor::zeros(&[1]));
        let mut stats = RunningStats::new(1);
        let cfg = BatchNormConfig::default();
        let x1 = tape.constant(Tensor::from_f64(&[1, 1, 1, 2], &[0.0, 2.0]).unwrap());
        tape.batchnorm(x1, g, b, Mode::Train, &mut stats, cfg).unwrap();
        assert_eq!(stats.mean, vec![1.0]);
        assert_eq!(stats.var, vec![2.0]);
        let x2 = tape.constant(Tensor::from_f64(&[1, 1, 1, 2], &[4.0, 4.0]).unwrap());
        tape.batchnorm(x2, g, b, Mode::Train, &mut stats, cfg).unwrap();
        assert!((stats.mean[0] - (0.9 * 1.0 + 0.1 * 4.0)).abs() < 1e-12);
        assert!((stats.var[0] - 0.9 * 2.0).abs() < 1e-12);
        assert_eq!(stats.updates, 2);
    }
}
