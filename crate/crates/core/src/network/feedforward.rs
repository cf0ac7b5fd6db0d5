//! Feedforward baselines (plain or residual Conv+BN+ReLU stacks) with
//! optional auxiliary pooling→FC heads at intermediate depths.

use std::collections::BTreeMap;

use crate::cell::ConvBn;
use crate::error::{Error, Result};
use crate::tensor::{Float, Mode, ParamId, ParamStore, Rng, Sgd, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct FeedforwardSpec {
    pub image_size: usize,
    pub stem_channels: usize,
    /// Channel widths of the first and second half of the stack.
    pub widths: [usize; 2],
    /// Physical depth: number of Conv+BN+ReLU layers after the stem.
    pub depth: usize,
    pub residual: bool,
    /// 1-based depths carrying an auxiliary head.
    pub aux_head_depths: Vec<usize>,
    pub num_classes: usize,
}

impl FeedforwardSpec {
    pub fn new(image_size: usize, depth: usize, residual: bool, num_classes: usize) -> Self {
        FeedforwardSpec {
            image_size,
            stem_channels: 16,
            widths: [32, 64],
            depth,
            residual,
            aux_head_depths: Vec::new(),
            num_classes,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth < 2 || !self.depth.is_multiple_of(2) {
            return Err(Error::config(format!(
                "feedforward depth must be even and at least 2, got {}",
                self.depth
            )));
        }
        if let Some(&bad) = self.aux_head_depths.iter().find(|&&d| d == 0 || d > self.depth) {
            return Err(Error::config(format!(
                "aux head depth {bad} outside 1..={}",
                self.depth
            )));
        }
        if self.image_size < 4 {
            return Err(Error::config("image too small for two stride-2 stages"));
        }
        Ok(())
    }

    /// `(in, out, stride)` of layer `l` (1-based).
    fn layer(&self, l: usize) -> (usize, usize, usize) {
        let half = self.depth / 2;
        match l {
            1 => (self.stem_channels, self.widths[0], 2),
            l if l <= half => (self.widths[0], self.widths[0], 1),
            l if l == half + 1 => (self.widths[0], self.widths[1], 2),
            _ => (self.widths[1], self.widths[1], 1),
        }
    }

    pub fn channels_at(&self, depth: usize) -> usize {
        self.layer(depth).1
    }
}

#[derive(Clone, Debug)]
pub struct Head {
    pub weight: ParamId,
    pub bias: ParamId,
}

#[derive(Clone, Debug)]
pub struct FeedforwardNet<T: Float> {
    pub spec: FeedforwardSpec,
    pub params: ParamStore<T>,
    pub stem: ConvBn<T>,
    pub layers: Vec<ConvBn<T>>,
    pub endpoint: Head,
    pub aux_heads: BTreeMap<usize, Head>,
    /// Optimizer steps taken on the backbone.
    pub trained_steps: u64,
}

/// Pooled features at every depth plus the endpoint logits.
pub struct FeedforwardOutputs {
    pub features: Vec<Var>,
    pub endpoint: Var,
}

fn add_head<T: Float>(store: &mut ParamStore<T>, rng: &mut Rng, name: &str, fin: usize, k: usize) -> Head {
    let bound = 1.0 / (fin as f64).sqrt();
    Head {
        weight: store.add(format!("{name}.weight"), rng.uniform_tensor(&[fin, k], bound)),
        bias: store.add(format!("{name}.bias"), rng.uniform_tensor(&[k], bound)),
    }
}

impl<T: Float> FeedforwardNet<T> {
    pub fn new(spec: FeedforwardSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = Rng::new(seed);
        let mut params = ParamStore::new();
        let stem = ConvBn::new(&mut params, &mut rng, "stem", 3, spec.stem_channels, 3, 1, 1);
        let layers = (1..=spec.depth)
            .map(|l| {
                let (cin, cout, stride) = spec.layer(l);
                ConvBn::new(&mut params, &mut rng, &format!("layer{l}"), cin, cout, 3, stride, 1)
            })
            .collect();
        let endpoint = add_head(
            &mut params,
            &mut rng,
            "head.endpoint",
            spec.channels_at(spec.depth),
            spec.num_classes,
        );
        let aux_heads = spec
            .aux_head_depths
            .iter()
            .map(|&d| {
                let head = add_head(
                    &mut params,
                    &mut rng,
                    &format!("head.aux{d}"),
                    spec.channels_at(d),
                    spec.num_classes,
                );
                (d, head)
            })
            .collect();
        Ok(FeedforwardNet {
            spec,
            params,
            stem,
            layers,
            endpoint,
            aux_heads,
            trained_steps: 0,
        })
    }

    fn head_params(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.aux_heads.values().flat_map(|h| [h.weight, h.bias])
    }

    /// Backbone pass. Features at depth `d` are the globally pooled outputs of
    /// layer `d`; the endpoint head reads the last of them.
    pub fn forward(&mut self, tape: &mut Tape<T>, images: Var, mode: Mode) -> Result<FeedforwardOutputs> {
        let s = tape.shape(images).to_vec();
        if s.len() != 4 || s[1] != 3 || s[2] != self.spec.image_size || s[3] != self.spec.image_size {
            return Err(Error::shape(format!(
                "expected images [N, 3, {n}, {n}], got {s:?}",
                n = self.spec.image_size
            )));
        }
        let h = self.stem.apply(tape, &self.params, images, mode, 0)?;
        let mut x = tape.relu(h);
        let mut features = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter_mut().enumerate() {
            let (cin, cout, stride) = self.spec.layer(i + 1);
            let y = layer.apply(tape, &self.params, x, mode, 0)?;
            let y = if self.spec.residual && cin == cout && stride == 1 {
                tape.add(y, x)?
            } else {
                y
            };
            x = tape.relu(y);
            let size = tape.shape(x)[2];
            let pooled = tape.avg_pool(x, size, 1)?;
            features.push(tape.flatten(pooled)?);
        }
        let last = *features.last().expect("depth >= 2");
        let endpoint = self.apply_head(tape, &self.endpoint.clone(), last)?;
        Ok(FeedforwardOutputs { features, endpoint })
    }

    fn apply_head(&self, tape: &mut Tape<T>, head: &Head, feature: Var) -> Result<Var> {
        let w = tape.param(&self.params, head.weight);
        let b = tape.param(&self.params, head.bias);
        tape.fully_connected(feature, w, b)
    }

    /// Logits of every head: the endpoint under key `depth`, followed by each
    /// auxiliary head keyed by its depth.
    pub fn forward_heads(&mut self, tape: &mut Tape<T>, images: Var, mode: Mode) -> Result<Vec<(usize, Var)>> {
        let out = self.forward(tape, images, mode)?;
        let mut heads = vec![(self.spec.depth, out.endpoint)];
        for (&d, head) in &self.aux_heads {
            heads.push((d, self.apply_head(tape, head, out.features[d - 1])?));
        }
        Ok(heads)
    }

    /// Endpoint training: backbone and endpoint head, aux heads excluded.
    pub fn train_step(
        &mut self,
        images: &Tensor<T>,
        labels: &[usize],
        opt: &mut Sgd<T>,
        lr: f64,
    ) -> Result<f64> {
        let aux: Vec<ParamId> = self.head_params().collect();
        for &id in &aux {
            self.params.set_frozen(id, true);
        }
        let mut tape = Tape::new();
        let x = tape.constant(images.clone());
        let out = self.forward(&mut tape, x, Mode::Train)?;
        let loss = tape.softmax_cross_entropy(out.endpoint, labels)?;
        let value = tape.value(loss).item().as_f64();
        if !value.is_finite() {
            return Err(Error::Numeric {
                iteration: 1,
                value,
            });
        }
        self.params.zero_grad();
        tape.backward(loss, &mut self.params)?;
        opt.step(&mut self.params, lr);
        for &id in &aux {
            self.params.set_frozen(id, false);
        }
        self.trained_steps += 1;
        Ok(value)
    }

    /// Trains the auxiliary heads, shallowest first, on features of the frozen
    /// backbone (eval mode, so batch-norm statistics stay fixed as well).
    pub fn train_aux_heads(
        &mut self,
        images: &Tensor<T>,
        labels: &[usize],
        cfg: &HeadTraining,
    ) -> Result<()> {
        if self.trained_steps == 0 {
            return Err(Error::contract("auxiliary heads need a trained backbone"));
        }
        let head_ids: Vec<ParamId> = self.head_params().collect();
        self.params.freeze_all(true);

        let n = images.shape()[0];
        let mut per_depth: Vec<Vec<T>> = vec![Vec::new(); self.spec.depth];
        for start in (0..n).step_by(cfg.batch_size) {
            let rows: Vec<usize> = (start..(start + cfg.batch_size).min(n)).collect();
            let mut tape = Tape::new();
            let x = tape.constant(images.gather_rows(&rows)?);
            let out = self.forward(&mut tape, x, Mode::Eval)?;
            for (d, f) in out.features.iter().enumerate() {
                per_depth[d].extend_from_slice(tape.value(*f).data());
            }
        }

        let depths: Vec<usize> = self.aux_heads.keys().copied().collect();
        let mut rng = Rng::new(cfg.seed);
        for d in depths {
            let head = self.aux_heads[&d].clone();
            for id in [head.weight, head.bias] {
                self.params.set_frozen(id, false);
            }
            let width = self.spec.channels_at(d);
            let feats = Tensor::new(&[n, width], per_depth[d - 1].clone())?;
            let mut opt = Sgd::new(cfg.momentum, 0.0);
            let mut order: Vec<usize> = (0..n).collect();
            for _ in 0..cfg.epochs {
                rng.shuffle(&mut order);
                for chunk in order.chunks(cfg.batch_size) {
                    let batch_labels: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
                    let mut tape = Tape::new();
                    let f = tape.constant(feats.gather_rows(chunk)?);
                    let logits = self.apply_head(&mut tape, &head, f)?;
                    let loss = tape.softmax_cross_entropy(logits, &batch_labels)?;
                    self.params.zero_grad();
                    tape.backward(loss, &mut self.params)?;
                    opt.step(&mut self.params, cfg.lr);
                }
            }
            for id in [head.weight, head.bias] {
                self.params.set_frozen(id, true);
            }
        }
        self.params.freeze_all(false);
        debug_assert!(head_ids.iter().all(|&id| !self.params.is_frozen(id)));
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct HeadTraining {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub seed: u64,
}

impl Default for HeadTraining {
    fn default() -> Self {
        HeadTraining {
            epochs: 30,
            batch_size: 64,
            lr: 0.1,
            momentum: 0.9,
            seed: 0,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec() -> FeedforwardSpec {
        FeedforwardSpec {
            stem_channels: 4,
            widths: [4, 8],
            aux_head_depths: vec![1, 3],
            ..FeedforwardSpec::new(8, 4, true, 3)
        }
    }

    #[test]
    fn validates_heads_and_depth() {
        assert!(FeedforwardSpec::new(8, 3, false, 3).validate().is_err());
        let bad = FeedforwardSpec {
            aux_head_depths: vec![5],
            ..spec()
        };
        assert!(bad.validate().is_err());
        assert!(spec().validate().is_ok());
    }

    #[test]
    fn heads_emit_logits() {
        let mut net = FeedforwardNet::<f32>::new(spec(), 0).unwrap();
        let mut tape = Tape::new();
        let mut rng = Rng::new(1);
        let x = tape.constant(rng.uniform_tensor(&[2, 3, 8, 8], 1.0));
        let heads = net.forward_heads(&mut tape, x, Mode::Train).unwrap();
        assert_eq!(heads.iter().map(|h| h.0).collect::<Vec<_>>(), vec![4, 1, 3]);
        for (_, l) in heads {
            assert_eq!(tape.shape(l), &[2, 3]);
        }
    }

    #[test]
    fn aux_heads_need_trained_backbone() {
        let mut net = FeedforwardNet::<f32>::new(spec(), 0).unwrap();
        let x = Tensor::zeros(&[2, 3, 8, 8]);
        let err = net.train_aux_heads(&x, &[0, 1], &HeadTraining::default()).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }

    #[test]
    fn frozen_backbone_is_bit_identical() {
        let mut net = FeedforwardNet::<f32>::new(spec(), 0).unwrap();
        let mut rng = Rng::new(2);
        let x = rng.uniform_tensor(&[8, 3, 8, 8], 1.0);
        let labels = [0, 1, 2, 0, 1, 2, 0, 1];
        let mut opt = Sgd::new(0.9, 1e-4);
        net.train_step(&x, &labels, &mut opt, 0.05).unwrap();

        let snapshot = |net: &FeedforwardNet<f32>| {
            net.params
                .iter()
                .filter(|(name, _)| !name.starts_with("head.aux"))
                .map(|(_, t)| t.data().to_vec())
                .collect::<Vec<_>>()
        };
        let before = snapshot(&net);
        let head_before = net.params.get(net.aux_heads[&1].weight).data().to_vec();
        let cfg = HeadTraining {
            epochs: 2,
            batch_size: 4,
            ..HeadTraining::default()
        };
        net.train_aux_heads(&x, &labels, &cfg).unwrap();
        assert_eq!(before, snapshot(&net));
        assert_ne!(head_before, net.params.get(net.aux_heads[&1].weight).data());
    }
}
