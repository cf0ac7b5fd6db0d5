//! Feedback network assembly: a convolutional stem, a stack of ConvLSTM
//! modules unrolled over iterations, and a pooling + fully-connected head
//! applied at every iteration.

pub mod arch;
pub mod feedforward;

use crate::cell::{CellState, ConvBn, ConvLstmParams, GateOverrides, GateStackSpec};
use crate::error::{Error, Result};
use crate::tensor::{Float, Mode, ParamId, ParamStore, Rng, Tape, Tensor, Var};

pub use arch::parse_architecture;
pub use feedforward::{FeedforwardNet, FeedforwardSpec};

/// `C(fi, fo, k, s) -> BR`
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
}

/// `Iterate(fi, fo, k, s, n, t)` without the iteration count, which is
/// shared by the whole network.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ModuleSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    /// Number of Conv+BN layers per gate function (Stack-i).
    pub stack: usize,
}

/// `Avg(k, s)`
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PoolSpec {
    pub kernel: usize,
    pub stride: usize,
}

/// Where the hidden state from `n` iterations back is added.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SkipPlacement {
    /// Added to module `d`'s output before it feeds module `d + 1`.
    Output,
    /// Added to the recurrent input of module `d`'s gates.
    Recurrent,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SkipSpec {
    pub length: usize,
    pub placement: SkipPlacement,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossMode {
    /// Loss attached to every iteration.
    AllIterations,
    /// Only the last iteration carries a loss: recurrence without feedback.
    LastIterationOnly,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeedbackNetSpec {
    pub image_size: usize,
    pub stem: ConvSpec,
    pub modules: Vec<ModuleSpec>,
    pub iterations: usize,
    pub skip: Option<SkipSpec>,
    pub gamma: f64,
    pub pool: PoolSpec,
    pub num_classes: usize,
    /// Identity residual inside the gate stacks.
    pub residual: bool,
    pub loss_mode: LossMode,
}

impl FeedbackNetSpec {
    /// Two Stack-2 modules (16→32, 32→64, both stride 2) over a 3→16 stem,
    /// four iterations, skip length 2, global average pooling.
    pub fn desk_default(image_size: usize, num_classes: usize) -> Self {
        FeedbackNetSpec {
            image_size,
            stem: ConvSpec {
                in_channels: 3,
                out_channels: 16,
                kernel: 3,
                stride: 1,
            },
            modules: vec![
                ModuleSpec {
                    in_channels: 16,
                    out_channels: 32,
                    kernel: 3,
                    stride: 2,
                    stack: 2,
                },
                ModuleSpec {
                    in_channels: 32,
                    out_channels: 64,
                    kernel: 3,
                    stride: 2,
                    stack: 2,
                },
            ],
            iterations: 4,
            skip: Some(SkipSpec {
                length: 2,
                placement: SkipPlacement::Output,
            }),
            gamma: 1.0,
            pool: PoolSpec {
                kernel: image_size.div_ceil(4),
                stride: 1,
            },
            num_classes,
            residual: true,
            loss_mode: LossMode::AllIterations,
        }
    }

    /// Number of Conv+BN layers traversed once, ignoring time.
    pub fn physical_depth(&self) -> usize {
        self.modules.iter().map(|m| m.stack).sum()
    }

    pub fn virtual_depth(&self) -> usize {
        self.physical_depth() * self.iterations
    }

    /// Skip connections only act when `length < iterations`.
    pub fn skip_active(&self) -> bool {
        self.skip.is_some_and(|s| s.length < self.iterations)
    }

    /// Stack length shared by all modules, if uniform.
    pub fn stack_length(&self) -> Option<usize> {
        let first = self.modules.first()?.stack;
        self.modules.iter().all(|m| m.stack == first).then_some(first)
    }

    fn gate_spec(&self, m: &ModuleSpec) -> GateStackSpec {
        GateStackSpec {
            in_channels: m.in_channels,
            out_channels: m.out_channels,
            kernel: m.kernel,
            stride: m.stride,
            depth: m.stack,
            residual: self.residual,
        }
    }

    /// Spatial size and channel count entering the pooling layer.
    pub fn final_feature_map(&self) -> (usize, usize) {
        let mut size = (self.image_size + 2 * (self.stem.kernel / 2) - self.stem.kernel) / self.stem.stride + 1;
        let mut channels = self.stem.out_channels;
        for m in &self.modules {
            size = self.gate_spec(m).output_size(size);
            channels = m.out_channels;
        }
        (size, channels)
    }

    /// Length of the pooled representation fed to the classifier.
    pub fn feature_len(&self) -> usize {
        let (size, channels) = self.final_feature_map();
        let pooled = (size - self.pool.kernel) / self.pool.stride + 1;
        channels * pooled * pooled
    }

    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::config("iteration count must be positive"));
        }
        if self.modules.is_empty() {
            return Err(Error::config("a feedback network needs at least one module"));
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::config(format!("gamma must lie in [0, 1], got {}", self.gamma)));
        }
        if self.num_classes < 2 {
            return Err(Error::config("need at least two classes"));
        }
        if let Some(skip) = self.skip {
            if skip.length == 0 {
                return Err(Error::config(
                    "skip length 0 would add a module's hidden state to itself; use n >= 1",
                ));
            }
        }
        if self.stem.kernel.is_multiple_of(2) || self.stem.stride == 0 {
            return Err(Error::config("stem needs an odd kernel and positive stride"));
        }
        let mut channels = self.stem.out_channels;
        for (d, m) in self.modules.iter().enumerate() {
            if m.in_channels != channels {
                return Err(Error::config(format!(
                    "module {d} expects {} input channels but receives {channels}",
                    m.in_channels
                )));
            }
            self.gate_spec(m).validate()?;
            channels = m.out_channels;
        }
        let (size, _) = self.final_feature_map();
        if self.pool.kernel == 0 || self.pool.stride == 0 || self.pool.kernel > size {
            return Err(Error::config(format!(
                "pooling window {} does not fit the final {size}x{size} feature map",
                self.pool.kernel
            )));
        }
        Ok(())
    }

    /// The recurrent-feedforward ablation of this network: same architecture,
    /// loss taken from the last iteration only.
    pub fn recurrent_feedforward(&self) -> Self {
        FeedbackNetSpec {
            loss_mode: LossMode::LastIterationOnly,
            ..self.clone()
        }
    }

    /// Architecture grammar string accepted by [`parse_architecture`].
    pub fn architecture(&self) -> String {
        let mut s = format!(
            "C({},{},{},{})->BR",
            self.stem.in_channels, self.stem.out_channels, self.stem.kernel, self.stem.stride
        );
        for m in &self.modules {
            s.push_str(&format!(
                "->Iterate({},{},{},{},{},{})",
                m.in_channels, m.out_channels, m.kernel, m.stride, m.stack, self.iterations
            ));
        }
        s.push_str(&format!(
            "->Avg({},{})->FC({},{})",
            self.pool.kernel,
            self.pool.stride,
            self.feature_len(),
            self.num_classes
        ));
        s
    }

    /// Canonical `key = value` rendering; [`FeedbackNetSpec::from_text`]
    /// inverts it and checkpoints fingerprint it.
    pub fn to_text(&self) -> String {
        let skip = match self.skip {
            Some(sk) => format!(
                "{} {}",
                sk.length,
                match sk.placement {
                    SkipPlacement::Output => "output",
                    SkipPlacement::Recurrent => "recurrent",
                }
            ),
            None => "off".to_string(),
        };
        let loss = match self.loss_mode {
            LossMode::AllIterations => "all",
            LossMode::LastIterationOnly => "last",
        };
        format!(
            "arch = {}\nimage_size = {}\nresidual = {}\nskip = {skip}\ngamma = {}\nloss = {loss}\n",
            self.architecture(),
            self.image_size,
            self.residual,
            self.gamma
        )
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut fields = std::collections::BTreeMap::new();
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::config(format!("expected `key = value`, got `{line}`")))?;
            fields.insert(k.trim(), v.trim());
        }
        let get = |k: &str| {
            fields
                .get(k)
                .copied()
                .ok_or_else(|| Error::config(format!("network description lacks `{k}`")))
        };
        let bad = |k: &str, v: &str| Error::config(format!("bad value `{v}` for `{k}`"));
        let image_size = get("image_size")?.parse().map_err(|_| bad("image_size", get("image_size").unwrap_or("")))?;
        let mut spec = parse_architecture(get("arch")?, image_size)?;
        spec.residual = get("residual")?.parse().map_err(|_| bad("residual", get("residual").unwrap_or("")))?;
        spec.gamma = get("gamma")?.parse().map_err(|_| bad("gamma", get("gamma").unwrap_or("")))?;
        let skip = get("skip")?;
        spec.skip = match skip.split_whitespace().collect::<Vec<_>>().as_slice() {
            ["off"] => None,
            [n, placement] => Some(SkipSpec {
                length: n.parse().map_err(|_| bad("skip", skip))?,
                placement: match *placement {
                    "output" => SkipPlacement::Output,
                    "recurrent" => SkipPlacement::Recurrent,
                    _ => return Err(bad("skip", skip)),
                },
            }),
            _ => return Err(bad("skip", skip)),
        };
        spec.loss_mode = match get("loss")? {
            "all" => LossMode::AllIterations,
            "last" => LossMode::LastIterationOnly,
            other => return Err(bad("loss", other)),
        };
        spec.validate()?;
        Ok(spec)
    }
}

/// Per-iteration outputs of one unrolled forward pass. Every list has one
/// entry per iteration.
#[derive(Clone, Debug)]
pub struct IterationTrace {
    pub logits: Vec<Var>,
    pub losses: Vec<Var>,
    /// Pooled, flattened representation entering the classifier.
    pub representations: Vec<Var>,
}

impl IterationTrace {
    pub fn iterations(&self) -> usize {
        self.logits.len()
    }

    pub fn loss_values<T: Float>(&self, tape: &Tape<T>) -> Vec<f64> {
        self.losses.iter().map(|&l| tape.value(l).item().as_f64()).collect()
    }
}

/// `Σ_{t=1..T} γ^t · L_t` on plain numbers.
pub fn total_loss(losses: &[f64], gamma: f64) -> f64 {
    losses
        .iter()
        .enumerate()
        .map(|(t, l)| gamma.powi(t as i32 + 1) * l)
        .sum()
}

/// `Σ_t γ^t · L_t` recorded on the tape. Terms with zero weight are dropped.
pub fn weighted_loss<T: Float>(tape: &mut Tape<T>, losses: &[Var], gamma: f64) -> Result<Var> {
    let mut terms = Vec::with_capacity(losses.len());
    for (t, &l) in losses.iter().enumerate() {
        let w = gamma.powi(t as i32 + 1);
        if w != 0.0 {
            terms.push(if w == 1.0 { l } else { tape.scale(l, T::from_f64(w)) });
        }
    }
    if terms.is_empty() {
        return Ok(tape.constant(Tensor::scalar(T::zero())));
    }
    tape.add_all(&terms)
}

/// Training objective selected by the spec's loss mode.
pub fn training_loss<T: Float>(
    tape: &mut Tape<T>,
    trace: &IterationTrace,
    gamma: f64,
    mode: LossMode,
) -> Result<Var> {
    match mode {
        LossMode::AllIterations => weighted_loss(tape, &trace.losses, gamma),
        LossMode::LastIterationOnly => Ok(*trace.losses.last().expect("at least one iteration")),
    }
}

#[derive(Clone, Debug)]
pub struct FeedbackNet<T: Float> {
    pub spec: FeedbackNetSpec,
    pub params: ParamStore<T>,
    pub stem: ConvBn<T>,
    pub modules: Vec<ConvLstmParams<T>>,
    pub fc_weight: ParamId,
    pub fc_bias: ParamId,
}

impl<T: Float> FeedbackNet<T> {
    pub fn new(spec: FeedbackNetSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = Rng::new(seed);
        let mut params = ParamStore::new();
        let stem = ConvBn::new(
            &mut params,
            &mut rng,
            "stem",
            spec.stem.in_channels,
            spec.stem.out_channels,
            spec.stem.kernel,
            spec.stem.stride,
            spec.stem.kernel / 2,
        );
        let modules = spec
            .modules
            .iter()
            .enumerate()
            .map(|(d, m)| {
                ConvLstmParams::new(spec.gate_spec(m), d, &mut params, &mut rng, &format!("module{d}"))
            })
            .collect::<Result<Vec<_>>>()?;
        let features = spec.feature_len();
        let bound = 1.0 / (features as f64).sqrt();
        let fc_weight = params.add("head.fc.weight", rng.uniform_tensor(&[features, spec.num_classes], bound));
        let fc_bias = params.add("head.fc.bias", rng.uniform_tensor(&[spec.num_classes], bound));
        Ok(FeedbackNet {
            spec,
            params,
            stem,
            modules,
            fc_weight,
            fc_bias,
        })
    }

    /// Unrolls the network over all iterations, recording per-iteration
    /// logits, cross-entropy losses against `targets`, and representations.
    ///
    /// The image passes through the stem once; its output is re-injected at
    /// every iteration. Module `d` at iteration `t` sees the (skip-augmented)
    /// output of module `d - 1` at `t` and its own state from `t - 1`.
    pub fn unroll_forward(
        &mut self,
        tape: &mut Tape<T>,
        images: Var,
        targets: &[usize],
        mode: Mode,
    ) -> Result<IterationTrace> {
        let shape = tape.shape(images).to_vec();
        if shape.len() != 4
            || shape[1] != self.spec.stem.in_channels
            || shape[2] != self.spec.image_size
            || shape[3] != self.spec.image_size
        {
            return Err(Error::shape(format!(
                "expected images [N, {}, {s}, {s}], got {shape:?}",
                self.spec.stem.in_channels,
                s = self.spec.image_size
            )));
        }
        if targets.len() != shape[0] {
            return Err(Error::shape(format!(
                "{} targets for a batch of {}",
                targets.len(),
                shape[0]
            )));
        }

        let stem = self.stem.apply(tape, &self.params, images, mode, 0)?;
        let stem = tape.relu(stem);

        let n = shape[0];
        let skip = self.spec.skip.filter(|_| self.spec.skip_active());
        let mut states: Vec<CellState> = Vec::with_capacity(self.modules.len());
        let mut size = tape.shape(stem)[2];
        for m in &self.modules {
            let s = m.state_shape(n, size, size);
            size = s[2];
            states.push(CellState::zeros(tape, &s));
        }
        // hidden[d][t-1] = H^d_t
        let mut hidden: Vec<Vec<Var>> = vec![Vec::with_capacity(self.spec.iterations); self.modules.len()];

        let mut trace = IterationTrace {
            logits: Vec::with_capacity(self.spec.iterations),
            losses: Vec::with_capacity(self.spec.iterations),
            representations: Vec::with_capacity(self.spec.iterations),
        };
        for t in 1..=self.spec.iterations {
            let mut x = stem;
            for (d, module) in self.modules.iter_mut().enumerate() {
                let earlier = skip
                    .filter(|sk| t > sk.length)
                    .map(|sk| (sk.placement, hidden[d][t - sk.length - 1]));
                let recurrent = match earlier {
                    Some((SkipPlacement::Recurrent, h_old)) => tape.add(states[d].h, h_old)?,
                    _ => states[d].h,
                };
                let out = module.step(
                    tape,
                    &self.params,
                    x,
                    states[d],
                    recurrent,
                    mode,
                    t - 1,
                    GateOverrides::default(),
                )?;
                states[d] = out.state;
                hidden[d].push(out.state.h);
                x = match earlier {
                    Some((SkipPlacement::Output, h_old)) => tape.add(out.x_out, h_old)?,
                    _ => out.x_out,
                };
            }
            let pooled = tape.avg_pool(x, self.spec.pool.kernel, self.spec.pool.stride)?;
            let repr = tape.flatten(pooled)?;
            let w = tape.param(&self.params, self.fc_weight);
            let b = tape.param(&self.params, self.fc_bias);
            let logits = tape.fully_connected(repr, w, b)?;
            let loss = tape.softmax_cross_entropy(logits, targets)?;
            let value = tape.value(loss).item().as_f64();
            if !value.is_finite() {
                return Err(Error::Numeric {
                    iteration: t,
                    value,
                });
            }
            trace.logits.push(logits);
            trace.losses.push(loss);
            trace.representations.push(repr);
        }
        Ok(trace)
    }

    /// Number of scalar parameters; independent of the iteration count.
    pub fn parameter_count(&self) -> usize {
        self.params.numel()
    }

    /// Copy of this network in another element type, sharing nothing.
    pub fn cast<U: Float>(&self) -> FeedbackNet<U> {
        let stats = |layer: &ConvBn<T>| ConvBn {
            weight: layer.weight,
            bias: layer.bias,
            gamma: layer.gamma,
            beta: layer.beta,
            stride: layer.stride,
            padding: layer.padding,
            stats: layer
                .stats
                .iter()
                .map(|s| crate::tensor::tape::RunningStats {
                    mean: s.mean.iter().map(|v| U::from_f64(v.as_f64())).collect(),
                    var: s.var.iter().map(|v| U::from_f64(v.as_f64())).collect(),
                    updates: s.updates,
                })
                .collect(),
        };
        let stack = |g: &crate::cell::GateStack<T>| crate::cell::GateStack {
            spec: g.spec,
            layers: g.layers.iter().map(stats).collect(),
        };
        FeedbackNet {
            spec: self.spec.clone(),
            params: self.params.cast(),
            stem: stats(&self.stem),
            modules: self
                .modules
                .iter()
                .map(|m| ConvLstmParams {
                    spec: m.spec,
                    depth_index: m.depth_index,
                    input_stacks: m.input_stacks.iter().map(stack).collect(),
                    hidden_stacks: m.hidden_stacks.iter().map(stack).collect(),
                })
                .collect(),
            fc_weight: self.fc_weight,
            fc_bias: self.fc_bias,
        }
    }

    /// Every Conv+BN layer in a fixed order, for persistence.
    pub fn conv_layers(&self) -> Vec<(String, &ConvBn<T>)> {
        let mut out = vec![("stem".to_string(), &self.stem)];
        for (d, m) in self.modules.iter().enumerate() {
            for (kind, stacks) in [("wx", &m.input_stacks), ("wh", &m.hidden_stacks)] {
                for (g, stack) in stacks.iter().enumerate() {
                    for (l, layer) in stack.layers.iter().enumerate() {
                        out.push((format!("module{d}.{kind}{g}.{l}"), layer));
                    }
                }
            }
        }
        out
    }

    pub fn conv_layers_mut(&mut self) -> Vec<&mut ConvBn<T>> {
        let mut out = vec![&mut self.stem];
        for m in &mut self.modules {
            for stack in m.input_stacks.iter_mut().chain(m.hidden_stacks.iter_mut()) {
                out.extend(stack.layers.iter_mut());
            }
        }
        out
    }
}
