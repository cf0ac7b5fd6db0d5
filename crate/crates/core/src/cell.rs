//! ConvLSTM feedback module whose gate transforms are stacks of Conv+BN layers.

use crate::error::{Error, Result};
use crate::tensor::tape::{BatchNormConfig, RunningStats};
use crate::tensor::{Float, Mode, ParamId, ParamStore, Rng, Tape, Tensor, Var};

/// Shape of one gate transform: `depth` Conv+BN layers, the first mapping
/// `in_channels -> out_channels` with `stride`, the rest `out -> out` at stride 1.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GateStackSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub depth: usize,
    pub residual: bool,
}

impl GateStackSpec {
    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::config("gate stack channel counts must be positive"));
        }
        if self.kernel == 0 || self.kernel.is_multiple_of(2) {
            return Err(Error::config(format!(
                "gate stack kernel must be a positive odd size, got {}",
                self.kernel
            )));
        }
        if self.stride == 0 {
            return Err(Error::config("gate stack stride must be positive"));
        }
        if self.depth == 0 {
            return Err(Error::config("gate stack depth must be at least 1"));
        }
        Ok(())
    }

    pub fn padding(&self) -> usize {
        self.kernel / 2
    }

    /// Spatial size after the first (strided) layer.
    pub fn output_size(&self, input: usize) -> usize {
        (input + 2 * self.padding() - self.kernel) / self.stride + 1
    }

    /// The hidden-to-hidden counterpart: same depth, `out -> out`, stride 1.
    pub fn recurrent(&self) -> GateStackSpec {
        GateStackSpec {
            in_channels: self.out_channels,
            stride: 1,
            ..*self
        }
    }
}

/// Conv followed by batch normalization, with one set of running statistics
/// per iteration index.
#[derive(Clone, Debug)]
pub struct ConvBn<T: Float> {
    pub weight: ParamId,
    pub bias: ParamId,
    pub gamma: ParamId,
    pub beta: ParamId,
    pub stride: usize,
    pub padding: usize,
    pub stats: Vec<RunningStats<T>>,
}

impl<T: Float> ConvBn<T> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore<T>,
        rng: &mut Rng,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Self {
        let fan_in = cin * kernel * kernel;
        let bound = 1.0 / (fan_in as f64).sqrt();
        let weight = store.add(
            format!("{name}.weight"),
            rng.uniform_tensor(&[cout, cin, kernel, kernel], bound),
        );
        let bias = store.add(format!("{name}.bias"), rng.uniform_tensor(&[cout], bound));
        let gamma = store.add(format!("{name}.bn.gamma"), Tensor::full(&[cout], T::one()));
        let beta = store.add(format!("{name}.bn.beta"), Tensor::zeros(&[cout]));
        ConvBn {
            weight,
            bias,
            gamma,
            beta,
            stride,
            padding,
            stats: Vec::new(),
        }
    }

    pub fn channels(&self, store: &ParamStore<T>) -> usize {
        store.get(self.gamma).numel()
    }

    /// Running statistics for iteration `step`. Eval mode falls back to the
    /// last populated step when `step` lies beyond the trained horizon.
    fn stats_for(&mut self, step: usize, mode: Mode, channels: usize) -> Result<&mut RunningStats<T>> {
        match mode {
            Mode::Train => {
                while self.stats.len() <= step {
                    self.stats.push(RunningStats::new(channels));
                }
                Ok(&mut self.stats[step])
            }
            Mode::Eval => {
                let last = self.stats.iter().rposition(RunningStats::is_populated);
                let idx = match last {
                    Some(last) if step > last || !self.stats[step].is_populated() => last,
                    Some(_) => step,
                    None => {
                        return Err(Error::contract(
                            "batchnorm running statistics are empty; train the model first or load a checkpoint",
                        ))
                    }
                };
                Ok(&mut self.stats[idx])
            }
        }
    }

    pub fn apply(
        &mut self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        x: Var,
        mode: Mode,
        step: usize,
    ) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        let y = tape.conv2d(x, w, b, self.stride, self.padding)?;
        let gamma = tape.param(store, self.gamma);
        let beta = tape.param(store, self.beta);
        let channels = self.channels(store);
        let stats = self.stats_for(step, mode, channels)?;
        tape.batchnorm(y, gamma, beta, mode, stats, BatchNormConfig::default())
    }
}

/// One gate transform `W` of the cell.
#[derive(Clone, Debug)]
pub struct GateStack<T: Float> {
    pub spec: GateStackSpec,
    pub layers: Vec<ConvBn<T>>,
}

impl<T: Float> GateStack<T> {
    pub fn new(spec: GateStackSpec, store: &mut ParamStore<T>, rng: &mut Rng, name: &str) -> Result<Self> {
        spec.validate()?;
        let layers = (0..spec.depth)
            .map(|l| {
                let (cin, stride) = if l == 0 {
                    (spec.in_channels, spec.stride)
                } else {
                    (spec.out_channels, 1)
                };
                ConvBn::new(
                    store,
                    rng,
                    &format!("{name}.{l}"),
                    cin,
                    spec.out_channels,
                    spec.kernel,
                    stride,
                    spec.padding(),
                )
            })
            .collect();
        Ok(GateStack { spec, layers })
    }

    /// Conv→BN repeated `depth` times with ReLU between layers and none after
    /// the last. With `residual`, each layer after the first adds its
    /// (pre-ReLU) input back: `h_l = BN(conv(relu(h_{l-1}))) + h_{l-1}`.
    pub fn apply(
        &mut self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        x: Var,
        mode: Mode,
        step: usize,
    ) -> Result<Var> {
        let cin = tape.shape(x).get(1).copied();
        if tape.shape(x).len() != 4 || cin != Some(self.spec.in_channels) {
            return Err(Error::shape(format!(
                "gate stack expects {} input channels, got input of shape {:?}",
                self.spec.in_channels,
                tape.shape(x)
            )));
        }
        let mut h = self.layers[0].apply(tape, store, x, mode, step)?;
        for layer in &mut self.layers[1..] {
            let a = tape.relu(h);
            let y = layer.apply(tape, store, a, mode, step)?;
            h = if self.spec.residual { tape.add(y, h)? } else { y };
        }
        Ok(h)
    }

    fn last(&self) -> &ConvBn<T> {
        self.layers.last().expect("depth >= 1")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Gate {
    Input,
    Forget,
    Cell,
    Output,
}

impl Gate {
    pub const ALL: [Gate; 4] = [Gate::Input, Gate::Forget, Gate::Cell, Gate::Output];

    fn tag(self) -> &'static str {
        match self {
            Gate::Input => "i",
            Gate::Forget => "f",
            Gate::Cell => "c",
            Gate::Output => "o",
        }
    }
}

/// The eight gate stacks of one ConvLSTM module, shared across iterations.
#[derive(Clone, Debug)]
pub struct ConvLstmParams<T: Float> {
    pub spec: GateStackSpec,
    /// Position of this module in the physical stack, used in error messages.
    pub depth_index: usize,
    /// Input-to-hidden stacks indexed by [`Gate`].
    pub input_stacks: Vec<GateStack<T>>,
    /// Hidden-to-hidden stacks indexed by [`Gate`].
    pub hidden_stacks: Vec<GateStack<T>>,
}

/// Recurrent state of one module.
#[derive(Clone, Copy, Debug)]
pub struct CellState {
    pub h: Var,
    pub c: Var,
}

impl CellState {
    pub fn zeros<T: Float>(tape: &mut Tape<T>, shape: &[usize]) -> CellState {
        CellState {
            h: tape.constant(Tensor::zeros(shape)),
            c: tape.constant(Tensor::zeros(shape)),
        }
    }
}

/// Test hook forcing gate activations to fixed values after the sigmoid.
#[derive(Clone, Copy, Debug, Default)]
pub struct GateOverrides {
    pub input: Option<f64>,
    pub forget: Option<f64>,
    pub output: Option<f64>,
}

/// Intermediate gate activations of one step, exposed for inspection.
#[derive(Clone, Copy, Debug)]
pub struct GateValues {
    pub input: Var,
    pub forget: Var,
    pub candidate: Var,
    pub output: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct StepOutput {
    pub x_out: Var,
    pub state: CellState,
    pub gates: GateValues,
}

impl<T: Float> ConvLstmParams<T> {
    pub fn new(
        spec: GateStackSpec,
        depth_index: usize,
        store: &mut ParamStore<T>,
        rng: &mut Rng,
        name: &str,
    ) -> Result<Self> {
        spec.validate()?;
        let mut input_stacks = Vec::with_capacity(4);
        let mut hidden_stacks = Vec::with_capacity(4);
        for gate in Gate::ALL {
            input_stacks.push(GateStack::new(spec, store, rng, &format!("{name}.wx{}", gate.tag()))?);
            hidden_stacks.push(GateStack::new(
                spec.recurrent(),
                store,
                rng,
                &format!("{name}.wh{}", gate.tag()),
            )?);
        }
        // Conv biases are cancelled by the following BN, so the forget-gate
        // bias lives in the final BN shift of its input stack.
        let forget_beta = input_stacks[1].last().beta;
        store
            .get_mut(forget_beta)
            .data_mut()
            .iter_mut()
            .for_each(|v| *v = T::one());
        Ok(ConvLstmParams {
            spec,
            depth_index,
            input_stacks,
            hidden_stacks,
        })
    }

    pub fn stack(&self, gate: Gate, hidden: bool) -> &GateStack<T> {
        let idx = gate as usize;
        if hidden {
            &self.hidden_stacks[idx]
        } else {
            &self.input_stacks[idx]
        }
    }

    pub fn stack_mut(&mut self, gate: Gate, hidden: bool) -> &mut GateStack<T> {
        let idx = gate as usize;
        if hidden {
            &mut self.hidden_stacks[idx]
        } else {
            &mut self.input_stacks[idx]
        }
    }

    /// `[N, out_channels, H', W']` for an input of spatial size `h x w`.
    pub fn state_shape(&self, n: usize, h: usize, w: usize) -> Vec<usize> {
        vec![
            n,
            self.spec.out_channels,
            self.spec.output_size(h),
            self.spec.output_size(w),
        ]
    }

    #[allow(clippy::too_many_arguments)]
    fn pre_activation(
        &mut self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        gate: Gate,
        x: Var,
        h: Var,
        mode: Mode,
        step: usize,
    ) -> Result<Var> {
        let idx = gate as usize;
        let from_x = self.input_stacks[idx].apply(tape, store, x, mode, step)?;
        let from_h = self.hidden_stacks[idx].apply(tape, store, h, mode, step)?;
        tape.add(from_x, from_h)
    }

    /// One ConvLSTM update:
    ///
    /// ```text
    /// i  = σ(Wxi(X) + Whi(H))      f = σ(Wxf(X) + Whf(H))
    /// C~ = tanh(Wxc(X) + Whc(H))   C' = f∘C + i∘C~
    /// o  = σ(Wxo(X) + Who(H))      H' = o∘tanh(C')     X_out = H'
    /// ```
    ///
    /// `recurrent` is the hidden input of the gates (normally `state.h`).
    /// `step` selects the batch-norm statistics for this iteration.
    #[allow(clippy::too_many_arguments)]
    pub fn step(
        &mut self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        x: Var,
        state: CellState,
        recurrent: Var,
        mode: Mode,
        step: usize,
        overrides: GateOverrides,
    ) -> Result<StepOutput> {
        let xs = tape.shape(x).to_vec();
        if xs.len() != 4 || xs[1] != self.spec.in_channels {
            return Err(Error::shape(format!(
                "module {} expects {} input channels, got input of shape {xs:?}",
                self.depth_index, self.spec.in_channels
            )));
        }
        let expected = self.state_shape(xs[0], xs[2], xs[3]);
        for (what, v) in [("H", state.h), ("C", state.c), ("recurrent H", recurrent)] {
            if tape.shape(v) != expected.as_slice() {
                return Err(Error::shape(format!(
                    "module {}: state {what} has shape {:?}, expected {expected:?}",
                    self.depth_index,
                    tape.shape(v)
                )));
            }
        }

        let forced = |tape: &mut Tape<T>, v: Var, value: Option<f64>| match value {
            Some(val) => tape.constant(Tensor::full(&expected, T::from_f64(val))),
            None => v,
        };

        let zi = self.pre_activation(tape, store, Gate::Input, x, recurrent, mode, step)?;
        let i = tape.sigmoid(zi);
        let i = forced(tape, i, overrides.input);
        let zf = self.pre_activation(tape, store, Gate::Forget, x, recurrent, mode, step)?;
        let f = tape.sigmoid(zf);
        let f = forced(tape, f, overrides.forget);
        let zc = self.pre_activation(tape, store, Gate::Cell, x, recurrent, mode, step)?;
        let candidate = tape.tanh(zc);
        let zo = self.pre_activation(tape, store, Gate::Output, x, recurrent, mode, step)?;
        let o = tape.sigmoid(zo);
        let o = forced(tape, o, overrides.output);

        let keep = tape.hadamard(f, state.c)?;
        let write = tape.hadamard(i, candidate)?;
        let c = tape.add(keep, write)?;
        let squashed = tape.tanh(c);
        let h = tape.hadamard(o, squashed)?;
        Ok(StepOutput {
            x_out: h,
            state: CellState { h, c },
            gates: GateValues {
                input: i,
                forget: f,
                candidate,
                output: o,
            },
        })
    }
}
