//! Minibatch SGD over unrolled feedback networks.

use std::path::Path;

use crate::curriculum::episodic_loss;
use crate::error::{Error, Result};
use crate::harness::checkpoint::TrainState;
use crate::harness::config::{BatchOrder, DataSource, TrainConfig};
use crate::harness::dataset::{generate_dataset, load_any, Dataset};
use crate::harness::metrics::{evaluate, MetricsReport};
use crate::network::{training_loss, FeedbackNet, FeedbackNetSpec};
use crate::taxonomy::Taxonomy;
use crate::tensor::{Mode, Rng, Sgd, Tape, Tensor};

/// Train split, test split and their shared taxonomy.
pub struct Data {
    pub train: Dataset,
    pub test: Dataset,
    pub taxonomy: Taxonomy,
}

impl Data {
    pub fn load(source: &DataSource) -> Result<Self> {
        match source {
            DataSource::Synthetic(spec) => {
                let (train, test, taxonomy) = generate_dataset(spec)?;
                Ok(Data { train, test, taxonomy })
            }
            DataSource::Files { train, test } => {
                let (train, taxonomy) = load_any(train)?;
                let (test, test_tax) = load_any(test)?;
                if test_tax != taxonomy {
                    return Err(Error::Taxonomy("train and test files disagree on the taxonomy".into()));
                }
                Ok(Data { train, test, taxonomy })
            }
        }
    }

    pub fn network_spec(&self, config: &TrainConfig) -> Result<FeedbackNetSpec> {
        if self.train.height != self.train.width {
            return Err(Error::config("only square images are supported"));
        }
        config
            .net
            .build(self.train.height, self.taxonomy.fine_count(), config.loss_mode())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    /// 1-based index of the completed epoch.
    pub epoch: usize,
    pub lr: f64,
    /// Mean training objective over the epoch's minibatches.
    pub train_loss: f64,
    pub metrics: Option<MetricsReport>,
}

pub struct TrainOutcome {
    pub state: TrainState,
    pub history: Vec<EpochRecord>,
    /// Objective of every optimization step, in order.
    pub step_losses: Vec<f64>,
}

impl TrainOutcome {
    pub fn final_train_loss(&self) -> f64 {
        self.history.last().map_or(f64::NAN, |r| r.train_loss)
    }

    /// Metrics of the last evaluated epoch.
    pub fn final_metrics(&self) -> Option<&MetricsReport> {
        self.history.iter().rev().find_map(|r| r.metrics.as_ref())
    }
}

/// Fresh training state for `config`; the network is initialised from the
/// config seed.
pub fn initial_state(config: &TrainConfig, spec: FeedbackNetSpec) -> Result<TrainState> {
    let mut root = Rng::new(config.seed);
    let net_seed = root.fork(11).seed();
    Ok(TrainState {
        net: FeedbackNet::new(spec, net_seed)?,
        optimizer: Sgd::new(config.momentum, config.weight_decay),
        epoch: 0,
        rng: root.fork(12),
    })
}

/// Random horizontal flips and zero-padded random crops, applied in place.
fn augment(images: &mut Tensor<f32>, flip: bool, pad: usize, rng: &mut Rng) {
    let s = images.shape().to_vec();
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    let data = images.data_mut();
    let mut buf = vec![0f32; c * h * w];
    for i in 0..n {
        let img = &mut data[i * c * h * w..(i + 1) * c * h * w];
        let mirror = flip && rng.below(2) == 1;
        let (dy, dx) = if pad > 0 {
            (rng.below(2 * pad + 1) as isize - pad as isize, rng.below(2 * pad + 1) as isize - pad as isize)
        } else {
            (0, 0)
        };
        if !mirror && dy == 0 && dx == 0 {
            continue;
        }
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    let sx = if mirror { w - 1 - x } else { x } as isize + dx;
                    let sy = y as isize + dy;
                    buf[(ch * h + y) * w + x] = if (0..h as isize).contains(&sy) && (0..w as isize).contains(&sx) {
                        img[(ch * h + sy as usize) * w + sx as usize]
                    } else {
                        0.0
                    };
                }
            }
        }
        img.copy_from_slice(&buf);
    }
}

fn epoch_order(data: &Dataset, order: BatchOrder, rng: &mut Rng) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..data.len()).collect();
    rng.shuffle(&mut idx);
    if order == BatchOrder::CoarseSorted {
        idx.sort_by_key(|&i| data.coarse[i]);
    }
    idx
}

/// One optimization step; returns the objective value.
fn step(
    state: &mut TrainState,
    config: &TrainConfig,
    data: &Data,
    batch: &[usize],
    lr: f64,
) -> Result<f64> {
    let (mut images, fine, coarse) = data.train.batch::<f32>(batch)?;
    if config.flip || config.crop_pad > 0 {
        augment(&mut images, config.flip, config.crop_pad, &mut state.rng);
    }
    let net = &mut state.net;
    let mut tape = Tape::new();
    let x = tape.constant(images);
    let trace = net.unroll_forward(&mut tape, x, &fine, Mode::Train)?;
    let objective = match config.schedule()? {
        Some(schedule) => episodic_loss(&mut tape, &trace, &coarse, &data.taxonomy, &schedule, net.spec.gamma)?,
        None => training_loss(&mut tape, &trace, net.spec.gamma, net.spec.loss_mode)?,
    };
    let value = f64::from(tape.value(objective).item());
    if !value.is_finite() {
        return Err(Error::Numeric {
            iteration: net.spec.iterations,
            value,
        });
    }
    tape.backward(objective, &mut net.params)?;
    state.optimizer.step(&mut net.params, lr);
    net.params.zero_grad();
    Ok(value)
}

/// Trains from `state` (fresh or restored) up to `config.epochs`, calling
/// `observe` after every epoch. On a non-finite loss the last good state is
/// written to `<out_dir>/last_good.fbnc` when an output directory is set.
pub fn train_from(
    mut state: TrainState,
    config: &TrainConfig,
    data: &Data,
    mut observe: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    config.validate()?;
    data.train.check_taxonomy(&data.taxonomy)?;
    if let Some(dir) = &config.out_dir {
        std::fs::create_dir_all(dir)?;
    }
    let mut history = Vec::new();
    let mut step_losses = Vec::new();
    while state.epoch < config.epochs {
        let epoch = state.epoch;
        let lr = config.lr_at(epoch);
        let order = epoch_order(&data.train, config.order, &mut state.rng);
        let mut sum = 0.0;
        let mut steps = 0usize;
        for batch in order.chunks(config.batch_size) {
            let stats_before: Vec<_> = state.net.conv_layers().iter().map(|(_, l)| l.stats.clone()).collect();
            match step(&mut state, config, data, batch, lr) {
                Ok(v) => {
                    sum += v;
                    steps += 1;
                    step_losses.push(v);
                }
                Err(e @ Error::Numeric { .. }) => {
                    for (layer, stats) in state.net.conv_layers_mut().into_iter().zip(stats_before) {
                        layer.stats = stats;
                    }
                    if let Some(dir) = &config.out_dir {
                        state.to_checkpoint().save(&dir.join("last_good.fbnc"))?;
                    }
                    return Err(e);
                }
                Err(e) => return Err(e),
            }
        }
        state.epoch += 1;
        let last = state.epoch == config.epochs;
        let metrics = if last || (config.eval_every > 0 && state.epoch.is_multiple_of(config.eval_every)) {
            Some(evaluate(&mut state.net, &data.test, &data.taxonomy)?)
        } else {
            None
        };
        let record = EpochRecord {
            epoch: state.epoch,
            lr,
            train_loss: sum / steps.max(1) as f64,
            metrics,
        };
        observe(&record);
        history.push(record);
        if let Some(dir) = &config.out_dir {
            if config.checkpoint_every > 0 && state.epoch.is_multiple_of(config.checkpoint_every) {
                save(&state, &dir.join(format!("epoch{:03}.fbnc", state.epoch)))?;
            }
            if last {
                save(&state, &dir.join("final.fbnc"))?;
            }
        }
    }
    let losses: Vec<f64> = history.iter().map(|r| r.train_loss).collect();
    for r in &mut history {
        if let Some(m) = &mut r.metrics {
            m.loss_history = losses[..r.epoch.min(losses.len())].to_vec();
        }
    }
    Ok(TrainOutcome {
        state,
        history,
        step_losses,
    })
}

fn save(state: &TrainState, path: &Path) -> Result<()> {
    state.to_checkpoint().save(path)
}

/// Builds the data and a fresh network from `config`, then trains.
pub fn train(config: &TrainConfig, observe: impl FnMut(&EpochRecord)) -> Result<(TrainOutcome, Data)> {
    let data = Data::load(&config.data)?;
    let state = initial_state(config, data.network_spec(config)?)?;
    let outcome = train_from(state, config, &data, observe)?;
    Ok((outcome, data))
}
