//! `key = value` training configuration. Keys are namespaced (`net.*`,
//! `train.*`, `curriculum.*`, `ablation.*`, `data.*`); an unknown key is an
//! error rather than a silent no-op.

use std::path::PathBuf;

use crate::curriculum::{CurriculumSchedule, Direction};
use crate::error::{Error, Result};
use crate::harness::dataset::SyntheticSpec;
use crate::network::{parse_architecture, FeedbackNetSpec, LossMode, ModuleSpec, SkipPlacement, SkipSpec};

#[derive(Clone, Debug, PartialEq)]
pub enum DataSource {
    Synthetic(SyntheticSpec),
    /// `FBDS` or CIFAR binary files.
    Files { train: PathBuf, test: PathBuf },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BatchOrder {
    Shuffled,
    /// Shuffled, then stably sorted by coarse label: the data-ordering
    /// curriculum used by conventional curriculum training.
    CoarseSorted,
}

/// Network settings before the dataset fixes image size and class count.
#[derive(Clone, Debug, PartialEq)]
pub struct NetConfig {
    pub arch: Option<String>,
    pub width: usize,
    pub modules: usize,
    pub iterations: usize,
    pub stack: usize,
    pub skip_n: usize,
    pub skip_placement: SkipPlacement,
    pub gamma: f64,
    pub residual: bool,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            arch: None,
            width: 16,
            modules: 2,
            iterations: 4,
            stack: 2,
            skip_n: 2,
            skip_placement: SkipPlacement::Output,
            gamma: 1.0,
            residual: true,
        }
    }
}

impl NetConfig {
    /// Full network spec for images of `image_size` with `classes` labels.
    ///
    /// Without `net.arch` the net is a `width`-channel stem followed by
    /// `modules` stride-2 modules doubling the width each time, then global
    /// average pooling.
    pub fn build(&self, image_size: usize, classes: usize, loss_mode: LossMode) -> Result<FeedbackNetSpec> {
        let mut spec = match &self.arch {
            Some(text) => parse_architecture(text, image_size)?,
            None => {
                let mut spec = FeedbackNetSpec::desk_default(image_size, classes);
                spec.stem.out_channels = self.width;
                spec.modules = (0..self.modules)
                    .map(|d| ModuleSpec {
                        in_channels: self.width << d,
                        out_channels: self.width << (d + 1),
                        kernel: 3,
                        stride: 2,
                        stack: self.stack,
                    })
                    .collect();
                spec.iterations = self.iterations;
                let (size, _) = spec.final_feature_map();
                spec.pool.kernel = size;
                spec
            }
        };
        if spec.num_classes != classes {
            return Err(Error::config(format!(
                "architecture classifies {} classes but the data has {classes}",
                spec.num_classes
            )));
        }
        spec.skip = (self.skip_n > 0).then_some(SkipSpec {
            length: self.skip_n,
            placement: self.skip_placement,
        });
        spec.gamma = self.gamma;
        spec.residual = self.residual;
        spec.loss_mode = loss_mode;
        spec.validate()?;
        Ok(spec)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub net: NetConfig,
    pub data: DataSource,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Epochs (0-based) at whose start the learning rate is multiplied by
    /// `lr_decay_factor`. Defaults to 50% and 75% of training.
    pub lr_decay_epochs: Option<Vec<usize>>,
    pub lr_decay_factor: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub curriculum: Option<(usize, Direction)>,
    pub last_loss_only: bool,
    pub order: BatchOrder,
    pub flip: bool,
    pub crop_pad: usize,
    /// Evaluate on the test split every this many epochs (0: only at the end).
    pub eval_every: usize,
    pub checkpoint_every: usize,
    pub out_dir: Option<PathBuf>,
}

impl TrainConfig {
    /// Defaults with an explicit seed; there is no implicit entropy source.
    pub fn with_seed(seed: u64) -> Self {
        TrainConfig {
            net: NetConfig::default(),
            data: DataSource::Synthetic(SyntheticSpec::default()),
            epochs: 30,
            batch_size: 32,
            lr: 0.1,
            lr_decay_epochs: None,
            lr_decay_factor: 0.1,
            momentum: 0.9,
            weight_decay: 1e-4,
            seed,
            curriculum: None,
            last_loss_only: false,
            order: BatchOrder::Shuffled,
            flip: false,
            crop_pad: 0,
            eval_every: 1,
            checkpoint_every: 0,
            out_dir: None,
        }
    }

    pub fn loss_mode(&self) -> LossMode {
        if self.last_loss_only {
            LossMode::LastIterationOnly
        } else {
            LossMode::AllIterations
        }
    }

    pub fn decay_epochs(&self) -> Vec<usize> {
        self.lr_decay_epochs
            .clone()
            .unwrap_or_else(|| vec![self.epochs / 2, self.epochs * 3 / 4])
    }

    /// Learning rate in effect during `epoch` (0-based).
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let decays = self.decay_epochs().iter().filter(|&&e| e > 0 && e <= epoch).count();
        self.lr * self.lr_decay_factor.powi(decays as i32)
    }

    pub fn schedule(&self) -> Result<Option<CurriculumSchedule>> {
        self.curriculum
            .map(|(k, dir)| CurriculumSchedule::new(k, dir, self.net.iterations_hint()))
            .transpose()
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::config("epochs and batch size must be positive"));
        }
        if !(self.lr >= 0.0) || !(self.momentum >= 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::config("learning rate, momentum and weight decay must be non-negative"));
        }
        if self.curriculum.is_some() && self.last_loss_only {
            return Err(Error::config(
                "curriculum training needs a loss at every iteration; disable ablation.last_loss_only",
            ));
        }
        self.schedule()?;
        if let DataSource::Synthetic(spec) = &self.data {
            spec.validate()?;
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut seed = None;
        let mut cfg = TrainConfig::with_seed(0);
        let mut synth = SyntheticSpec::default();
        let mut synth_seed = None;
        let (mut train_path, mut test_path) = (None, None);
        let mut curriculum_enabled = false;
        let (mut curriculum_k, mut direction) = (None, Direction::CoarseToFine);

        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let at = |msg: String| Error::config(format!("line {}: {msg}", lineno + 1));
            let (key, value) = line
                .split_once('=')
                .map(|(k, v)| (k.trim(), v.trim()))
                .ok_or_else(|| at(format!("expected `key = value`, got `{line}`")))?;
            macro_rules! num {
                () => {
                    value
                        .parse()
                        .map_err(|_| at(format!("`{value}` is not a valid value for `{key}`")))?
                };
            }
            match key {
                "seed" => seed = Some(num!()),
                "net.arch" => cfg.net.arch = Some(value.to_string()),
                "net.width" => cfg.net.width = num!(),
                "net.modules" => cfg.net.modules = num!(),
                "net.iterations" => cfg.net.iterations = num!(),
                "net.stack" => cfg.net.stack = num!(),
                "net.skip_n" => cfg.net.skip_n = num!(),
                "net.skip_mode" => {
                    cfg.net.skip_placement = match value {
                        "output" => SkipPlacement::Output,
                        "recurrent" => SkipPlacement::Recurrent,
                        _ => return Err(at(format!("net.skip_mode must be output or recurrent, got `{value}`"))),
                    }
                }
                "net.gamma" => cfg.net.gamma = num!(),
                "net.residual" => cfg.net.residual = num!(),
                "train.epochs" => cfg.epochs = num!(),
                "train.batch_size" => cfg.batch_size = num!(),
                "train.lr" => cfg.lr = num!(),
                "train.lr_decay_epochs" => {
                    cfg.lr_decay_epochs = Some(
                        value
                            .split(',')
                            .map(|e| e.trim().parse().map_err(|_| at(format!("bad epoch `{e}`"))))
                            .collect::<Result<Vec<_>>>()?,
                    )
                }
                "train.lr_decay_factor" => cfg.lr_decay_factor = num!(),
                "train.momentum" => cfg.momentum = num!(),
                "train.weight_decay" => cfg.weight_decay = num!(),
                "train.order" => {
                    cfg.order = match value {
                        "shuffled" => BatchOrder::Shuffled,
                        "coarse_sorted" => BatchOrder::CoarseSorted,
                        _ => return Err(at(format!("train.order must be shuffled or coarse_sorted, got `{value}`"))),
                    }
                }
                "train.flip" => cfg.flip = num!(),
                "train.crop_pad" => cfg.crop_pad = num!(),
                "train.eval_every" => cfg.eval_every = num!(),
                "train.checkpoint_every" => cfg.checkpoint_every = num!(),
                "train.out_dir" => cfg.out_dir = Some(PathBuf::from(value)),
                "curriculum.enabled" => curriculum_enabled = num!(),
                "curriculum.k" => curriculum_k = Some(num!()),
                "curriculum.direction" => direction = value.parse().map_err(|e: Error| at(e.to_string()))?,
                "ablation.last_loss_only" => cfg.last_loss_only = num!(),
                "data.image_size" => synth.image_size = num!(),
                "data.coarse_classes" => synth.coarse_classes = num!(),
                "data.variants" => synth.variants = num!(),
                "data.train_per_class" => synth.train_per_class = num!(),
                "data.test_per_class" => synth.test_per_class = num!(),
                "data.noise" => synth.noise = num!(),
                "data.seed" => synth_seed = Some(num!()),
                "data.train" => train_path = Some(PathBuf::from(value)),
                "data.test" => test_path = Some(PathBuf::from(value)),
                other => return Err(at(format!("unknown key `{other}`"))),
            }
        }

        cfg.seed = seed.ok_or_else(|| Error::config("`seed` is required"))?;
        synth.seed = synth_seed.unwrap_or(cfg.seed);
        cfg.data = match (train_path, test_path) {
            (None, None) => DataSource::Synthetic(synth),
            (Some(train), Some(test)) => DataSource::Files { train, test },
            _ => return Err(Error::config("data.train and data.test must be given together")),
        };
        if curriculum_enabled {
            cfg.curriculum = Some((curriculum_k.unwrap_or(cfg.net.iterations_hint()), direction));
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

impl NetConfig {
    /// Iteration count, reading it from `net.arch` when one is given.
    pub fn iterations_hint(&self) -> usize {
        self.arch
            .as_deref()
            .and_then(|a| {
                let a = a.replace('→', "->");
                let start = a.find("Iterate(")? + "Iterate(".len();
                let args = &a[start..start + a[start..].find(')')?];
                args.rsplit(',').next()?.trim().parse().ok()
            })
            .unwrap_or(self.iterations)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_known_keys() {
        let cfg = TrainConfig::parse(
            "# desk run\nseed = 7\nnet.iterations = 4\nnet.stack = 2\nnet.skip_n = 2\nnet.gamma = 1\n\
             train.lr = 0.05\ncurriculum.enabled = true\ncurriculum.k = 3\n\
             curriculum.direction = literal_eq6\nablation.last_loss_only = false\n",
        )
        .unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.lr, 0.05);
        assert_eq!(cfg.curriculum, Some((3, Direction::LiteralRamp)));
        assert_eq!(cfg.schedule().unwrap().unwrap().zeta(2).unwrap(), 2.0 / 3.0);
    }

    #[test]
    fn unknown_key_and_missing_seed() {
        let err = TrainConfig::parse("seed = 1\nnet.iteratons = 4\n").unwrap_err().to_string();
        assert!(err.contains("line 2") && err.contains("net.iteratons"), "{err}");
        assert!(TrainConfig::parse("net.iterations = 4\n").is_err());
        assert!(TrainConfig::parse("seed = x\n").is_err());
    }

    #[test]
    fn curriculum_k_bounds() {
        assert!(TrainConfig::parse("seed = 1\ncurriculum.enabled = true\ncurriculum.k = 9\n").is_err());
        let cfg = TrainConfig::parse("seed = 1\ncurriculum.enabled = true\n").unwrap();
        assert_eq!(cfg.curriculum, Some((4, Direction::CoarseToFine)));
    }

    #[test]
    fn lr_schedule() {
        let cfg = TrainConfig::with_seed(0);
        assert_eq!(cfg.decay_epochs(), vec![15, 22]);
        assert_eq!(cfg.lr_at(0), 0.1);
        assert!((cfg.lr_at(15) - 0.01).abs() < 1e-12);
        assert!((cfg.lr_at(29) - 0.001).abs() < 1e-12);
    }

    #[test]
    fn builds_default_network() {
        let spec = NetConfig::default().build(16, 12, LossMode::AllIterations).unwrap();
        assert_eq!(spec, FeedbackNetSpec::desk_default(16, 12));
        let narrow = NetConfig {
            width: 8,
            skip_n: 0,
            ..NetConfig::default()
        };
        let spec = narrow.build(16, 12, LossMode::AllIterations).unwrap();
        assert_eq!(spec.feature_len(), 32);
        assert_eq!(spec.skip, None);
    }

    #[test]
    fn arch_iterations_hint() {
        let net = NetConfig {
            arch: Some("C(3,4,3,1)->BR->Iterate(4,4,3,1,1,6)->Avg(16,1)->FC(4,12)".into()),
            ..NetConfig::default()
        };
        assert_eq!(net.iterations_hint(), 6);
    }
}
