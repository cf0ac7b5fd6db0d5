use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use fbnet::graph::{report, GraphSpec};
use fbnet::harness::checkpoint::{Checkpoint, TrainState};
use fbnet::harness::config::TrainConfig;
use fbnet::harness::dataset::{generate_dataset, load_any, save_fbds, SyntheticSpec};
use fbnet::harness::metrics::{evaluate, export_representations};
use fbnet::harness::train::{initial_state, train_from, Data};

#[derive(Parser)]
#[command(name = "fbnet", version, about = "Feedback networks: training, evaluation and graph analysis")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a feedback network from a `key = value` config file.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Directory for checkpoints; overrides `train.out_dir`.
        #[arg(long)]
        out_dir: Option<PathBuf>,
        /// Resume from a checkpoint written by an earlier run of the same config.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on an FBDS or CIFAR binary file.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Critical-path depths and prediction availability times.
    AnalyzeGraph {
        /// Iterations.
        #[arg(long)]
        m: usize,
        /// Physical depth.
        #[arg(long)]
        n: usize,
        /// Stack length.
        #[arg(long, default_value_t = 1)]
        s: usize,
    },
    /// Write per-iteration pooled representations as comma-separated rows.
    ExportReprs {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate the synthetic shape dataset into a directory.
    GenData {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn read(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn load_state(path: &Path) -> Result<TrainState> {
    let ckpt = Checkpoint::load(path).with_context(|| format!("loading {}", path.display()))?;
    Ok(TrainState::from_checkpoint(&ckpt, 0.0, 0.0)?)
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Train {
            config,
            out_dir,
            resume,
        } => {
            let mut cfg = TrainConfig::parse(&read(&config)?).with_context(|| format!("in {}", config.display()))?;
            if out_dir.is_some() {
                cfg.out_dir = out_dir;
            }
            let data = Data::load(&cfg.data)?;
            let spec = data.network_spec(&cfg)?;
            let mut state = initial_state(&cfg, spec)?;
            if let Some(path) = resume {
                state.restore(&Checkpoint::load(&path)?)?;
                state.optimizer.momentum = cfg.momentum;
                state.optimizer.weight_decay = cfg.weight_decay;
                eprintln!("resuming after epoch {}", state.epoch);
            }
            eprintln!(
                "{} train / {} test samples, {} parameters, virtual depth {}",
                data.train.len(),
                data.test.len(),
                state.net.parameter_count(),
                state.net.spec.virtual_depth()
            );
            let start = Instant::now();
            let outcome = train_from(state, &cfg, &data, |r| {
                let acc = r.metrics.as_ref().map_or(String::new(), |m| {
                    let per_iter: Vec<String> = m.fine_accuracy.iter().map(|a| format!("{a:.3}")).collect();
                    format!("  test fine acc per iteration [{}]", per_iter.join(" "))
                });
                println!("epoch {:>3}  lr {:.4}  loss {:.4}{acc}", r.epoch, r.lr, r.train_loss);
                eprintln!("  {:.1}s elapsed", start.elapsed().as_secs_f64());
            })?;
            if let Some(m) = outcome.final_metrics() {
                print!("{}", m.summary());
            }
        }
        Command::Eval { checkpoint, data } => {
            let mut state = load_state(&checkpoint)?;
            let (dataset, tax) = load_any(&data).with_context(|| format!("loading {}", data.display()))?;
            let metrics = evaluate(&mut state.net, &dataset, &tax)?;
            print!("{}", metrics.summary());
        }
        Command::AnalyzeGraph { m, n, s } => {
            print!("{}", report(&GraphSpec::new(m, n, s)?));
        }
        Command::ExportReprs { checkpoint, data, out } => {
            let mut state = load_state(&checkpoint)?;
            let (dataset, _) = load_any(&data).with_context(|| format!("loading {}", data.display()))?;
            let rows = export_representations(&mut state.net, &dataset, &out)
                .with_context(|| format!("writing {}", out.display()))?;
            eprintln!("wrote {rows} rows to {}", out.display());
        }
        Command::GenData { spec, out } => {
            let spec = SyntheticSpec::parse(&read(&spec)?)?;
            let (train, test, tax) = generate_dataset(&spec)?;
            if out.exists() && !out.is_dir() {
                bail!("{} exists and is not a directory", out.display());
            }
            std::fs::create_dir_all(&out)?;
            save_fbds(&out.join("train.fbds"), &train, &tax)?;
            save_fbds(&out.join("test.fbds"), &test, &tax)?;
            std::fs::write(out.join("taxonomy.txt"), tax.to_text())?;
            eprintln!(
                "wrote {} train and {} test samples ({} fine / {} coarse classes) to {}",
                train.len(),
                test.len(),
                tax.fine_count(),
                tax.coarse_count(),
                out.display()
            );
        }
    }
    Ok(())
}
