//! Eval-mode measurement of every iteration's prediction, and export of the
//! per-iteration representations.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::harness::dataset::Dataset;
use crate::network::FeedbackNet;
use crate::taxonomy::{coarse_predictions, compliance_metric, Taxonomy};
use crate::tensor::{Mode, Tape};

pub const EVAL_BATCH: usize = 100;

/// Test-set measurements. Per-iteration lists have one entry per iteration.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub samples: usize,
    pub fine_accuracy: Vec<f64>,
    /// Argmax of the fine probability mass summed per coarse class.
    pub coarse_accuracy: Vec<f64>,
    /// `P(coarse correct | fine wrong)`; `None` when no fine prediction was
    /// wrong.
    pub compliance: Vec<Option<f64>>,
    pub mean_loss: Vec<f64>,
    /// Last-iteration top-1 and top-5 fine accuracy.
    pub top1: f64,
    pub top5: f64,
    /// Mean training objective per epoch, filled in by the trainer.
    pub loss_history: Vec<f64>,
}

impl MetricsReport {
    pub fn iterations(&self) -> usize {
        self.fine_accuracy.len()
    }

    pub fn final_fine(&self) -> f64 {
        *self.fine_accuracy.last().expect("at least one iteration")
    }

    pub fn final_coarse(&self) -> f64 {
        *self.coarse_accuracy.last().expect("at least one iteration")
    }

    pub fn summary(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "samples {}  top-1 {:.4}  top-5 {:.4}", self.samples, self.top1, self.top5);
        let _ = writeln!(s, "{:<10} {:>8} {:>8} {:>10} {:>8}", "iteration", "fine", "coarse", "compliance", "loss");
        for t in 0..self.iterations() {
            let f = self.compliance[t].map_or("n/a".to_string(), |v| format!("{v:.4}"));
            let _ = writeln!(
                s,
                "{:<10} {:>8.4} {:>8.4} {:>10} {:>8.4}",
                t + 1,
                self.fine_accuracy[t],
                self.coarse_accuracy[t],
                f,
                self.mean_loss[t]
            );
        }
        s
    }
}

fn check_classes(net: &FeedbackNet<f32>, tax: &Taxonomy) -> Result<()> {
    if net.spec.num_classes != tax.fine_count() {
        return Err(Error::contract(format!(
            "network predicts {} classes, taxonomy has {}",
            net.spec.num_classes,
            tax.fine_count()
        )));
    }
    Ok(())
}

/// Runs the network in eval mode over `data`.
pub fn evaluate(net: &mut FeedbackNet<f32>, data: &Dataset, tax: &Taxonomy) -> Result<MetricsReport> {
    check_classes(net, tax)?;
    if data.is_empty() {
        return Err(Error::contract("cannot evaluate on an empty dataset"));
    }
    let iters = net.spec.iterations;
    let mut fine_preds = vec![Vec::with_capacity(data.len()); iters];
    let mut fine_hits = vec![0usize; iters];
    let mut coarse_hits = vec![0usize; iters];
    let mut loss_sum = vec![0f64; iters];
    let mut top5_hits = 0usize;
    let indices: Vec<usize> = (0..data.len()).collect();
    for chunk in indices.chunks(EVAL_BATCH) {
        let (images, fine, coarse) = data.batch::<f32>(chunk)?;
        let mut tape = Tape::inference();
        let x = tape.constant(images);
        let trace = net.unroll_forward(&mut tape, x, &fine, Mode::Eval)?;
        for t in 0..iters {
            let logits = tape.value(trace.logits[t]);
            let preds = logits.argmax_rows();
            let cpreds = coarse_predictions(logits, tax)?;
            fine_hits[t] += preds.iter().zip(&fine).filter(|(p, y)| p == y).count();
            coarse_hits[t] += cpreds.iter().zip(&coarse).filter(|(p, y)| p == y).count();
            loss_sum[t] += tape.value(trace.losses[t]).item() as f64 * chunk.len() as f64;
            fine_preds[t].extend(preds);
            if t + 1 == iters {
                top5_hits += (0..chunk.len())
                    .filter(|&i| {
                        let row = logits.row(i);
                        let target = row[fine[i]];
                        // ties rank the lower class index first, as argmax does
                        let above = row
                            .iter()
                            .enumerate()
                            .filter(|&(j, &v)| v > target || (v == target && j < fine[i]))
                            .count();
                        above < 5
                    })
                    .count();
            }
        }
    }
    let n = data.len() as f64;
    let compliance = fine_preds
        .iter()
        .map(|p| compliance_metric(p, &data.fine, tax))
        .collect::<Result<Vec<_>>>()?;
    let fine_accuracy: Vec<f64> = fine_hits.iter().map(|&h| h as f64 / n).collect();
    Ok(MetricsReport {
        samples: data.len(),
        top1: *fine_accuracy.last().expect("iterations > 0"),
        fine_accuracy,
        coarse_accuracy: coarse_hits.iter().map(|&h| h as f64 / n).collect(),
        compliance,
        mean_loss: loss_sum.iter().map(|&l| l / n).collect(),
        top5: top5_hits as f64 / n,
        loss_history: Vec::new(),
    })
}

/// Pooled representation of every sample at every iteration, `[iteration][sample][feature]`.
pub fn representations(net: &mut FeedbackNet<f32>, data: &Dataset) -> Result<Vec<Vec<Vec<f32>>>> {
    let iters = net.spec.iterations;
    let mut out = vec![Vec::with_capacity(data.len()); iters];
    let indices: Vec<usize> = (0..data.len()).collect();
    for chunk in indices.chunks(EVAL_BATCH) {
        let (images, fine, _) = data.batch::<f32>(chunk)?;
        let mut tape = Tape::inference();
        let x = tape.constant(images);
        let trace = net.unroll_forward(&mut tape, x, &fine, Mode::Eval)?;
        for (t, &r) in trace.representations.iter().enumerate() {
            let value = tape.value(r);
            out[t].extend((0..chunk.len()).map(|i| value.row(i).to_vec()));
        }
    }
    Ok(out)
}

/// Writes comma-separated rows `sample_id, iteration, fine, coarse, f_1..f_F`,
/// one per (sample, iteration), iterations numbered from 1.
pub fn export_representations(net: &mut FeedbackNet<f32>, data: &Dataset, path: &Path) -> Result<usize> {
    let reprs = representations(net, data)?;
    let file = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(file);
    let mut rows = 0;
    let mut line = String::new();
    for i in 0..data.len() {
        for (t, per_iter) in reprs.iter().enumerate() {
            line.clear();
            let _ = write!(line, "{i},{},{},{}", t + 1, data.fine[i], data.coarse[i]);
            for v in &per_iter[i] {
                let _ = write!(line, ",{v}");
            }
            line.push('\n');
            w.write_all(line.as_bytes())?;
            rows += 1;
        }
    }
    w.flush()?;
    Ok(rows)
}

/// Mean distance between class centroids divided by the mean distance of
/// samples to their own class centroid.
pub fn centroid_separation(features: &[Vec<f32>], labels: &[usize]) -> f64 {
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    let dim = features.first().map_or(0, Vec::len);
    let mut centroids = vec![vec![0f64; dim]; classes];
    let mut counts = vec![0usize; classes];
    for (f, &y) in features.iter().zip(labels) {
        counts[y] += 1;
        for (c, &v) in centroids[y].iter_mut().zip(f) {
            *c += f64::from(v);
        }
    }
    for (c, &n) in centroids.iter_mut().zip(&counts) {
        if n > 0 {
            c.iter_mut().for_each(|v| *v /= n as f64);
        }
    }
    let dist = |a: &[f64], b: &dyn Fn(usize) -> f64| -> f64 {
        a.iter().enumerate().map(|(i, &x)| (x - b(i)).powi(2)).sum::<f64>().sqrt()
    };
    let intra = features
        .iter()
        .zip(labels)
        .map(|(f, &y)| dist(&centroids[y], &|i| f64::from(f[i])))
        .sum::<f64>()
        / features.len() as f64;
    let present: Vec<usize> = (0..classes).filter(|&c| counts[c] > 0).collect();
    let mut inter = 0.0;
    let mut pairs = 0usize;
    for (a, &ca) in present.iter().enumerate() {
        for &cb in &present[a + 1..] {
            inter += dist(&centroids[ca], &|i| centroids[cb][i]);
            pairs += 1;
        }
    }
    if pairs == 0 || intra == 0.0 {
        return f64::INFINITY;
    }
    (inter / pairs as f64) / intra
}
