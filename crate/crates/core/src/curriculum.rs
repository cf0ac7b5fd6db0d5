//! Episodic curriculum: per-iteration blend of coarse and fine losses for a
//! single query, `L(t) = ζ(t)·L_coarse(t) + (1 − ζ(t))·L_fine(t)`.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::network::IterationTrace;
use crate::taxonomy::{coarse_loss, Taxonomy};
use crate::tensor::{Float, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    /// Coarse weight falls linearly from `(k-1)/k` at the first iteration to
    /// zero at iteration `k` and stays there.
    CoarseToFine,
    /// `ζ = min(1, t/k)`: coarse weight grows with the iteration index.
    LiteralRamp,
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Direction::CoarseToFine => "coarse_to_fine",
            Direction::LiteralRamp => "literal_eq6",
        })
    }
}

impl FromStr for Direction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "coarse_to_fine" => Ok(Direction::CoarseToFine),
            "literal_eq6" => Ok(Direction::LiteralRamp),
            other => Err(Error::config(format!(
                "unknown curriculum direction `{other}` (expected coarse_to_fine or literal_eq6)"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CurriculumSchedule {
    /// Iteration at which the decay ends.
    pub k: usize,
    pub direction: Direction,
    pub iterations: usize,
}

impl CurriculumSchedule {
    pub fn new(k: usize, direction: Direction, iterations: usize) -> Result<Self> {
        if k == 0 || k > iterations {
            return Err(Error::config(format!(
                "curriculum k must satisfy 1 <= k <= {iterations}, got {k}"
            )));
        }
        Ok(CurriculumSchedule {
            k,
            direction,
            iterations,
        })
    }

    /// Coarse-loss weight at iteration `t` (1-based).
    pub fn zeta(&self, t: usize) -> Result<f64> {
        if t == 0 || t > self.iterations {
            return Err(Error::Index(format!(
                "iteration {t} outside 1..={}",
                self.iterations
            )));
        }
        let (t, k) = (t as f64, self.k as f64);
        Ok(match self.direction {
            Direction::CoarseToFine => ((k - t) / k).max(0.0),
            Direction::LiteralRamp => (t / k).min(1.0),
        })
    }

    pub fn weights(&self) -> Vec<f64> {
        (1..=self.iterations).map(|t| self.zeta(t).expect("in range")).collect()
    }
}

/// `Σ_t γ^t [ζ_t·L_coarse(t) + (1 − ζ_t)·L_fine(t)]` with explicit per-iteration
/// coarse weights `zetas`. Fine losses are taken from the trace.
#[allow(clippy::too_many_arguments)]
pub fn blended_loss<T: Float>(
    tape: &mut Tape<T>,
    trace: &IterationTrace,
    coarse_targets: &[usize],
    tax: &Taxonomy,
    zetas: &[f64],
    gamma: f64,
) -> Result<Var> {
    if zetas.len() != trace.iterations() {
        return Err(Error::contract(format!(
            "{} curriculum weights for {} iterations",
            zetas.len(),
            trace.iterations()
        )));
    }
    let mut terms = Vec::with_capacity(zetas.len());
    for (t, (&zeta, (&logits, &fine))) in zetas
        .iter()
        .zip(trace.logits.iter().zip(&trace.losses))
        .enumerate()
    {
        let w = gamma.powi(t as i32 + 1);
        if w == 0.0 {
            continue;
        }
        if zeta > 0.0 {
            let coarse = coarse_loss(tape, logits, coarse_targets, tax)?;
            terms.push(tape.scale(coarse, T::from_f64(w * zeta)));
        }
        if zeta < 1.0 {
            terms.push(tape.scale(fine, T::from_f64(w * (1.0 - zeta))));
        }
    }
    if terms.is_empty() {
        return Ok(tape.constant(Tensor::scalar(T::zero())));
    }
    tape.add_all(&terms)
}

/// Episodic curriculum loss following `schedule`.
pub fn episodic_loss<T: Float>(
    tape: &mut Tape<T>,
    trace: &IterationTrace,
    coarse_targets: &[usize],
    tax: &Taxonomy,
    schedule: &CurriculumSchedule,
    gamma: f64,
) -> Result<Var> {
    if schedule.iterations != trace.iterations() {
        return Err(Error::contract(format!(
            "schedule covers {} iterations, trace has {}",
            schedule.iterations,
            trace.iterations()
        )));
    }
    blended_loss(tape, trace, coarse_targets, tax, &schedule.weights(), gamma)
}

/// Plain-number form of the blended loss.
pub fn blended_value(fine: &[f64], coarse: &[f64], zetas: &[f64], gamma: f64) -> f64 {
    fine.iter()
        .zip(coarse)
        .zip(zetas)
        .enumerate()
        .map(|(t, ((&f, &c), &z))| gamma.powi(t as i32 + 1) * (z * c + (1.0 - z) * f))
        .sum()
}
