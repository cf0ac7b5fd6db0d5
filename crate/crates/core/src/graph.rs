//! Critical-path depth of feedforward and feedback computation graphs, and
//! the times at which each iteration's prediction becomes available when
//! every layer that can run in parallel does.

use std::fmt::Write as _;

use crate::error::{Error, Result};

/// A feedback network of `iterations` (m) over `depth` (n) physical layers
/// with stack length `stack` (s). `layer_time` is the duration of one
/// convolutional layer.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GraphSpec {
    pub iterations: usize,
    pub depth: usize,
    pub stack: usize,
    pub layer_time: f64,
}

impl GraphSpec {
    pub fn new(iterations: usize, depth: usize, stack: usize) -> Result<Self> {
        let spec = GraphSpec {
            iterations,
            depth,
            stack,
            layer_time: 1.0,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 || self.depth == 0 || self.stack == 0 {
            return Err(Error::config("m, n and s must all be at least 1"));
        }
        if self.stack > self.depth || !self.depth.is_multiple_of(self.stack) {
            return Err(Error::config(format!(
                "stack length {} must divide physical depth {}",
                self.stack, self.depth
            )));
        }
        if !(self.layer_time > 0.0) {
            return Err(Error::config("layer time must be positive"));
        }
        Ok(())
    }
}

/// Longest path of a feedforward chain of `layers` layers, in edges.
pub fn depth_feedforward(layers: usize) -> usize {
    layers.saturating_sub(1)
}

/// Longest path of the unrolled feedback graph: `n + s(m − 1)`, which is
/// `m + n − 1` for Stack-1.
pub fn depth_feedback(spec: &GraphSpec) -> usize {
    spec.depth + spec.stack * (spec.iterations - 1)
}

/// `t_i = (n + s·i)·T` for `i = 0..m`.
pub fn availability_times(spec: &GraphSpec) -> Vec<f64> {
    (0..spec.iterations)
        .map(|i| (spec.depth + spec.stack * i) as f64 * spec.layer_time)
        .collect()
}

/// Depth of a feedforward network finishing at the same instant as each
/// iteration's prediction.
pub fn ensemble_equivalent_depths(spec: &GraphSpec) -> Vec<usize> {
    (0..spec.iterations).map(|i| spec.depth + spec.stack * i).collect()
}

/// Human-readable table for the `analyze-graph` command.
pub fn report(spec: &GraphSpec) -> String {
    let virtual_depth = spec.iterations * spec.depth;
    let mut s = String::new();
    let _ = writeln!(
        s,
        "feedback graph: m={} iterations, n={} physical depth, Stack-{}",
        spec.iterations, spec.depth, spec.stack
    );
    let _ = writeln!(s, "virtual depth              {virtual_depth}");
    let _ = writeln!(
        s,
        "feedforward graph depth    {}   (D - 1, D = m*n)",
        depth_feedforward(virtual_depth)
    );
    let note = if spec.stack == 1 {
        "(m + n - 1)"
    } else {
        "(n + s(m - 1); derived Stack-s generalization)"
    };
    let _ = writeln!(s, "feedback graph depth       {}   {note}", depth_feedback(spec));
    let _ = writeln!(s);
    let _ = writeln!(s, "{:<10} {:>14} {:>18} {:>16}", "iteration", "virtual depth", "available at (T)", "ensemble depth");
    for (i, (t, d)) in availability_times(spec)
        .iter()
        .zip(ensemble_equivalent_depths(spec))
        .enumerate()
    {
        let _ = writeln!(
            s,
            "{:<10} {:>14} {:>18} {:>16}",
            i + 1,
            (i + 1) * spec.depth,
            format!("{t}T"),
            d
        );
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn feedforward_depths() {
        assert_eq!(depth_feedforward(48), 47);
        assert_eq!(depth_feedforward(1), 0);
        assert_eq!(depth_feedforward(4 * 12), 47);
    }

    #[test]
    fn feedback_depths() {
        assert_eq!(depth_feedback(&GraphSpec::new(4, 12, 1).unwrap()), 15);
        assert_eq!(depth_feedback(&GraphSpec::new(1, 12, 3).unwrap()), 12);
        assert_eq!(depth_feedback(&GraphSpec::new(4, 12, 3).unwrap()), 21);
    }

    #[test]
    fn availability() {
        let spec = GraphSpec::new(4, 12, 3).unwrap();
        assert_eq!(availability_times(&spec), vec![12.0, 15.0, 18.0, 21.0]);
        assert_eq!(ensemble_equivalent_depths(&spec), vec![12, 15, 18, 21]);
        let all = GraphSpec::new(2, 6, 6).unwrap();
        assert_eq!(availability_times(&all), vec![6.0, 12.0]);
        assert_eq!(availability_times(&GraphSpec::new(1, 5, 1).unwrap()), vec![5.0]);
    }

    #[test]
    fn invalid_specs() {
        assert!(GraphSpec::new(0, 4, 1).is_err());
        assert!(GraphSpec::new(2, 4, 3).is_err());
        assert!(GraphSpec::new(2, 4, 8).is_err());
    }

    #[test]
    fn report_mentions_times() {
        let r = report(&GraphSpec::new(4, 12, 3).unwrap());
        for needle in ["12T", "15T", "18T", "21T", "47", "derived"] {
            assert!(r.contains(needle), "{needle} missing from\n{r}");
        }
    }
}
