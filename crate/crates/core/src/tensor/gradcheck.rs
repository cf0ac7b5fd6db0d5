//! Central finite-difference verification of tape gradients.
//!
//! The check runs in `f64`: one backward pass gives the analytic gradient of
//! a scalar loss, then every parameter element is nudged by `±h` and the
//! loss re-evaluated from scratch.

use super::{ParamId, ParamStore, Tape, Var};
use crate::error::{Error, Result};

/// `|a - n| / max(|a|, |n|, floor)`. The floor keeps gradients that are
/// zero up to rounding from producing meaningless ratios.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    pub step: f64,
    /// Denominator floor for [`relative_error`]. Central differences of an
    /// O(10..100) loss at `h = 1e-5` carry about 1e-9 of rounding noise, so a
    /// true zero gradient needs a floor well above that.
    pub floor: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions { step: 1e-5, floor: 1e-4 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradEntry {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub entries: Vec<GradEntry>,
}

impl GradCheckReport {
    pub fn checked(&self) -> usize {
        self.entries.len()
    }

    pub fn max_rel_error(&self) -> f64 {
        self.entries.iter().map(|e| e.rel_error).fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&GradEntry> {
        self.entries.iter().max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
    }

    /// Fraction of checked elements with relative error below `tol`.
    pub fn fraction_within(&self, tol: f64) -> f64 {
        if self.entries.is_empty() {
            return 1.0;
        }
        self.entries.iter().filter(|e| e.rel_error < tol).count() as f64 / self.entries.len() as f64
    }

    pub fn merge(&mut self, other: GradCheckReport) {
        self.entries.extend(other.entries);
    }
}

/// Compares the tape gradient of `loss` with central differences for every
/// element of every unfrozen parameter in the store reached through `store`.
///
/// `loss` must be a pure function of the parameter values apart from side
/// effects that do not feed back into its value (running statistics in
/// train mode, for instance).
pub fn check_gradients<S>(
    state: &mut S,
    store: fn(&mut S) -> &mut ParamStore<f64>,
    mut loss: impl FnMut(&mut S, &mut Tape<f64>) -> Result<Var>,
    opts: GradCheckOptions,
) -> Result<GradCheckReport> {
    let analytic: Vec<(ParamId, Vec<f64>)> = {
        let params = store(state);
        params.zero_grad();
        let ids: Vec<ParamId> = params.ids().filter(|&id| !params.is_frozen(id)).collect();
        let mut tape = Tape::new();
        let root = loss(state, &mut tape)?;
        if !tape.value(root).is_scalar() {
            return Err(Error::contract("gradient check needs a scalar loss"));
        }
        let params = store(state);
        tape.backward(root, params)?;
        ids.into_iter()
            .map(|id| {
                let t = params.get(id);
                (id, t.grad.clone().unwrap_or_else(|| vec![0.0; t.numel()]))
            })
            .collect()
    };
    let mut eval = |state: &mut S| -> Result<f64> {
        let mut tape = Tape::inference();
        let root = loss(state, &mut tape)?;
        Ok(tape.value(root).item())
    };
    let mut report = GradCheckReport::default();
    for (id, grad) in analytic {
        let name = store(state).name(id).to_string();
        for (index, &a) in grad.iter().enumerate() {
            let original = store(state).get(id).data()[index];
            store(state).get_mut(id).data_mut()[index] = original + opts.step;
            let plus = eval(state)?;
            store(state).get_mut(id).data_mut()[index] = original - opts.step;
            let minus = eval(state)?;
            store(state).get_mut(id).data_mut()[index] = original;
            let numeric = (plus - minus) / (2.0 * opts.step);
            report.entries.push(GradEntry {
                param: name.clone(),
                index,
                analytic: a,
                numeric,
                rel_error: relative_error(a, numeric, opts.floor),
            });
        }
    }
    store(state).zero_grad();
    Ok(report)
}
