//! Two-level label taxonomy: coarse probabilities obtained by summing fine
//! softmax mass over each coarse class, and the compliance metric
//! `F = P(coarse correct | fine wrong)`.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::tensor::{Float, Tape, Tensor, Var};

/// Fine-to-coarse label map.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Taxonomy {
    parent: Vec<usize>,
    coarse_count: usize,
}

impl Taxonomy {
    /// `parent[i]` is the coarse class of fine class `i`. Coarse ids must be
    /// contiguous from 0 and each must have at least one child.
    pub fn new(parent: Vec<usize>) -> Result<Self> {
        if parent.is_empty() {
            return Err(Error::Taxonomy("taxonomy has no fine classes".into()));
        }
        let coarse_count = parent.iter().max().map_or(0, |m| m + 1);
        let mut seen = vec![false; coarse_count];
        for &p in &parent {
            seen[p] = true;
        }
        if let Some(empty) = seen.iter().position(|s| !s) {
            return Err(Error::Taxonomy(format!("coarse class {empty} has no fine children")));
        }
        Ok(Taxonomy {
            parent,
            coarse_count,
        })
    }

    /// `coarse` groups of `children` fine classes each, fine ids grouped
    /// consecutively.
    pub fn balanced(coarse: usize, children: usize) -> Self {
        Taxonomy::new((0..coarse * children).map(|i| i / children).collect()).expect("non-empty")
    }

    pub fn fine_count(&self) -> usize {
        self.parent.len()
    }

    pub fn coarse_count(&self) -> usize {
        self.coarse_count
    }

    pub fn parent(&self, fine: usize) -> usize {
        self.parent[fine]
    }

    pub fn parents(&self) -> &[usize] {
        &self.parent
    }

    pub fn children(&self, coarse: usize) -> impl Iterator<Item = usize> + '_ {
        self.parent
            .iter()
            .enumerate()
            .filter(move |(_, &p)| p == coarse)
            .map(|(i, _)| i)
    }

    /// Binary `K x G` membership matrix, row-major.
    pub fn mapping_matrix(&self) -> Vec<Vec<u8>> {
        self.parent
            .iter()
            .map(|&p| (0..self.coarse_count).map(|k| u8::from(k == p)).collect())
            .collect()
    }

    /// Parses `<fine_id> <coarse_id>` lines. Blank lines and `#` comments are
    /// skipped; fine ids must cover `0..K` exactly once.
    pub fn parse(text: &str) -> Result<Self> {
        let mut pairs: Vec<(usize, usize, usize)> = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split_whitespace().collect();
            let parse = |s: &str| {
                s.parse::<usize>().map_err(|_| {
                    Error::Taxonomy(format!("line {}: `{s}` is not a non-negative integer", lineno + 1))
                })
            };
            if fields.len() != 2 {
                return Err(Error::Taxonomy(format!(
                    "line {}: expected `<fine_id> <coarse_id>`, got `{line}`",
                    lineno + 1
                )));
            }
            pairs.push((parse(fields[0])?, parse(fields[1])?, lineno + 1));
        }
        let mut parent = vec![usize::MAX; pairs.len()];
        for &(fine, coarse, lineno) in &pairs {
            if fine >= parent.len() {
                return Err(Error::Taxonomy(format!(
                    "line {lineno}: fine id {fine} breaks the contiguous range 0..{}",
                    parent.len()
                )));
            }
            if parent[fine] != usize::MAX {
                return Err(Error::Taxonomy(format!("line {lineno}: fine id {fine} listed twice")));
            }
            parent[fine] = coarse;
        }
        Taxonomy::new(parent)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (i, p) in self.parent.iter().enumerate() {
            let _ = writeln!(s, "{i} {p}");
        }
        s
    }

    pub fn coarse_of(&self, fine: &[usize]) -> Vec<usize> {
        fine.iter().map(|&f| self.parent[f]).collect()
    }
}

/// Sums fine probabilities into their coarse classes. Rows of `fine_probs`
/// must already sum to one.
pub fn coarse_distribution<T: Float>(fine_probs: &Tensor<T>, tax: &Taxonomy) -> Result<Tensor<T>> {
    let s = fine_probs.shape();
    if s.len() != 2 || s[1] != tax.fine_count() {
        return Err(Error::shape(format!(
            "expected [N, {}] fine probabilities, got {s:?}",
            tax.fine_count()
        )));
    }
    let g = tax.coarse_count();
    let mut out = vec![T::zero(); s[0] * g];
    for i in 0..s[0] {
        let row = fine_probs.row(i);
        let total: f64 = row.iter().map(|v| v.as_f64()).sum();
        if (total - 1.0).abs() > 1e-5 {
            return Err(Error::contract(format!(
                "fine probabilities of row {i} sum to {total}, not 1"
            )));
        }
        for (j, &p) in row.iter().enumerate() {
            out[i * g + tax.parent(j)] += p;
        }
    }
    Tensor::new(&[s[0], g], out)
}

/// Mean `-log P(coarse target)` where the coarse probability is the summed
/// softmax mass of its fine children. Differentiable through the tape.
pub fn coarse_loss<T: Float>(
    tape: &mut Tape<T>,
    fine_logits: Var,
    coarse_targets: &[usize],
    tax: &Taxonomy,
) -> Result<Var> {
    let k = tape.shape(fine_logits).get(1).copied().unwrap_or(0);
    if k != tax.fine_count() {
        return Err(Error::contract(format!(
            "logits have {k} classes but the taxonomy has {}",
            tax.fine_count()
        )));
    }
    tape.grouped_cross_entropy(fine_logits, tax.parents(), coarse_targets, tax.coarse_count())
}

/// Coarse predictions from fine logits: argmax of the summed distribution.
pub fn coarse_predictions<T: Float>(fine_logits: &Tensor<T>, tax: &Taxonomy) -> Result<Vec<usize>> {
    let probs = crate::tensor::kernels::softmax_rows(fine_logits);
    Ok(coarse_distribution(&probs, tax)?.argmax_rows())
}

/// Fraction of wrong fine predictions whose predicted class still shares the
/// target's parent. `None` when every fine prediction is correct.
pub fn compliance_metric(predictions: &[usize], targets: &[usize], tax: &Taxonomy) -> Result<Option<f64>> {
    if predictions.is_empty() {
        return Err(Error::contract("compliance needs at least one prediction"));
    }
    if predictions.len() != targets.len() {
        return Err(Error::contract(format!(
            "{} predictions for {} targets",
            predictions.len(),
            targets.len()
        )));
    }
    let mut wrong = 0usize;
    let mut compliant = 0usize;
    for (&p, &t) in predictions.iter().zip(targets) {
        if p != t {
            wrong += 1;
            if tax.parent(p) == tax.parent(t) {
                compliant += 1;
            }
        }
    }
    Ok((wrong > 0).then(|| compliant as f64 / wrong as f64))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn probs(rows: &[&[f64]]) -> Tensor<f64> {
        let k = rows[0].len();
        let flat: Vec<f64> = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Tensor::from_f64(&[rows.len(), k], &flat).unwrap()
    }

    #[test]
    fn uniform_fine_gives_uniform_coarse() {
        let tax = Taxonomy::balanced(2, 2);
        let c = coarse_distribution(&probs(&[&[0.25; 4]]), &tax).unwrap();
        assert_eq!(c.data(), &[0.5, 0.5]);
    }

    #[test]
    fn one_hot_maps_to_parent() {
        let tax = Taxonomy::new(vec![1, 0, 2, 1]).unwrap();
        let c = coarse_distribution(&probs(&[&[0.0, 0.0, 1.0, 0.0]]), &tax).unwrap();
        assert_eq!(c.data(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn direct_summation() {
        let tax = Taxonomy::new(vec![0, 0, 1, 1]).unwrap();
        let c = coarse_distribution(&probs(&[&[0.1, 0.2, 0.3, 0.4]]), &tax).unwrap();
        assert!((c.data()[0] - 0.3).abs() < 1e-12 && (c.data()[1] - 0.7).abs() < 1e-12);
    }

    #[test]
    fn unnormalized_rows_rejected() {
        let tax = Taxonomy::balanced(2, 2);
        let err = coarse_distribution(&probs(&[&[0.5, 0.5, 0.5, 0.0]]), &tax).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }

    #[test]
    fn coarse_loss_uniform_is_ln_g() {
        let tax = Taxonomy::balanced(3, 4);
        let mut tape = Tape::<f64>::new();
        let logits = tape.constant(Tensor::zeros(&[2, 12]));
        let loss = coarse_loss(&mut tape, logits, &[0, 2], &tax).unwrap();
        assert!((tape.value(loss).item() - 3f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn coarse_loss_vanishes_on_confident_child() {
        let tax = Taxonomy::balanced(2, 2);
        let mut tape = Tape::<f64>::new();
        let logits = tape.constant(Tensor::from_f64(&[1, 4], &[-50.0, -50.0, -50.0, 50.0]).unwrap());
        let loss = coarse_loss(&mut tape, logits, &[1], &tax).unwrap();
        assert!(tape.value(loss).item() < 1e-40);
        assert!(coarse_loss(&mut tape, logits, &[2], &tax).is_err());
    }

    #[test]
    fn compliance_direct_count() {
        let tax = Taxonomy::balanced(4, 3);
        let targets = [0, 1, 2, 3, 4, 5, 6, 7, 8, 9];
        // four wrong: 0->1 (same parent), 3->5 (same), 6->7 (same), 9->0 (different)
        let preds = [1, 1, 2, 5, 4, 5, 7, 7, 8, 0];
        assert_eq!(compliance_metric(&preds, &targets, &tax).unwrap(), Some(0.75));
        assert_eq!(compliance_metric(&targets, &targets, &tax).unwrap(), None);
        assert!(compliance_metric(&[], &[], &tax).is_err());
    }

    #[test]
    fn taxonomy_file_parsing() {
        let tax = Taxonomy::parse("# fine coarse\n0 1\n1 0\n\n2 1\n").unwrap();
        assert_eq!(tax.parents(), &[1, 0, 1]);
        assert_eq!(Taxonomy::parse(&tax.to_text()).unwrap(), tax);
        assert_eq!(tax.mapping_matrix(), vec![vec![0, 1], vec![1, 0], vec![0, 1]]);

        let err = Taxonomy::parse("0 0\n1 x\n").unwrap_err().to_string();
        assert!(err.contains("line 2"), "{err}");
        let err = Taxonomy::parse("0 0\n0 1\n").unwrap_err().to_string();
        assert!(err.contains("listed twice"), "{err}");
        let err = Taxonomy::parse("0 0\n5 1\n").unwrap_err().to_string();
        assert!(err.contains("line 2"), "{err}");
        assert!(Taxonomy::parse("0 1\n1 1\n").is_err());
    }
}
