use std::sync::Arc;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossKind {
    /// Batch mean of the per-sample squared error summed over outputs.
    MeanSquaredError,
    /// Batch mean of the softmax cross-entropy of raw outputs.
    SoftmaxCrossEntropy,
}

/// Supervision for a batch.
#[derive(Debug, Clone, PartialEq)]
pub enum Targets {
    Classes { labels: Vec<usize>, num_classes: usize },
    Values(Tensor),
}

impl Targets {
    pub fn len(&self) -> usize {
        match self {
            Targets::Classes { labels, .. } => labels.len(),
            Targets::Values(t) => t.rows(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn select(&self, idx: &[usize]) -> Targets {
        match self {
            Targets::Classes { labels, num_classes } => Targets::Classes {
                labels: idx.iter().map(|&i| labels[i]).collect(),
                num_classes: *num_classes,
            },
            Targets::Values(t) => Targets::Values(t.select_rows(idx)),
        }
    }

    pub fn labels(&self) -> Option<&[usize]> {
        match self {
            Targets::Classes { labels, .. } => Some(labels),
            Targets::Values(_) => None,
        }
    }

    pub fn num_classes(&self) -> Option<usize> {
        match self {
            Targets::Classes { num_classes, .. } => Some(*num_classes),
            Targets::Values(_) => None,
        }
    }

    pub(crate) fn one_hot(labels: &[usize], num_classes: usize) -> Array2<f64> {
        let mut m = Array2::zeros((labels.len(), num_classes));
        for (i, &l) in labels.iter().enumerate() {
            m[[i, l]] = 1.0;
        }
        m
    }
}

/// Records the batch-mean loss of `output` (`m x q`) on the tape.
pub(crate) fn record_loss(tape: &mut Tape, output: Var, targets: &Targets, kind: LossKind) -> Result<Var> {
    let (m, q) = tape.value(output).dim();
    if targets.len() != m {
        return Err(Error::DimensionMismatch {
            what: "targets per batch",
            expected: m,
            found: targets.len(),
        });
    }
    let inv_m = 1.0 / m as f64;
    match (kind, targets) {
        (LossKind::MeanSquaredError, Targets::Values(t)) => {
            if t.row_len() != q {
                return Err(Error::DimensionMismatch {
                    what: "regression target width",
                    expected: q,
                    found: t.row_len(),
                });
            }
            let y = tape.leaf(t.to_matrix());
            let d = tape.sub(output, y);
            let d2 = tape.mul(d, d);
            let s = tape.sum_all(d2);
            Ok(tape.scale(s, inv_m))
        }
        (LossKind::SoftmaxCrossEntropy, Targets::Classes { labels, num_classes }) => {
            if *num_classes != q {
                return Err(Error::DimensionMismatch {
                    what: "number of classes vs outputs",
                    expected: q,
                    found: *num_classes,
                });
            }
            if let Some(&bad) = labels.iter().find(|&&l| l >= q) {
                return Err(Error::invalid(format!("label {bad} out of range for {q} classes")));
            }
            let ls = tape.log_softmax(output);
            let picked = tape.mul_const(ls, Arc::new(Targets::one_hot(labels, q)));
            let s = tape.sum_all(picked);
            Ok(tape.scale(s, -inv_m))
        }
        (kind, _) => Err(Error::invalid(format!("loss {kind:?} does not accept these targets"))),
    }
}

/// Index of the largest output per row; ties go to the lower index.
pub fn argmax_rows(outputs: &Tensor) -> Vec<usize> {
    (0..outputs.rows())
        .map(|i| {
            let row = outputs.row(i);
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}
