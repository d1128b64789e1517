use crate::error::{invalid, Result};
use crate::loss::{argmax, softmax_raw};

/// An N x K logit matrix with one integer label per row.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledBatch {
    logits: Vec<f64>,
    labels: Vec<usize>,
    classes: usize,
}

/// Top-class confidence of one sample and whether that class is the label.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Prediction {
    pub confidence: f64,
    pub correct: bool,
}

impl LabeledBatch {
    /// Builds a batch from row-major logits.
    pub fn new(logits: Vec<f64>, labels: Vec<usize>, classes: usize) -> Result<Self> {
        if classes < 2 {
            return Err(invalid(format!("need at least 2 classes, got {classes}")));
        }
        if labels.is_empty() {
            return Err(invalid("batch must contain at least one sample"));
        }
        if logits.len() != labels.len() * classes {
            return Err(invalid(format!(
                "{} logits do not form {} rows of {classes}",
                logits.len(),
                labels.len()
            )));
        }
        if let Some(v) = logits.iter().find(|v| !v.is_finite()) {
            return Err(invalid(format!("non-finite logit {v}")));
        }
        if let Some(l) = labels.iter().find(|&&l| l >= classes) {
            return Err(invalid(format!("label {l} out of range for {classes} classes")));
        }
        Ok(Self {
            logits,
            labels,
            classes,
        })
    }

    pub fn from_rows(rows: &[Vec<f64>], labels: Vec<usize>) -> Result<Self> {
        let classes = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != classes) {
            return Err(invalid("logit rows have different lengths"));
        }
        Self::new(rows.concat(), labels, classes)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn logits(&self) -> &[f64] {
        &self.logits
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.logits[i * self.classes..(i + 1) * self.classes]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.logits.chunks_exact(self.classes)
    }

    /// Softmax probabilities, one row per sample.
    pub fn probabilities(&self) -> Vec<Vec<f64>> {
        self.rows().map(softmax_raw).collect()
    }

    /// Max-softmax confidence and correctness per sample; argmax ties go to
    /// the smallest index.
    pub fn predictions(&self) -> Vec<Prediction> {
        self.rows()
            .zip(&self.labels)
            .map(|(row, &label)| {
                let probs = softmax_raw(row);
                let top = argmax(row);
                Prediction {
                    confidence: probs[top],
                    correct: top == label,
                }
            })
            .collect()
    }

    /// Applies `f` to every logit, keeping the labels.
    pub fn map_logits(&self, f: impl Fn(f64) -> f64) -> Result<Self> {
        Self::new(
            self.logits.iter().map(|&z| f(z)).collect(),
            self.labels.clone(),
            self.classes,
        )
    }

    /// Reorders samples; `order[i]` is the source row of output row `i`.
    pub fn permuted(&self, order: &[usize]) -> Result<Self> {
        let mut seen = vec![false; self.len()];
        if order.len() != self.len() || order.iter().any(|&i| i >= self.len() || std::mem::replace(&mut seen[i], true)) {
            return Err(invalid("order is not a permutation of the rows"));
        }
        let logits = order.iter().flat_map(|&i| self.row(i).iter().copied()).collect();
        let labels = order.iter().map(|&i| self.labels[i]).collect();
        Self::new(logits, labels, self.classes)
    }

    /// The same samples in a canonical order (label, then logits by total
    /// order). Row-permuted copies of a batch canonicalize identically.
    pub fn canonicalized(&self) -> Self {
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.sort_by(|&a, &b| {
            self.labels[a].cmp(&self.labels[b]).then_with(|| {
                self.row(a)
                    .iter()
                    .zip(self.row(b))
                    .map(|(x, y)| x.total_cmp(y))
                    .find(|o| o.is_ne())
                    .unwrap_or(std::cmp::Ordering::Equal)
            })
        });
        self.permuted(&order).expect("sorted indices form a permutation")
    }
}
