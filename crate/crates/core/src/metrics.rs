//! Confusion-matrix accuracy metrics: overall accuracy, average per-class
//! accuracy, and Cohen's kappa.

use crate::error::{Error, Result};
use crate::Real;

/// C×C counts, rows = true class, columns = predicted class.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> ConfusionMatrix {
        ConfusionMatrix {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn from_counts(classes: usize, counts: Vec<u64>) -> Result<ConfusionMatrix> {
        if counts.len() != classes * classes {
            return Err(Error::shape(
                "confusion_matrix",
                format!("{classes}x{classes} counts"),
                format!("{} values", counts.len()),
            ));
        }
        Ok(ConfusionMatrix { classes, counts })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    /// Record one sample with 0-based class indices.
    pub fn record(&mut self, true_class: usize, predicted: usize) {
        self.counts[true_class * self.classes + predicted] += 1;
    }

    pub fn count(&self, true_class: usize, predicted: usize) -> u64 {
        self.counts[true_class * self.classes + predicted]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn row_sum(&self, class: usize) -> u64 {
        self.counts[class * self.classes..(class + 1) * self.classes]
            .iter()
            .sum()
    }

    pub fn col_sum(&self, class: usize) -> u64 {
        (0..self.classes).map(|r| self.count(r, class)).sum()
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) {
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
    }
}

/// OA/AA/kappa plus the per-class detail the report tables print.
#[derive(Clone, Debug)]
pub struct MetricsReport {
    pub oa: Real,
    pub aa: Real,
    pub kappa: Real,
    /// Per-class accuracy in class order; `None` for classes with no test
    /// samples (excluded from AA).
    pub per_class: Vec<Option<Real>>,
    /// Class indices excluded from AA for having an empty row.
    pub excluded: Vec<usize>,
}

/// OA = trace/total; AA = mean per-class recall over classes that have
/// test samples; kappa = (OA - p_e)/(1 - p_e) with
/// p_e = sum_c row_c * col_c / total^2. A fully degenerate matrix with
/// p_e = 1 reports kappa 0 (agreement indistinguishable from chance).
pub fn metrics_from_confusion(m: &ConfusionMatrix) -> Result<MetricsReport> {
    let total = m.total();
    if total == 0 {
        return Err(Error::invalid("metrics_from_confusion: all-zero matrix"));
    }
    let totf = total as Real;
    let trace: u64 = (0..m.classes()).map(|c| m.count(c, c)).sum();
    let oa = trace as Real / totf;

    let mut per_class = Vec::with_capacity(m.classes());
    let mut excluded = Vec::new();
    let mut aa_sum = 0.0;
    let mut aa_n = 0usize;
    for c in 0..m.classes() {
        let row = m.row_sum(c);
        if row == 0 {
            per_class.push(None);
            excluded.push(c);
        } else {
            let acc = m.count(c, c) as Real / row as Real;
            per_class.push(Some(acc));
            aa_sum += acc;
            aa_n += 1;
        }
    }
    if aa_n == 0 {
        return Err(Error::invalid(
            "metrics_from_confusion: every class row is empty",
        ));
    }
    let aa = aa_sum / aa_n as Real;

    let p_e: Real = (0..m.classes())
        .map(|c| m.row_sum(c) as Real * m.col_sum(c) as Real)
        .sum::<Real>()
        / (totf * totf);
    let kappa = if (1.0 - p_e).abs() < 1e-12 {
        0.0
    } else {
        (oa - p_e) / (1.0 - p_e)
    };
    Ok(MetricsReport {
        oa,
        aa,
        kappa,
        per_class,
        excluded,
    })
}
