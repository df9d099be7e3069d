//! Binary metrics, the Z score, evaluation reports and latent-space PCA.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, SymmetricEigen};
use thiserror::Error;

use crate::synthdata::{CompoundLabel, FaultCode};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("shape mismatch: {0}")]
    ShapeError(String),
    #[error("nothing to evaluate")]
    EmptyEvaluation,
    #[error("cannot keep {k} components of {dim}-dimensional data")]
    InvalidK { k: usize, dim: usize },
    #[error("PCA needs at least 2 samples, got {0}")]
    InsufficientSamples(usize),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed file: {0}")]
    Malformed(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub tn: u64,
    pub fp: u64,
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.tn + self.fp + self.fn_
    }
}

pub fn confusion(decisions: &[bool], truths: &[bool]) -> Result<ConfusionCounts, EvalError> {
    if decisions.len() != truths.len() {
        return Err(EvalError::ShapeError(format!(
            "{} decisions vs {} truths",
            decisions.len(),
            truths.len()
        )));
    }
    let mut c = ConfusionCounts::default();
    for (&d, &t) in decisions.iter().zip(truths) {
        match (d, t) {
            (true, true) => c.tp += 1,
            (false, false) => c.tn += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
        }
    }
    Ok(c)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Metrics {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub z: f64,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Accuracy, precision, recall, F1 and `Z = 0.4 acc + 0.2 (prec + rec + f1)`.
/// Ratios with a zero denominator are 0.
pub fn z_metric(c: &ConfusionCounts) -> Result<Metrics, EvalError> {
    let total = c.total();
    if total == 0 {
        return Err(EvalError::EmptyEvaluation);
    }
    let accuracy = ratio(c.tp + c.tn, total);
    let precision = ratio(c.tp, c.tp + c.fp);
    let recall = ratio(c.tp, c.tp + c.fn_);
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    let z = 0.4 * accuracy + 0.2 * precision + 0.2 * recall + 0.2 * f1;
    Ok(Metrics {
        accuracy,
        precision,
        recall,
        f1,
        z,
    })
}

// ---------------------------------------------------------------------------
// Reports

/// Model outputs for one recording: per fault (in [`FaultCode::ALL`] order)
/// the probability of every slice.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredRecording {
    pub truth: CompoundLabel,
    pub slice_probabilities: Vec<Vec<f64>>,
}

impl ScoredRecording {
    pub fn probability(&self, fault: FaultCode) -> f64 {
        let p = &self.slice_probabilities[fault.index()];
        p.iter().sum::<f64>() / p.len() as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FaultRow {
    pub fault: FaultCode,
    pub counts: ConfusionCounts,
    pub metrics: Metrics,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub name: String,
    /// One row per fault, decided per recording from the mean slice probability.
    pub sample: Vec<FaultRow>,
    /// One row per fault, decided per slice.
    pub slice: Vec<FaultRow>,
    /// Share of recordings whose assembled label equals the truth.
    pub exact_match: f64,
    pub flops: Option<u64>,
}

fn mean_of(rows: &[FaultRow], f: impl Fn(&Metrics) -> f64) -> f64 {
    rows.iter().map(|r| f(&r.metrics)).sum::<f64>() / rows.len() as f64
}

impl EvalReport {
    pub fn build(
        name: &str,
        scored: &[ScoredRecording],
        threshold: f64,
        flops: Option<u64>,
    ) -> Result<Self, EvalError> {
        if scored.is_empty() {
            return Err(EvalError::EmptyEvaluation);
        }
        for s in scored {
            if s.slice_probabilities.len() != FaultCode::ALL.len() || s.slice_probabilities.iter().any(Vec::is_empty) {
                return Err(EvalError::ShapeError(format!(
                    "recording {} lacks probabilities for some fault",
                    s.truth
                )));
            }
        }
        let mut sample = Vec::new();
        let mut slice = Vec::new();
        for fault in FaultCode::ALL {
            let truths: Vec<bool> = scored.iter().map(|s| s.truth.contains(fault)).collect();
            let decisions: Vec<bool> = scored.iter().map(|s| s.probability(fault) >= threshold).collect();
            let counts = confusion(&decisions, &truths)?;
            sample.push(FaultRow {
                fault,
                counts,
                metrics: z_metric(&counts)?,
            });
            let mut st = Vec::new();
            let mut sd = Vec::new();
            for s in scored {
                for &p in &s.slice_probabilities[fault.index()] {
                    st.push(s.truth.contains(fault));
                    sd.push(p >= threshold);
                }
            }
            let counts = confusion(&sd, &st)?;
            slice.push(FaultRow {
                fault,
                counts,
                metrics: z_metric(&counts)?,
            });
        }
        let exact = scored
            .iter()
            .filter(|s| {
                let predicted =
                    CompoundLabel::from_faults(FaultCode::ALL.into_iter().filter(|&f| s.probability(f) >= threshold));
                predicted == s.truth
            })
            .count();
        Ok(Self {
            name: name.to_string(),
            sample,
            slice,
            exact_match: exact as f64 / scored.len() as f64,
            flops,
        })
    }

    /// Unweighted mean of the per-fault sample-level accuracies.
    pub fn mean_accuracy(&self) -> f64 {
        mean_of(&self.sample, |m| m.accuracy)
    }

    pub fn mean_z(&self) -> f64 {
        mean_of(&self.sample, |m| m.z)
    }

    pub fn slice_mean_accuracy(&self) -> f64 {
        mean_of(&self.slice, |m| m.accuracy)
    }

    pub fn slice_mean_z(&self) -> f64 {
        mean_of(&self.slice, |m| m.z)
    }

    pub fn to_table(&self) -> String {
        let mut out = format!("report: {}\n", self.name);
        let _ = writeln!(
            out,
            "{:<6} {:>4} {:>4} {:>4} {:>4} {:>8} {:>8} {:>8} {:>8} {:>8} {:>10}",
            "fault", "tp", "tn", "fp", "fn", "acc", "prec", "rec", "f1", "z", "slice_acc"
        );
        for (r, s) in self.sample.iter().zip(&self.slice) {
            let (c, m) = (&r.counts, &r.metrics);
            let _ = writeln!(
                out,
                "{:<6} {:>4} {:>4} {:>4} {:>4} {:>8.4} {:>8.4} {:>8.4} {:>8.4} {:>8.4} {:>10.4}",
                r.fault.to_string(),
                c.tp,
                c.tn,
                c.fp,
                c.fn_,
                m.accuracy,
                m.precision,
                m.recall,
                m.f1,
                m.z,
                s.metrics.accuracy
            );
        }
        let _ = writeln!(out, "mean accuracy (sample level) {:.4}", self.mean_accuracy());
        let _ = writeln!(out, "mean Z        (sample level) {:.4}", self.mean_z());
        let _ = writeln!(out, "mean accuracy (slice level)  {:.4}", self.slice_mean_accuracy());
        let _ = writeln!(out, "mean Z        (slice level)  {:.4}", self.slice_mean_z());
        let _ = writeln!(out, "compound exact match         {:.4}", self.exact_match);
        if let Some(f) = self.flops {
            let _ = writeln!(out, "flops per slice              {f}");
        }
        out
    }

    /// Machine-readable rows: `level,fault,tp,tn,fp,fn,accuracy,precision,recall,f1,z`,
    /// then `mean` rows and the exact-match and FLOPs lines.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("level,fault,tp,tn,fp,fn,accuracy,precision,recall,f1,z\n");
        for (level, rows) in [("sample", &self.sample), ("slice", &self.slice)] {
            for r in rows {
                let (c, m) = (&r.counts, &r.metrics);
                let _ = writeln!(
                    out,
                    "{level},{},{},{},{},{},{},{},{},{},{}",
                    r.fault, c.tp, c.tn, c.fp, c.fn_, m.accuracy, m.precision, m.recall, m.f1, m.z
                );
            }
        }
        let _ = writeln!(out, "sample,mean,,,,,{},,,,{}", self.mean_accuracy(), self.mean_z());
        let _ = writeln!(out, "slice,mean,,,,,{},,,,{}", self.slice_mean_accuracy(), self.slice_mean_z());
        let _ = writeln!(out, "sample,exact_match,,,,,{},,,,", self.exact_match);
        if let Some(f) = self.flops {
            let _ = writeln!(out, "model,flops,,,,,{f},,,,");
        }
        out
    }
}

/// One line per report for side-by-side comparison.
pub fn comparison_table(reports: &[EvalReport]) -> String {
    let mut out = format!(
        "{:<24} {:>9} {:>9} {:>9} {:>9} {:>9} {:>12}\n",
        "cell", "acc", "z", "slice_acc", "slice_z", "exact", "flops"
    );
    for r in reports {
        let _ = writeln!(
            out,
            "{:<24} {:>9.4} {:>9.4} {:>9.4} {:>9.4} {:>9.4} {:>12}",
            r.name,
            r.mean_accuracy(),
            r.mean_z(),
            r.slice_mean_accuracy(),
            r.slice_mean_z(),
            r.exact_match,
            r.flops.map_or_else(|| "-".to_string(), |f| f.to_string())
        );
    }
    out
}

// ---------------------------------------------------------------------------
// PCA

#[derive(Debug, Clone, PartialEq)]
pub struct Pca {
    pub mean: Vec<f64>,
    /// All covariance eigenvalues, descending.
    pub eigenvalues: Vec<f64>,
    /// Top-k unit eigenvectors, one per row.
    pub components: Vec<Vec<f64>>,
    /// `samples x k` projections of the centered data.
    pub projected: Vec<Vec<f64>>,
}

impl Pca {
    /// Fraction of total variance carried by each kept component.
    pub fn explained_variance_ratio(&self) -> Vec<f64> {
        let total: f64 = self.eigenvalues.iter().map(|v| v.max(0.0)).sum();
        self.eigenvalues[..self.components.len()]
            .iter()
            .map(|v| if total > 0.0 { v.max(0.0) / total } else { 0.0 })
            .collect()
    }

    /// Maps projected rows back to the input space.
    pub fn back_project(&self, projected: &[Vec<f64>]) -> Vec<Vec<f64>> {
        projected
            .iter()
            .map(|p| {
                let mut x = self.mean.clone();
                for (w, comp) in p.iter().zip(&self.components) {
                    for (xi, ci) in x.iter_mut().zip(comp) {
                        *xi += w * ci;
                    }
                }
                x
            })
            .collect()
    }
}

/// Principal components of the rows of `data` from the sample covariance.
pub fn pca_project(data: &[Vec<f64>], k: usize) -> Result<Pca, EvalError> {
    let n = data.len();
    if n < 2 {
        return Err(EvalError::InsufficientSamples(n));
    }
    let dim = data[0].len();
    if data.iter().any(|r| r.len() != dim) {
        return Err(EvalError::ShapeError("rows of unequal length".into()));
    }
    if k > dim {
        return Err(EvalError::InvalidK { k, dim });
    }
    let mut mean = vec![0.0; dim];
    for r in data {
        for (m, v) in mean.iter_mut().zip(r) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let centered = DMatrix::from_fn(n, dim, |i, j| data[i][j] - mean[j]);
    let cov = (centered.transpose() * &centered) / (n as f64 - 1.0);
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..dim).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let eigenvalues = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let components: Vec<Vec<f64>> = order[..k]
        .iter()
        .map(|&i| {
            let mut v: Vec<f64> = eig.eigenvectors.column(i).iter().copied().collect();
            // fix the sign so the largest-magnitude entry is positive
            let big = v.iter().copied().fold(0.0f64, |a, x| if x.abs() > a.abs() { x } else { a });
            if big < 0.0 {
                v.iter_mut().for_each(|x| *x = -*x);
            }
            v
        })
        .collect();
    let projected = (0..n)
        .map(|i| {
            components
                .iter()
                .map(|c| c.iter().enumerate().map(|(j, cj)| centered[(i, j)] * cj).sum())
                .collect()
        })
        .collect();
    Ok(Pca {
        mean,
        eigenvalues,
        components,
        projected,
    })
}

/// Writes `label,pc1..pck` and one row per sample.
pub fn export_parallel_coordinates(projected: &[Vec<f64>], labels: &[String], path: &Path) -> Result<(), EvalError> {
    if projected.len() != labels.len() {
        return Err(EvalError::ShapeError(format!(
            "{} rows vs {} labels",
            projected.len(),
            labels.len()
        )));
    }
    let k = projected.first().map_or(0, Vec::len);
    if projected.iter().any(|r| r.len() != k) {
        return Err(EvalError::ShapeError("rows of unequal length".into()));
    }
    let mut out = String::from("label");
    for i in 1..=k {
        let _ = write!(out, ",pc{i}");
    }
    out.push('\n');
    for (row, label) in projected.iter().zip(labels) {
        if label.contains([',', '\n']) {
            return Err(EvalError::ShapeError(format!("label {label:?} cannot be written")));
        }
        out.push_str(label);
        for v in row {
            let _ = write!(out, ",{v}");
        }
        out.push('\n');
    }
    fs::write(path, out).map_err(|source| EvalError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Parses a file written by [`export_parallel_coordinates`].
pub fn read_parallel_coordinates(path: &Path) -> Result<(Vec<String>, Vec<Vec<f64>>), EvalError> {
    let text = fs::read_to_string(path).map_err(|source| EvalError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| EvalError::Malformed("empty file".into()))?;
    let cols = header.split(',').count();
    if !header.starts_with("label") {
        return Err(EvalError::Malformed("missing header".into()));
    }
    let mut labels = Vec::new();
    let mut rows = Vec::new();
    for line in lines {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != cols {
            return Err(EvalError::Malformed(format!("expected {cols} fields: {line}")));
        }
        labels.push(fields[0].to_string());
        rows.push(
            fields[1..]
                .iter()
                .map(|f| f.parse::<f64>().map_err(|_| EvalError::Malformed(format!("bad number {f:?}"))))
                .collect::<Result<Vec<_>, _>>()?,
        );
    }
    Ok((labels, rows))
}
