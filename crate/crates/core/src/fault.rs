//! Encoder-vs-head fault localization and robust-predicate analysis.

use std::fmt::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::align::AffineMap;
use crate::concept::{zero_shot, Mask, PredicateId, RelevanceMask};
use crate::error::{Error, Result};
use crate::heatmap::{differential, Heatmap};
use crate::linalg::Matrix;
use crate::scalar::Scalar;
use crate::store::{DirectionSet, EmbeddingBundle, SampleMeta};

pub const REPORT_SCHEMA: &str = "semheat.fault/1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorLocus {
    NoError,
    EncoderError,
    HeadError,
    /// The oracle itself misclassifies the input; excluded from localization.
    OracleUnreliable,
}

/// Decision rule for one sample given the zero-shot verdicts on the mapped
/// model embedding and on the oracle embedding. Encoder errors take
/// precedence over head errors.
pub fn decide(ground_truth: usize, model_output: usize, zs_mapped: usize, zs_oracle: usize) -> ErrorLocus {
    if model_output == ground_truth {
        ErrorLocus::NoError
    } else if zs_oracle != ground_truth {
        ErrorLocus::OracleUnreliable
    } else if zs_mapped != zs_oracle {
        ErrorLocus::EncoderError
    } else {
        ErrorLocus::HeadError
    }
}

/// Localizes one sample. `mapped` is the model embedding carried into the
/// oracle space, `oracle` the oracle's own embedding of the same input.
pub fn localize<A: Scalar, B: Scalar>(
    mapped: &[A],
    oracle: &[B],
    ground_truth: usize,
    model_output: usize,
    class_dirs: &DirectionSet,
) -> Result<ErrorLocus> {
    if model_output == ground_truth {
        return Ok(ErrorLocus::NoError);
    }
    let zs_oracle = zero_shot(oracle, class_dirs)?;
    let zs_mapped = zero_shot(mapped, class_dirs)?;
    Ok(decide(ground_truth, model_output, zs_mapped, zs_oracle))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleLocus {
    pub sample_id: String,
    pub locus: ErrorLocus,
    pub zero_shot_mapped: usize,
    pub zero_shot_oracle: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct LocusCounts {
    pub no_error: usize,
    pub encoder: usize,
    pub head: usize,
    pub oracle_unreliable: usize,
}

impl LocusCounts {
    pub fn add(&mut self, locus: ErrorLocus) {
        match locus {
            ErrorLocus::NoError => self.no_error += 1,
            ErrorLocus::EncoderError => self.encoder += 1,
            ErrorLocus::HeadError => self.head += 1,
            ErrorLocus::OracleUnreliable => self.oracle_unreliable += 1,
        }
    }

    pub fn total(&self) -> usize {
        self.no_error + self.encoder + self.head + self.oracle_unreliable
    }

    pub fn misclassified(&self) -> usize {
        self.encoder + self.head + self.oracle_unreliable
    }

    /// Share of encoder errors among localized (encoder or head) errors.
    pub fn encoder_share(&self) -> Option<f64> {
        let localized = self.encoder + self.head;
        (localized > 0).then(|| self.encoder as f64 / localized as f64)
    }
}

impl std::ops::AddAssign for LocusCounts {
    fn add_assign(&mut self, o: Self) {
        self.no_error += o.no_error;
        self.encoder += o.encoder;
        self.head += o.head;
        self.oracle_unreliable += o.oracle_unreliable;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FaultReport {
    pub schema: String,
    pub per_sample: Vec<SampleLocus>,
    pub counts: LocusCounts,
    /// Fit quality of the aligner used, when known. Recorded, not enforced.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub aligner_r_squared: Option<f64>,
}

impl FaultReport {
    pub fn from_samples(per_sample: Vec<SampleLocus>) -> Self {
        let mut counts = LocusCounts::default();
        for s in &per_sample {
            counts.add(s.locus);
        }
        Self { schema: REPORT_SCHEMA.into(), per_sample, counts, aligner_r_squared: None }
    }
}

/// Localizes every sample given already-mapped model embeddings.
pub fn localize_embeddings<A: Scalar, B: Scalar>(
    mapped: &Matrix<A>,
    oracle: &Matrix<B>,
    meta: &[SampleMeta],
    class_dirs: &DirectionSet,
) -> Result<FaultReport> {
    if mapped.rows() != meta.len() || oracle.rows() != meta.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} mapped and {} oracle rows for {} samples",
            mapped.rows(),
            oracle.rows(),
            meta.len()
        )));
    }
    let per_sample = (0..meta.len())
        .into_par_iter()
        .map(|i| {
            let m = &meta[i];
            let zs_mapped = zero_shot(mapped.row(i), class_dirs)?;
            let zs_oracle = zero_shot(oracle.row(i), class_dirs)?;
            Ok(SampleLocus {
                sample_id: m.sample_id.clone(),
                locus: decide(m.ground_truth, m.model_output, zs_mapped, zs_oracle),
                zero_shot_mapped: zs_mapped,
                zero_shot_oracle: zs_oracle,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(FaultReport::from_samples(per_sample))
}

/// Maps the bundle's vision embeddings through `map` and localizes every
/// sample. `model_outputs` overrides the labels stored in the bundle.
pub fn batch_localize<T: Scalar>(
    bundle: &EmbeddingBundle,
    map: &AffineMap<T>,
    model_outputs: Option<&[usize]>,
) -> Result<FaultReport> {
    let oracle = bundle.oracle()?;
    let mapped = map.apply_rows(&bundle.vision.cast::<T>())?;
    let meta: Vec<SampleMeta> = match model_outputs {
        None => bundle.meta.clone(),
        Some(outs) => {
            if outs.len() != bundle.len() {
                return Err(Error::DimensionMismatch(format!(
                    "{} model outputs for {} samples",
                    outs.len(),
                    bundle.len()
                )));
            }
            bundle
                .meta
                .iter()
                .zip(outs)
                .map(|(m, &o)| SampleMeta { model_output: o, ..m.clone() })
                .collect()
        }
    };
    localize_embeddings(&mapped, oracle, &meta, &bundle.class_dirs)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobustnessReport {
    pub threshold: f64,
    pub robust_mask: Mask,
    pub diff: Heatmap,
    pub n_robust_relevant: usize,
    pub n_nonrobust_relevant: usize,
}

impl RobustnessReport {
    pub fn nonrobust_relevant_cells(&self, relevance: &RelevanceMask) -> Vec<PredicateId> {
        let k = self.robust_mask.k;
        let mut out = Vec::new();
        for i in 0..k {
            for j in 0..k {
                if relevance.get(i, j) && !self.robust_mask.get(i, j) {
                    out.push(PredicateId { i, j });
                }
            }
        }
        out
    }
}

/// Predicates whose clean vs perturbed satisfaction differs by at most
/// `threshold` are robust.
pub fn robustness_analysis(
    clean_summary: &Heatmap,
    perturbed_summary: &Heatmap,
    threshold: f64,
    relevance: &RelevanceMask,
) -> Result<RobustnessReport> {
    for h in [clean_summary, perturbed_summary] {
        if !h.kind.is_summary() {
            return Err(Error::WrongKind { expected: "a summary heatmap", found: h.kind.to_string() });
        }
    }
    if !(threshold >= 0.0) {
        return Err(Error::Config(format!("robustness threshold {threshold} must be non-negative")));
    }
    let diff = differential(clean_summary, perturbed_summary)?;
    if relevance.k != diff.k {
        return Err(Error::DimensionMismatch(format!(
            "relevance mask is {0}x{0}, heatmaps are {1}x{1}",
            relevance.k, diff.k
        )));
    }
    let robust_mask = Mask { k: diff.k, cells: diff.grid.iter().map(|&d| d <= threshold).collect() };
    let (mut n_robust_relevant, mut n_nonrobust_relevant) = (0, 0);
    for (&rel, &rob) in relevance.cells.iter().zip(&robust_mask.cells) {
        if rel {
            if rob {
                n_robust_relevant += 1;
            } else {
                n_nonrobust_relevant += 1;
            }
        }
    }
    Ok(RobustnessReport { threshold, robust_mask, diff, n_robust_relevant, n_nonrobust_relevant })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedCell {
    pub cell: PredicateId,
    pub diff: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DifferentialSummary {
    pub mean_diff: f64,
    pub cells_above_mean: usize,
    /// Every cell, largest difference first; ties in `(i, j)` order.
    pub top_cells: Vec<RankedCell>,
}

/// Compares the ground-truth summary of correctly classified inputs with
/// that of an error population.
pub fn differential_fault_summary(correct_summary: &Heatmap, error_summary: &Heatmap) -> Result<DifferentialSummary> {
    let diff = differential(correct_summary, error_summary)?;
    let k = diff.k;
    let n = diff.grid.len();
    let mean_diff = if n == 0 { 0.0 } else { diff.grid.iter().sum::<f64>() / n as f64 };
    let cells_above_mean = diff.grid.iter().filter(|&&d| d > mean_diff).count();
    let mut top_cells: Vec<RankedCell> = (0..n)
        .map(|idx| RankedCell { cell: PredicateId { i: idx / k, j: idx % k }, diff: diff.grid[idx] })
        .collect();
    // sort_by is stable, so equal differences keep (i, j) order
    top_cells.sort_by(|a, b| b.diff.total_cmp(&a.diff));
    Ok(DifferentialSummary { mean_diff, cells_above_mean, top_cells })
}

/// Two-column table of encoder/head error counts, one row per label.
pub fn render_fault_table(rows: &[(String, LocusCounts)]) -> String {
    let w = rows.iter().map(|(l, _)| l.len()).max().unwrap_or(0).max("location".len());
    let mut s = String::new();
    let _ = writeln!(s, "{:<w$} | {:>15} | {:>12} | {:>17}", "location", "# encoder error", "# head error", "# oracle unreliable");
    let _ = writeln!(s, "{}", "-".repeat(w + 55));
    for (label, c) in rows {
        let _ = writeln!(s, "{label:<w$} | {:>15} | {:>12} | {:>17}", c.encoder, c.head, c.oracle_unreliable);
    }
    s
}
