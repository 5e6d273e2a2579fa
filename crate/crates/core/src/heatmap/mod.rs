//! Semantic heatmaps: k×k grids of strength-predicate statistics.

mod render;

use std::fmt;
use std::path::Path;

use num_rational::Ratio;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::concept::{eval_predicates, Mask, PredicateGrid};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::scalar::Scalar;
use crate::store::DirectionSet;

pub use render::{render_svg, render_text, RenderOptions};

pub const HEATMAP_SCHEMA: &str = "semheat.heatmap/1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeatmapKind {
    Single,
    GroundTruthSummary,
    OutputLabelSummary,
    Differential,
    Binarized,
}

impl HeatmapKind {
    pub fn is_summary(self) -> bool {
        matches!(self, HeatmapKind::GroundTruthSummary | HeatmapKind::OutputLabelSummary)
    }

    pub fn is_binary(self) -> bool {
        matches!(self, HeatmapKind::Single | HeatmapKind::Binarized)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            HeatmapKind::Single => "single",
            HeatmapKind::GroundTruthSummary => "ground_truth_summary",
            HeatmapKind::OutputLabelSummary => "output_label_summary",
            HeatmapKind::Differential => "differential",
            HeatmapKind::Binarized => "binarized",
        }
    }
}

impl fmt::Display for HeatmapKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Which label a summary groups by.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SummaryKind {
    GroundTruth,
    OutputLabel,
}

impl From<SummaryKind> for HeatmapKind {
    fn from(k: SummaryKind) -> Self {
        match k {
            SummaryKind::GroundTruth => HeatmapKind::GroundTruthSummary,
            SummaryKind::OutputLabel => HeatmapKind::OutputLabelSummary,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Provenance {
    pub class: Option<String>,
    pub filter: String,
    pub sample_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Heatmap {
    #[serde(default = "schema_tag")]
    pub schema: String,
    pub kind: HeatmapKind,
    pub k: usize,
    pub concept_names: Vec<String>,
    pub provenance: Provenance,
    /// Row-major, `grid[i * k + j]` is the value of predicate `i > j`.
    pub grid: Vec<f64>,
    /// Satisfaction counts behind a summary; `grid = counts / sample_count`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub counts: Option<Vec<u64>>,
}

fn schema_tag() -> String {
    HEATMAP_SCHEMA.to_string()
}

impl Heatmap {
    fn build(
        kind: HeatmapKind,
        concept_names: &[String],
        provenance: Provenance,
        grid: Vec<f64>,
        counts: Option<Vec<u64>>,
    ) -> Self {
        Self {
            schema: schema_tag(),
            kind,
            k: concept_names.len(),
            concept_names: concept_names.to_vec(),
            provenance,
            grid,
            counts,
        }
    }

    /// Checks shape and range invariants, e.g. after deserialization.
    pub fn validate(&self) -> Result<()> {
        if self.grid.len() != self.k * self.k || self.concept_names.len() != self.k {
            return Err(Error::DimensionMismatch(format!(
                "heatmap with k={} has {} cells and {} names",
                self.k,
                self.grid.len(),
                self.concept_names.len()
            )));
        }
        if self.grid.iter().any(|v| !v.is_finite() || *v < 0.0 || *v > 1.0) {
            return Err(Error::Invariant("heatmap cells must lie in [0, 1]".into()));
        }
        if self.kind.is_binary() && !self.is_binary_valued() {
            return Err(Error::NonBinary);
        }
        if self.kind.is_summary() && self.provenance.sample_count == 0 {
            return Err(Error::Invariant("summary heatmap over zero samples".into()));
        }
        if let Some(c) = &self.counts {
            if c.len() != self.grid.len() {
                return Err(Error::DimensionMismatch("count grid shape".into()));
            }
        }
        Ok(())
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.grid[i * self.k + j]
    }

    pub fn is_binary_valued(&self) -> bool {
        self.grid.iter().all(|&v| v == 0.0 || v == 1.0)
    }

    /// Exact satisfaction ratio of a summary cell.
    pub fn ratio(&self, i: usize, j: usize) -> Option<Ratio<u64>> {
        let counts = self.counts.as_ref()?;
        Some(Ratio::new(counts[i * self.k + j], self.provenance.sample_count as u64))
    }

    /// Cells equal to 1, as a mask.
    pub fn to_mask(&self) -> Result<Mask> {
        if !self.is_binary_valued() {
            return Err(Error::NonBinary);
        }
        Ok(Mask { k: self.k, cells: self.grid.iter().map(|&v| v == 1.0).collect() })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let h: Heatmap = serde_json::from_str(text)?;
        h.validate()?;
        Ok(h)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()? + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_json(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }
}

fn check_names(concept_dirs: &DirectionSet, concept_names: &[String]) -> Result<()> {
    if concept_dirs.len() != concept_names.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} concept directions for {} names",
            concept_dirs.len(),
            concept_names.len()
        )));
    }
    Ok(())
}

fn mask_to_grid(mask: &PredicateGrid) -> Vec<f64> {
    mask.cells.iter().map(|&c| if c { 1.0 } else { 0.0 }).collect()
}

/// 0/1 heatmap of the predicates satisfied by one oracle-space embedding.
pub fn single_input<T: Scalar>(
    embedding: &[T],
    concept_dirs: &DirectionSet,
    concept_names: &[String],
) -> Result<Heatmap> {
    check_names(concept_dirs, concept_names)?;
    let grid = eval_predicates(embedding, concept_dirs)?;
    Ok(Heatmap::build(
        HeatmapKind::Single,
        concept_names,
        Provenance { class: None, filter: "single input".into(), sample_count: 1 },
        mask_to_grid(&grid),
        None,
    ))
}

/// Per-cell satisfaction counts over the rows, merged by integer addition.
pub fn predicate_counts<T: Scalar>(embeddings: &Matrix<T>, concept_dirs: &DirectionSet) -> Result<Vec<u64>> {
    let k = concept_dirs.len();
    (0..embeddings.rows())
        .into_par_iter()
        .map(|r| eval_predicates(embeddings.row(r), concept_dirs))
        .try_fold(
            || vec![0u64; k * k],
            |mut acc, grid| {
                for (a, &c) in acc.iter_mut().zip(&grid?.cells) {
                    *a += c as u64;
                }
                Ok(acc)
            },
        )
        .try_reduce(
            || vec![0u64; k * k],
            |mut a, b| {
                for (x, y) in a.iter_mut().zip(b) {
                    *x += y;
                }
                Ok(a)
            },
        )
}

/// Summary heatmap over an already-filtered set of embeddings: each cell is
/// the fraction of inputs satisfying the predicate.
pub fn summary<T: Scalar>(
    embeddings: &Matrix<T>,
    concept_dirs: &DirectionSet,
    concept_names: &[String],
    kind: SummaryKind,
    class: Option<String>,
    filter: impl Into<String>,
) -> Result<Heatmap> {
    check_names(concept_dirs, concept_names)?;
    if embeddings.rows() == 0 {
        return Err(Error::Empty("summary heatmap over an empty set".into()));
    }
    let counts = predicate_counts(embeddings, concept_dirs)?;
    Ok(summary_from_counts(concept_names, kind, counts, embeddings.rows(), class, filter.into()))
}

pub fn summary_from_counts(
    concept_names: &[String],
    kind: SummaryKind,
    counts: Vec<u64>,
    sample_count: usize,
    class: Option<String>,
    filter: String,
) -> Heatmap {
    let n = sample_count as f64;
    let grid = counts.iter().map(|&c| c as f64 / n).collect();
    Heatmap::build(kind.into(), concept_names, Provenance { class, filter, sample_count }, grid, Some(counts))
}

fn check_same_axes(a: &Heatmap, b: &Heatmap) -> Result<()> {
    if a.k != b.k || a.concept_names != b.concept_names {
        return Err(Error::DimensionMismatch(format!(
            "heatmaps over different concept axes (k={} vs k={})",
            a.k, b.k
        )));
    }
    Ok(())
}

/// Cell-wise absolute difference.
pub fn differential(h1: &Heatmap, h2: &Heatmap) -> Result<Heatmap> {
    check_same_axes(h1, h2)?;
    let grid = h1.grid.iter().zip(&h2.grid).map(|(a, b)| (a - b).abs()).collect();
    let provenance = Provenance {
        class: h1.provenance.class.clone().or_else(|| h2.provenance.class.clone()),
        filter: format!("|[{}] - [{}]|", h1.provenance.filter, h2.provenance.filter),
        sample_count: h1.provenance.sample_count + h2.provenance.sample_count,
    };
    Ok(Heatmap::build(HeatmapKind::Differential, &h1.concept_names, provenance, grid, None))
}

/// 1 where the summary cell is at least `t`, 0 elsewhere.
pub fn binarize(h: &Heatmap, t: f64) -> Result<Heatmap> {
    if !h.kind.is_summary() {
        return Err(Error::WrongKind { expected: "a summary heatmap", found: h.kind.to_string() });
    }
    if !(t > 0.0 && t <= 1.0) {
        return Err(Error::Config(format!("binarization threshold {t} outside (0, 1]")));
    }
    let grid = h.grid.iter().map(|&v| if v >= t { 1.0 } else { 0.0 }).collect();
    let provenance = Provenance { filter: format!("{} >= {t}", h.provenance.filter), ..h.provenance.clone() };
    Ok(Heatmap::build(HeatmapKind::Binarized, &h.concept_names, provenance, grid, None))
}

/// Intersection over union of the 1-cells; two empty maps have IoU 1.
pub fn iou(b1: &Heatmap, b2: &Heatmap) -> Result<f64> {
    check_same_axes(b1, b2)?;
    Ok(mask_iou(&b1.to_mask()?, &b2.to_mask()?))
}

pub fn mask_iou(a: &Mask, b: &Mask) -> f64 {
    debug_assert_eq!(a.k, b.k);
    let (mut inter, mut union) = (0usize, 0usize);
    for (&x, &y) in a.cells.iter().zip(&b.cells) {
        inter += (x && y) as usize;
        union += (x || y) as usize;
    }
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}
