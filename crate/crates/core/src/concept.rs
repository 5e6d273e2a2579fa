//! Concept strength predicates and zero-shot classification by cosine
//! similarity in the oracle space.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{dot_f64, norm2_f64, Matrix};
use crate::scalar::Scalar;
use crate::store::{ConceptDictionary, DirectionSet};

/// Cosine similarity accumulated in `f64`, clamped to `[-1, 1]`.
pub fn cosine<A: Scalar, B: Scalar>(a: &[A], b: &[B]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch(format!("cosine of lengths {} and {}", a.len(), b.len())));
    }
    let na = norm2_f64(a);
    let nb = norm2_f64(b);
    if na == 0.0 || nb == 0.0 {
        return Err(Error::ZeroVector);
    }
    let d: f64 = a.iter().zip(b).map(|(&x, &y)| x.to_f64_lossy() * y.to_f64_lossy()).sum();
    Ok((d / (na * nb)).clamp(-1.0, 1.0))
}

/// Cosine of `embedding` against every direction, one per row.
pub fn similarities<T: Scalar>(embedding: &[T], dirs: &DirectionSet) -> Result<Vec<f64>> {
    if embedding.len() != dirs.dim() {
        return Err(Error::DimensionMismatch(format!(
            "embedding of dim {} against directions of dim {}",
            embedding.len(),
            dirs.dim()
        )));
    }
    let ne = norm2_f64(embedding);
    if ne == 0.0 {
        return Err(Error::ZeroVector);
    }
    dirs.matrix
        .iter_rows()
        .map(|d| {
            let nd = norm2_f64(d);
            if nd == 0.0 {
                return Err(Error::ZeroVector);
            }
            Ok((dot_f64(embedding, d) / (ne * nd)).clamp(-1.0, 1.0))
        })
        .collect()
}

/// Square boolean grid, row-major. Row `i`, column `j` refers to the
/// predicate "concept i > concept j".
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Mask {
    pub k: usize,
    pub cells: Vec<bool>,
}

impl Mask {
    pub fn empty(k: usize) -> Self {
        Self { k, cells: vec![false; k * k] }
    }

    pub fn from_fn(k: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut cells = Vec::with_capacity(k * k);
        for i in 0..k {
            for j in 0..k {
                cells.push(f(i, j));
            }
        }
        Self { k, cells }
    }

    pub fn get(&self, i: usize, j: usize) -> bool {
        self.cells[i * self.k + j]
    }

    pub fn count(&self) -> usize {
        self.cells.iter().filter(|&&c| c).count()
    }

    pub fn is_subset_of(&self, other: &Mask) -> bool {
        self.k == other.k && self.cells.iter().zip(&other.cells).all(|(&a, &b)| !a || b)
    }
}

/// Cells true at (relevant i, irrelevant j) for one class.
pub type RelevanceMask = Mask;

/// Evaluated strength predicates for a single embedding.
pub type PredicateGrid = Mask;

/// Cell of a concept grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct PredicateId {
    pub i: usize,
    pub j: usize,
}

/// Strict comparison of per-concept similarities: `grid[i][j] = s_i > s_j`.
pub fn grid_from_similarities(sims: &[f64]) -> PredicateGrid {
    Mask::from_fn(sims.len(), |i, j| sims[i] > sims[j])
}

/// Evaluates every predicate `con_i > con_j` for one oracle-space embedding.
/// Each cosine is computed once.
pub fn eval_predicates<T: Scalar>(embedding: &[T], concept_dirs: &DirectionSet) -> Result<PredicateGrid> {
    Ok(grid_from_similarities(&similarities(embedding, concept_dirs)?))
}

/// Zero-shot head: the class whose direction is most similar. Ties go to the
/// lowest class index.
pub fn zero_shot<T: Scalar>(embedding: &[T], class_dirs: &DirectionSet) -> Result<usize> {
    let sims = similarities(embedding, class_dirs)?;
    argmax_first(&sims).ok_or_else(|| Error::Empty("no class directions".into()))
}

pub(crate) fn argmax_first(values: &[f64]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, &v) in values.iter().enumerate() {
        match best {
            Some((_, b)) if !(v > b) => {}
            _ => best = Some((i, v)),
        }
    }
    best.map(|(i, _)| i)
}

/// Mean of caption embeddings, used as the direction of a concept or class.
pub fn concept_direction_from_captions<T: Scalar>(captions: &Matrix<T>) -> Result<Vec<T>> {
    if captions.rows() == 0 {
        return Err(Error::Empty("no caption embeddings".into()));
    }
    let mut acc = vec![0.0f64; captions.cols()];
    for r in captions.iter_rows() {
        for (a, &v) in acc.iter_mut().zip(r) {
            *a += v.to_f64_lossy();
        }
    }
    let n = captions.rows() as f64;
    Ok(acc.into_iter().map(|a| T::from_f64_lossy(a / n)).collect())
}

pub fn relevance_mask(class: usize, dictionary: &ConceptDictionary) -> Result<RelevanceMask> {
    if class >= dictionary.n_classes() {
        return Err(Error::UnknownClass(class.to_string()));
    }
    Ok(Mask::from_fn(dictionary.n_concepts(), |i, j| {
        dictionary.is_relevant(class, i) && !dictionary.is_relevant(class, j)
    }))
}
