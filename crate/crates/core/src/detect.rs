//! Runtime defect detection by comparing an input's predicate grid with
//! binarized per-class profiles.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::concept::{eval_predicates, Mask};
use crate::error::{Error, Result};
use crate::heatmap::{binarize, mask_iou, summary, SummaryKind};
use crate::linalg::Matrix;
use crate::scalar::Scalar;
use crate::store::DirectionSet;

pub const PROFILE_SCHEMA: &str = "semheat.profile/1";
pub const DEFAULT_THRESHOLD: f64 = 0.6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DetectorMode {
    Adversarial,
    Misclassification,
}

/// Binary grids are stored row-major as 0/1 values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassProfile {
    pub class: String,
    pub n_positive: usize,
    pub n_negative: usize,
    pub positive: Option<Vec<u8>>,
    pub negative: Option<Vec<u8>>,
}

impl ClassProfile {
    pub fn is_covered(&self) -> bool {
        self.positive.is_some() && self.negative.is_some()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorProfile {
    pub schema: String,
    pub mode: DetectorMode,
    pub threshold: f64,
    pub concept_names: Vec<String>,
    pub classes: Vec<ClassProfile>,
}

fn to_bits(m: &Mask) -> Vec<u8> {
    m.cells.iter().map(|&c| c as u8).collect()
}

fn from_bits(k: usize, bits: &[u8]) -> Mask {
    Mask { k, cells: bits.iter().map(|&b| b == 1).collect() }
}

impl DetectorProfile {
    pub fn k(&self) -> usize {
        self.concept_names.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema != PROFILE_SCHEMA {
            return Err(Error::Metadata(format!("unsupported profile schema {:?}", self.schema)));
        }
        let cells = self.k() * self.k();
        for c in &self.classes {
            for grid in [&c.positive, &c.negative].into_iter().flatten() {
                if grid.len() != cells {
                    return Err(Error::DimensionMismatch(format!(
                        "profile grid of class {} has {} cells, expected {cells}",
                        c.class,
                        grid.len()
                    )));
                }
                if grid.iter().any(|&b| b > 1) {
                    return Err(Error::NonBinary);
                }
            }
        }
        Ok(())
    }

    pub fn covered_classes(&self) -> Vec<usize> {
        (0..self.classes.len()).filter(|&c| self.classes[c].is_covered()).collect()
    }

    /// Positive and negative masks of a covered class.
    pub fn masks(&self, class: usize) -> Result<(Mask, Mask)> {
        let entry = self.classes.get(class).ok_or(Error::UncoveredClass(class))?;
        match (&entry.positive, &entry.negative) {
            (Some(p), Some(n)) => Ok((from_bits(self.k(), p), from_bits(self.k(), n))),
            _ => Err(Error::UncoveredClass(class)),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let p: Self = serde_json::from_str(text)?;
        p.validate()?;
        Ok(p)
    }
}

fn class_mask<T: Scalar>(
    set: &Matrix<T>,
    kind: SummaryKind,
    concept_dirs: &DirectionSet,
    names: &[String],
    t: f64,
) -> Result<Option<Vec<u8>>> {
    if set.rows() == 0 {
        return Ok(None);
    }
    let h = summary(set, concept_dirs, names, kind, None, "profile")?;
    Ok(Some(to_bits(&binarize(&h, t)?.to_mask()?)))
}

/// Builds a profile from per-class sets: `negatives[c]` holds the clean,
/// correctly classified inputs of class `c`, `positives[c]` the positive
/// inputs the model assigns to `c`. Classes with an empty set are uncovered.
pub fn build_profile<T: Scalar>(
    negatives: &[Matrix<T>],
    positives: &[Matrix<T>],
    concept_dirs: &DirectionSet,
    concept_names: &[String],
    class_names: &[String],
    t: f64,
    mode: DetectorMode,
) -> Result<DetectorProfile> {
    if negatives.len() != class_names.len() || positives.len() != class_names.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} negative and {} positive sets for {} classes",
            negatives.len(),
            positives.len(),
            class_names.len()
        )));
    }
    if !(t > 0.0 && t <= 1.0) {
        return Err(Error::Config(format!("binarization threshold {t} outside (0, 1]")));
    }
    let classes = class_names
        .iter()
        .zip(negatives.iter().zip(positives))
        .map(|(name, (neg, pos))| {
            Ok(ClassProfile {
                class: name.clone(),
                n_positive: pos.rows(),
                n_negative: neg.rows(),
                positive: class_mask(pos, SummaryKind::OutputLabel, concept_dirs, concept_names, t)?,
                negative: class_mask(neg, SummaryKind::GroundTruth, concept_dirs, concept_names, t)?,
            })
        })
        .collect::<Result<_>>()?;
    Ok(DetectorProfile { schema: PROFILE_SCHEMA.into(), mode, threshold: t, concept_names: concept_names.to_vec(), classes })
}

/// Splits rows into per-class sets; rows whose `keep` flag is false are dropped.
pub fn group_by_class<T: Scalar>(
    embeddings: &Matrix<T>,
    classes: &[usize],
    keep: &[bool],
    n_classes: usize,
) -> Result<Vec<Matrix<T>>> {
    if classes.len() != embeddings.rows() || keep.len() != embeddings.rows() {
        return Err(Error::DimensionMismatch("grouping labels do not match the embeddings".into()));
    }
    let mut idx = vec![Vec::new(); n_classes];
    for (i, (&c, &k)) in classes.iter().zip(keep).enumerate() {
        if k {
            idx.get_mut(c).ok_or_else(|| Error::UnknownClass(c.to_string()))?.push(i);
        }
    }
    Ok(idx.iter().map(|ix| embeddings.select_rows(ix)).collect())
}

/// Adversarial profile: negatives are clean inputs classified correctly,
/// grouped by ground truth; positives are perturbed inputs grouped by the
/// model's output.
#[allow(clippy::too_many_arguments)]
pub fn build_adversarial_profile<T: Scalar>(
    clean: &Matrix<T>,
    clean_truth: &[usize],
    clean_output: &[usize],
    perturbed: &Matrix<T>,
    perturbed_output: &[usize],
    concept_dirs: &DirectionSet,
    concept_names: &[String],
    class_names: &[String],
    t: f64,
) -> Result<DetectorProfile> {
    let n = class_names.len();
    if clean_output.len() != clean_truth.len() {
        return Err(Error::DimensionMismatch("clean labels and outputs differ in length".into()));
    }
    let correct: Vec<bool> = clean_truth.iter().zip(clean_output).map(|(a, b)| a == b).collect();
    let negatives = group_by_class(clean, clean_truth, &correct, n)?;
    let positives = group_by_class(perturbed, perturbed_output, &vec![true; perturbed.rows()], n)?;
    build_profile(&negatives, &positives, concept_dirs, concept_names, class_names, t, DetectorMode::Adversarial)
}

/// Misclassification profile: negatives are correct inputs grouped by ground
/// truth, positives misclassified inputs grouped by the model's output.
pub fn build_misclassification_profile<T: Scalar>(
    embeddings: &Matrix<T>,
    truth: &[usize],
    output: &[usize],
    concept_dirs: &DirectionSet,
    concept_names: &[String],
    class_names: &[String],
    t: f64,
) -> Result<DetectorProfile> {
    let n = class_names.len();
    if output.len() != truth.len() {
        return Err(Error::DimensionMismatch("labels and outputs differ in length".into()));
    }
    let correct: Vec<bool> = truth.iter().zip(output).map(|(a, b)| a == b).collect();
    let wrong: Vec<bool> = correct.iter().map(|c| !c).collect();
    let negatives = group_by_class(embeddings, truth, &correct, n)?;
    let positives = group_by_class(embeddings, output, &wrong, n)?;
    build_profile(&negatives, &positives, concept_dirs, concept_names, class_names, t, DetectorMode::Misclassification)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Flagged,
    Clean,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectionResult {
    pub verdict: Verdict,
    pub iou_p: f64,
    pub iou_n: f64,
    pub class_used: usize,
}

/// Classifies one runtime input from its oracle-space embedding and the
/// model's predicted class. Flags only when `iou_p > iou_n`.
pub fn detect<T: Scalar>(
    embedding: &[T],
    predicted_class: usize,
    profile: &DetectorProfile,
    concept_dirs: &DirectionSet,
) -> Result<DetectionResult> {
    if concept_dirs.len() != profile.k() {
        return Err(Error::DimensionMismatch(format!(
            "{} concept directions for a {}-concept profile",
            concept_dirs.len(),
            profile.k()
        )));
    }
    let (pos, neg) = profile.masks(predicted_class)?;
    let grid = eval_predicates(embedding, concept_dirs)?;
    let iou_p = mask_iou(&grid, &pos);
    let iou_n = mask_iou(&grid, &neg);
    let verdict = if iou_p > iou_n { Verdict::Flagged } else { Verdict::Clean };
    Ok(DetectionResult { verdict, iou_p, iou_n, class_used: predicted_class })
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ClassAccuracy {
    pub class: String,
    pub n_positive: usize,
    pub n_negative: usize,
    pub flagged_positive: usize,
    pub passed_negative: usize,
    /// Inputs whose predicted class is uncovered.
    pub abstained: usize,
    pub a_p: Option<f64>,
    pub a_n: Option<f64>,
}

impl ClassAccuracy {
    fn finish(mut self) -> Self {
        self.a_p = (self.n_positive > 0).then(|| self.flagged_positive as f64 / self.n_positive as f64);
        self.a_n = (self.n_negative > 0).then(|| self.passed_negative as f64 / self.n_negative as f64);
        self
    }

    fn merge(&mut self, o: &ClassAccuracy) {
        self.n_positive += o.n_positive;
        self.n_negative += o.n_negative;
        self.flagged_positive += o.flagged_positive;
        self.passed_negative += o.passed_negative;
        self.abstained += o.abstained;
    }
}

/// Per-class detection accuracies, grouped by ground-truth class, with a
/// sample-weighted total.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyTable {
    pub per_class: Vec<ClassAccuracy>,
    pub total: ClassAccuracy,
}

/// Runtime inputs with their truth tags.
pub struct RuntimeSet<'a, T> {
    pub embeddings: &'a Matrix<T>,
    pub truth: &'a [usize],
    pub predicted: &'a [usize],
    /// True for perturbed (or misclassified) inputs.
    pub positive: &'a [bool],
}

/// Scores the detector. Inputs predicted as an uncovered class are counted
/// as abstentions and excluded from `a_p` and `a_n`.
pub fn evaluate<T: Scalar>(profile: &DetectorProfile, concept_dirs: &DirectionSet, set: &RuntimeSet<'_, T>) -> Result<AccuracyTable> {
    let n = set.embeddings.rows();
    if set.truth.len() != n || set.predicted.len() != n || set.positive.len() != n {
        return Err(Error::DimensionMismatch("runtime labels do not match the embeddings".into()));
    }
    let results: Vec<Option<DetectionResult>> = (0..n)
        .into_par_iter()
        .map(|i| match detect(set.embeddings.row(i), set.predicted[i], profile, concept_dirs) {
            Ok(r) => Ok(Some(r)),
            Err(Error::UncoveredClass(_)) => Ok(None),
            Err(e) => Err(e),
        })
        .collect::<Result<_>>()?;
    let mut per_class: Vec<ClassAccuracy> =
        profile.classes.iter().map(|c| ClassAccuracy { class: c.class.clone(), ..Default::default() }).collect();
    for (i, r) in results.iter().enumerate() {
        let row = per_class.get_mut(set.truth[i]).ok_or_else(|| Error::UnknownClass(set.truth[i].to_string()))?;
        match r {
            None => row.abstained += 1,
            Some(r) if set.positive[i] => {
                row.n_positive += 1;
                row.flagged_positive += (r.verdict == Verdict::Flagged) as usize;
            }
            Some(r) => {
                row.n_negative += 1;
                row.passed_negative += (r.verdict == Verdict::Clean) as usize;
            }
        }
    }
    let mut total = ClassAccuracy { class: "total".into(), ..Default::default() };
    for row in &per_class {
        total.merge(row);
    }
    Ok(AccuracyTable { per_class: per_class.into_iter().map(ClassAccuracy::finish).collect(), total: total.finish() })
}

/// Seeded shuffle of `0..n` split into offline and online parts, the first
/// holding `round(n * fraction)` indices. Both parts are sorted.
pub fn split_indices(n: usize, fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::Config(format!("split fraction {fraction} outside [0, 1]")));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let cut = (n as f64 * fraction).round() as usize;
    let mut offline = idx[..cut].to_vec();
    let mut online = idx[cut..].to_vec();
    offline.sort_unstable();
    online.sort_unstable();
    Ok((offline, online))
}
