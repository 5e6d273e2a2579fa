use serde::{Deserialize, Serialize};

use super::{EmbeddingBundle, SampleMeta};

/// Predicate over sample metadata.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleFilter {
    All,
    GroundTruth(usize),
    ModelOutput(usize),
    Perturbation(String),
    Clean,
    Perturbed,
    Correct,
    Misclassified,
    And(Vec<SampleFilter>),
    Or(Vec<SampleFilter>),
    Not(Box<SampleFilter>),
}

impl SampleFilter {
    pub fn matches(&self, m: &SampleMeta) -> bool {
        match self {
            SampleFilter::All => true,
            SampleFilter::GroundTruth(c) => m.ground_truth == *c,
            SampleFilter::ModelOutput(c) => m.model_output == *c,
            SampleFilter::Perturbation(tag) => m.perturbation.as_str() == tag,
            SampleFilter::Clean => m.perturbation.is_clean(),
            SampleFilter::Perturbed => !m.perturbation.is_clean(),
            SampleFilter::Correct => m.is_correct(),
            SampleFilter::Misclassified => !m.is_correct(),
            SampleFilter::And(fs) => fs.iter().all(|f| f.matches(m)),
            SampleFilter::Or(fs) => fs.iter().any(|f| f.matches(m)),
            SampleFilter::Not(f) => !f.matches(m),
        }
    }

    pub fn and(self, other: SampleFilter) -> SampleFilter {
        match self {
            SampleFilter::All => other,
            SampleFilter::And(mut fs) => {
                fs.push(other);
                SampleFilter::And(fs)
            }
            f => SampleFilter::And(vec![f, other]),
        }
    }

    /// Human-readable rendering used in heatmap provenance.
    pub fn describe(&self) -> String {
        match self {
            SampleFilter::All => "all".into(),
            SampleFilter::GroundTruth(c) => format!("ground_truth={c}"),
            SampleFilter::ModelOutput(c) => format!("model_output={c}"),
            SampleFilter::Perturbation(t) => format!("perturbation={t}"),
            SampleFilter::Clean => "clean".into(),
            SampleFilter::Perturbed => "perturbed".into(),
            SampleFilter::Correct => "correct".into(),
            SampleFilter::Misclassified => "misclassified".into(),
            SampleFilter::And(fs) => fs.iter().map(|f| f.describe()).collect::<Vec<_>>().join(" & "),
            SampleFilter::Or(fs) => {
                format!("({})", fs.iter().map(|f| f.describe()).collect::<Vec<_>>().join(" | "))
            }
            SampleFilter::Not(f) => format!("!({})", f.describe()),
        }
    }
}

/// Indices of matching samples, in original order.
pub fn filter(bundle: &EmbeddingBundle, f: &SampleFilter) -> Vec<usize> {
    filter_within(&bundle.meta, 0..bundle.meta.len(), f)
}

/// Restricts an existing index list; order is preserved.
pub fn filter_within(
    meta: &[SampleMeta],
    indices: impl IntoIterator<Item = usize>,
    f: &SampleFilter,
) -> Vec<usize> {
    indices.into_iter().filter(|&i| f.matches(&meta[i])).collect()
}
