//! Embedding data model: matrices, sample metadata, concept dictionaries and
//! the bundles that tie them together.

mod filter;
pub mod format;
mod rival10;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;

pub use filter::{filter, filter_within, SampleFilter};
pub use format::{load_bundle, save_bundle};
pub use rival10::{parse_dictionary_toml, rival10_dictionary};

/// Embeddings are exchanged at 32-bit precision.
pub type EmbeddingMatrix = Matrix<f32>;

fn check_finite(m: &EmbeddingMatrix, what: &str) -> Result<()> {
    if m.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(what.to_string()))
    }
}

/// Perturbation tag of a sample: `clean` or the name of the attack applied.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PerturbationTag(pub String);

impl PerturbationTag {
    pub const CLEAN: &'static str = "clean";

    pub fn clean() -> Self {
        Self(Self::CLEAN.to_string())
    }

    pub fn new(tag: impl Into<String>) -> Self {
        Self(tag.into())
    }

    pub fn is_clean(&self) -> bool {
        self.0 == Self::CLEAN
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl Default for PerturbationTag {
    fn default() -> Self {
        Self::clean()
    }
}

impl std::fmt::Display for PerturbationTag {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleMeta {
    pub sample_id: String,
    pub ground_truth: usize,
    pub model_output: usize,
    #[serde(default)]
    pub perturbation: PerturbationTag,
}

impl SampleMeta {
    pub fn is_correct(&self) -> bool {
        self.ground_truth == self.model_output
    }
}

/// Ordered concept and class names plus the relevant concepts of each class.
///
/// The orderings here fix the axes of every grid in the toolkit.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConceptDictionary {
    pub concepts: Vec<String>,
    pub classes: Vec<String>,
    /// `relevant[c]` holds sorted concept indices relevant for class `c`.
    pub relevant: Vec<Vec<usize>>,
}

impl ConceptDictionary {
    /// Builds a dictionary from names; relevant concepts are looked up by name.
    pub fn from_names<S: AsRef<str>>(
        concepts: &[S],
        classes: &[(S, Vec<S>)],
    ) -> Result<Self> {
        let concepts: Vec<String> = concepts.iter().map(|c| c.as_ref().to_string()).collect();
        let mut names = Vec::with_capacity(classes.len());
        let mut relevant = Vec::with_capacity(classes.len());
        for (class, rel) in classes {
            let mut idx = Vec::with_capacity(rel.len());
            for r in rel {
                let i = concepts.iter().position(|c| c == r.as_ref()).ok_or_else(|| {
                    Error::Metadata(format!(
                        "class {} lists unknown concept {}",
                        class.as_ref(),
                        r.as_ref()
                    ))
                })?;
                idx.push(i);
            }
            idx.sort_unstable();
            names.push(class.as_ref().to_string());
            relevant.push(idx);
        }
        let dict = Self { concepts, classes: names, relevant };
        dict.validate()?;
        Ok(dict)
    }

    pub fn validate(&self) -> Result<()> {
        fn unique(names: &[String], what: &str) -> Result<()> {
            let mut seen = std::collections::HashSet::new();
            for n in names {
                if !seen.insert(n.as_str()) {
                    return Err(Error::Metadata(format!("duplicate {what} name {n:?}")));
                }
            }
            Ok(())
        }
        unique(&self.concepts, "concept")?;
        unique(&self.classes, "class")?;
        if self.relevant.len() != self.classes.len() {
            return Err(Error::Metadata(format!(
                "{} relevant sets for {} classes",
                self.relevant.len(),
                self.classes.len()
            )));
        }
        for (c, rel) in self.relevant.iter().enumerate() {
            if rel.is_empty() {
                return Err(Error::Metadata(format!("class {} has no relevant concepts", self.classes[c])));
            }
            if rel.iter().any(|&i| i >= self.concepts.len()) {
                return Err(Error::Metadata(format!("class {} references a missing concept", self.classes[c])));
            }
            if rel.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::Metadata(format!(
                    "relevant set of class {} must be strictly increasing",
                    self.classes[c]
                )));
            }
        }
        Ok(())
    }

    pub fn n_concepts(&self) -> usize {
        self.concepts.len()
    }

    pub fn n_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn class_index(&self, name: &str) -> Option<usize> {
        self.classes.iter().position(|c| c == name)
    }

    pub fn concept_index(&self, name: &str) -> Option<usize> {
        self.concepts.iter().position(|c| c == name)
    }

    /// Resolves a class given either by name or by decimal index.
    pub fn resolve_class(&self, key: &str) -> Result<usize> {
        if let Some(i) = self.class_index(key) {
            return Ok(i);
        }
        match key.parse::<usize>() {
            Ok(i) if i < self.n_classes() => Ok(i),
            _ => Err(Error::UnknownClass(key.to_string())),
        }
    }

    pub fn is_relevant(&self, class: usize, concept: usize) -> bool {
        self.relevant[class].binary_search(&concept).is_ok()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DirectionKind {
    ConceptDirections,
    ClassDirections,
}

/// One direction row per concept (or per class) in the oracle space.
#[derive(Debug, Clone, PartialEq)]
pub struct DirectionSet {
    pub matrix: EmbeddingMatrix,
    pub kind: DirectionKind,
}

impl DirectionSet {
    pub fn new(matrix: EmbeddingMatrix, kind: DirectionKind) -> Result<Self> {
        let set = Self { matrix, kind };
        set.validate_rows()?;
        Ok(set)
    }

    fn validate_rows(&self) -> Result<()> {
        check_finite(&self.matrix, "direction set")?;
        for (i, row) in self.matrix.iter_rows().enumerate() {
            if row.iter().all(|&v| v == 0.0) {
                return Err(Error::Invariant(format!("direction row {i} is zero")));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.matrix.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.matrix.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.matrix.cols()
    }

    pub fn direction(&self, i: usize) -> &[f32] {
        self.matrix.row(i)
    }
}

/// Matched model embeddings, oracle embeddings, labels and direction sets.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingBundle {
    /// Encoder outputs of the model under analysis.
    pub vision: EmbeddingMatrix,
    /// Oracle image embeddings, when the producer had access to the oracle.
    pub oracle: Option<EmbeddingMatrix>,
    pub meta: Vec<SampleMeta>,
    pub dictionary: ConceptDictionary,
    pub concept_dirs: DirectionSet,
    pub class_dirs: DirectionSet,
}

impl EmbeddingBundle {
    pub fn validate(&self) -> Result<()> {
        self.dictionary.validate()?;
        check_finite(&self.vision, "vision embeddings")?;
        if self.vision.rows() != self.meta.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} vision rows for {} samples",
                self.vision.rows(),
                self.meta.len()
            )));
        }
        if self.concept_dirs.kind != DirectionKind::ConceptDirections
            || self.class_dirs.kind != DirectionKind::ClassDirections
        {
            return Err(Error::Invariant("direction set kinds swapped".into()));
        }
        self.concept_dirs.validate_rows()?;
        self.class_dirs.validate_rows()?;
        if self.concept_dirs.len() != self.dictionary.n_concepts() {
            return Err(Error::DimensionMismatch(format!(
                "{} concept directions for {} concepts",
                self.concept_dirs.len(),
                self.dictionary.n_concepts()
            )));
        }
        if self.class_dirs.len() != self.dictionary.n_classes() {
            return Err(Error::DimensionMismatch(format!(
                "{} class directions for {} classes",
                self.class_dirs.len(),
                self.dictionary.n_classes()
            )));
        }
        if self.concept_dirs.dim() != self.class_dirs.dim() {
            return Err(Error::DimensionMismatch(format!(
                "concept directions have dim {}, class directions {}",
                self.concept_dirs.dim(),
                self.class_dirs.dim()
            )));
        }
        if let Some(oracle) = &self.oracle {
            check_finite(oracle, "oracle embeddings")?;
            if oracle.rows() != self.meta.len() || oracle.cols() != self.concept_dirs.dim() {
                return Err(Error::DimensionMismatch(format!(
                    "oracle section is {}x{}, expected {}x{}",
                    oracle.rows(),
                    oracle.cols(),
                    self.meta.len(),
                    self.concept_dirs.dim()
                )));
            }
        }
        let n_classes = self.dictionary.n_classes();
        for m in &self.meta {
            if m.ground_truth >= n_classes || m.model_output >= n_classes {
                return Err(Error::Metadata(format!(
                    "sample {} has a class index outside 0..{n_classes}",
                    m.sample_id
                )));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.meta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.meta.is_empty()
    }

    pub fn oracle(&self) -> Result<&EmbeddingMatrix> {
        self.oracle.as_ref().ok_or(Error::MissingOracle)
    }

    /// Copies the selected samples into a new bundle sharing the dictionary
    /// and direction sets.
    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            vision: self.vision.select_rows(indices),
            oracle: self.oracle.as_ref().map(|o| o.select_rows(indices)),
            meta: indices.iter().map(|&i| self.meta[i].clone()).collect(),
            dictionary: self.dictionary.clone(),
            concept_dirs: self.concept_dirs.clone(),
            class_dirs: self.class_dirs.clone(),
        }
    }
}
