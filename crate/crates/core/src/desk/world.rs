//! Synthetic world with known concept geometry.
//!
//! An input is `[semantic | nuisance]`. The semantic block has one coordinate
//! per concept. A class prototype holds a strength for each relevant concept
//! and a weaker class-specific background level for every other concept; a
//! sample is the prototype times a per-sample intensity plus uniform noise. The nuisance
//! block is a class-specific sign code scaled by `nuisance_signal` plus
//! Gaussian noise. The oracle sees only the semantic block, through an
//! isometry `Q` into `oracle_dim` dimensions.

use std::collections::BTreeSet;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::store::{ConceptDictionary, DirectionKind, DirectionSet};

const INTENSITY_JITTER: f64 = 0.2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorldConfig {
    pub n_classes: usize,
    pub n_concepts: usize,
    pub n_samples: usize,
    pub oracle_dim: usize,
    pub nuisance_dim: usize,
    /// Half-width of the uniform noise on each semantic coordinate.
    pub noise_scale: f64,
    pub nuisance_signal: f64,
    pub nuisance_noise: f64,
    pub min_relevant: usize,
    pub max_relevant: usize,
    /// Range for the per-class strength of each relevant concept.
    pub strength_range: (f64, f64),
    /// Range for the per-class level of each irrelevant concept.
    pub background_range: (f64, f64),
    pub seed: u64,
    /// Uses these names and relevance sets instead of drawing them.
    pub dictionary: Option<ConceptDictionary>,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            n_classes: 6,
            n_concepts: 10,
            n_samples: 2000,
            oracle_dim: 16,
            nuisance_dim: 30,
            noise_scale: 0.1,
            nuisance_signal: 0.15,
            nuisance_noise: 0.1,
            min_relevant: 2,
            max_relevant: 4,
            strength_range: (0.7, 1.3),
            background_range: (0.0, 0.25),
            seed: 0,
            dictionary: None,
        }
    }
}

fn binomial(n: usize, k: usize) -> f64 {
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

impl WorldConfig {
    /// Uniform noise below this half-width keeps every relevant coordinate
    /// strictly above every irrelevant one.
    pub fn ordering_noise_bound(&self) -> f64 {
        let lowest_relevant = self.strength_range.0 * (1.0 - INTENSITY_JITTER);
        let highest_background = self.background_range.1 * (1.0 + INTENSITY_JITTER);
        ((lowest_relevant - highest_background) / 2.0).max(0.0)
    }

    pub fn input_dim(&self) -> usize {
        self.n_concepts + self.nuisance_dim
    }

    pub fn validate(&self) -> Result<()> {
        let infeasible = |msg: String| Err(Error::Config(format!("infeasible world: {msg}")));
        if let Some(d) = &self.dictionary {
            d.validate()?;
            if d.n_classes() != self.n_classes || d.n_concepts() != self.n_concepts {
                return infeasible(format!(
                    "dictionary has {} classes and {} concepts, config asks for {} and {}",
                    d.n_classes(),
                    d.n_concepts(),
                    self.n_classes,
                    self.n_concepts
                ));
            }
        }
        if self.n_classes < 2 || self.n_concepts < 2 {
            return infeasible("need at least two classes and two concepts".into());
        }
        if self.oracle_dim < self.n_concepts {
            return infeasible(format!("oracle_dim {} below n_concepts {}", self.oracle_dim, self.n_concepts));
        }
        if self.dictionary.is_none() {
            if self.min_relevant == 0 || self.min_relevant > self.max_relevant || self.max_relevant > self.n_concepts {
                return infeasible("relevant-set sizes must satisfy 1 ≤ min ≤ max ≤ n_concepts".into());
            }
            let available: f64 = (self.min_relevant..=self.max_relevant).map(|k| binomial(self.n_concepts, k)).sum();
            if (self.n_classes as f64) > available {
                return infeasible(format!("only {available} distinct relevant sets for {} classes", self.n_classes));
            }
        }
        let (lo, hi) = self.strength_range;
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            return infeasible("strength_range must satisfy 0 < lo ≤ hi".into());
        }
        let (blo, bhi) = self.background_range;
        if !(blo >= 0.0 && blo <= bhi && bhi < lo) {
            return infeasible("background_range must satisfy 0 ≤ lo ≤ hi < strength_range.0".into());
        }
        for (name, v) in [
            ("noise_scale", self.noise_scale),
            ("nuisance_signal", self.nuisance_signal),
            ("nuisance_noise", self.nuisance_noise),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return infeasible(format!("{name} must be finite and non-negative"));
            }
        }
        Ok(())
    }
}

/// Per-class concept profile.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassProfile {
    pub relevant: Vec<usize>,
    pub strengths: Vec<f64>,
    /// Level of each concept outside the relevant set; zero on relevant ones.
    pub background: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticWorld {
    pub config: WorldConfig,
    pub dictionary: ConceptDictionary,
    pub classes: Vec<ClassProfile>,
    /// `n_classes × nuisance_dim` sign codes.
    pub nuisance_codes: Matrix<f64>,
    /// `oracle_dim × n_concepts` with orthonormal columns.
    pub oracle_basis: Matrix<f64>,
}

/// Inputs, labels and oracle embeddings of a sampled set.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSet {
    pub inputs: Matrix<f64>,
    pub labels: Vec<usize>,
    pub oracle: Matrix<f64>,
}

impl LabeledSet {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

fn orthonormal_columns(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix<f64> {
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(cols);
    while basis.len() < cols {
        let mut v: Vec<f64> = (0..rows).map(|_| StandardNormal.sample(rng)).collect();
        for _ in 0..2 {
            for b in &basis {
                let p: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
                v.iter_mut().zip(b).for_each(|(x, y)| *x -= p * y);
            }
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-6 {
            v.iter_mut().for_each(|x| *x /= n);
            basis.push(v);
        }
    }
    Matrix::from_fn(rows, cols, |r, c| basis[c][r])
}

impl SyntheticWorld {
    pub fn generate(config: &WorldConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let (k, c) = (config.n_concepts, config.n_classes);

        let relevant: Vec<Vec<usize>> = match &config.dictionary {
            Some(d) => d.relevant.clone(),
            None => {
                let mut seen = BTreeSet::new();
                let mut sets = Vec::with_capacity(c);
                while sets.len() < c {
                    let size = rng.random_range(config.min_relevant..=config.max_relevant);
                    let mut set = sample(&mut rng, k, size).into_vec();
                    set.sort_unstable();
                    if seen.insert(set.clone()) {
                        sets.push(set);
                    }
                }
                sets
            }
        };
        let dictionary = match &config.dictionary {
            Some(d) => d.clone(),
            None => ConceptDictionary {
                concepts: (0..k).map(|i| format!("concept_{i}")).collect(),
                classes: (0..c).map(|i| format!("class_{i}")).collect(),
                relevant: relevant.clone(),
            },
        };
        let draw = |rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)| if lo == hi { lo } else { rng.random_range(lo..hi) };
        let classes: Vec<ClassProfile> = relevant
            .into_iter()
            .map(|rel| {
                let strengths = rel.iter().map(|_| draw(&mut rng, config.strength_range)).collect();
                let background = (0..k)
                    .map(|i| if rel.binary_search(&i).is_ok() { 0.0 } else { draw(&mut rng, config.background_range) })
                    .collect();
                ClassProfile { relevant: rel, strengths, background }
            })
            .collect();
        let nuisance_codes =
            Matrix::from_fn(c, config.nuisance_dim, |_, _| if rng.random_bool(0.5) { 1.0 } else { -1.0 });
        let oracle_basis = orthonormal_columns(config.oracle_dim, k, &mut rng);

        let world = Self { config: config.clone(), dictionary, classes, nuisance_codes, oracle_basis };
        for a in 0..c {
            for b in a + 1..c {
                let (pa, pb) = (world.prototype(a), world.prototype(b));
                let cos = crate::concept::cosine(&pa, &pb)?;
                if cos > 1.0 - 1e-9 {
                    return Err(Error::Config(format!("infeasible world: classes {a} and {b} share a prototype")));
                }
            }
        }
        Ok(world)
    }

    pub fn input_dim(&self) -> usize {
        self.config.input_dim()
    }

    /// Noise-free concept coordinates of a class.
    pub fn prototype(&self, class: usize) -> Vec<f64> {
        let p = &self.classes[class];
        let mut a = p.background.clone();
        for (&k, &s) in p.relevant.iter().zip(&p.strengths) {
            a[k] = s;
        }
        a
    }

    /// Oracle embedding of an input: `Q · x_semantic`.
    pub fn oracle_embed(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.input_dim() {
            return Err(Error::DimensionMismatch(format!("input of length {} for width {}", x.len(), self.input_dim())));
        }
        Ok(self.oracle_basis.matvec(&x[..self.config.n_concepts]))
    }

    pub fn oracle_rows(&self, xs: &Matrix<f64>) -> Result<Matrix<f64>> {
        let rows: Vec<Vec<f64>> = xs.iter_rows().map(|x| self.oracle_embed(x)).collect::<Result<_>>()?;
        if rows.is_empty() {
            return Ok(Matrix::zeros(0, self.config.oracle_dim));
        }
        Matrix::from_rows(&rows)
    }

    /// Oracle images of the concept basis vectors.
    pub fn concept_directions(&self) -> DirectionSet {
        DirectionSet::new(self.oracle_basis.transpose().cast(), DirectionKind::ConceptDirections)
            .expect("orthonormal columns are nonzero")
    }

    /// Oracle images of the class prototypes.
    pub fn class_directions(&self) -> DirectionSet {
        let rows: Vec<Vec<f64>> = (0..self.config.n_classes).map(|c| self.oracle_basis.matvec(&self.prototype(c))).collect();
        let m = Matrix::from_rows(&rows).expect("equal-length rows");
        DirectionSet::new(m.cast(), DirectionKind::ClassDirections).expect("prototypes are nonzero")
    }

    /// Draws one input of `class`.
    pub fn sample_input(&self, class: usize, rng: &mut impl Rng) -> Vec<f64> {
        let cfg = &self.config;
        let intensity = 1.0 + rng.random_range(-INTENSITY_JITTER..=INTENSITY_JITTER);
        let mut x: Vec<f64> = self.prototype(class).into_iter().map(|a| a * intensity).collect();
        if cfg.noise_scale > 0.0 {
            for v in &mut x {
                *v += rng.random_range(-cfg.noise_scale..=cfg.noise_scale);
            }
        }
        let normal = Normal::new(0.0, cfg.nuisance_noise).expect("validated non-negative");
        x.extend(self.nuisance_codes.row(class).iter().map(|&s| cfg.nuisance_signal * s + normal.sample(rng)));
        x
    }

    /// Draws `n` samples with classes cycling `0, 1, …`; `stream` selects an
    /// independent random stream so train and test sets never overlap.
    pub fn sample(&self, n: usize, stream: u64) -> Result<LabeledSet> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(stream + 1);
        let labels: Vec<usize> = (0..n).map(|i| i % self.config.n_classes).collect();
        let rows: Vec<Vec<f64>> = labels.iter().map(|&c| self.sample_input(c, &mut rng)).collect();
        let inputs = if rows.is_empty() { Matrix::zeros(0, self.input_dim()) } else { Matrix::from_rows(&rows)? };
        let oracle = self.oracle_rows(&inputs)?;
        Ok(LabeledSet { inputs, labels, oracle })
    }
}

/// Generates the world and its default sample set of `n_samples` inputs.
pub fn generate_world(config: &WorldConfig) -> Result<(SyntheticWorld, LabeledSet)> {
    let world = SyntheticWorld::generate(config)?;
    let set = world.sample(config.n_samples, 0)?;
    Ok((world, set))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::concept::{eval_predicates, relevance_mask, zero_shot};

    #[test]
    fn default_world_shapes() {
        let (w, set) = generate_world(&WorldConfig::default()).unwrap();
        assert_eq!(set.inputs.rows(), 2000);
        assert_eq!(set.inputs.cols(), 40);
        assert_eq!(set.oracle.cols(), 16);
        assert_eq!(w.concept_directions().len(), 10);
        assert_eq!(w.class_directions().len(), 6);
        let qtq = w.oracle_basis.transpose().matmul(&w.oracle_basis).unwrap();
        for i in 0..10 {
            for j in 0..10 {
                assert!((qtq.get(i, j) - if i == j { 1.0 } else { 0.0 }).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn noiseless_world_is_perfectly_ordered() {
        let cfg = WorldConfig { noise_scale: 0.0, n_samples: 300, seed: 5, ..Default::default() };
        assert!(cfg.noise_scale < cfg.ordering_noise_bound());
        let (w, set) = generate_world(&cfg).unwrap();
        let (cd, kd) = (w.concept_directions(), w.class_directions());
        for (e, &c) in set.oracle.iter_rows().zip(&set.labels) {
            assert_eq!(zero_shot(e, &kd).unwrap(), c);
            let grid = eval_predicates(e, &cd).unwrap();
            assert!(relevance_mask(c, &w.dictionary).unwrap().is_subset_of(&grid));
        }
    }

    #[test]
    fn noise_below_bound_keeps_ordering() {
        let base = WorldConfig::default();
        let cfg = WorldConfig { noise_scale: base.ordering_noise_bound() * 0.99, n_samples: 600, ..base };
        let (w, set) = generate_world(&cfg).unwrap();
        let cd = w.concept_directions();
        for (e, &c) in set.oracle.iter_rows().zip(&set.labels) {
            let grid = eval_predicates(e, &cd).unwrap();
            assert!(relevance_mask(c, &w.dictionary).unwrap().is_subset_of(&grid));
        }
    }

    #[test]
    fn streams_are_independent_and_reproducible() {
        let w = SyntheticWorld::generate(&WorldConfig::default()).unwrap();
        assert_eq!(w.sample(50, 0).unwrap(), w.sample(50, 0).unwrap());
        assert_ne!(w.sample(50, 0).unwrap().inputs, w.sample(50, 1).unwrap().inputs);
    }

    #[test]
    fn infeasible_configs_are_rejected() {
        let too_many = WorldConfig { n_classes: 50, n_concepts: 4, oracle_dim: 4, max_relevant: 1, min_relevant: 1, ..Default::default() };
        assert!(matches!(SyntheticWorld::generate(&too_many), Err(Error::Config(_))));
        let narrow = WorldConfig { oracle_dim: 5, ..Default::default() };
        assert!(SyntheticWorld::generate(&narrow).is_err());
    }

    #[test]
    fn dictionary_driven_world() {
        let d = crate::store::rival10_dictionary();
        let cfg = WorldConfig { n_classes: 10, n_concepts: 18, oracle_dim: 24, dictionary: Some(d.clone()), ..Default::default() };
        let w = SyntheticWorld::generate(&cfg).unwrap();
        assert_eq!(w.dictionary, d);
        assert_eq!(w.classes[8].relevant, d.relevant[8]);
    }
}
