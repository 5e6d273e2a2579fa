//! End-to-end desk experiment: train a classifier on a synthetic world,
//! localize injected faults, probe adversarial vulnerability and score the
//! runtime detector.

use serde::{Deserialize, Serialize};

use crate::align::{evaluate, fit_least_squares, fit_sgd, AffineMap, FitConfig};
use crate::concept::relevance_mask;
use crate::desk::{attack_rows, train, AttackKind, AttackSpec, DeskModel, LabeledSet, MutationSpec, MutationTarget, SyntheticWorld, TrainConfig, WorldConfig};
use crate::detect::{build_adversarial_profile, build_misclassification_profile, evaluate as evaluate_detector, split_indices, AccuracyTable, RuntimeSet};
use crate::error::{Error, Result};
use crate::fault::{localize_embeddings, robustness_analysis, LocusCounts};
use crate::heatmap::{summary, SummaryKind};
use crate::linalg::Matrix;
use crate::store::{DirectionSet, EmbeddingBundle, PerturbationTag, SampleMeta};

pub const WORKBENCH_SCHEMA: &str = "semheat.workbench/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "method", deny_unknown_fields)]
pub enum AlignerChoice {
    LeastSquares { ridge: f64 },
    Sgd(FitConfig),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorkbenchConfig {
    pub seed: u64,
    pub world: WorldConfig,
    pub n_test: usize,
    pub hidden_width: usize,
    pub hidden_layers: usize,
    pub train: TrainConfig,
    pub aligner: AlignerChoice,
    pub mutation_neurons: usize,
    pub mutation_seeds: usize,
    /// Replacement range; `None` uses three times each layer's weight std.
    pub mutation_range: Option<f64>,
    /// Head neurons randomized for the misclassification detector.
    pub misclassification_neurons: usize,
    /// Head mutations tried for the misclassification detector.
    pub misclassification_candidates: usize,
    /// The candidate whose offline accuracy is closest to this value is kept.
    pub misclassification_target: f64,
    pub epsilon: f64,
    pub attack_steps: usize,
    /// PGD step size as a fraction of the budget.
    pub step_fraction: f64,
    /// Budget of the weak attack as a fraction of `epsilon`.
    pub weak_factor: f64,
    pub binarize_threshold: f64,
    pub robustness_threshold: f64,
    pub offline_fraction: f64,
}

impl Default for WorkbenchConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            world: WorldConfig {
                nuisance_signal: 0.25,
                strength_range: (0.8, 1.2),
                background_range: (0.0, 0.15),
                ..WorldConfig::default()
            },
            n_test: 2000,
            hidden_width: 16,
            hidden_layers: 3,
            train: TrainConfig { epochs: 5, learning_rate: 0.01, ..TrainConfig::default() },
            aligner: AlignerChoice::LeastSquares { ridge: 1e-3 },
            mutation_neurons: 4,
            mutation_seeds: 5,
            mutation_range: Some(4.0),
            misclassification_neurons: 2,
            misclassification_candidates: 8,
            misclassification_target: 0.7,
            epsilon: 0.3,
            attack_steps: 20,
            step_fraction: 0.5,
            weak_factor: 0.1,
            binarize_threshold: 0.6,
            robustness_threshold: 0.05,
            offline_fraction: 0.75,
        }
    }
}

impl WorkbenchConfig {
    /// Default configuration with every random stream derived from `seed`.
    pub fn with_seed(seed: u64) -> Self {
        Self { seed, ..Default::default() }
    }

    fn world_config(&self) -> WorldConfig {
        WorldConfig { seed: self.seed, ..self.world.clone() }
    }

    fn widths(&self, world: &SyntheticWorld) -> Vec<usize> {
        let mut w = vec![world.input_dim()];
        w.extend(std::iter::repeat_n(self.hidden_width, self.hidden_layers));
        w.push(world.config.n_classes);
        w
    }

    pub fn attack(&self, kind: AttackKind, epsilon: f64) -> AttackSpec {
        AttackSpec { kind, epsilon, steps: self.attack_steps, step_size: epsilon * self.step_fraction, seed: self.seed.wrapping_add(300) }
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden_layers == 0 || self.hidden_width == 0 {
            return Err(Error::Config("the desk model needs at least one hidden layer".into()));
        }
        if self.mutation_seeds == 0 || self.n_test == 0 || self.misclassification_candidates == 0 {
            return Err(Error::Config(
                "mutation_seeds, misclassification_candidates and n_test must be positive".into(),
            ));
        }
        if !(self.weak_factor > 0.0 && self.weak_factor <= 1.0) {
            return Err(Error::Config("weak_factor must lie in (0, 1]".into()));
        }
        self.train.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignerSummary {
    pub split_index: usize,
    pub embedding_dim: usize,
    pub train_r_squared: f64,
    pub test_r_squared: f64,
    pub test_mse: f64,
}

/// One row of the mutation table: counts summed over all mutation seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MutationRow {
    pub label: String,
    pub target: MutationTarget,
    pub split_index: usize,
    pub counts: LocusCounts,
    pub accuracies: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobustnessSummary {
    pub class: String,
    pub n_robust_relevant: usize,
    pub n_nonrobust_relevant: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VulnerabilityReport {
    pub epsilon: f64,
    pub accuracy: f64,
    pub counts: LocusCounts,
    pub encoder_share: Option<f64>,
    pub per_class: Vec<RobustnessSummary>,
    pub n_nonrobust_relevant: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionColumn {
    pub setting: String,
    pub accuracy_under_attack: Option<f64>,
    pub table: AccuracyTable,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkbenchReport {
    pub schema: String,
    pub seed: u64,
    pub n_train: usize,
    pub n_test: usize,
    pub train_loss: Vec<f64>,
    pub train_accuracy: f64,
    pub test_accuracy: f64,
    pub aligners: Vec<AlignerSummary>,
    pub mutations: Vec<MutationRow>,
    pub vulnerability: VulnerabilityReport,
    pub weak_vulnerability: VulnerabilityReport,
    pub detection: Vec<DetectionColumn>,
}

impl WorkbenchReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn mutation(&self, label: &str) -> Option<&MutationRow> {
        self.mutations.iter().find(|r| r.label == label)
    }

    pub fn detection(&self, setting: &str) -> Option<&DetectionColumn> {
        self.detection.iter().find(|c| c.setting == setting)
    }
}

/// Trained state shared by the experiment stages.
pub struct Desk {
    pub config: WorkbenchConfig,
    pub world: SyntheticWorld,
    pub train_set: LabeledSet,
    pub test_set: LabeledSet,
    pub model: DeskModel<f64>,
    pub train_loss: Vec<f64>,
    pub train_accuracy: f64,
    /// Aligner per split index, fitted on the unmutated model's train-set
    /// embeddings.
    pub maps: Vec<(usize, AffineMap<f64>)>,
    pub concept_dirs: DirectionSet,
    pub class_dirs: DirectionSet,
}

fn meta_for(labels: &[usize], outputs: &[usize], tag: &PerturbationTag) -> Vec<SampleMeta> {
    labels
        .iter()
        .zip(outputs)
        .enumerate()
        .map(|(i, (&g, &o))| SampleMeta { sample_id: i.to_string(), ground_truth: g, model_output: o, perturbation: tag.clone() })
        .collect()
}

fn accuracy_of(labels: &[usize], outputs: &[usize]) -> f64 {
    labels.iter().zip(outputs).filter(|(a, b)| a == b).count() as f64 / labels.len() as f64
}

impl Desk {
    pub fn build(config: &WorkbenchConfig) -> Result<Self> {
        config.validate()?;
        let world = SyntheticWorld::generate(&config.world_config())?;
        let train_set = world.sample(config.world.n_samples, 0)?;
        let test_set = world.sample(config.n_test, 1)?;
        let widths = config.widths(&world);
        let split = widths.len() - 2;
        let mut model = DeskModel::<f64>::init(&widths, split, config.seed.wrapping_add(100))?;
        let train_cfg = TrainConfig { seed: config.seed.wrapping_add(200), ..config.train.clone() };
        let report = train(&mut model, &train_set.inputs, &train_set.labels, &train_cfg)?;
        let concept_dirs = world.concept_directions();
        let class_dirs = world.class_directions();
        let mut desk = Self {
            config: config.clone(),
            world,
            train_set,
            test_set,
            model,
            train_loss: report.epoch_losses,
            train_accuracy: report.train_accuracy,
            maps: Vec::new(),
            concept_dirs,
            class_dirs,
        };
        for s in [split, split - 1].into_iter().filter(|&s| s >= 1) {
            let map = desk.fit_map(s)?;
            desk.maps.push((s, map));
        }
        Ok(desk)
    }

    fn fit_map(&self, split: usize) -> Result<AffineMap<f64>> {
        let z = self.model.with_split(split)?.encode_rows(&self.train_set.inputs)?;
        match &self.config.aligner {
            AlignerChoice::LeastSquares { ridge } => fit_least_squares(&z, &self.train_set.oracle, *ridge),
            AlignerChoice::Sgd(cfg) => Ok(fit_sgd(&z, &self.train_set.oracle, cfg)?.0),
        }
    }

    pub fn map(&self, split: usize) -> Result<&AffineMap<f64>> {
        self.maps
            .iter()
            .find(|(s, _)| *s == split)
            .map(|(_, m)| m)
            .ok_or_else(|| Error::Config(format!("no aligner for split index {split}")))
    }

    pub fn split(&self) -> usize {
        self.model.split_index
    }

    /// Mapped embeddings of `inputs` under `model` split at `split`.
    pub fn mapped(&self, model: &DeskModel<f64>, split: usize, inputs: &Matrix<f64>) -> Result<Matrix<f64>> {
        let z = model.with_split(split)?.encode_rows(inputs)?;
        self.map(split)?.apply_rows(&z)
    }

    pub fn aligner_summaries(&self) -> Result<Vec<AlignerSummary>> {
        self.maps
            .iter()
            .map(|(s, map)| {
                let m = self.model.with_split(*s)?;
                let train_q = evaluate(map, &m.encode_rows(&self.train_set.inputs)?, &self.train_set.oracle)?;
                let test_q = evaluate(map, &m.encode_rows(&self.test_set.inputs)?, &self.test_set.oracle)?;
                Ok(AlignerSummary {
                    split_index: *s,
                    embedding_dim: m.embedding_dim(),
                    train_r_squared: train_q.r_squared,
                    test_r_squared: test_q.r_squared,
                    test_mse: test_q.mse,
                })
            })
            .collect()
    }

    /// Localizes `model`'s predictions on `inputs` using the aligner of `split`.
    pub fn localize(
        &self,
        model: &DeskModel<f64>,
        split: usize,
        inputs: &Matrix<f64>,
        labels: &[usize],
        tag: &PerturbationTag,
    ) -> Result<(LocusCounts, Vec<usize>)> {
        let outputs = model.predict_rows(inputs)?;
        let mapped = self.mapped(model, split, inputs)?;
        let oracle = self.world.oracle_rows(inputs)?;
        let report = localize_embeddings(&mapped, &oracle, &meta_for(labels, &outputs, tag), &self.class_dirs)?;
        Ok((report.counts, outputs))
    }

    /// Clean test set followed by one perturbed copy per attack, as a bundle
    /// of `model`'s encoder outputs and the oracle embeddings of each input.
    /// Sample ids repeat across copies so offline/online splits can group
    /// them.
    pub fn export_bundle(&self, model: &DeskModel<f64>, attacks: &[AttackSpec]) -> Result<EmbeddingBundle> {
        let (x, y) = (&self.test_set.inputs, &self.test_set.labels);
        let mut parts = vec![(x.clone(), PerturbationTag::clean())];
        for spec in attacks {
            let (adv, _) = attack_rows(model, x, y, spec, None)?;
            parts.push((adv, PerturbationTag::new(spec.kind.as_str())));
        }
        let mut vision = Vec::new();
        let mut oracle = Vec::new();
        let mut meta = Vec::new();
        for (inputs, tag) in parts {
            let z = model.encode_rows(&inputs)?.cast::<f32>();
            let o = self.world.oracle_rows(&inputs)?.cast::<f32>();
            vision.extend_from_slice(z.data());
            oracle.extend_from_slice(o.data());
            let outputs = model.predict_rows(&inputs)?;
            meta.extend(meta_for(y, &outputs, &tag));
        }
        let n = meta.len();
        let bundle = EmbeddingBundle {
            vision: Matrix::new(n, model.embedding_dim(), vision)?,
            oracle: Some(Matrix::new(n, self.world.config.oracle_dim, oracle)?),
            meta,
            dictionary: self.world.dictionary.clone(),
            concept_dirs: self.concept_dirs.clone(),
            class_dirs: self.class_dirs.clone(),
        };
        bundle.validate()?;
        Ok(bundle)
    }

    pub fn mutation_rows(&self) -> Result<Vec<MutationRow>> {
        let split = self.split();
        let last_encoder = MutationTarget::Layer(split - 1);
        [
            ("encoder", MutationTarget::Encoder, split),
            ("head", MutationTarget::Head, split),
            ("last_encoder_layer", last_encoder, split),
            ("last_encoder_layer_moved_to_head", last_encoder, split - 1),
        ]
        .iter()
        .map(|&(label, target, s)| self.mutation_row(label, target, s))
        .collect()
    }

    /// Mutates `target` once per mutation seed and localizes the test-set
    /// errors with the model split at `split`.
    pub fn mutation_row(&self, label: &str, target: MutationTarget, split: usize) -> Result<MutationRow> {
        let tag = PerturbationTag::clean();
        let mut counts = LocusCounts::default();
        let mut accuracies = Vec::new();
        for k in 0..self.config.mutation_seeds {
            let spec = MutationSpec {
                target,
                n_neurons: self.config.mutation_neurons,
                seed: self.config.seed.wrapping_add(1000 + k as u64),
                range: self.config.mutation_range,
            };
            let (mutated, _) = spec.apply(&self.model)?;
            let (c, outputs) = self.localize(&mutated, split, &self.test_set.inputs, &self.test_set.labels, &tag)?;
            counts += c;
            accuracies.push(accuracy_of(&self.test_set.labels, &outputs));
        }
        Ok(MutationRow { label: label.into(), target, split_index: split, counts, accuracies })
    }

    fn gt_summary(&self, mapped: &Matrix<f64>, labels: &[usize], class: usize, tag: &str) -> Result<crate::heatmap::Heatmap> {
        let idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        let name = self.world.dictionary.classes[class].clone();
        summary(&mapped.select_rows(&idx), &self.concept_dirs, &self.world.dictionary.concepts, SummaryKind::GroundTruth, Some(name), tag)
    }

    pub fn vulnerability(&self, epsilon: f64) -> Result<VulnerabilityReport> {
        let spec = self.config.attack(AttackKind::PgdLinf, epsilon);
        let (x, y) = (&self.test_set.inputs, &self.test_set.labels);
        let (adv, _) = attack_rows(&self.model, x, y, &spec, None)?;
        let split = self.split();
        let (counts, outputs) = self.localize(&self.model, split, &adv, y, &PerturbationTag::new("pgd_linf"))?;
        let clean_mapped = self.mapped(&self.model, split, x)?;
        let adv_mapped = self.mapped(&self.model, split, &adv)?;
        let mut per_class = Vec::new();
        for c in 0..self.world.config.n_classes {
            let clean = self.gt_summary(&clean_mapped, y, c, "clean")?;
            let pert = self.gt_summary(&adv_mapped, y, c, "pgd_linf")?;
            let rel = relevance_mask(c, &self.world.dictionary)?;
            let r = robustness_analysis(&clean, &pert, self.config.robustness_threshold, &rel)?;
            per_class.push(RobustnessSummary {
                class: self.world.dictionary.classes[c].clone(),
                n_robust_relevant: r.n_robust_relevant,
                n_nonrobust_relevant: r.n_nonrobust_relevant,
            });
        }
        Ok(VulnerabilityReport {
            epsilon,
            accuracy: accuracy_of(y, &outputs),
            counts,
            encoder_share: counts.encoder_share(),
            n_nonrobust_relevant: per_class.iter().map(|r| r.n_nonrobust_relevant).sum(),
            per_class,
        })
    }

    fn split_sets(&self) -> Result<(Vec<usize>, Vec<usize>)> {
        split_indices(self.test_set.len(), self.config.offline_fraction, self.config.seed.wrapping_add(400))
    }

    pub fn adversarial_detection(&self, kind: AttackKind) -> Result<DetectionColumn> {
        let (offline, online) = self.split_sets()?;
        let spec = self.config.attack(kind, self.config.epsilon);
        let (x, y) = (&self.test_set.inputs, &self.test_set.labels);
        let (adv, _) = attack_rows(&self.model, x, y, &spec, None)?;
        let split = self.split();
        let clean_mapped = self.mapped(&self.model, split, x)?;
        let adv_mapped = self.mapped(&self.model, split, &adv)?;
        let clean_out = self.model.predict_rows(x)?;
        let adv_out = self.model.predict_rows(&adv)?;
        let pick = |v: &[usize], ix: &[usize]| -> Vec<usize> { ix.iter().map(|&i| v[i]).collect() };
        let profile = build_adversarial_profile(
            &clean_mapped.select_rows(&offline),
            &pick(y, &offline),
            &pick(&clean_out, &offline),
            &adv_mapped.select_rows(&offline),
            &pick(&adv_out, &offline),
            &self.concept_dirs,
            &self.world.dictionary.concepts,
            &self.world.dictionary.classes,
            self.config.binarize_threshold,
        )?;
        let clean_rows = clean_mapped.select_rows(&online);
        let adv_rows = adv_mapped.select_rows(&online);
        let runtime = Matrix::from_rows(&clean_rows.iter_rows().chain(adv_rows.iter_rows()).collect::<Vec<_>>())?;
        let truth: Vec<usize> = pick(y, &online).into_iter().chain(pick(y, &online)).collect();
        let predicted: Vec<usize> = pick(&clean_out, &online).into_iter().chain(pick(&adv_out, &online)).collect();
        let positive: Vec<bool> = (0..2 * online.len()).map(|i| i >= online.len()).collect();
        let table = evaluate_detector(
            &profile,
            &self.concept_dirs,
            &RuntimeSet { embeddings: &runtime, truth: &truth, predicted: &predicted, positive: &positive },
        )?;
        Ok(DetectionColumn { setting: kind.as_str().into(), accuracy_under_attack: Some(accuracy_of(y, &adv_out)), table })
    }

    /// Misclassification detection on a head-mutated model: among the
    /// candidate mutations, the one whose offline accuracy is closest to
    /// `misclassification_target` is used.
    pub fn misclassification_detection(&self) -> Result<DetectionColumn> {
        let (offline, online) = self.split_sets()?;
        let (x, y) = (&self.test_set.inputs, &self.test_set.labels);
        let pick = |v: &[usize], ix: &[usize]| -> Vec<usize> { ix.iter().map(|&i| v[i]).collect() };
        let offline_truth = pick(y, &offline);
        let mut best: Option<(f64, DeskModel<f64>, Vec<usize>)> = None;
        for k in 0..self.config.misclassification_candidates {
            let spec = MutationSpec {
                target: MutationTarget::Head,
                n_neurons: self.config.misclassification_neurons,
                seed: self.config.seed.wrapping_add(500 + k as u64),
                range: self.config.mutation_range,
            };
            let (candidate, _) = spec.apply(&self.model)?;
            let out = candidate.predict_rows(x)?;
            let gap = (accuracy_of(&offline_truth, &pick(&out, &offline)) - self.config.misclassification_target).abs();
            if best.as_ref().is_none_or(|(g, _, _)| gap < *g) {
                best = Some((gap, candidate, out));
            }
        }
        let (_, mutated, out) = best.expect("at least one candidate");
        let split = self.split();
        let mapped = self.mapped(&mutated, split, x)?;
        let profile = build_misclassification_profile(
            &mapped.select_rows(&offline),
            &pick(y, &offline),
            &pick(&out, &offline),
            &self.concept_dirs,
            &self.world.dictionary.concepts,
            &self.world.dictionary.classes,
            self.config.binarize_threshold,
        )?;
        let truth = pick(y, &online);
        let predicted = pick(&out, &online);
        let positive: Vec<bool> = truth.iter().zip(&predicted).map(|(a, b)| a != b).collect();
        let runtime = mapped.select_rows(&online);
        let table = evaluate_detector(
            &profile,
            &self.concept_dirs,
            &RuntimeSet { embeddings: &runtime, truth: &truth, predicted: &predicted, positive: &positive },
        )?;
        Ok(DetectionColumn { setting: "misclassification".into(), accuracy_under_attack: Some(accuracy_of(y, &out)), table })
    }
}

/// Runs the full experiment. Deterministic for a given configuration.
pub fn run(config: &WorkbenchConfig) -> Result<WorkbenchReport> {
    let desk = Desk::build(config)?;
    let test_outputs = desk.model.predict_rows(&desk.test_set.inputs)?;
    let mut detection = Vec::new();
    for kind in [AttackKind::PgdLinf, AttackKind::PgdL2, AttackKind::Fgsm, AttackKind::Mixture] {
        detection.push(desk.adversarial_detection(kind)?);
    }
    detection.push(desk.misclassification_detection()?);
    Ok(WorkbenchReport {
        schema: WORKBENCH_SCHEMA.into(),
        seed: config.seed,
        n_train: desk.train_set.len(),
        n_test: desk.test_set.len(),
        train_loss: desk.train_loss.clone(),
        train_accuracy: desk.train_accuracy,
        test_accuracy: accuracy_of(&desk.test_set.labels, &test_outputs),
        aligners: desk.aligner_summaries()?,
        mutations: desk.mutation_rows()?,
        vulnerability: desk.vulnerability(config.epsilon)?,
        weak_vulnerability: desk.vulnerability(config.epsilon * config.weak_factor)?,
        detection,
    })
}
