use std::path::{Path, PathBuf};

use semheat_core::desk::{AttackKind, MutationTarget};
use semheat_core::detect::DEFAULT_THRESHOLD;
use semheat_core::workbench::{AlignerChoice, WorkbenchConfig};
use serde::{Deserialize, Serialize};

use crate::error::CliError;

/// Input files that flags may also supply.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    pub bundle: Option<PathBuf>,
    pub map: Option<PathBuf>,
    pub profile: Option<PathBuf>,
    pub dictionary: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttackSection {
    pub kinds: Vec<AttackKind>,
    /// Defaults to the workbench budget.
    pub epsilon: Option<f64>,
}

impl Default for AttackSection {
    fn default() -> Self {
        Self { kinds: vec![AttackKind::PgdLinf], epsilon: None }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MutationSection {
    /// Extra mutation row on top of the standard table.
    pub target: Option<MutationTarget>,
    pub n_neurons: Option<usize>,
    pub seeds: Option<usize>,
    pub range: Option<f64>,
}

/// Top-level TOML configuration. Every key is optional; unknown keys are
/// rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub paths: Paths,
    pub aligner: AlignerChoice,
    /// Binarization threshold `t`.
    pub threshold: f64,
    pub robustness_threshold: f64,
    pub offline_fraction: f64,
    pub split_seed: u64,
    pub attack: AttackSection,
    pub mutation: MutationSection,
    pub workbench: WorkbenchConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            paths: Paths::default(),
            aligner: AlignerChoice::LeastSquares { ridge: 1e-3 },
            threshold: DEFAULT_THRESHOLD,
            robustness_threshold: 0.05,
            offline_fraction: 0.75,
            split_seed: 0,
            attack: AttackSection::default(),
            mutation: MutationSection::default(),
            workbench: WorkbenchConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Core(semheat_core::Error::Io { path: path.to_path_buf(), source: e }))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }
}

/// Flag value if given, else the configured one, else a usage error.
pub fn require_path(flag: Option<PathBuf>, configured: &Option<PathBuf>, what: &str) -> Result<PathBuf, CliError> {
    flag.or_else(|| configured.clone())
        .ok_or_else(|| CliError::Usage(format!("no {what} given (pass it as a flag or under [paths] in the config)")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_is_default() {
        assert_eq!(RunConfig::parse("").unwrap(), RunConfig::default());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::parse("treshold = 0.5").is_err());
        assert!(RunConfig::parse("[workbench]\nepsilonn = 0.1").is_err());
        assert!(RunConfig::parse("[paths]\nbundel = \"x\"").is_err());
    }

    #[test]
    fn nested_sections_parse() {
        let cfg = RunConfig::parse(
            r#"
threshold = 0.5
[aligner]
method = "sgd"
epochs = 10
[attack]
kinds = ["fgsm", "pgd_l2"]
epsilon = 0.1
[mutation]
target = { kind = "layer", layer = 1 }
[workbench]
seed = 9
[workbench.world]
n_classes = 4
"#,
        )
        .unwrap();
        assert_eq!(cfg.threshold, 0.5);
        assert!(matches!(cfg.aligner, AlignerChoice::Sgd(ref f) if f.epochs == 10));
        assert_eq!(cfg.attack.kinds, vec![AttackKind::Fgsm, AttackKind::PgdL2]);
        assert_eq!(cfg.mutation.target, Some(MutationTarget::Layer(1)));
        assert_eq!(cfg.workbench.seed, 9);
        assert_eq!(cfg.workbench.world.n_classes, 4);
    }
}
