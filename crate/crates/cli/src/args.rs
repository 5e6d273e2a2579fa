use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(name = "semheat", version, about = "Semantic heatmaps, fault localization and runtime detection for encoder+head classifiers")]
pub struct Cli {
    /// TOML run configuration; flags override its values.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Machine-readable JSON on stdout instead of tables.
    #[arg(long, global = true)]
    pub json: bool,
    /// Upper bound on worker threads.
    #[arg(long, global = true, value_name = "N")]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Load an SHB1 bundle and check every invariant.
    ValidateBundle(BundleArg),
    /// Fit the affine map from vision embeddings to oracle embeddings.
    FitAligner(FitArgs),
    /// Compute a single-input or summary heatmap.
    Heatmap(HeatmapArgs),
    /// Cell-wise absolute difference of two heatmaps.
    Diff(DiffArgs),
    /// Threshold a summary heatmap.
    Binarize(BinarizeArgs),
    /// Classify each misclassification as an encoder or head error.
    Localize(LocalizeArgs),
    /// Compare a clean and a perturbed summary predicate by predicate.
    Robustness(RobustnessArgs),
    /// Check that injected faults localize to the mutated component.
    MutateValidate(MutateArgs),
    /// Attack the desk model and export clean plus perturbed embeddings.
    Attack(AttackArgs),
    /// Build a runtime detector profile from the offline part of a bundle.
    BuildProfile(ProfileArgs),
    /// Emit one JSON verdict per sample.
    Detect(DetectArgs),
    /// Score a detector profile on the online part of a bundle.
    EvaluateDetector(DetectArgs),
    /// Run the full synthetic experiment.
    Workbench(WorkbenchArgs),
    /// Draw a heatmap as SVG or a text grid.
    Render(RenderArgs),
}

#[derive(Debug, Args)]
pub struct BundleArg {
    /// SHB1 bundle; falls back to `paths.bundle`.
    pub bundle: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Method {
    LeastSquares,
    Sgd,
}

#[derive(Debug, Args)]
pub struct FitArgs {
    #[command(flatten)]
    pub input: BundleArg,
    /// Output SHM1 file.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum)]
    pub method: Option<Method>,
    #[arg(long)]
    pub ridge: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Samples used for fitting.
    #[arg(long, default_value = "clean")]
    pub filter: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Space {
    /// Vision embeddings carried through the aligner.
    Mapped,
    /// The bundle's oracle embeddings.
    Oracle,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Kind {
    Single,
    GroundTruth,
    OutputLabel,
}

#[derive(Debug, Args)]
pub struct EmbeddingSource {
    /// SHB1 bundle; falls back to `paths.bundle`.
    pub bundle: Option<PathBuf>,
    /// SHM1 aligner; falls back to `paths.map`.
    #[arg(long)]
    pub map: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct HeatmapArgs {
    #[command(flatten)]
    pub source: EmbeddingSource,
    #[arg(long, value_enum, default_value = "ground-truth")]
    pub kind: Kind,
    /// Class name or index (summary kinds).
    #[arg(long)]
    pub class: Option<String>,
    /// Sample id (single kind).
    #[arg(long)]
    pub sample: Option<String>,
    /// Additional sample filter, e.g. `clean,correct` or `perturbation=fgsm`.
    #[arg(long, default_value = "all")]
    pub filter: String,
    #[arg(long, value_enum, default_value = "mapped")]
    pub space: Space,
    /// Write the heatmap JSON here instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct DiffArgs {
    pub first: PathBuf,
    pub second: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BinarizeArgs {
    pub heatmap: PathBuf,
    /// Threshold; falls back to `threshold`.
    #[arg(long)]
    pub t: Option<f64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct LocalizeArgs {
    #[command(flatten)]
    pub source: EmbeddingSource,
    /// Also write one JSON line per sample.
    #[arg(long)]
    pub per_sample: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct DictionaryArgs {
    /// Take the concept dictionary from this bundle.
    #[arg(long)]
    pub bundle: Option<PathBuf>,
    /// Take the concept dictionary from this TOML file.
    #[arg(long)]
    pub dictionary: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct RobustnessArgs {
    pub clean: PathBuf,
    pub perturbed: PathBuf,
    #[arg(long)]
    pub threshold: Option<f64>,
    /// Class whose relevant predicates are counted; defaults to the
    /// class recorded in the clean heatmap.
    #[arg(long)]
    pub class: Option<String>,
    #[command(flatten)]
    pub dictionary: DictionaryArgs,
}

#[derive(Debug, Args)]
pub struct MutateArgs {
    #[arg(long)]
    pub seed: Option<u64>,
    /// Extra row: `encoder`, `head` or `layer:N`.
    #[arg(long)]
    pub target: Option<String>,
    #[arg(long)]
    pub neurons: Option<usize>,
    #[arg(long)]
    pub seeds: Option<usize>,
}

#[derive(Debug, Args)]
pub struct AttackArgs {
    /// Output SHB1 bundle.
    #[arg(long)]
    pub out: PathBuf,
    /// Comma-separated attack kinds, e.g. `pgd_linf,fgsm`.
    #[arg(long)]
    pub kinds: Option<String>,
    #[arg(long)]
    pub epsilon: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Also save the trained desk model (SHD1).
    #[arg(long)]
    pub save_model: Option<PathBuf>,
    /// Also save the aligner fitted on the training split (SHM1).
    #[arg(long)]
    pub save_map: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Mode {
    Adversarial,
    Misclassification,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Part {
    Offline,
    Online,
    All,
}

#[derive(Debug, Args)]
pub struct SplitArgs {
    #[arg(long)]
    pub offline_fraction: Option<f64>,
    #[arg(long)]
    pub split_seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct ProfileArgs {
    #[command(flatten)]
    pub source: EmbeddingSource,
    #[arg(long, value_enum, default_value = "adversarial")]
    pub mode: Mode,
    #[arg(long)]
    pub t: Option<f64>,
    #[command(flatten)]
    pub split: SplitArgs,
    /// Output profile JSON.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct DetectArgs {
    #[command(flatten)]
    pub source: EmbeddingSource,
    /// Profile JSON; falls back to `paths.profile`.
    #[arg(long)]
    pub profile: Option<PathBuf>,
    #[command(flatten)]
    pub split: SplitArgs,
    #[arg(long, value_enum, default_value = "online")]
    pub part: Part,
}

#[derive(Debug, Args)]
pub struct WorkbenchArgs {
    #[arg(long)]
    pub seed: Option<u64>,
    /// Write report.json, model.shd, aligner.shm and bundle.shb here.
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Svg,
    Text,
}

#[derive(Debug, Args)]
pub struct RenderArgs {
    pub heatmap: PathBuf,
    #[arg(long, value_enum, default_value = "svg")]
    pub format: Format,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Outline the relevant predicates of this class.
    #[arg(long)]
    pub relevant_class: Option<String>,
    #[command(flatten)]
    pub dictionary: DictionaryArgs,
    #[arg(long)]
    pub title: Option<String>,
}
