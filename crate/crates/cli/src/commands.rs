use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use semheat_core::align::{evaluate as evaluate_fit, fit_least_squares, fit_sgd, load_map, save_map, AffineMap};
use semheat_core::concept::relevance_mask;
use semheat_core::desk::{save_model, AttackKind, MutationTarget};
use semheat_core::detect::{
    build_adversarial_profile, build_misclassification_profile, detect, evaluate, split_indices, AccuracyTable,
    DetectorMode, DetectorProfile, RuntimeSet,
};
use semheat_core::fault::{batch_localize, render_fault_table, robustness_analysis, LocusCounts};
use semheat_core::heatmap::{
    binarize, differential, render_svg, render_text, single_input, summary, Heatmap, RenderOptions, SummaryKind,
};
use semheat_core::store::{
    filter, filter_within, load_bundle, parse_dictionary_toml, save_bundle, ConceptDictionary, EmbeddingBundle,
    SampleFilter,
};
use semheat_core::workbench::{run, AlignerChoice, Desk, MutationRow, WorkbenchConfig, WorkbenchReport};
use semheat_core::{Error, Matrix};
use serde::Serialize;
use serde_json::json;

use crate::args::*;
use crate::config::{require_path, RunConfig};
use crate::error::{CliError, CliResult};

pub struct Ctx {
    pub json: bool,
    pub config: RunConfig,
}

impl Ctx {
    /// Prints `value` as JSON with `--json`, `text` otherwise.
    fn emit(&self, value: &impl Serialize, text: &str) -> CliResult {
        if self.json {
            print_out(&format!("{}\n", to_json(value)?))
        } else {
            print_out(text)
        }
    }

    fn bundle(&self, flag: Option<PathBuf>) -> CliResult<EmbeddingBundle> {
        Ok(load_bundle(require_path(flag, &self.config.paths.bundle, "bundle")?)?)
    }

    fn map(&self, flag: Option<PathBuf>) -> CliResult<AffineMap<f64>> {
        Ok(load_map(require_path(flag, &self.config.paths.map, "aligner map")?)?)
    }

    fn workbench(&self, seed: Option<u64>) -> WorkbenchConfig {
        let mut cfg = self.config.workbench.clone();
        if let Some(s) = seed {
            cfg.seed = s;
        }
        cfg
    }
}

/// Writes to stdout; a closed pipe (e.g. `| head`) ends output quietly.
fn print_out(text: &str) -> CliResult {
    let mut out = std::io::stdout().lock();
    match out.write_all(text.as_bytes()).and_then(|_| out.flush()) {
        Ok(()) => Ok(()),
        Err(e) if e.kind() == std::io::ErrorKind::BrokenPipe => Ok(()),
        Err(e) => Err(CliError::Core(Error::Io { path: "<stdout>".into(), source: e })),
    }
}

fn to_json(value: &impl Serialize) -> CliResult<String> {
    serde_json::to_string_pretty(value).map_err(|e| CliError::Core(Error::Json(e)))
}

fn write_text(path: &Path, text: &str) -> CliResult {
    std::fs::write(path, text).map_err(|e| CliError::Core(Error::Io { path: path.to_path_buf(), source: e }))
}

/// Writes to `out` when given, else to stdout.
fn deliver(out: Option<&Path>, text: &str) -> CliResult {
    match out {
        Some(p) => write_text(p, text),
        None => print_out(text),
    }
}

fn save_heatmap(ctx: &Ctx, h: &Heatmap, out: Option<&Path>) -> CliResult {
    match out {
        Some(p) => {
            h.save(p)?;
            if ctx.json {
                Ok(())
            } else {
                print_out(&format!("wrote {} heatmap to {}\n", h.kind, p.display()))
            }
        }
        None if ctx.json => deliver(None, &format!("{}\n", h.to_json()?)),
        None => deliver(None, &render_text(h, &RenderOptions::default())?),
    }
}

/// Parses `clean,correct`, `perturbation=fgsm`, `ground_truth=3`, `!clean` …
/// into a conjunction.
pub fn parse_filter(spec: &str) -> CliResult<SampleFilter> {
    let mut acc = SampleFilter::All;
    for part in spec.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let (negate, term) = match part.strip_prefix('!') {
            Some(rest) => (true, rest),
            None => (false, part),
        };
        let f = match term.split_once('=') {
            Some(("perturbation", tag)) => SampleFilter::Perturbation(tag.to_string()),
            Some(("ground_truth", c)) => SampleFilter::GroundTruth(parse_index(c)?),
            Some(("model_output", c)) => SampleFilter::ModelOutput(parse_index(c)?),
            Some(_) => return Err(CliError::Usage(format!("unknown filter term {term:?}"))),
            None => match term {
                "all" => SampleFilter::All,
                "clean" => SampleFilter::Clean,
                "perturbed" => SampleFilter::Perturbed,
                "correct" => SampleFilter::Correct,
                "misclassified" => SampleFilter::Misclassified,
                _ => return Err(CliError::Usage(format!("unknown filter term {term:?}"))),
            },
        };
        acc = acc.and(if negate { SampleFilter::Not(Box::new(f)) } else { f });
    }
    Ok(acc)
}

fn parse_index(s: &str) -> CliResult<usize> {
    s.parse().map_err(|_| CliError::Usage(format!("expected a class index, got {s:?}")))
}

pub fn parse_target(s: &str) -> CliResult<MutationTarget> {
    match s {
        "encoder" => Ok(MutationTarget::Encoder),
        "head" => Ok(MutationTarget::Head),
        _ => match s.strip_prefix("layer:").map(str::parse) {
            Some(Ok(l)) => Ok(MutationTarget::Layer(l)),
            _ => Err(CliError::Usage(format!("mutation target must be encoder, head or layer:N, got {s:?}"))),
        },
    }
}

pub fn parse_kinds(s: &str) -> CliResult<Vec<AttackKind>> {
    s.split(',')
        .map(|k| match k.trim() {
            "pgd_linf" | "pgd-linf" => Ok(AttackKind::PgdLinf),
            "pgd_l2" | "pgd-l2" => Ok(AttackKind::PgdL2),
            "fgsm" => Ok(AttackKind::Fgsm),
            "mixture" => Ok(AttackKind::Mixture),
            other => Err(CliError::Usage(format!("unknown attack kind {other:?}"))),
        })
        .collect()
}

fn mapped_rows(bundle: &EmbeddingBundle, map: &AffineMap<f64>) -> CliResult<Matrix<f64>> {
    Ok(map.apply_rows(&bundle.vision.cast::<f64>())?)
}

fn dictionary(ctx: &Ctx, args: &DictionaryArgs) -> CliResult<ConceptDictionary> {
    if let Some(b) = &args.bundle {
        return Ok(load_bundle(b)?.dictionary);
    }
    let path = require_path(args.dictionary.clone(), &ctx.config.paths.dictionary, "dictionary (--bundle or --dictionary)")?;
    let text = std::fs::read_to_string(&path).map_err(|e| CliError::Core(Error::Io { path, source: e }))?;
    Ok(parse_dictionary_toml(&text)?)
}

pub fn validate_bundle(ctx: &Ctx, a: BundleArg) -> CliResult {
    let b = ctx.bundle(a.bundle)?;
    b.validate()?;
    let perturbations: BTreeMap<String, usize> = b.meta.iter().fold(BTreeMap::new(), |mut m, s| {
        *m.entry(s.perturbation.to_string()).or_default() += 1;
        m
    });
    let value = json!({
        "schema": "semheat.validate/1",
        "valid": true,
        "samples": b.len(),
        "vision_dim": b.vision.cols(),
        "oracle_dim": b.concept_dirs.dim(),
        "has_oracle": b.oracle.is_some(),
        "concepts": b.dictionary.n_concepts(),
        "classes": b.dictionary.n_classes(),
        "perturbations": perturbations,
    });
    let mut text = format!(
        "valid bundle: {} samples, vision dim {}, oracle dim {}, {} concepts, {} classes, oracle embeddings {}\n",
        b.len(),
        b.vision.cols(),
        b.concept_dirs.dim(),
        b.dictionary.n_concepts(),
        b.dictionary.n_classes(),
        if b.oracle.is_some() { "present" } else { "absent" }
    );
    for (tag, n) in &perturbations {
        let _ = writeln!(text, "  {tag}: {n}");
    }
    ctx.emit(&value, &text)
}

pub fn fit_aligner(ctx: &Ctx, a: FitArgs) -> CliResult {
    let b = ctx.bundle(a.input.bundle)?;
    let oracle = b.oracle()?;
    let idx = filter(&b, &parse_filter(&a.filter)?);
    if idx.is_empty() {
        return Err(Error::Empty(format!("no samples match filter {:?}", a.filter)).into());
    }
    let source = b.vision.select_rows(&idx).cast::<f64>();
    let target = oracle.select_rows(&idx).cast::<f64>();
    let mut choice = ctx.config.aligner.clone();
    match a.method {
        Some(Method::LeastSquares) if !matches!(choice, AlignerChoice::LeastSquares { .. }) => {
            choice = AlignerChoice::LeastSquares { ridge: 1e-3 }
        }
        Some(Method::Sgd) if !matches!(choice, AlignerChoice::Sgd(_)) => choice = AlignerChoice::Sgd(Default::default()),
        _ => {}
    }
    match &mut choice {
        AlignerChoice::LeastSquares { ridge } => {
            if let Some(r) = a.ridge {
                *ridge = r;
            }
        }
        AlignerChoice::Sgd(cfg) => {
            if let Some(e) = a.epochs {
                cfg.epochs = e;
            }
            if let Some(lr) = a.learning_rate {
                cfg.learning_rate = lr;
            }
            if let Some(s) = a.seed {
                cfg.seed = s;
            }
        }
    }
    let (map, loss_curve) = match &choice {
        AlignerChoice::LeastSquares { ridge } => (fit_least_squares(&source, &target, *ridge)?, None),
        AlignerChoice::Sgd(cfg) => {
            let (map, report) = fit_sgd(&source, &target, cfg)?;
            (map, Some(report.loss_curve))
        }
    };
    let q = evaluate_fit(&map, &source, &target)?;
    save_map(&map, &a.out)?;
    let value = json!({
        "schema": "semheat.fit/1",
        "aligner": choice,
        "pairs": idx.len(),
        "source_dim": map.source_dim(),
        "target_dim": map.target_dim(),
        "mse": q.mse,
        "r_squared": q.r_squared,
        "loss_curve": loss_curve,
        "out": a.out,
    });
    let text = format!(
        "fitted {}x{} map on {} pairs: MSE {:.6}, R^2 {:.6}; wrote {}\n",
        map.target_dim(),
        map.source_dim(),
        idx.len(),
        q.mse,
        q.r_squared,
        a.out.display()
    );
    ctx.emit(&value, &text)
}

fn space_rows(ctx: &Ctx, source: EmbeddingSource, space: Space) -> CliResult<(EmbeddingBundle, Matrix<f64>)> {
    let b = ctx.bundle(source.bundle)?;
    let rows = match space {
        Space::Oracle => b.oracle()?.cast::<f64>(),
        Space::Mapped => {
            let map = ctx.map(source.map)?;
            mapped_rows(&b, &map)?
        }
    };
    Ok((b, rows))
}

pub fn heatmap(ctx: &Ctx, a: HeatmapArgs) -> CliResult {
    let (b, rows) = space_rows(ctx, a.source, a.space)?;
    let names = &b.dictionary.concepts;
    let extra = parse_filter(&a.filter)?;
    let h = match a.kind {
        Kind::Single => {
            let id = a.sample.ok_or_else(|| CliError::Usage("--sample is required for a single heatmap".into()))?;
            let candidates = filter(&b, &extra);
            let i = candidates
                .into_iter()
                .find(|&i| b.meta[i].sample_id == id)
                .ok_or_else(|| CliError::Core(Error::Metadata(format!("no sample {id:?} matches the filter"))))?;
            let mut h = single_input(rows.row(i), &b.concept_dirs, names)?;
            h.provenance.filter = format!("sample {id} ({})", b.meta[i].perturbation);
            h
        }
        Kind::GroundTruth | Kind::OutputLabel => {
            let key = a.class.ok_or_else(|| CliError::Usage("--class is required for a summary heatmap".into()))?;
            let class = b.dictionary.resolve_class(&key)?;
            let (by, kind) = match a.kind {
                Kind::GroundTruth => (SampleFilter::GroundTruth(class), SummaryKind::GroundTruth),
                _ => (SampleFilter::ModelOutput(class), SummaryKind::OutputLabel),
            };
            let f = by.and(extra);
            let idx = filter(&b, &f);
            summary(&rows.select_rows(&idx), &b.concept_dirs, names, kind, Some(b.dictionary.classes[class].clone()), f.describe())?
        }
    };
    save_heatmap(ctx, &h, a.out.as_deref())
}

pub fn diff(ctx: &Ctx, a: DiffArgs) -> CliResult {
    let h = differential(&Heatmap::load(&a.first)?, &Heatmap::load(&a.second)?)?;
    save_heatmap(ctx, &h, a.out.as_deref())
}

pub fn binarize_cmd(ctx: &Ctx, a: BinarizeArgs) -> CliResult {
    let t = a.t.unwrap_or(ctx.config.threshold);
    let h = binarize(&Heatmap::load(&a.heatmap)?, t)?;
    save_heatmap(ctx, &h, a.out.as_deref())
}

pub fn localize(ctx: &Ctx, a: LocalizeArgs) -> CliResult {
    let b = ctx.bundle(a.source.bundle)?;
    let map = ctx.map(a.source.map)?;
    let mut report = batch_localize(&b, &map, None)?;
    if let Ok(oracle) = b.oracle() {
        let mut rows = filter(&b, &SampleFilter::Clean);
        if rows.is_empty() {
            rows = (0..b.len()).collect();
        }
        let q = evaluate_fit(&map, &b.vision.select_rows(&rows).cast::<f64>(), &oracle.select_rows(&rows).cast::<f64>())?;
        report.aligner_r_squared = Some(q.r_squared);
    }
    if let Some(path) = &a.per_sample {
        let mut lines = String::new();
        for s in &report.per_sample {
            let _ = writeln!(lines, "{}", serde_json::to_string(s).map_err(Error::Json)?);
        }
        write_text(path, &lines)?;
    }
    let mut rows = vec![("all samples".to_string(), report.counts)];
    let mut by_tag: BTreeMap<String, LocusCounts> = BTreeMap::new();
    for (m, s) in b.meta.iter().zip(&report.per_sample) {
        by_tag.entry(m.perturbation.to_string()).or_default().add(s.locus);
    }
    if by_tag.len() > 1 {
        rows.extend(by_tag);
    }
    let mut text = render_fault_table(&rows);
    let c = report.counts;
    let _ = writeln!(
        text,
        "{} samples, {} misclassified{}",
        c.total(),
        c.misclassified(),
        c.encoder_share().map(|s| format!(", encoder share {:.2}%", 100.0 * s)).unwrap_or_default()
    );
    let by_perturbation: BTreeMap<String, LocusCounts> = rows.iter().skip(1).map(|(t, c)| (t.clone(), *c)).collect();
    let value = json!({
        "schema": report.schema,
        "counts": report.counts,
        "encoder_share": report.counts.encoder_share(),
        "aligner_r_squared": report.aligner_r_squared,
        "by_perturbation": by_perturbation,
    });
    ctx.emit(&value, &text)
}

pub fn robustness(ctx: &Ctx, a: RobustnessArgs) -> CliResult {
    let clean = Heatmap::load(&a.clean)?;
    let perturbed = Heatmap::load(&a.perturbed)?;
    let dict = dictionary(ctx, &a.dictionary)?;
    let key = a
        .class
        .or_else(|| clean.provenance.class.clone())
        .ok_or_else(|| CliError::Usage("--class is required when the heatmap records no class".into()))?;
    let class = dict.resolve_class(&key)?;
    if dict.concepts != clean.concept_names {
        return Err(Error::DimensionMismatch("dictionary concepts differ from the heatmap axes".into()).into());
    }
    let threshold = a.threshold.unwrap_or(ctx.config.robustness_threshold);
    let rel = relevance_mask(class, &dict)?;
    let r = robustness_analysis(&clean, &perturbed, threshold, &rel)?;
    let cells: Vec<String> = r
        .nonrobust_relevant_cells(&rel)
        .iter()
        .map(|p| format!("{} > {}", dict.concepts[p.i], dict.concepts[p.j]))
        .collect();
    let value = json!({
        "schema": "semheat.robustness/1",
        "class": dict.classes[class],
        "threshold": threshold,
        "n_robust_relevant": r.n_robust_relevant,
        "n_nonrobust_relevant": r.n_nonrobust_relevant,
        "nonrobust_relevant": cells,
        "robust_mask": r.robust_mask,
    });
    let mut text = format!(
        "class {}: {} relevant predicates robust, {} non-robust at threshold {threshold}\n",
        dict.classes[class], r.n_robust_relevant, r.n_nonrobust_relevant
    );
    for c in &cells {
        let _ = writeln!(text, "  non-robust: {c}");
    }
    ctx.emit(&value, &text)
}

fn mutation_table(rows: &[MutationRow]) -> String {
    let table: Vec<(String, LocusCounts)> = rows.iter().map(|r| (r.label.clone(), r.counts)).collect();
    let mut s = render_fault_table(&table);
    for r in rows {
        let mean = r.accuracies.iter().sum::<f64>() / r.accuracies.len().max(1) as f64;
        let _ = writeln!(s, "{}: split {}, mean accuracy {:.3}", r.label, r.split_index, mean);
    }
    s
}

pub fn mutate_validate(ctx: &Ctx, a: MutateArgs) -> CliResult {
    let mut cfg = ctx.workbench(a.seed);
    let m = &ctx.config.mutation;
    if let Some(n) = a.neurons.or(m.n_neurons) {
        cfg.mutation_neurons = n;
    }
    if let Some(n) = a.seeds.or(m.seeds) {
        cfg.mutation_seeds = n;
    }
    if m.range.is_some() {
        cfg.mutation_range = m.range;
    }
    let target = match a.target.as_deref() {
        Some(t) => Some(parse_target(t)?),
        None => m.target,
    };
    let desk = Desk::build(&cfg)?;
    let mut rows = desk.mutation_rows()?;
    if let Some(target) = target {
        let label = match target {
            MutationTarget::Encoder => "custom_encoder".to_string(),
            MutationTarget::Head => "custom_head".to_string(),
            MutationTarget::Layer(l) => format!("layer_{l}"),
        };
        rows.push(desk.mutation_row(&label, target, desk.split())?);
    }
    let value = json!({ "schema": "semheat.mutation/1", "seed": cfg.seed, "rows": rows });
    ctx.emit(&value, &mutation_table(&rows))
}

pub fn attack(ctx: &Ctx, a: AttackArgs) -> CliResult {
    let cfg = ctx.workbench(a.seed);
    let kinds = match &a.kinds {
        Some(k) => parse_kinds(k)?,
        None => ctx.config.attack.kinds.clone(),
    };
    let epsilon = a.epsilon.or(ctx.config.attack.epsilon).unwrap_or(cfg.epsilon);
    let desk = Desk::build(&cfg)?;
    let specs: Vec<_> = kinds.iter().map(|&k| cfg.attack(k, epsilon)).collect();
    let bundle = desk.export_bundle(&desk.model, &specs)?;
    save_bundle(&bundle, &a.out)?;
    if let Some(p) = &a.save_model {
        save_model(&desk.model, p)?;
    }
    if let Some(p) = &a.save_map {
        save_map(desk.map(desk.split())?, p)?;
    }
    let mut accuracy = BTreeMap::new();
    for tag in std::iter::once("clean".to_string()).chain(kinds.iter().map(|k| k.as_str().to_string())) {
        let idx = filter(&bundle, &SampleFilter::Perturbation(tag.clone()));
        let correct = filter_within(&bundle.meta, idx.iter().copied(), &SampleFilter::Correct).len();
        accuracy.insert(tag, correct as f64 / idx.len().max(1) as f64);
    }
    let value = json!({
        "schema": "semheat.attack/1",
        "seed": cfg.seed,
        "epsilon": epsilon,
        "samples": bundle.len(),
        "accuracy": accuracy,
        "out": a.out,
    });
    let mut text = format!("wrote {} samples to {} (epsilon {epsilon})\n", bundle.len(), a.out.display());
    for (tag, acc) in &accuracy {
        let _ = writeln!(text, "  {tag}: accuracy {acc:.3}");
    }
    ctx.emit(&value, &text)
}

/// Offline/online halves grouped by sample id, so the clean and perturbed
/// copies of one input always land on the same side.
fn split_rows(ctx: &Ctx, b: &EmbeddingBundle, s: &SplitArgs) -> CliResult<(Vec<usize>, Vec<usize>)> {
    let fraction = s.offline_fraction.unwrap_or(ctx.config.offline_fraction);
    let seed = s.split_seed.unwrap_or(ctx.config.split_seed);
    let mut ids: Vec<&str> = Vec::new();
    let mut index: HashMap<&str, usize> = HashMap::new();
    for m in &b.meta {
        index.entry(m.sample_id.as_str()).or_insert_with(|| {
            ids.push(m.sample_id.as_str());
            ids.len() - 1
        });
    }
    let (offline_ids, _) = split_indices(ids.len(), fraction, seed)?;
    let mut offline_flag = vec![false; ids.len()];
    for i in offline_ids {
        offline_flag[i] = true;
    }
    let (mut offline, mut online) = (Vec::new(), Vec::new());
    for (r, m) in b.meta.iter().enumerate() {
        if offline_flag[index[m.sample_id.as_str()]] {
            offline.push(r);
        } else {
            online.push(r);
        }
    }
    Ok((offline, online))
}

fn column<F: Fn(&semheat_core::store::SampleMeta) -> usize>(b: &EmbeddingBundle, idx: &[usize], f: F) -> Vec<usize> {
    idx.iter().map(|&i| f(&b.meta[i])).collect()
}

pub fn build_profile(ctx: &Ctx, a: ProfileArgs) -> CliResult {
    let b = ctx.bundle(a.source.bundle)?;
    let map = ctx.map(a.source.map)?;
    let rows = mapped_rows(&b, &map)?;
    let t = a.t.unwrap_or(ctx.config.threshold);
    let (offline, _) = split_rows(ctx, &b, &a.split)?;
    let clean = filter_within(&b.meta, offline.iter().copied(), &SampleFilter::Clean);
    let d = &b.dictionary;
    let profile = match a.mode {
        Mode::Adversarial => {
            let perturbed = filter_within(&b.meta, offline.iter().copied(), &SampleFilter::Perturbed);
            build_adversarial_profile(
                &rows.select_rows(&clean),
                &column(&b, &clean, |m| m.ground_truth),
                &column(&b, &clean, |m| m.model_output),
                &rows.select_rows(&perturbed),
                &column(&b, &perturbed, |m| m.model_output),
                &b.concept_dirs,
                &d.concepts,
                &d.classes,
                t,
            )?
        }
        Mode::Misclassification => build_misclassification_profile(
            &rows.select_rows(&clean),
            &column(&b, &clean, |m| m.ground_truth),
            &column(&b, &clean, |m| m.model_output),
            &b.concept_dirs,
            &d.concepts,
            &d.classes,
            t,
        )?,
    };
    write_text(&a.out, &format!("{}\n", profile.to_json()?))?;
    let covered = profile.covered_classes();
    let value = json!({
        "schema": "semheat.build_profile/1",
        "mode": profile.mode,
        "threshold": t,
        "offline_samples": offline.len(),
        "covered_classes": covered.iter().map(|&c| d.classes[c].clone()).collect::<Vec<_>>(),
        "out": a.out,
    });
    let text = format!(
        "built {:?} profile from {} offline samples, t = {t}; {} of {} classes covered; wrote {}\n",
        profile.mode,
        offline.len(),
        covered.len(),
        d.n_classes(),
        a.out.display()
    );
    ctx.emit(&value, &text)
}

struct DetectInputs {
    bundle: EmbeddingBundle,
    rows: Matrix<f64>,
    profile: DetectorProfile,
    selected: Vec<usize>,
}

fn detect_inputs(ctx: &Ctx, a: DetectArgs) -> CliResult<DetectInputs> {
    let bundle = ctx.bundle(a.source.bundle)?;
    let map = ctx.map(a.source.map)?;
    let path = require_path(a.profile, &ctx.config.paths.profile, "detector profile")?;
    let text = std::fs::read_to_string(&path).map_err(|e| CliError::Core(Error::Io { path, source: e }))?;
    let profile = DetectorProfile::from_json(&text)?;
    let rows = mapped_rows(&bundle, &map)?;
    let (offline, online) = split_rows(ctx, &bundle, &a.split)?;
    let selected = match a.part {
        Part::Offline => offline,
        Part::Online => online,
        Part::All => (0..bundle.len()).collect(),
    };
    Ok(DetectInputs { bundle, rows, profile, selected })
}

pub fn detect_cmd(ctx: &Ctx, a: DetectArgs) -> CliResult {
    let d = detect_inputs(ctx, a)?;
    let mut out = String::new();
    for &i in &d.selected {
        let m = &d.bundle.meta[i];
        let line = match detect(d.rows.row(i), m.model_output, &d.profile, &d.bundle.concept_dirs) {
            Ok(r) => json!({
                "schema": "semheat.detect/1",
                "sample_id": m.sample_id,
                "perturbation": m.perturbation,
                "ground_truth": m.ground_truth,
                "predicted": m.model_output,
                "verdict": r.verdict,
                "iou_p": r.iou_p,
                "iou_n": r.iou_n,
            }),
            Err(Error::UncoveredClass(_)) => json!({
                "schema": "semheat.detect/1",
                "sample_id": m.sample_id,
                "perturbation": m.perturbation,
                "ground_truth": m.ground_truth,
                "predicted": m.model_output,
                "verdict": "abstain",
                "error": "uncovered_class",
            }),
            Err(e) => return Err(e.into()),
        };
        let _ = writeln!(out, "{}", serde_json::to_string(&line).map_err(Error::Json)?);
    }
    deliver(None, &out)
}

fn accuracy_text(t: &AccuracyTable) -> String {
    let w = t.per_class.iter().map(|r| r.class.len()).max().unwrap_or(0).max(5);
    let fmt = |v: Option<f64>| v.map(|x| format!("{x:.3}")).unwrap_or_else(|| "-".into());
    let mut s = format!("{:<w$} | {:>5} | {:>5} | {:>5} | {:>5} | {:>9}\n", "class", "a_p", "a_n", "n_pos", "n_neg", "abstained");
    s.push_str(&"-".repeat(w + 46));
    s.push('\n');
    for r in t.per_class.iter().chain(std::iter::once(&t.total)) {
        let _ = writeln!(
            s,
            "{:<w$} | {:>5} | {:>5} | {:>5} | {:>5} | {:>9}",
            r.class,
            fmt(r.a_p),
            fmt(r.a_n),
            r.n_positive,
            r.n_negative,
            r.abstained
        );
    }
    s
}

pub fn evaluate_detector(ctx: &Ctx, a: DetectArgs) -> CliResult {
    let d = detect_inputs(ctx, a)?;
    let rows: Vec<usize> = match d.profile.mode {
        DetectorMode::Adversarial => d.selected.clone(),
        DetectorMode::Misclassification => filter_within(&d.bundle.meta, d.selected.iter().copied(), &SampleFilter::Clean),
    };
    let meta = &d.bundle.meta;
    let truth = column(&d.bundle, &rows, |m| m.ground_truth);
    let predicted = column(&d.bundle, &rows, |m| m.model_output);
    let positive: Vec<bool> = rows
        .iter()
        .map(|&i| match d.profile.mode {
            DetectorMode::Adversarial => !meta[i].perturbation.is_clean(),
            DetectorMode::Misclassification => !meta[i].is_correct(),
        })
        .collect();
    let emb = d.rows.select_rows(&rows);
    let table = evaluate(
        &d.profile,
        &d.bundle.concept_dirs,
        &RuntimeSet { embeddings: &emb, truth: &truth, predicted: &predicted, positive: &positive },
    )?;
    let value = json!({ "schema": "semheat.evaluation/1", "mode": d.profile.mode, "samples": rows.len(), "table": table });
    ctx.emit(&value, &accuracy_text(&table))
}

fn workbench_text(r: &WorkbenchReport) -> String {
    let mut s = format!(
        "desk workbench, seed {}: {} train / {} test samples, train accuracy {:.3}, test accuracy {:.3}\n\n",
        r.seed, r.n_train, r.n_test, r.train_accuracy, r.test_accuracy
    );
    for a in &r.aligners {
        let _ = writeln!(
            s,
            "aligner at split {} (dim {}): train R^2 {:.4}, test R^2 {:.4}, test MSE {:.5}",
            a.split_index, a.embedding_dim, a.train_r_squared, a.test_r_squared, a.test_mse
        );
    }
    s.push_str("\nmutation validation\n");
    s.push_str(&mutation_table(&r.mutations));
    for (name, v) in [("attack", &r.vulnerability), ("weak attack", &r.weak_vulnerability)] {
        let _ = writeln!(
            s,
            "\n{name} (pgd_linf, eps {}): accuracy {:.3}, encoder {} / head {}{}, non-robust relevant predicates {}",
            v.epsilon,
            v.accuracy,
            v.counts.encoder,
            v.counts.head,
            v.encoder_share.map(|x| format!(" ({:.2}% encoder)", 100.0 * x)).unwrap_or_default(),
            v.n_nonrobust_relevant
        );
    }
    s.push_str("\nruntime detection\n");
    let fmt = |v: Option<f64>| v.map(|x| format!("{x:.3}")).unwrap_or_else(|| "-".into());
    let _ = writeln!(s, "{:<18} | {:>8} | {:>5} | {:>5}", "setting", "accuracy", "a_p", "a_n");
    for d in &r.detection {
        let _ = writeln!(
            s,
            "{:<18} | {:>8} | {:>5} | {:>5}",
            d.setting,
            fmt(d.accuracy_under_attack),
            fmt(d.table.total.a_p),
            fmt(d.table.total.a_n)
        );
    }
    s
}

pub fn workbench(ctx: &Ctx, a: WorkbenchArgs) -> CliResult {
    let cfg = ctx.workbench(a.seed);
    let report = run(&cfg)?;
    if let Some(dir) = &a.out_dir {
        std::fs::create_dir_all(dir).map_err(|e| CliError::Core(Error::Io { path: dir.clone(), source: e }))?;
        write_text(&dir.join("report.json"), &format!("{}\n", report.to_json()?))?;
        let desk = Desk::build(&cfg)?;
        save_model(&desk.model, dir.join("model.shd"))?;
        save_map(desk.map(desk.split())?, dir.join("aligner.shm"))?;
        let spec = cfg.attack(AttackKind::PgdLinf, cfg.epsilon);
        save_bundle(&desk.export_bundle(&desk.model, &[spec])?, dir.join("bundle.shb"))?;
    }
    if ctx.json {
        print_out(&format!("{}\n", report.to_json()?))
    } else {
        print_out(&workbench_text(&report))
    }
}

pub fn render(ctx: &Ctx, a: RenderArgs) -> CliResult {
    let h = Heatmap::load(&a.heatmap)?;
    let highlight = match &a.relevant_class {
        Some(c) => {
            let dict = dictionary(ctx, &a.dictionary)?;
            Some(relevance_mask(dict.resolve_class(c)?, &dict)?)
        }
        None => None,
    };
    let opts = RenderOptions { highlight: highlight.as_ref(), title: a.title.as_deref(), ..Default::default() };
    let out = match a.format {
        Format::Svg => render_svg(&h, &opts)?,
        Format::Text => render_text(&h, &opts)?,
    };
    deliver(a.out.as_deref(), &out)
}
