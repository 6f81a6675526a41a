use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;
use vfm4sdg::distill::{
    combine_losses, csrpd_loss_batch, reconstruct_batch, reconstruct_pyramid, FeaturePyramid,
    LevelLoss, TeacherFeature,
};
use vfm4sdg::enhance::{scpqe, EnhancerParams, QuerySet};
use vfm4sdg::io::{
    annotations_from_str, parse_detections, read_tensor, write_tensor, AnnotationSet,
    ExportManifest, MANIFEST_FILE,
};
use vfm4sdg::metrics::{
    domain_sweep, map50, render_sweep, Detection, DomainInput, ErrorReport, SweepTable,
};
use vfm4sdg::prototype::{build_bank, load_bank, save_bank, BoxAnnotation};
use vfm4sdg::verify::{gradient_suite, FD_STEP, FD_TOL};
use vfm4sdg::Tensor;

use crate::config::{RunConfig, LAMBDA_SWEEP};
use crate::error::{CliError, Context, DISTILL, ENHANCE, IO, METRICS, PROTOTYPE, TENSOR};

/// Human table, JSON report and an optional failure that still carries a report.
#[derive(Debug)]
pub struct Outcome {
    pub text: String,
    pub json: String,
    pub failure: Option<CliError>,
}

impl Outcome {
    fn new<T: Serialize>(text: String, report: &T) -> Result<Self, CliError> {
        let mut json = serde_json::to_string_pretty(report)
            .map_err(|e| CliError::new("cli", "serialize", e.to_string()))?;
        json.push('\n');
        Ok(Self {
            text,
            json,
            failure: None,
        })
    }
}

fn read_text(path: &Path) -> Result<String, CliError> {
    std::fs::read_to_string(path)
        .map_err(|e| CliError::new(IO, "io", format!("{}: {e}", path.display())))
}

fn read_tensor_at(path: &Path) -> Result<Tensor, CliError> {
    read_tensor(path)
        .map_err(|e| CliError::new(IO, e.kind().to_string(), format!("{}: {e}", path.display())))
}

fn load_annotations(path: &Path) -> Result<AnnotationSet, CliError> {
    let parsed = annotations_from_str(&read_text(path)?)
        .map_err(|e| CliError::new(IO, e.kind().to_string(), format!("{}: {e}", path.display())))?;
    Ok(parsed.value)
}

fn fmt_grid((h, w): (usize, usize)) -> String {
    format!("{h}x{w}")
}

// ---------------------------------------------------------------- distill-loss

#[derive(Debug, Clone, Default)]
pub struct DistillArgs {
    /// One file per pyramid level, `C×H×W` or `B×C×H×W`.
    pub students: Vec<PathBuf>,
    /// Flattened `Σ HₗWₗ×C` (or `B×Σ HₗWₗ×C`) tokens, used instead of `students`.
    pub tokens: Option<PathBuf>,
    pub level_shapes: Vec<(usize, usize)>,
    pub teacher: PathBuf,
    pub det_loss: f64,
    pub lambda_sweep: Option<Vec<f64>>,
}

#[derive(Debug, Serialize)]
struct SweepRow {
    lambda: f64,
    weighted: f64,
    combined: f64,
}

#[derive(Debug, Serialize)]
struct DistillReport {
    command: &'static str,
    batch: usize,
    beta: f64,
    levels: Vec<usize>,
    student_grids: Vec<[usize; 2]>,
    teacher_grid: [usize; 2],
    per_level: Vec<LevelLoss>,
    distill_loss: f64,
    lambda: f64,
    det_loss: f64,
    combined: f64,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    lambda_sweep: Vec<SweepRow>,
}

fn split_batch(t: &Tensor, what: &str) -> Result<Vec<Tensor>, CliError> {
    match t.ndim() {
        3 => Ok(vec![t.clone()]),
        4 => (0..t.shape()[0])
            .map(|b| t.index(b).within(TENSOR))
            .collect(),
        n => Err(CliError::new(
            DISTILL,
            "dimension",
            format!(
                "{what} must be C×H×W or B×C×H×W, got {n}-d shape {:?}",
                t.shape()
            ),
        )),
    }
}

fn student_pyramids(args: &DistillArgs) -> Result<Vec<FeaturePyramid>, CliError> {
    if let Some(path) = &args.tokens {
        if !args.students.is_empty() {
            return Err(CliError::usage(
                "--tokens and --student are mutually exclusive",
            ));
        }
        if args.level_shapes.is_empty() {
            return Err(CliError::usage("--tokens needs --level-shapes"));
        }
        let tokens = read_tensor_at(path)?;
        return match tokens.ndim() {
            2 => Ok(vec![
                reconstruct_pyramid(&tokens, &args.level_shapes).within(DISTILL)?
            ]),
            _ => reconstruct_batch(&tokens, &args.level_shapes).within(DISTILL),
        };
    }
    if args.students.is_empty() {
        return Err(CliError::usage(
            "give one --student file per level, or --tokens",
        ));
    }
    let mut per_level = Vec::with_capacity(args.students.len());
    for (l, path) in args.students.iter().enumerate() {
        per_level.push(split_batch(
            &read_tensor_at(path)?,
            &format!("student level {l}"),
        )?);
    }
    let batch = per_level[0].len();
    if let Some((l, _)) = per_level.iter().enumerate().find(|(_, v)| v.len() != batch) {
        return Err(CliError::new(
            DISTILL,
            "dimension",
            format!(
                "student level {l} has batch {} but level 0 has {batch}",
                per_level[l].len()
            ),
        ));
    }
    (0..batch)
        .map(|b| {
            FeaturePyramid::from_maps(per_level.iter().map(|v| v[b].clone()).collect())
                .within(DISTILL)
        })
        .collect()
}

pub fn distill_loss(args: &DistillArgs, config: &RunConfig) -> Result<Outcome, CliError> {
    config.validate()?;
    if !args.det_loss.is_finite() {
        return Err(CliError::usage(format!(
            "--det-loss must be finite, got {}",
            args.det_loss
        )));
    }
    let students = student_pyramids(args)?;
    let teacher_maps = split_batch(&read_tensor_at(&args.teacher)?, "teacher")?;
    let tag = args.teacher.display().to_string();
    let teachers: Vec<TeacherFeature> = teacher_maps
        .into_iter()
        .map(|m| TeacherFeature::new(m, tag.clone()).within(DISTILL))
        .collect::<Result<_, _>>()?;
    let loss =
        csrpd_loss_batch(&students, &teachers, &config.levels, config.beta).within(DISTILL)?;
    let det = Tensor::scalar(args.det_loss);
    let combine = |lambda: f64| -> Result<f64, CliError> {
        Ok(combine_losses(&det, &loss.total, lambda)
            .within(DISTILL)?
            .data()[0])
    };
    let combined = combine(config.lambda)?;
    let sweep_values = match &args.lambda_sweep {
        Some(v) if v.is_empty() => LAMBDA_SWEEP.to_vec(),
        Some(v) => v.clone(),
        None => Vec::new(),
    };
    let distill = loss.value();
    let lambda_sweep = sweep_values
        .iter()
        .map(|&lambda| {
            let combined = combine(lambda)?;
            Ok(SweepRow {
                lambda,
                weighted: combined - args.det_loss,
                combined,
            })
        })
        .collect::<Result<Vec<_>, CliError>>()?;
    let teacher_grid = teachers[0].grid();
    let student_grids = students[0]
        .level_shapes()
        .into_iter()
        .map(|(h, w)| [h, w])
        .collect();
    let report = DistillReport {
        command: "distill-loss",
        batch: students.len(),
        beta: config.beta,
        levels: config.levels.iter().copied().collect(),
        student_grids,
        teacher_grid: [teacher_grid.0, teacher_grid.1],
        per_level: loss.per_level.clone(),
        distill_loss: distill,
        lambda: config.lambda,
        det_loss: args.det_loss,
        combined,
        lambda_sweep,
    };

    let mut text = format!(
        "{:<6} {:>8} {:<14} {}\n",
        "level", "grid", "alignment", "loss"
    );
    let grids = students[0].level_shapes();
    for l in &report.per_level {
        let _ = writeln!(
            text,
            "{:<6} {:>8} {:<14} {}",
            l.level,
            fmt_grid(grids[l.level]),
            l.mode.to_string(),
            l.value
        );
    }
    let _ = writeln!(text, "distill_loss {distill}");
    let _ = writeln!(
        text,
        "combined {combined} (det {} + lambda {} x distill)",
        args.det_loss, config.lambda
    );
    if !report.lambda_sweep.is_empty() {
        let _ = writeln!(
            text,
            "{:>8} {:>22} {:>22}",
            "lambda", "weighted", "combined"
        );
        for r in &report.lambda_sweep {
            let _ = writeln!(
                text,
                "{:>8} {:>22} {:>22}",
                r.lambda, r.weighted, r.combined
            );
        }
    }
    Outcome::new(text, &report)
}

// ------------------------------------------------------------ build-prototypes

#[derive(Debug, Clone, Default)]
pub struct BuildArgs {
    /// Directory of `<image_id>.vfmt` files or an exporter manifest.
    pub features_dir: PathBuf,
    pub annotations: PathBuf,
    pub out: PathBuf,
    /// Restrict to images of this domain.
    pub domain: Option<String>,
}

#[derive(Debug, Serialize)]
struct CategorySummary {
    id: u64,
    name: String,
    instances: usize,
}

#[derive(Debug, Serialize)]
struct BankSummary {
    command: &'static str,
    bank: String,
    k: usize,
    channels: usize,
    images: usize,
    annotations: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    domain: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    teacher_model: Option<String>,
    categories: Vec<CategorySummary>,
    /// Declared categories that received no instance.
    empty_categories: Vec<u64>,
}

pub fn build_prototypes(args: &BuildArgs) -> Result<Outcome, CliError> {
    let set = load_annotations(&args.annotations)?;
    let domain_of: BTreeMap<u64, &str> = set
        .images
        .iter()
        .map(|i| (i.id, i.domain.as_str()))
        .collect();
    let annotations: Vec<BoxAnnotation> = set
        .annotations
        .iter()
        .filter(|a| match &args.domain {
            Some(d) => domain_of.get(&a.image_id) == Some(&d.as_str()),
            None => true,
        })
        .cloned()
        .collect();
    if annotations.is_empty() {
        return Err(CliError::new(
            PROTOTYPE,
            "contract",
            "no annotations to pool",
        ));
    }
    let manifest_path = args.features_dir.join(MANIFEST_FILE);
    let manifest = if manifest_path.is_file() {
        Some(
            ExportManifest::parse(&read_text(&manifest_path)?).map_err(|e| {
                CliError::new(
                    IO,
                    e.kind().to_string(),
                    format!("{}: {e}", manifest_path.display()),
                )
            })?,
        )
    } else {
        None
    };
    let image_ids: BTreeSet<u64> = annotations.iter().map(|a| a.image_id).collect();
    let mut features = BTreeMap::new();
    let mut sizes = BTreeMap::new();
    for &id in &image_ids {
        let path = match &manifest {
            Some(m) => m.path_for(&args.features_dir, id).ok_or_else(|| {
                CliError::new(
                    IO,
                    "lookup",
                    format!("manifest has no entry for image_id {id}"),
                )
            })?,
            None => args.features_dir.join(format!("{id}.vfmt")),
        };
        let map = read_tensor_at(&path)?;
        features.insert(
            id,
            TeacherFeature::new(map, path.display().to_string()).within(PROTOTYPE)?,
        );
        let img = set.image(id).expect("annotation set validated");
        sizes.insert(id, (img.height, img.width));
    }
    let bank = build_bank(&features, &sizes, &annotations).within(PROTOTYPE)?;
    save_bank(&args.out, &bank).map_err(|e| {
        CliError::new(
            IO,
            e.kind().to_string(),
            format!("{}: {e}", args.out.display()),
        )
    })?;

    let categories: Vec<CategorySummary> = bank
        .category_ids()
        .iter()
        .zip(bank.instance_counts())
        .map(|(&id, &instances)| CategorySummary {
            id,
            name: set.category_name(id).unwrap_or_default().to_string(),
            instances,
        })
        .collect();
    let empty_categories: Vec<u64> = set
        .categories
        .iter()
        .map(|c| c.id)
        .filter(|id| bank.get(*id).is_none())
        .collect();
    for id in &empty_categories {
        log::warn!("category {id} has no instances and no prototype");
    }
    let summary = BankSummary {
        command: "build-prototypes",
        bank: args.out.display().to_string(),
        k: bank.len(),
        channels: bank.channels(),
        images: image_ids.len(),
        annotations: annotations.len(),
        domain: args.domain.clone(),
        teacher_model: manifest.map(|m| m.model_id),
        categories,
        empty_categories,
    };
    let mut text = format!(
        "K={} channels={} images={}\n",
        summary.k, summary.channels, summary.images
    );
    let _ = writeln!(text, "{:>6}  {:<16} {:>9}", "id", "name", "instances");
    for c in &summary.categories {
        let _ = writeln!(text, "{:>6}  {:<16} {:>9}", c.id, c.name, c.instances);
    }
    Outcome::new(text, &summary)
}

// ------------------------------------------------------------- enhance-queries

#[derive(Debug, Clone, Default)]
pub struct EnhanceArgs {
    pub queries: PathBuf,
    pub bank: PathBuf,
    pub teacher: PathBuf,
    pub out: PathBuf,
    pub params: Option<PathBuf>,
    pub save_params: Option<PathBuf>,
}

#[derive(Debug, Serialize)]
struct EnhanceReport {
    command: &'static str,
    queries: [usize; 2],
    prototypes: usize,
    teacher_channels: usize,
    teacher_grid: [usize; 2],
    heads: usize,
    params: &'static str,
    #[serde(skip_serializing_if = "Option::is_none")]
    seed: Option<u64>,
    output: String,
}

pub fn enhance_queries(args: &EnhanceArgs, config: &RunConfig) -> Result<Outcome, CliError> {
    config.validate()?;
    let queries = read_tensor_at(&args.queries)?;
    let bank = load_bank(&args.bank).map_err(|e| {
        CliError::new(
            IO,
            e.kind().to_string(),
            format!("{}: {e}", args.bank.display()),
        )
    })?;
    let teacher = TeacherFeature::new(
        read_tensor_at(&args.teacher)?,
        args.teacher.display().to_string(),
    )
    .within(ENHANCE)?;
    let q = QuerySet::new(queries).within(ENHANCE)?;
    let query_dim = q.queries().shape()[1];
    let (params, source, seed) = match &args.params {
        Some(dir) => (
            EnhancerParams::load(dir).map_err(|e| {
                CliError::new(IO, e.kind().to_string(), format!("{}: {e}", dir.display()))
            })?,
            "loaded",
            None,
        ),
        None => (
            EnhancerParams::init(teacher.channels(), query_dim, config.heads, config.seed)
                .within(ENHANCE)?,
            "seeded",
            Some(config.seed),
        ),
    };
    let enhanced = scpqe(&q, &bank, &teacher, &params).within(ENHANCE)?;
    write_tensor(&args.out, &enhanced.queries().detach()).map_err(|e| {
        CliError::new(
            IO,
            e.kind().to_string(),
            format!("{}: {e}", args.out.display()),
        )
    })?;
    if let Some(dir) = &args.save_params {
        params.save(dir).map_err(|e| {
            CliError::new(IO, e.kind().to_string(), format!("{}: {e}", dir.display()))
        })?;
    }
    let grid = teacher.grid();
    let shape = q.queries().shape();
    let report = EnhanceReport {
        command: "enhance-queries",
        queries: [shape[0], shape[1]],
        prototypes: bank.len(),
        teacher_channels: teacher.channels(),
        teacher_grid: [grid.0, grid.1],
        heads: params.heads(),
        params: source,
        seed,
        output: args.out.display().to_string(),
    };
    let text = format!(
        "enhanced {}x{} queries with K={} prototypes and {} teacher tokens ({} heads, {} params) -> {}\n",
        shape[0],
        shape[1],
        bank.len(),
        grid.0 * grid.1,
        report.heads,
        source,
        report.output
    );
    Outcome::new(text, &report)
}

// -------------------------------------------------------------------- eval-map

#[derive(Debug, Clone, Default)]
pub struct EvalArgs {
    pub detections: PathBuf,
    pub annotations: PathBuf,
}

#[derive(Debug, Serialize)]
struct ClassAp {
    category_id: u64,
    name: String,
    ground_truth: usize,
    detections: usize,
    ap50: f64,
}

#[derive(Debug, Serialize)]
struct MapSummary {
    command: &'static str,
    images: usize,
    ground_truth: usize,
    detections: usize,
    per_class: Vec<ClassAp>,
    map50: f64,
}

fn load_eval_inputs(args: &EvalArgs) -> Result<(AnnotationSet, Vec<Detection>), CliError> {
    let set = load_annotations(&args.annotations)?;
    let dets = parse_detections(&args.detections).map_err(|e| {
        CliError::new(
            IO,
            e.kind().to_string(),
            format!("{}: {e}", args.detections.display()),
        )
    })?;
    if let Some((i, d)) = dets
        .iter()
        .enumerate()
        .find(|(_, d)| set.image(d.image_id).is_none())
    {
        return Err(CliError::new(
            IO,
            "validation",
            format!("detections[{i}] references unknown image_id {}", d.image_id),
        ));
    }
    Ok((set, dets))
}

pub fn eval_map(args: &EvalArgs) -> Result<Outcome, CliError> {
    let (set, dets) = load_eval_inputs(args)?;
    let report = map50(&dets, &set.annotations);
    let per_class: Vec<ClassAp> = report
        .per_class_ap
        .iter()
        .map(|(&id, &ap)| ClassAp {
            category_id: id,
            name: set.category_name(id).unwrap_or_default().to_string(),
            ground_truth: set
                .annotations
                .iter()
                .filter(|a| a.category_id == id)
                .count(),
            detections: dets.iter().filter(|d| d.category_id == id).count(),
            ap50: ap,
        })
        .collect();
    let summary = MapSummary {
        command: "eval-map",
        images: set.images.len(),
        ground_truth: set.annotations.len(),
        detections: dets.len(),
        per_class,
        map50: report.map50,
    };
    let width = summary
        .per_class
        .iter()
        .map(|c| c.name.len())
        .max()
        .unwrap_or(0)
        .max(8);
    let mut text = format!(
        "{:<width$}  {:>5}  {:>5}  {:>7}\n",
        "class", "gt", "dets", "AP50"
    );
    for c in &summary.per_class {
        let _ = writeln!(
            text,
            "{:<width$}  {:>5}  {:>5}  {:>7.4}",
            c.name, c.ground_truth, c.detections, c.ap50
        );
    }
    let _ = writeln!(
        text,
        "{:<width$}  {:>5}  {:>5}  {:>7.4}",
        "mAP50", summary.ground_truth, summary.detections, summary.map50
    );
    Outcome::new(text, &summary)
}

// -------------------------------------------------------------- analyze-errors

#[derive(Debug, Clone, Default)]
pub struct AnalyzeArgs {
    pub detections: PathBuf,
    pub annotations: PathBuf,
    /// Severity order of the domains; defaults to first appearance in the image list.
    pub domains: Vec<String>,
}

#[derive(Debug, Serialize)]
struct ErrorSummary {
    command: &'static str,
    score_threshold: f64,
    iou_threshold: f64,
    reports: Vec<ErrorReport>,
    table: SweepTable,
}

pub fn analyze_errors(args: &AnalyzeArgs, config: &RunConfig) -> Result<Outcome, CliError> {
    config.validate()?;
    let (set, dets) = load_eval_inputs(&EvalArgs {
        detections: args.detections.clone(),
        annotations: args.annotations.clone(),
    })?;
    let mut inputs: Vec<DomainInput> = Vec::new();
    let mut slot: BTreeMap<u64, usize> = BTreeMap::new();
    for img in &set.images {
        let k = match inputs.iter().position(|d| d.domain == img.domain) {
            Some(k) => k,
            None => {
                inputs.push(DomainInput {
                    domain: img.domain.clone(),
                    ..Default::default()
                });
                inputs.len() - 1
            }
        };
        slot.insert(img.id, k);
    }
    for a in &set.annotations {
        inputs[slot[&a.image_id]].ground_truth.push(a.clone());
    }
    for d in &dets {
        inputs[slot[&d.image_id]].detections.push(d.clone());
    }
    let reports = domain_sweep(
        &inputs,
        &args.domains,
        config.score_threshold,
        config.iou_threshold,
    )
    .within(METRICS)?;
    let summary = ErrorSummary {
        command: "analyze-errors",
        score_threshold: config.score_threshold,
        iou_threshold: config.iou_threshold,
        table: SweepTable::from_reports(&reports),
        reports,
    };
    Outcome::new(render_sweep(&summary.reports), &summary)
}

// ------------------------------------------------------------------- gradcheck

#[derive(Debug, Serialize)]
struct CheckSummary {
    name: &'static str,
    max_rel_deviation: f64,
    pass: bool,
}

#[derive(Debug, Serialize)]
struct GradcheckReport {
    command: &'static str,
    seed: u64,
    instances: usize,
    step: f64,
    tolerance: f64,
    checks: Vec<CheckSummary>,
    failures: Vec<vfm4sdg::verify::CheckResult>,
    pass: bool,
}

pub fn gradcheck(instances: usize, config: &RunConfig) -> Result<Outcome, CliError> {
    if instances == 0 {
        return Err(CliError::usage("--instances must be ≥ 1"));
    }
    let start = Instant::now();
    let suite = gradient_suite(config.seed, instances).within(TENSOR)?;
    let elapsed = start.elapsed();
    let checks: Vec<CheckSummary> = suite
        .summary()
        .into_iter()
        .map(|(name, max_rel_deviation, pass)| CheckSummary {
            name,
            max_rel_deviation,
            pass,
        })
        .collect();
    let failures: Vec<_> = suite.failures().cloned().collect();
    let mut text = format!("{:<22} {:>12}  status\n", "check", "max rel dev");
    for c in &checks {
        let _ = writeln!(
            text,
            "{:<22} {:>12.3e}  {}",
            c.name,
            c.max_rel_deviation,
            if c.pass { "PASS" } else { "FAIL" }
        );
    }
    let _ = writeln!(
        text,
        "{} instances x {} checks, seed {}, {:.2}s",
        instances,
        checks.len(),
        config.seed,
        elapsed.as_secs_f64()
    );
    let report = GradcheckReport {
        command: "gradcheck",
        seed: config.seed,
        instances,
        step: FD_STEP,
        tolerance: FD_TOL,
        checks,
        pass: suite.pass,
        failures,
    };
    let mut outcome = Outcome::new(text, &report)?;
    if !report.pass {
        outcome.failure = Some(CliError::new(
            TENSOR,
            "gradcheck",
            format!(
                "{} of {} checks exceed tolerance {FD_TOL}",
                report.failures.len(),
                suite.checks.len()
            ),
        ));
    }
    Ok(outcome)
}
