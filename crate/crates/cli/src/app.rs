use std::io::Write;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::commands::{self, AnalyzeArgs, BuildArgs, DistillArgs, EnhanceArgs, EvalArgs, Outcome};
use crate::config::{parse_grid, RunConfig};
use crate::error::CliError;

pub const THREADS_ENV: &str = "VFM4SDG_THREADS";

#[derive(Debug, Parser)]
#[command(
    name = "vfm4sdg",
    version,
    about = "Relational prior distillation, prototype query enhancement and detection metrics"
)]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct GlobalArgs {
    /// Weight of the distillation term in the total loss.
    #[arg(long, global = true, default_value_t = 1.0)]
    pub lambda: f64,
    /// Pyramid levels to distill, comma separated.
    #[arg(
        long,
        global = true,
        value_delimiter = ',',
        default_value = "0,1,2,3,4"
    )]
    pub levels: Vec<usize>,
    /// Smooth-L1 transition point.
    #[arg(long, global = true, default_value_t = 1.0)]
    pub beta: f64,
    /// Attention heads of the enhancement blocks.
    #[arg(long, global = true, default_value_t = 8)]
    pub heads: usize,
    #[arg(long, global = true, default_value_t = 0.5)]
    pub score_threshold: f64,
    #[arg(long, global = true, default_value_t = 0.5)]
    pub iou_threshold: f64,
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Print the JSON report instead of the table.
    #[arg(long, global = true)]
    pub json: bool,
}

impl GlobalArgs {
    pub fn config(&self) -> RunConfig {
        RunConfig {
            lambda: self.lambda,
            levels: self.levels.iter().copied().collect(),
            beta: self.beta,
            heads: self.heads,
            score_threshold: self.score_threshold,
            iou_threshold: self.iou_threshold,
            seed: self.seed,
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Relational distillation loss between student levels and a teacher map.
    DistillLoss {
        /// Student feature file, one per level in level order.
        #[arg(long = "student")]
        students: Vec<PathBuf>,
        /// Flattened student tokens, split with --level-shapes.
        #[arg(long, conflicts_with = "students")]
        tokens: Option<PathBuf>,
        /// Level grids of the flattened tokens, e.g. 8x8,4x4.
        #[arg(long, value_delimiter = ',', value_parser = parse_grid)]
        level_shapes: Vec<(usize, usize)>,
        #[arg(long)]
        teacher: PathBuf,
        /// Detection loss added to the weighted distillation term.
        #[arg(long, default_value_t = 0.0)]
        det_loss: f64,
        /// Also report the combined loss for these λ values (default 0.1,0.3,0.5,0.8,1.0,1.2,1.5).
        #[arg(long, value_delimiter = ',', num_args = 0..)]
        lambda_sweep: Option<Vec<f64>>,
        /// JSON report path.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Per-category prototype bank from pooled teacher features.
    BuildPrototypes {
        /// Directory of <image_id>.vfmt files or an exporter manifest.json.
        features_dir: PathBuf,
        annotations: PathBuf,
        /// Bank file to write.
        #[arg(long)]
        out: PathBuf,
        /// Only pool boxes from images of this domain.
        #[arg(long)]
        domain: Option<String>,
        /// JSON summary path.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Semantic then spatial enhancement of decoder queries.
    EnhanceQueries {
        #[arg(long)]
        queries: PathBuf,
        #[arg(long)]
        bank: PathBuf,
        #[arg(long)]
        teacher: PathBuf,
        /// Enhanced query file to write.
        #[arg(long)]
        out: PathBuf,
        /// Parameter directory; seeded initialisation when absent.
        #[arg(long)]
        params: Option<PathBuf>,
        #[arg(long)]
        save_params: Option<PathBuf>,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Per-class AP and mAP at IoU 0.5.
    EvalMap {
        #[arg(long)]
        detections: PathBuf,
        #[arg(long)]
        annotations: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// False-negative, false-positive and confusion rates per domain.
    AnalyzeErrors {
        #[arg(long)]
        detections: PathBuf,
        #[arg(long)]
        annotations: PathBuf,
        /// Domain order, mildest first.
        #[arg(long, value_delimiter = ',')]
        domains: Vec<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference check of every differentiable operation.
    Gradcheck {
        #[arg(long, default_value_t = 20)]
        instances: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Runs one parsed invocation; returns the outcome and where to write its JSON.
pub fn run(cli: &Cli) -> Result<(Outcome, Option<PathBuf>), CliError> {
    let config = cli.global.config();
    match &cli.command {
        Command::DistillLoss {
            students,
            tokens,
            level_shapes,
            teacher,
            det_loss,
            lambda_sweep,
            out,
        } => {
            let args = DistillArgs {
                students: students.clone(),
                tokens: tokens.clone(),
                level_shapes: level_shapes.clone(),
                teacher: teacher.clone(),
                det_loss: *det_loss,
                lambda_sweep: lambda_sweep.clone(),
            };
            Ok((commands::distill_loss(&args, &config)?, out.clone()))
        }
        Command::BuildPrototypes {
            features_dir,
            annotations,
            out,
            domain,
            report,
        } => {
            let args = BuildArgs {
                features_dir: features_dir.clone(),
                annotations: annotations.clone(),
                out: out.clone(),
                domain: domain.clone(),
            };
            Ok((commands::build_prototypes(&args)?, report.clone()))
        }
        Command::EnhanceQueries {
            queries,
            bank,
            teacher,
            out,
            params,
            save_params,
            report,
        } => {
            let args = EnhanceArgs {
                queries: queries.clone(),
                bank: bank.clone(),
                teacher: teacher.clone(),
                out: out.clone(),
                params: params.clone(),
                save_params: save_params.clone(),
            };
            Ok((commands::enhance_queries(&args, &config)?, report.clone()))
        }
        Command::EvalMap {
            detections,
            annotations,
            out,
        } => {
            let args = EvalArgs {
                detections: detections.clone(),
                annotations: annotations.clone(),
            };
            Ok((commands::eval_map(&args)?, out.clone()))
        }
        Command::AnalyzeErrors {
            detections,
            annotations,
            domains,
            out,
        } => {
            let args = AnalyzeArgs {
                detections: detections.clone(),
                annotations: annotations.clone(),
                domains: domains.clone(),
            };
            Ok((commands::analyze_errors(&args, &config)?, out.clone()))
        }
        Command::Gradcheck { instances, out } => {
            Ok((commands::gradcheck(*instances, &config)?, out.clone()))
        }
    }
}

/// Caps the rayon pool from the environment.
pub fn init_threads() -> Result<(), CliError> {
    let Ok(raw) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = raw.trim().parse().ok().filter(|&n| n > 0).ok_or_else(|| {
        CliError::new(
            "cli",
            "config",
            format!("{THREADS_ENV} must be a positive integer, got {raw:?}"),
        )
    })?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::new("cli", "config", e.to_string()))
}

/// Parses, runs and reports; returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return 0;
        }
        Err(e) => {
            let rendered = e.to_string();
            let first = rendered.lines().next().unwrap_or("invalid arguments");
            let msg = first.strip_prefix("error: ").unwrap_or(first);
            eprintln!("{}", CliError::usage(msg));
            return 2;
        }
    };
    let result = init_threads()
        .and_then(|()| run(&cli))
        .and_then(|(outcome, path)| {
            if let Some(path) = path {
                std::fs::write(&path, &outcome.json).map_err(|e| {
                    CliError::new(crate::error::IO, "io", format!("{}: {e}", path.display()))
                })?;
            }
            Ok(outcome)
        });
    match result {
        Ok(outcome) => {
            let body = if cli.global.json {
                &outcome.json
            } else {
                &outcome.text
            };
            let mut stdout = std::io::stdout().lock();
            let _ = stdout.write_all(body.as_bytes());
            let _ = stdout.flush();
            match outcome.failure {
                Some(e) => {
                    eprintln!("{e}");
                    1
                }
                None => 0,
            }
        }
        Err(e) => {
            eprintln!("{e}");
            1
        }
    }
}
