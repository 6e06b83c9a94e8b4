use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use lieflow::pipeline::{
    check_grad, evaluate, fit_twist_cmd, init_threads, load_checkpoint, plot_eval, plot_metrics,
    render_view, train, train_from, Dataset, EvalReport, GradSuiteConfig, PipelineError, Split,
    TrainConfig,
};
use lieflow::scenegen::{render_dataset, SceneError, SceneSpec};

#[derive(Parser)]
#[command(
    name = "lieflow",
    version,
    about = "Dynamic radiance fields with an SE(3) transformation field"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic dataset. SPEC is a scene JSON file or `desk`.
    GenScene { spec: String, out: PathBuf },
    /// Train from a JSON config.
    Train {
        config: PathBuf,
        /// Continue from this checkpoint instead of starting fresh.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Override the total iteration count.
        #[arg(long)]
        iterations: Option<usize>,
    },
    /// Render one camera at one frame to PNG.
    Render {
        ckpt: PathBuf,
        #[arg(long)]
        view: usize,
        #[arg(long)]
        frame: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score held-out views; prints a JSON report.
    Eval {
        ckpt: PathBuf,
        #[arg(long)]
        split: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Recover frame-to-frame twists from a tracks file.
    FitTwist { tracks: PathBuf },
    /// Finite-difference check of every loss. CONFIG may be `default`.
    CheckGrad { config: String },
    /// Loss curves (and optional eval bars) to PNG.
    Plot {
        metrics: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Eval reports to draw as bars.
        #[arg(long = "eval")]
        evals: Vec<PathBuf>,
    },
}

fn read(path: &Path) -> Result<String, PipelineError> {
    std::fs::read_to_string(path).map_err(|e| PipelineError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    })
}

fn print_json<T: serde::Serialize>(v: &T) {
    println!(
        "{}",
        serde_json::to_string_pretty(v).expect("report serialises")
    );
}

fn run(cmd: Command) -> Result<(), PipelineError> {
    match cmd {
        Command::GenScene { spec, out } => {
            let spec = if spec == "desk" {
                SceneSpec::desk()
            } else {
                serde_json::from_str(&read(Path::new(&spec))?)
                    .map_err(|e| SceneError::Invalid(format!("{spec}: {e}")))?
            };
            let m = render_dataset(&spec, &out)?;
            eprintln!(
                "wrote {} frames × {} cameras to {}",
                m.frame_count,
                spec.cameras.len(),
                out.display()
            );
        }
        Command::Train {
            config,
            resume,
            iterations,
        } => {
            let outcome = match resume {
                Some(ck) => train_from(load_checkpoint(&ck)?, iterations)?,
                None => {
                    let mut c = TrainConfig::load(&config)?;
                    if let Some(n) = iterations {
                        c.iterations = n;
                    }
                    train(c)?
                }
            };
            eprintln!(
                "iteration {}; checkpoint {}; metrics {}",
                outcome.checkpoint.iteration,
                outcome.checkpoint_path.display(),
                outcome.metrics_path.display()
            );
        }
        Command::Render {
            ckpt,
            view,
            frame,
            out,
        } => {
            let ck = load_checkpoint(&ckpt)?;
            let ds = Dataset::open(&ck.config.dataset)?;
            let img = render_view(&ck, &ds, view, frame)?;
            let out = out
                .unwrap_or_else(|| PathBuf::from(format!("render_cam{view:02}_f{frame:03}.png")));
            img.save_png(&out)?;
            eprintln!("wrote {}", out.display());
        }
        Command::Eval { ckpt, split, out } => {
            let split: Split = split.parse()?;
            let ck = load_checkpoint(&ckpt)?;
            let ds = Dataset::open(&ck.config.dataset)?;
            let report = evaluate(&ck, &ds, split)?;
            if let Some(out) = out {
                let text = serde_json::to_string_pretty(&report).expect("report serialises");
                std::fs::write(&out, text).map_err(|e| PipelineError::Io {
                    path: out.display().to_string(),
                    message: e.to_string(),
                })?;
            }
            print_json(&report);
        }
        Command::FitTwist { tracks } => print_json(&fit_twist_cmd(&read(&tracks)?)?),
        Command::CheckGrad { config } => {
            let c = if config == "default" {
                GradSuiteConfig::default()
            } else {
                GradSuiteConfig::from_json(&read(Path::new(&config))?)?
            };
            let report = check_grad(&c)?;
            print_json(&report);
            if !report.passed {
                let bad: Vec<&str> = report
                    .terms
                    .iter()
                    .filter(|t| !t.passed)
                    .map(|t| t.term.as_str())
                    .collect();
                return Err(PipelineError::GradientCheck(bad.join(", ")));
            }
        }
        Command::Plot {
            metrics,
            out,
            evals,
        } => {
            let out = out.unwrap_or_else(|| metrics.with_extension("png"));
            let n = plot_metrics(&metrics, &out)?;
            eprintln!("{n} records plotted to {}", out.display());
            if !evals.is_empty() {
                let reports = evals
                    .iter()
                    .map(|p| {
                        serde_json::from_str::<EvalReport>(&read(p)?)
                            .map_err(|e| PipelineError::Config(format!("{}: {e}", p.display())))
                    })
                    .collect::<Result<Vec<_>, _>>()?;
                let bars = out.with_file_name(format!(
                    "{}_eval.png",
                    out.file_stem().and_then(|s| s.to_str()).unwrap_or("plot")
                ));
                plot_eval(&reports, &bars)?;
                eprintln!("eval bars plotted to {}", bars.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    init_threads();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
