//! Command-line interface: training runs, accuracy-vs-bits sweeps, the
//! mixed-vs-identical comparison, dynamic-channel simulation, and one-off
//! evaluation. Every experiment writes its resolved configuration next to
//! its results; re-running with that file reproduces them bit for bit.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use artoveq::codebook::{load_codebook, save_codebook, CodebookFile, LbgConfig, NestedCodebook};
use artoveq::config::RunConfig;
use artoveq::experiments::{
    build_scheme_profiles, run_dynamic_table, run_mixed_vs_identical, run_rate_sweep,
    train_fixed_rate_set, train_lbg_baseline, ArtoveqArtifacts, ProgressiveArtifacts,
};
use artoveq::model::SplitClassifier;
use artoveq::report;
use artoveq::train::{
    evaluate, train_artoveq, train_mixed, train_progressive, Schedule, TrainLogger,
};
use artoveq::vq::CodebookView;

#[derive(Parser)]
#[command(name = "artoveq", version, about = "Rate-adaptive task-oriented vector quantization")]
struct Cli {
    /// Run configuration file (TOML); defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (defaults to the configured out_dir).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit a codebook to a point file with binary-splitting LBG.
    Lbg {
        /// Text file, one point per line (overrides the points_file key).
        points: Option<PathBuf>,
    },
    /// Variable-rate training: warm start, LBG init, joint adaptation.
    Train,
    /// Mixed-resolution training: per-segment resolution schedule.
    TrainMixed,
    /// Progressive training: per-level difference pairs.
    TrainProgressive,
    /// Accuracy-vs-bits sweep of a trained model plus baselines.
    Sweep,
    /// Mixed-vs-identical allocation comparison over every budget.
    MixedSweep,
    /// Dynamic-channel simulation table.
    ChannelSim,
    /// Evaluate a trained model at one allocation.
    Eval,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(msg) => {
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}

fn load_config(cli: &Cli) -> Result<RunConfig, String> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path).map_err(|e| e.to_string())?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn prepare_out(cfg: &RunConfig, cli: &Cli) -> Result<PathBuf, String> {
    let out = cfg.out_path(cli.out.as_deref());
    std::fs::create_dir_all(&out).map_err(|e| format!("{}: {e}", out.display()))?;
    cfg.save(&out.join("config.toml")).map_err(|e| e.to_string())?;
    Ok(out)
}

fn load_model_dir(dir: &str) -> Result<(SplitClassifier<f32>, CodebookFile), String> {
    let dir = Path::new(dir);
    let model_path = dir.join("model.txt");
    let cb_path = dir.join("codebook.txt");
    if !model_path.is_file() || !cb_path.is_file() {
        return Err(format!(
            "model not found: expected {} and {}",
            model_path.display(),
            cb_path.display()
        ));
    }
    let model = SplitClassifier::load(&model_path).map_err(|e| e.to_string())?;
    let cb = load_codebook(&cb_path).map_err(|e| e.to_string())?;
    Ok((model, cb))
}

fn require_nested(cb: CodebookFile) -> Result<NestedCodebook<f32>, String> {
    match cb {
        CodebookFile::Nested(cb) => Ok(cb),
        CodebookFile::Progressive(_) => {
            Err("codebook is progressive; this command needs a nested codebook".into())
        }
    }
}

fn nested_artifacts(cfg: &RunConfig) -> Result<ArtoveqArtifacts, String> {
    let dir = cfg
        .model_dir
        .as_deref()
        .ok_or("model not found: set model_dir in the configuration")?;
    let (model, cb) = load_model_dir(dir)?;
    Ok(ArtoveqArtifacts {
        model,
        codebook: require_nested(cb)?,
    })
}

fn read_points(path: &Path) -> Result<(Vec<f32>, usize), String> {
    let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    let mut dim = 0usize;
    let mut flat = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let vals: Vec<f32> = line
            .split(|c: char| c == ',' || c.is_whitespace())
            .filter(|t| !t.is_empty())
            .map(|t| t.parse::<f32>().map_err(|e| format!("line {}: {e}", lineno + 1)))
            .collect::<Result<_, _>>()?;
        if dim == 0 {
            dim = vals.len();
        } else if vals.len() != dim {
            return Err(format!(
                "line {}: {} values, expected {dim}",
                lineno + 1,
                vals.len()
            ));
        }
        flat.extend_from_slice(&vals);
    }
    if dim == 0 {
        return Err(format!("{}: no points", path.display()));
    }
    Ok((flat, dim))
}

fn run(cli: Cli) -> Result<(), String> {
    let cfg = load_config(&cli)?;
    match &cli.command {
        Command::Lbg { points } => {
            let out = prepare_out(&cfg, &cli)?;
            let path = points
                .clone()
                .or_else(|| cfg.points_file.as_ref().map(PathBuf::from))
                .ok_or("no point file: pass one as an argument or set points_file")?;
            let (flat, dim) = read_points(&path)?;
            if !cfg.lbg_size.is_power_of_two() || cfg.lbg_size < 2 {
                return Err(format!("lbg_size {} is not a power of two >= 2", cfg.lbg_size));
            }
            let lbg_cfg = LbgConfig {
                target_size: cfg.lbg_size,
                split_perturbation: cfg.lbg_split_perturbation,
                max_iterations: cfg.lbg_max_iterations,
                convergence_threshold: cfg.lbg_convergence_threshold,
            };
            let outcome =
                artoveq::codebook::lbg_fit(&flat, dim, &lbg_cfg).map_err(|e| e.to_string())?;
            let max_level = cfg.lbg_size.trailing_zeros() as u8;
            let cb = NestedCodebook::new(dim, max_level, outcome.codewords)
                .map_err(|e| e.to_string())?;
            save_codebook(&out.join("codebook.txt"), &CodebookFile::Nested(cb))
                .map_err(|e| e.to_string())?;
            println!(
                "lbg: {} codewords of dim {dim}, final distortion {:.6e} -> {}",
                cfg.lbg_size,
                outcome.distortion_trace.last().unwrap_or(&f64::NAN),
                out.join("codebook.txt").display()
            );
            Ok(())
        }
        Command::Train | Command::TrainMixed | Command::TrainProgressive => {
            let out = prepare_out(&cfg, &cli)?;
            let data = cfg.load_data().map_err(|e| e.to_string())?;
            let mut model = cfg
                .new_model(data.train.input_dim, data.train.classes, cfg.seed)
                .map_err(|e| e.to_string())?;
            let mut logger =
                TrainLogger::to_file(&out.join("train_log.txt")).map_err(|e| e.to_string())?;
            let codebook_file = match cli.command {
                Command::Train => {
                    let plan = cfg.train_plan(Schedule::VariableRate).map_err(|e| e.to_string())?;
                    let outcome = train_artoveq(&mut model, &data.train, &plan, &mut logger)
                        .map_err(|e| e.to_string())?;
                    CodebookFile::Nested(outcome.codebook)
                }
                Command::TrainMixed => {
                    let plan = cfg
                        .train_plan(Schedule::MixedResolution)
                        .map_err(|e| e.to_string())?;
                    let outcome = train_mixed(&mut model, &data.train, &plan, &mut logger)
                        .map_err(|e| e.to_string())?;
                    CodebookFile::Nested(outcome.codebook)
                }
                Command::TrainProgressive => {
                    let plan = cfg.train_plan(Schedule::Progressive).map_err(|e| e.to_string())?;
                    let outcome = train_progressive(&mut model, &data.train, &plan, &mut logger)
                        .map_err(|e| e.to_string())?;
                    CodebookFile::Progressive(outcome.codebook)
                }
                _ => unreachable!(),
            };
            model.save(&out.join("model.txt")).map_err(|e| e.to_string())?;
            save_codebook(&out.join("codebook.txt"), &codebook_file).map_err(|e| e.to_string())?;
            println!(
                "trained: model.txt, codebook.txt, train_log.txt, config.toml in {}",
                out.display()
            );
            Ok(())
        }
        Command::Sweep => {
            let out = prepare_out(&cfg, &cli)?;
            let artoveq = nested_artifacts(&cfg)?;
            let data = cfg.load_data().map_err(|e| e.to_string())?;
            let plan = cfg.train_plan(Schedule::VariableRate).map_err(|e| e.to_string())?;
            let mut logger = TrainLogger::memory();
            eprintln!("training {} fixed-rate baselines...", cfg.max_level);
            let fixed = train_fixed_rate_set(&data.train, &plan, &artoveq.model, &mut logger)
                .map_err(|e| e.to_string())?;
            eprintln!("fitting LBG baselines...");
            let lbg: Vec<_> = (1..=cfg.max_level)
                .map(|r| train_lbg_baseline(&artoveq.model, &data.train, r, &plan))
                .collect::<Result<_, _>>()
                .map_err(|e| e.to_string())?;
            let sweep = run_rate_sweep(&artoveq, &fixed, &lbg, &data.test, cfg.seed)
                .map_err(|e| e.to_string())?;
            report::write(&out.join("sweep.csv"), &report::sweep_csv(&cfg, &sweep))?;
            println!("sweep: {} rows -> {}", sweep.rows.len(), out.join("sweep.csv").display());
            Ok(())
        }
        Command::MixedSweep => {
            let out = prepare_out(&cfg, &cli)?;
            let artifacts = nested_artifacts(&cfg)?;
            let data = cfg.load_data().map_err(|e| e.to_string())?;
            let sweep = run_mixed_vs_identical(&artifacts, &data.test, cfg.seed)
                .map_err(|e| e.to_string())?;
            report::write(&out.join("mixed_sweep.csv"), &report::sweep_csv(&cfg, &sweep))?;
            println!(
                "mixed-sweep: {} rows -> {}",
                sweep.rows.len(),
                out.join("mixed_sweep.csv").display()
            );
            Ok(())
        }
        Command::ChannelSim => {
            let out = prepare_out(&cfg, &cli)?;
            let data = cfg.load_data().map_err(|e| e.to_string())?;
            let artoveq = match &cfg.model_dir {
                Some(dir) => {
                    let (model, cb) = load_model_dir(dir)?;
                    ArtoveqArtifacts {
                        model,
                        codebook: require_nested(cb)?,
                    }
                }
                None => {
                    eprintln!("no model_dir: training variable-rate model in process...");
                    let plan = cfg.train_plan(Schedule::VariableRate).map_err(|e| e.to_string())?;
                    let mut model = cfg
                        .new_model(data.train.input_dim, data.train.classes, cfg.seed)
                        .map_err(|e| e.to_string())?;
                    let outcome =
                        train_artoveq(&mut model, &data.train, &plan, &mut TrainLogger::memory())
                            .map_err(|e| e.to_string())?;
                    ArtoveqArtifacts {
                        model,
                        codebook: outcome.codebook,
                    }
                }
            };
            let progressive = match &cfg.progressive_dir {
                Some(dir) => {
                    let (model, cb) = load_model_dir(dir)?;
                    match cb {
                        CodebookFile::Progressive(codebook) => {
                            ProgressiveArtifacts { model, codebook }
                        }
                        CodebookFile::Nested(_) => {
                            return Err("progressive_dir holds a nested codebook".into())
                        }
                    }
                }
                None => {
                    eprintln!("no progressive_dir: training progressive model in process...");
                    let plan = cfg.train_plan(Schedule::Progressive).map_err(|e| e.to_string())?;
                    let mut model = cfg
                        .new_model(data.train.input_dim, data.train.classes, cfg.seed)
                        .map_err(|e| e.to_string())?;
                    let outcome =
                        train_progressive(&mut model, &data.train, &plan, &mut TrainLogger::memory())
                            .map_err(|e| e.to_string())?;
                    ProgressiveArtifacts {
                        model,
                        codebook: outcome.codebook,
                    }
                }
            };
            let plan = cfg.train_plan(Schedule::VariableRate).map_err(|e| e.to_string())?;
            eprintln!("training {} fixed-rate baselines...", cfg.max_level);
            let fixed =
                train_fixed_rate_set(&data.train, &plan, &artoveq.model, &mut TrainLogger::memory())
                    .map_err(|e| e.to_string())?;
            let profiles = build_scheme_profiles(&artoveq, &progressive, &fixed, &data.test)
                .map_err(|e| e.to_string())?;
            let (table, traces) = run_dynamic_table(
                &profiles,
                &cfg.scenarios(),
                cfg.steps,
                cfg.tau_max,
                cfg.capacity_scale,
                cfg.latency_rule,
                cfg.seed,
                cfg.export_trace,
            )
            .map_err(|e| e.to_string())?;
            report::write(&out.join("dynamic_table.csv"), &report::dynamic_csv(&cfg, &table))?;
            let text = report::dynamic_text(&table);
            report::write(&out.join("dynamic_table.txt"), &text)?;
            if cfg.export_trace {
                report::write(&out.join("trace.csv"), &report::trace_csv(&cfg, &traces))?;
            }
            print!("{text}");
            println!("channel-sim -> {}", out.join("dynamic_table.csv").display());
            Ok(())
        }
        Command::Eval => {
            let out = prepare_out(&cfg, &cli)?;
            let (model, cb) = match &cfg.model_dir {
                Some(dir) => load_model_dir(dir)?,
                None => return Err("model not found: set model_dir in the configuration".into()),
            };
            let data = cfg.load_data().map_err(|e| e.to_string())?;
            let allocation: Vec<u8> = match (&cfg.eval_allocation, cfg.eval_level) {
                (Some(alloc), _) => alloc.clone(),
                (None, Some(level)) => vec![level; cfg.segments],
                (None, None) => vec![cfg.max_level; cfg.segments],
            };
            let report_out = match &cb {
                CodebookFile::Nested(cb) => {
                    evaluate(&model, &CodebookView::Nested(cb), &allocation, &data.test)
                }
                CodebookFile::Progressive(cb) => {
                    evaluate(&model, &CodebookView::Progressive(cb), &allocation, &data.test)
                }
            }
            .map_err(|e| e.to_string())?;
            report::write(
                &out.join("eval.csv"),
                &report::eval_csv(&cfg, &allocation, &report_out),
            )?;
            println!(
                "eval: allocation {:?} accuracy {:.4} loss {:.4} ({}/{})",
                allocation, report_out.accuracy, report_out.mean_loss, report_out.correct,
                report_out.total
            );
            Ok(())
        }
    }
}
