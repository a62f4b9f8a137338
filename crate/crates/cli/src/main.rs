use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use editforge::analysis::{calibrate, sweep_csv, sweep_thresholds, DEFAULT_TARGET_RATE};
use editforge::diffmask::perceptual::{serve, ProxyBackend};
use editforge::evalparse::evaluate_files;
use editforge::pipeline::{audit_run, run_all, run_stage, RunConfig, StageSummary};
use editforge::records::{read_records, Layout, MaskArtifact, Stage};
use editforge::report::{report_dir, run_report};
use editforge::synth::write_dataset;
use editforge::Error;

#[derive(Parser)]
#[command(
    name = "editforge",
    version,
    about = "Forensic supervision records from image-edit triplets"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct RunArgs {
    /// TOML run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output root; defaults to $EDITFORGE_OUTPUT_ROOT, then the config.
    #[arg(long)]
    output_root: Option<PathBuf>,
    /// Dotted-key override, e.g. `mask.tau=0.58`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    workers: Option<usize>,
    /// Dataset name used for the stage files.
    #[arg(long)]
    dataset: Option<String>,
    /// Mask signal stack, e.g. `lab,ssim`.
    #[arg(long, value_delimiter = ',')]
    stack: Vec<String>,
    #[arg(long)]
    tau: Option<f64>,
    /// Difficulty scorer, `v1` or `v2`.
    #[arg(long)]
    scorer: Option<String>,
    /// Difficulty weights TOML file.
    #[arg(long)]
    weights: Option<PathBuf>,
    /// Recompute even when the stage output matches the config hash.
    #[arg(long)]
    force: bool,
}

impl RunArgs {
    fn load(&self) -> Result<(RunConfig, PathBuf), Error> {
        let mut overrides = self.overrides.clone();
        if let Some(w) = self.workers {
            overrides.push(format!("workers={w}"));
        }
        if let Some(d) = &self.dataset {
            overrides.push(format!("dataset={}", toml_str(d)));
        }
        if !self.stack.is_empty() {
            let items: Vec<String> = self.stack.iter().map(|s| toml_str(s)).collect();
            overrides.push(format!("mask.signal_stack=[{}]", items.join(",")));
        }
        if let Some(t) = self.tau {
            overrides.push(format!("mask.tau={t}"));
        }
        if let Some(s) = &self.scorer {
            overrides.push(format!("difficulty.scorer={}", toml_str(s)));
        }
        if let Some(p) = &self.weights {
            overrides.push(format!(
                "difficulty.weights_file={}",
                toml_str(&p.to_string_lossy())
            ));
        }
        let cfg = RunConfig::load(self.config.as_deref(), &overrides)?;
        let root = cfg.resolve_output_root(self.output_root.as_deref())?;
        Ok((cfg, root))
    }
}

#[derive(Subcommand)]
enum Command {
    /// Stage A: read a source dataset into triplet records.
    Ingest {
        #[command(flatten)]
        run: RunArgs,
        /// Skip MagicBrush turns after the first.
        #[arg(long)]
        single_turn_only: bool,
    },
    /// Stage B: difference maps, masks and scope routing.
    Mask(RunArgs),
    /// Stage C: difficulty scores and tertile bins.
    Difficulty(RunArgs),
    /// Stage D: canonical edit categories.
    Category(RunArgs),
    /// Stage E: reasoning chains.
    Chain(RunArgs),
    /// All five stages in order.
    Run(RunArgs),
    /// Path-1 global rate at candidate thresholds, from recorded mask means.
    Sweep {
        #[command(flatten)]
        run: RunArgs,
        /// Masks stage file; defaults to the configured run's.
        #[arg(long)]
        masks: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', required = true)]
        candidates: Vec<f64>,
        /// Writes the CSV here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Prints the candidate closest to this rate on stderr.
        #[arg(long, default_value_t = DEFAULT_TARGET_RATE)]
        target: f64,
    },
    /// Characterization report over the stage files present.
    Report(RunArgs),
    /// Field-extraction metrics for model generations.
    Eval {
        #[arg(long)]
        preds: PathBuf,
        /// Chains stage file holding the references.
        #[arg(long)]
        refs: PathBuf,
        /// Directory for metrics.json and metrics.csv.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Writes a synthetic dataset with known masks.
    Synth {
        #[arg(long)]
        n: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 128)]
        size: u32,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Checks every chain statement against its upstream records.
    Audit(RunArgs),
    /// Serves the proxy perceptual backend over stdin/stdout.
    #[command(hide = true)]
    PerceptualServer,
}

fn toml_str(s: &str) -> String {
    toml::Value::String(s.to_string()).to_string()
}

fn print_summary(s: &StageSummary) {
    let status = if s.cache_hit { "cached" } else { "done" };
    eprintln!(
        "{:<10} {status:<6} {} records, {} dropped, {:.2}s -> {}",
        s.stage.as_str(),
        s.records,
        s.dropped.len(),
        s.elapsed.as_secs_f64(),
        s.output.display()
    );
    for d in &s.dropped {
        eprintln!("  dropped {}: {}", d.triplet_id, d.reason);
    }
}

fn stage(stage: Stage, args: &RunArgs) -> Result<(), Error> {
    let (cfg, root) = args.load()?;
    print_summary(&run_stage(stage, &cfg, &root, args.force)?);
    Ok(())
}

fn write_file(path: &Path, body: &str) -> Result<(), Error> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::Invalid(format!("{}: {e}", dir.display())))?;
    }
    fs::write(path, body).map_err(|e| Error::Invalid(format!("{}: {e}", path.display())))
}

fn execute(command: Command) -> Result<(), Error> {
    match command {
        Command::Ingest {
            mut run,
            single_turn_only,
        } => {
            if single_turn_only {
                run.overrides.push("source.single_turn_only=true".into());
            }
            stage(Stage::Triplets, &run)
        }
        Command::Mask(run) => stage(Stage::Masks, &run),
        Command::Difficulty(run) => stage(Stage::Difficulty, &run),
        Command::Category(run) => stage(Stage::Categories, &run),
        Command::Chain(run) => stage(Stage::Chains, &run),
        Command::Run(run) => {
            let (cfg, root) = run.load()?;
            for s in run_all(&cfg, &root, run.force)? {
                print_summary(&s);
            }
            Ok(())
        }
        Command::Sweep {
            run,
            masks,
            candidates,
            out,
            target,
        } => {
            let path = match masks {
                Some(p) => p,
                None => {
                    let (cfg, root) = run.load()?;
                    Layout::new(root).stage_file(Stage::Masks, &cfg.dataset_name())
                }
            };
            let records: Vec<MaskArtifact> = read_records(&path)?;
            let cdm: Vec<f64> = records.iter().map(|m| m.combined_diff_mean).collect();
            let rows = sweep_thresholds(&cdm, &candidates)?;
            let csv = sweep_csv(&rows);
            match out {
                Some(p) => write_file(&p, &csv)?,
                None => print!("{csv}"),
            }
            if let Some(best) = calibrate(&rows, target) {
                eprintln!(
                    "closest to {:.1}%: threshold {} ({:.1}%, lower bound on total global rate)",
                    100.0 * target,
                    best.threshold,
                    100.0 * best.path1_global_rate
                );
            }
            Ok(())
        }
        Command::Report(run) => {
            let (cfg, root) = run.load()?;
            let dataset = cfg.dataset_name();
            let report = run_report(&root, &dataset)?;
            let dir = report_dir(&root, &dataset);
            report.write(&dir)?;
            print!("{}", report.text());
            eprintln!("report written to {}", dir.display());
            Ok(())
        }
        Command::Eval { preds, refs, out } => {
            let (metrics, warnings) = evaluate_files(&preds, &refs)?;
            for w in &warnings {
                log::warn!("{w}");
            }
            let json = serde_json::to_string_pretty(&metrics)
                .map_err(|e| Error::Invalid(e.to_string()))?;
            println!("{json}");
            if let Some(dir) = out {
                write_file(&dir.join("metrics.json"), &(json + "\n"))?;
                write_file(&dir.join("metrics.csv"), &metrics.to_csv())?;
            }
            Ok(())
        }
        Command::Synth { n, out, size, seed } => {
            let rows = write_dataset(&out, n, size, seed)?;
            eprintln!(
                "wrote {} synthetic triplets to {}",
                rows.len(),
                out.display()
            );
            Ok(())
        }
        Command::Audit(run) => {
            let (cfg, root) = run.load()?;
            let (audited, findings) = audit_run(&cfg, &root)?;
            for f in &findings {
                println!(
                    "{} step {} {}: expected {:?}, found {:?}",
                    f.triplet_id,
                    f.violation.step,
                    f.violation.field,
                    f.violation.expected,
                    f.violation.found
                );
            }
            eprintln!("audited {audited} chains, {} violations", findings.len());
            if findings.is_empty() {
                Ok(())
            } else {
                Err(Error::Invalid(format!(
                    "{} chain violations",
                    findings.len()
                )))
            }
        }
        Command::PerceptualServer => {
            let stdin = io::stdin();
            let stdout = io::stdout();
            let mut input = io::BufReader::new(stdin.lock());
            let mut output = io::BufWriter::new(stdout.lock());
            serve(&mut ProxyBackend, &mut input, &mut output)?;
            output.flush().map_err(|e| Error::Backend(e.to_string()))
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_config() { 1 } else { 2 })
        }
    }
}
