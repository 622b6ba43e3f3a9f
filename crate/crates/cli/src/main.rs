use std::path::{Path, PathBuf};
use std::process::ExitCode;

use cgo_dbar::pipeline::{self, PipelineConfig, RunOptions, Stage, DTN_FILE};
use cgo_dbar::Error;
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "cgo-dbar", version, about = "D-bar conductivity reconstruction pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize the DtN map of the configured phantom.
    Forward(Common),
    /// Extend a DtN map to a larger circle.
    Extend(Common),
    /// Run the reconstruction stages on a DtN map.
    Reconstruct(Common),
    /// Run the invariant suites and the gamma-rule arbitration.
    Verify(Common),
}

#[derive(Args)]
struct Common {
    /// JSON configuration; every field has a default.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory (overrides `output_dir` in the config).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads for the parallel stages.
    #[arg(long)]
    workers: Option<usize>,
    /// Comma-separated stages: traces, scattering, dbar, recover, all, or e.g. traces-only.
    #[arg(long)]
    stages: Option<String>,
    /// DtN map file; defaults to dtn.json in the output directory, synthesized if missing.
    #[arg(long)]
    dtn: Option<PathBuf>,
    /// Recompute every stage even when stored outputs match.
    #[arg(long)]
    fresh: bool,
}

impl Common {
    fn load(&self) -> Result<(PipelineConfig, PathBuf), Error> {
        let mut config = match &self.config {
            Some(path) => PipelineConfig::from_file(path)?,
            None => PipelineConfig::default(),
        };
        if self.workers.is_some() {
            config.workers = self.workers;
        }
        if self.stages.is_some() {
            config.stages = self.stages.clone();
        }
        config.validate()?;
        let out = self
            .out
            .clone()
            .or_else(|| config.output_dir.clone())
            .unwrap_or_else(|| PathBuf::from("out"));
        Ok((config, out))
    }

    fn options(&self) -> RunOptions {
        RunOptions {
            stages: None,
            fresh: self.fresh,
        }
    }

    fn dtn(&self, config: &PipelineConfig, out: &Path) -> Result<cgo_dbar::dtn::DtNMap, Error> {
        match &self.dtn {
            Some(path) => pipeline::load_dtn(config, path),
            None => {
                let path = out.join(DTN_FILE);
                if path.exists() {
                    pipeline::load_dtn(config, &path)
                } else {
                    log::info!("no DtN file given; synthesizing forward data");
                    Ok(pipeline::run_forward(config, out)?.0)
                }
            }
        }
    }
}

fn run(command: Command) -> Result<bool, Error> {
    match command {
        Command::Forward(args) => {
            let (config, out) = args.load()?;
            let (_, report) = pipeline::with_workers(config.workers, || pipeline::run_forward(&config, &out))??;
            println!(
                "forward: {} map, {} modes, written to {}",
                report.method,
                2 * report.max_mode + 1,
                out.join(DTN_FILE).display()
            );
            Ok(true)
        }
        Command::Extend(args) => {
            let (config, out) = args.load()?;
            let report = pipeline::with_workers(config.workers, || -> Result<_, Error> {
                let map = args.dtn(&config, &out)?;
                Ok(pipeline::run_extend(&config, &map, &out)?.1)
            })??;
            println!(
                "extend: radius {} -> {}, condition {:.3e}",
                report.inner_radius, report.outer_radius, report.condition
            );
            if let Some(c) = &report.comparison {
                println!("extend: methods differ by {:.3e}", c.max_entry_diff);
            }
            Ok(true)
        }
        Command::Reconstruct(args) => {
            let (config, out) = args.load()?;
            let outcome = pipeline::with_workers(config.workers, || -> Result<_, Error> {
                let map = args.dtn(&config, &out)?;
                pipeline::run_reconstruct(&config, &map, &out, &args.options())
            })??;
            let names = |s: &[Stage]| s.iter().map(|s| s.name()).collect::<Vec<_>>().join(",");
            println!("reconstruct: computed [{}], reused [{}]", names(&outcome.computed), names(&outcome.loaded));
            if let Some(m) = outcome.metrics.as_ref().and_then(|m| m.rules.first()) {
                println!(
                    "reconstruct: rule {} relative L2 {:.4}, failed nodes {}",
                    m.rule.name(),
                    m.metrics.relative_l2,
                    m.metrics.failed_nodes
                );
            }
            Ok(true)
        }
        Command::Verify(args) => {
            let (config, out) = args.load()?;
            let report = pipeline::with_workers(config.workers, || pipeline::verify(&config, &out, &args.options()))??;
            for c in &report.checks {
                println!(
                    "{} {}: {:.3e} (tolerance {:.1e})",
                    if c.passed { "PASS" } else { "FAIL" },
                    c.name,
                    c.value,
                    c.tolerance
                );
            }
            if let Some(a) = &report.arbitration {
                for v in &a.verdicts {
                    println!(
                        "rule {}: relative L2 {:.4}, ring asymmetry {:.2e}, imaginary/gamma {:.2e} -> {}",
                        v.rule.name(),
                        v.metrics.relative_l2,
                        v.metrics.ring_asymmetry,
                        v.metrics.max_imag_over_gamma,
                        if v.passed { "meets tolerances" } else { "misses tolerances" }
                    );
                }
                match a.passing_rules.as_slice() {
                    [only] => println!("arbitration: only {} meets the tolerances", only.name()),
                    [] => println!("arbitration: neither rule meets the tolerances"),
                    _ => println!("arbitration: both rules meet the tolerances"),
                }
            }
            Ok(report.all_passed)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(3),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_config() { 2 } else { 3 })
        }
    }
}
