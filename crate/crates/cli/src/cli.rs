//! Argument parsing and verb dispatch.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::bundle::{resolve_dir, Bundle};
use crate::config::{resolve, RunConfig};
use crate::{finish_checks, report, sweep, train, verify, CliError};

#[derive(Debug, Parser)]
#[command(name = "latentmoe", version, about = "Multi-head latent MoE kernels: verification, traffic sweeps and toy training")]
pub struct Cli {
    #[command(subcommand)]
    pub verb: Verb,
}

#[derive(Debug, Args)]
pub struct Common {
    /// Named base configuration (default, toy, table2-2B, table2-4B).
    #[arg(long, default_value = "default")]
    pub preset: String,
    /// JSON file overlaid on the preset.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one key, e.g. `--set model.k=2`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub sets: Vec<String>,
    /// Bundle directory (overrides the config and the output root).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Print the resolved config and exit.
    #[arg(long)]
    pub print_config: bool,
}

#[derive(Debug, Subcommand)]
pub enum Verb {
    /// Run the equivalence, gradient and property suite.
    Verify {
        #[command(flatten)]
        common: Common,
        /// Perturb the block-sparse expert kernel output; the suite must fail.
        #[arg(long)]
        inject_fault: bool,
    },
    /// EP vs HP traffic over k and Zipf skew.
    SweepComm {
        #[command(flatten)]
        common: Common,
        /// Comma-separated k values.
        #[arg(long, value_delimiter = ',')]
        k_list: Option<Vec<usize>>,
        /// Comma-separated skew values.
        #[arg(long, value_delimiter = ',')]
        skew_list: Option<Vec<f64>>,
    },
    /// Routing and expert HBM traffic over N_e and d_e.
    SweepIo {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',')]
        ne_list: Option<Vec<usize>>,
        #[arg(long, value_delimiter = ',')]
        de_list: Option<Vec<usize>>,
    },
    /// Train the toy regression task with both expert backends.
    TrainToy {
        #[command(flatten)]
        common: Common,
    },
    /// Merge bundle CSVs into a summary table and charts.
    Report {
        /// Bundle directories sharing one config hash.
        #[arg(required = true)]
        bundles: Vec<PathBuf>,
        /// Output directory (default: the first bundle).
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn list_set<T: ToString>(key: &str, v: &Option<Vec<T>>) -> Option<String> {
    v.as_ref().map(|v| format!("{key}=[{}]", v.iter().map(T::to_string).collect::<Vec<_>>().join(",")))
}

fn load(common: &Common, extra: &[Option<String>]) -> Result<RunConfig, CliError> {
    let mut sets = common.sets.clone();
    sets.extend(extra.iter().flatten().cloned());
    resolve(&common.preset, common.config.as_deref(), &sets)
}

type VerbFn<'a> = Box<dyn FnOnce(&RunConfig, &mut Bundle) -> Result<Vec<crate::Check>, CliError> + 'a>;

fn run_bundle(verb: &str, common: &Common, cfg: RunConfig, body: VerbFn<'_>) -> Result<(), CliError> {
    if common.print_config {
        println!("{}", serde_json::to_string_pretty(&cfg).expect("config serializes"));
        return Ok(());
    }
    let dir = resolve_dir(&cfg, verb, common.out.as_deref());
    let mut bundle = Bundle::create(dir, verb, &cfg)?;
    let stem = if verb == "verify" { "verify" } else { "checks" };
    let result = body(&cfg, &mut bundle).and_then(|checks| finish_checks(&mut bundle, &checks, stem));
    let dir = bundle.finish(result.is_ok())?;
    println!("bundle {} (config {})", dir.display(), cfg.hash());
    result
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    match cli.verb {
        Verb::Verify { common, inject_fault } => {
            let cfg = load(&common, &[])?;
            run_bundle("verify", &common, cfg, Box::new(move |c, _| verify::run_suite(c, inject_fault)))
        }
        Verb::SweepComm { common, k_list, skew_list } => {
            let cfg = load(&common, &[list_set("sweep_comm.k_list", &k_list), list_set("sweep_comm.skew_list", &skew_list)])?;
            run_bundle("sweep-comm", &common, cfg, Box::new(sweep::sweep_comm))
        }
        Verb::SweepIo { common, ne_list, de_list } => {
            let cfg = load(&common, &[list_set("sweep_io.ne_list", &ne_list), list_set("sweep_io.de_list", &de_list)])?;
            run_bundle("sweep-io", &common, cfg, Box::new(sweep::sweep_io))
        }
        Verb::TrainToy { common } => {
            let cfg = load(&common, &[])?;
            run_bundle("train-toy", &common, cfg, Box::new(train::train_toy_cmd))
        }
        Verb::Report { bundles, out } => {
            let path = report::report(&bundles, out.as_deref())?;
            println!("summary {}", path.display());
            Ok(())
        }
    }
}

/// Parses `args` (program name first) and runs; returns the process exit code.
pub fn main_with<I, S>(args: I) -> ExitCode
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(2) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

