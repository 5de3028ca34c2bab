//! Argument parsing and dispatch for the `icf-index` binary.
//!
//! A JSON run config (from `--config` or `ICF_INDEX_CONFIG`) supplies
//! defaults; flags override single fields.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use icf_index::cohort::{ingest, CohortStore, Trend};
use icf_index::pipeline::{
    cmd_index, cmd_link, cmd_profile, cmd_synth, cmd_validate, fit_weights_report, load_records, run_all,
    with_workers, ErrorKind, PipelineError, RunConfig, ScalingMode, Settings,
};

/// Environment variable naming the default config file.
pub const CONFIG_ENV: &str = "ICF_INDEX_CONFIG";

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_OUTPUT: i32 = 4;

#[derive(Debug, Parser)]
#[command(name = "icf-index", version, about = "Personal health index from ICF-linked measurements")]
pub struct Cli {
    /// JSON run config providing defaults for every flag.
    #[arg(long, global = true, env = CONFIG_ENV)]
    pub config: Option<PathBuf>,
    /// Worker threads (default: all cores). Output does not depend on it.
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    /// Log progress to stderr.
    #[arg(short, long, global = true)]
    pub verbose: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Default)]
pub struct Inputs {
    /// Cohort directory, answer/EQ-VAS CSV, or record file; repeatable.
    #[arg(long, num_args = 1..)]
    pub data: Vec<PathBuf>,
    /// Linkage rule file (JSON); the bundled rules by default.
    #[arg(long)]
    pub rules: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args, Default)]
pub struct Weighting {
    /// Decay constant: `0.964`, `1/3@30`, `heavy`, `moderate` or `none`.
    /// `validate` accepts a comma-separated list.
    #[arg(long, value_delimiter = ',')]
    pub gamma: Vec<String>,
    /// Value weighting: f(2) = y, 0 < y < 4; 2 is linear.
    #[arg(long)]
    pub y: Option<f64>,
    /// theoretical (raw bounds 0 and 4) or empirical (observed bounds).
    #[arg(long)]
    pub scaling: Option<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Link answers to ICF qualifiers; writes records.csv and code_counts.csv.
    Link {
        #[command(flatten)]
        inputs: Inputs,
    },
    /// Index and component scores per person and day; writes index.csv.
    Index {
        #[command(flatten)]
        inputs: Inputs,
        #[command(flatten)]
        weighting: Weighting,
    },
    /// Component scores per person on their last day; writes profile.csv.
    Profile {
        #[command(flatten)]
        inputs: Inputs,
        #[command(flatten)]
        weighting: Weighting,
        /// Evaluate on this day using records up to it.
        #[arg(long)]
        day: Option<u32>,
    },
    /// Correlations against EQ-VAS and max pain; writes table1.csv,
    /// maxpain_persons.csv, boxplot.csv, table2.csv, sweep.csv and reliabilities.csv.
    Validate {
        #[command(flatten)]
        inputs: Inputs,
        #[command(flatten)]
        weighting: Weighting,
        /// Sweep `y` over START:END:STEP for every decay constant.
        #[arg(long)]
        grid: Option<String>,
        /// Groups as DURATION/SEQUENCE, comma-separated.
        #[arg(long, value_delimiter = ',')]
        groups: Vec<String>,
    },
    /// Generate a synthetic cohort directory.
    Synth {
        /// Output directory.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Generator seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Number of persons.
        #[arg(long)]
        persons: Option<usize>,
        /// improving, stable, worsening or mixed.
        #[arg(long)]
        trend: Option<String>,
    },
    /// Print the fitted value-curve parameters for a y.
    FitWeights {
        /// Target value f(2), 0 < y < 4.
        #[arg(long)]
        y: f64,
    },
    /// synth, link, index and validate into one output directory.
    Run {
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[command(flatten)]
        weighting: Weighting,
        #[arg(long)]
        grid: Option<String>,
    },
}

fn config_error(message: impl Into<String>) -> PipelineError {
    PipelineError::Config(message.into())
}

fn apply_inputs(config: &mut RunConfig, inputs: &Inputs) {
    if !inputs.data.is_empty() {
        config.data = inputs.data.clone();
    }
    if inputs.rules.is_some() {
        config.rules = inputs.rules.clone();
    }
    if inputs.out.is_some() {
        config.out = inputs.out.clone();
    }
}

fn apply_weighting(config: &mut RunConfig, w: &Weighting, gamma_list: bool) -> Result<(), PipelineError> {
    match (w.gamma.as_slice(), gamma_list) {
        ([], _) => {}
        ([one], false) => config.gamma = one.clone(),
        (_, false) => return Err(config_error("--gamma takes a single value here")),
        (many, true) => config.gammas = many.to_vec(),
    }
    if let Some(y) = w.y {
        config.y = y;
    }
    if let Some(s) = &w.scaling {
        config.scaling = s.parse::<ScalingMode>()?;
    }
    Ok(())
}

fn out_dir(config: &RunConfig) -> Result<&Path, PipelineError> {
    config
        .out
        .as_deref()
        .ok_or_else(|| config_error("no output directory: pass --out or set `out` in the config"))
}

fn require_data(settings: &Settings) -> Result<(), PipelineError> {
    if settings.data.is_empty() {
        return Err(config_error("no input: pass --data or set `data` in the config"));
    }
    Ok(())
}

fn load_cohort(settings: &Settings) -> Result<CohortStore, PipelineError> {
    require_data(settings)?;
    Ok(ingest(&settings.data)?)
}

fn parse_trend(text: &str) -> Result<Trend, PipelineError> {
    match text {
        "improving" => Ok(Trend::Improving),
        "stable" => Ok(Trend::Stable),
        "worsening" => Ok(Trend::Worsening),
        "mixed" => Ok(Trend::Mixed),
        _ => Err(config_error(format!(
            "unknown trend {text:?}: expected improving, stable, worsening or mixed"
        ))),
    }
}

/// Runs one parsed command line.
pub fn run(cli: &Cli) -> Result<(), PipelineError> {
    let mut config = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if cli.workers.is_some() {
        config.workers = cli.workers;
    }

    match &cli.command {
        Command::FitWeights { y } => {
            print!("{}", fit_weights_report(*y)?);
            Ok(())
        }
        Command::Link { inputs } => {
            apply_inputs(&mut config, inputs);
            let settings = config.resolve()?;
            let out = out_dir(&config)?;
            with_workers(settings.workers, || {
                let cohort = load_cohort(&settings)?;
                let linked = cmd_link(&cohort, &settings.rules, out)?;
                println!("{} records, {} codes", linked.records.len(), linked.code_counts.len());
                Ok(())
            })
        }
        Command::Index { inputs, weighting } | Command::Profile { inputs, weighting, .. } => {
            apply_inputs(&mut config, inputs);
            apply_weighting(&mut config, weighting, false)?;
            let settings = config.resolve()?;
            let out = out_dir(&config)?;
            let day = match &cli.command {
                Command::Profile { day, .. } => *day,
                _ => None,
            };
            let is_profile = matches!(cli.command, Command::Profile { .. });
            let report = with_workers(settings.workers, || {
                require_data(&settings)?;
                let records = load_records(&settings.data, &settings.rules)?;
                if is_profile {
                    cmd_profile(&records, &settings.spec, settings.scaling, day, out)
                } else {
                    cmd_index(&records, &settings.spec, settings.scaling, out)
                }
            })?;
            println!("{} rows, {} failed persons", report.rows.len(), report.failures.len());
            if report.failures.is_empty() {
                Ok(())
            } else {
                Err(PipelineError::Data(format!(
                    "{} person(s) could not be evaluated, first: {}: {}",
                    report.failures.len(),
                    report.failures[0].person_id,
                    report.failures[0].message
                )))
            }
        }
        Command::Validate {
            inputs,
            weighting,
            grid,
            groups,
        } => {
            apply_inputs(&mut config, inputs);
            apply_weighting(&mut config, weighting, true)?;
            if grid.is_some() {
                config.grid = grid.clone();
            }
            if !groups.is_empty() {
                config.groups = groups.clone();
            }
            let settings = config.resolve()?;
            let out = out_dir(&config)?;
            with_workers(settings.workers, || {
                let cohort = load_cohort(&settings)?;
                for s in cmd_validate(&cohort, &settings, out)? {
                    let show = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.3}"));
                    println!(
                        "group {} gamma {}: eqvas r = {}, max-pain median r = {}, significant = {}",
                        s.group,
                        s.gamma,
                        show(s.eqvas_coefficient),
                        show(s.maxpain_median),
                        show(s.significant_portion)
                    );
                }
                Ok(())
            })
        }
        Command::Synth {
            out,
            seed,
            persons,
            trend,
        } => {
            if out.is_some() {
                config.out = out.clone();
            }
            config.seed = seed.or(config.seed);
            if let Some(n) = persons {
                config.synth.persons = *n;
            }
            if let Some(t) = trend {
                config.synth.trend = parse_trend(t)?;
            }
            let settings = config.resolve()?;
            let out = out_dir(&config)?;
            let cohort = cmd_synth(&settings.synth, out)?;
            println!("{} persons written to {}", cohort.len(), out.display());
            Ok(())
        }
        Command::Run {
            out,
            seed,
            weighting,
            grid,
        } => {
            if out.is_some() {
                config.out = out.clone();
            }
            config.seed = seed.or(config.seed);
            apply_weighting(&mut config, weighting, false)?;
            if grid.is_some() {
                config.grid = grid.clone();
            }
            let settings = config.resolve()?;
            run_all(&settings, out_dir(&config)?)
        }
    }
}

/// Process exit code for a failed run.
pub fn exit_code(error: &PipelineError) -> i32 {
    match error.kind() {
        ErrorKind::Config => EXIT_CONFIG,
        ErrorKind::Data => EXIT_DATA,
        ErrorKind::Output => EXIT_OUTPUT,
    }
}

/// Parses `args`, runs, and returns the exit code. Errors are reported on stderr.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    let level = if cli.verbose { "info" } else { "warn" };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).try_init();
    match run(&cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let code = exit_code(&e);
            if code == EXIT_CONFIG {
                eprintln!("config error: {e}");
            } else {
                eprintln!("error: {e}");
            }
            code
        }
    }
}
