use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::info;
use stratperc::experiment::{self, ExperimentConfig, Report, DEFAULT_OUT_DIR, OUT_DIR_ENV};
use stratperc::verify::{self, Suite};
use stratperc::{Error, Exec};

/// Simulate and evaluate the active strategic Perceptron.
#[derive(Parser, Debug)]
#[command(name = "stratperc", version)]
struct Cli {
    /// Log progress of every run.
    #[arg(long, short, global = true)]
    verbose: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run one experiment per seed.
    Run(RunArgs),
    /// Run the cross product of the config's [grid] and fit the scaling forms.
    Sweep {
        #[command(flatten)]
        run: RunArgs,
        /// Also write SVG charts.
        #[arg(long)]
        svg: bool,
    },
    /// Run a property suite: lemmas, theorem or init.
    Verify {
        suite: String,
        /// Worker threads (1 runs sequentially).
        #[arg(long)]
        parallel: Option<usize>,
    },
}

#[derive(Args, Debug)]
struct RunArgs {
    /// TOML experiment configuration.
    #[arg(long)]
    config: PathBuf,

    /// Output directory.
    #[arg(long, env = OUT_DIR_ENV)]
    out: Option<PathBuf>,

    /// Use seeds 0..N.
    #[arg(long, conflicts_with = "seed_list")]
    seeds: Option<u64>,

    /// Comma-separated seeds.
    #[arg(long, value_delimiter = ',')]
    seed_list: Option<Vec<u64>>,

    /// Worker threads (1 runs sequentially).
    #[arg(long)]
    parallel: Option<usize>,
}

impl RunArgs {
    fn load(&self) -> stratperc::Result<(ExperimentConfig, PathBuf)> {
        let mut cfg = ExperimentConfig::load(&self.config)?;
        if let Some(n) = self.seeds {
            cfg.seeds = (0..n).collect();
        }
        if let Some(list) = &self.seed_list {
            cfg.seeds = list.clone();
        }
        cfg.validate()?;
        let out = self
            .out
            .clone()
            .or_else(|| cfg.out_dir.clone())
            .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT_DIR));
        Ok((cfg, out))
    }
}

fn with_exec<R: Send>(parallel: Option<usize>, f: impl FnOnce(Exec) -> R + Send) -> R {
    match parallel {
        Some(n) => Exec::with_threads(n, f),
        None => f(Exec::default()),
    }
}

fn fail(err: &Error) -> ExitCode {
    eprintln!("error: {err}");
    ExitCode::from(experiment::exit_code(err) as u8)
}

fn report_outcome(report: &Report, out: &Path) -> ExitCode {
    for f in &report.failures {
        eprintln!("{}: {}", f.run_id, f.error);
    }
    for c in &report.aggregate.cells {
        println!(
            "cell {:>3} {:<20} d={:<3} eps={:<10} runs={:<4} success={:.2} median labels={:.0} draws={:.0}",
            c.cell, c.learner, c.d, c.epsilon, c.runs, c.success_rate, c.median_labels, c.median_draws
        );
    }
    if let Some(scaling) = &report.scaling {
        for group in &scaling.learners {
            for fit in &group.fits {
                match (fit.r_squared, fit.passed) {
                    (Some(r2), Some(passed)) => println!(
                        "{} nu={} {:?}: R² = {r2:.3} (threshold {}) {}",
                        group.learner,
                        group.nu,
                        fit.formula,
                        fit.threshold,
                        if passed { "pass" } else { "fail" }
                    ),
                    _ => println!(
                        "{} nu={} {:?}: {}",
                        group.learner,
                        group.nu,
                        fit.formula,
                        fit.message.as_deref().unwrap_or("no fit")
                    ),
                }
            }
        }
    }
    println!(
        "wrote {} run summaries to {}",
        report.results.len(),
        out.display()
    );
    ExitCode::from(report.exit_code() as u8)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.verbose { "info" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();

    match cli.command {
        Command::Run(args) => {
            let (cfg, out) = match args.load() {
                Ok(x) => x,
                Err(e) => return fail(&e),
            };
            info!("running {} seeds into {}", cfg.seeds.len(), out.display());
            match with_exec(args.parallel, |exec| experiment::run(&cfg, &out, exec)) {
                Ok(report) => report_outcome(&report, &out),
                Err(e) => fail(&e),
            }
        }
        Command::Sweep { run, svg } => {
            let (cfg, out) = match run.load() {
                Ok(x) => x,
                Err(e) => return fail(&e),
            };
            info!(
                "sweeping {} cells x {} seeds into {}",
                cfg.cells().len(),
                cfg.seeds.len(),
                out.display()
            );
            match with_exec(run.parallel, |exec| {
                experiment::sweep(&cfg, &out, exec, svg)
            }) {
                Ok(report) => report_outcome(&report, &out),
                Err(e) => fail(&e),
            }
        }
        Command::Verify { suite, parallel } => {
            let suite: Suite = match suite.parse() {
                Ok(s) => s,
                Err(e) => return fail(&e),
            };
            let checks = with_exec(parallel, |exec| verify::run_suite(suite, exec));
            print!("{}", verify::table(&checks));
            if checks.iter().all(|c| c.passed) {
                ExitCode::SUCCESS
            } else {
                ExitCode::FAILURE
            }
        }
    }
}
