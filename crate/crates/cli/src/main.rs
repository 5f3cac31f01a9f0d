use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use recurrent_ipw::inference::{estimate, percentile_bootstrap, EstimatorSpec};
use recurrent_ipw::io::{format_estimate, load_config, read_dataset, write_dataset, write_weights};
use recurrent_ipw::ipw::{estimate_weights, WeightOptions};
use recurrent_ipw::simulation::{simulate_trial, Scenario};
use recurrent_ipw::study::{parse_report_csv, render_report, run_study, ReportFormat, StudyConfig};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

/// Hypothetical-estimand analysis of recurrent events under treatment switching.
#[derive(Parser)]
#[command(name = "recurrent-ipw", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate one trial and write subjects.csv, events.csv and tv.csv.
    Simulate(Common),
    /// Fit one model and approach to a CSV dataset.
    Fit {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
    },
    /// Estimate switching weights and write weights.csv.
    Weights {
        #[command(flatten)]
        common: Common,
        /// Directory holding subjects.csv, events.csv and tv.csv.
        #[arg(long)]
        data: PathBuf,
        /// Use unstabilized weights.
        #[arg(long)]
        unstabilized: bool,
        /// Truncate weights above this quantile.
        #[arg(long)]
        cap_quantile: Option<f64>,
    },
    /// Percentile bootstrap interval for one fit.
    Bootstrap {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
    },
    /// Run the Monte Carlo study and write report.csv and report.txt.
    Study(Common),
    /// Render a saved report.csv.
    Report {
        /// Path to a report.csv written by `study`.
        input: PathBuf,
        #[arg(long, value_enum, default_value = "text")]
        format: Format,
    },
}

#[derive(Args)]
struct DataArgs {
    /// Directory holding subjects.csv, events.csv and tv.csv.
    #[arg(long)]
    data: PathBuf,
    /// Estimator, e.g. lwyy+ipw, nb+treatment_policy, naive_nb+ipw.
    #[arg(long, default_value = "lwyy+ipw")]
    estimator: EstimatorSpec,
}

#[derive(Args)]
struct Common {
    /// TOML study configuration; simulation settings live under [sim].
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_parser = clap::value_parser!(u8).range(1..=3))]
    scenario: Option<u8>,
    #[arg(long)]
    measurement_interval: Option<usize>,
    #[arg(long)]
    replicates: Option<usize>,
    #[arg(long)]
    bootstrap: Option<usize>,
    #[arg(long)]
    threads: Option<usize>,
    /// Output directory (stdout when omitted, where that makes sense).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Text,
    Csv,
}

impl Common {
    fn study_config(&self) -> Result<StudyConfig> {
        let mut cfg: StudyConfig = match &self.config {
            Some(p) => load_config(p)?,
            None => StudyConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.sim.seed = s;
        }
        if let Some(s) = self.scenario {
            cfg.sim.scenario = Scenario::try_from(s).map_err(anyhow::Error::msg)?;
            cfg.sim.params = None;
        }
        if let Some(m) = self.measurement_interval {
            cfg.sim.measurement_interval = m;
        }
        if let Some(r) = self.replicates {
            cfg.n_replicates = r;
        }
        if let Some(b) = self.bootstrap {
            cfg.bootstrap = b;
        }
        if let Some(t) = self.threads {
            cfg.threads = t;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn emit(&self, name: &str, body: &[u8]) -> Result<()> {
        match &self.out {
            Some(dir) => {
                fs::create_dir_all(dir)?;
                let path = dir.join(name);
                fs::write(&path, body).with_context(|| format!("writing {}", path.display()))
            }
            None => Ok(std::io::stdout().write_all(body)?),
        }
    }
}

fn load(dir: &Path) -> Result<Vec<recurrent_ipw::Subject>> {
    read_dataset(dir).with_context(|| format!("reading dataset from {}", dir.display()))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Simulate(common) => {
            let cfg = common.study_config()?;
            let sim = simulate_trial(&cfg.sim, cfg.sim.seed)?;
            let dir = common.out.clone().unwrap_or_else(|| PathBuf::from("."));
            write_dataset(&dir, &sim.subjects)?;
            log::info!("wrote {} subjects to {}", sim.subjects.len(), dir.display());
        }
        Command::Fit { common, data } => {
            let cfg = common.study_config()?;
            let subjects = load(&data.data)?;
            let est = estimate(&subjects, data.estimator)?;
            common.emit("fit.txt", format_estimate(data.estimator, &est, cfg.alpha).as_bytes())?;
        }
        Command::Weights { common, data, unstabilized, cap_quantile } => {
            let subjects = load(&data)?;
            let opts = WeightOptions { stabilized: !unstabilized, cap_quantile };
            let wm = estimate_weights(&subjects, &opts, None)?;
            let mut buf = Vec::new();
            write_weights(&mut buf, &wm.weights)?;
            common.emit("weights.csv", &buf)?;
        }
        Command::Bootstrap { common, data } => {
            let cfg = common.study_config()?;
            if cfg.bootstrap < 2 {
                bail!("--bootstrap must be at least 2");
            }
            let subjects = load(&data.data)?;
            let b = percentile_bootstrap(&subjects, data.estimator, cfg.bootstrap, cfg.alpha, cfg.sim.seed)?;
            let summary = format!(
                "estimator = {}\nreplicates = {}\nfailed = {}\nci_low = {}\nci_high = {}\nse_boot = {}\n",
                data.estimator,
                cfg.bootstrap,
                b.n_failed,
                b.ci_low,
                b.ci_high,
                b.se_boot
            );
            match &common.out {
                Some(dir) => {
                    common.emit("bootstrap.txt", summary.as_bytes())?;
                    b.write_trace(fs::File::create(dir.join("bootstrap_trace.csv"))?)?;
                }
                None => print!("{summary}"),
            }
        }
        Command::Study(common) => {
            let cfg = common.study_config()?;
            let report = run_study(&cfg)?;
            let text = render_report(&report, ReportFormat::Text);
            match &common.out {
                Some(_) => {
                    common.emit("report.csv", render_report(&report, ReportFormat::Csv).as_bytes())?;
                    common.emit("report.txt", text.as_bytes())?;
                }
                None => print!("{text}"),
            }
        }
        Command::Report { input, format } => {
            let text = fs::read_to_string(&input).with_context(|| format!("reading {}", input.display()))?;
            let report = parse_report_csv(&text)?;
            let format = match format {
                Format::Text => ReportFormat::Text,
                Format::Csv => ReportFormat::Csv,
            };
            print!("{}", render_report(&report, format));
        }
    }
    Ok(())
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
