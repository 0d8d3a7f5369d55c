use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use emgpr_core::data::{fit_records, generate_synthetic, load_csv, transform, write_csv};
use emgpr_core::experiment::{format_table, run_on_splits, run_sweep, write_sweep_csv, Split};
use emgpr_core::{
    fit, fit_ensemble, fit_icm, run_experiment, EnsembleConfig, ExperimentConfig, ExperimentReport, IndependentGps,
    LeftoverPolicy, ModelChoice, Protocol, SyntheticConfig,
};
use serde_json::json;

#[derive(Parser)]
#[command(name = "emgpr", version, about = "Multi-task GP regression with a mixture of latent processes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit a model on a CSV file and write its parameters as JSON.
    Fit(FitArgs),
    /// Fit on a training CSV and score on a test CSV.
    Eval(EvalArgs),
    /// Run a benchmark protocol with restarts and write a JSON report.
    Experiment(ExperimentArgs),
    /// Score the ensemble over a range of mini-batch sizes and write a CSV table.
    Sweep(SweepArgs),
    /// Sample a synthetic multi-task dataset from a JSON config.
    Synth(SynthArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum ModelArg {
    Gp,
    Icm,
    Emgpr,
}

#[derive(Clone, Copy, ValueEnum)]
enum ProtocolArg {
    JuraCd,
    JuraAll,
    Synthetic,
}

#[derive(Args)]
struct ModelOpts {
    /// Defaults to emgpr, or to the model in --config.
    #[arg(long, value_enum)]
    model: Option<ModelArg>,
    /// Train an ensemble over strided mini-batches (EMGPR only).
    #[arg(long)]
    ensemble: bool,
    /// Mini-batch size N0; defaults to the squared task count.
    #[arg(long)]
    batch_size: Option<usize>,
    /// ICM rank [default: 1]
    #[arg(long)]
    rank: Option<usize>,
    /// Drop the samples left over by the partition instead of spreading them over batches.
    #[arg(long)]
    strict_partition: bool,
    #[arg(long)]
    log_transform: bool,
    /// Comma-separated target columns.
    #[arg(long, value_delimiter = ',')]
    targets: Vec<String>,
}

impl ModelOpts {
    fn choice(&self, base: ModelChoice) -> Result<ModelChoice> {
        Ok(match (self.model, self.ensemble) {
            (None, false) => base,
            (None | Some(ModelArg::Emgpr), true) => ModelChoice::EmgprEnsemble,
            (Some(_), true) => bail!("--ensemble requires --model emgpr"),
            (Some(ModelArg::Gp), _) => ModelChoice::Gp,
            (Some(ModelArg::Icm), _) => ModelChoice::Icm,
            (Some(ModelArg::Emgpr), _) => ModelChoice::Emgpr,
        })
    }

    /// Applies the flags on top of `base`.
    fn apply(&self, mut base: ExperimentConfig) -> Result<ExperimentConfig> {
        base.model = self.choice(base.model)?;
        if let Some(r) = self.rank {
            base.rank = r;
        }
        if self.strict_partition {
            base.leftover = LeftoverPolicy::Drop;
        }
        if self.batch_size.is_some() {
            base.batch_size = self.batch_size;
        }
        base.log_transform |= self.log_transform;
        if !self.targets.is_empty() {
            base.targets = self.targets.clone();
        }
        Ok(base)
    }
}

#[derive(Args)]
struct FitArgs {
    /// Training CSV with a header row.
    #[arg(long)]
    train: PathBuf,
    /// Comma-separated input columns; Xloc,Yloc or the first two columns otherwise.
    #[arg(long, value_delimiter = ',')]
    inputs: Vec<String>,
    #[command(flatten)]
    model: ModelOpts,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    test: PathBuf,
    #[arg(long, value_delimiter = ',')]
    inputs: Vec<String>,
    #[command(flatten)]
    model: ModelOpts,
    #[arg(long, default_value_t = 1)]
    restarts: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    timing: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ProtocolOpts {
    /// Full experiment config as JSON; flags given on the command line override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum)]
    protocol: Option<ProtocolArg>,
    /// Directory holding prediction.csv and validation.csv.
    #[arg(long, default_value = "data/jura")]
    data_dir: PathBuf,
    /// Synthetic dataset config (JSON) for the synthetic protocol.
    #[arg(long)]
    synthetic: Option<PathBuf>,
    /// Training points for the synthetic protocol; the rest are test points.
    #[arg(long)]
    train: Option<usize>,
    #[arg(long)]
    restarts: Option<usize>,
    #[arg(long)]
    folds: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Record wall-clock times in the report (makes reports non-reproducible).
    #[arg(long)]
    timing: bool,
}

impl ProtocolOpts {
    fn config(&self, model: &ModelOpts) -> Result<ExperimentConfig> {
        let mut config = match &self.config {
            Some(path) => serde_json::from_str(&read(path)?).with_context(|| format!("parsing {}", path.display()))?,
            None => ExperimentConfig::default(),
        };
        match self.protocol {
            Some(ProtocolArg::JuraCd) => config.protocol = Protocol::JuraCd { data_dir: self.data_dir.clone() },
            Some(ProtocolArg::JuraAll) => config.protocol = Protocol::JuraAll { data_dir: self.data_dir.clone() },
            Some(ProtocolArg::Synthetic) => {
                let path = self.synthetic.as_ref().context("--protocol synthetic needs --synthetic CONFIG")?;
                let data: SyntheticConfig = serde_json::from_str(&read(path)?).with_context(|| format!("parsing {}", path.display()))?;
                let train = self.train.unwrap_or(data.n * 4 / 5);
                config.protocol = Protocol::Synthetic { data, train };
            }
            None => {}
        }
        if let (Protocol::Synthetic { train, .. }, Some(t)) = (&mut config.protocol, self.train) {
            *train = t;
        }
        if let Some(r) = self.restarts {
            config.restarts = r;
        }
        if self.folds.is_some() {
            config.folds = self.folds;
        }
        if let Some(s) = self.seed {
            config.seed = s;
        }
        config.timing |= self.timing;
        let config = model.apply(config)?;
        config.validate()?;
        Ok(config)
    }
}

#[derive(Args)]
struct ExperimentArgs {
    #[command(flatten)]
    protocol: ProtocolOpts,
    #[command(flatten)]
    model: ModelOpts,
    /// JSON report path; the summary table always goes to stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    protocol: ProtocolOpts,
    #[command(flatten)]
    model: ModelOpts,
    /// Comma-separated mini-batch sizes.
    #[arg(long, value_delimiter = ',', default_value = "9,18,27,36,45,54")]
    batch_sizes: Vec<usize>,
    #[arg(long, default_value = "sweep.csv")]
    out: PathBuf,
}

#[derive(Args)]
struct SynthArgs {
    /// Synthetic dataset config (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Overrides the seed in the config.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn emit(text: &str, out: Option<&Path>) -> Result<()> {
    match out {
        Some(path) => fs::write(path, text).with_context(|| format!("writing {}", path.display())),
        None => {
            let mut stdout = io::stdout().lock();
            match writeln!(stdout, "{text}") {
                Err(e) if e.kind() != io::ErrorKind::BrokenPipe => Err(e.into()),
                _ => Ok(()),
            }
        }
    }
}

fn load(path: &Path, targets: &[String], inputs: &[String]) -> Result<emgpr_core::Dataset> {
    let inputs = (!inputs.is_empty()).then_some(inputs);
    Ok(load_csv(path, targets, inputs)?)
}

fn run_fit(args: &FitArgs) -> Result<()> {
    let data = load(&args.train, &args.model.targets, &args.inputs)?;
    let records = fit_records(&data.y, args.model.log_transform)?;
    let y = transform(&data.y, &records)?;
    let base = args.model.apply(ExperimentConfig::default())?;
    let fit_config = base.fit.clone();
    let params = match base.model {
        ModelChoice::Gp => {
            let m = IndependentGps::fit(&data.x, &y, &fit_config)?;
            json!({ "step1": m.params() })
        }
        ModelChoice::Icm => {
            if base.rank > y.ncols() {
                bail!("--rank must not exceed the task count {}", y.ncols());
            }
            let m = fit_icm(&data.x, &y, base.rank, &fit_config)?;
            json!({ "kernel": m.latent_kernels()[0], "noise_std": m.noise_std(), "weights": m.weights(), "log_marginal": m.log_marginal() })
        }
        ModelChoice::Emgpr => {
            let m = fit(&data.x, &y, &fit_config)?;
            json!({ "step1": m.task_params(), "weights": m.weights(), "log_marginal": m.log_marginal() })
        }
        ModelChoice::EmgprEnsemble => {
            let config = EnsembleConfig {
                batch_size: base.batch_size,
                leftover: base.leftover,
                fit: fit_config,
            };
            let m = fit_ensemble(&data.x, &y, &config)?;
            json!({ "step1": m.step1(), "subsets": m.subsets(), "member_weights": m.member_weights() })
        }
    };
    let doc = json!({
        "schema_version": 1,
        "model": base.model,
        "tasks": data.task_names,
        "inputs": data.input_names,
        "normalization": records,
        "parameters": params,
    });
    emit(&serde_json::to_string_pretty(&doc)?, args.out.as_deref())
}

fn write_report(report: &ExperimentReport, out: Option<&Path>) -> Result<()> {
    print!("{}", format_table(report));
    if let Some(path) = out {
        fs::write(path, report.to_json()?).with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(())
}

fn run_eval(args: &EvalArgs) -> Result<()> {
    let train = load(&args.train, &args.model.targets, &args.inputs)?;
    let test = load(&args.test, &train.task_names, &train.input_names)?;
    let mut config = args.model.apply(ExperimentConfig::default())?;
    config.targets = train.task_names.clone();
    config.restarts = args.restarts;
    config.seed = args.seed;
    config.timing = args.timing;
    let split = Split {
        x_train: train.x,
        y_train: train.y,
        x_test: test.x,
        y_test: test.y,
    };
    let report = run_on_splits(&config, &[split], train.task_names)?;
    write_report(&report, args.out.as_deref())
}

fn run_experiment_cmd(args: &ExperimentArgs) -> Result<()> {
    let config = args.protocol.config(&args.model)?;
    let report = run_experiment(&config)?;
    write_report(&report, args.out.as_deref())
}

fn run_sweep_cmd(args: &SweepArgs) -> Result<()> {
    let mut config = args.protocol.config(&args.model)?;
    if args.protocol.protocol.is_none() && args.protocol.config.is_none() {
        // the mini-batch study scores every metal
        config.protocol = Protocol::JuraAll {
            data_dir: args.protocol.data_dir.clone(),
        };
    }
    let rows = run_sweep(&config, &args.batch_sizes)?;
    for r in &rows {
        println!("{:>4} {:<8} {:.4} ± {:.4}", r.n0, r.task, r.mae_mean, r.mae_sd);
    }
    write_sweep_csv(&rows, &args.out)?;
    Ok(())
}

fn run_synth(args: &SynthArgs) -> Result<()> {
    let mut config: SyntheticConfig =
        serde_json::from_str(&read(&args.config)?).with_context(|| format!("parsing {}", args.config.display()))?;
    if let Some(s) = args.seed {
        config.seed = s;
    }
    let data = generate_synthetic(&config)?;
    write_csv(&data.dataset, &args.out)?;
    log::info!("wrote {} rows to {}", data.dataset.len(), args.out.display());
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match Cli::parse().command {
        Command::Fit(a) => run_fit(&a),
        Command::Eval(a) => run_eval(&a),
        Command::Experiment(a) => run_experiment_cmd(&a),
        Command::Sweep(a) => run_sweep_cmd(&a),
        Command::Synth(a) => run_synth(&a),
    }
}
