use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use pgfedsplit::config::{ExperimentConfig, PartitionConfig, StrategyChoice};
use pgfedsplit::experiment::{
    ablation_specs, fixed_alpha_sweep, labelwise_comparison, labelwise_csv, run_comparison,
    run_experiment,
};
use pgfedsplit::metrics::write_file;
use pgfedsplit::scheduler::HeadSync;
use pgfedsplit::Error;

#[derive(Parser, Debug)]
#[command(name = "pgfedsplit", version, about = "Split-model personalized federated learning simulator")]
struct Cli {
    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run the configured strategy over all seeds.
    Run(Common),
    /// Fixed mixing coefficients instead of the learned one.
    SweepAlpha {
        #[command(flatten)]
        common: Common,
        /// Comma-separated values in [0, 1].
        #[arg(long, value_delimiter = ',', default_value = "0,0.25,0.5,0.75,1")]
        alphas: Vec<f64>,
        /// Head synchronization: `every-round`, `never`, or an interval such as `20`.
        #[arg(long, default_value = "every-round")]
        sync: String,
    },
    /// The full method and its ablations.
    Ablate(Common),
    /// Per-label accuracy on a balanced test set, with and without head sync.
    Labelwise {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 200)]
        test_per_class: usize,
    },
    /// Print a configuration file for a preset.
    Config {
        #[arg(long, value_enum, default_value_t = Preset::Desk)]
        preset: Preset,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Preset {
    Desk,
    Full,
}

#[derive(Args, Debug)]
struct Common {
    /// TOML configuration file; flags below override its fields.
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Preset used when no configuration file is given.
    #[arg(long, value_enum, default_value_t = Preset::Desk)]
    preset: Preset,
    /// Comma-separated master seeds.
    #[arg(long, value_delimiter = ',')]
    seed: Option<Vec<u64>>,
    #[arg(long)]
    strategy: Option<String>,
    #[arg(long)]
    rounds: Option<u64>,
    #[arg(long)]
    clients: Option<usize>,
    #[arg(long)]
    participation: Option<f64>,
    #[arg(short, long)]
    output: Option<PathBuf>,
    /// Dirichlet concentration of the partition.
    #[arg(long)]
    beta_dir: Option<f64>,
    /// Classes per client for a pathological partition.
    #[arg(long, conflicts_with = "beta_dir")]
    classes_per_client: Option<usize>,
    #[arg(long)]
    separation: Option<f64>,
    #[arg(long)]
    local_epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Learning rate for both representation and head.
    #[arg(long)]
    eta: Option<f64>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    beta_reg: Option<f64>,
    #[arg(long)]
    t_kd: Option<f64>,
    #[arg(long)]
    synthetic_ratio: Option<f64>,
    #[arg(long)]
    tau0: Option<u32>,
    #[arg(long)]
    tau_min: Option<u32>,
    #[arg(long)]
    tau_max: Option<u32>,
    /// Write a checkpoint every N rounds.
    #[arg(long)]
    checkpoint_every: Option<u64>,
    /// Run clients sequentially.
    #[arg(long)]
    sequential: bool,
}

fn preset(p: Preset) -> ExperimentConfig {
    match p {
        Preset::Desk => ExperimentConfig::desk(),
        Preset::Full => ExperimentConfig::default(),
    }
}

impl Common {
    fn resolve(&self) -> Result<ExperimentConfig, Error> {
        let mut cfg = match &self.config {
            Some(path) => ExperimentConfig::load(path)?,
            None => preset(self.preset),
        };
        if let Some(s) = &self.seed {
            cfg.seeds = s.clone();
        }
        if let Some(s) = &self.strategy {
            cfg.strategy = StrategyChoice::Named(s.clone());
        }
        macro_rules! set {
            ($($flag:ident => $($field:ident).+;)*) => {
                $(if let Some(v) = self.$flag.clone() { cfg.$($field).+ = v; })*
            };
        }
        set! {
            rounds => rounds;
            clients => clients;
            participation => participation;
            output => output_dir;
            separation => dataset.separation;
            local_epochs => train.local_epochs;
            batch_size => train.batch_size;
            lambda => train.lambda;
            beta_reg => train.beta_reg;
            t_kd => train.t_kd;
            synthetic_ratio => personalization.synthetic_ratio;
            tau0 => schedule.tau0;
            tau_min => schedule.tau_min;
            tau_max => schedule.tau_max;
            checkpoint_every => checkpoint_every;
        }
        if let Some(eta) = self.eta {
            cfg.train.eta_theta = eta;
            cfg.train.eta_phi = eta;
        }
        if let Some(beta) = self.beta_dir {
            cfg.partition = PartitionConfig::Dirichlet { beta };
        }
        if let Some(n) = self.classes_per_client {
            cfg.partition = PartitionConfig::Pathological { classes_per_client: n };
        }
        if self.sequential {
            cfg.parallel = false;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn parse_sync(s: &str) -> Result<HeadSync, Error> {
    match s {
        "every-round" => Ok(HeadSync::EveryRound),
        "never" => Ok(HeadSync::Never),
        "adaptive" => Ok(HeadSync::Adaptive),
        n => match n.parse::<u32>() {
            Ok(k) if k >= 1 => Ok(HeadSync::FixedInterval(k)),
            _ => Err(Error::Config {
                field: "sync".into(),
                reason: format!("expected every-round, never, adaptive or a positive interval, got `{s}`"),
            }),
        },
    }
}

fn execute(command: Command) -> Result<(), Error> {
    match command {
        Command::Run(common) => {
            let cfg = common.resolve()?;
            let report = run_experiment(&cfg)?;
            for s in &report.summaries {
                println!(
                    "{} seed {}: final {:.4}, best {:.4}, tau {}",
                    s.strategy, s.seed, s.final_mean_acc, s.best_mean_acc, s.final_tau
                );
            }
            println!("wrote {}", cfg.output_dir.display());
        }
        Command::SweepAlpha { common, alphas, sync } => {
            let cfg = common.resolve()?;
            let sync = parse_sync(&sync)?;
            let curves = fixed_alpha_sweep(&cfg, &alphas, sync)?;
            for c in &curves {
                let last = c.logs.last().map_or(0.0, |l| l.mean_accuracy);
                println!("alpha {} seed {}: final {last:.4}", c.alpha, c.seed);
            }
            println!("wrote {}", cfg.output_dir.display());
        }
        Command::Ablate(common) => {
            let cfg = common.resolve()?;
            let (report, _) = run_comparison(&cfg, &ablation_specs())?;
            for s in &report.summaries {
                println!("{} seed {}: final {:.4}", s.strategy, s.seed, s.final_mean_acc);
            }
            println!("wrote {}", cfg.output_dir.display());
        }
        Command::Labelwise { common, test_per_class } => {
            let cfg = common.resolve()?;
            let rows = cfg
                .seeds
                .iter()
                .map(|&seed| Ok((seed, labelwise_comparison(&cfg, seed, test_per_class)?)))
                .collect::<Result<Vec<_>, Error>>()?;
            let path = cfg.output_dir.join("labelwise.csv");
            write_file(&path, &labelwise_csv(&rows))?;
            println!("wrote {}", path.display());
        }
        Command::Config { preset: p } => {
            // a closed pipe is not an error here
            let _ = std::io::stdout().write_all(preset(p).to_toml().as_bytes());
        }
    }
    Ok(())
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config { .. } | Error::Parameter { .. } | Error::Parse(_) => 2,
        Error::Contract(_) | Error::Shape(_) | Error::Index { .. } => 3,
        Error::Io { .. } => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
