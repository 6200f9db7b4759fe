use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use tabsage_core::harness::{
    run_ablation_suite, run_hyperparameter_sweep, run_method_comparison, write_run, write_suite, HarnessError,
    RunConfig, Session, DEFAULT_N_GRID, DEFAULT_P_GRID,
};
use tabsage_core::inference::AblationMode;
use tabsage_core::selector::SelectionMethod;
use tabsage_core::Exec;

#[derive(Parser)]
#[command(name = "tabsage", version, about = "Explanation-guided few-shot classification of tabular data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// One configuration over all seeds.
    Run(Overrides),
    /// The four component ablations.
    Ablate(Overrides),
    /// Every selection method with and without filtering, plus random.
    Compare(Overrides),
    /// Sweep the importance threshold and the explanation length.
    Sweep {
        #[command(flatten)]
        overrides: Overrides,
        #[arg(long, value_delimiter = ',')]
        p_grid: Option<Vec<f64>>,
        #[arg(long, value_delimiter = ',')]
        n_grid: Option<Vec<usize>>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Switch {
    On,
    Off,
}

impl From<Switch> for bool {
    fn from(s: Switch) -> bool {
        matches!(s, Switch::On)
    }
}

#[derive(Args)]
struct Overrides {
    /// TOML config; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    label_col: Option<String>,
    #[arg(long)]
    task: Option<String>,
    #[arg(long)]
    no_task_header: bool,
    /// Training fraction.
    #[arg(long)]
    split: Option<f64>,
    /// Candidate pool size M.
    #[arg(long)]
    candidates: Option<usize>,
    /// Comma-separated master seeds.
    #[arg(long, value_delimiter = ',')]
    seed: Option<Vec<u64>>,
    #[arg(long)]
    test_subsample: Option<usize>,
    #[arg(long)]
    n_words: Option<usize>,
    #[arg(long)]
    importance_threshold: Option<f64>,
    #[arg(long)]
    method: Option<SelectionMethod>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    centroids: Option<usize>,
    #[arg(long)]
    filter: Option<Switch>,
    #[arg(long)]
    filter_query: Option<Switch>,
    #[arg(long)]
    cluster_literal: bool,
    #[arg(long)]
    temperature: Option<f64>,
    #[arg(long)]
    ablation: Option<AblationMode>,
    #[arg(long)]
    parse_retries: Option<u32>,
    #[arg(long)]
    sequential: bool,
    #[arg(long)]
    cache_dir: Option<PathBuf>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

impl Overrides {
    fn resolve(&self) -> Result<RunConfig, HarnessError> {
        let mut c = match &self.config {
            Some(path) => RunConfig::from_file(path)?,
            None => RunConfig::default(),
        };
        macro_rules! set {
            ($field:ident, $flag:expr) => {
                if let Some(v) = $flag.clone() {
                    c.$field = v.into();
                }
            };
        }
        set!(data, self.data);
        set!(label_column, self.label_col);
        set!(train_fraction, self.split);
        set!(candidates, self.candidates);
        set!(seeds, self.seed);
        set!(n_words, self.n_words);
        set!(importance_threshold, self.importance_threshold);
        set!(method, self.method);
        set!(k, self.k);
        set!(filter, self.filter);
        set!(filter_query, self.filter_query);
        set!(temperature, self.temperature);
        set!(ablation, self.ablation);
        set!(parse_retries, self.parse_retries);
        set!(out_dir, self.out_dir);
        if self.task.is_some() {
            c.task_description = self.task.clone();
        }
        if self.test_subsample.is_some() {
            c.test_subsample = self.test_subsample;
        }
        if self.centroids.is_some() {
            c.centroids = self.centroids;
        }
        if self.cache_dir.is_some() {
            c.cache_dir = self.cache_dir.clone();
        }
        if self.no_task_header {
            c.task_header = false;
        }
        if self.cluster_literal {
            c.cluster_literal = true;
        }
        if self.sequential {
            c.exec = Exec::Sequential;
        }
        c.validate()?;
        Ok(c)
    }
}

fn execute(cli: Cli) -> Result<(), HarnessError> {
    match cli.command {
        Command::Run(o) => {
            let cfg = o.resolve()?;
            let report = Session::new(&cfg)?.run(&cfg)?;
            write_run(&cfg.out_dir, &report)?;
            print!("{}", report.summary());
        }
        Command::Ablate(o) => {
            let cfg = o.resolve()?;
            let suite = run_ablation_suite(&Session::new(&cfg)?, &cfg)?;
            write_suite(&cfg.out_dir, &suite)?;
            print!("{}", suite.summary());
        }
        Command::Compare(o) => {
            let cfg = o.resolve()?;
            let suite = run_method_comparison(&Session::new(&cfg)?, &cfg)?;
            write_suite(&cfg.out_dir, &suite)?;
            print!("{}", suite.summary());
        }
        Command::Sweep {
            overrides,
            p_grid,
            n_grid,
        } => {
            let cfg = overrides.resolve()?;
            let p = p_grid.unwrap_or_else(|| DEFAULT_P_GRID.to_vec());
            let n = n_grid.unwrap_or_else(|| DEFAULT_N_GRID.to_vec());
            let suite = run_hyperparameter_sweep(&Session::new(&cfg)?, &cfg, &p, &n)?;
            write_suite(&cfg.out_dir, &suite)?;
            print!("{}", suite.summary());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error [{}]: {e}", e.stage());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
