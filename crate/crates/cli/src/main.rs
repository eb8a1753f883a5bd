use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use prismnet::experiment::{self, ExperimentConfig, Session, Split};
use prismnet::pid::{self, DiscreteJoint};
use prismnet::{checkpoint, Error, Result};

#[derive(Parser)]
#[command(name = "prismnet", version, about = "Tri-modal load forecasting experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML experiment config; built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "runs")]
    out: PathBuf,
    /// Few-shot training fraction.
    #[arg(long)]
    fraction: Option<f64>,
    /// Restrict to one forecast horizon.
    #[arg(long)]
    horizon: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Val => Split::Val,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train one model per horizon and write checkpoints, loss logs and metrics.
    Train(Common),
    /// Evaluate checkpoints written by `train`.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Directory holding the checkpoints; defaults to `--out`.
        #[arg(long)]
        checkpoints: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
    },
    /// Run the full model and each ablation with a shared seed.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// Comma-separated ablation names; all when omitted.
        #[arg(long, value_delimiter = ',')]
        only: Vec<String>,
    },
    /// Train at several training fractions against one test set.
    Fewshot {
        #[command(flatten)]
        common: Common,
        /// Comma-separated fractions.
        #[arg(long, value_delimiter = ',', default_value = "0.05,0.1,0.5,1.0")]
        fractions: Vec<f64>,
    },
    /// Export pooled embeddings of a trained model as CSV.
    DumpEmbeddings {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoints: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
    },
    /// Decompose a discrete joint distribution.
    Pid {
        /// Joint table file.
        file: PathBuf,
        /// Drop the atoms neglected by the simplified three-source lattice.
        #[arg(long)]
        simplify: bool,
        /// Print identity residuals.
        #[arg(long)]
        verify: bool,
        /// Print atoms as CSV.
        #[arg(long)]
        csv: bool,
    },
    /// Export the text and image views of one window.
    RenderPreview {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 0)]
        window: usize,
    },
}

fn load_config(c: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match &c.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    if let Some(f) = c.fraction {
        cfg.train.few_shot_fraction = f;
    }
    if let Some(h) = c.horizon {
        cfg.model.horizons = vec![h];
    }
    cfg.validate()?;
    Ok(cfg)
}

fn horizon_of(cfg: &ExperimentConfig) -> Result<usize> {
    match cfg.model.horizons.as_slice() {
        [h] => Ok(*h),
        hs => Err(Error::Config(format!("pick one horizon with --horizon; configured {hs:?}"))),
    }
}

fn pid_report(file: &Path, simplify: bool, verify: bool, csv: bool) -> Result<(String, bool)> {
    let joint = DiscreteJoint::load(file)?;
    let n = joint.n_sources();
    let result = match n {
        2 if !simplify => pid::decompose2(&joint)?,
        3 => pid::decompose3(&joint, simplify)?,
        _ if simplify => return Err(Error::Config("--simplify needs exactly three sources".into())),
        _ => pid::decompose(&joint),
    };
    let mut out = String::new();
    if csv {
        out.push_str(&result.to_csv());
    } else {
        let _ = writeln!(out, "R = {:.9}", result.redundancy());
        for i in 0..n {
            let _ = writeln!(out, "U({}) = {:.9}", joint.names()[i], result.unique(i));
        }
        let _ = writeln!(out, "S = {:.9}", result.synergy(((1u16 << n) - 1) as u8));
        out.push('\n');
        out.push_str(&result.to_text());
    }
    let mut ok = true;
    if verify {
        let mut reports = vec![("lemma 1", pid::verify_lemma1(&result))];
        if n == 3 && simplify {
            reports.push(("corollary 1", pid::verify_corollary1(&result)?));
        }
        for (name, report) in reports {
            let _ = writeln!(out, "\n{name}: max residual {:.3e}", report.max_residual());
            for c in &report.checks {
                let _ = writeln!(out, "  {}: {:.3e}", c.name, c.residual());
            }
            ok &= report.passed();
        }
    }
    Ok((out, ok))
}

fn execute(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Train(c) => {
            let cfg = load_config(&c)?;
            let out = experiment::run(&cfg, Some(&c.out))?;
            print!("{}", out.test.to_csv());
            println!("runtime {:.1}s, results in {}", out.test.runtime_secs, c.out.display());
        }
        Command::Eval { common, checkpoints, split } => {
            let cfg = load_config(&common)?;
            let dir = checkpoints.unwrap_or_else(|| common.out.clone());
            let report = experiment::evaluate_checkpoints(&cfg, &dir, split.into(), &cfg.model.horizons)?;
            fs::create_dir_all(&common.out)?;
            fs::write(common.out.join("eval_metrics.csv"), report.to_csv())?;
            print!("{}", report.to_csv());
        }
        Command::Ablate { common, only } => {
            let cfg = load_config(&common)?;
            let names: Vec<&str> = if only.is_empty() {
                experiment::AblationFlags::NAMES.to_vec()
            } else {
                only.iter().map(String::as_str).collect()
            };
            fs::create_dir_all(&common.out)?;
            let rows = experiment::run_ablation_suite(&cfg, &names, Some(&common.out))?;
            print!("{}", experiment::suite_csv(&rows));
        }
        Command::Fewshot { common, fractions } => {
            let cfg = load_config(&common)?;
            fs::create_dir_all(&common.out)?;
            let rows = experiment::run_few_shot_suite(&cfg, &fractions, Some(&common.out))?;
            print!("{}", experiment::suite_csv(&rows));
        }
        Command::DumpEmbeddings { common, checkpoints, split } => {
            let cfg = load_config(&common)?;
            let h = horizon_of(&cfg)?;
            let dir = checkpoints.unwrap_or_else(|| common.out.clone());
            let series = experiment::load_series(&cfg)?;
            let mut session = Session::new(&cfg, &series, h)?;
            checkpoint::restore(&mut session.model.store, &experiment::checkpoint_path(&dir, h))?;
            let path = common.out.join(format!("embeddings_h{h}.csv"));
            let rows = experiment::dump_embeddings(&session, split.into(), &path)?;
            println!("{rows} rows written to {}", path.display());
        }
        Command::Pid { file, simplify, verify, csv } => {
            let (text, ok) = pid_report(&file, simplify, verify, csv)?;
            print!("{text}");
            return Ok(ok);
        }
        Command::RenderPreview { common, window } => {
            let cfg = load_config(&common)?;
            experiment::render_preview(&cfg, window, &common.out)?;
            println!("preview of window {window} written to {}", common.out.display());
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match execute(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("verification failed");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
