use afford_core::checkpoint::Checkpoint;
use afford_core::config::{Component, RunConfig};
use afford_core::data::{load_dataset, make_splits, write_dataset, CorruptionMode, Dataset, Split, MANIFEST_FILE};
use afford_core::diagnostics::{gradcheck_all, DEFAULT_STEP, DEFAULT_TOLERANCE};
use afford_core::metrics::{to_csv, SplitSummary, TABLE_HEADER};
use afford_core::train::{
    ablate, corruption_experiment, evaluate, init_checkpoint, split_validation, train, EpochRecord,
};
use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(name = "afford", version, about = "Language-driven affordance grounding on point clouds")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic splits into a directory.
    GenData {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model and write `last.ckpt`, `best.ckpt` and `train.log`.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Dataset directory; overrides `data_dir` in the config.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value = "run")]
        out: PathBuf,
        /// Continue from this checkpoint instead of a fresh initialization.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on one split, or `all` test splits.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        split: String,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Train with one component removed and evaluate on the test splits.
    Ablate {
        #[arg(long)]
        component: String,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Also save the ablated run's selected checkpoint here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on instruction-corrupted copies of a split.
    Corrupt {
        #[arg(long)]
        ckpt: PathBuf,
        /// `affordance` or `part-focus`.
        #[arg(long)]
        mode: String,
        #[arg(long, value_delimiter = ',', default_value = "0,0.1,0.2")]
        rates: Vec<f64>,
        #[arg(long, default_value = "open")]
        split: String,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Finite-difference check of every op, module and the end-to-end loss.
    Gradcheck {
        #[arg(long, default_value_t = DEFAULT_STEP)]
        step: f64,
        #[arg(long, default_value_t = DEFAULT_TOLERANCE)]
        tol: f64,
        /// Write the report here as well as to stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn read_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        None => Ok(RunConfig::desk()),
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
            RunConfig::parse(&text).with_context(|| format!("parsing config {}", p.display()))
        }
    }
}

fn dataset(config: &RunConfig, dir: Option<&Path>) -> Result<Dataset> {
    let dir = dir.map(Path::to_path_buf).or_else(|| config.data_dir.as_ref().map(PathBuf::from));
    match dir {
        Some(d) if d.join(MANIFEST_FILE).exists() => {
            load_dataset(&d).with_context(|| format!("loading dataset from {}", d.display()))
        }
        Some(d) => bail!("no {MANIFEST_FILE} in {}; run gen-data first", d.display()),
        None => Ok(make_splits(&config.data)?),
    }
}

fn parse_split(name: &str) -> Result<Split> {
    Split::from_name(name).with_context(|| format!("unknown split {name:?}"))
}

fn parse_component(name: &str) -> Result<Component> {
    Ok(Component::from_name(name)?)
}

fn print_table(rows: &[SplitSummary]) {
    print!("{}", to_csv(rows));
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { config, out } => {
            let config = read_config(config.as_deref())?;
            let data = make_splits(&config.data)?;
            fs::create_dir_all(&out)?;
            write_dataset(&out, &data)?;
            for s in std::iter::once(Split::Train).chain(Split::TEST) {
                println!("{}\t{}", s.name(), data.split(s).len());
            }
        }
        Command::Train { config, data, out, resume } => {
            let config = read_config(Some(&config))?;
            let data = dataset(&config, data.as_deref())?;
            let all = data.split_owned(Split::Train);
            let (train_set, val) = split_validation(&all, config.val_fraction, config.data.seed);
            let start = match resume {
                Some(p) => {
                    let ck = Checkpoint::load(&p).with_context(|| format!("loading {}", p.display()))?;
                    if ck.model.config != config {
                        bail!("{} was written with a different config", p.display());
                    }
                    ck
                }
                None => init_checkpoint(&config, &train_set)?,
            };
            fs::create_dir_all(&out)?;
            let mut log = fs::OpenOptions::new().create(true).append(true).open(out.join("train.log"))?;
            let mut write_err = None;
            let outcome = train(start, &train_set, &val, |r: &EpochRecord| {
                println!("{r}");
                if let Err(e) = writeln!(log, "{r}") {
                    write_err.get_or_insert(e);
                }
            })?;
            if let Some(e) = write_err {
                return Err(e).context("writing train.log");
            }
            outcome.last.save(&out.join("last.ckpt"))?;
            outcome.selected().save(&out.join("best.ckpt"))?;
            println!(
                "saved {} (best val aIoU {})",
                out.display(),
                outcome.selected().best_val_aiou.map_or("n/a".into(), |v| format!("{v:.4}"))
            );
        }
        Command::Eval { ckpt, split, data } => {
            let ck = Checkpoint::load(&ckpt).with_context(|| format!("loading {}", ckpt.display()))?;
            let data = dataset(&ck.model.config, data.as_deref())?;
            let splits = if split == "all" { Split::TEST.to_vec() } else { vec![parse_split(&split)?] };
            let rows = splits
                .iter()
                .map(|&s| evaluate(&ck.model, &data.split_owned(s), s.name()))
                .collect::<afford_core::Result<Vec<_>>>()?;
            print_table(&rows);
        }
        Command::Ablate { component, config, data, out } => {
            let component = parse_component(&component)?;
            let config = read_config(config.as_deref())?;
            let data = dataset(&config, data.as_deref())?;
            let report = ablate(&config, component, &data, &Split::TEST)?;
            if let Some(out) = out {
                report.outcome.selected().save(&out)?;
            }
            print_table(&report.table);
        }
        Command::Corrupt { ckpt, mode, rates, split, seed, data } => {
            let mode = CorruptionMode::from_name(&mode).with_context(|| format!("unknown corruption mode {mode:?}"))?;
            let ck = Checkpoint::load(&ckpt).with_context(|| format!("loading {}", ckpt.display()))?;
            let data = dataset(&ck.model.config, data.as_deref())?;
            let split = parse_split(&split)?;
            let rows = corruption_experiment(&ck.model, &data.split_owned(split), &rates, mode, seed)?;
            println!("rate,{}", TABLE_HEADER);
            for (rate, row) in rows {
                println!("{rate},{}", row.to_csv_row());
            }
        }
        Command::Gradcheck { step, tol, out } => {
            let summary = gradcheck_all(step, tol)?;
            let text = summary.to_text();
            print!("{text}");
            if let Some(out) = out {
                fs::write(&out, &text)?;
            }
            if !summary.passed() {
                bail!("gradient check failed: {}", summary.failing().join(", "));
            }
        }
    }
    Ok(())
}

fn main() {
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
