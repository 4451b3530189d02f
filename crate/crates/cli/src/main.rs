use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use streamrec::experiment::{parse_axis, report, run_experiment, sweep};
use streamrec::ingest::{load_dataset, write_cache};
use streamrec::synthetic::{generate, write_ratings, SyntheticConfig};
use streamrec::RunSpec;

#[derive(Parser)]
#[command(name = "streamrec", version, about = "Streaming recommendation experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Parse and filter a ratings file into a binary cache.
    Ingest {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "::")]
        delimiter: String,
        #[arg(long)]
        subsample_users: Option<usize>,
        #[arg(long, default_value_t = 42)]
        seed: u64,
    },
    /// Run one experiment (or several seeds with `repeats=N`).
    Run(RunArgs),
    /// Run the grid spanned by `--axis key=v1,v2,...`.
    Sweep {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long = "axis", required = true)]
        axes: Vec<String>,
    },
    /// Compare finished runs; the first directory is the reference.
    Report {
        #[arg(required = true)]
        dirs: Vec<PathBuf>,
        /// Also write the table as CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Write a synthetic ratings file in `user::item::rating::timestamp` form.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 943)]
        users: usize,
        #[arg(long, default_value_t = 1682)]
        items: usize,
        #[arg(long, default_value_t = 100_000)]
        interactions: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long)]
    subsample_users: Option<usize>,
    /// `key=value` overrides applied after the config file and flags.
    overrides: Vec<String>,
}

impl RunArgs {
    fn spec(&self) -> Result<RunSpec> {
        let mut spec = match &self.config {
            Some(path) => RunSpec::load(path).with_context(|| format!("loading config {}", path.display()))?,
            None => RunSpec::default(),
        };
        if let Some(d) = &self.dataset {
            spec.dataset = Some(d.clone());
        }
        if let Some(o) = &self.out {
            spec.out_dir = o.clone();
        }
        if let Some(s) = self.seed {
            spec.config.rng_seed = s;
        }
        if let Some(w) = self.workers {
            spec.config.workers = w;
        }
        if let Some(k) = self.subsample_users {
            spec.subsample_users = Some(k);
        }
        for kv in &self.overrides {
            spec.apply_override(kv).with_context(|| format!("override `{kv}`"))?;
        }
        spec.validate()?;
        if spec.dataset.is_none() {
            bail!("no dataset: pass --dataset or set `dataset` in the config");
        }
        Ok(spec)
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Ingest {
            dataset,
            out,
            delimiter,
            subsample_users,
            seed,
        } => {
            let ds = load_dataset(&dataset, &delimiter, subsample_users.map(|k| (k, seed)))
                .with_context(|| format!("reading dataset {}", dataset.display()))?;
            write_cache(&ds, &out).with_context(|| format!("writing cache {}", out.display()))?;
            println!(
                "{} users, {} items, {} interactions -> {}",
                ds.num_users,
                ds.num_items,
                ds.len(),
                out.display()
            );
        }
        Command::Run(args) => {
            let spec = args.spec()?;
            let runs = run_experiment(&spec)?;
            for r in &runs {
                println!(
                    "{} seed {}: HR@{k} {:.4} NDCG@{k} {:.4} over {} test interactions",
                    r.label,
                    r.seed,
                    r.hr,
                    r.ndcg,
                    r.n_test,
                    k = r.top_k
                );
            }
            println!("results in {}", spec.out_dir.display());
        }
        Command::Sweep { run, axes } => {
            let spec = run.spec()?;
            let axes = axes.iter().map(|a| parse_axis(a)).collect::<streamrec::Result<Vec<_>>>()?;
            let dirs = sweep(&spec, &axes)?;
            print!("{}", report(&dirs)?.to_table());
        }
        Command::Report { dirs, csv } => {
            let rep = report(&dirs)?;
            print!("{}", rep.to_table());
            if let Some(path) = csv {
                fs::write(&path, rep.to_csv()).with_context(|| format!("writing {}", path.display()))?;
            }
        }
        Command::Synth {
            out,
            users,
            items,
            interactions,
            seed,
        } => {
            let ds = generate(&SyntheticConfig::small(users, items, interactions, seed))?;
            write_ratings(&ds, &out).with_context(|| format!("writing {}", out.display()))?;
            println!("{} interactions -> {}", ds.len(), out.display());
        }
    }
    Ok(())
}
