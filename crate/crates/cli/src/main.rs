use std::path::{Path, PathBuf};
use std::process::{Child, Command};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use flbench::harness::{list, run_to_dir, ExperimentConfig, SUMMARY_HEADER};

/// Federated-learning poisoning benchmark.
#[derive(Parser, Debug)]
#[command(name = "flbench", version, arg_required_else_help = true)]
struct Cli {
    #[arg(long)]
    list_attacks: bool,
    #[arg(long)]
    list_defenses: bool,
    #[arg(long)]
    list_algorithms: bool,
    #[command(subcommand)]
    command: Option<Cmd>,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Run one experiment.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the config's `seed`.
        #[arg(long)]
        seed: Option<u64>,
        /// Directory for rounds.jsonl and timing.jsonl. Defaults to the
        /// config's `out`, else `runs/<hash prefix>`.
        #[arg(long)]
        out: Option<PathBuf>,
        /// CSV the summary row is appended to. Defaults to `<out>/summary.csv`.
        #[arg(long)]
        summary: Option<PathBuf>,
    },
    /// Run every config matching a glob, each in its own subdirectory, with
    /// one shared summary.csv.
    Sweep {
        #[arg(long)]
        configs: String,
        #[arg(long, default_value = "runs")]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Parallel worker processes.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
}

fn print_list(kind: &str) {
    for name in list(kind).unwrap_or_default() {
        println!("{name}");
    }
}

fn load(config: &Path, seed: Option<u64>) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::from_file(config)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn run_one(config: &Path, seed: Option<u64>, out: Option<PathBuf>, summary: Option<PathBuf>) -> Result<()> {
    let cfg = load(config, seed)?;
    let dir = out
        .or_else(|| cfg.out.clone())
        .unwrap_or_else(|| PathBuf::from("runs").join(&cfg.hash()[..12]));
    let summary = summary.unwrap_or_else(|| dir.join("summary.csv"));
    let report = run_to_dir(&cfg, &dir, &summary).with_context(|| format!("running {}", config.display()))?;
    let s = &report.summary;
    println!(
        "{} {}/{}/{} acc={:.4}{} -> {}",
        &s.config_hash[..12],
        s.algorithm,
        s.attack,
        s.defense,
        s.final_acc,
        s.final_asr.map(|a| format!(" asr={a:.4}")).unwrap_or_default(),
        dir.display()
    );
    Ok(())
}

fn run_dir_name(config: &Path) -> String {
    config
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "config".into())
}

fn sweep(pattern: &str, out: &Path, seed: Option<u64>, jobs: usize) -> Result<()> {
    let mut configs: Vec<PathBuf> = glob::glob(pattern)
        .with_context(|| format!("bad glob `{pattern}`"))?
        .collect::<std::result::Result<_, _>>()?;
    configs.sort();
    if configs.is_empty() {
        bail!("no configs match `{pattern}`");
    }
    // fail fast on a bad file before any run starts
    for c in &configs {
        load(c, seed)?;
    }
    std::fs::create_dir_all(out)?;
    let summary = out.join("summary.csv");
    let exe = std::env::current_exe()?;
    let mut running: Vec<(PathBuf, Child)> = Vec::new();
    let mut failed = Vec::new();
    let mut reap = |running: &mut Vec<(PathBuf, Child)>| -> Result<()> {
        let (path, mut child) = running.remove(0);
        if !child.wait()?.success() {
            failed.push(path);
        }
        Ok(())
    };
    for c in &configs {
        if running.len() >= jobs.max(1) {
            reap(&mut running)?;
        }
        let mut cmd = Command::new(&exe);
        cmd.arg("run")
            .arg("--config")
            .arg(c)
            .arg("--out")
            .arg(out.join(run_dir_name(c)))
            .arg("--summary")
            .arg(&summary);
        if let Some(s) = seed {
            cmd.arg("--seed").arg(s.to_string());
        }
        running.push((c.clone(), cmd.spawn()?));
    }
    while !running.is_empty() {
        reap(&mut running)?;
    }
    if !failed.is_empty() {
        bail!("{} of {} runs failed: {:?}", failed.len(), configs.len(), failed);
    }
    eprintln!("{} runs, summary in {} ({SUMMARY_HEADER})", configs.len(), summary.display());
    Ok(())
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    if cli.list_attacks {
        print_list("attacks");
    }
    if cli.list_defenses {
        print_list("defenses");
    }
    if cli.list_algorithms {
        print_list("algorithms");
    }
    match cli.command {
        Some(Cmd::Run {
            config,
            seed,
            out,
            summary,
        }) => run_one(&config, seed, out, summary),
        Some(Cmd::Sweep {
            configs,
            out,
            seed,
            jobs,
        }) => sweep(&configs, &out, seed, jobs),
        None => Ok(()),
    }
}
