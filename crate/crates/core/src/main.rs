use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use visreason::harness::{
    build_datasets, collect_plotdata, eval_set, evaluate_variant, load_model, lvip_retrieval, run_ablation, run_ablation_parallel, run_gfn,
    run_name, run_oracle, run_sft, save_model, write_csv, OracleConfig, RunConfig, RunDir, Variant,
};
use visreason::tasks::{generate_suite, serialize_dataset, Split};

#[derive(Parser)]
#[command(name = "visreason", version, about = "Synthetic visual reasoning: SFT with latent imagery, GFlowNet fine-tuning, MAP inference")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// key = value config file
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one key (repeatable)
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a puzzle dataset as JSON lines
    Gen {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        count: usize,
        #[arg(long, default_value = "train")]
        split: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Supervised training with the configured beta
    Sft {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// GFlowNet fine-tuning on top of a supervised checkpoint
    Gfn {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Evaluate a checkpoint on the configured evaluation set
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Scorer for MAP selection; defaults to the checkpoint itself
        #[arg(long)]
        scorer: Option<PathBuf>,
    },
    /// Tabular GFlowNet against an exactly enumerated posterior
    Oracle {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 20_000)]
        max_steps: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Variant-by-seed ablation matrix
    Ablate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2,3,4")]
        seeds: Vec<u64>,
        #[arg(long, value_delimiter = ',', default_value = "sft_no_lvip,sft_lvip,sft_lvip_gfn")]
        variants: Vec<String>,
        /// Run the seeds on separate threads
        #[arg(long)]
        parallel: bool,
    },
    /// Melt run metrics into long format {run, step_or_epoch, metric, value}
    Plotdata {
        #[arg(long)]
        out: PathBuf,
        #[arg(required = true)]
        runs: Vec<PathBuf>,
    },
}

/// Errors in the user's request rather than in the run.
#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(e: impl std::fmt::Display) -> anyhow::Error {
    UsageError(e.to_string()).into()
}

fn load_config(a: &ConfigArgs) -> Result<RunConfig> {
    let mut cfg = match &a.config {
        Some(p) => RunConfig::load(p).map_err(usage)?,
        None => RunConfig::default(),
    };
    cfg.apply_overrides(&a.set).map_err(usage)?;
    Ok(cfg)
}

fn report(dir: &RunDir, name: &str) {
    println!("wrote {}", dir.file(name).display());
}

fn cmd_sft(cfg: RunConfig) -> Result<()> {
    let variant = if cfg.sft.beta > 0.0 { Variant::SftLvip } else { Variant::SftNoLvip };
    let data = build_datasets(&cfg)?;
    let out = run_sft(&cfg, cfg.sft.beta, &data)?;
    let dir = RunDir::create(&cfg, &run_name("sft", variant, cfg.seed))?;
    dir.write_csv("sft_metrics.csv", &out.history)?;
    save_model(&dir, "model.ckpt", &out.model)?;
    let rep = evaluate_variant(&cfg, variant, &out.model, &out.model, &data.eval)?;
    dir.write_json("eval_report.json", &rep)?;
    let retrieval = lvip_retrieval(&out.model, &data.eval)?;
    dir.write_json("lvip_retrieval.json", &serde_json::json!({ "retrieval_accuracy": retrieval }))?;
    println!("{}", serde_json::to_string_pretty(&rep)?);
    report(&dir, "model.ckpt");
    Ok(())
}

fn cmd_gfn(cfg: RunConfig, checkpoint: &Path) -> Result<()> {
    let sft = load_model(checkpoint).with_context(|| format!("loading {}", checkpoint.display()))?;
    let data = build_datasets(&cfg)?;
    let out = run_gfn(&cfg, &sft, &data)?;
    let dir = RunDir::create(&cfg, &run_name("gfn", Variant::SftLvipGfn, cfg.seed))?;
    dir.write_csv("gfn_log.csv", &out.run.log)?;
    let skipped = out.run.log.iter().filter(|r| r.skipped).count();
    if skipped > 0 {
        eprintln!("{skipped} of {} steps accepted no candidate and were skipped", out.run.log.len());
    }
    if cfg.gfn.dump_trajectories {
        let lines: Vec<String> =
            out.run.trajectories.iter().map(serde_json::to_string).collect::<serde_json::Result<_>>()?;
        std::fs::write(dir.file("trajectories.jsonl"), lines.join("\n") + "\n")?;
    }
    save_model(&dir, "model.ckpt", &out.model)?;
    let rep = evaluate_variant(&cfg, Variant::SftLvipGfn, &out.model, &sft, &data.eval)?;
    dir.write_json("eval_report.json", &rep)?;
    println!("{}", serde_json::to_string_pretty(&rep)?);
    report(&dir, "model.ckpt");
    Ok(())
}

fn cmd_eval(cfg: RunConfig, checkpoint: &Path, scorer: Option<&Path>) -> Result<()> {
    let model = load_model(checkpoint).with_context(|| format!("loading {}", checkpoint.display()))?;
    let scorer_model = match scorer {
        Some(p) => load_model(p).with_context(|| format!("loading {}", p.display()))?,
        None => model.clone(),
    };
    let eval = eval_set(&cfg)?;
    let rep = evaluate_variant(&cfg, cfg.variant, &model, &scorer_model, &eval)?;
    let dir = RunDir::create(&cfg, &run_name("eval", cfg.variant, cfg.seed))?;
    dir.write_json("eval_report.json", &rep)?;
    println!("{}", serde_json::to_string_pretty(&rep)?);
    Ok(())
}

fn cmd_oracle(seed: u64, max_steps: usize, out: Option<PathBuf>) -> Result<()> {
    let cfg = OracleConfig { seed, max_steps, ..OracleConfig::default() };
    let o = run_oracle(&cfg)?;
    println!(
        "trajectories {} steps {} tv {:.4} target {} {}",
        o.posterior.probs.len(),
        o.steps,
        o.tv,
        cfg.tv_target,
        if o.converged { "converged" } else { "not converged" }
    );
    if let Some(p) = out {
        write_csv(&p, &o.history)?;
        println!("wrote {}", p.display());
    }
    Ok(())
}

fn cmd_ablate(cfg: RunConfig, seeds: &[u64], variants: &[String], parallel: bool) -> Result<()> {
    let variants: Vec<Variant> = variants.iter().map(|v| v.parse().map_err(usage)).collect::<Result<_>>()?;
    if seeds.is_empty() || variants.is_empty() {
        return Err(usage("need at least one seed and one variant"));
    }
    let res = if parallel {
        run_ablation_parallel(&cfg, seeds, &variants, |msg| eprintln!("{msg}"))
    } else {
        run_ablation(&cfg, seeds, &variants, |msg| eprintln!("{msg}"))
    };
    let dir = RunDir::create(&cfg, "ablation")?;
    dir.write_csv("ablation_rows.csv", &res.rows)?;
    dir.write_json("ablation_summary.json", &res)?;
    for a in &res.aggregates {
        let fmt = |x: Option<f64>| x.map_or("n/a".to_string(), |v| format!("{:.4}", v));
        println!(
            "{:<14} seeds {} mean {} std {} lvip_retrieval {}",
            a.variant.name(),
            a.n_seeds,
            fmt(a.mean),
            fmt(a.std),
            fmt(a.lvip_retrieval_mean)
        );
    }
    for o in &res.ordering {
        let verdict = match o.holds {
            Some(true) => "holds",
            Some(false) => "VIOLATED",
            None => "undetermined",
        };
        println!("{} >= {} - 1pp: {verdict}", o.better, o.worse);
    }
    for r in res.rows.iter().filter(|r| r.failure.is_some()) {
        println!("FAILED {} seed {}: {}", r.variant, r.seed, r.failure.as_deref().unwrap_or_default());
    }
    report(&dir, "ablation_summary.json");
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Gen { cfg, count, split, seed, out } => {
            let cfg = load_config(&cfg)?;
            let split = match split.as_str() {
                "train" => Split::Train,
                "eval" => Split::Eval,
                other => return Err(usage(format!("split must be train or eval, got '{other}'"))),
            };
            let recs = generate_suite(count, seed, split, &cfg.task)?;
            serialize_dataset(&recs, &out)?;
            println!("wrote {} records to {}", recs.len(), out.display());
            Ok(())
        }
        Command::Sft { cfg } => cmd_sft(load_config(&cfg)?),
        Command::Gfn { cfg, checkpoint } => cmd_gfn(load_config(&cfg)?, &checkpoint),
        Command::Eval { cfg, checkpoint, scorer } => cmd_eval(load_config(&cfg)?, &checkpoint, scorer.as_deref()),
        Command::Oracle { seed, max_steps, out } => cmd_oracle(seed, max_steps, out),
        Command::Ablate { cfg, seeds, variants, parallel } => cmd_ablate(load_config(&cfg)?, &seeds, &variants, parallel),
        Command::Plotdata { out, runs } => {
            let rows = collect_plotdata(&runs)?;
            write_csv(&out, &rows)?;
            println!("wrote {} rows to {}", rows.len(), out.display());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<UsageError>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}
