use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use mssm::model::TaskPrompt;
use mssm::pipeline::{
    ablate, ablation_table, evaluate, finetune, lattice, load_checkpoint, load_episodes, pretrain_manifest, rollout_dump,
    save_checkpoint, Checkpoint, RunConfig, Task, KEYS,
};
use mssm::world::{make_dataset, Manifest, Split};

#[derive(Parser)]
#[command(name = "mssm", version, about = "Occupancy world model: data, pretraining, evaluation and fine-tuning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct ConfigArgs {
    /// `key = value` config file
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set lr=1e-3` (repeatable)
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl ConfigArgs {
    fn given(&self) -> bool {
        self.config.is_some() || !self.set.is_empty()
    }

    fn resolve(&self, base: RunConfig) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p).with_context(|| format!("reading {}", p.display()))?,
            None => base,
        };
        for s in &self.set {
            cfg.apply_override(s)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Simulate episodes into a directory with a manifest
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 80)]
        episodes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Pretrain a world model on a dataset
    Pretrain {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// JSON-lines metric stream
        #[arg(long)]
        metrics: Option<PathBuf>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Score a checkpoint on a dataset split
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "val")]
        split: Split,
        /// Accept a checkpoint whose model shape differs from the config
        #[arg(long)]
        allow_mismatch: bool,
        /// Write the report as JSON here
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Dump imagined occupancy grids of one episode as JSON
    Rollout {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Index into the manifest
        #[arg(long, default_value_t = 0)]
        episode: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train a per-cell task head, from a checkpoint or from scratch
    Finetune {
        #[arg(long)]
        task: String,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ckpt: Option<PathBuf>,
        /// Prompt text to condition on instead of the task's own
        #[arg(long)]
        prompt: Option<String>,
        #[arg(long)]
        metrics: Option<PathBuf>,
        /// Save the fine-tuned model here
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        allow_mismatch: bool,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Pretrain and evaluate the component lattice and data scales
    Ablate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        seeds: Vec<u64>,
        /// Tab-separated table
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        metrics_dir: Option<PathBuf>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// List config keys
    Keys,
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

fn named_json(values: &[(String, f64)]) -> serde_json::Value {
    serde_json::Value::Object(values.iter().map(|(k, v)| (k.clone(), serde_json::json!(v))).collect())
}

/// Checkpoint plus the config it is used under: the checkpoint's own unless
/// one is given, in which case shapes must agree.
fn checkpoint_with(path: &Path, args: &ConfigArgs, allow: bool) -> Result<(Checkpoint, RunConfig)> {
    let ck = load_checkpoint(path).with_context(|| format!("loading {}", path.display()))?;
    let cfg = if args.given() { args.resolve(ck.config.clone())? } else { ck.config.clone() };
    ck.check_fingerprint(&cfg, allow)?;
    Ok((ck, cfg))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { out, episodes, seed, cfg } => {
            let cfg = cfg.resolve(RunConfig::default())?;
            let m = make_dataset(&cfg.world, episodes, seed, &out)?;
            println!(
                "wrote {} episodes ({} train, {} val) to {}",
                m.entries.len(),
                m.split(Split::Train).len(),
                m.split(Split::Val).len(),
                out.display()
            );
        }
        Command::Pretrain { data, out, metrics, cfg } => {
            let cfg = cfg.resolve(RunConfig::default())?;
            let manifest = Manifest::read(&data)?;
            let result = pretrain_manifest(&cfg, &manifest, metrics.as_deref())?;
            save_checkpoint(&result.checkpoint, &out)?;
            println!("step {}: total {:.4}; checkpoint {}", cfg.steps, result.last.total, out.display());
        }
        Command::Eval { ckpt, data, split, allow_mismatch, out, cfg } => {
            let (ck, run_cfg) = checkpoint_with(&ckpt, &cfg, allow_mismatch)?;
            let manifest = Manifest::read(&data)?;
            let episodes = load_episodes(&manifest, &manifest.split(split))?;
            let report = evaluate(&ck.model, &episodes, run_cfg.seed)?;
            let record = serde_json::json!({
                "run_id": run_cfg.run_id("eval"),
                "kind": "eval",
                "step": ck.step,
                "values": named_json(&report.named()),
            });
            println!("{record}");
            if let Some(p) = out {
                write_json(&p, &record)?;
            }
        }
        Command::Rollout { ckpt, data, episode, out, seed } => {
            let ck = load_checkpoint(&ckpt)?;
            let manifest = Manifest::read(&data)?;
            let Some(entry) = manifest.entries.get(episode) else {
                bail!("episode {episode} out of range ({} in manifest)", manifest.entries.len());
            };
            let ep = manifest.load(entry)?;
            write_json(&out, &rollout_dump(&ck.model, &ep, seed)?)?;
            println!("wrote {}", out.display());
        }
        Command::Finetune { task, data, ckpt, prompt, metrics, out, allow_mismatch, cfg } => {
            let task: Task = task.parse()?;
            let (pre, run_cfg) = match &ckpt {
                Some(p) => {
                    let (ck, c) = checkpoint_with(p, &cfg, allow_mismatch)?;
                    (Some(ck), c)
                }
                None => (None, cfg.resolve(RunConfig::default())?),
            };
            let prompt = prompt.map(|p| TaskPrompt::new(&p)).transpose()?;
            let manifest = Manifest::read(&data)?;
            let train = load_episodes(&manifest, &manifest.split(Split::Train))?;
            let val = load_episodes(&manifest, &manifest.split(Split::Val))?;
            let (model, report) =
                finetune(pre.as_ref().map(|c| &c.model), task, &run_cfg, &train, &val, prompt, metrics.as_deref())?;
            if let Some(p) = out {
                let adam = mssm::pipeline::Adam::new();
                save_checkpoint(&Checkpoint::new(run_cfg.clone(), model, adam, report.steps as u64, String::new()), &p)?;
            }
            println!(
                "{task} ({}): metric {:.4}, tp {} fp {} fn {}",
                if report.pretrained { "pretrained" } else { "scratch" },
                report.metric,
                report.scores.tp,
                report.scores.fp,
                report.scores.fn_
            );
        }
        Command::Ablate { data, seeds, out, metrics_dir, cfg } => {
            let cfg = cfg.resolve(RunConfig::default())?;
            let manifest = Manifest::read(&data)?;
            let rows = ablate(&cfg, &manifest, &lattice(), &seeds, metrics_dir.as_deref())?;
            let table = ablation_table(&rows);
            if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir)?;
            }
            fs::write(&out, &table)?;
            print!("{table}");
        }
        Command::Keys => {
            for (k, d) in KEYS {
                println!("{k:<18} {d}");
            }
        }
    }
    Ok(())
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
