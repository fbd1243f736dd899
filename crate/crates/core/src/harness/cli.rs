//! `autolr` command line.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::Rng;

use super::config::ExperimentConfig;
use super::episode::Task;
use super::meta::{train_controller, EpisodeSummary};
use super::metrics::{
    comparison_table, emit_metrics, emit_summary, read_json, read_summary, summary_table, write_json, write_text,
};
use super::protocol::{evaluate_controller, evaluate_schedule, grid_search, run_baseline_protocol};
use super::{io_err, HarnessError, Result};
use crate::controller::{load_checkpoint, save_checkpoint, ControllerPolicy};
use crate::data::{encode_idx_images, encode_idx_labels, CIFAR_CLASSES, CIFAR_RECORD_LEN};
use crate::schedules::StepDecaySchedule;
use crate::seeds::{self, Purpose, SeedLadder};

/// Overrides the output directory when `--out` is not given.
pub const OUT_DIR_ENV: &str = "AUTOLR_OUT_DIR";
pub const DEFAULT_OUT_DIR: &str = "runs";

#[derive(Debug, Parser)]
#[command(name = "autolr", version, about = "Meta-learned learning-rate controller experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// TOML experiment config; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Top-level seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory (else $AUTOLR_OUT_DIR, else the config, else ./runs).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Dataset URI: synth://seed/n/d/k/noise, idx://images,labels or cifar://file[,file...]
    #[arg(long)]
    pub dataset: Option<String>,
    #[arg(long)]
    pub total_steps: Option<u64>,
    /// Evaluation seeds per method.
    #[arg(long)]
    pub runs: Option<u64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Meta-train a controller with PPO.
    MetaTrain {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        episodes: Option<u64>,
    },
    /// Evaluate a controller checkpoint (frozen, greedy) over the evaluation seeds.
    EvalController {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Continue meta-training for this many episodes before evaluating.
        #[arg(long)]
        train_further: Option<u64>,
    },
    /// Grid-search the step-decay baseline and evaluate the winner.
    BaselineGrid {
        #[command(flatten)]
        common: Common,
    },
    /// Evaluate a source-task controller and baseline schedule on a target task.
    Transfer {
        #[command(flatten)]
        common: Common,
        /// Controller checkpoint; meta-trained on the source task when absent.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Schedule JSON from `baseline-grid`; grid-searched on the source task when absent.
        #[arg(long)]
        schedule: Option<PathBuf>,
        /// Target dataset URI.
        #[arg(long)]
        target: Option<String>,
        #[arg(long)]
        episodes: Option<u64>,
    },
    /// t-test two summary files.
    Compare {
        a: PathBuf,
        b: PathBuf,
        /// Also write the table here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write small IDX/CIFAR parser fixtures and a default config.
    EmitFixtures {
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

struct Resolved {
    cfg: ExperimentConfig,
    out: PathBuf,
}

fn out_dir(flag: Option<&Path>, cfg_dir: Option<&str>) -> PathBuf {
    if let Some(p) = flag {
        return p.to_path_buf();
    }
    if let Some(env) = std::env::var_os(OUT_DIR_ENV).filter(|v| !v.is_empty()) {
        return PathBuf::from(env);
    }
    PathBuf::from(cfg_dir.unwrap_or(DEFAULT_OUT_DIR))
}

fn resolve(c: &Common) -> Result<Resolved> {
    let mut cfg = match &c.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    if let Some(d) = &c.dataset {
        cfg.episode.dataset = d.clone();
    }
    if let Some(t) = c.total_steps {
        cfg.episode.total_steps = t;
    }
    if let Some(r) = c.runs {
        cfg.runs = r;
    }
    cfg.validate()?;
    let out = out_dir(c.out.as_deref(), cfg.out_dir.as_deref());
    std::fs::create_dir_all(&out).map_err(io_err(&out))?;
    write_text(&cfg.to_toml(), &out.join("config.toml"))?;
    Ok(Resolved { cfg, out })
}

fn print_episode(s: &EpisodeSummary) {
    println!(
        "episode {:>4}  reward {:>10.4}  best val {:.5}  final lr {:.3e}  std {:.4}{}",
        s.episode,
        s.total_reward,
        s.best_val_loss,
        s.final_lr,
        s.policy_std,
        if s.diverged { "  diverged" } else { "" }
    );
}

fn meta_train(r: &Resolved, ladder: &SeedLadder, task: &Task, run_id: &str) -> Result<ControllerPolicy> {
    let meta = r.cfg.meta();
    let policy = ControllerPolicy::new(ladder.seed(Purpose::PolicyInit, 0));
    let outcome = train_controller(
        policy,
        task,
        &meta,
        ladder,
        run_id,
        Some(&r.out.join("checkpoints")),
        print_episode,
    )?;
    emit_metrics(&outcome.records, &r.out.join("metrics.jsonl"))?;
    write_json(&outcome.episodes, &r.out.join("episodes.json"))?;
    save_checkpoint(&outcome.policy, &meta.ppo, &r.out.join("controller.json"))?;
    Ok(outcome.policy)
}

pub fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::MetaTrain { common, episodes } => {
            let mut r = resolve(&common)?;
            if let Some(e) = episodes {
                r.cfg.episodes = e;
            }
            let ladder = SeedLadder::new(r.cfg.seed);
            let task = Task::load(&r.cfg.episode, &ladder)?;
            meta_train(&r, &ladder, &task, "meta")?;
            println!("wrote {}", r.out.display());
        }
        Command::EvalController {
            common,
            checkpoint,
            train_further,
        } => {
            let r = resolve(&common)?;
            let (mut policy, ppo) = load_checkpoint(&checkpoint)?;
            let ladder = SeedLadder::new(r.cfg.seed);
            let task = Task::load(&r.cfg.episode, &ladder)?;
            if let Some(episodes) = train_further {
                let meta = super::config::MetaConfig {
                    episodes,
                    ppo,
                    ..r.cfg.meta()
                };
                let out = train_controller(policy, &task, &meta, &ladder, "further", None, print_episode)?;
                emit_metrics(&out.records, &r.out.join("further_metrics.jsonl"))?;
                save_checkpoint(&out.policy, &ppo, &r.out.join("controller_further.json"))?;
                policy = out.policy;
            }
            let (summary, records) =
                evaluate_controller(&policy, &task, &r.cfg.episode, &ppo, &ladder, r.cfg.runs, "controller")?;
            emit_metrics(&records, &r.out.join("eval_metrics.jsonl"))?;
            emit_summary(&summary, &r.out.join("controller_summary.json"))?;
            let table = summary_table(&[&summary]);
            write_text(&table, &r.out.join("controller_summary.txt"))?;
            print!("{table}");
        }
        Command::BaselineGrid { common } => {
            let r = resolve(&common)?;
            let ladder = SeedLadder::new(r.cfg.seed);
            let task = Task::load(&r.cfg.episode, &ladder)?;
            let b = run_baseline_protocol(&r.cfg.grid(), &task, &r.cfg.episode, &r.cfg.ppo, &ladder, r.cfg.runs)?;
            write_json(&b.search, &r.out.join("grid.json"))?;
            write_json(&b.search.best, &r.out.join("best_schedule.json"))?;
            emit_metrics(&b.records, &r.out.join("baseline_metrics.jsonl"))?;
            emit_summary(&b.summary, &r.out.join("baseline_summary.json"))?;
            let table = summary_table(&[&b.summary]);
            write_text(&table, &r.out.join("baseline_summary.txt"))?;
            println!("best schedule {:?} ({} episodes run)", b.search.best, b.episodes_run);
            print!("{table}");
        }
        Command::Transfer {
            common,
            checkpoint,
            schedule,
            target,
            episodes,
        } => {
            let mut r = resolve(&common)?;
            if let Some(e) = episodes {
                r.cfg.episodes = e;
            }
            if let Some(t) = target {
                r.cfg.transfer_dataset = t;
                r.cfg.validate()?;
            }
            let ladder = SeedLadder::new(r.cfg.seed);
            let (policy, ppo) = match checkpoint {
                Some(p) => load_checkpoint(&p)?,
                None => {
                    let source = Task::load(&r.cfg.episode, &ladder)?;
                    (meta_train(&r, &ladder, &source, "meta")?, r.cfg.ppo)
                }
            };
            let schedule: StepDecaySchedule = match schedule {
                Some(p) => read_json(&p)?,
                None => {
                    let source = Task::load(&r.cfg.episode, &ladder)?;
                    let search = grid_search(&r.cfg.grid(), &source, &r.cfg.episode, &r.cfg.ppo, &ladder)?;
                    write_json(&search, &r.out.join("grid.json"))?;
                    search.best
                }
            };
            let target_cfg = r.cfg.transfer_episode();
            let task = Task::load(&target_cfg, &ladder)?;
            let before = policy.clone();
            let (cs, crec) = evaluate_controller(&policy, &task, &target_cfg, &ppo, &ladder, r.cfg.runs, "controller")?;
            if policy != before {
                return Err(HarnessError::Config("frozen controller was modified".into()));
            }
            let (bs, brec) = evaluate_schedule(schedule, &task, &target_cfg, &ppo, &ladder, r.cfg.runs, "baseline")?;
            emit_metrics(&crec, &r.out.join("transfer_controller_metrics.jsonl"))?;
            emit_metrics(&brec, &r.out.join("transfer_baseline_metrics.jsonl"))?;
            emit_summary(&cs, &r.out.join("transfer_controller_summary.json"))?;
            emit_summary(&bs, &r.out.join("transfer_baseline_summary.json"))?;
            let table = comparison_table(&cs, &bs)?;
            write_text(&table, &r.out.join("transfer_comparison.txt"))?;
            print!("{table}");
        }
        Command::Compare { a, b, out } => {
            let table = comparison_table(&read_summary(&a)?, &read_summary(&b)?)?;
            if let Some(p) = out {
                write_text(&table, &p)?;
            }
            print!("{table}");
        }
        Command::EmitFixtures { out, seed } => {
            let dir = out_dir(out.as_deref(), None).join("fixtures");
            std::fs::create_dir_all(&dir).map_err(io_err(&dir))?;
            emit_fixtures(&dir, seed)?;
            println!("wrote {}", dir.display());
        }
    }
    Ok(())
}

/// Writes `images.idx`, `labels.idx`, `cifar.bin` and `config.toml` into `dir`.
pub fn emit_fixtures(dir: &Path, seed: u64) -> Result<()> {
    let mut rng = seeds::rng(seed);
    let (n, rows, cols) = (12, 6, 5);
    let pixels: Vec<u8> = (0..n * rows * cols).map(|_| rng.random()).collect();
    let labels: Vec<u8> = (0..n).map(|i| (i % 4) as u8).collect();
    let write = |name: &str, bytes: &[u8]| {
        let p = dir.join(name);
        std::fs::write(&p, bytes).map_err(io_err(p))
    };
    write("images.idx", &encode_idx_images(n, rows, cols, &pixels))?;
    write("labels.idx", &encode_idx_labels(&labels))?;
    let mut cifar = Vec::with_capacity(3 * CIFAR_RECORD_LEN);
    for i in 0..3 {
        cifar.push((i * 3 % CIFAR_CLASSES) as u8);
        cifar.extend((1..CIFAR_RECORD_LEN).map(|_| rng.random::<u8>()));
    }
    write("cifar.bin", &cifar)?;
    write_text(&ExperimentConfig::default().to_toml(), &dir.join("config.toml"))
}
