//! `cammac`: generate dialog datasets, train and evaluate models, and analyze
//! context attention.

mod config;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use cammac::eval::{evaluate, summarize_attention, write_attention_csv, write_reports};
use cammac::scenegen::{generate_dataset, read_dataset, write_dataset, DatasetStats};
use cammac::tensor::gradcheck::check_all_ops;
use cammac::tensor::OpKind;
use cammac::trainer::{load_checkpoint, save_checkpoint, EpochMetrics, Trainer};
use cammac::{Checkpoint, Dataset};
use clap::{Args, Parser, Subcommand};

use config::{parse_grid, sidecar, usage, RunConfig, UsageError};

#[derive(Parser)]
#[command(
    name = "cammac",
    version,
    about = "Visual dialog reasoning with context-aware attention and multi-turn memory"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Args)]
struct Common {
    /// JSON run configuration; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed. Falls back to the config file, then CAMMAC_SEED, then 0.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for sharded generation and evaluation.
    #[arg(long, global = true)]
    workers: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a dialog dataset as JSONL.
    Gen {
        #[arg(long)]
        dialogs: Option<usize>,
        #[arg(long)]
        turns: Option<usize>,
        /// Grid size as HxW.
        #[arg(long)]
        grid: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Train a model and write its best-validation checkpoint.
    Train {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        val: Option<PathBuf>,
        /// One of vanilla, mtm, caa, caa+mtm, cq, cq+caa, cq+caa+mtm.
        #[arg(long)]
        model: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Metrics log; defaults to the checkpoint path plus `.log`.
        #[arg(long)]
        log: Option<PathBuf>,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        d: Option<usize>,
        #[arg(long)]
        p: Option<usize>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        patience: Option<usize>,
        #[arg(long)]
        batch_dialogs: Option<usize>,
        #[arg(long)]
        batch_turns: Option<usize>,
        #[arg(long)]
        max_steps: Option<usize>,
        #[command(flatten)]
        common: Common,
    },
    /// Write accuracy breakdown CSVs for a checkpoint on a dataset.
    Eval {
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        outdir: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Write per-dialog turn attention summaries for a context-aware checkpoint.
    AnalyzeAttn {
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Finite-difference check of every tensor op in double precision.
    Gradcheck {
        /// Corrupts the backward rule of one op; used to test the checker.
        #[arg(long, hide = true)]
        corrupt_op: Option<String>,
        #[command(flatten)]
        common: Common,
    },
}

fn merge(common: &Common) -> Result<RunConfig> {
    let mut c = RunConfig::load(common.config.as_deref())?;
    if common.seed.is_some() {
        c.seed = common.seed;
    }
    if let Some(w) = common.workers {
        c.workers = w;
    }
    Ok(c)
}

fn required<'a>(p: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path> {
    p.as_deref()
        .ok_or_else(|| usage(format!("missing --{flag}")))
}

fn set<T>(slot: &mut T, v: Option<T>) {
    if let Some(v) = v {
        *slot = v;
    }
}

fn load_data(path: &Path) -> Result<Dataset> {
    read_dataset(path).with_context(|| format!("reading dataset {}", path.display()))
}

fn print_hist(title: &str, h: &std::collections::BTreeMap<String, usize>) {
    println!("{title}:");
    for (k, v) in h {
        println!("  {k:<24} {v}");
    }
}

fn cmd_gen(cfg: &RunConfig) -> Result<()> {
    let out = required(&cfg.paths.out, "out")?;
    cfg.gen.scene.validate().map_err(|e| usage(e.to_string()))?;
    let ds = generate_dataset(&cfg.gen, cfg.seed(), cfg.dialogs, cfg.workers)?;
    write_dataset(&ds, out).with_context(|| format!("writing {}", out.display()))?;
    cfg.save(&sidecar(out))?;
    let stats = DatasetStats::of(&ds.records);
    println!(
        "wrote {} dialogs ({} questions) to {}",
        ds.records.len(),
        ds.num_questions(),
        out.display()
    );
    print_hist("templates", &stats.templates);
    print_hist("coref distance", &stats.coref_distance);
    Ok(())
}

fn cmd_train(cfg: &RunConfig) -> Result<()> {
    let train = load_data(required(&cfg.paths.data, "data")?)?;
    let val = load_data(required(&cfg.paths.val, "val")?)?;
    let out = required(&cfg.paths.out, "out")?.to_path_buf();
    let log_path = cfg.paths.log.clone().unwrap_or_else(|| {
        let mut s = out.as_os_str().to_owned();
        s.push(".log");
        PathBuf::from(s)
    });
    cfg.train.validate().map_err(|e| usage(e.to_string()))?;
    let mut trainer = match &cfg.paths.resume {
        Some(r) => {
            let ck = load_checkpoint(r).with_context(|| format!("loading {}", r.display()))?;
            let mut t = Trainer::from_checkpoint(&ck)?;
            t.reschedule(&cfg.train)?;
            t
        }
        None => Trainer::new(&train, cfg.train.clone())?,
    };
    let mut log =
        fs::File::create(&log_path).with_context(|| format!("creating {}", log_path.display()))?;
    for m in &trainer.metrics {
        writeln!(log, "{}", m.log_line())?;
    }
    cfg.save(&sidecar(&out))?;
    println!(
        "training {} ({} parameters) on {} dialogs",
        trainer.model.flags,
        trainer.params.num_scalars(),
        train.records.len()
    );
    let ck = trainer.run(&train, &val, |t: &Trainer, m: &EpochMetrics| {
        writeln!(log, "{}", m.log_line())?;
        log.flush()?;
        save_checkpoint(&t.checkpoint(), &out)?;
        println!(
            "epoch {:>3}  loss {:.4}  train acc {:.4}  val acc {:.4}",
            m.epoch, m.train_loss, m.train_acc, m.val_acc
        );
        Ok(())
    })?;
    save_checkpoint(&ck, &out).with_context(|| format!("writing {}", out.display()))?;
    match ck.epoch {
        Some(e) => println!(
            "best val acc {:.4} at epoch {e}; wrote {}",
            ck.val_acc,
            out.display()
        ),
        None => println!("no epoch completed; wrote {}", out.display()),
    }
    Ok(())
}

fn load_pair(cfg: &RunConfig) -> Result<(Checkpoint, Dataset)> {
    let path = required(&cfg.paths.ckpt, "ckpt")?;
    let ck = load_checkpoint(path).with_context(|| format!("loading {}", path.display()))?;
    let ds = load_data(required(&cfg.paths.data, "data")?)?;
    Ok((ck, ds))
}

fn cmd_eval(cfg: &RunConfig) -> Result<()> {
    let outdir = required(&cfg.paths.outdir, "outdir")?;
    let (ck, ds) = load_pair(cfg)?;
    let report = evaluate(&ck, &ds, cfg.workers)?;
    fs::create_dir_all(outdir).with_context(|| format!("creating {}", outdir.display()))?;
    write_reports(&report, outdir)?;
    cfg.save(&outdir.join("run.json"))?;
    println!(
        "accuracy {:.4} over {} questions",
        report.accuracy(),
        report.overall.total
    );
    for b in &report.family {
        println!(
            "  {:<8} {:.4} ({}/{})",
            b.key,
            b.accuracy(),
            b.correct,
            b.total
        );
    }
    Ok(())
}

fn cmd_analyze(cfg: &RunConfig) -> Result<()> {
    let out = required(&cfg.paths.out, "out")?;
    let (ck, ds) = load_pair(cfg)?;
    let summaries = summarize_attention(&ck, &ds, cfg.workers)?;
    write_attention_csv(&summaries, out).with_context(|| format!("writing {}", out.display()))?;
    cfg.save(&sidecar(out))?;
    println!(
        "wrote attention summaries for {} dialogs to {}",
        summaries.len(),
        out.display()
    );
    Ok(())
}

fn cmd_gradcheck(cfg: &RunConfig, corrupt: Option<&str>) -> Result<bool> {
    let fault = match corrupt {
        None => None,
        Some(name) => Some(OpKind::from_name(name).ok_or_else(|| {
            let names: Vec<_> = OpKind::ALL.iter().map(|k| k.name()).collect();
            usage(format!("unknown op {name:?}; ops: {}", names.join(", ")))
        })?),
    };
    let report = check_all_ops(cfg.seed(), fault)?;
    println!(
        "{:<14} {:>12}  tolerance {:e}",
        "op", "max_rel_err", report.tolerance
    );
    for r in &report.ops {
        println!(
            "{:<14} {:>12.3e}  {}",
            r.op.name(),
            r.max_rel_err,
            if r.passed { "ok" } else { "FAIL" }
        );
    }
    Ok(report.all_passed())
}

fn run(cli: Cli) -> Result<bool> {
    match cli.cmd {
        Command::Gen {
            dialogs,
            turns,
            grid,
            out,
            common,
        } => {
            let mut c = merge(&common)?;
            set(&mut c.dialogs, dialogs);
            set(&mut c.gen.dialog.turns, turns);
            if let Some(g) = grid {
                c.gen.scene.grid = parse_grid(&g)?;
            }
            if out.is_some() {
                c.paths.out = out;
            }
            cmd_gen(&c.resolve()?)?;
        }
        Command::Train {
            data,
            val,
            model,
            out,
            log,
            resume,
            lr,
            d,
            p,
            epochs,
            patience,
            batch_dialogs,
            batch_turns,
            max_steps,
            common,
        } => {
            let mut c = merge(&common)?;
            if let Some(r) = &resume {
                // The checkpoint fixes the run; flags may still extend its schedule.
                let ck = load_checkpoint(r).with_context(|| format!("loading {}", r.display()))?;
                c.train = ck.train;
                c.model = ck.model.flags.name();
                c.seed = Some(c.train.seed);
            }
            set(&mut c.model, model);
            set(&mut c.train.learning_rate, lr);
            set(&mut c.train.d, d);
            set(&mut c.train.p, p);
            set(&mut c.train.max_epochs, epochs);
            set(&mut c.train.early_stop_patience, patience);
            set(&mut c.train.batch_dialogs, batch_dialogs);
            set(&mut c.train.batch_turns, batch_turns);
            if max_steps.is_some() {
                c.train.max_steps = max_steps;
            }
            for (slot, v) in [
                (&mut c.paths.data, data),
                (&mut c.paths.val, val),
                (&mut c.paths.out, out),
                (&mut c.paths.log, log),
                (&mut c.paths.resume, resume),
            ] {
                if v.is_some() {
                    *slot = v;
                }
            }
            cmd_train(&c.resolve()?)?;
        }
        Command::Eval {
            ckpt,
            data,
            outdir,
            common,
        } => {
            let mut c = merge(&common)?;
            for (slot, v) in [
                (&mut c.paths.ckpt, ckpt),
                (&mut c.paths.data, data),
                (&mut c.paths.outdir, outdir),
            ] {
                if v.is_some() {
                    *slot = v;
                }
            }
            cmd_eval(&c.resolve()?)?;
        }
        Command::AnalyzeAttn {
            ckpt,
            data,
            out,
            common,
        } => {
            let mut c = merge(&common)?;
            for (slot, v) in [
                (&mut c.paths.ckpt, ckpt),
                (&mut c.paths.data, data),
                (&mut c.paths.out, out),
            ] {
                if v.is_some() {
                    *slot = v;
                }
            }
            cmd_analyze(&c.resolve()?)?;
        }
        Command::Gradcheck { corrupt_op, common } => {
            let c = merge(&common)?.resolve()?;
            return cmd_gradcheck(&c, corrupt_op.as_deref());
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("error: gradient check failed");
            ExitCode::from(2)
        }
        Err(e) if e.downcast_ref::<UsageError>().is_some() => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
