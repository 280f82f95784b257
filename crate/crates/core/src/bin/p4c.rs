use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use p4c::harness::ablate::{ablate, write_csv, Grid};
use p4c::harness::config::TrainConfig;
use p4c::harness::corpus::{Corpus, EvalSet};
use p4c::harness::experiment;
use p4c::harness::gradcheck::{gradcheck, TOLERANCE};
use p4c::harness::probe::{finetune_encoder, probe_encoder, ProbeResult};
use p4c::harness::train::{prepare, pretrain_on, save_run};
use p4c::io;

#[derive(Parser)]
#[command(
    name = "p4c",
    version,
    about = "Contrastive point-pixel pretraining on synthetic RGB-D scenes"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Pretrain an encoder; writes checkpoint.bin, report.json, metrics.csv and corpus/.
    Pretrain {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Linear probe of a checkpoint on a saved corpus.
    Probe {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        /// Fine-tune the encoder together with the probe.
        #[arg(long)]
        finetune_encoder: bool,
        /// Config supplying probe.* and augment.image_size; defaults otherwise.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Run a grid of configurations over several seeds and write a CSV table.
    Ablate {
        #[arg(long)]
        grid: PathBuf,
        #[arg(long, default_value_t = 5)]
        seeds: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference check of the analytic gradients.
    Gradcheck {
        #[arg(long, default_value_t = 20)]
        trials: usize,
    },
    /// Fusion-ordering experiment on the default corpus.
    Demo {
        #[arg(long, default_value_t = 1)]
        seeds: usize,
    },
}

fn print_probe(name: &str, r: &ProbeResult) {
    println!("{name}: mIoU {:.4}  accuracy {:.4}", r.miou, r.accuracy);
    for (c, v) in r.iou.iter().enumerate() {
        match v {
            Some(v) => println!("  class {c}: {v:.4}"),
            None => println!("  class {c}: excluded"),
        }
    }
    if !r.absent_from_train.is_empty() {
        println!("  absent from train split: {:?}", r.absent_from_train);
    }
}

fn run(cli: Cli) -> p4c::Result<bool> {
    match cli.command {
        Command::Pretrain { config, out } => {
            let cfg = TrainConfig::load(&config)?;
            let (corpus, eval) = prepare(&cfg)?;
            let (params, report) = pretrain_on(&cfg, &corpus, &eval)?;
            save_run(&out, &params, &report, &corpus)?;
            println!("fingerprint {}", report.fingerprint);
            if let (Some(first), Some(last)) = (report.loss.first(), report.loss.last()) {
                println!("loss {first:.4} -> {last:.4}");
            }
            println!("fallbacks {}", report.fallback_total);
            if let Some(c) = report.final_collapse() {
                println!("collapse {c:.4}");
            }
            print_probe("probe", &report.probe);
            print_probe("scratch probe", &report.scratch_probe);
            if let (Some(f), Some(s)) = (&report.finetune, &report.scratch_finetune) {
                print_probe("fine-tuned", f);
                print_probe("fine-tuned from scratch", s);
            }
            println!("wall time {:.1} s", report.wall_time_s);
            Ok(true)
        }
        Command::Probe {
            checkpoint,
            corpus,
            finetune_encoder: finetune,
            config,
        } => {
            let cfg = match config {
                Some(p) => TrainConfig::load(&p)?,
                None => TrainConfig::default(),
            };
            let params = io::load_checkpoint(&checkpoint)?;
            let corpus = Corpus::load(&corpus)?;
            let eval = EvalSet::new(&corpus, cfg.corpus.image_size, params.knn_k);
            print_probe("probe", &probe_encoder(&params, &eval, &cfg.probe)?);
            if finetune {
                print_probe("fine-tuned", &finetune_encoder(&params, &eval, &cfg.probe)?);
            }
            Ok(true)
        }
        Command::Ablate { grid, seeds, out } => {
            let cells = Grid::load(&grid)?.cells()?;
            let rows = ablate(&cells, seeds)?;
            write_csv(&rows, std::fs::File::create(&out)?)?;
            let failed = rows.iter().filter(|r| r.error.is_some()).count();
            println!("{} rows written to {} ({failed} failed)", rows.len(), out.display());
            Ok(failed == 0)
        }
        Command::Gradcheck { trials } => {
            let r = gradcheck(trials)?;
            println!(
                "{} cases, {} coordinates checked, {} skipped at relu kinks, max relative error {:.3e} (tolerance {TOLERANCE:e})",
                r.cases.len(),
                r.checked(),
                r.skipped(),
                r.max_rel_err()
            );
            Ok(r.passed())
        }
        Command::Demo { seeds } => {
            let mut ok = true;
            for s in 0..seeds as u64 {
                let r = experiment::fusion_ordering(1 + s)?;
                println!(
                    "seed {}: p4contrast(hybrid) {:.4}  pointcontrast(early) {:.4}  random init {:.4}",
                    1 + s,
                    r.p4contrast,
                    r.pointcontrast,
                    r.scratch
                );
                ok &= r.p4contrast > r.pointcontrast && r.pointcontrast > r.scratch;
            }
            Ok(ok)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
