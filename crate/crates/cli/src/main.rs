use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::error::ErrorKind;
use clap::{CommandFactory, Parser, Subcommand};
use flowface::checkpoint;
use flowface::degrade::{degrade, MAX_STRENGTH};
use flowface::flow::{self, SamplerConfig};
use flowface::harness::eval::{evaluate, restore, EvalMode};
use flowface::harness::image_io::{read_image, write_image};
use flowface::harness::synth::{make_dataset, Corpus};
use flowface::harness::train::{train, write_loss_log, TrainConfig};
use flowface::parallel::Execution;

/// Most reference images a restoration accepts.
const MAX_REFS: usize = 3;

#[derive(Parser)]
#[command(name = "flowface", version, about = "Reference-aware face restoration at toy scale")]
struct Cli {
    /// Run everything on one thread.
    #[arg(long, global = true)]
    serial: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write a checkpoint plus `<out>.loss.csv`.
    Train {
        /// Key = value config file; built-in defaults when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Restore one degraded image, optionally with up to three references.
    Restore {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        deg: PathBuf,
        #[arg(long = "ref")]
        refs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = flow::DEFAULT_STEPS)]
        steps: usize,
        #[arg(long, default_value_t = flow::DEFAULT_GUIDANCE)]
        guidance: f64,
        #[arg(long, default_value_t = flow::DEFAULT_SEED)]
        seed: u64,
    },
    /// Apply the degradation chain to one image.
    Degrade {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long, value_parser = clap::value_parser!(u32).range(0..=MAX_STRENGTH as i64))]
        strength: u32,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a checkpoint on a saved corpus.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        /// with-ref or no-ref
        #[arg(long)]
        mode: EvalMode,
        /// CSV report path.
        #[arg(long)]
        report: PathBuf,
        #[arg(long, default_value_t = flow::DEFAULT_STEPS)]
        steps: usize,
        #[arg(long, default_value_t = flow::DEFAULT_GUIDANCE)]
        guidance: f64,
        #[arg(long, default_value_t = flow::DEFAULT_SEED)]
        seed: u64,
    },
    /// Write a synthetic corpus of disjoint identities.
    MakeData {
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = MAX_REFS, value_parser = clap::builder::RangedU64ValueParser::<usize>::new().range(0..=MAX_REFS as u64))]
        refs: usize,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Fixed strength for every item; sampled per item when omitted.
        #[arg(long, value_parser = clap::value_parser!(u32).range(0..=MAX_STRENGTH as i64))]
        strength: Option<u32>,
    },
}

fn loss_log_path(out: &Path) -> PathBuf {
    let mut name = out.as_os_str().to_owned();
    name.push(".loss.csv");
    PathBuf::from(name)
}

fn sampler(steps: usize, guidance: f64, seed: u64) -> SamplerConfig {
    SamplerConfig {
        steps,
        guidance_scale: guidance,
        seed,
    }
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let exec = if cli.serial { Execution::Serial } else { Execution::Parallel };
    match cli.command {
        Command::Train { config, out } => {
            let cfg = match config {
                Some(path) => TrainConfig::load(&path).with_context(|| format!("loading {}", path.display()))?,
                None => TrainConfig::default(),
            };
            let outcome = train(&cfg, exec)?;
            checkpoint::save(&outcome.model, &out)?;
            let log_path = loss_log_path(&out);
            write_loss_log(&outcome.log, BufWriter::new(File::create(&log_path)?))?;
            if let Some(last) = outcome.log.last() {
                println!("step {} total {:.5} flow {:.5}", last.step, last.total, last.l_fm);
            }
            println!("wrote {} and {}", out.display(), log_path.display());
        }
        Command::Restore { ckpt, deg, refs, out, steps, guidance, seed } => {
            if refs.len() > MAX_REFS {
                Cli::command()
                    .error(ErrorKind::TooManyValues, format!("at most {MAX_REFS} --ref images, got {}", refs.len()))
                    .exit();
            }
            let model = checkpoint::load(&ckpt)?;
            let degraded = read_image(&deg)?;
            let references = refs.iter().map(read_image).collect::<Result<Vec<_>, _>>()?;
            let restored = restore(&model, &degraded, &references, &sampler(steps, guidance, seed))?;
            write_image(&restored, &out)?;
        }
        Command::Degrade { input, strength, seed, out } => {
            write_image(&degrade(&read_image(&input)?, strength, seed)?, &out)?;
        }
        Command::Eval { ckpt, corpus, mode, report, steps, guidance, seed } => {
            let model = checkpoint::load(&ckpt)?;
            let corpus = Corpus::load(&corpus, true)?;
            let rep = evaluate(&model, &corpus, mode, &sampler(steps, guidance, seed), exec)?;
            rep.write_csv(BufWriter::new(File::create(&report)?))?;
            println!(
                "{mode}: {} scored, {} skipped, ref_cosine {:.4}, gt_cosine {:.4}, psnr {:.2}",
                rep.rows.len(),
                rep.skipped,
                rep.ref_cosine_mean,
                rep.gt_cosine_mean,
                rep.psnr_mean
            );
        }
        Command::MakeData { n, refs, seed, out, strength } => {
            make_dataset(n, refs, seed, strength)?.save(&out)?;
        }
    }
    Ok(())
}
