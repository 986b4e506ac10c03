//! Command-line front end for the two-iteration pre-training pipeline.

use std::path::PathBuf;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand, ValueEnum};

use speech_ssl::pipeline::run::{
    cmd_analyze, cmd_decode, cmd_finetune, cmd_gen_corpus, cmd_pretrain, cmd_relabel, CorpusSplit,
};
use speech_ssl::pipeline::PipelineConfig;

#[derive(Parser)]
#[command(name = "speech-ssl", version, about = "Masked-prediction speech pre-training at desk scale")]
struct Cli {
    /// Configuration file (TOML); overrides --profile.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Built-in configuration profile.
    #[arg(long, global = true, value_enum, default_value_t = Profile::Desk)]
    profile: Profile,

    /// Accept checkpoints whose config fingerprint does not match.
    #[arg(long, global = true)]
    force: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Profile {
    Desk,
    PaperBase,
    PaperLarge,
}

#[derive(Clone, Copy, ValueEnum)]
enum Split {
    Train,
    Eval,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus directory.
    GenCorpus {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = Split::Train)]
        split: Split,
    },
    /// Pre-train one iteration of the masked-prediction model.
    Pretrain {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        iteration: u8,
        /// Iteration-1 checkpoint used to generate iteration-2 targets.
        #[arg(long)]
        prev_checkpoint: Option<PathBuf>,
        /// Precomputed label file (alternative to --prev-checkpoint).
        #[arg(long)]
        labels: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        log: Option<PathBuf>,
        /// Continue from the checkpoint already at --out.
        #[arg(long)]
        resume: bool,
        /// Stop after this step (for interrupt/resume workflows).
        #[arg(long)]
        end_step: Option<usize>,
    },
    /// Cluster a checkpoint's layer features into next-generation labels.
    Relabel {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Source layer (defaults to the configured one).
        #[arg(long)]
        layer: Option<usize>,
        #[arg(long)]
        out_labels: PathBuf,
        #[arg(long)]
        out_codebook: Option<PathBuf>,
    },
    /// CTC fine-tune a pre-trained checkpoint.
    Finetune {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Decode an evaluation corpus with greedy and LM-fused beam search.
    Decode {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        eval_corpus: PathBuf,
        /// Corpus whose transcripts train the character n-gram LM.
        #[arg(long)]
        lm_corpus: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        limit: Option<usize>,
    },
    /// Per-layer cluster-quality table for a checkpoint.
    Analyze {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        fit_corpus: PathBuf,
        #[arg(long)]
        eval_corpus: PathBuf,
        /// Output prefix; writes <prefix>.tsv and <prefix>.json.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the active configuration as TOML.
    Config,
}

fn load_config(cli: &Cli) -> anyhow::Result<PipelineConfig> {
    if let Some(path) = &cli.config {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        return Ok(PipelineConfig::from_toml(&text)?);
    }
    Ok(match cli.profile {
        Profile::Desk => PipelineConfig::desk(),
        Profile::PaperBase => PipelineConfig::paper_base(),
        Profile::PaperLarge => PipelineConfig::paper_large(),
    })
}

fn main() -> anyhow::Result<()> {
    let cli = Cli::parse();
    let cfg = load_config(&cli)?;
    match &cli.command {
        Command::GenCorpus { out, split } => {
            let split = match split {
                Split::Train => CorpusSplit::Train,
                Split::Eval => CorpusSplit::Eval,
            };
            let n = cmd_gen_corpus(&cfg, out, split)?;
            eprintln!("wrote {n} utterances to {}", out.display());
        }
        Command::Pretrain {
            corpus,
            iteration,
            prev_checkpoint,
            labels,
            out,
            log,
            resume,
            end_step,
        } => {
            if *iteration == 2 && prev_checkpoint.is_none() && labels.is_none() {
                bail!("iteration 2 needs --prev-checkpoint or --labels");
            }
            let outcome = cmd_pretrain(
                &cfg,
                corpus,
                *iteration,
                prev_checkpoint.as_deref(),
                labels.as_deref(),
                out,
                log.as_deref(),
                *resume,
                *end_step,
                cli.force,
            )?;
            for w in &outcome.warnings {
                eprintln!("warning: {w}");
            }
            eprintln!(
                "iteration {iteration} reached step {} (last raw loss {:.4}); checkpoint at {}",
                outcome.final_step,
                outcome.final_raw_loss,
                out.display()
            );
        }
        Command::Relabel {
            corpus,
            checkpoint,
            layer,
            out_labels,
            out_codebook,
        } => {
            cmd_relabel(
                &cfg,
                corpus,
                checkpoint,
                *layer,
                out_labels,
                out_codebook.as_deref(),
                cli.force,
            )?;
            eprintln!("labels written to {}", out_labels.display());
        }
        Command::Finetune {
            checkpoint,
            corpus,
            out,
            log,
        } => {
            let outcome =
                cmd_finetune(&cfg, checkpoint, corpus, out, log.as_deref(), cli.force)?;
            eprintln!(
                "fine-tuned: final loss {:.4}, {} infeasible utterances skipped; checkpoint at {}",
                outcome.final_loss,
                outcome.skipped_utterances,
                out.display()
            );
        }
        Command::Decode {
            checkpoint,
            eval_corpus,
            lm_corpus,
            out,
            limit,
        } => {
            let outcome = cmd_decode(
                &cfg,
                checkpoint,
                eval_corpus,
                lm_corpus,
                out.as_deref(),
                *limit,
                cli.force,
            )?;
            for line in &outcome.lines {
                println!("{line}");
            }
            eprintln!(
                "fused WER {:.4}, greedy WER {:.4} over {} utterances",
                outcome.fused_wer,
                outcome.greedy_wer,
                outcome.lines.len()
            );
        }
        Command::Analyze {
            checkpoint,
            fit_corpus,
            eval_corpus,
            out,
        } => {
            let rows = cmd_analyze(
                &cfg,
                checkpoint,
                fit_corpus,
                eval_corpus,
                out.as_deref(),
                cli.force,
            )?;
            print!("{}", speech_ssl::metrics::quality_table_tsv(&rows));
        }
        Command::Config => {
            print!("{}", cfg.to_toml());
        }
    }
    Ok(())
}
