//! `meduet`: one binary driving the whole pipeline. Every subcommand reads
//! the same config document, applies `--set section.key=value` overrides,
//! and stamps its output directory with the resolved config and hash so
//! mixed-config artifacts are caught instead of silently reused.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use meduet_core::Error;

mod pipeline;

#[derive(Parser)]
#[command(
    name = "meduet",
    version,
    about = "Disentangled pretraining pipeline for volumetric images"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the synthetic phantom corpus.
    Corpus(CorpusArgs),
    /// Fit the tokenizer and encode every corpus volume into the latent cache.
    Tokenize(TokenizeArgs),
    /// Pretrain the factorized backbone on cached latents.
    Pretrain(PretrainArgs),
    /// Extract per-volume content and style codes from a checkpoint.
    Codes(CodesArgs),
    /// Generate volumes under dual guidance; trains and caches the denoiser
    /// on first use.
    Sample(SampleArgs),
    /// Fine-tune a downstream head with prototype style augmentation.
    AugmentTrain(AugmentTrainArgs),
    /// Linear probes and silhouettes over the extracted codes.
    Probe(ProbeArgs),
    /// Guidance-grid consistency: content Dice and style classification
    /// rates for generated volumes.
    Sweep(SweepArgs),
    /// Kernel distribution distance between two volume sets.
    Mmd(MmdArgs),
    /// Dump codes as a JSONL embedding table with a header record.
    Export(ExportArgs),
}

/// Flags shared by every subcommand.
#[derive(Args)]
struct Common {
    /// Config file; omitted sections fall back to documented defaults.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Override one config key, e.g. --set train.lr=2e-4. Repeatable;
    /// later overrides win.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,

    /// Workspace directory; default input and output paths hang off it.
    #[arg(long, value_name = "DIR", default_value = "meduet-out")]
    root: PathBuf,

    /// Validate, print the resolved config and its hash, and exit without
    /// touching any files.
    #[arg(long)]
    dry_run: bool,

    /// Reuse an output directory stamped by a different config.
    #[arg(long)]
    force: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum Task {
    /// Per-voxel segmentation head.
    Seg,
    /// Per-volume content classification head.
    Cls,
}

#[derive(Args)]
struct CorpusArgs {
    #[command(flatten)]
    common: Common,
    /// Output directory (default <root>/corpus).
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct TokenizeArgs {
    #[command(flatten)]
    common: Common,
    /// Corpus directory or manifest path (default <root>/corpus).
    #[arg(long, value_name = "PATH")]
    corpus: Option<PathBuf>,
    /// Latent cache directory (default $MEDUET_CACHE/latents or
    /// <root>/cache/latents).
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct PretrainArgs {
    #[command(flatten)]
    common: Common,
    /// Corpus directory or manifest path (default <root>/corpus).
    #[arg(long, value_name = "PATH")]
    corpus: Option<PathBuf>,
    /// Latent cache directory (default as for tokenize --out).
    #[arg(long, value_name = "DIR")]
    latents: Option<PathBuf>,
    /// Checkpoint directory (default <root>/pretrain, plus a suffix per
    /// ablation flag).
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Drop one training signal: no_Ld, no_MFTD, no_SiQC, no_disent or
    /// no_demix. Repeatable; shorthand for --set train.ablation.<name>=true.
    #[arg(long = "ablate", value_name = "NAME")]
    ablate: Vec<String>,
    /// Continue from the checkpoint already in the output directory.
    #[arg(long)]
    resume: bool,
}

#[derive(Args)]
struct CodesArgs {
    #[command(flatten)]
    common: Common,
    /// Checkpoint directory (default <root>/pretrain).
    #[arg(long, value_name = "DIR")]
    checkpoint: Option<PathBuf>,
    /// Corpus directory or manifest path (default <root>/corpus).
    #[arg(long, value_name = "PATH")]
    corpus: Option<PathBuf>,
    /// Latent cache directory.
    #[arg(long, value_name = "DIR")]
    latents: Option<PathBuf>,
    /// Output JSONL file (default $MEDUET_CACHE/codes/codes.jsonl or
    /// <root>/cache/codes/codes.jsonl).
    #[arg(long, value_name = "FILE")]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SampleArgs {
    #[command(flatten)]
    common: Common,
    /// Denoiser directory (default <root>/denoiser, or
    /// <root>/denoiser-scratch with --no-init).
    #[arg(long, value_name = "DIR")]
    checkpoint: Option<PathBuf>,
    /// Backbone checkpoint used to warm-start a fresh denoiser
    /// (default <root>/pretrain).
    #[arg(long, value_name = "DIR")]
    backbone: Option<PathBuf>,
    /// Factor codes file (default as for codes --out).
    #[arg(long, value_name = "FILE")]
    codes: Option<PathBuf>,
    /// Corpus directory or manifest path, for sample sidecars.
    #[arg(long, value_name = "PATH")]
    corpus: Option<PathBuf>,
    /// Latent cache directory (tokenizer and training latents).
    #[arg(long, value_name = "DIR")]
    latents: Option<PathBuf>,
    /// Volume id whose content code conditions every sample
    /// (default: first code on file).
    #[arg(long, value_name = "VOL-ID")]
    content_from: Option<String>,
    /// Volume id whose style code conditions every sample
    /// (default: first code from a different domain).
    #[arg(long, value_name = "VOL-ID")]
    style_from: Option<String>,
    /// Content guidance weight; shorthand for
    /// --set diffusion.guidance.w_c=<W>.
    #[arg(long, value_name = "W")]
    wc: Option<f64>,
    /// Style guidance weight; shorthand for
    /// --set diffusion.guidance.w_s=<W>.
    #[arg(long, value_name = "W")]
    ws: Option<f64>,
    /// Number of volumes to generate.
    #[arg(long, default_value_t = 8)]
    n: usize,
    /// Train the denoiser from scratch instead of copying backbone encoder
    /// weights; shorthand for --set diffusion.warm_start=false.
    #[arg(long)]
    no_init: bool,
    /// Output directory (default <root>/samples).
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct AugmentTrainArgs {
    #[command(flatten)]
    common: Common,
    /// Checkpoint directory (default <root>/pretrain).
    #[arg(long, value_name = "DIR")]
    checkpoint: Option<PathBuf>,
    /// Corpus directory or manifest path.
    #[arg(long, value_name = "PATH")]
    corpus: Option<PathBuf>,
    /// Latent cache directory.
    #[arg(long, value_name = "DIR")]
    latents: Option<PathBuf>,
    /// Label budget: "1shot" or a fraction in (0, 1]; shorthand for
    /// --set analysis.labels=<BUDGET>.
    #[arg(long, value_name = "BUDGET")]
    labels: Option<String>,
    /// Held-out domain id; shorthand for --set analysis.target_domain=<ID>.
    #[arg(long, value_name = "ID")]
    target_domain: Option<usize>,
    /// Which head to train.
    #[arg(long, value_enum, default_value = "seg")]
    task: Task,
    /// Skip encoder inheritance; shorthand for
    /// --set analysis.from_scratch=true.
    #[arg(long)]
    from_scratch: bool,
    /// Output directory (default <root>/finetune-<task>, plus -scratch).
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ProbeArgs {
    #[command(flatten)]
    common: Common,
    /// Factor codes file.
    #[arg(long, value_name = "FILE")]
    codes: Option<PathBuf>,
    /// Output directory (default <root>/probe).
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    common: Common,
    /// Backbone checkpoint directory (default <root>/pretrain).
    #[arg(long, value_name = "DIR")]
    checkpoint: Option<PathBuf>,
    /// Segmentation head directory (default <root>/finetune-seg).
    #[arg(long, value_name = "DIR")]
    seg: Option<PathBuf>,
    /// Denoiser directory (default <root>/denoiser).
    #[arg(long, value_name = "DIR")]
    denoiser: Option<PathBuf>,
    /// Factor codes file.
    #[arg(long, value_name = "FILE")]
    codes: Option<PathBuf>,
    /// Latent cache directory.
    #[arg(long, value_name = "DIR")]
    latents: Option<PathBuf>,
    /// Output directory (default <root>/sweep).
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct MmdArgs {
    #[command(flatten)]
    common: Common,
    /// Corpus directory or manifest path, for --domain-a/--domain-b.
    #[arg(long, value_name = "PATH")]
    corpus: Option<PathBuf>,
    /// First set: every corpus volume from this domain.
    #[arg(long, value_name = "ID", conflicts_with = "dir_a")]
    domain_a: Option<usize>,
    /// Second set: every corpus volume from this domain.
    #[arg(long, value_name = "ID", conflicts_with = "dir_b")]
    domain_b: Option<usize>,
    /// First set: every volume file in this directory.
    #[arg(long, value_name = "DIR")]
    dir_a: Option<PathBuf>,
    /// Second set: every volume file in this directory.
    #[arg(long, value_name = "DIR")]
    dir_b: Option<PathBuf>,
    /// Output directory (default <root>/mmd).
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ExportArgs {
    #[command(flatten)]
    common: Common,
    /// Factor codes file.
    #[arg(long, value_name = "FILE")]
    codes: Option<PathBuf>,
    /// Output directory (default <root>/export).
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 2,
        Error::MissingPrerequisite(_) => 3,
        Error::Numerical(_) => 4,
        Error::Io(_) | Error::Json(_) => 1,
    }
}

fn main() -> ExitCode {
    // Die quietly when a downstream pipe closes, like any other filter.
    #[cfg(unix)]
    unsafe {
        libc::signal(libc::SIGPIPE, libc::SIG_DFL);
    }
    let cli = Cli::parse();
    match pipeline::run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e);
            ExitCode::from(exit_code(&e))
        }
    }
}
