use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;

use commands::Failure;

/// Multi-view voxel reconstruction: data synthesis, training, evaluation
/// and analysis.
#[derive(Parser, Debug)]
#[command(name = "r2n2", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Default)]
pub struct ConfigArgs {
    /// Flat `key = value` config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one config key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate and render a synthetic dataset.
    Synth {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train a network and write a checkpoint plus a metrics log.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Dataset directory written by `synth`.
        #[arg(long)]
        data: PathBuf,
        /// Checkpoint path; the log goes to `<out>.metrics.csv`.
        #[arg(long)]
        out: PathBuf,
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Mean and median IoU and loss per view count on the test split.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_delimiter = ',')]
        views: Option<Vec<usize>>,
        #[arg(long)]
        threshold: Option<f64>,
        /// Write the CSV here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Reconstruct a voxel grid from a sequence of PGM views.
    Reconstruct {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, value_delimiter = ',', required = true)]
        images: Vec<PathBuf>,
        /// Probability grid; the thresholded grid goes to `<stem>.occupied.voxl`.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        threshold: Option<f64>,
        /// Also write the prediction after every view as `<stem>.step<t>.voxl`.
        #[arg(long)]
        per_step: bool,
    },
    /// Visual hulls of the test split from exact silhouettes.
    Carve {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        views: usize,
        /// Texture level of the renders the silhouettes come from.
        #[arg(long, default_value = "none")]
        texture: String,
        /// Directory for the hull voxel files.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Learned model against the visual hull per view count and texture.
    Compare {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_delimiter = ',')]
        views: Option<Vec<usize>>,
        #[arg(long, value_delimiter = ',')]
        textures: Option<Vec<String>>,
        /// Restrict to these shape families.
        #[arg(long, value_delimiter = ',')]
        families: Option<Vec<String>>,
        #[arg(long)]
        threshold: Option<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Export one channel of the input gate at every step as PGM mosaics.
    Gates {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, value_delimiter = ',', required = true)]
        images: Vec<PathBuf>,
        #[arg(long)]
        channel: usize,
        #[arg(long)]
        out: PathBuf,
        /// Gate to export: input, forget, update or reset.
        #[arg(long)]
        gate: Option<String>,
        /// Integer pixel upscale factor.
        #[arg(long, default_value_t = 8)]
        scale: usize,
    },
    /// Summarize a training metrics log.
    Report {
        #[arg(long)]
        metrics: PathBuf,
    },
    /// Gradient checks, cell oracles, gate invariants and locality on tiny networks.
    Selfcheck {
        #[arg(long, hide = true)]
        inject_fault: Option<String>,
    },
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Synth { cfg, out, seed } => commands::synth(&cfg, &out, seed),
        Command::Train {
            cfg,
            data,
            out,
            resume,
            seed,
        } => commands::train(&cfg, &data, &out, resume.as_deref(), seed),
        Command::Eval {
            ckpt,
            data,
            views,
            threshold,
            out,
        } => commands::eval(&ckpt, &data, views, threshold, out.as_deref()),
        Command::Reconstruct {
            ckpt,
            images,
            out,
            threshold,
            per_step,
        } => commands::reconstruct(&ckpt, &images, &out, threshold, per_step),
        Command::Carve {
            data,
            views,
            texture,
            out,
        } => commands::carve(&data, views, &texture, out.as_deref()),
        Command::Compare {
            ckpt,
            data,
            views,
            textures,
            families,
            threshold,
            out,
        } => commands::compare(&ckpt, &data, views, textures, families, threshold, out.as_deref()),
        Command::Gates {
            ckpt,
            images,
            channel,
            out,
            gate,
            scale,
        } => commands::gates(&ckpt, &images, channel, &out, gate.as_deref(), scale),
        Command::Report { metrics } => commands::report(&metrics),
        Command::Selfcheck { inject_fault } => commands::selfcheck(inject_fault.as_deref()),
    }
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
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
