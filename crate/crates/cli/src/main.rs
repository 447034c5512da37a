use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use pseudomri_cli::commands::{self, exit_code, Input};
use pseudomri_cli::config::{Overrides, Preset, RunConfig};

/// Pseudo-MRI volumes from a single radiograph with depth-conditioned latent diffusion.
#[derive(Parser)]
#[command(name = "pseudomri", version)]
struct Cli {
    /// TOML file overlaid on the preset; any subset of keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true, value_enum)]
    preset: Option<Preset>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Slice-parallel inference workers.
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Output root; overrides PSEUDOMRI_OUT and paths.root.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
#[group(required = true, multiple = false)]
struct InputArgs {
    /// Dataset sample id.
    #[arg(long)]
    sample: Option<String>,
    /// Radiograph tensor file (.f32) or PNG.
    #[arg(long)]
    xray: Option<PathBuf>,
}

impl InputArgs {
    fn input(&self, grade: Option<usize>) -> Input {
        match (&self.sample, &self.xray) {
            (Some(id), _) => Input::Sample(id.clone()),
            (None, Some(p)) => Input::File { path: p.clone(), grade },
            (None, None) => unreachable!("clap requires one input"),
        }
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the phantom corpus and its 7:3 split.
    GenData {
        #[arg(long)]
        samples: Option<usize>,
    },
    /// Train the autoencoder, then the grade classifier.
    TrainAe {
        #[arg(long)]
        resume: bool,
    },
    /// Train the conditional denoiser with the autoencoder frozen.
    TrainDiff {
        #[arg(long)]
        resume: bool,
    },
    /// Generate a volume from one radiograph.
    Infer {
        #[command(flatten)]
        input: InputArgs,
        /// Known grade of a file input.
        #[arg(long)]
        grade: Option<usize>,
        #[arg(long)]
        slices: Option<usize>,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Score a predicted volume against the ground truth.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
    },
    /// Adjacent-slice correlation against the number of generated slices.
    InterpStudy {
        #[command(flatten)]
        input: InputArgs,
        #[arg(long)]
        grade: Option<usize>,
        /// Comma-separated slice counts.
        #[arg(long, value_delimiter = ',')]
        counts: Option<Vec<usize>>,
        #[arg(long)]
        steps: Option<usize>,
    },
}

fn run(cli: Cli) -> pseudomri::Result<()> {
    let flags = Overrides {
        preset: cli.preset,
        seed: cli.seed,
        workers: cli.workers,
        out: cli.out,
    };
    let mut cfg = RunConfig::load(cli.config.as_deref(), &flags)?;
    match &cli.cmd {
        Cmd::GenData { samples } => cfg.data.samples = samples.unwrap_or(cfg.data.samples),
        Cmd::Infer { slices, steps, .. } => {
            cfg.infer.slices = slices.unwrap_or(cfg.infer.slices);
            cfg.infer.steps = steps.unwrap_or(cfg.infer.steps);
        }
        Cmd::InterpStudy { counts, steps, .. } => {
            if let Some(c) = counts {
                cfg.interp.slice_counts = c.clone();
            }
            cfg.infer.steps = steps.unwrap_or(cfg.infer.steps);
        }
        _ => {}
    }
    cfg.validate()?;
    println!("# resolved config\n{}", cfg.to_toml());

    match cli.cmd {
        Cmd::GenData { .. } => commands::gen_data(&cfg).map(drop),
        Cmd::TrainAe { resume } => commands::train_ae(&cfg, resume).map(drop),
        Cmd::TrainDiff { resume } => commands::train_diff(&cfg, resume).map(drop),
        Cmd::Infer { input, grade, .. } => commands::infer(&cfg, &input.input(grade)).map(drop),
        Cmd::Eval { pred, gt } => commands::eval(&cfg, &pred, &gt).map(drop),
        Cmd::InterpStudy { input, grade, .. } => commands::interp_study(&cfg, &input.input(grade)).map(drop),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
