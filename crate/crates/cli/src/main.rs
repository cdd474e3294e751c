use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use semmap::pipeline::commands::{self, RunConfig};
use semmap::pipeline::PoseSource;

#[derive(Parser)]
#[command(name = "semmap", version, about = "Semantic mapping with data-associated recurrent networks")]
struct Cli {
    /// TOML run config with optional [video], [net], [train] and [map] tables.
    #[arg(long, short, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Poses {
    Gt,
    Icp,
}

impl From<Poses> for PoseSource {
    fn from(p: Poses) -> Self {
        match p {
            Poses::Gt => PoseSource::GroundTruth,
            Poses::Icp => PoseSource::Icp,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Render synthetic RGB-D videos into a dataset directory.
    Generate {
        #[arg(long)]
        out: PathBuf,
        /// Seed of the first video; video i uses seed + i.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1)]
        count: usize,
        #[arg(long)]
        frames: Option<usize>,
        #[arg(long)]
        size: Option<usize>,
    },
    /// Train a network on a dataset and write a checkpoint.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
    },
    /// Per-frame label predictions for every scene.
    Infer {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum)]
        poses: Option<Poses>,
    },
    /// Run the semantic mapping loop on every scene.
    Map {
        #[arg(long)]
        data: PathBuf,
        /// Without a checkpoint, ground-truth labels replace the network.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum)]
        poses: Option<Poses>,
        /// Write each frame's association map as assoc_YYYY.bin.
        #[arg(long)]
        dump_assoc: bool,
    },
    /// Score predictions (and fused clouds, when present) against a dataset.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        pred: PathBuf,
        /// Where to write the CSV; defaults to <pred>/metrics.csv.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Extract the labeled surface of a volume snapshot as PLY.
    Export {
        #[arg(long)]
        snapshot: PathBuf,
        #[arg(long)]
        ply: PathBuf,
    },
}

fn load_config(path: Option<&Path>) -> semmap::Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

fn run(cli: Cli) -> semmap::Result<()> {
    let mut cfg = load_config(cli.config.as_deref())?;
    match cli.command {
        Command::Generate {
            out,
            seed,
            count,
            frames,
            size,
        } => {
            if let Some(f) = frames {
                cfg.video.frames = f;
            }
            if let Some(s) = size {
                cfg.video.image_size = s;
            }
            commands::generate(&out, seed, count, &cfg.video)?;
            println!("wrote {count} videos to {}", out.display());
        }
        Command::Train {
            data,
            out,
            seed,
            epochs,
            lr,
        } => {
            if let Some(s) = seed {
                cfg.train.seed = s;
            }
            if let Some(e) = epochs {
                cfg.train.epochs = e;
            }
            if let Some(l) = lr {
                cfg.train.lr = l;
            }
            cfg.train.validate()?;
            let s = commands::train(&data, &cfg.net, &cfg.train, &out)?;
            println!(
                "{} steps, loss {:.4} -> {:.4}, checkpoint {}",
                s.steps,
                s.first_loss,
                s.last_loss,
                out.display()
            );
        }
        Command::Infer {
            data,
            checkpoint,
            out,
            poses,
        } => {
            if let Some(p) = poses {
                cfg.map.poses = p.into();
            }
            commands::infer(&data, &checkpoint, &cfg.net, &cfg.map, &out)?;
            println!("predictions in {}", out.display());
        }
        Command::Map {
            data,
            checkpoint,
            out,
            poses,
            dump_assoc,
        } => {
            if let Some(p) = poses {
                cfg.map.poses = p.into();
            }
            let s = commands::map(&data, checkpoint.as_deref(), &cfg.net, &cfg.map, &out, dump_assoc)?;
            println!(
                "{} scenes, {} surface points, {} lost frames, {:.1} frames/s",
                s.scenes, s.points, s.lost_frames, s.frames_per_second
            );
        }
        Command::Eval { data, pred, csv } => {
            let report = commands::eval(&data, &pred)?;
            let csv = csv.unwrap_or_else(|| pred.join("metrics.csv"));
            print!("{}", commands::write_report(&report, &csv)?);
        }
        Command::Export { snapshot, ply } => {
            let n = commands::export(&snapshot, &ply)?;
            println!("{n} points written to {}", ply.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
