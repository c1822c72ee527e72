use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use trident_cli::*;
use trident_core::dataset::WorldKind;

#[derive(Debug, Parser)]
#[command(name = "trident", version, about = "Route-conditioned trajectory generation pipeline")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

fn parse_xy(s: &str) -> Result<[f64; 2], String> {
    let (x, y) = s.split_once(',').ok_or_else(|| format!("expected 'x,y', got '{s}'"))?;
    let p = |v: &str| v.trim().parse::<f64>().map_err(|e| format!("'{v}': {e}"));
    let xy = [p(x)?, p(y)?];
    if xy.iter().all(|v| v.is_finite()) {
        Ok(xy)
    } else {
        Err(format!("non-finite coordinate in '{s}'"))
    }
}

#[derive(Debug, Subcommand)]
enum Cmd {
    /// Shortest route between the nodes nearest two points (graph frame, meters).
    Route {
        #[arg(long)]
        osm: PathBuf,
        #[arg(long, value_parser = parse_xy, allow_hyphen_values = true)]
        from_xy: [f64; 2],
        #[arg(long, value_parser = parse_xy, allow_hyphen_values = true)]
        to_xy: [f64; 2],
        #[arg(long)]
        out: PathBuf,
    },
    /// Render samples from pose logs and write a split dataset.
    BuildDataset {
        #[arg(long)]
        osm: PathBuf,
        /// Pose log CSV; repeat for several tracks. The file stem is the track id.
        #[arg(long, required = true)]
        poses: Vec<PathBuf>,
        /// Semantic map PGM.
        #[arg(long)]
        semantic: PathBuf,
        /// Semantic map sidecar JSON.
        #[arg(long)]
        meta: PathBuf,
        #[arg(long, default_value_t = 10)]
        horizon: usize,
        #[arg(long, default_value_t = 3.0)]
        spacing: f64,
        #[arg(long, default_value_t = 0.7)]
        split: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1)]
        stride: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model on the training split.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 12)]
        modes: usize,
        #[arg(long, default_value_t = 10)]
        epochs: usize,
        #[arg(long, default_value_t = 1e-3)]
        lr: f64,
        #[arg(long, default_value_t = 16)]
        batch: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        max_steps: Option<u64>,
        #[arg(long)]
        out_ckpt: PathBuf,
        /// Per-epoch loss log; defaults to the checkpoint path with a .loss.csv extension.
        #[arg(long)]
        loss_csv: Option<PathBuf>,
    },
    /// Score a checkpoint on the test split; writes text and JSON reports.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        /// Text report path; the JSON report goes next to it with a .json extension.
        #[arg(long)]
        report: PathBuf,
    },
    /// Plot the MAP trajectory (green) and the target (blue) over the scene.
    Generate {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        sample: PathBuf,
        #[arg(long)]
        plot: PathBuf,
    },
    /// Write a synthetic world: OSM map, pose logs and semantic raster.
    GenSynth {
        #[arg(long)]
        kind: WorldKind,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

fn run(cmd: Cmd) -> anyhow::Result<()> {
    match cmd {
        Cmd::Route { osm, from_xy, to_xy, out } => {
            let r = cmd_route(&osm, from_xy, to_xy, &out)?;
            println!("route: {} nodes, {:.3} m", r.node_ids.len(), r.total_length);
        }
        Cmd::BuildDataset {
            osm,
            poses,
            semantic,
            meta,
            horizon,
            spacing,
            split,
            seed,
            stride,
            out,
        } => {
            let m = cmd_build_dataset(&BuildArgs {
                osm,
                poses,
                semantic,
                meta,
                horizon,
                spacing,
                split,
                seed,
                stride,
                out,
            })?;
            println!("samples: {} train, {} test", m.train.len(), m.test.len());
        }
        Cmd::Train {
            data,
            modes,
            epochs,
            lr,
            batch,
            seed,
            max_steps,
            out_ckpt,
            loss_csv,
        } => {
            let loss_csv = loss_csv.unwrap_or_else(|| default_loss_csv(&out_ckpt));
            let logs = cmd_train(&TrainArgs {
                data,
                modes,
                epochs,
                lr,
                batch,
                seed,
                max_steps,
                out_ckpt,
                loss_csv,
            })?;
            if let Some(l) = logs.last() {
                println!("epoch {} step {}: loss {:.6}", l.epoch, l.step, l.loss.total);
            }
        }
        Cmd::Eval { data, ckpt, report } => print!("{}", cmd_eval(&data, &ckpt, &report)?.to_text()),
        Cmd::Generate { ckpt, sample, plot } => {
            let p = cmd_generate(&ckpt, &sample, &plot)?;
            let inside = p.generated.iter().filter(|w| w.inside).count();
            println!("plotted {inside} of {} generated waypoints", p.generated.len());
        }
        Cmd::GenSynth { kind, seed, out } => {
            let files = cmd_gen_synth(kind, seed, &out)?;
            println!("wrote {} and {} pose logs", files.osm.display(), files.poses.len());
        }
    }
    Ok(())
}

fn init_threads() -> anyhow::Result<()> {
    if let Ok(v) = std::env::var("TRIDENT_THREADS") {
        let n: usize = v
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| UsageError(format!("TRIDENT_THREADS must be a positive integer, got '{v}'")))?;
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_USAGE as u8 } else { EXIT_OK as u8 });
        }
    };
    match init_threads().and_then(|_| run(cli.cmd)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
