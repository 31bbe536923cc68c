use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use markerless_calib::harness::{self, HarnessError};

#[derive(Parser)]
#[command(name = "calib", version, about = "Markerless camera-to-robot calibration")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate the configured motion budget and dump trajectories as JSON Lines.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Defaults to the first seed of the config.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run the calibration loop live, or over a trajectory dump.
    Calibrate {
        /// Run config holding the scene (robot, camera, optional ground truth).
        #[arg(long)]
        scene: PathBuf,
        /// Replay these trajectories instead of simulating.
        #[arg(long)]
        trajectories: Option<PathBuf>,
        #[arg(long)]
        report: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Errors against accepted-motion count for every pose and seed.
    Benchmark {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Worker threads; 0 uses every core.
        #[arg(long, default_value_t = 0)]
        jobs: usize,
    },
}

fn fail(e: HarnessError) -> ExitCode {
    eprintln!("error: {e}");
    ExitCode::from(e.exit_code() as u8)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.command {
        Command::Simulate { config, out, seed } => match harness::cmd_simulate(&config, &out, seed) {
            Ok(n) => {
                println!("wrote {n} trajectories to {}", out.display());
                ExitCode::SUCCESS
            }
            Err(e) => fail(e),
        },
        Command::Calibrate {
            scene,
            trajectories,
            report,
            seed,
        } => match harness::cmd_calibrate(&scene, trajectories.as_deref(), &report, seed) {
            Ok(rep) => {
                let code = rep.exit_code();
                match &rep.estimate {
                    Some(t) => {
                        println!("status: {} after {} motions", rep.status, rep.motions_executed);
                        for row in &t.rotation {
                            println!("  [{:>12.8} {:>12.8} {:>12.8}]", row[0], row[1], row[2]);
                        }
                        let [x, y, z] = t.translation;
                        println!("  t = [{x:.6}, {y:.6}, {z:.6}]");
                        if let Some(err) = &rep.error {
                            println!(
                                "  error: {:.3e} rad, {:.3e} m",
                                err.rotation_error, err.translation_error
                            );
                        }
                    }
                    None => {
                        eprintln!("no estimate: too few usable observations");
                        for line in rep.rejection_summary() {
                            eprintln!("  {line}");
                        }
                    }
                }
                ExitCode::from(code as u8)
            }
            Err(e) => fail(e),
        },
        Command::Benchmark { config, out, jobs } => match harness::cmd_benchmark(&config, &out, jobs) {
            Ok(res) => {
                println!(
                    "{:>8} {:>6} {:>14} {:>14}",
                    "motions", "runs", "rot_err_rad", "trans_err_m"
                );
                for m in &res.medians {
                    let f = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.3e}"));
                    println!(
                        "{:>8} {:>6} {:>14} {:>14}",
                        m.motions,
                        m.runs,
                        f(m.median_rot_err_rad),
                        f(m.median_trans_err_m)
                    );
                }
                ExitCode::SUCCESS
            }
            Err(e) => fail(e),
        },
    }
}
