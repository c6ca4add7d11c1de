mod commands;
mod output;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use maglev_core::kernels::Backend;

#[derive(Parser, Debug)]
#[command(name = "maglev", version, about = "Neural 6D maglev control: latency, evaluation, data collection and calibration")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Flags shared by every subcommand.
#[derive(Args, Debug, Clone)]
pub struct Common {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Inference backend for neural controllers: scalar or vector.
    #[arg(long)]
    pub backend: Option<Backend>,
    /// NMLV controller; overrides --controller.
    #[arg(long)]
    pub model: Option<PathBuf>,
}

/// Controller selection for closed-loop commands.
#[derive(Args, Debug, Clone)]
pub struct ControllerArgs {
    /// `expert`, `biased-expert` or a path to an NMLV controller.
    #[arg(long, default_value = "expert")]
    pub controller: String,
    /// Polynomial (.txt) or MLP (.nmlv) calibration map applied to references.
    #[arg(long)]
    pub calibration: Option<PathBuf>,
    /// Plant and expert parameters as key=value lines.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Args, Debug, Clone)]
pub struct OutArgs {
    /// CSV destination; stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Times full controller steps of random GRUs (or --model).
    BenchLatency(commands::BenchLatency),
    /// Random 6-axis reference jumps; RMSE before and after the jump.
    EvalStep(commands::EvalStep),
    /// Single-axis sinusoidal sweep about hover.
    EvalBode(commands::EvalBode),
    /// Circle tracking in the xy plane.
    EvalCircle(commands::EvalCircle),
    /// Per-axis RMSE on a smooth random trajectory.
    EvalTraj(commands::EvalTraj),
    /// Payload or out-of-range pose probes.
    Probe(commands::ProbeCmd),
    /// Expert demonstrations on perturbed lift-off trajectories (NMDS).
    Collect(commands::Collect),
    /// Fits a reference correction map on a grid of hover poses.
    Calibrate(commands::Calibrate),
    /// Checks an NMLV file against reference outputs or across backends.
    InferCheck(commands::InferCheck),
    /// Closed-loop rollout to a fixed reference with a full trace.
    Simulate(commands::Simulate),
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::BenchLatency(c) => c.run(),
        Command::EvalStep(c) => c.run(),
        Command::EvalBode(c) => c.run(),
        Command::EvalCircle(c) => c.run(),
        Command::EvalTraj(c) => c.run(),
        Command::Probe(c) => c.run(),
        Command::Collect(c) => c.run(),
        Command::Calibrate(c) => c.run(),
        Command::InferCheck(c) => c.run(),
        Command::Simulate(c) => c.run(),
    };
    if let Err(e) = result {
        let mut msg = String::new();
        for cause in e.chain().map(|c| c.to_string()) {
            if !msg.contains(&cause) {
                msg = if msg.is_empty() { cause } else { format!("{msg}: {cause}") };
            }
        }
        eprintln!("error: {msg}");
        std::process::exit(1);
    }
}
