//! Evaluation benches: inference latency, step responses, frequency
//! response, circle and random-trajectory tracking, payload and pose probes.

pub mod bode;
pub mod latency;
pub mod probe;
pub mod sinefit;
pub mod step;
pub mod tracking;

use thiserror::Error;

use crate::codec::Pose6D;
use crate::runtime::RuntimeError;
use crate::sim::{closed_loop_with, LossOfControl, PolicyError, RunOptions, SimConfig, TileLayout};

pub use crate::policy::{ControllerSetup, HOVER};
pub use bode::{run_bode, BodeConfig, FrequencyResponsePoint};
pub use latency::{bench_latency, Architecture, LatencyReport};
pub use probe::{run_probe, Probe, ProbeConfig, ProbeReport};
pub use sinefit::{sine_fit, SineFit};
pub use step::{run_step_response, StepConfig, StepResponse};
pub use tracking::{run_circle, run_random_traj, CircleConfig, CircleReport, RandomTrajConfig, RandomTrajReport};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Runtime(#[from] RuntimeError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
}

/// Something that follows a reference and reports its pose estimate.
pub trait Tracker: Sync {
    fn dt(&self) -> f64;

    /// Runs `steps` control periods. `observe(k, reference, estimate)` is
    /// called once per completed step. Returns the loss-of-control event if
    /// the run was cut short.
    fn track(
        &self,
        steps: usize,
        reference: &dyn Fn(usize) -> Pose6D,
        seed: u64,
        opts: &RunOptions,
        observe: &mut dyn FnMut(usize, &Pose6D, &Pose6D),
    ) -> Result<Option<LossOfControl>, EvalError>;
}

/// A controller closed around the simulated plant.
#[derive(Debug, Clone)]
pub struct SimTracker {
    pub sim: SimConfig,
    pub layout: TileLayout,
    pub setup: ControllerSetup,
}

impl SimTracker {
    pub fn new(sim: SimConfig, setup: ControllerSetup) -> Self {
        let layout = TileLayout::standard(sim.plant.magnet_pitch);
        Self { sim, layout, setup }
    }
}

impl Tracker for SimTracker {
    fn dt(&self) -> f64 {
        self.sim.plant.dt
    }

    fn track(
        &self,
        steps: usize,
        reference: &dyn Fn(usize) -> Pose6D,
        seed: u64,
        opts: &RunOptions,
        observe: &mut dyn FnMut(usize, &Pose6D, &Pose6D),
    ) -> Result<Option<LossOfControl>, EvalError> {
        let mut policy = self.setup.build(&self.sim, &self.layout)?;
        let mut k = 0;
        let lost = closed_loop_with(&self.sim, &self.layout, &mut policy, steps, reference, seed, opts, |rec, _| {
            observe(k, &rec.reference, &rec.est);
            k += 1;
        })?;
        Ok(lost)
    }
}

/// Reports the reference as its own estimate.
#[derive(Debug, Clone, Copy)]
pub struct IdealTracker {
    pub dt: f64,
}

impl Default for IdealTracker {
    fn default() -> Self {
        Self { dt: 250e-6 }
    }
}

impl Tracker for IdealTracker {
    fn dt(&self) -> f64 {
        self.dt
    }

    fn track(
        &self,
        steps: usize,
        reference: &dyn Fn(usize) -> Pose6D,
        _seed: u64,
        _opts: &RunOptions,
        observe: &mut dyn FnMut(usize, &Pose6D, &Pose6D),
    ) -> Result<Option<LossOfControl>, EvalError> {
        for k in 0..steps {
            let r = reference(k);
            observe(k, &r, &r);
        }
        Ok(None)
    }
}

/// Sampling box for evaluation poses.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Workspace {
    pub lo: [f64; 6],
    pub hi: [f64; 6],
}

impl Default for Workspace {
    fn default() -> Self {
        Self {
            lo: [-40.0, -40.0, 2.0, -0.4, -0.4, -4.0],
            hi: [40.0, 40.0, 4.5, 0.4, 0.4, 4.0],
        }
    }
}

/// Root of the mean squared value of `v`.
pub fn rms(v: &[f64]) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    (v.iter().map(|x| x * x).sum::<f64>() / v.len() as f64).sqrt()
}

/// Pooled translational and rotational error magnitudes of one sample:
/// sqrt(mean of the three squared axis errors) for each group.
pub fn pooled_error(reference: &Pose6D, est: &Pose6D) -> (f64, f64) {
    let e = (*est - *reference).to_array();
    let t = ((e[0] * e[0] + e[1] * e[1] + e[2] * e[2]) / 3.0).sqrt();
    let r = ((e[3] * e[3] + e[4] * e[4] + e[5] * e[5]) / 3.0).sqrt();
    (t, r)
}
