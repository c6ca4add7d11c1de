//! Closed-loop rollouts with a divergence guard.

use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::codec::{CodecError, CoilCommandFrame, HesFrame, Pose6D};
use crate::runtime::RuntimeError;

use super::config::SimConfig;
use super::expert::ExpertController;
use super::layout::TileLayout;
use super::sensors::{estimate_pose, sense_hes};
use super::{Plant, PlantState};

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error(transparent)]
    Runtime(#[from] RuntimeError),
    #[error(transparent)]
    Codec(#[from] CodecError),
}

/// Anything that maps observations and a reference to coil commands.
pub trait ControlPolicy {
    /// Whether `act` needs the Hall readings (they are skipped otherwise).
    fn uses_hes(&self) -> bool {
        false
    }
    fn reset(&mut self);
    fn act(&mut self, est: &Pose6D, hes: Option<&HesFrame>, reference: &Pose6D) -> Result<CoilCommandFrame, PolicyError>;
}

impl ControlPolicy for ExpertController {
    fn reset(&mut self) {
        ExpertController::reset(self);
    }

    fn act(&mut self, est: &Pose6D, _hes: Option<&HesFrame>, reference: &Pose6D) -> Result<CoilCommandFrame, PolicyError> {
        Ok(ExpertController::act(self, est, reference))
    }
}

impl<P: ControlPolicy + ?Sized> ControlPolicy for Box<P> {
    fn uses_hes(&self) -> bool {
        (**self).uses_hes()
    }
    fn reset(&mut self) {
        (**self).reset()
    }
    fn act(&mut self, est: &Pose6D, hes: Option<&HesFrame>, reference: &Pose6D) -> Result<CoilCommandFrame, PolicyError> {
        (**self).act(est, hes, reference)
    }
}

/// Why a rollout was stopped.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LossReason {
    Touchdown,
    OutOfBounds { axis: usize },
    NonFinite,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossOfControl {
    pub step: usize,
    pub pose: Pose6D,
    pub reason: LossReason,
}

/// Bounds beyond which the mover is considered lost.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DivergenceGuard {
    pub max_xy: f64,
    pub max_z: f64,
    pub max_tilt: f64,
    pub max_yaw: f64,
}

impl Default for DivergenceGuard {
    fn default() -> Self {
        Self { max_xy: 200.0, max_z: 22.5, max_tilt: 6.0, max_yaw: 20.0 }
    }
}

impl DivergenceGuard {
    pub fn check(&self, p: &Pose6D) -> Option<LossReason> {
        if !p.is_finite() {
            return Some(LossReason::NonFinite);
        }
        if p.z <= 0.0 {
            return Some(LossReason::Touchdown);
        }
        let limits = [self.max_xy, self.max_xy, self.max_z, self.max_tilt, self.max_tilt, self.max_yaw];
        (0..6).find(|&a| p[a].abs() > limits[a]).map(|axis| LossReason::OutOfBounds { axis })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub truth: Pose6D,
    pub est: Pose6D,
    pub reference: Pose6D,
    pub command: CoilCommandFrame,
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Start state; defaults to the first reference pose at rest.
    pub initial: Option<PlantState>,
    /// `(step, payload kg)` changes applied before the given step.
    pub payload_events: Vec<(usize, f64)>,
    pub record_hes: bool,
    pub guard: DivergenceGuard,
}

#[derive(Debug, Clone, Default)]
pub struct RunResult {
    pub records: Vec<StepRecord>,
    /// Hall frames per step, only with `record_hes`.
    pub hes: Vec<HesFrame>,
    pub lost: Option<LossOfControl>,
    pub dt: f64,
}

impl RunResult {
    pub fn time(&self, step: usize) -> f64 {
        step as f64 * self.dt
    }

    pub fn completed(&self) -> bool {
        self.lost.is_none()
    }
}

/// Runs `policy` against the plant along `reference`, one control step per
/// reference sample. Stops at the first guard violation.
pub fn closed_loop_run<P: ControlPolicy + ?Sized>(
    cfg: &SimConfig,
    layout: &TileLayout,
    policy: &mut P,
    reference: &[Pose6D],
    seed: u64,
    opts: &RunOptions,
) -> Result<RunResult, PolicyError> {
    let mut records = Vec::with_capacity(reference.len());
    let mut hes_frames = Vec::new();
    let lost = closed_loop_with(cfg, layout, policy, reference.len(), |k| reference[k], seed, opts, |rec, hes| {
        records.push(rec.clone());
        if opts.record_hes {
            if let Some(h) = hes {
                hes_frames.push(h.clone());
            }
        }
    })?;
    Ok(RunResult { records, hes: hes_frames, lost, dt: cfg.plant.dt })
}

/// Streaming form of [`closed_loop_run`]: the reference is produced on demand
/// and every step is handed to `observe` instead of being stored. Returns
/// the loss-of-control event, if any.
#[allow(clippy::too_many_arguments)]
pub fn closed_loop_with<P, R, O>(
    cfg: &SimConfig,
    layout: &TileLayout,
    policy: &mut P,
    steps: usize,
    mut reference: R,
    seed: u64,
    opts: &RunOptions,
    mut observe: O,
) -> Result<Option<LossOfControl>, PolicyError>
where
    P: ControlPolicy + ?Sized,
    R: FnMut(usize) -> Pose6D,
    O: FnMut(&StepRecord, Option<&HesFrame>),
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut plant = Plant::new(cfg.plant.clone(), layout.clone());
    let start = match opts.initial {
        Some(s) => s,
        None if steps > 0 => PlantState::at_rest(reference(0)),
        None => PlantState::default(),
    };
    plant.set_state(start);
    policy.reset();
    let want_hes = policy.uses_hes() || opts.record_hes;
    for k in 0..steps {
        let r = reference(k);
        for &(at, kg) in &opts.payload_events {
            if at == k {
                plant.set_payload(kg);
            }
        }
        let truth = plant.state().pose;
        let est = estimate_pose(&truth, &cfg.plant, &mut rng);
        let hes = if want_hes { Some(sense_hes(layout, &truth, &cfg.plant, &mut rng)) } else { None };
        let command = policy.act(&est, hes.as_ref(), &r)?;
        plant.step(&command);
        observe(&StepRecord { truth, est, reference: r, command }, hes.as_ref());
        let next = plant.state().pose;
        if let Some(reason) = opts.guard.check(&next) {
            log::debug!("loss of control at step {k}: {reason:?} {next}");
            return Ok(Some(LossOfControl { step: k, pose: next, reason }));
        }
    }
    Ok(None)
}

/// Writes a rollout as CSV: time, true pose, estimate, reference and the
/// `(d, q, phi)` triple of every coil.
pub fn write_trace_csv<W: Write>(result: &RunResult, mut w: W) -> std::io::Result<()> {
    let axes = Pose6D::AXIS_NAMES;
    let mut header = vec!["t".to_string()];
    for prefix in ["true", "est", "ref"] {
        header.extend(axes.iter().map(|a| format!("{prefix}_{a}")));
    }
    for c in 0..crate::codec::NUM_COILS {
        header.extend(["d", "q", "phi"].iter().map(|f| format!("c{c}_{f}")));
    }
    writeln!(w, "{}", header.join(","))?;
    for (k, r) in result.records.iter().enumerate() {
        write!(w, "{:.6}", result.time(k))?;
        for p in [&r.truth, &r.est, &r.reference] {
            for a in 0..6 {
                write!(w, ",{:.6}", p[a])?;
            }
        }
        for c in &r.command.coils {
            write!(w, ",{},{},{}", c.d, c.q, c.phi)?;
        }
        writeln!(w)?;
    }
    Ok(())
}
