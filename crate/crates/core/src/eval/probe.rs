//! Robustness probes: a payload added mid-hover, or a reference outside the
//! training ranges.

use std::io::Write;

use crate::codec::Pose6D;
use crate::datagen::project_toward;
use crate::sim::{LossOfControl, RunOptions};

use super::{EvalError, Tracker, HOVER};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Probe {
    /// Extra mass (kg) placed on the mover at the event time.
    Payload { kg: f64 },
    /// Reference ramped from hover to `target` starting at the event time.
    Pose { target: Pose6D },
}

impl std::fmt::Display for Probe {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Probe::Payload { kg } => write!(f, "payload {kg} kg"),
            Probe::Pose { target } => write!(f, "pose {target}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeConfig {
    pub hover: Pose6D,
    /// Time of the payload change or the start of the pose ramp (s).
    pub event: f64,
    /// Duration of the pose ramp (s).
    pub ramp: f64,
    pub duration: f64,
    /// Final window used for the steady-state deviation (s).
    pub settle_window: f64,
    /// Largest steady-state |z error| (mm) still counted as sustained hover.
    pub z_tolerance: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self { hover: HOVER, event: 0.5, ramp: 1.0, duration: 3.0, settle_window: 0.5, z_tolerance: 0.5 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeSample {
    pub t: f64,
    pub reference: Pose6D,
    pub est: Pose6D,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeReport {
    pub probe: Probe,
    pub sustained: bool,
    pub lost: Option<LossOfControl>,
    /// Mean of `est - reference` over the settle window; NaN after a loss.
    pub steady_state_deviation: Pose6D,
    pub trace: Vec<ProbeSample>,
}

impl ProbeReport {
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        let axes = Pose6D::AXIS_NAMES;
        let mut header = vec!["t".to_string()];
        for prefix in ["ref", "est"] {
            header.extend(axes.iter().map(|a| format!("{prefix}_{a}")));
        }
        writeln!(w, "{}", header.join(","))?;
        for s in &self.trace {
            write!(w, "{:.6}", s.t)?;
            for p in [&s.reference, &s.est] {
                for a in 0..6 {
                    write!(w, ",{:.6}", p[a])?;
                }
            }
            writeln!(w)?;
        }
        Ok(())
    }

    pub fn summary(&self) -> String {
        let verdict = if self.sustained { "sustained" } else { "not sustained" };
        match &self.lost {
            Some(l) => format!("{}: {verdict}, loss of control at t={:.4} s ({:?})", self.probe, l.step as f64 * self.dt(), l.reason),
            None => format!("{}: {verdict}, steady-state deviation {}", self.probe, self.steady_state_deviation),
        }
    }

    fn dt(&self) -> f64 {
        match self.trace.as_slice() {
            [a, b, ..] => b.t - a.t,
            _ => 0.0,
        }
    }
}

/// Hovers at `cfg.hover`, applies the probe at `cfg.event` and reports
/// whether hover is sustained to the end.
pub fn run_probe<T: Tracker>(tracker: &T, probe: Probe, cfg: &ProbeConfig, seed: u64) -> Result<ProbeReport, EvalError> {
    if !(cfg.duration > 0.0 && cfg.event >= 0.0 && cfg.ramp >= 0.0 && cfg.settle_window > 0.0) {
        return Err(EvalError::Invalid("probe times must be non-negative and duration positive".into()));
    }
    let dt = tracker.dt();
    let steps = (cfg.duration / dt).round() as usize;
    let event = (cfg.event / dt).round() as usize;
    let ramp = (cfg.ramp / dt).round() as usize;
    let mut opts = RunOptions::default();
    let target = match probe {
        Probe::Payload { kg } => {
            if !(kg >= 0.0 && kg.is_finite()) {
                return Err(EvalError::Invalid(format!("payload must be a non-negative mass, got {kg}")));
            }
            if kg > 0.0 {
                opts.payload_events.push((event, kg));
            }
            cfg.hover
        }
        Probe::Pose { target } => target,
    };
    let hover = cfg.hover;
    let reference = |k: usize| {
        if k < event {
            return hover;
        }
        let s = if ramp == 0 { 1.0 } else { ((k - event) as f64 / ramp as f64).min(1.0) };
        let p = hover + (target - hover).scale(s);
        project_toward(&hover, &p)
    };
    let mut trace = Vec::with_capacity(steps);
    let lost = tracker.track(steps, &reference, seed, &opts, &mut |k, r, e| {
        trace.push(ProbeSample { t: k as f64 * dt, reference: *r, est: *e });
    })?;

    let window = ((cfg.settle_window / dt).round() as usize).clamp(1, steps.max(1));
    let steady_state_deviation = if lost.is_some() || trace.len() < window {
        Pose6D::from_array([f64::NAN; 6])
    } else {
        let tail = &trace[trace.len() - window..];
        let mut acc = Pose6D::ZERO;
        for s in tail {
            acc = acc + (s.est - s.reference);
        }
        acc.scale(1.0 / window as f64)
    };
    let sustained = lost.is_none() && steady_state_deviation.z.abs() <= cfg.z_tolerance;
    Ok(ProbeReport { probe, sustained, lost, steady_state_deviation, trace })
}
