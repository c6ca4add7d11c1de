//! Continuous-trajectory tracking: a small xy circle and a smooth random
//! trajectory through the workspace.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::codec::Pose6D;
use crate::datagen::{project_toward, trajectory_seed};
use crate::sim::{LossOfControl, RunOptions};

use super::{rms, EvalError, Tracker, HOVER};

#[derive(Debug, Clone, PartialEq)]
pub struct CircleConfig {
    pub radius: f64,
    pub frequency: f64,
    pub duration: f64,
    pub center: Pose6D,
}

impl Default for CircleConfig {
    fn default() -> Self {
        Self { radius: 0.1, frequency: 4.0, duration: 2.0, center: HOVER }
    }
}

impl CircleConfig {
    pub fn reference(&self, t: f64) -> Pose6D {
        let (s, c) = (std::f64::consts::TAU * self.frequency * t).sin_cos();
        Pose6D { x: self.center.x + self.radius * c, y: self.center.y + self.radius * s, ..self.center }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CircleReport {
    /// `(t, ref_x, ref_y, est_x, est_y)` per step.
    pub trace: Vec<[f64; 5]>,
    /// RMS of (distance from the circle center - radius).
    pub radial_rmse: f64,
    /// RMS of the xy distance to the instantaneous reference.
    pub tracking_rmse: f64,
    pub lost: Option<LossOfControl>,
}

impl CircleReport {
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "t,ref_x,ref_y,est_x,est_y")?;
        for r in &self.trace {
            writeln!(w, "{:.6},{:.6},{:.6},{:.6},{:.6}", r[0], r[1], r[2], r[3], r[4])?;
        }
        Ok(())
    }
}

pub fn run_circle<T: Tracker>(tracker: &T, cfg: &CircleConfig, seed: u64) -> Result<CircleReport, EvalError> {
    if !(cfg.radius >= 0.0 && cfg.frequency > 0.0 && cfg.duration > 0.0) {
        return Err(EvalError::Invalid("circle needs radius >= 0, frequency and duration > 0".into()));
    }
    let dt = tracker.dt();
    let steps = (cfg.duration / dt).round() as usize;
    let mut trace = Vec::with_capacity(steps);
    let reference = |k: usize| cfg.reference(k as f64 * dt);
    let lost = tracker.track(steps, &reference, seed, &RunOptions::default(), &mut |k, r, e| {
        trace.push([k as f64 * dt, r.x, r.y, e.x, e.y]);
    })?;
    let radial: Vec<f64> = trace
        .iter()
        .map(|t| (t[3] - cfg.center.x).hypot(t[4] - cfg.center.y) - cfg.radius)
        .collect();
    let tracking: Vec<f64> = trace.iter().map(|t| (t[3] - t[1]).hypot(t[4] - t[2])).collect();
    Ok(CircleReport { radial_rmse: rms(&radial), tracking_rmse: rms(&tracking), trace, lost })
}

#[derive(Debug, Clone, PartialEq)]
pub struct RandomTrajConfig {
    pub duration: f64,
    pub components: usize,
    pub min_frequency: f64,
    pub max_frequency: f64,
    /// Bound on the summed amplitudes, as a fraction of each axis range.
    pub amplitude_fraction: f64,
    pub center: Pose6D,
    /// Full width of the workspace per axis.
    pub range: [f64; 6],
}

impl Default for RandomTrajConfig {
    fn default() -> Self {
        Self {
            duration: 10.0,
            components: 3,
            min_frequency: 0.05,
            max_frequency: 2.0,
            amplitude_fraction: 0.25,
            center: Pose6D::new(0.0, 0.0, 3.25, 0.0, 0.0, 0.0),
            range: [80.0, 80.0, 2.5, 2.4, 2.4, 8.0],
        }
    }
}

/// Per-axis sums of sinusoids, with the geometric constraint enforced.
#[derive(Debug, Clone, PartialEq)]
pub struct RandomTrajectory {
    pub center: Pose6D,
    /// `[axis] -> (amplitude, frequency Hz, phase rad)`.
    pub terms: [Vec<(f64, f64, f64)>; 6],
}

impl RandomTrajectory {
    pub fn sample<R: Rng>(cfg: &RandomTrajConfig, rng: &mut R) -> Self {
        let terms = std::array::from_fn(|a| {
            (0..cfg.components)
                .map(|_| {
                    let cap = cfg.amplitude_fraction * cfg.range[a] / cfg.components.max(1) as f64;
                    let amp = if cap > 0.0 { rng.random_range(0.0..=cap) } else { 0.0 };
                    let f = rng.random_range(cfg.min_frequency..=cfg.max_frequency);
                    let ph = rng.random_range(0.0..std::f64::consts::TAU);
                    (amp, f, ph)
                })
                .collect()
        });
        Self { center: cfg.center, terms }
    }

    pub fn at(&self, t: f64) -> Pose6D {
        let mut p = self.center;
        for (a, terms) in self.terms.iter().enumerate() {
            for &(amp, f, ph) in terms {
                p[a] += amp * (std::f64::consts::TAU * f * t + ph).sin();
            }
        }
        project_toward(&self.center, &p)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RandomTrajReport {
    pub rmse: [f64; 6],
    pub steps: usize,
    pub lost: Option<LossOfControl>,
}

impl RandomTrajReport {
    pub const CSV_HEADER: &'static str = "controller,x,y,z,alpha,beta,gamma,completed";

    pub fn csv_row(&self, label: &str) -> String {
        let v: Vec<String> = self.rmse.iter().map(|r| format!("{r:.6}")).collect();
        format!("{label},{},{}", v.join(","), self.lost.is_none())
    }
}

pub fn run_random_traj<T: Tracker>(tracker: &T, cfg: &RandomTrajConfig, seed: u64) -> Result<RandomTrajReport, EvalError> {
    if cfg.components == 0 || !(cfg.duration > 0.0) || !(cfg.max_frequency >= cfg.min_frequency && cfg.min_frequency > 0.0) {
        return Err(EvalError::Invalid("random trajectory needs components, duration and 0 < min <= max frequency".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(trajectory_seed(seed, 0, 0));
    let traj = RandomTrajectory::sample(cfg, &mut rng);
    let dt = tracker.dt();
    let steps = (cfg.duration / dt).round() as usize;
    let mut sq = [0.0; 6];
    let mut n = 0usize;
    let reference = |k: usize| traj.at(k as f64 * dt);
    let lost = tracker.track(steps, &reference, trajectory_seed(seed, 0, 1), &RunOptions::default(), &mut |_, r, e| {
        for a in 0..6 {
            sq[a] += (e[a] - r[a]).powi(2);
        }
        n += 1;
    })?;
    let rmse = sq.map(|s| if n > 0 { (s / n as f64).sqrt() } else { 0.0 });
    Ok(RandomTrajReport { rmse, steps: n, lost })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::check_geometric_constraint;
    use crate::eval::IdealTracker;

    #[test]
    fn circle_reference_is_exact() {
        let cfg = CircleConfig::default();
        for k in 0..1000 {
            let p = cfg.reference(k as f64 * 1e-3);
            assert!(((p.x - cfg.center.x).hypot(p.y - cfg.center.y) - 0.1).abs() < 1e-15);
        }
        let r = run_circle(&IdealTracker::default(), &cfg, 0).unwrap();
        assert_eq!(r.trace.len(), 8000);
        assert!(r.radial_rmse < 1e-15 && r.tracking_rmse == 0.0);
    }

    #[test]
    fn random_traj_stays_in_bounds() {
        let cfg = RandomTrajConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            let t = RandomTrajectory::sample(&cfg, &mut rng);
            for k in 0..500 {
                let p = t.at(k as f64 * 0.02);
                assert!(check_geometric_constraint(&p));
                for a in 0..6 {
                    assert!((p[a] - cfg.center[a]).abs() <= 0.25 * cfg.range[a] + 1e-9);
                }
            }
        }
    }

    #[test]
    fn ideal_tracker_has_zero_error() {
        let cfg = RandomTrajConfig { duration: 0.5, ..Default::default() };
        let r = run_random_traj(&IdealTracker::default(), &cfg, 1).unwrap();
        assert_eq!(r.rmse, [0.0; 6]);
        assert_eq!(r.steps, 2000);
    }
}
