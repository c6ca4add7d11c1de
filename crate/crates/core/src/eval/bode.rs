//! Single-axis sinusoidal excitation about hover, one point per frequency.

use std::io::Write;

use rayon::prelude::*;

use crate::codec::Pose6D;
use crate::datagen::{project_toward, trajectory_seed};
use crate::sim::RunOptions;

use super::sinefit::sine_fit;
use super::{EvalError, Tracker, HOVER};

/// 0.1 Hz doubling up to 25.6 Hz.
pub fn default_frequencies() -> Vec<f64> {
    (0..9).map(|k| 0.1 * f64::from(1u32 << k)).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct BodeConfig {
    pub axis: usize,
    pub frequencies: Vec<f64>,
    pub amplitude: f64,
    pub center: Pose6D,
    pub periods: f64,
    pub min_duration: f64,
    pub transient_periods: f64,
}

impl Default for BodeConfig {
    fn default() -> Self {
        Self {
            axis: 0,
            frequencies: default_frequencies(),
            amplitude: 0.5,
            center: HOVER,
            periods: 10.0,
            min_duration: 2.0,
            transient_periods: 2.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrequencyResponsePoint {
    pub frequency: f64,
    pub magnitude_db: f64,
    pub phase_deg: f64,
    pub axis: usize,
    pub stable: bool,
}

impl FrequencyResponsePoint {
    pub const CSV_HEADER: &'static str = "axis,frequency_hz,magnitude_db,phase_deg,stable";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{:.4},{:.6},{:.6},{}",
            Pose6D::AXIS_NAMES[self.axis],
            self.frequency,
            self.magnitude_db,
            self.phase_deg,
            self.stable
        )
    }
}

pub fn write_bode_csv<W: Write>(points: &[FrequencyResponsePoint], mut w: W) -> std::io::Result<()> {
    writeln!(w, "{}", FrequencyResponsePoint::CSV_HEADER)?;
    for p in points {
        writeln!(w, "{}", p.csv_row())?;
    }
    Ok(())
}

/// Runs one excitation per frequency. Each discards `transient_periods`
/// periods, then fits reference and estimate over `max(periods, f *
/// min_duration)` periods. Phases are unwrapped across increasing frequency
/// and kept within (-360, 360].
pub fn run_bode<T: Tracker>(tracker: &T, cfg: &BodeConfig, seed: u64) -> Result<Vec<FrequencyResponsePoint>, EvalError> {
    if cfg.axis >= 6 {
        return Err(EvalError::Invalid(format!("axis {} out of range", cfg.axis)));
    }
    if cfg.frequencies.iter().any(|f| !(f.is_finite() && *f > 0.0)) || !(cfg.amplitude > 0.0) {
        return Err(EvalError::Invalid("frequencies and amplitude must be positive".into()));
    }
    let dt = tracker.dt();
    let raw: Vec<Result<FrequencyResponsePoint, EvalError>> = cfg
        .frequencies
        .par_iter()
        .enumerate()
        .map(|(i, &f)| {
            let periods = cfg.periods.max(f * cfg.min_duration);
            let transient = (cfg.transient_periods / f / dt).round() as usize;
            let measure = (periods / f / dt).round() as usize;
            let w = std::f64::consts::TAU * f;
            let reference = |k: usize| {
                let mut p = cfg.center;
                p[cfg.axis] += cfg.amplitude * (w * k as f64 * dt).sin();
                project_toward(&cfg.center, &p)
            };
            let mut r = Vec::with_capacity(measure);
            let mut e = Vec::with_capacity(measure);
            let lost = tracker.track(transient + measure, &reference, trajectory_seed(seed, i, 0), &RunOptions::default(), &mut |k, rp, ep| {
                if k >= transient {
                    r.push(rp[cfg.axis]);
                    e.push(ep[cfg.axis]);
                }
            })?;
            if lost.is_some() {
                log::warn!("bode {} Hz: loss of control", f);
                return Ok(FrequencyResponsePoint { frequency: f, magnitude_db: f64::NAN, phase_deg: f64::NAN, axis: cfg.axis, stable: false });
            }
            let fr = sine_fit(&r, f, dt);
            let fe = sine_fit(&e, f, dt);
            let magnitude_db = if fe.amplitude > 0.0 && fr.amplitude > 0.0 {
                20.0 * (fe.amplitude / fr.amplitude).log10()
            } else {
                f64::NEG_INFINITY
            };
            Ok(FrequencyResponsePoint { frequency: f, magnitude_db, phase_deg: fe.phase - fr.phase, axis: cfg.axis, stable: true })
        })
        .collect();
    let mut points = raw.into_iter().collect::<Result<Vec<_>, _>>()?;
    unwrap_phase(&mut points);
    Ok(points)
}

/// Chooses each phase branch closest to the previous stable point (in
/// frequency order), starting from the principal value, bounded to (-360, 360].
fn unwrap_phase(points: &mut [FrequencyResponsePoint]) {
    let mut order: Vec<usize> = (0..points.len()).collect();
    order.sort_by(|&a, &b| points[a].frequency.total_cmp(&points[b].frequency));
    let mut prev: Option<f64> = None;
    for i in order {
        let p = &mut points[i];
        if !p.phase_deg.is_finite() {
            continue;
        }
        let mut ph = p.phase_deg.rem_euclid(360.0);
        if ph > 180.0 {
            ph -= 360.0;
        }
        if let Some(q) = prev {
            let candidates = [ph - 360.0, ph, ph + 360.0];
            ph = candidates
                .into_iter()
                .filter(|c| *c > -360.0 && *c <= 360.0)
                .min_by(|a, b| (a - q).abs().total_cmp(&(b - q).abs()))
                .unwrap_or(ph);
        }
        p.phase_deg = ph;
        prev = Some(ph);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::IdealTracker;

    #[test]
    fn grid_has_nine_points() {
        let f = default_frequencies();
        assert_eq!(f.len(), 9);
        assert_eq!(f[0], 0.1);
        assert!((f[8] - 25.6).abs() < 1e-12);
    }

    #[test]
    fn passthrough_is_flat() {
        let cfg = BodeConfig { frequencies: vec![0.8, 3.2, 25.6], ..Default::default() };
        for axis in [0, 2, 5] {
            let pts = run_bode(&IdealTracker::default(), &BodeConfig { axis, ..cfg.clone() }, 1).unwrap();
            for p in pts {
                assert!(p.magnitude_db.abs() < 1e-9, "{p:?}");
                assert!(p.phase_deg.abs() < 1e-6, "{p:?}");
            }
        }
    }

    #[test]
    fn unwrap_keeps_lag_continuous() {
        let mk = |f: f64, ph: f64| FrequencyResponsePoint { frequency: f, magnitude_db: 0.0, phase_deg: ph, axis: 0, stable: true };
        let mut pts = vec![mk(1.0, -90.0), mk(2.0, -170.0), mk(4.0, 170.0), mk(8.0, 100.0)];
        unwrap_phase(&mut pts);
        let got: Vec<f64> = pts.iter().map(|p| p.phase_deg).collect();
        assert_eq!(got, vec![-90.0, -170.0, -190.0, -260.0]);
    }
}
