//! Model-based expert controller: per-axis PID on the pose estimate, gravity
//! feed-forward, and minimum-norm current allocation over the nearest coils.

use nalgebra::{Matrix6, Vector6};

use crate::codec::{quantize_current, rad_to_phase, CoilCommand, CoilCommandFrame, Pose6D, CURRENT_LIMIT, NUM_COILS};

use super::config::{ExpertGains, PlantConfig};
use super::layout::{coil_field_angle, coil_wrench_dq, TileLayout, Wrench};

/// Torque rows are divided by this before solving so that force and torque
/// residuals are weighted comparably (N*mm vs N).
const TORQUE_SCALE: f64 = 50.0;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ExpertState {
    pub integral: [f64; 6],
    pub prev_error: [f64; 6],
    pub derivative: [f64; 6],
    pub initialized: bool,
}

#[derive(Debug, Clone)]
pub struct ExpertController {
    pub gains: ExpertGains,
    pub plant: PlantConfig,
    pub layout: TileLayout,
    pub state: ExpertState,
}

impl ExpertController {
    pub fn new(gains: ExpertGains, plant: PlantConfig, layout: TileLayout) -> Self {
        Self { gains, plant, layout, state: ExpertState::default() }
    }

    pub fn reset(&mut self) {
        self.state = ExpertState::default();
    }

    /// Wrench the expert asks for: PID accelerations scaled by nominal mass
    /// and inertia, plus gravity compensation. Updates the PID state.
    pub fn desired_wrench(&mut self, est: &Pose6D, reference: &Pose6D) -> Wrench {
        let g = &self.gains;
        let dt = self.plant.dt;
        let s = &mut self.state;
        let err = (*reference - *est).to_array();
        if !s.initialized {
            s.prev_error = err;
            s.derivative = [0.0; 6];
            s.initialized = true;
        }
        let tau = 1.0 / (std::f64::consts::TAU * g.derivative_cutoff_hz);
        let alpha = dt / (tau + dt);
        let mut acc = [0.0; 6];
        for a in 0..6 {
            let raw = (err[a] - s.prev_error[a]) / dt;
            s.derivative[a] += alpha * (raw - s.derivative[a]);
            s.prev_error[a] = err[a];
            let lim = g.integrator_limit[a];
            s.integral[a] = (s.integral[a] + err[a] * dt).clamp(-lim, lim);
            acc[a] = g.kp[a] * err[a] + g.ki[a] * s.integral[a] + g.kd[a] * s.derivative[a];
        }
        feedforward_wrench(&self.plant, &acc)
    }

    /// One control step from the pose estimate to quantized coil commands.
    pub fn act(&mut self, est: &Pose6D, reference: &Pose6D) -> CoilCommandFrame {
        let w = self.desired_wrench(est, reference);
        allocate(&self.layout, &self.plant, &self.gains, est, &w)
    }
}

/// Converts axis accelerations (mm/s^2, deg/s^2) into a wrench for the
/// nominal mover, adding the weight.
pub fn feedforward_wrench(plant: &PlantConfig, acc: &[f64; 6]) -> Wrench {
    let m = plant.mass;
    let deg = std::f64::consts::PI / 180.0;
    [
        m * acc[0] / 1000.0,
        m * acc[1] / 1000.0,
        m * (acc[2] + plant.gravity) / 1000.0,
        plant.inertia[0] * acc[3] * deg * 1000.0,
        plant.inertia[1] * acc[4] * deg * 1000.0,
        plant.inertia[2] * acc[5] * deg * 1000.0,
    ]
}

/// Minimum-norm (i_d, i_q) per coil over the `active_coils` nearest coils that
/// realizes `wrench` at `est`, commutated at the estimated field angle. Falls
/// back to damped least squares when the active set is ill-conditioned.
pub fn allocate(layout: &TileLayout, plant: &PlantConfig, gains: &ExpertGains, est: &Pose6D, wrench: &Wrench) -> CoilCommandFrame {
    let mut order = [0usize; NUM_COILS];
    layout.nearest_coils(est.x, est.y, &mut order);
    let n = gains.active_coils.min(NUM_COILS);
    let active = &order[..n];

    // columns: (d, q) per active coil, torque rows scaled
    let mut cols = [[0.0f64; 6]; 2 * NUM_COILS];
    for (j, &c) in active.iter().enumerate() {
        let coil = &layout.coils[c];
        cols[2 * j] = coil_wrench_dq(coil, est, 1.0, 0.0, plant);
        cols[2 * j + 1] = coil_wrench_dq(coil, est, 0.0, 1.0, plant);
        for col in &mut cols[2 * j..2 * j + 2] {
            for v in &mut col[3..] {
                *v /= TORQUE_SCALE;
            }
        }
    }
    let cols = &cols[..2 * n];
    let mut m = Matrix6::<f64>::zeros();
    for col in cols {
        for r in 0..6 {
            for c in 0..6 {
                m[(r, c)] += col[r] * col[c];
            }
        }
    }
    let mut w = Vector6::from_column_slice(wrench);
    for v in w.iter_mut().skip(3) {
        *v /= TORQUE_SCALE;
    }
    let lambda = solve_gram(&m, &w, gains.allocation_damping);

    let mut currents = [[0.0f64; 2]; NUM_COILS];
    let mut peak = 0.0f64;
    for (j, col) in cols.chunks(2).enumerate() {
        let d: f64 = (0..6).map(|r| col[0][r] * lambda[r]).sum();
        let q: f64 = (0..6).map(|r| col[1][r] * lambda[r]).sum();
        currents[j] = [d, q];
        peak = peak.max(d.abs()).max(q.abs());
    }
    let shrink = if peak > CURRENT_LIMIT as f64 { CURRENT_LIMIT as f64 / peak } else { 1.0 };

    let mut frame = CoilCommandFrame::off();
    for (j, &c) in active.iter().enumerate() {
        let theta = coil_field_angle(&layout.coils[c], est, plant.magnet_pitch);
        frame.coils[c] = CoilCommand {
            d: quantize_current(currents[j][0] * shrink),
            q: quantize_current(currents[j][1] * shrink),
            phi: rad_to_phase(theta),
        };
    }
    frame
}

fn solve_gram(m: &Matrix6<f64>, w: &Vector6<f64>, damping: f64) -> Vector6<f64> {
    let scale = m.trace() / 6.0;
    if let Some(ch) = m.cholesky() {
        let x = ch.solve(w);
        // reject near-singular factorizations
        let rcond = ch.l_dirty().diagonal().iter().fold(f64::INFINITY, |a, &b| a.min(b)).powi(2) / scale.max(f64::MIN_POSITIVE);
        if rcond > 1e-10 && x.iter().all(|v| v.is_finite()) {
            return x;
        }
    }
    let damped = m + Matrix6::identity() * (damping * scale.max(1e-12));
    damped.cholesky().map(|c| c.solve(w)).unwrap_or_else(Vector6::zeros)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::layout::total_wrench;

    #[test]
    fn at_rest_allocation_is_gravity_only() {
        let plant = PlantConfig::default();
        let gains = ExpertGains::default();
        let layout = TileLayout::default();
        let mut e = ExpertController::new(gains, plant.clone(), layout.clone());
        for pose in [
            Pose6D::new(0.0, 0.0, 3.0, 0.0, 0.0, 0.0),
            Pose6D::new(12.0, -25.0, 2.2, 0.3, -0.2, 3.0),
        ] {
            e.reset();
            let cmd = e.act(&pose, &pose);
            assert!(cmd.active_count() <= 16);
            assert!(cmd.within_limits());
            let w = total_wrench(&layout, &pose, &cmd.coils, &plant);
            let weight = plant.mass * plant.gravity / 1000.0;
            let want = [0.0, 0.0, weight, 0.0, 0.0, 0.0];
            for k in 0..6 {
                let tol = if k < 3 { 0.01 } else { 0.5 };
                assert!((w[k] - want[k]).abs() < tol, "{k}: {w:?}");
            }
        }
    }

    #[test]
    fn allocation_realizes_arbitrary_wrench() {
        let plant = PlantConfig::default();
        let gains = ExpertGains::default();
        let layout = TileLayout::default();
        let pose = Pose6D::new(-7.0, 4.0, 3.5, 0.1, 0.0, -1.0);
        let want = [0.5, -0.3, 8.0, 20.0, -15.0, 10.0];
        let cmd = allocate(&layout, &plant, &gains, &pose, &want);
        let w = total_wrench(&layout, &pose, &cmd.coils, &plant);
        for k in 0..6 {
            let tol = if k < 3 { 0.01 } else { 0.5 };
            assert!((w[k] - want[k]).abs() < tol, "{k}: {w:?}");
        }
    }

    #[test]
    fn raised_reference_raises_lift() {
        let plant = PlantConfig::default();
        let layout = TileLayout::default();
        let mut e = ExpertController::new(ExpertGains::default(), plant.clone(), layout.clone());
        let est = Pose6D::new(4.0, -6.0, 3.0, 0.0, 0.0, 0.0);
        let hold = total_wrench(&layout, &est, &e.act(&est, &est).coils, &plant);
        e.reset();
        let up = total_wrench(&layout, &est, &e.act(&est, &Pose6D { z: 3.5, ..est }).coils, &plant);
        assert!(up[2] > hold[2] + 0.1, "{} vs {}", up[2], hold[2]);
    }

    #[test]
    fn lift_off_settles_and_is_deterministic() {
        use crate::sim::{closed_loop_run, RunOptions, SimConfig};
        let cfg = SimConfig::default();
        let layout = TileLayout::default();
        let target = Pose6D::new(0.0, 0.0, 3.0, 0.0, 0.0, 0.0);
        let refs = vec![target; 6000];
        let opts = RunOptions { initial: Some(crate::sim::PlantState::at_rest(Pose6D::ZERO)), ..Default::default() };
        let mut e = ExpertController::new(cfg.expert.clone(), cfg.plant.clone(), layout.clone());
        let a = closed_loop_run(&cfg, &layout, &mut e, &refs, 7, &opts).unwrap();
        assert!(a.completed());
        assert!(a.records.iter().all(|r| r.command.active_count() <= 16 && r.command.within_limits()));
        let last = a.records.last().unwrap();
        assert!((last.truth.z - 3.0).abs() < 0.05, "{}", last.truth);
        let b = closed_loop_run(&cfg, &layout, &mut e, &refs, 7, &opts).unwrap();
        assert_eq!(a.records, b.records);
    }
}
