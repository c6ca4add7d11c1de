//! Rigid-body maglev plant: coil wrench model, Hall sensors, expert
//! controller and closed-loop rollouts.

pub mod closed_loop;
pub mod config;
pub mod expert;
pub mod layout;
pub mod sensors;

pub use closed_loop::{
    closed_loop_run, closed_loop_with, write_trace_csv, ControlPolicy, DivergenceGuard, LossOfControl, LossReason, PolicyError, RunOptions, RunResult,
    StepRecord,
};
pub use config::{ConfigError, ExpertGains, PlantConfig, SimConfig};
pub use expert::ExpertController;
pub use layout::{coil_wrench, recommutate, total_wrench, TileLayout, Wrench};
pub use sensors::{estimate_pose, hes_field, sense_hes};

use crate::codec::{CoilCommandFrame, Pose6D};

/// Pose and its rate (mm/s, deg/s).
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct PlantState {
    pub pose: Pose6D,
    pub velocity: [f64; 6],
}

impl PlantState {
    pub fn at_rest(pose: Pose6D) -> Self {
        Self { pose, velocity: [0.0; 6] }
    }
}

/// Mover on a single tile, integrated with semi-implicit Euler. The tile
/// surface is a hard floor at z = 0.
#[derive(Debug, Clone)]
pub struct Plant {
    cfg: PlantConfig,
    layout: TileLayout,
    state: PlantState,
    payload: f64,
    steps: u64,
}

impl Plant {
    pub fn new(cfg: PlantConfig, layout: TileLayout) -> Self {
        let payload = cfg.payload;
        Self { cfg, layout, state: PlantState::default(), payload, steps: 0 }
    }

    pub fn state(&self) -> &PlantState {
        &self.state
    }

    pub fn set_state(&mut self, s: PlantState) {
        self.state = s;
    }

    pub fn payload(&self) -> f64 {
        self.payload
    }

    pub fn set_payload(&mut self, kg: f64) {
        self.payload = kg.max(0.0);
    }

    pub fn config(&self) -> &PlantConfig {
        &self.cfg
    }

    pub fn layout(&self) -> &TileLayout {
        &self.layout
    }

    /// Elapsed time, counted in steps to avoid drift.
    pub fn time(&self) -> f64 {
        self.steps as f64 * self.cfg.dt
    }

    /// Acceleration (mm/s^2, deg/s^2) under `cmd` at the current state.
    pub fn acceleration(&self, cmd: &CoilCommandFrame) -> [f64; 6] {
        let c = &self.cfg;
        let w = total_wrench(&self.layout, &self.state.pose, &cmd.coils, c);
        let m = c.mass + self.payload;
        let ratio = m / c.mass;
        let v = &self.state.velocity;
        let mut a = [0.0; 6];
        for k in 0..3 {
            a[k] = w[k] * 1000.0 / m - c.linear_damping * v[k];
        }
        a[2] -= c.gravity;
        for k in 0..3 {
            let inertia = c.inertia[k] * ratio;
            a[3 + k] = (w[3 + k] / 1000.0 / inertia).to_degrees() - c.angular_damping * v[3 + k];
        }
        a
    }

    /// Advances one control period with the command held constant.
    pub fn step(&mut self, cmd: &CoilCommandFrame) {
        let a = self.acceleration(cmd);
        let dt = self.cfg.dt;
        let s = &mut self.state;
        for k in 0..6 {
            s.velocity[k] += a[k] * dt;
            s.pose[k] += s.velocity[k] * dt;
        }
        if s.pose.z < 0.0 {
            s.pose.z = 0.0;
            s.velocity[2] = s.velocity[2].max(0.0);
        }
        self.steps += 1;
    }
}
