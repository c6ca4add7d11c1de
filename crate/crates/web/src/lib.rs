//! Browser demo: step response, Bode sweep and circle tracking on the
//! simulated plant. Results come back as flat `Float64Array`s.

use maglev_core::calibration::{collect_calibration_pairs, fit_calibration, parse_grid_spec, DEFAULT_FIT_GRID, DEFAULT_RIDGE};
use maglev_core::eval::{run_bode, run_circle, run_step_response, BodeConfig, CircleConfig, ControllerSetup, SimTracker, StepConfig};
use maglev_core::policy::{BiasField, ControllerSpec};
use maglev_core::sim::{SimConfig, TileLayout};
use wasm_bindgen::prelude::*;

/// Values per row of [`Demo::circle`].
pub const CIRCLE_STRIDE: usize = 5;
/// Values per row of [`Demo::bode`].
pub const BODE_STRIDE: usize = 4;
/// Values per row of [`Demo::step_response`].
pub const STEP_STRIDE: usize = 3;

#[wasm_bindgen]
pub struct Demo {
    tracker: SimTracker,
}

impl Demo {
    /// `expert`, `biased-expert` or `calibrated` (the biased expert with a
    /// map fitted on the spot).
    pub fn build(controller: &str) -> Result<Demo, String> {
        let sim = SimConfig::default();
        let biased = ControllerSetup { spec: ControllerSpec::BiasedExpert(BiasField::example()), calibration: None };
        let setup = match controller {
            "expert" => ControllerSetup::expert(),
            "biased-expert" => biased,
            "calibrated" => {
                let layout = TileLayout::standard(sim.plant.magnet_pitch);
                let grid = parse_grid_spec(DEFAULT_FIT_GRID).map_err(|e| e.to_string())?;
                let make = || biased.build(&sim, &layout).expect("expert builds");
                let pairs = collect_calibration_pairs(make, &grid, &sim, &layout, 1).map_err(|e| e.to_string())?;
                let map = fit_calibration(&pairs, DEFAULT_RIDGE).map_err(|e| e.to_string())?;
                biased.clone().with_calibration(map)
            }
            other => return Err(format!("unknown controller `{other}`")),
        };
        Ok(Demo { tracker: SimTracker::new(sim, setup) })
    }

    /// Rows of `(t, translational RMSE, rotational RMSE)` averaged over trials.
    pub fn run_step(&self, trials: usize, max_step: f64, seed: u32) -> Result<Vec<f64>, String> {
        let cfg = StepConfig { trials, max_step, post: 0.5, ..Default::default() };
        let r = run_step_response(&self.tracker, &cfg, u64::from(seed)).map_err(|e| e.to_string())?;
        Ok(r.times.iter().zip(&r.mean).flat_map(|(t, m)| [*t, m.0, m.1]).collect())
    }

    /// Rows of `(frequency, magnitude dB, phase deg, stable)`.
    pub fn run_bode(&self, axis: usize, amplitude: f64, seed: u32) -> Result<Vec<f64>, String> {
        if axis >= 6 {
            return Err(format!("axis {axis} out of range"));
        }
        let cfg = BodeConfig { axis, amplitude, ..Default::default() };
        let points = run_bode(&self.tracker, &cfg, u64::from(seed)).map_err(|e| e.to_string())?;
        Ok(points.iter().flat_map(|p| [p.frequency, p.magnitude_db, p.phase_deg, f64::from(u8::from(p.stable))]).collect())
    }

    /// Every `decimate`-th row of `(t, ref x, ref y, est x, est y)`.
    pub fn run_circle(&self, radius: f64, frequency: f64, duration: f64, decimate: usize, seed: u32) -> Result<Vec<f64>, String> {
        let cfg = CircleConfig { radius, frequency, duration, ..Default::default() };
        let r = run_circle(&self.tracker, &cfg, u64::from(seed)).map_err(|e| e.to_string())?;
        Ok(r.trace.iter().step_by(decimate.max(1)).flatten().copied().collect())
    }
}

#[wasm_bindgen]
impl Demo {
    #[wasm_bindgen(constructor)]
    pub fn new(controller: &str) -> Result<Demo, JsError> {
        Demo::build(controller).map_err(|e| JsError::new(&e))
    }

    pub fn name(&self) -> String {
        self.tracker.setup.name()
    }

    pub fn step_response(&self, trials: usize, max_step: f64, seed: u32) -> Result<Vec<f64>, JsError> {
        self.run_step(trials, max_step, seed).map_err(|e| JsError::new(&e))
    }

    pub fn bode(&self, axis: usize, amplitude: f64, seed: u32) -> Result<Vec<f64>, JsError> {
        self.run_bode(axis, amplitude, seed).map_err(|e| JsError::new(&e))
    }

    pub fn circle(&self, radius: f64, frequency: f64, duration: f64, decimate: usize, seed: u32) -> Result<Vec<f64>, JsError> {
        self.run_circle(radius, frequency, duration, decimate, seed).map_err(|e| JsError::new(&e))
    }
}
