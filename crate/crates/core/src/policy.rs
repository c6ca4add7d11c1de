//! Controllers that plug into the closed loop: the neural GRU controller, a
//! deliberately biased expert used to exercise calibration, and the
//! calibration wrapper.

use std::sync::Arc;

use crate::calibration::CalibrationMap;
use crate::codec::{decode_output, encode_input, CoilCommandFrame, HesFrame, Pose6D, INPUT_DIM, OUTPUT_DIM};
use crate::kernels::Backend;
use crate::model_format::{ModelBundle, ModelKind};
use crate::runtime::{controller_step, reset_state, ControllerState, RuntimeError};
use crate::sim::{ControlPolicy, ExpertController, PolicyError, SimConfig, TileLayout};

/// GRU controller mapping Hall readings and the reference to coil commands.
#[derive(Debug, Clone)]
pub struct NeuralPolicy {
    model: Arc<ModelBundle>,
    state: ControllerState,
    backend: Backend,
    input: [f32; INPUT_DIM],
    output: [f32; OUTPUT_DIM],
}

impl NeuralPolicy {
    pub fn new(model: Arc<ModelBundle>, backend: Backend) -> Result<Self, RuntimeError> {
        if model.kind() != ModelKind::GruStack {
            return Err(RuntimeError::WrongKind { expected: ModelKind::GruStack, actual: model.kind() });
        }
        if model.input_dim() != INPUT_DIM || model.output_dim() != OUTPUT_DIM {
            return Err(RuntimeError::Contract(format!(
                "controller must map {INPUT_DIM} inputs to {OUTPUT_DIM} outputs, model is {}x{}",
                model.input_dim(),
                model.output_dim()
            )));
        }
        let state = reset_state(&model)?;
        Ok(Self { model, state, backend, input: [0.0; INPUT_DIM], output: [0.0; OUTPUT_DIM] })
    }

    pub fn state(&self) -> &ControllerState {
        &self.state
    }
}

impl ControlPolicy for NeuralPolicy {
    fn uses_hes(&self) -> bool {
        true
    }

    fn reset(&mut self) {
        self.state.clear();
    }

    fn act(&mut self, _est: &Pose6D, hes: Option<&HesFrame>, reference: &Pose6D) -> Result<CoilCommandFrame, PolicyError> {
        let hes = hes.ok_or_else(|| RuntimeError::Contract("neural controller needs Hall readings".into()))?;
        encode_input(hes, reference, &self.model.norm, &mut self.input);
        controller_step(&self.model, &self.input, &mut self.state, &mut self.output, self.backend)?;
        Ok(decode_output(&self.output, &self.model.norm)?)
    }
}

/// Smooth systematic offset `b(p)`: constant + linear in the deviation from
/// the hover pose + quadratic in altitude.
#[derive(Debug, Clone, PartialEq)]
pub struct BiasField {
    pub constant: [f64; 6],
    pub linear: [[f64; 6]; 6],
    pub quadratic_z: [f64; 6],
}

pub const HOVER: Pose6D = Pose6D::new(0.0, 0.0, 3.0, 0.0, 0.0, 0.0);

impl BiasField {
    pub fn zero() -> Self {
        Self { constant: [0.0; 6], linear: [[0.0; 6]; 6], quadratic_z: [0.0; 6] }
    }

    /// Offsets of a few tenths of a millimetre or degree across the
    /// workspace, the size of errors a miscalibrated estimator produces.
    pub fn example() -> Self {
        let mut linear = [[0.0; 6]; 6];
        linear[0][0] = 0.002;
        linear[0][1] = -0.001;
        linear[1][1] = -0.0015;
        linear[1][0] = 0.001;
        linear[2][2] = 0.03;
        linear[2][0] = 0.0008;
        linear[3][1] = 0.001;
        linear[4][0] = -0.001;
        linear[5][5] = 0.02;
        Self {
            constant: [0.08, -0.06, 0.05, 0.03, -0.04, 0.1],
            linear,
            quadratic_z: [0.01, 0.0, 0.015, 0.0, 0.005, 0.0],
        }
    }

    pub fn at(&self, p: &Pose6D) -> Pose6D {
        let d = (*p - HOVER).to_array();
        let dz2 = d[2] * d[2];
        Pose6D::from_array(std::array::from_fn(|a| {
            self.constant[a] + (0..6).map(|j| self.linear[a][j] * d[j]).sum::<f64>() + self.quadratic_z[a] * dz2
        }))
    }
}

/// The expert, but it settles at `reference + bias(reference)`.
#[derive(Debug, Clone)]
pub struct BiasedExpert {
    pub expert: ExpertController,
    pub bias: BiasField,
}

impl ControlPolicy for BiasedExpert {
    fn reset(&mut self) {
        self.expert.reset();
    }

    fn act(&mut self, est: &Pose6D, _hes: Option<&HesFrame>, reference: &Pose6D) -> Result<CoilCommandFrame, PolicyError> {
        let target = *reference + self.bias.at(reference);
        Ok(self.expert.act(est, &target))
    }
}

/// Shifts the reference by the calibration correction before the inner
/// controller sees it.
#[derive(Debug, Clone)]
pub struct Calibrated<P> {
    pub inner: P,
    pub map: Arc<CalibrationMap>,
    warned: bool,
}

impl<P> Calibrated<P> {
    pub fn new(inner: P, map: Arc<CalibrationMap>) -> Self {
        Self { inner, map, warned: false }
    }
}

impl<P: ControlPolicy> ControlPolicy for Calibrated<P> {
    fn uses_hes(&self) -> bool {
        self.inner.uses_hes()
    }

    fn reset(&mut self) {
        self.inner.reset();
    }

    fn act(&mut self, est: &Pose6D, hes: Option<&HesFrame>, reference: &Pose6D) -> Result<CoilCommandFrame, PolicyError> {
        let (c, clamped) = self.map.correction(reference).map_err(|e| RuntimeError::Contract(e.to_string()))?;
        if clamped && !self.warned {
            log::warn!("calibration correction at {reference} exceeded the {} cap", self.map.cap);
            self.warned = true;
        }
        self.inner.act(est, hes, &(*reference + Pose6D::from_array(c)))
    }
}

/// Which controller to run.
#[derive(Debug, Clone)]
pub enum ControllerSpec {
    Expert,
    BiasedExpert(BiasField),
    Neural { model: Arc<ModelBundle>, backend: Backend },
}

/// A controller plus an optional calibration map; cheap to clone and share
/// across worker threads.
#[derive(Debug, Clone)]
pub struct ControllerSetup {
    pub spec: ControllerSpec,
    pub calibration: Option<Arc<CalibrationMap>>,
}

impl ControllerSetup {
    pub fn expert() -> Self {
        Self { spec: ControllerSpec::Expert, calibration: None }
    }

    pub fn with_calibration(mut self, map: CalibrationMap) -> Self {
        self.calibration = Some(Arc::new(map));
        self
    }

    pub fn name(&self) -> String {
        let base = match &self.spec {
            ControllerSpec::Expert => "expert".to_string(),
            ControllerSpec::BiasedExpert(_) => "biased-expert".to_string(),
            ControllerSpec::Neural { model, backend } => {
                format!("neural-gru{}x{}-{}", model.hidden_dim(), model.layer_count(), backend.name())
            }
        };
        if self.calibration.is_some() {
            format!("{base}+cal")
        } else {
            base
        }
    }

    pub fn build(&self, sim: &SimConfig, layout: &TileLayout) -> Result<Box<dyn ControlPolicy + Send>, RuntimeError> {
        let expert = || ExpertController::new(sim.expert.clone(), sim.plant.clone(), layout.clone());
        let base: Box<dyn ControlPolicy + Send> = match &self.spec {
            ControllerSpec::Expert => Box::new(expert()),
            ControllerSpec::BiasedExpert(bias) => Box::new(BiasedExpert { expert: expert(), bias: bias.clone() }),
            ControllerSpec::Neural { model, backend } => Box::new(NeuralPolicy::new(model.clone(), *backend)?),
        };
        Ok(match &self.calibration {
            Some(map) => Box::new(Calibrated::new(base, map.clone())),
            None => base,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model_format::NormSpec;
    use crate::sim::closed_loop_run;

    #[test]
    fn zero_weight_network_free_falls() {
        let sim = SimConfig::default();
        let layout = TileLayout::default();
        let model = ModelBundle::zeros_gru(INPUT_DIM, 8, 1, OUTPUT_DIM, NormSpec::default());
        let mut p = NeuralPolicy::new(Arc::new(model), Backend::Vectorized).unwrap();
        let refs = vec![HOVER; 2000];
        let run = closed_loop_run(&sim, &layout, &mut p, &refs, 3, &Default::default()).unwrap();
        let lost = run.lost.expect("free fall must be detected");
        assert_eq!(lost.reason, crate::sim::LossReason::Touchdown);
    }

    #[test]
    fn wrong_shape_rejected() {
        let model = ModelBundle::zeros_gru(10, 8, 1, OUTPUT_DIM, NormSpec::default());
        assert!(NeuralPolicy::new(Arc::new(model), Backend::Scalar).is_err());
    }

    #[test]
    fn biased_expert_settles_off_reference() {
        let sim = SimConfig::noise_free();
        let layout = TileLayout::default();
        let bias = BiasField::example();
        let setup = ControllerSetup { spec: ControllerSpec::BiasedExpert(bias.clone()), calibration: None };
        let mut p = setup.build(&sim, &layout).unwrap();
        let refs = vec![HOVER; 3000];
        let run = closed_loop_run(&sim, &layout, &mut p, &refs, 1, &Default::default()).unwrap();
        let last = run.records.last().unwrap();
        let want = bias.at(&HOVER);
        for a in 0..6 {
            assert!((last.est[a] - HOVER[a] - want[a]).abs() < 5e-3, "{a}: {}", last.est);
        }
    }
}
