//! Reference-pose calibration: collect (reference, steady-state estimate)
//! pairs, fit a correction map, and apply it ahead of the controller.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use thiserror::Error;

use crate::codec::Pose6D;
use crate::datagen::trajectory_seed;
use crate::kernels::Backend;
use crate::model_format::{self, FormatError, ModelBundle, ModelKind};
use crate::runtime::{mlp_forward, RuntimeError};
use crate::sim::config::parse_entries;
use crate::sim::{closed_loop_run, ControlPolicy, PolicyError, SimConfig, TileLayout};

pub const POLY_FEATURES: usize = 28;
pub const DEFAULT_CAP: f64 = 1.0;
pub const DEFAULT_RIDGE: f64 = 1e-6;
pub const MIN_PAIRS: usize = 20;
/// Settling time before averaging, and averaging window (s).
pub const SETTLE_TIME: f64 = 0.5;
pub const AVERAGE_TIME: f64 = 0.25;

#[derive(Debug, Error)]
pub enum CalibrationError {
    #[error("need at least {MIN_PAIRS} calibration pairs, got {0}")]
    TooFewPairs(usize),
    #[error("{unstable} of {total} grid poses were unstable; calibration aborted")]
    TooManyUnstable { unstable: usize, total: usize },
    #[error("bad grid spec: {0}")]
    Grid(String),
    #[error("calibration file line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("calibration model must be an MLP mapping 6 inputs to 6 outputs")]
    ModelShape,
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error(transparent)]
    Runtime(#[from] RuntimeError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CalibrationPair {
    pub reference: Pose6D,
    pub estimated: Pose6D,
}

/// Degree-2 polynomial regressor over the normalized reference pose.
#[derive(Debug, Clone, PartialEq)]
pub struct PolyCalibration {
    pub center: [f64; 6],
    pub scale: [f64; 6],
    pub coeffs: [[f64; POLY_FEATURES]; 6],
    pub ridge: f64,
    pub residual_rms: [f64; 6],
}

impl PolyCalibration {
    pub fn features(&self, p: &Pose6D) -> [f64; POLY_FEATURES] {
        let mut n = [0.0; 6];
        for a in 0..6 {
            n[a] = (p[a] - self.center[a]) / self.scale[a];
        }
        poly_features(&n)
    }

    pub fn predict(&self, p: &Pose6D) -> [f64; 6] {
        let f = self.features(p);
        std::array::from_fn(|a| self.coeffs[a].iter().zip(&f).map(|(c, x)| c * x).sum())
    }
}

/// `[1, n_i, n_i n_j (i <= j)]`.
pub fn poly_features(n: &[f64; 6]) -> [f64; POLY_FEATURES] {
    let mut f = [0.0; POLY_FEATURES];
    f[0] = 1.0;
    f[1..7].copy_from_slice(n);
    let mut k = 7;
    for i in 0..6 {
        for j in i..6 {
            f[k] = n[i] * n[j];
            k += 1;
        }
    }
    f
}

#[derive(Debug, Clone, PartialEq)]
pub enum CalibrationModel {
    Zero,
    Polynomial(PolyCalibration),
    /// MLP over `(p - pose_mean) / pose_std`, output in mm/deg.
    Mlp(Box<ModelBundle>),
}

/// A correction map with a per-axis magnitude cap.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationMap {
    pub model: CalibrationModel,
    pub cap: f64,
}

impl Default for CalibrationMap {
    fn default() -> Self {
        Self { model: CalibrationModel::Zero, cap: DEFAULT_CAP }
    }
}

impl CalibrationMap {
    pub fn zero() -> Self {
        Self::default()
    }

    pub fn constant(offset: [f64; 6]) -> Self {
        let mut coeffs = [[0.0; POLY_FEATURES]; 6];
        for a in 0..6 {
            coeffs[a][0] = offset[a];
        }
        Self {
            model: CalibrationModel::Polynomial(PolyCalibration {
                center: [0.0; 6],
                scale: [1.0; 6],
                coeffs,
                ridge: 0.0,
                residual_rms: [0.0; 6],
            }),
            cap: DEFAULT_CAP,
        }
    }

    pub fn from_mlp(model: ModelBundle) -> Result<Self, CalibrationError> {
        if model.kind() != ModelKind::Mlp || model.input_dim() != 6 || model.output_dim() != 6 {
            return Err(CalibrationError::ModelShape);
        }
        Ok(Self { model: CalibrationModel::Mlp(Box::new(model)), cap: DEFAULT_CAP })
    }

    /// Uncapped correction at `p`.
    pub fn raw_correction(&self, p: &Pose6D) -> Result<[f64; 6], CalibrationError> {
        Ok(match &self.model {
            CalibrationModel::Zero => [0.0; 6],
            CalibrationModel::Polynomial(poly) => poly.predict(p),
            CalibrationModel::Mlp(m) => {
                let n = &m.norm;
                let x: Vec<f32> = (0..6).map(|a| ((p[a] as f32) - n.pose_mean[a]) / n.pose_std[a]).collect();
                let y = mlp_forward(m, &x, Backend::Scalar)?;
                std::array::from_fn(|a| y[a] as f64)
            }
        })
    }

    /// Correction clamped to `[-cap, cap]` per axis, and whether any axis hit
    /// the cap.
    pub fn correction(&self, p: &Pose6D) -> Result<([f64; 6], bool), CalibrationError> {
        let raw = self.raw_correction(p)?;
        let mut clamped = false;
        let c = raw.map(|v| {
            let v = if v.is_finite() { v } else { 0.0 };
            if v.abs() > self.cap {
                clamped = true;
            }
            v.clamp(-self.cap, self.cap)
        });
        Ok((c, clamped))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), CalibrationError> {
        match &self.model {
            CalibrationModel::Mlp(m) => {
                model_format::save_model(m, path)?;
            }
            _ => std::fs::write(path, self.to_text())?,
        }
        Ok(())
    }

    /// Loads an `.nmlv` MLP map or a polynomial coefficient file.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, CalibrationError> {
        let bytes = std::fs::read(path)?;
        if bytes.starts_with(&model_format::MAGIC) {
            return Self::from_mlp(model_format::decode_model(&bytes)?);
        }
        let text = String::from_utf8(bytes).map_err(|_| CalibrationError::Parse { line: 0, msg: "not UTF-8 text".into() })?;
        Self::from_text(&text)
    }

    /// Plain-text form. Zero and polynomial maps only.
    pub fn to_text(&self) -> String {
        let list = |v: &[f64]| v.iter().map(|x| format!("{x:?}")).collect::<Vec<_>>().join(", ");
        let mut s = String::from("# maglev polynomial calibration v1\n");
        let _ = writeln!(s, "cap = {:?}", self.cap);
        if let CalibrationModel::Polynomial(p) = &self.model {
            let _ = writeln!(s, "ridge = {:?}", p.ridge);
            let _ = writeln!(s, "center = {}", list(&p.center));
            let _ = writeln!(s, "scale = {}", list(&p.scale));
            for (a, name) in Pose6D::AXIS_NAMES.iter().enumerate() {
                let _ = writeln!(s, "coeff.{name} = {}", list(&p.coeffs[a]));
            }
            let _ = writeln!(s, "residual_rms = {}", list(&p.residual_rms));
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self, CalibrationError> {
        let entries = parse_entries(text).map_err(|e| CalibrationError::Parse { line: 0, msg: e.to_string() })?;
        let mut cap = DEFAULT_CAP;
        let mut poly = PolyCalibration {
            center: [0.0; 6],
            scale: [1.0; 6],
            coeffs: [[0.0; POLY_FEATURES]; 6],
            ridge: 0.0,
            residual_rms: [0.0; 6],
        };
        let mut has_coeffs = false;
        for e in &entries {
            let err = |msg: String| CalibrationError::Parse { line: e.line, msg };
            let list = |n: usize| e.list(n).map_err(|x| err(x.to_string()));
            match e.key.as_str() {
                "cap" => cap = e.num().map_err(|x| err(x.to_string()))?,
                "ridge" => poly.ridge = e.num().map_err(|x| err(x.to_string()))?,
                "center" => poly.center.copy_from_slice(&list(6)?),
                "scale" => poly.scale.copy_from_slice(&list(6)?),
                "residual_rms" => poly.residual_rms.copy_from_slice(&list(6)?),
                k if k.starts_with("coeff.") => {
                    let axis = Pose6D::AXIS_NAMES
                        .iter()
                        .position(|n| *n == &k[6..])
                        .ok_or_else(|| err(format!("unknown axis in `{k}`")))?;
                    poly.coeffs[axis].copy_from_slice(&list(POLY_FEATURES)?);
                    has_coeffs = true;
                }
                k => return Err(err(format!("unknown key `{k}`"))),
            }
        }
        if !(cap >= 0.0) || poly.scale.iter().any(|s| !(s.is_finite() && *s != 0.0)) {
            return Err(CalibrationError::Parse { line: 0, msg: "cap must be >= 0 and scales non-zero".into() });
        }
        let model = if has_coeffs { CalibrationModel::Polynomial(poly) } else { CalibrationModel::Zero };
        Ok(Self { model, cap })
    }
}

/// `p + clamp(C(p), cap)`; logs when the cap engages.
pub fn apply_calibration(p: &Pose6D, map: &CalibrationMap) -> Result<Pose6D, CalibrationError> {
    let (c, clamped) = map.correction(p)?;
    if clamped {
        log::warn!("calibration correction at {p} exceeded the {} cap", map.cap);
    }
    Ok(*p + Pose6D::from_array(c))
}

/// Ridge least squares of `reference - estimated` on degree-2 features of the
/// normalized reference. The intercept is not penalized. If the normal
/// matrix cannot be factored the ridge weight is raised tenfold and retried.
pub fn fit_calibration(pairs: &[CalibrationPair], ridge: f64) -> Result<CalibrationMap, CalibrationError> {
    if pairs.len() < MIN_PAIRS {
        return Err(CalibrationError::TooFewPairs(pairs.len()));
    }
    let n = pairs.len() as f64;
    let mut center = [0.0; 6];
    let mut scale = [0.0; 6];
    for a in 0..6 {
        center[a] = pairs.iter().map(|p| p.reference[a]).sum::<f64>() / n;
        let var = pairs.iter().map(|p| (p.reference[a] - center[a]).powi(2)).sum::<f64>() / n;
        scale[a] = if var.sqrt() > 1e-9 { var.sqrt() } else { 1.0 };
    }
    let mut poly = PolyCalibration { center, scale, coeffs: [[0.0; POLY_FEATURES]; 6], ridge, residual_rms: [0.0; 6] };

    let x = DMatrix::from_fn(pairs.len(), POLY_FEATURES, |r, c| poly.features(&pairs[r].reference)[c]);
    let xtx = x.transpose() * &x;
    let mut lambda = ridge.max(0.0);
    let chol = loop {
        let mut m = xtx.clone();
        for i in 1..POLY_FEATURES {
            m[(i, i)] += lambda;
        }
        if let Some(c) = m.cholesky() {
            break c;
        }
        let next = if lambda > 0.0 { lambda * 10.0 } else { 1e-9 };
        log::warn!("calibration design matrix is rank-deficient; ridge {lambda:e} -> {next:e}");
        lambda = next;
    };
    poly.ridge = lambda;
    for a in 0..6 {
        let y = DVector::from_iterator(pairs.len(), pairs.iter().map(|p| p.reference[a] - p.estimated[a]));
        let beta = chol.solve(&(x.transpose() * &y));
        poly.coeffs[a].copy_from_slice(beta.as_slice());
        let resid = &y - &x * &beta;
        poly.residual_rms[a] = (resid.norm_squared() / n).sqrt();
    }
    Ok(CalibrationMap { model: CalibrationModel::Polynomial(poly), cap: DEFAULT_CAP })
}

/// Grid of reference poses from a spec like
/// `x=-30:30:5,y=-30:30:5,z=2.5:4:4,gamma=0`. Each axis is `value` or
/// `start:stop:count`; unnamed axes default to the hover pose (0,0,3,0,0,0).
pub fn parse_grid_spec(spec: &str) -> Result<Vec<Pose6D>, CalibrationError> {
    let mut axes: [Vec<f64>; 6] = [vec![0.0], vec![0.0], vec![3.0], vec![0.0], vec![0.0], vec![0.0]];
    for part in spec.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        let (name, range) = part.split_once('=').ok_or_else(|| CalibrationError::Grid(format!("`{part}` is not axis=range")))?;
        let axis = Pose6D::AXIS_NAMES
            .iter()
            .position(|n| *n == name.trim())
            .ok_or_else(|| CalibrationError::Grid(format!("unknown axis `{name}`")))?;
        let nums: Result<Vec<f64>, _> = range.split(':').map(|s| s.trim().parse::<f64>()).collect();
        let nums = nums.map_err(|_| CalibrationError::Grid(format!("bad numbers in `{part}`")))?;
        axes[axis] = match nums.as_slice() {
            [v] => vec![*v],
            [a, b, c] if *c >= 1.0 && c.fract() == 0.0 => {
                let count = *c as usize;
                if count == 1 {
                    vec![*a]
                } else {
                    (0..count).map(|i| a + (b - a) * i as f64 / (count - 1) as f64).collect()
                }
            }
            _ => return Err(CalibrationError::Grid(format!("`{part}` needs value or start:stop:count"))),
        };
    }
    let mut out = vec![Pose6D::ZERO];
    for (a, values) in axes.iter().enumerate() {
        out = out
            .iter()
            .flat_map(|p| {
                values.iter().map(move |&v| {
                    let mut q = *p;
                    q[a] = v;
                    q
                })
            })
            .collect();
    }
    Ok(out)
}

/// Mean `|estimated - reference|` per axis.
pub fn mean_abs_error(pairs: &[CalibrationPair]) -> [f64; 6] {
    let n = pairs.len().max(1) as f64;
    std::array::from_fn(|a| pairs.iter().map(|p| (p.estimated[a] - p.reference[a]).abs()).sum::<f64>() / n)
}

/// Default fitting grid: 5x5 in x,y over +/-40 mm at four altitudes.
pub const DEFAULT_FIT_GRID: &str = "x=-40:40:5,y=-40:40:5,z=2:4.5:4";
/// Evaluation grid of 27 poses.
pub const EVAL_GRID: &str = "x=-30:30:3,y=-30:30:3,z=2.5:4:3";

/// Holds each grid pose for the settle plus averaging window and records the
/// mean estimated pose over the averaging window.
pub fn collect_calibration_pairs<F, P>(
    make_policy: F,
    grid: &[Pose6D],
    sim: &SimConfig,
    layout: &TileLayout,
    seed: u64,
) -> Result<Vec<CalibrationPair>, CalibrationError>
where
    F: Fn() -> P + Sync,
    P: ControlPolicy,
{
    let dt = sim.plant.dt;
    let settle = (SETTLE_TIME / dt).round() as usize;
    let window = (AVERAGE_TIME / dt).round() as usize;
    let results: Vec<Result<Option<CalibrationPair>, CalibrationError>> = grid
        .par_iter()
        .enumerate()
        .map(|(i, pose)| {
            let mut policy = make_policy();
            let reference = vec![*pose; settle + window];
            let run = closed_loop_run(sim, layout, &mut policy, &reference, trajectory_seed(seed, i, 0), &Default::default())?;
            if let Some(lost) = run.lost {
                log::warn!("calibration pose {pose} unstable: {:?} at step {}", lost.reason, lost.step);
                return Ok(None);
            }
            let mut mean = [0.0; 6];
            for r in &run.records[settle..] {
                for a in 0..6 {
                    mean[a] += r.est[a] / window as f64;
                }
            }
            Ok(Some(CalibrationPair { reference: *pose, estimated: Pose6D::from_array(mean) }))
        })
        .collect();
    let mut pairs = Vec::with_capacity(grid.len());
    for r in results {
        if let Some(p) = r? {
            pairs.push(p);
        }
    }
    let unstable = grid.len() - pairs.len();
    if unstable * 5 > grid.len() {
        return Err(CalibrationError::TooManyUnstable { unstable, total: grid.len() });
    }
    Ok(pairs)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid_pairs(f: impl Fn(&Pose6D) -> Pose6D) -> Vec<CalibrationPair> {
        parse_grid_spec("x=-30:30:4,y=-30:30:4,z=2:4:3,alpha=-0.2:0.2:2")
            .unwrap()
            .into_iter()
            .map(|p| CalibrationPair { reference: p, estimated: f(&p) })
            .collect()
    }

    #[test]
    fn exact_pairs_fit_zero() {
        let map = fit_calibration(&grid_pairs(|p| *p), DEFAULT_RIDGE).unwrap();
        for p in parse_grid_spec(EVAL_GRID).unwrap() {
            let c = map.raw_correction(&p).unwrap();
            assert!(c.iter().all(|v| v.abs() < 1e-6), "{c:?}");
        }
    }

    #[test]
    fn constant_offset_is_recovered() {
        let e = [0.05, -0.02, 0.1, 0.01, -0.03, 0.2];
        let map = fit_calibration(&grid_pairs(|p| *p - Pose6D::from_array(e)), DEFAULT_RIDGE).unwrap();
        for p in parse_grid_spec(EVAL_GRID).unwrap() {
            let c = map.raw_correction(&p).unwrap();
            for a in 0..6 {
                assert!((c[a] - e[a]).abs() < 1e-3);
            }
        }
    }

    #[test]
    fn degenerate_grid_still_fits() {
        // beta and gamma never vary, so their features are collinear
        let pairs = grid_pairs(|p| *p - Pose6D::new(0.1, 0.0, 0.0, 0.0, 0.0, 0.0));
        let map = fit_calibration(&pairs, 0.0).unwrap();
        let c = map.raw_correction(&Pose6D::new(0.0, 0.0, 3.0, 0.0, 0.0, 0.0)).unwrap();
        assert!((c[0] - 0.1).abs() < 1e-3);
    }

    #[test]
    fn apply_and_cap() {
        let p = Pose6D::new(1.0, 2.0, 3.0, 0.0, 0.0, 0.0);
        assert_eq!(apply_calibration(&p, &CalibrationMap::zero()).unwrap(), p);
        let e = [0.1, -0.2, 0.3, 0.0, 0.0, 0.5];
        let q = apply_calibration(&p, &CalibrationMap::constant(e)).unwrap();
        assert!((q - p - Pose6D::from_array(e)).to_array().iter().all(|v| v.abs() < 1e-12));
        let big = apply_calibration(&p, &CalibrationMap::constant([5.0, -5.0, 0.0, 0.0, 0.0, 0.0])).unwrap();
        assert_eq!((big.x, big.y), (2.0, 1.0));
    }

    #[test]
    fn text_roundtrip() {
        let map = fit_calibration(&grid_pairs(|p| *p - Pose6D::new(0.01 * p.x, 0.0, 0.02, 0.0, 0.0, 0.0)), 1e-4).unwrap();
        let back = CalibrationMap::from_text(&map.to_text()).unwrap();
        assert_eq!(back, map);
        assert_eq!(CalibrationMap::from_text(&CalibrationMap::zero().to_text()).unwrap(), CalibrationMap::zero());
        assert!(CalibrationMap::from_text("coeff.q = 1").is_err());
    }

    #[test]
    fn grid_spec() {
        assert_eq!(parse_grid_spec(EVAL_GRID).unwrap().len(), 27);
        let g = parse_grid_spec("z=2:4:3").unwrap();
        assert_eq!(g.iter().map(|p| p.z).collect::<Vec<_>>(), vec![2.0, 3.0, 4.0]);
        assert!(parse_grid_spec("q=1").is_err());
        assert!(parse_grid_spec("x=1:2").is_err());
    }
}
