//! Network input/output representation: observation standardization, phase
//! encoding, quantization and the loss mask of inactive coils.
//!
//! Input vector (156): 150 Hall readings, sensor-major (`s0.x s0.y s0.z s1.x ...`),
//! followed by the 6-D reference pose. Output vector (96):
//! `d[24] | q[24] | cos(2*pi*phi/65535)[24] | sin(2*pi*phi/65535)[24]`.

use std::f64::consts::TAU;
use std::fmt;
use std::ops::{Add, Index, IndexMut, Sub};

use thiserror::Error;

use crate::model_format::NormSpec;

pub const NUM_COILS: usize = 24;
pub const NUM_SENSORS: usize = 50;
pub const HES_CHANNELS: usize = 3 * NUM_SENSORS;
pub const INPUT_DIM: usize = HES_CHANNELS + 6;
pub const OUTPUT_DIM: usize = 4 * NUM_COILS;

/// Hard current limit in increments for both d and q.
pub const CURRENT_LIMIT: i16 = 8000;
/// Period of the quantized electrical phase.
pub const PHASE_PERIOD: f64 = 65535.0;
/// (cos, sin) pairs shorter than this decode to phase 0 and mark the coil inactive.
pub const MIN_PHASE_NORM: f32 = 0.1;
/// Default loss-mask threshold in current increments.
pub const MASK_THRESHOLD: f32 = 5.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CodecError {
    #[error("expected {expected} values, got {actual}")]
    Length { expected: usize, actual: usize },
    #[error("non-finite value at output index {0}")]
    NonFinite(usize),
}

/// 6-D pose: translation in mm, rotation (alpha, beta, gamma) in degrees.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Pose6D {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl Pose6D {
    pub const ZERO: Pose6D = Pose6D::new(0.0, 0.0, 0.0, 0.0, 0.0, 0.0);
    pub const AXIS_NAMES: [&'static str; 6] = ["x", "y", "z", "alpha", "beta", "gamma"];

    pub const fn new(x: f64, y: f64, z: f64, alpha: f64, beta: f64, gamma: f64) -> Self {
        Self {
            x,
            y,
            z,
            alpha,
            beta,
            gamma,
        }
    }

    pub fn from_array(a: [f64; 6]) -> Self {
        Self::new(a[0], a[1], a[2], a[3], a[4], a[5])
    }

    pub fn to_array(self) -> [f64; 6] {
        [self.x, self.y, self.z, self.alpha, self.beta, self.gamma]
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
    }

    pub fn map(self, mut f: impl FnMut(f64) -> f64) -> Self {
        Self::from_array(self.to_array().map(&mut f))
    }

    pub fn zip_with(self, other: Self, mut f: impl FnMut(f64, f64) -> f64) -> Self {
        let a = self.to_array();
        let b = other.to_array();
        Self::from_array(std::array::from_fn(|i| f(a[i], b[i])))
    }

    pub fn scale(self, k: f64) -> Self {
        self.map(|v| v * k)
    }
}

impl Index<usize> for Pose6D {
    type Output = f64;

    fn index(&self, i: usize) -> &f64 {
        match i {
            0 => &self.x,
            1 => &self.y,
            2 => &self.z,
            3 => &self.alpha,
            4 => &self.beta,
            5 => &self.gamma,
            _ => panic!("pose axis {i} out of range"),
        }
    }
}

impl IndexMut<usize> for Pose6D {
    fn index_mut(&mut self, i: usize) -> &mut f64 {
        match i {
            0 => &mut self.x,
            1 => &mut self.y,
            2 => &mut self.z,
            3 => &mut self.alpha,
            4 => &mut self.beta,
            5 => &mut self.gamma,
            _ => panic!("pose axis {i} out of range"),
        }
    }
}

impl Add for Pose6D {
    type Output = Pose6D;

    fn add(self, rhs: Self) -> Self {
        self.zip_with(rhs, |a, b| a + b)
    }
}

impl Sub for Pose6D {
    type Output = Pose6D;

    fn sub(self, rhs: Self) -> Self {
        self.zip_with(rhs, |a, b| a - b)
    }
}

impl fmt::Display for Pose6D {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "(x {:.4} mm, y {:.4} mm, z {:.4} mm, a {:.4}°, b {:.4}°, g {:.4}°)",
            self.x, self.y, self.z, self.alpha, self.beta, self.gamma
        )
    }
}

/// Raw Hall-sensor frame, 50 sensors x 3 axes, flattened sensor-major.
#[derive(Clone, PartialEq)]
pub struct HesFrame {
    pub readings: [f32; HES_CHANNELS],
}

impl fmt::Debug for HesFrame {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("HesFrame").finish_non_exhaustive()
    }
}

impl Default for HesFrame {
    fn default() -> Self {
        Self {
            readings: [0.0; HES_CHANNELS],
        }
    }
}

impl HesFrame {
    pub fn sensor(&self, i: usize) -> [f32; 3] {
        [self.readings[3 * i], self.readings[3 * i + 1], self.readings[3 * i + 2]]
    }

    pub fn is_finite(&self) -> bool {
        self.readings.iter().all(|v| v.is_finite())
    }
}

/// Command of a single coil: d/q current increments and electrical phase.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Hash)]
pub struct CoilCommand {
    pub d: i16,
    pub q: i16,
    pub phi: u16,
}

impl CoilCommand {
    pub const OFF: CoilCommand = CoilCommand { d: 0, q: 0, phi: 0 };

    pub fn is_active(&self) -> bool {
        *self != Self::OFF
    }

    pub fn phase_rad(&self) -> f64 {
        phase_to_rad(self.phi)
    }
}

/// Commands for all 24 coils.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Hash)]
pub struct CoilCommandFrame {
    pub coils: [CoilCommand; NUM_COILS],
}

impl CoilCommandFrame {
    pub fn off() -> Self {
        Self::default()
    }

    pub fn active_count(&self) -> usize {
        self.coils.iter().filter(|c| c.is_active()).count()
    }

    /// True when every d/q lies within the current limit.
    pub fn within_limits(&self) -> bool {
        self.coils
            .iter()
            .all(|c| c.d.unsigned_abs() <= CURRENT_LIMIT as u16 && c.q.unsigned_abs() <= CURRENT_LIMIT as u16)
    }
}

/// Rounds half away from zero and clamps to the current limit.
pub fn quantize_current(v: f64) -> i16 {
    if v.is_nan() {
        return 0;
    }
    v.round().clamp(-(CURRENT_LIMIT as f64), CURRENT_LIMIT as f64) as i16
}

/// Maps an angle in radians onto the 16-bit phase circle.
pub fn rad_to_phase(angle: f64) -> u16 {
    let a = angle.rem_euclid(TAU);
    let p = (a / TAU * PHASE_PERIOD).round();
    (p as u32 % PHASE_PERIOD as u32) as u16
}

pub fn phase_to_rad(phi: u16) -> f64 {
    TAU * phi as f64 / PHASE_PERIOD
}

/// Shortest distance between two phases on the 65535-periodic circle.
pub fn phase_distance(a: u16, b: u16) -> u32 {
    let p = PHASE_PERIOD as u32;
    let d = (a as u32 % p).abs_diff(b as u32 % p);
    d.min(p - d)
}

/// Standardizes an observation and reference pose into the network input.
pub fn encode_input(obs: &HesFrame, reference: &Pose6D, norm: &NormSpec, out: &mut [f32; INPUT_DIM]) {
    let inv = 1.0 / norm.hes_sigma;
    for (o, r) in out[..HES_CHANNELS].iter_mut().zip(&obs.readings) {
        *o = r * inv;
    }
    let p = reference.to_array();
    for i in 0..6 {
        out[HES_CHANNELS + i] = ((p[i] - norm.pose_mean[i] as f64) / norm.pose_std[i] as f64) as f32;
    }
}

pub fn encode_input_vec(obs: &HesFrame, reference: &Pose6D, norm: &NormSpec) -> [f32; INPUT_DIM] {
    let mut out = [0.0; INPUT_DIM];
    encode_input(obs, reference, norm, &mut out);
    out
}

/// Inverts the HES part of [`encode_input`] for a single channel.
pub fn decode_hes_channel(encoded: f32, norm: &NormSpec) -> f32 {
    encoded * norm.hes_sigma
}

/// Decodes a network output into quantized, clamped coil commands.
pub fn decode_output(y: &[f32], norm: &NormSpec) -> Result<CoilCommandFrame, CodecError> {
    Ok(decode_output_flags(y, norm)?.0)
}

/// Like [`decode_output`], additionally reporting which coils had a
/// degenerate (cos, sin) pair.
pub fn decode_output_flags(y: &[f32], norm: &NormSpec) -> Result<(CoilCommandFrame, [bool; NUM_COILS]), CodecError> {
    if y.len() != OUTPUT_DIM {
        return Err(CodecError::Length {
            expected: OUTPUT_DIM,
            actual: y.len(),
        });
    }
    if let Some(i) = y.iter().position(|v| !v.is_finite()) {
        return Err(CodecError::NonFinite(i));
    }
    let n = NUM_COILS;
    let sigma = norm.dq_sigma as f64;
    let mut frame = CoilCommandFrame::off();
    let mut inactive = [false; NUM_COILS];
    for j in 0..n {
        let c = y[2 * n + j];
        let s = y[3 * n + j];
        let phi = if c.hypot(s) < MIN_PHASE_NORM {
            inactive[j] = true;
            0
        } else {
            rad_to_phase((s as f64).atan2(c as f64))
        };
        frame.coils[j] = CoilCommand {
            d: quantize_current(y[j] as f64 * sigma),
            q: quantize_current(y[n + j] as f64 * sigma),
            phi,
        };
    }
    Ok((frame, inactive))
}

/// Encodes expert commands as a training target.
pub fn encode_target(a: &CoilCommandFrame, norm: &NormSpec, out: &mut [f32; OUTPUT_DIM]) {
    let n = NUM_COILS;
    for (j, c) in a.coils.iter().enumerate() {
        out[j] = c.d as f32 / norm.dq_sigma;
        out[n + j] = c.q as f32 / norm.dq_sigma;
        let theta = c.phase_rad();
        out[2 * n + j] = theta.cos() as f32;
        out[3 * n + j] = theta.sin() as f32;
    }
}

pub fn encode_target_vec(a: &CoilCommandFrame, norm: &NormSpec) -> [f32; OUTPUT_DIM] {
    let mut out = [0.0; OUTPUT_DIM];
    encode_target(a, norm, &mut out);
    out
}

/// Per-coil loss mask; `true` means the coil is excluded from the loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CoilMask(pub [bool; NUM_COILS]);

impl CoilMask {
    pub fn is_masked(&self, coil: usize) -> bool {
        self.0[coil]
    }

    pub fn masked_count(&self) -> usize {
        self.0.iter().filter(|&&m| m).count()
    }

    /// Expands to a per-element weight over the 96 outputs (0 for masked coils).
    pub fn element_weights(&self) -> [f32; OUTPUT_DIM] {
        let mut w = [1.0; OUTPUT_DIM];
        for j in 0..NUM_COILS {
            if self.0[j] {
                for block in 0..4 {
                    w[block * NUM_COILS + j] = 0.0;
                }
            }
        }
        w
    }
}

/// A coil is masked when |d| and |q| are below `threshold` increments in both
/// the prediction and the target.
pub fn loss_mask(pred: &[f32], target: &[f32], norm: &NormSpec, threshold: f32) -> Result<CoilMask, CodecError> {
    for v in [pred, target] {
        if v.len() != OUTPUT_DIM {
            return Err(CodecError::Length {
                expected: OUTPUT_DIM,
                actual: v.len(),
            });
        }
    }
    let n = NUM_COILS;
    let quiet = |v: &[f32], j: usize| (v[j] * norm.dq_sigma).abs() < threshold && (v[n + j] * norm.dq_sigma).abs() < threshold;
    let mut mask = [false; NUM_COILS];
    for (j, m) in mask.iter_mut().enumerate() {
        *m = quiet(pred, j) && quiet(target, j);
    }
    Ok(CoilMask(mask))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn norm() -> NormSpec {
        NormSpec {
            hes_sigma: 2.5,
            pose_mean: [0.0, 0.0, 3.0, 0.0, 0.0, 0.0],
            pose_std: [20.0, 20.0, 1.0, 0.4, 0.4, 2.0],
            dq_sigma: 8000.0,
        }
    }

    #[test]
    fn zero_observation_at_mean_encodes_to_zero() {
        let n = norm();
        let p = Pose6D::from_array(n.pose_mean.map(f64::from));
        assert!(encode_input_vec(&HesFrame::default(), &p, &n).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn reading_equal_to_sigma_encodes_to_one() {
        let n = norm();
        let mut f = HesFrame::default();
        f.readings[77] = n.hes_sigma;
        let x = encode_input_vec(&f, &Pose6D::from_array(n.pose_mean.map(f64::from)), &n);
        assert_eq!(x[77], 1.0);
        assert_eq!(decode_hes_channel(x[77], &n), n.hes_sigma);
    }

    #[test]
    fn decode_examples() {
        let n = norm();
        let mut y = [0.0f32; OUTPUT_DIM];
        y[2 * NUM_COILS] = 1.0;
        y[0] = 1.5;
        y[2 * NUM_COILS + 1] = 0.0;
        y[3 * NUM_COILS + 1] = 1.0;
        let f = decode_output(&y, &n).unwrap();
        assert_eq!(f.coils[0].phi, 0);
        assert_eq!(f.coils[0].d, 8000);
        assert_eq!(f.coils[1].phi, 16384);
        y[NUM_COILS + 2] = -3.0;
        assert_eq!(decode_output(&y, &n).unwrap().coils[2].q, -8000);
    }

    #[test]
    fn negative_angles_wrap() {
        let n = norm();
        let mut y = [0.0f32; OUTPUT_DIM];
        y[2 * NUM_COILS] = 0.0;
        y[3 * NUM_COILS] = -1.0;
        let f = decode_output(&y, &n).unwrap();
        assert_eq!(f.coils[0].phi, rad_to_phase(1.5 * std::f64::consts::PI));
        assert_eq!(f.coils[0].phi, 49151);
    }

    #[test]
    fn degenerate_phase_is_zero_and_flagged() {
        let n = norm();
        let mut y = [0.0f32; OUTPUT_DIM];
        y[2 * NUM_COILS + 3] = 0.05;
        y[3 * NUM_COILS + 3] = 0.05;
        let (f, flags) = decode_output_flags(&y, &n).unwrap();
        assert_eq!(f.coils[3].phi, 0);
        assert!(flags[3]);
    }

    #[test]
    fn decode_rejects_bad_input() {
        let n = norm();
        assert!(matches!(decode_output(&[0.0; 95], &n), Err(CodecError::Length { .. })));
        let mut y = [0.0f32; OUTPUT_DIM];
        y[10] = f32::NAN;
        assert_eq!(decode_output(&y, &n), Err(CodecError::NonFinite(10)));
    }

    #[test]
    fn target_examples() {
        let n = norm();
        let mut a = CoilCommandFrame::off();
        a.coils[0] = CoilCommand { d: 8000, q: -4000, phi: 0 };
        let t = encode_target_vec(&a, &n);
        assert_eq!(t[0], 1.0);
        assert_eq!(t[NUM_COILS], -0.5);
        assert_eq!((t[2 * NUM_COILS], t[3 * NUM_COILS]), (1.0, 0.0));
    }

    #[test]
    fn wraparound_is_continuous() {
        let n = norm();
        let mut a = CoilCommandFrame::off();
        a.coils[0].phi = 0;
        a.coils[1].phi = 65535;
        let t = encode_target_vec(&a, &n);
        let dc = t[2 * NUM_COILS] - t[2 * NUM_COILS + 1];
        let ds = t[3 * NUM_COILS] - t[3 * NUM_COILS + 1];
        assert!(dc.hypot(ds) as f64 <= TAU / 65535.0 + 1e-6);
        assert_eq!(phase_distance(0, 65535), 0);
        assert_eq!(phase_distance(1, 65534), 2);
    }

    #[test]
    fn mask_rules() {
        let n = norm();
        let zero = [0.0f32; OUTPUT_DIM];
        assert_eq!(loss_mask(&zero, &zero, &n, MASK_THRESHOLD).unwrap().masked_count(), 24);

        let mut target = zero;
        target[NUM_COILS + 4] = 6.0 / 8000.0;
        let m = loss_mask(&zero, &target, &n, MASK_THRESHOLD).unwrap();
        assert!(!m.is_masked(4));
        assert_eq!(m.masked_count(), 23);

        let mut pred = zero;
        pred[7] = 4.0 / 8000.0;
        pred[NUM_COILS + 7] = 4.0 / 8000.0;
        assert!(loss_mask(&pred, &zero, &n, MASK_THRESHOLD).unwrap().is_masked(7));

        let w = m.element_weights();
        assert_eq!(w.iter().filter(|&&v| v == 1.0).count(), 4);
    }

    #[test]
    fn quantization_rounds_half_away_from_zero() {
        assert_eq!(quantize_current(2.5), 3);
        assert_eq!(quantize_current(-2.5), -3);
        assert_eq!(quantize_current(12000.0), 8000);
        assert_eq!(quantize_current(-1e9), -8000);
    }
}
