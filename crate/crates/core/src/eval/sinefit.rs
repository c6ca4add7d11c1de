//! Least-squares single-frequency sine fit.

use nalgebra::{Matrix3, Vector3};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SineFit {
    pub amplitude: f64,
    /// Degrees, in (-180, 180].
    pub phase: f64,
    pub offset: f64,
}

/// Fits `a sin(2 pi f t) + b cos(2 pi f t) + c` with `t = k dt`. Amplitude is
/// `hypot(a, b)` and phase `atan2(b, a)`; a constant or too-short signal
/// gives amplitude 0 and phase 0.
pub fn sine_fit(signal: &[f64], freq: f64, dt: f64) -> SineFit {
    let w = std::f64::consts::TAU * freq;
    let mut m = Matrix3::<f64>::zeros();
    let mut rhs = Vector3::<f64>::zeros();
    for (k, &y) in signal.iter().enumerate() {
        let (s, c) = (w * k as f64 * dt).sin_cos();
        let row = Vector3::new(s, c, 1.0);
        m += row * row.transpose();
        rhs += row * y;
    }
    let mean = if signal.is_empty() { 0.0 } else { signal.iter().sum::<f64>() / signal.len() as f64 };
    let degenerate = SineFit { amplitude: 0.0, phase: 0.0, offset: mean };
    let Some(sol) = m.cholesky().map(|c| c.solve(&rhs)) else {
        return degenerate;
    };
    let (a, b) = (sol[0], sol[1]);
    let amplitude = a.hypot(b);
    let scale = signal.iter().fold(0.0_f64, |acc, v| acc.max(v.abs())).max(f64::MIN_POSITIVE);
    if !amplitude.is_finite() || amplitude <= 1e-12 * scale {
        return degenerate;
    }
    let mut phase = b.atan2(a).to_degrees();
    if phase <= -180.0 {
        phase += 360.0;
    }
    SineFit { amplitude, phase, offset: sol[2] }
}
