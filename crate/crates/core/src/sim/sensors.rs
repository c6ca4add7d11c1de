//! Hall-sensor field model and the internal pose estimate.

use nalgebra::{DMatrix, Matrix6};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::codec::{HesFrame, Pose6D, NUM_SENSORS};

use super::config::PlantConfig;
use super::layout::{rotate, rotation, TileLayout};

/// Noise-free 3-axis field at every sensor for the mover at `pose`.
pub fn hes_field(layout: &TileLayout, pose: &Pose6D, cfg: &PlantConfig) -> [[f64; 3]; NUM_SENSORS] {
    let r = rotation(pose);
    let mut out = [[0.0; 3]; NUM_SENSORS];
    let mut world = Vec::with_capacity(layout.magnets.len());
    for m in &layout.magnets {
        let p = rotate(&r, m.position);
        world.push(([p[0] + pose.x, p[1] + pose.y, p[2] + pose.z], rotate(&r, m.moment)));
    }
    for (s, o) in layout.sensors.iter().zip(out.iter_mut()) {
        for (p, m) in &world {
            let d = [s[0] - p[0], s[1] - p[1], s[2] - p[2]];
            let r2 = d[0] * d[0] + d[1] * d[1] + d[2] * d[2];
            let inv = 1.0 / r2.sqrt();
            let inv3 = inv * inv * inv;
            let md = (m[0] * d[0] + m[1] * d[1] + m[2] * d[2]) / r2;
            for k in 0..3 {
                o[k] += cfg.field_scale * inv3 * (3.0 * md * d[k] - m[k]);
            }
        }
    }
    out
}

/// Hall readings with additive Gaussian noise when noise is enabled.
pub fn sense_hes<R: Rng + ?Sized>(layout: &TileLayout, pose: &Pose6D, cfg: &PlantConfig, rng: &mut R) -> HesFrame {
    let field = hes_field(layout, pose, cfg);
    let mut frame = HesFrame::default();
    let sigma = if cfg.noise { cfg.hes_noise } else { 0.0 };
    for (s, b) in field.iter().enumerate() {
        for k in 0..3 {
            let n: f64 = if sigma > 0.0 { rng.sample::<f64, _>(StandardNormal) * sigma } else { 0.0 };
            frame.readings[3 * s + k] = (b[k] + n) as f32;
        }
    }
    frame
}

/// The plant's internal pose estimate: true pose plus white noise.
pub fn estimate_pose<R: Rng + ?Sized>(pose: &Pose6D, cfg: &PlantConfig, rng: &mut R) -> Pose6D {
    if !cfg.noise || cfg.estimate_noise == 0.0 {
        return *pose;
    }
    pose.map(|v| v + rng.sample::<f64, _>(StandardNormal) * cfg.estimate_noise)
}

/// Jacobian of the flattened field with respect to the pose (central
/// differences, 1e-4 mm or deg).
pub fn field_jacobian(layout: &TileLayout, pose: &Pose6D, cfg: &PlantConfig) -> DMatrix<f64> {
    let h = 1e-4;
    let mut j = DMatrix::zeros(3 * NUM_SENSORS, 6);
    for a in 0..6 {
        let mut plus = *pose;
        let mut minus = *pose;
        plus[a] += h;
        minus[a] -= h;
        let fp = hes_field(layout, &plus, cfg);
        let fm = hes_field(layout, &minus, cfg);
        for s in 0..NUM_SENSORS {
            for k in 0..3 {
                j[(3 * s + k, a)] = (fp[s][k] - fm[s][k]) / (2.0 * h);
            }
        }
    }
    j
}

/// Per-axis std of an efficient estimator given white sensor noise `sigma`,
/// i.e. sqrt(diag(sigma^2 (J^T J)^-1)).
pub fn estimate_floor(layout: &TileLayout, pose: &Pose6D, cfg: &PlantConfig, sigma: f64) -> Option<[f64; 6]> {
    let j = field_jacobian(layout, pose, cfg);
    let jtj: Matrix6<f64> = Matrix6::from_iterator((j.transpose() * &j).iter().copied());
    let inv = jtj.try_inverse()?;
    let mut out = [0.0; 6];
    for a in 0..6 {
        out[a] = sigma * inv[(a, a)].max(0.0).sqrt();
    }
    Some(out)
}

/// Sensor noise std for which the worst-determined axis of `estimate_floor`
/// at `pose` equals `target`.
pub fn calibrate_hes_noise(layout: &TileLayout, pose: &Pose6D, cfg: &PlantConfig, target: f64) -> Option<f64> {
    let unit = estimate_floor(layout, pose, cfg, 1.0)?;
    let worst = unit.iter().cloned().fold(0.0_f64, f64::max);
    if worst > 0.0 {
        Some(target / worst)
    } else {
        None
    }
}

/// Per-channel mean and pooled std of noise-free readings over `poses`.
pub fn reading_stats(layout: &TileLayout, poses: &[Pose6D], cfg: &PlantConfig) -> (Vec<f64>, f64) {
    let n = poses.len().max(1) as f64;
    let mut mean = vec![0.0; 3 * NUM_SENSORS];
    let fields: Vec<_> = poses.iter().map(|p| hes_field(layout, p, cfg)).collect();
    for f in &fields {
        for s in 0..NUM_SENSORS {
            for k in 0..3 {
                mean[3 * s + k] += f[s][k] / n;
            }
        }
    }
    let mut var = 0.0;
    for f in &fields {
        for s in 0..NUM_SENSORS {
            for k in 0..3 {
                var += (f[s][k] - mean[3 * s + k]).powi(2);
            }
        }
    }
    let pooled = (var / (n * mean.len() as f64)).sqrt();
    (mean, pooled)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn centered_readings_are_rotation_symmetric() {
        let l = TileLayout::default();
        let cfg = PlantConfig::default();
        let f = hes_field(&l, &Pose6D::new(0.0, 0.0, 3.0, 0.0, 0.0, 0.0), &cfg);
        for (i, s) in l.sensors.iter().enumerate() {
            let j = l
                .sensors
                .iter()
                .position(|t| (t[0] + s[1]).abs() < 1e-9 && (t[1] - s[0]).abs() < 1e-9 && t[2] == s[2])
                .unwrap();
            // B(R s) = R B(s) for a 90-degree rotation R
            let rb = [-f[i][1], f[i][0], f[i][2]];
            for k in 0..3 {
                assert!((f[j][k] - rb[k]).abs() < 1e-9 * (1.0 + rb[k].abs()), "{i} {j}");
            }
        }
    }

    #[test]
    fn noise_free_sensing_is_deterministic() {
        let l = TileLayout::default();
        let mut cfg = PlantConfig::default();
        cfg.noise = false;
        let p = Pose6D::new(1.0, 2.0, 3.0, 0.1, 0.2, 0.3);
        let a = sense_hes(&l, &p, &cfg, &mut ChaCha8Rng::seed_from_u64(1));
        let b = sense_hes(&l, &p, &cfg, &mut ChaCha8Rng::seed_from_u64(2));
        assert_eq!(a.readings, b.readings);
        assert_eq!(estimate_pose(&p, &cfg, &mut ChaCha8Rng::seed_from_u64(3)), p);
    }

    #[test]
    fn field_is_observable() {
        let l = TileLayout::default();
        let cfg = PlantConfig::default();
        let floor = estimate_floor(&l, &Pose6D::new(0.0, 0.0, 3.0, 0.0, 0.0, 0.0), &cfg, 1.0);
        assert!(floor.is_some());
    }

    fn magnitudes(f: &[[f64; 3]; NUM_SENSORS]) -> Vec<f64> {
        f.iter().map(|b| (b[0] * b[0] + b[1] * b[1] + b[2] * b[2]).sqrt()).collect()
    }

    /// Sensors sitting in a cancellation region between arrays can read
    /// stronger further away; the decay holds wherever the field is not
    /// negligible.
    #[test]
    fn doubling_height_weakens_significant_readings() {
        let l = TileLayout::default();
        let mut cfg = PlantConfig::default();
        cfg.noise = false;
        for base in [
            Pose6D::new(0.0, 0.0, 2.0, 0.0, 0.0, 0.0),
            Pose6D::new(15.0, -10.0, 1.5, 0.0, 0.0, 3.0),
            Pose6D::new(-30.0, 25.0, 2.5, 0.0, 0.0, -2.0),
        ] {
            let near = magnitudes(&hes_field(&l, &base, &cfg));
            let far = magnitudes(&hes_field(&l, &Pose6D { z: 2.0 * base.z, ..base }, &cfg));
            let peak = near.iter().cloned().fold(0.0, f64::max);
            let mut checked = 0;
            for (a, b) in near.iter().zip(&far) {
                if *a >= 0.05 * peak {
                    assert!(b < a, "{base}: {a} -> {b}");
                    checked += 1;
                }
            }
            assert!(checked >= 8, "{checked}");
        }
    }

    #[test]
    fn distinct_poses_give_distinct_readings() {
        let l = TileLayout::default();
        let mut cfg = PlantConfig::default();
        cfg.noise = false;
        let mut poses = Vec::new();
        for x in [-40.0, -20.0, 0.0, 20.0, 40.0] {
            for y in [-40.0, 0.0, 40.0] {
                for z in [2.0, 3.0, 4.5] {
                    for (a, b, g) in [(0.0, 0.0, 0.0), (0.4, 0.0, 0.0), (0.0, -0.4, 0.0), (0.0, 0.0, 4.0)] {
                        poses.push(Pose6D::new(x, y, z, a, b, g));
                    }
                }
            }
        }
        let frames: Vec<_> = poses.iter().map(|p| sense_hes(&l, p, &cfg, &mut ChaCha8Rng::seed_from_u64(0))).collect();
        for i in 0..frames.len() {
            for j in i + 1..frames.len() {
                let d = frames[i]
                    .readings
                    .iter()
                    .zip(&frames[j].readings)
                    .map(|(a, b)| (a - b).abs())
                    .fold(0.0f32, f32::max);
                assert!(d > 1.0, "{} vs {}: {d}", poses[i], poses[j]);
            }
        }
    }

    #[test]
    fn estimate_noise_statistics() {
        let cfg = PlantConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let truth = Pose6D::new(5.0, -3.0, 3.0, 0.1, -0.2, 1.0);
        let n = 100_000;
        let mut sum = [0.0; 6];
        let mut sq = [0.0; 6];
        for _ in 0..n {
            let e = estimate_pose(&truth, &cfg, &mut rng) - truth;
            for a in 0..6 {
                sum[a] += e[a];
                sq[a] += e[a] * e[a];
            }
        }
        for a in 0..6 {
            let mean = sum[a] / n as f64;
            let std = (sq[a] / n as f64 - mean * mean).sqrt();
            assert!((std - 0.006).abs() < 0.1 * 0.006, "axis {a}: {std}");
            assert!(mean.abs() < 3.0 * 0.006 / (n as f64).sqrt(), "axis {a}: {mean}");
        }
    }

    #[test]
    fn calibrated_noise_meets_estimate_target() {
        let l = TileLayout::default();
        let cfg = PlantConfig::default();
        let hover = Pose6D::new(0.0, 0.0, 3.0, 0.0, 0.0, 0.0);
        let sigma = calibrate_hes_noise(&l, &hover, &cfg, 0.006).unwrap();
        assert!((sigma - cfg.hes_noise).abs() < 0.01 * sigma, "{sigma}");
        let floor = estimate_floor(&l, &hover, &cfg, cfg.hes_noise).unwrap();
        assert!(floor.iter().all(|f| *f <= 0.006 * 1.01), "{floor:?}");
    }
}
