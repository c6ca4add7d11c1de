//! Tile geometry: coil placement, Hall sensor placement, mover magnets, and
//! the per-coil wrench model.

use crate::codec::{rad_to_phase, CoilCommand, CoilCommandFrame, Pose6D, NUM_COILS, NUM_SENSORS};

use super::config::PlantConfig;

/// Direction along which a coil produces thrust.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CoilAxis {
    X,
    Y,
}

impl CoilAxis {
    pub fn unit(self) -> [f64; 2] {
        match self {
            CoilAxis::X => [1.0, 0.0],
            CoilAxis::Y => [0.0, 1.0],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Coil {
    pub center: [f64; 2],
    pub axis: CoilAxis,
}

/// A point dipole in mover coordinates (origin at the bottom-face center).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Dipole {
    pub position: [f64; 3],
    pub moment: [f64; 3],
}

/// Resultant force (N) and torque about the mover center (N*mm).
pub type Wrench = [f64; 6];

pub const TILE_SIZE: f64 = 240.0;
pub const MOVER_SIZE: f64 = 155.0;
pub const SENSOR_PITCH: f64 = 32.0;
pub const SENSOR_DEPTH: f64 = -1.0;
pub const CENTER_SENSOR_DEPTH: f64 = -4.0;
pub const MAGNET_HEIGHT: f64 = 2.5;
pub const MAGNETS_PER_ARRAY: usize = 5;
pub const ARRAY_OFFSET: f64 = 38.75;

#[derive(Debug, Clone, PartialEq)]
pub struct TileLayout {
    pub coils: [Coil; NUM_COILS],
    pub sensors: [[f64; 3]; NUM_SENSORS],
    pub magnets: Vec<Dipole>,
}

impl Default for TileLayout {
    fn default() -> Self {
        Self::standard(40.0)
    }
}

fn rot90(v: [f64; 2], k: usize) -> [f64; 2] {
    let mut v = v;
    for _ in 0..k % 4 {
        v = [-v[1], v[0]];
    }
    v
}

impl TileLayout {
    /// 12 x-thrust coils and their 90-degree rotation as y-thrust coils; a
    /// 7x7 sensor grid plus one deeper sensor under the center; four Halbach
    /// arrays in a pinwheel. The whole layout is invariant under a 90-degree
    /// rotation about the tile center.
    pub fn standard(magnet_pitch: f64) -> Self {
        let mut coils = [Coil { center: [0.0; 2], axis: CoilAxis::X }; NUM_COILS];
        let mut n = 0;
        for &x in &[-90.0, -30.0, 30.0, 90.0] {
            for &y in &[-80.0, 0.0, 80.0] {
                coils[n] = Coil { center: [x, y], axis: CoilAxis::X };
                n += 1;
            }
        }
        for i in 0..12 {
            coils[12 + i] = Coil { center: rot90(coils[i].center, 1), axis: CoilAxis::Y };
        }

        let mut sensors = [[0.0; 3]; NUM_SENSORS];
        let mut s = 0;
        for j in 0..7 {
            for i in 0..7 {
                let x = (i as f64 - 3.0) * SENSOR_PITCH;
                let y = (j as f64 - 3.0) * SENSOR_PITCH;
                sensors[s] = [x, y, SENSOR_DEPTH];
                s += 1;
            }
        }
        sensors[49] = [0.0, 0.0, CENTER_SENSOR_DEPTH];

        let spacing = magnet_pitch / 4.0;
        let mut magnets = Vec::with_capacity(4 * MAGNETS_PER_ARRAY);
        for k in 0..4 {
            let c = rot90([ARRAY_OFFSET, -ARRAY_OFFSET], k);
            let u = rot90([1.0, 0.0], k);
            for j in 0..MAGNETS_PER_ARRAY {
                let off = (j as f64 - 2.0) * spacing;
                let ang = j as f64 * std::f64::consts::FRAC_PI_2;
                let (s, co) = ang.sin_cos();
                magnets.push(Dipole {
                    position: [c[0] + off * u[0], c[1] + off * u[1], MAGNET_HEIGHT],
                    moment: [co * u[0], co * u[1], -s],
                });
            }
        }
        Self { coils, sensors, magnets }
    }

    /// Coil indices ordered by horizontal distance to `(x, y)`, ties by index.
    pub fn nearest_coils(&self, x: f64, y: f64, out: &mut [usize; NUM_COILS]) {
        for (i, o) in out.iter_mut().enumerate() {
            *o = i;
        }
        let d = |i: usize| {
            let c = self.coils[i].center;
            (c[0] - x).powi(2) + (c[1] - y).powi(2)
        };
        out.sort_by(|&a, &b| d(a).total_cmp(&d(b)).then(a.cmp(&b)));
    }
}

/// Signed distance along the coil's thrust axis from the mover center to the
/// coil center.
pub fn coil_offset(coil: &Coil, pose: &Pose6D) -> f64 {
    let u = coil.axis.unit();
    u[0] * (coil.center[0] - pose.x) + u[1] * (coil.center[1] - pose.y)
}

/// Electrical angle of the magnet field seen by a coil.
pub fn coil_field_angle(coil: &Coil, pose: &Pose6D, pitch: f64) -> f64 {
    std::f64::consts::TAU * coil_offset(coil, pose) / pitch
}

/// Wrench produced by one coil from `(i_d, i_q)` expressed in the field
/// frame, i.e. already rotated by the commutation error.
pub fn coil_wrench_dq(coil: &Coil, pose: &Pose6D, i_d: f64, i_q: f64, cfg: &PlantConfig) -> Wrench {
    let e = (-pose.z.max(0.0) / cfg.decay_length).exp();
    let s = coil_offset(coil, pose);
    let u = coil.axis.unit();
    let along = (cfg.k_thrust * i_q - cfg.k_lateral * i_d * s) * e;
    let fz = cfg.k_lift * i_d * e;
    let f = [along * u[0], along * u[1], fz];
    let r = [coil.center[0] - pose.x, coil.center[1] - pose.y];
    [
        f[0],
        f[1],
        f[2],
        r[1] * f[2],
        -r[0] * f[2],
        r[0] * f[1] - r[1] * f[0],
    ]
}

/// Wrench from one coil command at the true pose.
pub fn coil_wrench(coil: &Coil, pose: &Pose6D, cmd: &CoilCommand, cfg: &PlantConfig) -> Wrench {
    if cmd.d == 0 && cmd.q == 0 {
        return [0.0; 6];
    }
    let delta = cmd.phase_rad() - coil_field_angle(coil, pose, cfg.magnet_pitch);
    let (sn, cs) = delta.sin_cos();
    let (d, q) = (cmd.d as f64, cmd.q as f64);
    let i_q = q * cs - d * sn;
    let i_d = d * cs + q * sn;
    coil_wrench_dq(coil, pose, i_d, i_q, cfg)
}

pub fn total_wrench(layout: &TileLayout, pose: &Pose6D, cmds: &[CoilCommand; NUM_COILS], cfg: &PlantConfig) -> Wrench {
    let mut w = [0.0; 6];
    for (coil, cmd) in layout.coils.iter().zip(cmds.iter()) {
        let c = coil_wrench(coil, pose, cmd, cfg);
        for k in 0..6 {
            w[k] += c[k];
        }
    }
    w
}

/// Re-aligns the phase of every active coil with the field at `pose`,
/// keeping its `(d, q)` currents.
pub fn recommutate(layout: &TileLayout, cfg: &PlantConfig, frame: &CoilCommandFrame, pose: &Pose6D) -> CoilCommandFrame {
    let mut out = frame.clone();
    for (c, coil) in out.coils.iter_mut().zip(&layout.coils) {
        if c.d != 0 || c.q != 0 {
            c.phi = rad_to_phase(coil_field_angle(coil, pose, cfg.magnet_pitch));
        }
    }
    out
}

/// Rotation matrix for (alpha, beta, gamma) in degrees, R = Rz * Ry * Rx.
pub fn rotation(pose: &Pose6D) -> [[f64; 3]; 3] {
    let (sa, ca) = pose.alpha.to_radians().sin_cos();
    let (sb, cb) = pose.beta.to_radians().sin_cos();
    let (sg, cg) = pose.gamma.to_radians().sin_cos();
    [
        [cg * cb, cg * sb * sa - sg * ca, cg * sb * ca + sg * sa],
        [sg * cb, sg * sb * sa + cg * ca, sg * sb * ca - cg * sa],
        [-sb, cb * sa, cb * ca],
    ]
}

pub fn rotate(r: &[[f64; 3]; 3], v: [f64; 3]) -> [f64; 3] {
    [
        r[0][0] * v[0] + r[0][1] * v[1] + r[0][2] * v[2],
        r[1][0] * v[0] + r[1][1] * v[1] + r[1][2] * v[2],
        r[2][0] * v[0] + r[2][1] * v[1] + r[2][2] * v[2],
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_is_rotation_symmetric() {
        let l = TileLayout::default();
        let contains = |p: [f64; 2], axis: CoilAxis| {
            l.coils
                .iter()
                .any(|c| c.axis == axis && (c.center[0] - p[0]).abs() < 1e-9 && (c.center[1] - p[1]).abs() < 1e-9)
        };
        for c in &l.coils {
            let other = if c.axis == CoilAxis::X { CoilAxis::Y } else { CoilAxis::X };
            assert!(contains(rot90(c.center, 1), other));
        }
        for s in &l.sensors {
            let r = rot90([s[0], s[1]], 1);
            assert!(l
                .sensors
                .iter()
                .any(|t| (t[0] - r[0]).abs() < 1e-9 && (t[1] - r[1]).abs() < 1e-9 && t[2] == s[2]));
        }
        assert_eq!(l.magnets.len(), 20);
    }

    #[test]
    fn zero_command_zero_wrench() {
        let l = TileLayout::default();
        let cfg = PlantConfig::default();
        let w = total_wrench(&l, &Pose6D::new(3.0, -2.0, 1.0, 0.1, 0.0, 1.0), &[CoilCommand::OFF; NUM_COILS], &cfg);
        assert_eq!(w, [0.0; 6]);
    }

    #[test]
    fn aligned_commutation_gives_pure_components() {
        let l = TileLayout::default();
        let cfg = PlantConfig::default();
        let pose = Pose6D::new(0.0, 0.0, 0.0, 0.0, 0.0, 0.0);
        let coil = &l.coils[4]; // x-axis coil at (-30, 0)
        let theta = coil_field_angle(coil, &pose, cfg.magnet_pitch);
        let q_only = CoilCommand { d: 0, q: 1000, phi: crate::codec::rad_to_phase(theta) };
        let w = coil_wrench(coil, &pose, &q_only, &cfg);
        assert!((w[0] - 0.4).abs() < 1e-3, "{w:?}");
        assert!(w[2].abs() < 1e-3);
        let d_only = CoilCommand { d: 1000, q: 0, phi: q_only.phi };
        let w = coil_wrench(coil, &pose, &d_only, &cfg);
        assert!((w[2] - 0.4).abs() < 1e-3, "{w:?}");
        // lift at x = -30 pitches the mover: torque about y is +30 * Fz
        assert!((w[4] - 12.0).abs() < 0.05, "{w:?}");
    }

    #[test]
    fn mirrored_commutation_error_mirrors_d_axis() {
        let l = TileLayout::default();
        let cfg = PlantConfig::default();
        // coil 4 sits one magnet pitch from the mover, so its field angle is 0 mod 2 pi
        let pose = Pose6D::new(10.0, 0.0, 2.0, 0.0, 0.0, 0.0);
        let coil = &l.coils[4];
        for k in [1u16, 900, 5000, 16000] {
            let plus = CoilCommand { d: 0, q: 2000, phi: k };
            let minus = CoilCommand { d: 0, q: 2000, phi: 65535 - k };
            let wp = coil_wrench(coil, &pose, &plus, &cfg);
            let wm = coil_wrench(coil, &pose, &minus, &cfg);
            let i_q = 2000.0 * plus.phase_rad().cos();
            let even = coil_wrench_dq(coil, &pose, 0.0, i_q, &cfg);
            for a in 0..6 {
                assert!((wp[a] + wm[a] - 2.0 * even[a]).abs() < 1e-9 * (1.0 + even[a].abs()), "{k} {a}");
            }
            assert!((wp[2] + wm[2]).abs() < 1e-12);
        }
    }

    #[test]
    fn lateral_term_is_destabilizing() {
        let l = TileLayout::default();
        let cfg = PlantConfig::default();
        let coil = &l.coils[4];
        let fx = |x: f64| coil_wrench_dq(coil, &Pose6D::new(x, 0.0, 3.0, 0.0, 0.0, 0.0), 1000.0, 0.0, &cfg)[0];
        assert!(fx(0.1) > fx(0.0));
        assert!(fx(-0.1) < fx(0.0));
    }

    #[test]
    fn rotation_is_orthonormal() {
        let r = rotation(&Pose6D::new(0.0, 0.0, 0.0, 1.0, -2.0, 30.0));
        for i in 0..3 {
            for j in 0..3 {
                let dot: f64 = (0..3).map(|k| r[k][i] * r[k][j]).sum();
                assert!((dot - if i == j { 1.0 } else { 0.0 }).abs() < 1e-12);
            }
        }
    }
}
