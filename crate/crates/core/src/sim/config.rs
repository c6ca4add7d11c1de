//! Plant and expert parameters, read from plain `key = value` text.

use std::fmt::Write as _;
use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: expected `key = value`")]
    Syntax { line: usize },
    #[error("line {line}: unknown key `{key}`")]
    UnknownKey { line: usize, key: String },
    #[error("line {line}: cannot parse `{value}` for `{key}`")]
    BadValue { line: usize, key: String, value: String },
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

/// Physical constants of the simulated tile and mover. Units: kg, mm, s, N,
/// degrees for angles; inertia in kg*m^2.
#[derive(Debug, Clone, PartialEq)]
pub struct PlantConfig {
    pub mass: f64,
    pub payload: f64,
    /// Gravitational acceleration in mm/s^2.
    pub gravity: f64,
    pub inertia: [f64; 3],
    /// Thrust per quadrature increment at zero air gap (N).
    pub k_thrust: f64,
    /// Normal force per direct increment at zero air gap (N).
    pub k_lift: f64,
    /// Destabilizing lateral stiffness per direct increment (N/mm).
    pub k_lateral: f64,
    pub decay_length: f64,
    pub magnet_pitch: f64,
    /// Viscous damping as an acceleration rate (1/s).
    pub linear_damping: f64,
    pub angular_damping: f64,
    pub dt: f64,
    /// Std of the internal pose estimate (mm or deg per axis).
    pub estimate_noise: f64,
    /// Std of additive Hall-sensor noise (field units).
    pub hes_noise: f64,
    pub noise: bool,
    /// Dipole field scale (field units * mm^3).
    pub field_scale: f64,
}

impl Default for PlantConfig {
    fn default() -> Self {
        Self {
            mass: 0.8,
            payload: 0.0,
            gravity: 9810.0,
            inertia: [1.6e-3, 1.6e-3, 3.2e-3],
            k_thrust: 4.0e-4,
            k_lift: 4.0e-4,
            k_lateral: 1.0e-5,
            decay_length: 8.0,
            magnet_pitch: 40.0,
            linear_damping: 2.0,
            angular_damping: 2.0,
            dt: 250e-6,
            estimate_noise: 0.006,
            hes_noise: DEFAULT_HES_NOISE,
            noise: true,
            field_scale: 1.0e5,
        }
    }
}

/// Sensor noise that yields a 0.006 mm/deg pose-information floor at nominal
/// hover; produced by `sensors::calibrate_hes_noise` on the default layout.
pub const DEFAULT_HES_NOISE: f64 = 0.367;

/// Per-axis PID gains of the expert, expressed as accelerations (1/s^2 on
/// error, mm/s^2 or deg/s^2 out), plus allocation settings.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpertGains {
    pub kp: [f64; 6],
    pub ki: [f64; 6],
    pub kd: [f64; 6],
    pub derivative_cutoff_hz: f64,
    pub integrator_limit: [f64; 6],
    pub active_coils: usize,
    pub allocation_damping: f64,
}

impl Default for ExpertGains {
    fn default() -> Self {
        Self::from_design(TRANSLATION_BANDWIDTH_HZ, ROTATION_BANDWIDTH_HZ, DAMPING)
    }
}

impl ExpertGains {
    /// Second-order closed loop at the given bandwidths with damping `zeta`,
    /// integral pole at a fifth of the natural frequency.
    pub fn from_design(translation_hz: f64, rotation_hz: f64, zeta: f64) -> Self {
        let design = |hz: f64| {
            let wn = hz * std::f64::consts::TAU;
            (wn * wn, wn * wn * wn / 5.0, 2.0 * zeta * wn)
        };
        let (tp, ti, td) = design(translation_hz);
        let (rp, ri, rd) = design(rotation_hz);
        Self {
            kp: [tp, tp, tp, rp, rp, rp],
            ki: [ti, ti, ti, ri, ri, ri],
            kd: [td, td, td, rd, rd, rd],
            derivative_cutoff_hz: 120.0,
            integrator_limit: [0.5, 0.5, 0.5, 0.5, 0.5, 0.5],
            active_coils: 16,
            allocation_damping: 1e-3,
        }
    }
}

pub const TRANSLATION_BANDWIDTH_HZ: f64 = 20.0;
pub const ROTATION_BANDWIDTH_HZ: f64 = 20.0;
pub const DAMPING: f64 = 1.05;

/// One `key = value` line.
#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub line: usize,
    pub key: String,
    pub value: String,
}

impl Entry {
    fn bad(&self) -> ConfigError {
        ConfigError::BadValue {
            line: self.line,
            key: self.key.clone(),
            value: self.value.clone(),
        }
    }

    pub fn unknown(&self) -> ConfigError {
        ConfigError::UnknownKey { line: self.line, key: self.key.clone() }
    }

    pub fn parse<T: std::str::FromStr>(&self) -> Result<T, ConfigError> {
        self.value.parse().map_err(|_| self.bad())
    }

    pub fn num(&self) -> Result<f64, ConfigError> {
        self.parse()
    }

    pub fn list(&self, n: usize) -> Result<Vec<f64>, ConfigError> {
        let v: Result<Vec<f64>, _> = self.value.split(',').map(|s| s.trim().parse::<f64>()).collect();
        match v {
            Ok(v) if v.len() == n => Ok(v),
            _ => Err(self.bad()),
        }
    }
}

/// Splits config text into entries, dropping blank lines and `#` comments.
pub fn parse_entries(text: &str) -> Result<Vec<Entry>, ConfigError> {
    let mut out = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or(ConfigError::Syntax { line: idx + 1 })?;
        out.push(Entry {
            line: idx + 1,
            key: key.trim().to_string(),
            value: value.trim().to_string(),
        });
    }
    Ok(out)
}

/// Everything the simulator and the expert need.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SimConfig {
    pub plant: PlantConfig,
    pub expert: ExpertGains,
}

impl SimConfig {
    pub fn noise_free() -> Self {
        let mut c = Self::default();
        c.plant.noise = false;
        c
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let p = &self.plant;
        let positive = [
            ("plant.mass", p.mass),
            ("plant.gravity", p.gravity),
            ("plant.decay_length", p.decay_length),
            ("plant.magnet_pitch", p.magnet_pitch),
            ("plant.dt", p.dt),
            ("plant.field_scale", p.field_scale),
        ];
        for (k, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(ConfigError::Invalid(format!("{k} must be > 0")));
            }
        }
        if p.inertia.iter().any(|&i| !(i > 0.0)) {
            return Err(ConfigError::Invalid("plant.inertia must be > 0".into()));
        }
        if p.payload < 0.0 || p.estimate_noise < 0.0 || p.hes_noise < 0.0 {
            return Err(ConfigError::Invalid("payload and noise levels must be >= 0".into()));
        }
        let e = &self.expert;
        if e.active_coils == 0 || e.active_coils > crate::codec::NUM_COILS {
            return Err(ConfigError::Invalid("expert.active_coils must be in 1..=24".into()));
        }
        if !(e.derivative_cutoff_hz > 0.0) || !(e.allocation_damping > 0.0) {
            return Err(ConfigError::Invalid("expert filter cutoff and damping must be > 0".into()));
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Parses `key = value` lines on top of the defaults. `#` starts a comment.
    /// Array-valued keys take comma-separated values.
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = Self::default();
        for entry in parse_entries(text)? {
            if !cfg.set(&entry)? {
                return Err(entry.unknown());
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Applies one entry; returns `Ok(false)` if the key is not a plant or
    /// expert key.
    pub fn set(&mut self, entry: &Entry) -> Result<bool, ConfigError> {
        let p = &mut self.plant;
        let e = &mut self.expert;
        match entry.key.as_str() {
            "plant.mass" => p.mass = entry.num()?,
            "plant.payload" => p.payload = entry.num()?,
            "plant.gravity" => p.gravity = entry.num()?,
            "plant.inertia" => p.inertia.copy_from_slice(&entry.list(3)?),
            "plant.k_thrust" => p.k_thrust = entry.num()?,
            "plant.k_lift" => p.k_lift = entry.num()?,
            "plant.k_lateral" => p.k_lateral = entry.num()?,
            "plant.decay_length" => p.decay_length = entry.num()?,
            "plant.magnet_pitch" => p.magnet_pitch = entry.num()?,
            "plant.linear_damping" => p.linear_damping = entry.num()?,
            "plant.angular_damping" => p.angular_damping = entry.num()?,
            "plant.dt" => p.dt = entry.num()?,
            "plant.estimate_noise" => p.estimate_noise = entry.num()?,
            "plant.hes_noise" => p.hes_noise = entry.num()?,
            "plant.noise" => p.noise = entry.parse()?,
            "plant.field_scale" => p.field_scale = entry.num()?,
            "expert.kp" => e.kp.copy_from_slice(&entry.list(6)?),
            "expert.ki" => e.ki.copy_from_slice(&entry.list(6)?),
            "expert.kd" => e.kd.copy_from_slice(&entry.list(6)?),
            "expert.derivative_cutoff_hz" => e.derivative_cutoff_hz = entry.num()?,
            "expert.integrator_limit" => e.integrator_limit.copy_from_slice(&entry.list(6)?),
            "expert.active_coils" => e.active_coils = entry.parse()?,
            "expert.allocation_damping" => e.allocation_damping = entry.num()?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    /// Renders every key; `parse(to_text())` reproduces the config exactly.
    pub fn to_text(&self) -> String {
        let list = |v: &[f64]| v.iter().map(|x| format!("{x:?}")).collect::<Vec<_>>().join(", ");
        let p = &self.plant;
        let e = &self.expert;
        let mut s = String::new();
        let _ = writeln!(s, "# plant");
        let _ = writeln!(s, "plant.mass = {:?}", p.mass);
        let _ = writeln!(s, "plant.payload = {:?}", p.payload);
        let _ = writeln!(s, "plant.gravity = {:?}", p.gravity);
        let _ = writeln!(s, "plant.inertia = {}", list(&p.inertia));
        let _ = writeln!(s, "plant.k_thrust = {:?}", p.k_thrust);
        let _ = writeln!(s, "plant.k_lift = {:?}", p.k_lift);
        let _ = writeln!(s, "plant.k_lateral = {:?}", p.k_lateral);
        let _ = writeln!(s, "plant.decay_length = {:?}", p.decay_length);
        let _ = writeln!(s, "plant.magnet_pitch = {:?}", p.magnet_pitch);
        let _ = writeln!(s, "plant.linear_damping = {:?}", p.linear_damping);
        let _ = writeln!(s, "plant.angular_damping = {:?}", p.angular_damping);
        let _ = writeln!(s, "plant.dt = {:?}", p.dt);
        let _ = writeln!(s, "plant.estimate_noise = {:?}", p.estimate_noise);
        let _ = writeln!(s, "plant.hes_noise = {:?}", p.hes_noise);
        let _ = writeln!(s, "plant.noise = {}", p.noise);
        let _ = writeln!(s, "plant.field_scale = {:?}", p.field_scale);
        let _ = writeln!(s, "# expert");
        let _ = writeln!(s, "expert.kp = {}", list(&e.kp));
        let _ = writeln!(s, "expert.ki = {}", list(&e.ki));
        let _ = writeln!(s, "expert.kd = {}", list(&e.kd));
        let _ = writeln!(s, "expert.derivative_cutoff_hz = {:?}", e.derivative_cutoff_hz);
        let _ = writeln!(s, "expert.integrator_limit = {}", list(&e.integrator_limit));
        let _ = writeln!(s, "expert.active_coils = {}", e.active_coils);
        let _ = writeln!(s, "expert.allocation_damping = {:?}", e.allocation_damping);
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_roundtrip() {
        let mut c = SimConfig::default();
        c.plant.payload = 0.125;
        c.expert.kp[4] = 1234.5;
        assert_eq!(SimConfig::parse(&c.to_text()).unwrap(), c);
    }

    #[test]
    fn comments_and_overrides() {
        let c = SimConfig::parse("# hello\n\nplant.mass = 1.0  # heavier\nexpert.active_coils=12\n").unwrap();
        assert_eq!(c.plant.mass, 1.0);
        assert_eq!(c.expert.active_coils, 12);
    }

    #[test]
    fn errors() {
        assert!(matches!(SimConfig::parse("plant.mass 3"), Err(ConfigError::Syntax { line: 1 })));
        assert!(matches!(SimConfig::parse("a = 1"), Err(ConfigError::UnknownKey { .. })));
        assert!(matches!(SimConfig::parse("plant.mass = x"), Err(ConfigError::BadValue { .. })));
        assert!(matches!(SimConfig::parse("expert.kp = 1,2"), Err(ConfigError::BadValue { .. })));
        assert!(matches!(SimConfig::parse("plant.mass = -1"), Err(ConfigError::Invalid(_))));
    }
}
