//! Lift-off reference trajectories, perturbation augmentation, expert
//! rollouts and the NMDS dataset file.

use std::io::{self, Read, Write};
use std::path::Path;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use thiserror::Error;

use crate::codec::{CoilCommand, CoilCommandFrame, HesFrame, Pose6D, HES_CHANNELS, NUM_COILS};
use crate::sim::config::{parse_entries, ConfigError, Entry};
use crate::sim::{closed_loop_run, ExpertController, PolicyError, RunOptions, SimConfig, TileLayout};

pub const MOVER_LENGTH: f64 = 155.0;
pub const Z_MARGIN: f64 = 0.2;

/// Lowest-corner clearance test on (z, alpha, beta).
pub fn check_geometric_constraint(p: &Pose6D) -> bool {
    let drop = MOVER_LENGTH / 2.0 * (p.alpha.to_radians().sin().abs() + p.beta.to_radians().sin().abs());
    p.z >= drop + Z_MARGIN
}

/// Moves `wanted` toward `anchor` along the straight line between them until
/// the geometric constraint holds. `anchor` must satisfy it.
pub fn project_toward(anchor: &Pose6D, wanted: &Pose6D) -> Pose6D {
    if check_geometric_constraint(wanted) {
        return *wanted;
    }
    let delta = *wanted - *anchor;
    let (mut lo, mut hi) = (0.0, 1.0);
    for _ in 0..48 {
        let mid = 0.5 * (lo + hi);
        if check_geometric_constraint(&(*anchor + delta.scale(mid))) {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    if lo == 0.0 {
        *anchor
    } else {
        *anchor + delta.scale(lo)
    }
}

#[derive(Debug, Error)]
pub enum DatagenError {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("bad magic: not an NMDS file")]
    BadMagic,
    #[error("unsupported NMDS version {0}")]
    UnsupportedVersion(u32),
    #[error("dataset truncated: expected {expected} records, found {actual}")]
    Truncated { expected: u64, actual: u64 },
    #[error("trailing bytes after the last record")]
    TrailingBytes,
    #[error("record {0}: action outside the +/-8000 current limit")]
    InvalidAction(u64),
    #[error("writer expected {expected} records, got {actual}")]
    RecordCount { expected: u64, actual: u64 },
    #[error("trajectory {index}: expert lost control in {attempts} consecutive attempts; check the plant and expert configuration")]
    ExpertUnstable { index: usize, attempts: u32 },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    ConfigFile(#[from] ConfigError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryConfig {
    pub duration: f64,
    pub steps: usize,
    pub liftoff: f64,
    pub z0: f64,
    pub z_min: f64,
    pub z_max: f64,
    pub xy_half_range: f64,
    pub tilt_std: f64,
    pub yaw_half_range: f64,
}

impl Default for TrajectoryConfig {
    fn default() -> Self {
        Self {
            duration: 1.5,
            steps: 6000,
            liftoff: 1.0,
            z0: 0.3,
            z_min: 2.0,
            z_max: 4.5,
            xy_half_range: 40.0,
            tilt_std: 0.4,
            yaw_half_range: 4.0,
        }
    }
}

impl TrajectoryConfig {
    pub fn dt(&self) -> f64 {
        self.duration / self.steps as f64
    }

    pub fn validate(&self) -> Result<(), DatagenError> {
        let bad = |m: &str| Err(DatagenError::Config(m.to_string()));
        if self.steps == 0 || !(self.duration > 0.0) {
            return bad("trajectory duration and steps must be positive");
        }
        if !(self.liftoff > 0.0 && self.liftoff <= self.duration) {
            return bad("lift-off duration must lie in (0, duration]");
        }
        if !(self.z0 >= Z_MARGIN && self.z_min >= self.z0 && self.z_max >= self.z_min) {
            return bad("need z_margin <= z0 <= z_min <= z_max");
        }
        if self.xy_half_range < 0.0 || self.tilt_std < 0.0 || self.yaw_half_range < 0.0 {
            return bad("sampling ranges must be non-negative");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PerturbationConfig {
    pub xi_min: f64,
    pub xi_max: f64,
    pub clip: f64,
    pub pert_base: f64,
    pub pert_scale: f64,
    pub corr_base: f64,
    pub corr_scale: f64,
}

impl Default for PerturbationConfig {
    fn default() -> Self {
        Self {
            xi_min: 0.1,
            xi_max: 0.6,
            clip: 0.8,
            pert_base: 0.1,
            pert_scale: 0.25,
            corr_base: 0.15,
            corr_scale: 0.35,
        }
    }
}

impl PerturbationConfig {
    /// Durations (s) of the ramp and the nominal hold for an episode whose
    /// largest per-axis amplitude is `a`.
    pub fn durations(&self, a: f64) -> (f64, f64) {
        let r = if self.clip > 0.0 { a / self.clip } else { 0.0 };
        (self.pert_base + self.pert_scale * r, self.corr_base + self.corr_scale * r)
    }

    pub fn validate(&self) -> Result<(), DatagenError> {
        if !(self.xi_min >= 0.0 && self.xi_max >= self.xi_min && self.clip >= 0.0) {
            return Err(DatagenError::Config("need 0 <= xi_min <= xi_max and clip >= 0".into()));
        }
        if !(self.pert_base > 0.0 && self.corr_base >= 0.0 && self.pert_scale >= 0.0 && self.corr_scale >= 0.0) {
            return Err(DatagenError::Config("episode durations must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LiftoffTrajectory {
    pub target: Pose6D,
    pub poses: Vec<Pose6D>,
}

/// Draws the hover pose; rejects draws violating the geometric constraint.
pub fn sample_target<R: Rng + ?Sized>(cfg: &TrajectoryConfig, rng: &mut R) -> Pose6D {
    let tilt = Normal::new(0.0, cfg.tilt_std.max(f64::MIN_POSITIVE)).expect("finite std");
    let uni = |rng: &mut R, h: f64| if h > 0.0 { rng.random_range(-h..=h) } else { 0.0 };
    loop {
        let x = uni(rng, cfg.xy_half_range);
        let y = uni(rng, cfg.xy_half_range);
        let z = if cfg.z_max > cfg.z_min { rng.random_range(cfg.z_min..=cfg.z_max) } else { cfg.z_min };
        let alpha = if cfg.tilt_std > 0.0 { tilt.sample(rng) } else { 0.0 };
        let beta = if cfg.tilt_std > 0.0 { tilt.sample(rng) } else { 0.0 };
        let gamma = uni(rng, cfg.yaw_half_range);
        let p = Pose6D::new(x, y, z, alpha, beta, gamma);
        if check_geometric_constraint(&p) {
            return p;
        }
    }
}

/// Linear z ramp from `z0` to the target over the lift-off phase, then hold.
/// Tilt is scaled down while the altitude cannot yet accommodate it.
pub fn liftoff_reference(cfg: &TrajectoryConfig, target: &Pose6D) -> Vec<Pose6D> {
    let dt = cfg.dt();
    (0..cfg.steps)
        .map(|k| {
            let s = (k as f64 * dt / cfg.liftoff).min(1.0);
            let z = cfg.z0 * (1.0 - s) + target.z * s;
            let level = Pose6D { z, alpha: 0.0, beta: 0.0, ..*target };
            let tilted = Pose6D { z, ..*target };
            project_toward(&level, &tilted)
        })
        .collect()
}

pub fn sample_liftoff_trajectory<R: Rng + ?Sized>(cfg: &TrajectoryConfig, rng: &mut R) -> LiftoffTrajectory {
    let target = sample_target(cfg, rng);
    LiftoffTrajectory { poses: liftoff_reference(cfg, &target), target }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PerturbationEpisode {
    pub start: usize,
    pub ramp_steps: usize,
    pub hold_steps: usize,
    pub amplitude: [f64; 6],
}

impl PerturbationEpisode {
    pub fn end(&self) -> usize {
        self.start + self.ramp_steps + self.hold_steps
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PerturbedTrajectory {
    pub xi: f64,
    pub episodes: Vec<PerturbationEpisode>,
    pub poses: Vec<Pose6D>,
}

/// Draws episodes and applies them to `nominal`.
pub fn augment_perturbations<R: Rng + ?Sized>(nominal: &[Pose6D], dt: f64, pcfg: &PerturbationConfig, rng: &mut R) -> PerturbedTrajectory {
    let xi = if pcfg.xi_max > pcfg.xi_min { rng.random_range(pcfg.xi_min..pcfg.xi_max) } else { pcfg.xi_min };
    let normal = Normal::new(0.0, xi.max(f64::MIN_POSITIVE)).expect("finite std");
    let to_steps = |secs: f64| ((secs / dt).round() as usize).max(1);
    let draw = |rng: &mut R| {
        let mut a = [0.0; 6];
        for v in &mut a {
            *v = if xi > 0.0 { normal.sample(rng).clamp(-pcfg.clip, pcfg.clip) } else { 0.0 };
        }
        let peak = a.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
        let (tp, tc) = pcfg.durations(peak);
        (a, to_steps(tp), to_steps(tc))
    };

    let mut episodes = Vec::new();
    let (mut a, mut ramp, mut hold) = draw(rng);
    let first_cycle = ramp + hold;
    let mut start = rng.random_range(0..first_cycle);
    while start + ramp + hold <= nominal.len() {
        episodes.push(PerturbationEpisode { start, ramp_steps: ramp, hold_steps: hold, amplitude: a });
        start += ramp + hold;
        (a, ramp, hold) = draw(rng);
    }
    let poses = apply_episodes(nominal, &episodes);
    PerturbedTrajectory { xi, episodes, poses }
}

/// Ramps linearly away from nominal over each episode's ramp, then returns to
/// nominal for the hold. Samples that would violate the geometric
/// constraint are pulled back toward nominal.
pub fn apply_episodes(nominal: &[Pose6D], episodes: &[PerturbationEpisode]) -> Vec<Pose6D> {
    let mut out = nominal.to_vec();
    for ep in episodes {
        for j in 0..ep.ramp_steps {
            let k = ep.start + j;
            if k >= out.len() {
                break;
            }
            let frac = (j + 1) as f64 / ep.ramp_steps as f64;
            let dev = Pose6D::from_array(ep.amplitude).scale(frac);
            if dev.to_array().iter().all(|&v| v == 0.0) {
                continue;
            }
            out[k] = project_toward(&nominal[k], &(nominal[k] + dev));
        }
    }
    out
}

/// Mixes a base seed with a trajectory index and attempt number.
pub fn trajectory_seed(seed: u64, index: usize, attempt: u32) -> u64 {
    fn splitmix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }
    splitmix(splitmix(splitmix(seed) ^ index as u64) ^ ((attempt as u64) << 32))
}

// ---- NMDS ----

pub const DATASET_MAGIC: [u8; 4] = *b"NMDS";
pub const DATASET_VERSION: u32 = 1;
pub const DATASET_HEADER_LEN: usize = 16;
pub const RECORD_LEN: usize = HES_CHANNELS * 4 + 6 * 4 + NUM_COILS * 6;

/// One step: Hall readings, (perturbed) reference and the expert's action.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetRecord {
    pub hes: HesFrame,
    pub reference: [f32; 6],
    pub action: CoilCommandFrame,
}

impl DatasetRecord {
    pub fn reference_pose(&self) -> Pose6D {
        Pose6D::from_array(self.reference.map(f64::from))
    }

    fn encode(&self, buf: &mut [u8; RECORD_LEN]) {
        let mut o = 0;
        for v in self.hes.readings.iter().chain(self.reference.iter()) {
            buf[o..o + 4].copy_from_slice(&v.to_le_bytes());
            o += 4;
        }
        for c in &self.action.coils {
            buf[o..o + 2].copy_from_slice(&c.d.to_le_bytes());
            buf[o + 2..o + 4].copy_from_slice(&c.q.to_le_bytes());
            buf[o + 4..o + 6].copy_from_slice(&c.phi.to_le_bytes());
            o += 6;
        }
    }

    fn decode(buf: &[u8; RECORD_LEN]) -> Self {
        let f = |o: usize| f32::from_le_bytes([buf[o], buf[o + 1], buf[o + 2], buf[o + 3]]);
        let mut hes = HesFrame::default();
        for (i, v) in hes.readings.iter_mut().enumerate() {
            *v = f(4 * i);
        }
        let base = 4 * HES_CHANNELS;
        let reference = std::array::from_fn(|i| f(base + 4 * i));
        let mut action = CoilCommandFrame::off();
        let base = base + 24;
        for (i, c) in action.coils.iter_mut().enumerate() {
            let o = base + 6 * i;
            *c = CoilCommand {
                d: i16::from_le_bytes([buf[o], buf[o + 1]]),
                q: i16::from_le_bytes([buf[o + 2], buf[o + 3]]),
                phi: u16::from_le_bytes([buf[o + 4], buf[o + 5]]),
            };
        }
        Self { hes, reference, action }
    }
}

/// Streams records into an NMDS file; `finish` checks the declared count.
pub struct DatasetWriter<W: Write> {
    inner: W,
    expected: u64,
    written: u64,
    buf: Box<[u8; RECORD_LEN]>,
}

impl<W: Write> DatasetWriter<W> {
    pub fn new(mut inner: W, n: u32, k: u32) -> Result<Self, DatagenError> {
        inner.write_all(&DATASET_MAGIC)?;
        inner.write_all(&DATASET_VERSION.to_le_bytes())?;
        inner.write_all(&n.to_le_bytes())?;
        inner.write_all(&k.to_le_bytes())?;
        Ok(Self {
            inner,
            expected: n as u64 * k as u64,
            written: 0,
            buf: Box::new([0; RECORD_LEN]),
        })
    }

    pub fn write_record(&mut self, r: &DatasetRecord) -> Result<(), DatagenError> {
        if self.written >= self.expected {
            return Err(DatagenError::RecordCount { expected: self.expected, actual: self.written + 1 });
        }
        if !r.action.within_limits() {
            return Err(DatagenError::InvalidAction(self.written));
        }
        r.encode(&mut self.buf);
        self.inner.write_all(&self.buf[..])?;
        self.written += 1;
        Ok(())
    }

    pub fn finish(mut self) -> Result<W, DatagenError> {
        if self.written != self.expected {
            return Err(DatagenError::RecordCount { expected: self.expected, actual: self.written });
        }
        self.inner.flush()?;
        Ok(self.inner)
    }
}

/// Streams records out of an NMDS file.
pub struct DatasetReader<R: Read> {
    inner: R,
    pub n: u32,
    pub k: u32,
    read: u64,
    buf: Box<[u8; RECORD_LEN]>,
}

impl<R: Read> DatasetReader<R> {
    pub fn new(mut inner: R) -> Result<Self, DatagenError> {
        let mut h = [0u8; DATASET_HEADER_LEN];
        read_full(&mut inner, &mut h).and_then(|got| if got < h.len() { Err(DatagenError::BadMagic) } else { Ok(()) })?;
        if h[..4] != DATASET_MAGIC {
            return Err(DatagenError::BadMagic);
        }
        let word = |o: usize| u32::from_le_bytes([h[o], h[o + 1], h[o + 2], h[o + 3]]);
        if word(4) != DATASET_VERSION {
            return Err(DatagenError::UnsupportedVersion(word(4)));
        }
        Ok(Self { inner, n: word(8), k: word(12), read: 0, buf: Box::new([0; RECORD_LEN]) })
    }

    pub fn total(&self) -> u64 {
        self.n as u64 * self.k as u64
    }

    /// Next record, or `None` after the last one. Trailing bytes and short
    /// files are errors.
    pub fn next_record(&mut self) -> Result<Option<DatasetRecord>, DatagenError> {
        if self.read == self.total() {
            let mut probe = [0u8; 1];
            if read_full(&mut self.inner, &mut probe)? != 0 {
                return Err(DatagenError::TrailingBytes);
            }
            return Ok(None);
        }
        let got = read_full(&mut self.inner, &mut self.buf[..])?;
        if got < RECORD_LEN {
            return Err(DatagenError::Truncated { expected: self.total(), actual: self.read });
        }
        let r = DatasetRecord::decode(&self.buf);
        if !r.action.within_limits() {
            return Err(DatagenError::InvalidAction(self.read));
        }
        self.read += 1;
        Ok(Some(r))
    }
}

fn read_full<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<usize, DatagenError> {
    let mut got = 0;
    while got < buf.len() {
        match r.read(&mut buf[got..]) {
            Ok(0) => break,
            Ok(n) => got += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e.into()),
        }
    }
    Ok(got)
}

/// A whole dataset in memory, trajectory-major.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    pub k: u32,
    pub trajectories: Vec<Vec<DatasetRecord>>,
}

impl Dataset {
    pub fn write<W: Write>(&self, w: W) -> Result<(), DatagenError> {
        let mut wr = DatasetWriter::new(w, self.trajectories.len() as u32, self.k)?;
        for t in &self.trajectories {
            for r in t {
                wr.write_record(r)?;
            }
        }
        wr.finish()?;
        Ok(())
    }

    pub fn read<R: Read>(r: R) -> Result<Self, DatagenError> {
        let mut rd = DatasetReader::new(r)?;
        let k = rd.k as usize;
        let mut trajectories = Vec::with_capacity(rd.n as usize);
        let mut cur = Vec::with_capacity(k);
        while let Some(rec) = rd.next_record()? {
            cur.push(rec);
            if cur.len() == k {
                trajectories.push(std::mem::replace(&mut cur, Vec::with_capacity(k)));
            }
        }
        Ok(Self { k: rd.k, trajectories })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, DatagenError> {
        let mut v = Vec::new();
        self.write(&mut v)?;
        Ok(v)
    }
}

// ---- collection ----

#[derive(Debug, Clone, PartialEq)]
pub struct CollectConfig {
    pub n: usize,
    pub trajectory: TrajectoryConfig,
    pub perturbation: PerturbationConfig,
    pub sim: SimConfig,
    pub max_attempts: u32,
}

impl Default for CollectConfig {
    fn default() -> Self {
        Self {
            n: 200,
            trajectory: TrajectoryConfig::default(),
            perturbation: PerturbationConfig::default(),
            sim: SimConfig::default(),
            max_attempts: 16,
        }
    }
}

impl CollectConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self, DatagenError> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Accepts every plant/expert key plus `trajectory.*`, `perturbation.*`,
    /// `collect.n` and `collect.max_attempts`.
    pub fn parse(text: &str) -> Result<Self, DatagenError> {
        let mut c = Self::default();
        for e in parse_entries(text)? {
            if c.sim.set(&e)? || c.set(&e)? {
                continue;
            }
            return Err(e.unknown().into());
        }
        c.sim.validate()?;
        c.validate()?;
        Ok(c)
    }

    fn set(&mut self, e: &Entry) -> Result<bool, ConfigError> {
        let t = &mut self.trajectory;
        let p = &mut self.perturbation;
        match e.key.as_str() {
            "collect.n" => self.n = e.parse()?,
            "collect.max_attempts" => self.max_attempts = e.parse()?,
            "trajectory.duration" => t.duration = e.num()?,
            "trajectory.steps" => t.steps = e.parse()?,
            "trajectory.liftoff" => t.liftoff = e.num()?,
            "trajectory.z0" => t.z0 = e.num()?,
            "trajectory.z_min" => t.z_min = e.num()?,
            "trajectory.z_max" => t.z_max = e.num()?,
            "trajectory.xy_half_range" => t.xy_half_range = e.num()?,
            "trajectory.tilt_std" => t.tilt_std = e.num()?,
            "trajectory.yaw_half_range" => t.yaw_half_range = e.num()?,
            "perturbation.xi_min" => p.xi_min = e.num()?,
            "perturbation.xi_max" => p.xi_max = e.num()?,
            "perturbation.clip" => p.clip = e.num()?,
            "perturbation.pert_base" => p.pert_base = e.num()?,
            "perturbation.pert_scale" => p.pert_scale = e.num()?,
            "perturbation.corr_base" => p.corr_base = e.num()?,
            "perturbation.corr_scale" => p.corr_scale = e.num()?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn validate(&self) -> Result<(), DatagenError> {
        self.trajectory.validate()?;
        self.perturbation.validate()?;
        if self.max_attempts == 0 {
            return Err(DatagenError::Config("collect.max_attempts must be >= 1".into()));
        }
        let dt = self.trajectory.dt();
        if (dt - self.sim.plant.dt).abs() > 1e-12 {
            return Err(DatagenError::Config(format!(
                "trajectory step {dt} s does not match the plant period {} s",
                self.sim.plant.dt
            )));
        }
        Ok(())
    }
}

/// Outcome of one trajectory job.
#[derive(Debug, Clone)]
pub struct CollectedTrajectory {
    pub index: usize,
    pub attempts: u32,
    pub target: Pose6D,
    pub records: Vec<DatasetRecord>,
}

/// Samples, perturbs and rolls out trajectory `index`, retrying with a fresh
/// seed when the expert loses control.
pub fn rollout_trajectory(cfg: &CollectConfig, layout: &TileLayout, seed: u64, index: usize) -> Result<CollectedTrajectory, DatagenError> {
    let mut expert = ExpertController::new(cfg.sim.expert.clone(), cfg.sim.plant.clone(), layout.clone());
    let opts = RunOptions { record_hes: true, ..Default::default() };
    for attempt in 0..cfg.max_attempts {
        let mut rng = ChaCha8Rng::seed_from_u64(trajectory_seed(seed, index, attempt));
        let traj = sample_liftoff_trajectory(&cfg.trajectory, &mut rng);
        let pert = augment_perturbations(&traj.poses, cfg.trajectory.dt(), &cfg.perturbation, &mut rng);
        let sim_seed = rng.next_u64();
        let run = closed_loop_run(&cfg.sim, layout, &mut expert, &pert.poses, sim_seed, &opts)?;
        if let Some(lost) = run.lost {
            log::warn!("trajectory {index} attempt {attempt} discarded: {:?} at step {}", lost.reason, lost.step);
            continue;
        }
        let records = run
            .records
            .iter()
            .zip(run.hes)
            .map(|(r, hes)| DatasetRecord {
                hes,
                reference: r.reference.to_array().map(|v| v as f32),
                action: r.command,
            })
            .collect();
        return Ok(CollectedTrajectory { index, attempts: attempt + 1, target: traj.target, records });
    }
    Err(DatagenError::ExpertUnstable { index, attempts: cfg.max_attempts })
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct CollectSummary {
    pub trajectories: usize,
    pub records: u64,
    pub discarded: u64,
}

/// Runs the expert on `cfg.n` perturbed lift-off trajectories in parallel and
/// writes them in index order. Output depends only on `cfg` and `seed`.
pub fn collect_dataset<W: Write>(cfg: &CollectConfig, seed: u64, out: W) -> Result<CollectSummary, DatagenError> {
    cfg.validate()?;
    let layout = TileLayout::standard(cfg.sim.plant.magnet_pitch);
    let n = u32::try_from(cfg.n).map_err(|_| DatagenError::Config("too many trajectories".into()))?;
    let k = u32::try_from(cfg.trajectory.steps).map_err(|_| DatagenError::Config("too many steps".into()))?;
    let mut writer = DatasetWriter::new(out, n, k)?;
    let mut summary = CollectSummary::default();
    let chunk = (rayon::current_num_threads() * 2).max(1);
    let mut next = 0;
    while next < cfg.n {
        let end = (next + chunk).min(cfg.n);
        let batch: Vec<Result<CollectedTrajectory, DatagenError>> =
            (next..end).into_par_iter().map(|i| rollout_trajectory(cfg, &layout, seed, i)).collect();
        for item in batch {
            let t = item?;
            summary.discarded += (t.attempts - 1) as u64;
            for r in &t.records {
                writer.write_record(r)?;
            }
            summary.records += t.records.len() as u64;
            summary.trajectories += 1;
            log::info!("trajectory {} done ({} attempt(s))", t.index, t.attempts);
        }
        next = end;
    }
    writer.finish()?;
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constraint_examples() {
        assert!(check_geometric_constraint(&Pose6D::new(0.0, 0.0, 2.0, 0.0, 0.0, 0.0)));
        let drop = 77.5 * 2.0 * 0.4f64.to_radians().sin();
        assert!((drop - 1.082).abs() < 1e-3);
        assert!(check_geometric_constraint(&Pose6D::new(0.0, 0.0, 1.283, 0.4, 0.4, 0.0)));
        assert!(!check_geometric_constraint(&Pose6D::new(0.0, 0.0, 1.281, 0.4, 0.4, 0.0)));
        assert!(!check_geometric_constraint(&Pose6D::new(0.0, 0.0, 0.5, 1.0, 0.0, 0.0)));
    }

    #[test]
    fn liftoff_timing() {
        let cfg = TrajectoryConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let t = sample_liftoff_trajectory(&cfg, &mut rng);
        assert_eq!(t.poses.len(), 6000);
        assert_eq!(t.poses[0].z, 0.3);
        assert_eq!(t.poses[4000].z, t.target.z);
        assert_eq!(t.poses[2000].z, (0.3 + t.target.z) / 2.0);
        for p in &t.poses[4000..] {
            assert_eq!(*p, t.target);
        }
        for p in &t.poses {
            assert!(check_geometric_constraint(p));
            assert_eq!((p.x, p.y, p.gamma), (t.target.x, t.target.y, t.target.gamma));
        }
    }

    #[test]
    fn zero_amplitude_is_identity() {
        let cfg = TrajectoryConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let t = sample_liftoff_trajectory(&cfg, &mut rng);
        let pcfg = PerturbationConfig { xi_min: 0.0, xi_max: 0.0, ..Default::default() };
        let p = augment_perturbations(&t.poses, cfg.dt(), &pcfg, &mut rng);
        assert!(!p.episodes.is_empty());
        assert_eq!(p.poses, t.poses);
    }

    #[test]
    fn episodes_are_bounded_and_packed() {
        let cfg = TrajectoryConfig::default();
        let pcfg = PerturbationConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..50 {
            let t = sample_liftoff_trajectory(&cfg, &mut rng);
            let p = augment_perturbations(&t.poses, cfg.dt(), &pcfg, &mut rng);
            for w in p.episodes.windows(2) {
                assert_eq!(w[0].end(), w[1].start);
            }
            for ep in &p.episodes {
                assert!(ep.end() <= 6000);
                assert_eq!(p.poses[ep.end() - 1], t.poses[ep.end() - 1]);
            }
            for (a, b) in p.poses.iter().zip(&t.poses) {
                assert!(check_geometric_constraint(a));
                for k in 0..6 {
                    assert!((a[k] - b[k]).abs() <= 0.8 + 1e-9);
                }
            }
        }
    }

    #[test]
    fn nmds_roundtrip_and_errors() {
        let mut rec = DatasetRecord { hes: HesFrame::default(), reference: [1.0, 2.0, 3.0, 0.1, 0.2, 0.3], action: CoilCommandFrame::off() };
        rec.hes.readings[7] = -2.5;
        rec.action.coils[3] = CoilCommand { d: -8000, q: 123, phi: 65534 };
        let ds = Dataset { k: 2, trajectories: vec![vec![rec.clone(), rec.clone()]] };
        let bytes = ds.to_bytes().unwrap();
        assert_eq!(bytes.len(), DATASET_HEADER_LEN + 2 * RECORD_LEN);
        assert_eq!(Dataset::read(&bytes[..]).unwrap(), ds);
        assert!(matches!(Dataset::read(&bytes[..bytes.len() - 1]), Err(DatagenError::Truncated { .. })));
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(matches!(Dataset::read(&extra[..]), Err(DatagenError::TrailingBytes)));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Dataset::read(&bad[..]), Err(DatagenError::BadMagic)));
        let mut w = DatasetWriter::new(Vec::new(), 1, 2).unwrap();
        w.write_record(&rec).unwrap();
        assert!(matches!(w.finish(), Err(DatagenError::RecordCount { .. })));
    }

    #[test]
    fn config_file_keys() {
        let c = CollectConfig::parse("collect.n = 3\ntrajectory.z_max = 4.0\nplant.mass = 0.9\n").unwrap();
        assert_eq!((c.n, c.trajectory.z_max, c.sim.plant.mass), (3, 4.0, 0.9));
        assert!(CollectConfig::parse("trajectory.steps = 100").is_err());
    }
}
