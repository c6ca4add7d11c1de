use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{anyhow, bail, ensure, Context, Result};
use clap::Args;
use maglev_core::calibration::{
    collect_calibration_pairs, fit_calibration, mean_abs_error, parse_grid_spec, CalibrationMap, DEFAULT_FIT_GRID, DEFAULT_RIDGE, EVAL_GRID,
};
use maglev_core::codec::Pose6D;
use maglev_core::datagen::{collect_dataset, CollectConfig};
use maglev_core::eval::bode::write_bode_csv;
use maglev_core::eval::latency::{bench_model, BUDGET_US};
use maglev_core::eval::{
    bench_latency, run_bode, run_circle, run_probe, run_random_traj, run_step_response, Architecture, BodeConfig, CircleConfig, ControllerSetup,
    LatencyReport, Probe, ProbeConfig, RandomTrajConfig, RandomTrajReport, SimTracker, StepConfig,
};
use maglev_core::kernels::Backend;
use maglev_core::model_format::{load_model, ModelBundle, ModelKind};
use maglev_core::policy::{BiasField, ControllerSpec};
use maglev_core::runtime::{mlp_forward, GruController};
use maglev_core::sim::{closed_loop_run, write_trace_csv, PlantState, RunOptions, SimConfig, TileLayout};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::output::{write_file, Output};
use crate::{Common, ControllerArgs, OutArgs};

fn backend(common: &Common) -> Backend {
    common.backend.unwrap_or(Backend::Vectorized)
}

fn load_sim(path: Option<&Path>) -> Result<SimConfig> {
    match path {
        Some(p) => SimConfig::load(p).with_context(|| format!("reading config {}", p.display())),
        None => Ok(SimConfig::default()),
    }
}

fn load_nmlv(path: &Path) -> Result<ModelBundle> {
    load_model(path).with_context(|| format!("loading model {}", path.display()))
}

fn controller_spec(name: &str, model: Option<&Path>, backend: Backend) -> Result<ControllerSpec> {
    let neural = |p: &Path| -> Result<ControllerSpec> { Ok(ControllerSpec::Neural { model: Arc::new(load_nmlv(p)?), backend }) };
    if let Some(p) = model {
        return neural(p);
    }
    match name {
        "expert" => Ok(ControllerSpec::Expert),
        "biased-expert" => Ok(ControllerSpec::BiasedExpert(BiasField::example())),
        path => neural(Path::new(path)),
    }
}

fn setup(common: &Common, c: &ControllerArgs) -> Result<(SimConfig, ControllerSetup)> {
    let sim = load_sim(c.config.as_deref())?;
    let mut setup = ControllerSetup { spec: controller_spec(&c.controller, common.model.as_deref(), backend(common))?, calibration: None };
    if let Some(p) = &c.calibration {
        let map = CalibrationMap::load(p).with_context(|| format!("loading calibration {}", p.display()))?;
        setup = setup.with_calibration(map);
    }
    Ok((sim, setup))
}

fn parse_axis(s: &str) -> Result<usize, String> {
    if let Ok(i) = s.parse::<usize>() {
        return if i < 6 { Ok(i) } else { Err(format!("axis index {i} out of range")) };
    }
    Pose6D::AXIS_NAMES.iter().position(|n| *n == s).ok_or_else(|| format!("unknown axis `{s}`"))
}

fn parse_pose(s: &str) -> Result<Pose6D, String> {
    let v: Vec<f64> = s.split(',').map(|t| t.trim().parse::<f64>().map_err(|_| format!("bad number `{t}`"))).collect::<Result<_, _>>()?;
    let a: [f64; 6] = v.try_into().map_err(|_| "expected x,y,z,alpha,beta,gamma".to_string())?;
    Ok(Pose6D::from_array(a))
}

fn fmt6(v: &[f64; 6]) -> String {
    v.iter().zip(Pose6D::AXIS_NAMES).map(|(x, n)| format!("{n}={x:.4}")).collect::<Vec<_>>().join(" ")
}

#[derive(Args, Debug)]
pub struct BenchLatency {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    out: OutArgs,
    /// Architectures as HxL; repeatable. Ignored with --model.
    #[arg(long = "arch", value_delimiter = ',', default_values = ["256x2", "256x4", "512x2"])]
    archs: Vec<Architecture>,
    #[arg(long, default_value_t = 1_000_000)]
    iterations: usize,
}

impl BenchLatency {
    pub fn run(self) -> Result<()> {
        let backends = match self.common.backend {
            Some(b) => vec![b],
            None => vec![Backend::Scalar, Backend::Vectorized],
        };
        let mut reports: Vec<LatencyReport> = Vec::new();
        for &b in &backends {
            match &self.common.model {
                Some(p) => {
                    let model = load_nmlv(p)?;
                    let label = p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
                    let mut rng = ChaCha8Rng::seed_from_u64(self.common.seed);
                    reports.push(bench_model(&model, &label, b, self.iterations, &mut rng)?);
                }
                None => {
                    for &a in &self.archs {
                        reports.push(bench_latency(a, b, self.iterations, self.common.seed)?);
                    }
                }
            }
        }
        let mut out = Output::open(self.out.out.as_deref())?;
        writeln!(out.csv(), "{}", LatencyReport::CSV_HEADER)?;
        for r in &reports {
            writeln!(out.csv(), "{}", r.csv_row())?;
        }
        for r in &reports {
            let verdict = if r.within_budget() { "within" } else { "over" };
            out.summary(&format!(
                "{:<14} {:<6} mean {:>8.2} us  p99 {:>8.2} us  max {:>9.2} us  ({verdict} the {BUDGET_US} us budget)",
                r.label, r.backend, r.mean_us, r.p99_us, r.max_us
            ));
        }
        if backends.len() == 2 {
            let n = reports.len() / 2;
            for (s, v) in reports[..n].iter().zip(&reports[n..]) {
                out.summary(&format!("{}: vector speedup {:.2}x", s.label, s.mean_us / v.mean_us));
            }
        }
        out.finish()
    }
}

#[derive(Args, Debug)]
pub struct EvalStep {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    controller: ControllerArgs,
    #[command(flatten)]
    out: OutArgs,
    #[arg(long, default_value_t = 100)]
    trials: usize,
    /// Largest jump per axis (mm or deg).
    #[arg(long, default_value_t = 0.8)]
    max_step: f64,
    /// Long-form per-trial CSV.
    #[arg(long)]
    trials_out: Option<PathBuf>,
}

impl EvalStep {
    pub fn run(self) -> Result<()> {
        let (sim, setup) = setup(&self.common, &self.controller)?;
        let name = setup.name();
        let cfg = StepConfig { trials: self.trials, max_step: self.max_step, ..Default::default() };
        let r = run_step_response(&SimTracker::new(sim, setup), &cfg, self.common.seed)?;
        let mut out = Output::open(self.out.out.as_deref())?;
        r.write_mean_csv(out.csv())?;
        if let Some(p) = &self.trials_out {
            write_file(p, |w| r.write_trials_csv(w))?;
        }
        let (pre, post) = (r.pre_step(), r.post_step());
        out.summary(&format!("{name}: {} trials, {} lost control", cfg.trials, r.lost.len()));
        out.summary(&format!("pre-step RMSE  trans {:.4} mm  rot {:.4} deg", pre.0, pre.1));
        out.summary(&format!("post-step RMSE trans {:.4} mm  rot {:.4} deg", post.0, post.1));
        out.finish()
    }
}

#[derive(Args, Debug)]
pub struct EvalBode {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    controller: ControllerArgs,
    #[command(flatten)]
    out: OutArgs,
    /// x, y, z, alpha, beta, gamma or 0-5.
    #[arg(long, default_value = "x", value_parser = parse_axis)]
    axis: usize,
    /// Excitation amplitude (mm or deg).
    #[arg(long, default_value_t = 0.5)]
    amplitude: f64,
    /// Frequencies in Hz; defaults to 0.1 to 25.6 doubling.
    #[arg(long, value_delimiter = ',')]
    freqs: Option<Vec<f64>>,
}

impl EvalBode {
    pub fn run(self) -> Result<()> {
        let (sim, setup) = setup(&self.common, &self.controller)?;
        let name = setup.name();
        let mut cfg = BodeConfig { axis: self.axis, amplitude: self.amplitude, ..Default::default() };
        if let Some(f) = self.freqs {
            cfg.frequencies = f;
        }
        let points = run_bode(&SimTracker::new(sim, setup), &cfg, self.common.seed)?;
        let mut out = Output::open(self.out.out.as_deref())?;
        write_bode_csv(&points, out.csv())?;
        out.summary(&format!("{name}: {} axis, amplitude {}", Pose6D::AXIS_NAMES[self.axis], self.amplitude));
        for p in &points {
            let flag = if p.stable { "" } else { "  UNSTABLE" };
            out.summary(&format!("{:>7.2} Hz  {:>7.2} dB  {:>8.2} deg{flag}", p.frequency, p.magnitude_db, p.phase_deg));
        }
        out.finish()
    }
}

#[derive(Args, Debug)]
pub struct EvalCircle {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    controller: ControllerArgs,
    #[command(flatten)]
    out: OutArgs,
    /// Radius in mm.
    #[arg(long, default_value_t = 0.1)]
    radius: f64,
    #[arg(long, default_value_t = 4.0)]
    frequency: f64,
    /// Seconds.
    #[arg(long, default_value_t = 2.0)]
    duration: f64,
}

impl EvalCircle {
    pub fn run(self) -> Result<()> {
        let (sim, setup) = setup(&self.common, &self.controller)?;
        let name = setup.name();
        let cfg = CircleConfig { radius: self.radius, frequency: self.frequency, duration: self.duration, ..Default::default() };
        let r = run_circle(&SimTracker::new(sim, setup), &cfg, self.common.seed)?;
        let mut out = Output::open(self.out.out.as_deref())?;
        r.write_csv(out.csv())?;
        out.summary(&format!("{name}: circle r={} mm at {} Hz for {} s", cfg.radius, cfg.frequency, cfg.duration));
        match &r.lost {
            Some(l) => out.summary(&format!("loss of control at step {} ({:?})", l.step, l.reason)),
            None => out.summary(&format!("radial RMSE {:.4} mm, tracking RMSE {:.4} mm", r.radial_rmse, r.tracking_rmse)),
        }
        out.finish()
    }
}

#[derive(Args, Debug)]
pub struct EvalTraj {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    controller: ControllerArgs,
    #[command(flatten)]
    out: OutArgs,
    /// Seconds.
    #[arg(long, default_value_t = 10.0)]
    duration: f64,
}

impl EvalTraj {
    /// With --calibration, reports the uncalibrated controller first.
    pub fn run(self) -> Result<()> {
        let (sim, setup) = setup(&self.common, &self.controller)?;
        let cfg = RandomTrajConfig { duration: self.duration, ..Default::default() };
        let mut rows: Vec<(String, RandomTrajReport)> = Vec::new();
        if setup.calibration.is_some() {
            let raw = ControllerSetup { calibration: None, ..setup.clone() };
            rows.push((raw.name(), run_random_traj(&SimTracker::new(sim.clone(), raw), &cfg, self.common.seed)?));
        }
        rows.push((setup.name(), run_random_traj(&SimTracker::new(sim, setup), &cfg, self.common.seed)?));
        let mut out = Output::open(self.out.out.as_deref())?;
        writeln!(out.csv(), "{}", RandomTrajReport::CSV_HEADER)?;
        for (name, r) in &rows {
            writeln!(out.csv(), "{}", r.csv_row(name))?;
        }
        for (name, r) in &rows {
            let tail = if r.lost.is_some() { "  (lost control)" } else { "" };
            out.summary(&format!("{name:<20} RMSE {}{tail}", fmt6(&r.rmse)));
        }
        out.finish()
    }
}

#[derive(Args, Debug)]
pub struct ProbeCmd {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    controller: ControllerArgs,
    #[command(flatten)]
    out: OutArgs,
    /// Payload masses in kg, comma separated.
    #[arg(long, value_delimiter = ',')]
    payload: Vec<f64>,
    /// Target pose x,y,z,alpha,beta,gamma; repeatable.
    #[arg(long, value_parser = parse_pose)]
    pose: Vec<Pose6D>,
    #[arg(long, default_value_t = 3.0)]
    duration: f64,
    /// Per-step trace of the first probe.
    #[arg(long)]
    trace: Option<PathBuf>,
}

impl ProbeCmd {
    pub fn run(self) -> Result<()> {
        let mut probes: Vec<Probe> = self.payload.iter().map(|&kg| Probe::Payload { kg }).collect();
        probes.extend(self.pose.iter().map(|&target| Probe::Pose { target }));
        ensure!(!probes.is_empty(), "give at least one --payload or --pose");
        let (sim, setup) = setup(&self.common, &self.controller)?;
        let tracker = SimTracker::new(sim, setup);
        let cfg = ProbeConfig { duration: self.duration, ..Default::default() };
        let mut out = Output::open(self.out.out.as_deref())?;
        let axes = Pose6D::AXIS_NAMES.map(|a| format!("dev_{a}")).join(",");
        writeln!(out.csv(), "probe,sustained,lost_at_s,{axes}")?;
        for (i, &p) in probes.iter().enumerate() {
            let r = run_probe(&tracker, p, &cfg, self.common.seed)?;
            let lost_at = r.lost.as_ref().map(|l| format!("{:.4}", l.step as f64 * tracker.sim.plant.dt)).unwrap_or_default();
            let dev: Vec<String> = r.steady_state_deviation.to_array().iter().map(|d| format!("{d:.6}")).collect();
            writeln!(out.csv(), "\"{p}\",{},{lost_at},{}", r.sustained, dev.join(","))?;
            out.summary(&r.summary());
            if i == 0 {
                if let Some(path) = &self.trace {
                    write_file(path, |w| r.write_csv(w))?;
                }
            }
        }
        out.finish()
    }
}

#[derive(Args, Debug)]
pub struct Collect {
    #[command(flatten)]
    common: Common,
    /// Number of trajectories; overrides collect.n from the config.
    #[arg(long)]
    n: Option<usize>,
    /// NMDS destination.
    #[arg(long)]
    out: PathBuf,
    /// key=value plant, expert, trajectory and perturbation settings.
    #[arg(long)]
    config: Option<PathBuf>,
}

impl Collect {
    pub fn run(self) -> Result<()> {
        let mut cfg = match &self.config {
            Some(p) => CollectConfig::load(p).with_context(|| format!("reading config {}", p.display()))?,
            None => CollectConfig::default(),
        };
        if let Some(n) = self.n {
            cfg.n = n;
        }
        let file = std::fs::File::create(&self.out).with_context(|| format!("creating {}", self.out.display()))?;
        let s = collect_dataset(&cfg, self.common.seed, std::io::BufWriter::new(file))?;
        println!(
            "wrote {} trajectories ({} records, {} discarded attempts) to {}",
            s.trajectories,
            s.records,
            s.discarded,
            self.out.display()
        );
        Ok(())
    }
}

#[derive(Args, Debug)]
pub struct Calibrate {
    #[command(flatten)]
    common: Common,
    /// `expert`, `biased-expert` or a path to an NMLV controller.
    #[arg(long)]
    controller: String,
    /// Grid as axis=lo:hi:n terms, e.g. x=-40:40:5,y=-40:40:5,z=2:4.5:4.
    #[arg(long, default_value = DEFAULT_FIT_GRID)]
    grid: String,
    /// Polynomial coefficient file (plain text).
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = DEFAULT_RIDGE)]
    ridge: f64,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Skip the before/after check on the 27-point evaluation grid.
    #[arg(long)]
    no_check: bool,
}

impl Calibrate {
    pub fn run(self) -> Result<()> {
        let sim = load_sim(self.config.as_deref())?;
        let layout = TileLayout::standard(sim.plant.magnet_pitch);
        let spec = controller_spec(&self.controller, self.common.model.as_deref(), backend(&self.common))?;
        let raw = ControllerSetup { spec, calibration: None };
        let grid = parse_grid_spec(&self.grid)?;
        let build = |s: &ControllerSetup| {
            let (s, sim, layout) = (s.clone(), sim.clone(), layout.clone());
            move || s.build(&sim, &layout).expect("controller was validated")
        };
        raw.build(&sim, &layout)?;
        let pairs = collect_calibration_pairs(build(&raw), &grid, &sim, &layout, self.common.seed)?;
        let map = fit_calibration(&pairs, self.ridge)?;
        map.save(&self.out).with_context(|| format!("writing {}", self.out.display()))?;
        println!("{}: fitted on {} grid poses, wrote {}", raw.name(), pairs.len(), self.out.display());
        println!("fit-grid mean |err| {}", fmt6(&mean_abs_error(&pairs)));
        if !self.no_check {
            let eval = parse_grid_spec(EVAL_GRID)?;
            let cal = raw.clone().with_calibration(map);
            let seed = self.common.seed.wrapping_add(1);
            let before = mean_abs_error(&collect_calibration_pairs(build(&raw), &eval, &sim, &layout, seed)?);
            let after = mean_abs_error(&collect_calibration_pairs(build(&cal), &eval, &sim, &layout, seed)?);
            println!("check grid  before {}", fmt6(&before));
            println!("check grid  after  {}", fmt6(&after));
        }
        Ok(())
    }
}

#[derive(Args, Debug)]
pub struct InferCheck {
    #[command(flatten)]
    common: Common,
    /// CSV of input rows, fed in order from a reset state.
    #[arg(long, requires = "expected")]
    inputs: Option<PathBuf>,
    /// CSV of reference output rows.
    #[arg(long, requires = "inputs")]
    expected: Option<PathBuf>,
    /// Reset the recurrent state before every row.
    #[arg(long)]
    reset_each: bool,
    /// Random inputs for the backend self-check.
    #[arg(long, default_value_t = 100)]
    n: usize,
    #[arg(long, default_value_t = 1e-4)]
    tol: f32,
    /// Writes the computed outputs as CSV.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn read_rows(path: &Path, width: usize) -> Result<Vec<Vec<f32>>> {
    let f = std::fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut rows = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let parsed: Result<Vec<f32>, _> = line.split(',').map(|t| t.trim().parse::<f32>()).collect();
        match parsed {
            Ok(v) if v.len() == width => rows.push(v),
            Ok(v) => bail!("{}:{}: expected {width} values, found {}", path.display(), i + 1, v.len()),
            Err(_) if rows.is_empty() && i == 0 => continue,
            Err(e) => bail!("{}:{}: {e}", path.display(), i + 1),
        }
    }
    Ok(rows)
}

/// Forward pass over `inputs`, treated as one sequence for recurrent models.
pub fn forward_rows(model: &ModelBundle, inputs: &[Vec<f32>], backend: Backend, reset_each: bool) -> Result<Vec<Vec<f32>>> {
    match model.kind() {
        ModelKind::Mlp => inputs.iter().map(|x| Ok(mlp_forward(model, x, backend)?)).collect(),
        ModelKind::GruStack => {
            let mut c = GruController::new(model, backend)?;
            let mut out = Vec::with_capacity(inputs.len());
            for x in inputs {
                if reset_each {
                    c.reset();
                }
                out.push(c.step(x)?.to_vec());
            }
            Ok(out)
        }
    }
}

fn max_diff(a: &[Vec<f32>], b: &[Vec<f32>]) -> f32 {
    a.iter().zip(b).flat_map(|(x, y)| x.iter().zip(y).map(|(p, q)| (p - q).abs())).fold(0.0, f32::max)
}

impl InferCheck {
    pub fn run(self) -> Result<()> {
        let path = self.common.model.as_deref().ok_or_else(|| anyhow!("--model is required"))?;
        let model = load_nmlv(path)?;
        println!(
            "{}: {:?} {} -> {:?} -> {}",
            path.display(),
            model.kind(),
            model.input_dim(),
            model.layer_dims(),
            model.output_dim()
        );
        let b = backend(&self.common);
        let (inputs, reference, label) = match (&self.inputs, &self.expected) {
            (Some(i), Some(e)) => {
                let inputs = read_rows(i, model.input_dim())?;
                let expected = read_rows(e, model.output_dim())?;
                ensure!(inputs.len() == expected.len(), "{} input rows but {} expected rows", inputs.len(), expected.len());
                (inputs, expected, format!("reference outputs ({b})"))
            }
            _ => {
                let mut rng = ChaCha8Rng::seed_from_u64(self.common.seed);
                let inputs: Vec<Vec<f32>> =
                    (0..self.n).map(|_| (0..model.input_dim()).map(|_| StandardNormal.sample(&mut rng)).collect()).collect();
                let scalar = forward_rows(&model, &inputs, Backend::Scalar, self.reset_each)?;
                (inputs, scalar, "scalar vs vector backends".to_string())
            }
        };
        let b = if self.inputs.is_some() { b } else { Backend::Vectorized };
        let outputs = forward_rows(&model, &inputs, b, self.reset_each)?;
        if let Some(p) = &self.out {
            write_file(p, |w| {
                for row in &outputs {
                    let cells: Vec<String> = row.iter().map(|v| format!("{v:e}")).collect();
                    writeln!(w, "{}", cells.join(","))?;
                }
                Ok(())
            })?;
        }
        let worst = max_diff(&outputs, &reference);
        let ok = worst <= self.tol && outputs.iter().flatten().all(|v| v.is_finite());
        println!("{label}: {} rows, max |diff| {worst:.3e} (tolerance {:.0e})", inputs.len(), self.tol);
        ensure!(ok, "forward equivalence failed");
        println!("PASS");
        Ok(())
    }
}

#[derive(Args, Debug)]
pub struct Simulate {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    controller: ControllerArgs,
    #[command(flatten)]
    out: OutArgs,
    /// Reference pose x,y,z,alpha,beta,gamma held for the whole run.
    #[arg(long, value_parser = parse_pose, default_value = "0,0,3,0,0,0")]
    reference: Pose6D,
    /// Start pose at rest; defaults to the mover lying on the tile.
    #[arg(long, value_parser = parse_pose, default_value = "0,0,0,0,0,0")]
    start: Pose6D,
    /// Seconds.
    #[arg(long, default_value_t = 2.0)]
    duration: f64,
}

impl Simulate {
    pub fn run(self) -> Result<()> {
        let (sim, setup) = setup(&self.common, &self.controller)?;
        let layout = TileLayout::standard(sim.plant.magnet_pitch);
        let mut policy = setup.build(&sim, &layout)?;
        let steps = (self.duration / sim.plant.dt).round() as usize;
        let opts = RunOptions { initial: Some(PlantState::at_rest(self.start)), ..Default::default() };
        let run = closed_loop_run(&sim, &layout, &mut policy, &vec![self.reference; steps], self.common.seed, &opts)?;
        let mut out = Output::open(self.out.out.as_deref())?;
        write_trace_csv(&run, out.csv())?;
        match (&run.lost, run.records.last()) {
            (Some(l), _) => out.summary(&format!("{}: loss of control at t={:.4} s ({:?})", setup.name(), run.time(l.step), l.reason)),
            (None, Some(last)) => out.summary(&format!("{}: final pose {} for reference {}", setup.name(), last.truth, self.reference)),
            (None, None) => {}
        }
        out.finish()
    }
}
