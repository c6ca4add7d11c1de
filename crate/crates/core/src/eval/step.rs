//! Reference-jump response: RMSE between estimate and reference before and
//! after a simultaneous jump in all six axes.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::codec::Pose6D;
use crate::datagen::{project_toward, trajectory_seed};
use crate::sim::RunOptions;

use super::{pooled_error, EvalError, Tracker, Workspace};

#[derive(Debug, Clone, PartialEq)]
pub struct StepConfig {
    pub trials: usize,
    pub max_step: f64,
    /// Hold before the jump (s).
    pub pre: f64,
    /// Observation after the jump (s).
    pub post: f64,
    /// Keep every n-th step in the output.
    pub decimate: usize,
    pub workspace: Workspace,
}

impl Default for StepConfig {
    fn default() -> Self {
        Self {
            trials: 100,
            max_step: 0.8,
            pre: 0.5,
            post: 1.0,
            decimate: 20,
            workspace: Workspace::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepResponse {
    /// Sample times relative to the jump (s).
    pub times: Vec<f64>,
    /// `[trial][time] -> (translational, rotational)`; NaN after loss of control.
    pub trials: Vec<Vec<(f64, f64)>>,
    /// RMS over the trials still in control at each time.
    pub mean: Vec<(f64, f64)>,
    pub lost: Vec<usize>,
    pub initial: Vec<Pose6D>,
    pub targets: Vec<Pose6D>,
}

impl StepResponse {
    fn window_mean(&self, from: f64, to: f64) -> (f64, f64) {
        let mut acc = (0.0, 0.0);
        let mut n = 0;
        for (t, m) in self.times.iter().zip(&self.mean) {
            if *t >= from && *t < to && m.0.is_finite() {
                acc.0 += m.0;
                acc.1 += m.1;
                n += 1;
            }
        }
        if n == 0 {
            (f64::NAN, f64::NAN)
        } else {
            (acc.0 / n as f64, acc.1 / n as f64)
        }
    }

    /// Mean of the averaged RMSE over the last quarter of the pre-jump hold.
    pub fn pre_step(&self) -> (f64, f64) {
        let start = self.times.first().copied().unwrap_or(0.0);
        self.window_mean(start * 0.25, 0.0)
    }

    /// Mean of the averaged RMSE over the last quarter of the record.
    pub fn post_step(&self) -> (f64, f64) {
        let end = self.times.last().copied().unwrap_or(0.0);
        self.window_mean(end * 0.75, f64::INFINITY)
    }

    /// Long-form CSV: one row per trial per time index.
    pub fn write_trials_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "t,trial,rmse_trans,rmse_rot")?;
        for (i, t) in self.times.iter().enumerate() {
            for (n, tr) in self.trials.iter().enumerate() {
                writeln!(w, "{:.6},{},{:.6},{:.6}", t, n, tr[i].0, tr[i].1)?;
            }
        }
        Ok(())
    }

    pub fn write_mean_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "t,rmse_trans,rmse_rot")?;
        for (t, m) in self.times.iter().zip(&self.mean) {
            writeln!(w, "{:.6},{:.6},{:.6}", t, m.0, m.1)?;
        }
        Ok(())
    }
}

/// Samples a start pose and a jump per trial, holds the start pose for
/// `pre`, then the jumped pose for `post`.
pub fn run_step_response<T: Tracker>(tracker: &T, cfg: &StepConfig, seed: u64) -> Result<StepResponse, EvalError> {
    if cfg.trials == 0 || cfg.decimate == 0 {
        return Err(EvalError::Invalid("trials and decimate must be positive".into()));
    }
    let dt = tracker.dt();
    let pre = (cfg.pre / dt).round() as usize;
    let post = (cfg.post / dt).round() as usize;
    let total = pre + post;
    let kept: Vec<usize> = (0..total).filter(|k| k % cfg.decimate == 0).collect();
    let times: Vec<f64> = kept.iter().map(|&k| (k as f64 - pre as f64) * dt).collect();

    let plans: Vec<(Pose6D, Pose6D)> = (0..cfg.trials)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(trajectory_seed(seed, i, 0));
            let ws = &cfg.workspace;
            let start = project_toward(
                &Pose6D { alpha: 0.0, beta: 0.0, ..Pose6D::from_array(std::array::from_fn(|a| sample(&mut rng, ws.lo[a], ws.hi[a]))) },
                &Pose6D::from_array(std::array::from_fn(|a| sample(&mut rng, ws.lo[a], ws.hi[a]))),
            );
            let jump = Pose6D::from_array(std::array::from_fn(|_| sample(&mut rng, -cfg.max_step, cfg.max_step)));
            let end = project_toward(&start, &(start + jump));
            (start, end)
        })
        .collect();

    let runs: Vec<Result<(Vec<(f64, f64)>, bool), EvalError>> = plans
        .par_iter()
        .enumerate()
        .map(|(i, (start, end))| {
            let reference = |k: usize| if k < pre { *start } else { *end };
            let mut out = vec![(f64::NAN, f64::NAN); kept.len()];
            let lost = tracker.track(total, &reference, trajectory_seed(seed, i, 1), &RunOptions::default(), &mut |k, r, e| {
                if k % cfg.decimate == 0 {
                    out[k / cfg.decimate] = pooled_error(r, e);
                }
            })?;
            Ok((out, lost.is_some()))
        })
        .collect();

    let mut trials = Vec::with_capacity(cfg.trials);
    let mut lost = Vec::new();
    for (i, r) in runs.into_iter().enumerate() {
        let (v, l) = r?;
        if l {
            log::warn!("step trial {i} lost control");
            lost.push(i);
        }
        trials.push(v);
    }
    let mean = (0..kept.len())
        .map(|t| {
            let live: Vec<(f64, f64)> = trials.iter().map(|tr| tr[t]).filter(|v| v.0.is_finite()).collect();
            if live.is_empty() {
                return (f64::NAN, f64::NAN);
            }
            let n = live.len() as f64;
            let (a, b) = live.iter().fold((0.0, 0.0), |acc, v| (acc.0 + v.0 * v.0, acc.1 + v.1 * v.1));
            ((a / n).sqrt(), (b / n).sqrt())
        })
        .collect();
    Ok(StepResponse {
        times,
        trials,
        mean,
        lost,
        initial: plans.iter().map(|p| p.0).collect(),
        targets: plans.iter().map(|p| p.1).collect(),
    })
}

fn sample<R: Rng>(rng: &mut R, lo: f64, hi: f64) -> f64 {
    if hi > lo {
        rng.random_range(lo..=hi)
    } else {
        lo
    }
}
