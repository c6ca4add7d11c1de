//! Wall-clock cost of one full control step: encode, GRU stack, head, decode.

use std::fmt;
use std::hint::black_box;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::codec::{decode_output, encode_input, HesFrame, Pose6D, INPUT_DIM, OUTPUT_DIM};
use crate::kernels::Backend;
use crate::model_format::{ModelBundle, NormSpec};
use crate::runtime::{controller_step, reset_state};

use super::EvalError;

pub const BUDGET_US: f64 = 250.0;
const INPUT_POOL: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Architecture {
    pub hidden: usize,
    pub layers: usize,
}

impl Architecture {
    pub const fn new(hidden: usize, layers: usize) -> Self {
        Self { hidden, layers }
    }
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "GRU({},{}L)", self.hidden, self.layers)
    }
}

impl std::str::FromStr for Architecture {
    type Err = String;

    /// Accepts `256x4`.
    fn from_str(s: &str) -> Result<Self, String> {
        let (h, l) = s.split_once('x').ok_or_else(|| format!("expected HxL, got `{s}`"))?;
        let h = h.trim().parse().map_err(|_| format!("bad hidden size in `{s}`"))?;
        let l = l.trim().parse().map_err(|_| format!("bad layer count in `{s}`"))?;
        if h == 0 || l == 0 {
            return Err("hidden size and layers must be positive".into());
        }
        Ok(Self { hidden: h, layers: l })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LatencyReport {
    pub label: String,
    pub backend: Backend,
    pub iterations: usize,
    pub max_us: f64,
    pub p99_us: f64,
    pub mean_us: f64,
}

impl LatencyReport {
    pub fn within_budget(&self) -> bool {
        self.max_us < BUDGET_US
    }

    pub const CSV_HEADER: &'static str = "architecture,backend,iterations,max_us,p99_us,mean_us,within_budget";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{:.3},{:.3},{:.3},{}",
            self.label,
            self.backend,
            self.iterations,
            self.max_us,
            self.p99_us,
            self.mean_us,
            self.within_budget()
        )
    }
}

/// Times `iterations` full steps of a randomly initialized controller after
/// a warm-up of `min(iterations, 1000)` untimed steps.
pub fn bench_latency(arch: Architecture, backend: Backend, iterations: usize, seed: u64) -> Result<LatencyReport, EvalError> {
    if iterations == 0 {
        return Err(EvalError::Invalid("iterations must be positive".into()));
    }
    if arch.hidden == 0 || arch.layers == 0 {
        return Err(EvalError::Invalid("architecture needs hidden size and layers > 0".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let model = ModelBundle::random_gru(&mut rng, INPUT_DIM, arch.hidden, arch.layers, OUTPUT_DIM, NormSpec::default());
    bench_model(&model, &arch.to_string(), backend, iterations, &mut rng)
}

/// Same as [`bench_latency`] for an existing controller model.
pub fn bench_model<R: Rng>(model: &ModelBundle, label: &str, backend: Backend, iterations: usize, rng: &mut R) -> Result<LatencyReport, EvalError> {
    if iterations == 0 {
        return Err(EvalError::Invalid("iterations must be positive".into()));
    }
    let mut frames = Vec::with_capacity(INPUT_POOL);
    for _ in 0..INPUT_POOL {
        let mut h = HesFrame::default();
        for v in h.readings.iter_mut() {
            *v = rng.random_range(-100.0..100.0);
        }
        let r = Pose6D::new(rng.random_range(-40.0..40.0), rng.random_range(-40.0..40.0), rng.random_range(2.0..4.5), 0.0, 0.0, 0.0);
        frames.push((h, r));
    }
    let mut state = reset_state(model)?;
    let mut x = [0.0f32; INPUT_DIM];
    let mut y = vec![0.0f32; model.output_dim()];
    let mut times = vec![0u64; iterations];
    let warmup = iterations.min(1000);

    let mut step = |i: usize, x: &mut [f32; INPUT_DIM], y: &mut [f32]| -> Result<(), EvalError> {
        let (h, r) = &frames[i % INPUT_POOL];
        encode_input(h, r, &model.norm, x);
        controller_step(model, &x[..], &mut state, y, backend)?;
        if let Ok(cmd) = decode_output(y, &model.norm) {
            black_box(cmd);
        }
        Ok(())
    };
    for i in 0..warmup {
        step(i, &mut x, &mut y)?;
    }
    for (i, t) in times.iter_mut().enumerate() {
        let start = Instant::now();
        step(i, &mut x, &mut y)?;
        *t = start.elapsed().as_nanos() as u64;
    }

    let mean_ns = times.iter().sum::<u64>() as f64 / iterations as f64;
    let max_ns = *times.iter().max().expect("non-empty");
    let rank = ((iterations as f64 * 0.99).ceil() as usize).clamp(1, iterations) - 1;
    let (_, p99, _) = times.select_nth_unstable(rank);
    Ok(LatencyReport {
        label: label.to_string(),
        backend,
        iterations,
        max_us: max_ns as f64 / 1e3,
        p99_us: *p99 as f64 / 1e3,
        mean_us: mean_ns / 1e3,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn report_invariants() {
        let r = bench_latency(Architecture::new(16, 1), Backend::Vectorized, 200, 1).unwrap();
        assert!(r.max_us >= r.p99_us && r.p99_us > 0.0 && r.mean_us > 0.0);
        assert!(r.max_us >= r.mean_us);
        assert_eq!(r.label, "GRU(16,1L)");
    }

    #[test]
    fn rejects_zero_iterations() {
        assert!(bench_latency(Architecture::new(16, 1), Backend::Scalar, 0, 1).is_err());
        assert!("256x4".parse::<Architecture>().is_ok());
        assert!("256".parse::<Architecture>().is_err());
    }
}
