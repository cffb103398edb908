//! Throughput measurement and roofline accounting for the kinetics kernels.
//!
//! Flops are counted analytically: every kernel stage reports the lanes it
//! was evaluated on through [`Tally`], and each stage carries a fixed
//! operation count derived from its formulas. Masked-off lanes are counted
//! because the hardware executes them.

use std::hint::black_box;
use std::io::{self, Write};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::batch::{step_all, step_all_tallied, BatchError, BatchOptions, GlobalFields, BYTES_PER_POINT};
use crate::integrator::{IntegratorConfig, Scheme};
use crate::kinetics::{KineticsParams, PhaseState};
use crate::simd::{Op, Tally};

/// Bytes per degree of freedom of the in-place update: three fractions,
/// read and written, two temperatures read, per three DoFs.
pub const BYTES_PER_DOF: f64 = 24.0;
/// Bytes moved per element by the in-place vector update `y += a x`.
pub const DAXPY_BYTES_PER_ELEMENT: f64 = 24.0;
/// Measurements may exceed the modelled ceiling by this fraction.
pub const NOISE_ALLOWANCE: f64 = 0.05;
/// Instruction mix presets for the explicit and implicit scheme on the reference hardware.
pub const MIX_PRESET_EXPLICIT: f64 = 0.43;
pub const MIX_PRESET_IMPLICIT: f64 = 0.57;

const EXP_FLOPS: u64 = 20;
const LN_FLOPS: u64 = 26;
const POW_FLOPS: u64 = EXP_FLOPS + LN_FLOPS + 1;
const RATE_FLOPS: u64 = EXP_FLOPS + 6;
const EQ_FLOPS: u64 = EXP_FLOPS + 6;

/// Floating-point operations of one lane evaluation of a kernel stage.
pub fn op_flops(op: Op) -> u64 {
    match op {
        Op::RateSetup => 1 + RATE_FLOPS + EQ_FLOPS + 3 + 3,
        Op::Prefactor => POW_FLOPS + 2,
        Op::BetaToAlphaS => POW_FLOPS + 3,
        Op::MartensiteToAlphaS => POW_FLOPS + 2,
        Op::AlphaSToBeta => 2 * POW_FLOPS + 5,
        Op::CorrectionBase => 6 + EQ_FLOPS + 10,
        Op::Regularize => 5,
        Op::Dissolve => 3,
        Op::Form => EXP_FLOPS + 10,
        Op::Cap => 4,
        Op::Seed => RATE_FLOPS + EQ_FLOPS + 2 * POW_FLOPS + 20,
        Op::EulerUpdate => 4,
        Op::FixedPointIteration => 26,
    }
}

/// Sums [`op_flops`] over recorded stage evaluations.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct FlopTally {
    pub flops: u64,
    pub stages: u64,
}

impl Tally for FlopTally {
    fn record(&mut self, op: Op, lanes: usize) {
        self.flops += op_flops(op) * lanes as u64;
        self.stages += 1;
    }
}

/// Which branch set a synthetic block exercises.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BlockKind {
    /// Cooling around 1000 K with stable alpha forming from beta.
    Cooling,
    /// Heating around 1200 K with martensite dissolving and stable alpha decaying.
    Heating,
}

pub fn block_kind(point: usize, block_size: usize) -> BlockKind {
    if (point / block_size) % 2 == 0 {
        BlockKind::Cooling
    } else {
        BlockKind::Heating
    }
}

/// Deterministic fields whose branch conditions alternate every `block_size` points.
pub fn generate_layout(block_size: usize, n_points: usize, seed: u64) -> GlobalFields {
    assert!(block_size >= 1, "block size must be at least 1");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut states = Vec::with_capacity(n_points);
    let mut t_old = Vec::with_capacity(n_points);
    let mut t_new = Vec::with_capacity(n_points);
    for i in 0..n_points {
        let jitter: f64 = rng.gen_range(-1.0..1.0);
        match block_kind(i, block_size) {
            BlockKind::Cooling => {
                let s = 0.3 + 0.02 * jitter;
                states.push(PhaseState::new(s, 0.0, 1.0 - s));
                let t = 1000.0 + 5.0 * jitter;
                t_old.push(t);
                t_new.push(t - 1.0);
            }
            BlockKind::Heating => {
                let s = 0.6 + 0.02 * jitter;
                states.push(PhaseState::new(s, 0.2, 0.8 - s));
                let t = 1200.0 + 5.0 * jitter;
                t_old.push(t);
                t_new.push(t + 1.0);
            }
        }
    }
    GlobalFields::from_states(&states, t_old, t_new)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Timing {
    pub warmups: usize,
    pub repetitions: usize,
}

impl Default for Timing {
    fn default() -> Self {
        Self { warmups: 10, repetitions: 20 }
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        return 0.0;
    }
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Median wall time of `f` after warm-up.
fn time_median(timing: Timing, mut f: impl FnMut() -> f64) -> f64 {
    for _ in 0..timing.warmups {
        f();
    }
    median((0..timing.repetitions.max(1)).map(|_| f()).collect())
}

/// One kinetics throughput measurement.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Measurement {
    pub block_size: usize,
    pub n_points: usize,
    pub scheme: Scheme,
    pub lanes: usize,
    /// Median seconds per sweep.
    pub seconds: f64,
    pub dof_per_second: f64,
    /// Analytic flops per sweep.
    pub flops: u64,
    /// Modelled bytes per sweep.
    pub bytes: u64,
}

impl Measurement {
    pub fn intensity(&self) -> f64 {
        if self.bytes == 0 {
            0.0
        } else {
            self.flops as f64 / self.bytes as f64
        }
    }

    pub fn gflops(&self) -> f64 {
        if self.seconds > 0.0 {
            self.flops as f64 / self.seconds * 1e-9
        } else {
            0.0
        }
    }

    /// Bandwidth implied by the modelled traffic (GB/s).
    pub fn bandwidth(&self) -> f64 {
        if self.seconds > 0.0 {
            self.bytes as f64 / self.seconds * 1e-9
        } else {
            0.0
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ThroughputConfig {
    pub dt: f64,
    pub timing: Timing,
    pub parallel: bool,
}

impl Default for ThroughputConfig {
    fn default() -> Self {
        Self { dt: 1e-3, timing: Timing::default(), parallel: false }
    }
}

/// Analytic flops of one sweep over `layout`.
pub fn count_flops(layout: &GlobalFields, scheme: Scheme, lanes: usize, dt: f64) -> Result<u64, BatchError> {
    let mut fields = layout.clone();
    let mut tally = FlopTally::default();
    let params = KineticsParams::default();
    step_all_tallied(&mut fields, dt, &params, &IntegratorConfig::with_scheme(scheme), lanes, &mut tally)?;
    Ok(tally.flops)
}

/// Median throughput of repeated sweeps, each starting from `layout`.
pub fn measure_throughput(
    layout: &GlobalFields,
    block_size: usize,
    scheme: Scheme,
    lanes: usize,
    config: ThroughputConfig,
) -> Result<Measurement, BatchError> {
    let params = KineticsParams::default();
    let integrator = IntegratorConfig::with_scheme(scheme);
    let options = BatchOptions { lanes, parallel: config.parallel };
    let flops = count_flops(layout, scheme, lanes, config.dt)?;
    let mut work = layout.clone();
    let mut failure = None;
    let seconds = time_median(config.timing, || {
        work.clone_from(layout);
        let start = Instant::now();
        if let Err(e) = step_all(&mut work, config.dt, &params, &integrator, options) {
            failure = Some(e);
        }
        black_box(&work);
        start.elapsed().as_secs_f64()
    });
    if let Some(e) = failure {
        return Err(e);
    }
    let n = layout.len();
    Ok(Measurement {
        block_size,
        n_points: n,
        scheme,
        lanes,
        seconds,
        dof_per_second: if seconds > 0.0 { 3.0 * n as f64 / seconds } else { 0.0 },
        flops,
        bytes: n as u64 * BYTES_PER_POINT,
    })
}

/// Sustained bandwidth of `y += a x` over `n` elements (GB/s).
pub fn measure_bandwidth(n: usize, timing: Timing) -> f64 {
    let x = vec![1.0f64; n];
    let mut y = vec![0.5f64; n];
    let a: f64 = black_box(1e-9);
    let seconds = time_median(timing, || {
        let start = Instant::now();
        for (yi, xi) in y.iter_mut().zip(&x) {
            *yi = a.mul_add(*xi, *yi);
        }
        black_box(&mut y);
        start.elapsed().as_secs_f64()
    });
    DAXPY_BYTES_PER_ELEMENT * n as f64 / seconds * 1e-9
}

/// Peak fused multiply-add rate of one thread (GFlop/s).
pub fn measure_peak_flops(iterations: usize, timing: Timing) -> f64 {
    const CHAINS: usize = 64;
    let a: f64 = black_box(0.999_999_9);
    let b: f64 = black_box(1e-9);
    let seconds = time_median(timing, || {
        let mut acc = [1.0f64; CHAINS];
        let start = Instant::now();
        for _ in 0..iterations {
            for v in acc.iter_mut() {
                *v = v.mul_add(a, b);
            }
        }
        black_box(&acc);
        start.elapsed().as_secs_f64()
    });
    2.0 * (CHAINS * iterations) as f64 / seconds * 1e-9
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Baselines {
    /// GB/s.
    pub bandwidth: f64,
    /// GFlop/s.
    pub peak_flops: f64,
}

impl Baselines {
    pub fn measure(timing: Timing) -> Self {
        Self { bandwidth: measure_bandwidth(1 << 23, timing), peak_flops: measure_peak_flops(1 << 16, timing) }
    }

    /// Memory-bound kinetics throughput (DoF/s).
    pub fn max_dof_per_second(&self) -> f64 {
        self.bandwidth * 1e9 / BYTES_PER_DOF
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RooflineReport {
    pub measured_bandwidth: f64,
    pub peak_flops: f64,
    pub instruction_mix_factor: f64,
    pub runs: Vec<Measurement>,
}

/// A run whose achieved rate exceeds the modelled ceiling.
#[derive(Clone, Debug, PartialEq)]
pub struct CeilingViolation {
    pub run: usize,
    pub achieved: f64,
    pub ceiling: f64,
}

impl RooflineReport {
    pub fn new(baselines: Baselines, instruction_mix_factor: f64, runs: Vec<Measurement>) -> Self {
        Self { measured_bandwidth: baselines.bandwidth, peak_flops: baselines.peak_flops, instruction_mix_factor, runs }
    }

    /// Attainable GFlop/s at `intensity` Flop/byte.
    pub fn ceiling(&self, intensity: f64) -> f64 {
        (self.peak_flops * self.instruction_mix_factor).min(intensity * self.measured_bandwidth)
    }

    pub fn violations(&self) -> Vec<CeilingViolation> {
        self.runs
            .iter()
            .enumerate()
            .filter_map(|(run, m)| {
                let ceiling = self.ceiling(m.intensity());
                let achieved = m.gflops();
                (achieved > ceiling * (1.0 + NOISE_ALLOWANCE)).then_some(CeilingViolation { run, achieved, ceiling })
            })
            .collect()
    }

    pub fn write_csv<W: Write>(&self, w: W) -> io::Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record([
            "block_size",
            "n_points",
            "scheme",
            "lanes",
            "seconds",
            "dof_per_second",
            "flops",
            "bytes",
            "intensity",
            "gflops",
            "ceiling_gflops",
            "bandwidth_gbs",
        ])?;
        for m in &self.runs {
            out.write_record([
                m.block_size.to_string(),
                m.n_points.to_string(),
                m.scheme.to_string(),
                m.lanes.to_string(),
                m.seconds.to_string(),
                m.dof_per_second.to_string(),
                m.flops.to_string(),
                m.bytes.to_string(),
                m.intensity().to_string(),
                m.gflops().to_string(),
                self.ceiling(m.intensity()).to_string(),
                m.bandwidth().to_string(),
            ])?;
        }
        out.flush()
    }

    /// Whitespace-separated data with the ceilings as header comments.
    pub fn write_gnuplot<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "# bandwidth_gbs {}", self.measured_bandwidth)?;
        writeln!(w, "# peak_gflops {}", self.peak_flops)?;
        writeln!(w, "# instruction_mix_factor {}", self.instruction_mix_factor)?;
        writeln!(
            w,
            "# ceiling(x) = min({}, x * {})",
            self.peak_flops * self.instruction_mix_factor,
            self.measured_bandwidth
        )?;
        writeln!(w, "# intensity gflops block_size lanes scheme")?;
        for m in &self.runs {
            writeln!(w, "{} {} {} {} {}", m.intensity(), m.gflops(), m.block_size, m.lanes, m.scheme)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn alternating_blocks() {
        let f = generate_layout(1, 8, 1);
        for i in 0..7 {
            assert_ne!(block_kind(i, 1), block_kind(i + 1, 1));
            assert_ne!(f.temperature_old[i] > 1100.0, f.temperature_old[i + 1] > 1100.0);
        }
        let f = generate_layout(100, 200, 1);
        assert!((0..100).all(|i| f.temperature_old[i] < 1100.0));
        assert!((100..200).all(|i| f.temperature_old[i] > 1100.0));
        assert_eq!(generate_layout(10, 500, 7), generate_layout(10, 500, 7));
        assert_ne!(generate_layout(10, 500, 7), generate_layout(10, 500, 8));
    }

    #[test]
    fn flop_counts() {
        let f = generate_layout(100, 200, 3);
        let explicit = count_flops(&f, Scheme::Explicit, 8, 1e-3).unwrap();
        let implicit = count_flops(&f, Scheme::CrankNicolson, 8, 1e-3).unwrap();
        assert!(explicit > 0);
        assert!(implicit >= 2 * explicit, "{implicit} vs {explicit}");
        assert_eq!(count_flops(&GlobalFields::default(), Scheme::Explicit, 8, 1e-3).unwrap(), 0);
    }

    #[test]
    fn mixed_lanes_raise_intensity() {
        let one = generate_layout(1, 800, 3);
        let hundred = generate_layout(100, 800, 3);
        assert!(
            count_flops(&one, Scheme::Explicit, 8, 1e-3).unwrap()
                > count_flops(&hundred, Scheme::Explicit, 8, 1e-3).unwrap()
        );
    }

    #[test]
    fn ceiling_and_report() {
        let m = Measurement {
            block_size: 1,
            n_points: 10,
            scheme: Scheme::Explicit,
            lanes: 8,
            seconds: 1.0,
            dof_per_second: 30.0,
            flops: 0,
            bytes: 720,
        };
        let report = RooflineReport::new(Baselines { bandwidth: 10.0, peak_flops: 50.0 }, 1.0, vec![m]);
        assert_eq!(report.ceiling(1.0), 10.0);
        assert_eq!(report.ceiling(100.0), 50.0);
        assert!(report.violations().is_empty());
        let mut csv = Vec::new();
        report.write_csv(&mut csv).unwrap();
        let text = String::from_utf8(csv).unwrap();
        assert_eq!(text.lines().count(), 2);
        assert!(text.lines().nth(1).unwrap().starts_with("1,10,explicit,8,"));
        let fast = Measurement { flops: 100_000_000_000, ..report.runs[0].clone() };
        let report = RooflineReport { runs: vec![fast], ..report };
        assert_eq!(report.violations().len(), 1);
    }

    #[test]
    fn memory_bound_throughput() {
        let b = Baselines { bandwidth: 162.0, peak_flops: 1000.0 };
        assert!((b.max_dof_per_second() - 6.75e9).abs() < 1.0);
    }

    #[test]
    fn median_of_samples() {
        assert_eq!(median(vec![3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(vec![4.0, 1.0, 2.0, 3.0]), 2.5);
    }
}
