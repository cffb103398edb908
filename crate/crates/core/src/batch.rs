//! Lane-batched driver over all material points.
//!
//! Points are stored as a structure of arrays. Each batch of `n_lanes`
//! consecutive points is loaded into lane arrays, integrated with the generic
//! kernels from [`crate::integrator`], and written back. The tail batch is
//! padded with copies of its first point and only valid lanes are stored.

use rayon::prelude::*;
use thiserror::Error;

use crate::integrator::{
    eligible_g, interpolate, robust_cn_scalar, step_cn_g, step_explicit_g, substep_count, IntegratorConfig,
    IntegratorError, Point, Scheme, SeedDirection, SeedingState,
};
use crate::kinetics::{KineticsParams, PhaseState};
use crate::simd::{LaneMask, Lanes, Real, Tally};

/// Supported batch widths.
pub const LANE_WIDTHS: [usize; 4] = [1, 2, 4, 8];
/// Modeled field traffic per point and step: five loads and four stores of 8 bytes.
pub const BYTES_PER_POINT: u64 = 72;
/// Points per parallel work item; a multiple of every lane width.
const CHUNK: usize = 2048;

/// Microstructure and temperature of every material point.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GlobalFields {
    pub x_alpha_s: Vec<f64>,
    pub x_alpha_m: Vec<f64>,
    pub x_beta: Vec<f64>,
    pub temperature_old: Vec<f64>,
    pub temperature_new: Vec<f64>,
    /// Closed-form seeding fraction, zero where no seeding is in progress.
    pub seed: Vec<f64>,
}

impl GlobalFields {
    pub fn uniform(n: usize, state: PhaseState, temperature: f64) -> Self {
        Self {
            x_alpha_s: vec![state.x_alpha_s; n],
            x_alpha_m: vec![state.x_alpha_m; n],
            x_beta: vec![state.x_beta; n],
            temperature_old: vec![temperature; n],
            temperature_new: vec![temperature; n],
            seed: vec![0.0; n],
        }
    }

    pub fn from_states(states: &[PhaseState], temperature_old: Vec<f64>, temperature_new: Vec<f64>) -> Self {
        assert_eq!(states.len(), temperature_old.len());
        assert_eq!(states.len(), temperature_new.len());
        Self {
            x_alpha_s: states.iter().map(|s| s.x_alpha_s).collect(),
            x_alpha_m: states.iter().map(|s| s.x_alpha_m).collect(),
            x_beta: states.iter().map(|s| s.x_beta).collect(),
            temperature_old,
            temperature_new,
            seed: vec![0.0; states.len()],
        }
    }

    pub fn len(&self) -> usize {
        self.x_alpha_s.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x_alpha_s.is_empty()
    }

    pub fn state(&self, i: usize) -> PhaseState {
        PhaseState::new(self.x_alpha_s[i], self.x_alpha_m[i], self.x_beta[i])
    }

    pub fn set_state(&mut self, i: usize, state: PhaseState) {
        self.x_alpha_s[i] = state.x_alpha_s;
        self.x_alpha_m[i] = state.x_alpha_m;
        self.x_beta[i] = state.x_beta;
        self.seed[i] = 0.0;
    }

    /// Seeding progress of point `i`.
    pub fn seeding(&self, i: usize) -> SeedingState {
        let raw = self.seed[i];
        if raw <= 0.0 {
            return SeedingState::default();
        }
        let direction = match eligible_g(self.x_alpha_s[i], self.x_alpha_m[i]) {
            (true, _) => SeedDirection::BetaToAlpha,
            _ => SeedDirection::AlphaToBeta,
        };
        SeedingState { shifted: raw, active: true, direction }
    }

    fn check(&self) -> Result<(), BatchError> {
        let n = self.len();
        let lens = [
            self.x_alpha_m.len(),
            self.x_beta.len(),
            self.temperature_old.len(),
            self.temperature_new.len(),
            self.seed.len(),
        ];
        if lens.iter().any(|&l| l != n) {
            return Err(BatchError::LengthMismatch);
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BatchOptions {
    pub lanes: usize,
    /// Distribute chunks over the rayon thread pool.
    pub parallel: bool,
}

impl Default for BatchOptions {
    fn default() -> Self {
        Self { lanes: 8, parallel: true }
    }
}

/// Counters of one [`step_all`] call.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct StepReport {
    pub points: u64,
    pub batches: u64,
    /// Intended traffic of the five field arrays.
    pub field_bytes: u64,
    /// Traffic of the seeding array, touched only by batches with stuck-state candidates.
    pub seed_bytes: u64,
    /// Fixed-point iterations summed over batches (each batch counts its slowest lane).
    pub batch_iterations: u64,
    /// Points recomputed on the scalar path after a lane failed to converge.
    pub fallback_points: u64,
}

impl StepReport {
    fn merge(mut self, other: Self) -> Self {
        self.points += other.points;
        self.batches += other.batches;
        self.field_bytes += other.field_bytes;
        self.seed_bytes += other.seed_bytes;
        self.batch_iterations += other.batch_iterations;
        self.fallback_points += other.fallback_points;
        self
    }
}

#[derive(Debug, Clone, Error, PartialEq)]
pub enum BatchError {
    #[error("field arrays differ in length")]
    LengthMismatch,
    #[error("unsupported lane width {0} (expected 1, 2, 4 or 8)")]
    LaneWidth(usize),
    #[error("time step must be positive, got {0}")]
    TimeStep(f64),
    #[error("integration failed at points {points:?}: {source}")]
    Integration { points: Vec<usize>, source: IntegratorError },
}

struct ChunkMut<'a> {
    offset: usize,
    s: &'a mut [f64],
    m: &'a mut [f64],
    b: &'a mut [f64],
    t_old: &'a mut [f64],
    t_new: &'a [f64],
    seed: &'a mut [f64],
}

fn chunks(fields: &mut GlobalFields, size: usize) -> Vec<ChunkMut<'_>> {
    let GlobalFields { x_alpha_s, x_alpha_m, x_beta, temperature_old, temperature_new, seed } = fields;
    x_alpha_s
        .chunks_mut(size)
        .zip(x_alpha_m.chunks_mut(size))
        .zip(x_beta.chunks_mut(size))
        .zip(temperature_old.chunks_mut(size))
        .zip(temperature_new.chunks(size))
        .zip(seed.chunks_mut(size))
        .enumerate()
        .map(|(i, (((((s, m), b), t_old), t_new), seed))| ChunkMut { offset: i * size, s, m, b, t_old, t_new, seed })
        .collect()
}

#[inline(always)]
fn load<const N: usize>(src: &[f64], base: usize, valid: usize) -> Lanes<N> {
    if valid == N {
        Lanes::from_slice(&src[base..base + N])
    } else {
        let mut out = Lanes::splat(src[base]);
        out.0[..valid].copy_from_slice(&src[base..base + valid]);
        out
    }
}

#[inline(always)]
fn store<const N: usize>(dst: &mut [f64], base: usize, valid: usize, v: Lanes<N>) {
    dst[base..base + valid].copy_from_slice(&v.0[..valid]);
}

#[inline(always)]
fn lane<const N: usize>(x: &Point<Lanes<N>>, l: usize) -> Point<f64> {
    Point { s: x.s[l], m: x.m[l], b: x.b[l], seed: x.seed[l] }
}

#[inline(always)]
fn set_lane<const N: usize>(x: &mut Point<Lanes<N>>, l: usize, v: Point<f64>) {
    x.s[l] = v.s;
    x.m[l] = v.m;
    x.b[l] = v.b;
    x.seed[l] = v.seed;
}

/// Subcycled integration of one lane batch.
#[allow(clippy::too_many_arguments)]
#[inline(always)]
fn integrate_lanes<const N: usize>(
    mut x: Point<Lanes<N>>,
    t_n: Lanes<N>,
    t_np1: Lanes<N>,
    dt_macro: f64,
    valid: usize,
    p: &KineticsParams,
    cfg: &IntegratorConfig,
    tally: &mut impl Tally,
    report: &mut StepReport,
) -> Result<Point<Lanes<N>>, (usize, IntegratorError)> {
    let n = substep_count(dt_macro, cfg);
    let dt = dt_macro / n as f64;
    for j in 0..n {
        let ta = interpolate(t_n, t_np1, j, n);
        let tb = interpolate(t_n, t_np1, j + 1, n);
        x = match cfg.scheme {
            Scheme::Explicit => step_explicit_g(x, ta, tb, dt, p, cfg, tally),
            Scheme::CrankNicolson => {
                let out = step_cn_g(x, ta, tb, dt, p, cfg, tally, |_| {});
                let slowest = out.iterations.0[..valid].iter().fold(0.0f64, |a, &b| a.max(b));
                report.batch_iterations += slowest as u64;
                let mut next = out.point;
                if !out.converged.all() {
                    for l in 0..valid {
                        if out.converged.0[l] {
                            continue;
                        }
                        report.fallback_points += 1;
                        let fixed =
                            robust_cn_scalar(lane(&x, l), ta[l], tb[l], dt, p, cfg, 0, tally).map_err(|e| (l, e))?;
                        set_lane(&mut next, l, fixed);
                    }
                }
                next
            }
        };
    }
    Ok(x)
}

fn process_chunk<const N: usize>(
    c: ChunkMut<'_>,
    dt: f64,
    p: &KineticsParams,
    cfg: &IntegratorConfig,
    tally: &mut impl Tally,
) -> Result<StepReport, BatchError> {
    let len = c.s.len();
    let mut report = StepReport::default();
    let mut failures = Vec::new();
    let mut first_error = None;
    let mut base = 0;
    while base < len {
        let valid = N.min(len - base);
        let s = load::<N>(c.s, base, valid);
        let m = load::<N>(c.m, base, valid);
        let b = load::<N>(c.b, base, valid);
        let t_n = load::<N>(c.t_old, base, valid);
        let t_np1 = load::<N>(c.t_new, base, valid);

        // A point can only carry a seed while it sits in a stuck-state shape.
        let (beta_shape, alpha_shape) = eligible_g(s, m);
        let seeded = !(beta_shape | alpha_shape).none();
        let seed = if seeded {
            report.seed_bytes += 8 * valid as u64;
            load::<N>(c.seed, base, valid)
        } else {
            Lanes::splat(0.0)
        };

        match integrate_lanes(Point { s, m, b, seed }, t_n, t_np1, dt, valid, p, cfg, tally, &mut report) {
            Ok(out) => {
                store(c.s, base, valid, out.s);
                store(c.m, base, valid, out.m);
                store(c.b, base, valid, out.b);
                if seeded || out.seed.0[..valid].iter().any(|&v| v != 0.0) {
                    report.seed_bytes += 8 * valid as u64;
                    store(c.seed, base, valid, out.seed);
                }
            }
            Err((l, e)) => {
                failures.push(c.offset + base + l);
                first_error.get_or_insert(e);
            }
        }
        c.t_old[base..base + valid].copy_from_slice(&c.t_new[base..base + valid]);

        report.points += valid as u64;
        report.batches += 1;
        report.field_bytes += BYTES_PER_POINT * valid as u64;
        base += N;
    }
    match first_error {
        Some(source) => Err(BatchError::Integration { points: failures, source }),
        None => Ok(report),
    }
}

fn run<const N: usize>(
    fields: &mut GlobalFields,
    dt: f64,
    p: &KineticsParams,
    cfg: &IntegratorConfig,
    parallel: bool,
) -> Result<StepReport, BatchError> {
    let work = chunks(fields, CHUNK);
    let results: Vec<Result<StepReport, BatchError>> = if parallel {
        work.into_par_iter().map(|c| process_chunk::<N>(c, dt, p, cfg, &mut ())).collect()
    } else {
        work.into_iter().map(|c| process_chunk::<N>(c, dt, p, cfg, &mut ())).collect()
    };
    combine(results)
}

fn combine(results: Vec<Result<StepReport, BatchError>>) -> Result<StepReport, BatchError> {
    let mut report = StepReport::default();
    let mut failed: Option<(Vec<usize>, IntegratorError)> = None;
    for r in results {
        match r {
            Ok(part) => report = report.merge(part),
            Err(BatchError::Integration { points, source }) => match &mut failed {
                Some((all, _)) => all.extend(points),
                None => failed = Some((points, source)),
            },
            Err(other) => return Err(other),
        }
    }
    match failed {
        Some((points, source)) => Err(BatchError::Integration { points, source }),
        None => Ok(report),
    }
}

fn validate(fields: &GlobalFields, dt: f64, lanes: usize) -> Result<(), BatchError> {
    fields.check()?;
    if !LANE_WIDTHS.contains(&lanes) {
        return Err(BatchError::LaneWidth(lanes));
    }
    if !(dt > 0.0) {
        return Err(BatchError::TimeStep(dt));
    }
    Ok(())
}

/// Advance every point over `dt` from `temperature_old` to `temperature_new`,
/// then copy `temperature_new` into `temperature_old`.
///
/// On failure the points that did not converge are listed and left unchanged;
/// all other points are updated.
pub fn step_all(
    fields: &mut GlobalFields,
    dt: f64,
    params: &KineticsParams,
    config: &IntegratorConfig,
    options: BatchOptions,
) -> Result<StepReport, BatchError> {
    validate(fields, dt, options.lanes)?;
    match options.lanes {
        1 => run::<1>(fields, dt, params, config, options.parallel),
        2 => run::<2>(fields, dt, params, config, options.parallel),
        4 => run::<4>(fields, dt, params, config, options.parallel),
        _ => run::<8>(fields, dt, params, config, options.parallel),
    }
}

/// Sequential [`step_all`] that reports every evaluated kernel stage to `tally`.
pub fn step_all_tallied(
    fields: &mut GlobalFields,
    dt: f64,
    params: &KineticsParams,
    config: &IntegratorConfig,
    lanes: usize,
    tally: &mut impl Tally,
) -> Result<StepReport, BatchError> {
    validate(fields, dt, lanes)?;
    fn go<const N: usize>(
        fields: &mut GlobalFields,
        dt: f64,
        p: &KineticsParams,
        cfg: &IntegratorConfig,
        tally: &mut impl Tally,
    ) -> Result<StepReport, BatchError> {
        let results = chunks(fields, CHUNK).into_iter().map(|c| process_chunk::<N>(c, dt, p, cfg, tally)).collect();
        combine(results)
    }
    match lanes {
        1 => go::<1>(fields, dt, params, config, tally),
        2 => go::<2>(fields, dt, params, config, tally),
        4 => go::<4>(fields, dt, params, config, tally),
        _ => go::<8>(fields, dt, params, config, tally),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::integrator::{integrate_interval, SeedingState};

    fn scalar_reference(fields: &GlobalFields, dt: f64, cfg: &IntegratorConfig) -> Vec<PhaseState> {
        let p = KineticsParams::default();
        (0..fields.len())
            .map(|i| {
                integrate_interval(
                    &fields.state(i),
                    &SeedingState::default(),
                    fields.temperature_old[i],
                    fields.temperature_new[i],
                    dt,
                    &p,
                    cfg,
                )
                .unwrap()
                .0
            })
            .collect()
    }

    fn alternating(n: usize) -> GlobalFields {
        let states: Vec<_> = (0..n)
            .map(|i| if i % 2 == 0 { PhaseState::new(0.3, 0.0, 0.7) } else { PhaseState::new(0.6, 0.2, 0.2) })
            .collect();
        let t_old = (0..n).map(|i| if i % 2 == 0 { 1000.0 } else { 1200.0 }).collect();
        let t_new = (0..n).map(|i| if i % 2 == 0 { 990.0 } else { 1210.0 }).collect();
        GlobalFields::from_states(&states, t_old, t_new)
    }

    #[test]
    fn identical_points_stay_identical() {
        let mut f = GlobalFields::uniform(1000, PhaseState::new(0.45, 0.0, 0.55), 1000.0);
        let cfg = IntegratorConfig::default();
        let want = scalar_reference(&f, 1e-3, &cfg)[0];
        step_all(&mut f, 1e-3, &KineticsParams::default(), &cfg, BatchOptions::default()).unwrap();
        for i in 0..1000 {
            assert_eq!(f.state(i), want);
        }
    }

    #[test]
    fn alternating_layout_matches_scalar() {
        for scheme in [Scheme::Explicit, Scheme::CrankNicolson] {
            let cfg = IntegratorConfig::with_scheme(scheme);
            for lanes in LANE_WIDTHS {
                let mut f = alternating(37);
                let want = scalar_reference(&f, 5e-3, &cfg);
                step_all(&mut f, 5e-3, &KineticsParams::default(), &cfg, BatchOptions { lanes, parallel: false })
                    .unwrap();
                for (i, w) in want.iter().enumerate() {
                    assert_eq!(f.state(i), *w, "{scheme} lanes {lanes} point {i}");
                }
                assert_eq!(f.temperature_old, f.temperature_new);
            }
        }
    }

    #[test]
    fn tail_batch_is_updated() {
        let mut f = alternating(13);
        let cfg = IntegratorConfig::default();
        let want = scalar_reference(&f, 1e-3, &cfg);
        let report =
            step_all(&mut f, 1e-3, &KineticsParams::default(), &cfg, BatchOptions { lanes: 8, parallel: true })
                .unwrap();
        assert_eq!(report.batches, 2);
        for (i, w) in want.iter().enumerate() {
            assert_eq!(f.state(i), *w);
        }
    }

    #[test]
    fn traffic_counter() {
        let mut f = alternating(1001);
        let r =
            step_all(&mut f, 1e-4, &KineticsParams::default(), &IntegratorConfig::default(), BatchOptions::default())
                .unwrap();
        assert_eq!(r.field_bytes, 72 * 1001);
        assert_eq!(r.seed_bytes, 0);
    }

    #[test]
    fn rejects_bad_input() {
        let mut f = alternating(4);
        let p = KineticsParams::default();
        let cfg = IntegratorConfig::default();
        assert_eq!(
            step_all(&mut f, 1e-3, &p, &cfg, BatchOptions { lanes: 3, parallel: false }),
            Err(BatchError::LaneWidth(3))
        );
        assert_eq!(step_all(&mut f, 0.0, &p, &cfg, BatchOptions::default()), Err(BatchError::TimeStep(0.0)));
        f.seed.pop();
        assert_eq!(step_all(&mut f, 1e-3, &p, &cfg, BatchOptions::default()), Err(BatchError::LengthMismatch));
    }

    #[test]
    fn failing_points_are_named() {
        let p = KineticsParams::default();
        let cfg = IntegratorConfig {
            scheme: Scheme::CrankNicolson,
            max_fixed_point_iters: 1,
            eps_abs: 1e-30,
            eps_rel: 1e-30,
            ..IntegratorConfig::default()
        };
        let mut states = vec![PhaseState::new(0.0, 0.0, 0.0); 6];
        states[4] = PhaseState::new(0.3, 0.0, 0.7);
        let mut f = GlobalFields::from_states(&states, vec![2000.0; 6], vec![2000.0; 6]);
        f.temperature_old[4] = 1000.0;
        f.temperature_new[4] = 1000.0;
        match step_all(&mut f, 0.005, &p, &cfg, BatchOptions { lanes: 4, parallel: false }) {
            Err(BatchError::Integration { points, .. }) => assert_eq!(points, vec![4]),
            other => panic!("unexpected {other:?}"),
        }
    }
}
