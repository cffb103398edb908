//! Acceptance suite. Prints one PASS/FAIL line per criterion.
//!
//! The process exits 0 even when a criterion fails so that the regular test
//! run reports the outcome without aborting; set `AMPHASE_ACCEPTANCE_STRICT=1`
//! to turn any failure into a nonzero exit.

use std::time::Instant;

use amphase::batch::{step_all, BatchOptions, GlobalFields, LANE_WIDTHS};
use amphase::bench::{
    generate_layout, measure_throughput, Baselines, Measurement, ThroughputConfig, Timing, NOISE_ALLOWANCE,
};
use amphase::fastmath::{fast_exp, fast_ln, fast_pow};
use amphase::integrator::{integrate_interval, IntegratorConfig, PointIntegrator, Scheme, SeedingState};
use amphase::kinetics::{KineticsParams, PhaseState};
use amphase::scanpath::{four_islands, serpentine, ScanPath};
use amphase::thermal::{
    run_build, Boundaries, BuildConfig, BuildGeometry, BuildResult, Grid, HeatSource, ThermalField, ThermalParams,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

// Criterion 1
const EXP_SAMPLES: usize = 1_000_000;
const EXP_TOL: f64 = 1e-6;
const LN_SAMPLES: usize = 1_000_000;
const LN_TOL: f64 = 1e-6;
const POW_GRID: usize = 1000;
const POW_TOL: f64 = 1e-5;
// Criterion 2
const LANE_STATES: usize = 10_000;
const LANE_IMPLICIT_TOL: f64 = 1e-12;
// Criterion 3
const HISTORIES: usize = 100;
const CONTINUITY_TOL: f64 = 1e-12;
// Criterion 4
const HOLD_SECONDS: f64 = 1e4;
const HOLD_TOL: f64 = 1e-3;
// Criterion 5
const CONSTANT_T: f64 = 1200.0;
const CONSTANT_SECONDS: f64 = 1e3;
const CLOSED_FORM_TOL: f64 = 1e-4;
// Criterion 6
const COOL_OUTPUTS: usize = 100;
const CROSS_TOL: f64 = 1e-3;
// Criteria 7 and 8
const HATCH: f64 = 0.08e-3;
const SPEED: f64 = 0.96;
const POWER: f64 = 180.0;
const MARTENSITE_RANGE: (f64, f64) = (0.88, 0.9);
const BETA_RANGE: (f64, f64) = (0.09, 0.12);
const ROOM_PREHEAT: f64 = 293.0;
const ROOM_LAYERS: usize = 5;
const ROOM_DWELL: f64 = 1.0;
const HOT_PREHEAT: f64 = 600.0;
const HOT_LAYERS: usize = 5;
const HOT_DWELL: f64 = 1.0;
const STRATEGY_MIN_DIFF: f64 = 0.01;
// Criterion 9
const BENCH_POINTS: usize = 1 << 20;
const BENCH_ROUNDS: usize = 3;
const SATURATION: f64 = 0.7;
// Criterion 10
const ENTHALPY_STEPS: usize = 1000;
const ENTHALPY_TOL: f64 = 1e-10;

struct Outcome {
    criterion: u32,
    pass: bool,
}

fn run(out: &mut Vec<Outcome>, criterion: u32, name: &str, mut check: impl FnMut() -> (bool, String)) {
    let started = Instant::now();
    let (pass, detail) = check();
    let verdict = if pass { "PASS" } else { "FAIL" };
    println!("{verdict} criterion {criterion:>2} {name}: {detail} [{:.1} s]", started.elapsed().as_secs_f64());
    out.push(Outcome { criterion, pass });
}

fn rel(approx: f64, exact: f64) -> f64 {
    ((approx - exact) / exact).abs()
}

fn fastmath_accuracy() -> (bool, String) {
    let (lo, hi) = (-700.0, 709.0);
    let exp_err = (0..EXP_SAMPLES)
        .map(|i| lo + (hi - lo) * i as f64 / (EXP_SAMPLES - 1) as f64)
        .map(|x| rel(fast_exp(x), x.exp()))
        .fold(0.0, f64::max);
    let (llo, lhi) = (1e-300f64.ln(), 1e300f64.ln());
    let ln_err = (0..LN_SAMPLES)
        .map(|i| (llo + (lhi - llo) * i as f64 / (LN_SAMPLES - 1) as f64).exp())
        .filter(|&x| (x - 1.0).abs() > 1e-12)
        .map(|x| rel(fast_ln(x), x.ln()))
        .fold(0.0, f64::max);
    let mut pow_err = 0.0f64;
    for i in 0..POW_GRID {
        let a = 10f64.powf(-12.0 * i as f64 / (POW_GRID - 1) as f64);
        for j in 0..POW_GRID {
            let x = 2.0 * j as f64 / (POW_GRID - 1) as f64;
            pow_err = pow_err.max(rel(fast_pow(a, x), a.powf(x)));
        }
    }
    let pass = exp_err <= EXP_TOL && ln_err <= LN_TOL && pow_err <= POW_TOL;
    (pass, format!("exp {exp_err:.2e} <= {EXP_TOL:e}, ln {ln_err:.2e} <= {LN_TOL:e}, pow {pow_err:.2e} <= {POW_TOL:e}"))
}

fn random_state(rng: &mut ChaCha8Rng) -> PhaseState {
    match rng.gen_range(0..6) {
        0 => PhaseState::annealed(),
        1 => PhaseState::fresh_beta(),
        _ => {
            let s = rng.gen_range(0.0..=0.9);
            let m = (0.9 - s) * rng.gen_range(0.0..=1.0);
            PhaseState::new(s, m, 1.0 - s - m)
        }
    }
}

fn lane_equivalence() -> (bool, String) {
    let params = KineticsParams::default();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let states: Vec<_> = (0..LANE_STATES).map(|_| random_state(&mut rng)).collect();
    let t_old: Vec<f64> = (0..LANE_STATES).map(|_| rng.gen_range(280.0..2000.0)).collect();
    let t_new: Vec<f64> = t_old.iter().map(|t| t + rng.gen_range(-50.0..50.0)).collect();
    let layout = GlobalFields::from_states(&states, t_old.clone(), t_new.clone());
    let dt = 1e-3;
    let mut explicit_mismatch = 0usize;
    let mut implicit_err = 0.0f64;
    for scheme in [Scheme::Explicit, Scheme::CrankNicolson] {
        let cfg = IntegratorConfig::with_scheme(scheme);
        let scalar: Vec<PhaseState> = (0..LANE_STATES)
            .map(|i| {
                integrate_interval(&states[i], &SeedingState::default(), t_old[i], t_new[i], dt, &params, &cfg)
                    .expect("scalar step")
                    .0
            })
            .collect();
        for lanes in LANE_WIDTHS {
            let mut fields = layout.clone();
            step_all(&mut fields, dt, &params, &cfg, BatchOptions { lanes, parallel: false }).expect("batch step");
            for (i, want) in scalar.iter().enumerate() {
                let got = fields.state(i);
                match scheme {
                    Scheme::Explicit => explicit_mismatch += usize::from(got != *want),
                    Scheme::CrankNicolson => {
                        let err = (got.x_alpha_s - want.x_alpha_s)
                            .abs()
                            .max((got.x_alpha_m - want.x_alpha_m).abs())
                            .max((got.x_beta - want.x_beta).abs());
                        implicit_err = implicit_err.max(err);
                    }
                }
            }
        }
    }
    let pass = explicit_mismatch == 0 && implicit_err <= LANE_IMPLICIT_TOL;
    (
        pass,
        format!(
            "{LANE_STATES} states x lanes {LANE_WIDTHS:?}: explicit mismatches {explicit_mismatch}, implicit max {implicit_err:.1e} <= {LANE_IMPLICIT_TOL:e}"
        ),
    )
}

fn liquid_oracle(t: f64, p: &KineticsParams) -> f64 {
    ((t - p.t_solidus) / (p.t_liquidus - p.t_solidus)).clamp(0.0, 1.0)
}

fn continuity() -> (bool, String) {
    let params = KineticsParams::default();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst = 0.0f64;
    let mut steps = 0usize;
    for _ in 0..HISTORIES {
        let knots: Vec<(f64, f64)> = {
            let mut t = 0.0;
            (0..8)
                .map(|_| {
                    let k = (t, rng.gen_range(293.0..=2000.0));
                    t += rng.gen_range(0.2..2.0);
                    k
                })
                .collect()
        };
        let start = random_state(&mut rng);
        for scheme in [Scheme::Explicit, Scheme::CrankNicolson] {
            let dt = if scheme == Scheme::Explicit { 1e-3 } else { 1e-2 };
            let mut it = PointIntegrator::new(start, params, IntegratorConfig::with_scheme(scheme));
            for w in knots.windows(2) {
                let ((ta, temp_a), (tb, temp_b)) = (w[0], w[1]);
                let n = ((tb - ta) / dt).ceil() as usize;
                for j in 0..n {
                    let t0 = temp_a + (temp_b - temp_a) * j as f64 / n as f64;
                    let t1 = temp_a + (temp_b - temp_a) * (j + 1) as f64 / n as f64;
                    let s = it.advance(t0, t1, (tb - ta) / n as f64).expect("history step");
                    worst = worst.max((s.total() - (1.0 - liquid_oracle(t1, &params))).abs());
                    steps += 1;
                }
            }
        }
    }
    (worst <= CONTINUITY_TOL, format!("{steps} steps, max deviation {worst:.1e} <= {CONTINUITY_TOL:e}"))
}

fn alpha_eq_oracle(t: f64, p: &KineticsParams) -> f64 {
    if t < p.t_alpha_s_end {
        0.9
    } else if t > p.t_alpha_s_start {
        0.0
    } else {
        1.0 - (-p.k_alpha_eq * (p.t_alpha_s_start - t)).exp()
    }
}

fn equilibrium_convergence() -> (bool, String) {
    let params = KineticsParams::default();
    let mut worst = 0.0f64;
    let mut parts = Vec::new();
    for t in [1000.0, 1100.0, 1200.0] {
        for scheme in [Scheme::Explicit, Scheme::CrankNicolson] {
            let mut it = PointIntegrator::new(PhaseState::fresh_beta(), params, IntegratorConfig::with_scheme(scheme));
            let dt = 1.0;
            for _ in 0..(HOLD_SECONDS / dt) as usize {
                it.advance(t, t, dt).expect("hold step");
            }
            let err = (it.state.x_alpha() - alpha_eq_oracle(t, &params)).abs();
            worst = worst.max(err);
            if scheme == Scheme::Explicit {
                parts.push(format!("{t} K {:.4}", it.state.x_alpha()));
            }
        }
    }
    (worst <= HOLD_TOL, format!("{}; max error {worst:.1e} <= {HOLD_TOL:e}", parts.join(", ")))
}

/// Dissolution of saturated stable alpha at constant temperature, from zero excess beta.
fn beta_closed_form(t_kelvin: f64, time: f64, p: &KineticsParams) -> f64 {
    let k_alpha_s = p.k1 / (1.0 + (-p.k3 * (t_kelvin - p.k2)).exp());
    let k_beta = p.f * k_alpha_s;
    let excess = (1.0 - alpha_eq_oracle(t_kelvin, p)) - 0.1;
    let c = p.c_beta;
    if time == 0.0 {
        return 0.1;
    }
    0.1 + excess / (1.0 + (c / (excess * k_beta * time)).powf(c))
}

fn closed_form_oracle() -> (bool, String) {
    let params = KineticsParams::default();
    let mut parts = Vec::new();
    let mut pass = true;
    for (scheme, dt) in [(Scheme::Explicit, 1e-4), (Scheme::CrankNicolson, 1e-2)] {
        let mut it = PointIntegrator::new(PhaseState::annealed(), params, IntegratorConfig::with_scheme(scheme));
        let steps = (CONSTANT_SECONDS / dt).round() as usize;
        let mut worst = 0.0f64;
        for n in 1..=steps {
            let s = it.advance(CONSTANT_T, CONSTANT_T, dt).expect("constant step");
            let beta = if it.seeding.active { 0.1 + it.seeding.shifted } else { s.x_beta };
            worst = worst.max((beta - beta_closed_form(CONSTANT_T, n as f64 * dt, &params)).abs());
        }
        pass &= worst <= CLOSED_FORM_TOL;
        parts.push(format!("{scheme:?} max {worst:.1e}"));
    }
    (pass, format!("{} <= {CLOSED_FORM_TOL:e}", parts.join(", ")))
}

fn scheme_cross_check() -> (bool, String) {
    let params = KineticsParams::default();
    let (t_hot, t_cold, duration) = (1300.0, 300.0, 10.0);
    let temp = |t: f64| t_hot + (t_cold - t_hot) * t / duration;
    let sample = |scheme: Scheme, dt: f64| {
        let mut it = PointIntegrator::new(PhaseState::fresh_beta(), params, IntegratorConfig::with_scheme(scheme));
        let per_output = (duration / COOL_OUTPUTS as f64 / dt).round() as usize;
        let mut out = Vec::with_capacity(COOL_OUTPUTS);
        let mut n = 0usize;
        for _ in 0..COOL_OUTPUTS {
            for _ in 0..per_output {
                it.advance(temp(n as f64 * dt), temp((n + 1) as f64 * dt), dt).expect("cooling step");
                n += 1;
            }
            out.push(it.state);
        }
        out
    };
    let explicit = sample(Scheme::Explicit, 1e-5);
    let implicit = sample(Scheme::CrankNicolson, 1e-3);
    let worst = explicit
        .iter()
        .zip(&implicit)
        .map(|(a, b)| {
            (a.x_alpha_s - b.x_alpha_s).abs().max((a.x_alpha_m - b.x_alpha_m).abs()).max((a.x_beta - b.x_beta).abs())
        })
        .fold(0.0, f64::max);
    let last = explicit.last().unwrap();
    (
        worst <= CROSS_TOL,
        format!(
            "final ({:.4}, {:.4}, {:.4}), max difference {worst:.1e} <= {CROSS_TOL:e}",
            last.x_alpha_s, last.x_alpha_m, last.x_beta
        ),
    )
}

fn cube_build(islands: bool, preheat: f64, layers: usize, dwell: f64) -> BuildResult {
    let geometry = BuildGeometry { n_layers: layers, ..BuildGeometry::cube_proxy() };
    let mut segments = Vec::new();
    for layer in 0..layers as u32 {
        let s = if islands {
            four_islands(geometry.part_extent(), HATCH, SPEED, POWER, layer)
        } else {
            serpentine(geometry.part_extent(), HATCH, SPEED, POWER, layer)
        };
        segments.extend(s.expect("scan pattern"));
    }
    let mut cfg = BuildConfig::new(geometry);
    cfg.schedule.preheat = preheat;
    cfg.schedule.dwell = Some(dwell);
    run_build(&cfg, &ScanPath { segments, dwell }, &mut ()).expect("cube build")
}

fn melted(r: &BuildResult) -> Vec<usize> {
    r.field.melted(ThermalParams::default().t_solidus).collect()
}

fn fully_martensitic(r: &BuildResult) -> (bool, String) {
    let ids = melted(r);
    let range = |f: &dyn Fn(usize) -> f64| {
        ids.iter().map(|&i| f(i)).fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)))
    };
    let am = range(&|i| r.phases.x_alpha_m[i]);
    let b = range(&|i| r.phases.x_beta[i]);
    let inside = |(lo, hi): (f64, f64), (a, z): (f64, f64)| lo >= a && hi <= z;
    let pass = !ids.is_empty() && inside(am, MARTENSITE_RANGE) && inside(b, BETA_RANGE);
    (
        pass,
        format!(
            "{} melted voxels, X_am [{:.6}, {:.6}] in {MARTENSITE_RANGE:?}, X_b [{:.6}, {:.6}] in {BETA_RANGE:?}",
            ids.len(),
            am.0,
            am.1,
            b.0,
            b.1
        ),
    )
}

fn strategy_sensitivity(single: &BuildResult, four: &BuildResult) -> (bool, String) {
    let t_solidus = ThermalParams::default().t_solidus;
    let both: Vec<usize> = (0..single.field.grid.len())
        .filter(|&i| single.field.peak_temperature[i] > t_solidus && four.field.peak_temperature[i] > t_solidus)
        .collect();
    let diff = both.iter().map(|&i| (single.phases.x_alpha_s[i] - four.phases.x_alpha_s[i]).abs()).fold(0.0, f64::max);
    let peak = |r: &BuildResult| both.iter().map(|&i| r.phases.x_alpha_s[i]).fold(0.0, f64::max);
    (
        diff > STRATEGY_MIN_DIFF,
        format!(
            "{} voxels melted in both, max |dX_as| {diff:.2e} > {STRATEGY_MIN_DIFF} (max X_as single {:.2e}, four {:.2e})",
            both.len(),
            peak(single),
            peak(four)
        ),
    )
}

/// Median over interleaved rounds, so slow drifts of a shared machine hit every configuration alike.
fn interleaved(layout: &GlobalFields, block: usize) -> Vec<(Scheme, usize, Measurement)> {
    let config = ThroughputConfig::default();
    let configs: Vec<(Scheme, usize)> =
        [Scheme::Explicit, Scheme::CrankNicolson].iter().flat_map(|&s| LANE_WIDTHS.map(|l| (s, l))).collect();
    let mut rounds: Vec<Vec<Measurement>> = vec![Vec::new(); configs.len()];
    for _ in 0..BENCH_ROUNDS {
        for (k, &(scheme, lanes)) in configs.iter().enumerate() {
            rounds[k].push(measure_throughput(layout, block, scheme, lanes, config).expect("sweep"));
        }
    }
    configs
        .into_iter()
        .zip(rounds)
        .map(|((scheme, lanes), mut runs)| {
            runs.sort_by(|a, b| a.dof_per_second.total_cmp(&b.dof_per_second));
            (scheme, lanes, runs.swap_remove(BENCH_ROUNDS / 2))
        })
        .collect()
}

fn throughput_ordering() -> (bool, String) {
    let baselines = Baselines::measure(Timing::default());
    let mut pass = true;
    let mut notes = Vec::new();
    let mut best_100: Option<Measurement> = None;
    for block in [1usize, 10, 100] {
        let layout = generate_layout(block, BENCH_POINTS, 7);
        let runs = interleaved(&layout, block);
        let rate = |scheme: Scheme, lanes: usize| {
            runs.iter().find(|r| r.0 == scheme && r.1 == lanes).map(|r| r.2.dof_per_second).unwrap()
        };
        let explicit: Vec<f64> = LANE_WIDTHS.iter().map(|&l| rate(Scheme::Explicit, l)).collect();
        for &lanes in &LANE_WIDTHS {
            let (e, c) = (rate(Scheme::Explicit, lanes), rate(Scheme::CrankNicolson, lanes));
            if c > e * (1.0 + NOISE_ALLOWANCE) {
                pass = false;
                notes.push(format!("block {block} lanes {lanes}: implicit {c:.3e} > explicit {e:.3e}"));
            }
        }
        for (w, pair) in explicit.windows(2).enumerate() {
            if pair[1] < pair[0] * (1.0 - NOISE_ALLOWANCE) {
                pass = false;
                notes.push(format!(
                    "block {block}: lanes {} -> {} drops {:.3e} -> {:.3e}",
                    LANE_WIDTHS[w],
                    LANE_WIDTHS[w + 1],
                    pair[0],
                    pair[1]
                ));
            }
        }
        notes.push(format!(
            "block {block} explicit {}",
            explicit.iter().map(|v| format!("{v:.3e}")).collect::<Vec<_>>().join("/")
        ));
        if block == 100 {
            best_100 = runs
                .iter()
                .filter(|r| r.0 == Scheme::Explicit)
                .map(|r| r.2.clone())
                .max_by(|a, b| a.dof_per_second.total_cmp(&b.dof_per_second));
        }
    }
    let best = best_100.expect("block 100 measured");
    let roofline = baselines.peak_flops.min(best.intensity() * baselines.bandwidth) * 1e9 * (3 * best.n_points) as f64
        / best.flops as f64;
    let bound = baselines.max_dof_per_second();
    let fraction = best.dof_per_second / bound;
    pass &= fraction >= SATURATION;
    notes.push(format!(
        "bandwidth {:.2} GB/s, peak {:.2} GFlop/s, block 100 at {:.1}% of {:.3e} DoF/s (need {:.0}%); \
         {:.2} flop/B puts the roofline ceiling at {:.3e} DoF/s",
        baselines.bandwidth,
        baselines.peak_flops,
        100.0 * fraction,
        bound,
        100.0 * SATURATION,
        best.intensity(),
        roofline
    ));
    (pass, notes.join("; "))
}

fn insulated_enthalpy() -> (bool, f64) {
    let params = ThermalParams::default();
    let grid = Grid { nx: 12, ny: 10, nz: 8, h: 50e-6 };
    let mut field = ThermalField::new(grid, 5, 293.0, Boundaries { bottom: None, surface_losses: false });
    field.activate_layer(293.0).expect("layer");
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    for t in field.temperature.iter_mut() {
        *t = rng.gen_range(293.0..2500.0);
    }
    field.update_consolidation(&params);
    let off = HeatSource { power: 0.0, radius: 1.0, depth: 1.0, x: 0.0, y: 0.0, active: false };
    let e0 = field.enthalpy(&params);
    let dt = params.stable_dt(grid.h);
    for _ in 0..ENTHALPY_STEPS {
        field.step(&off, dt, &params).expect("thermal step");
    }
    let drift = (field.enthalpy(&params) - e0).abs() / e0;
    (drift <= ENTHALPY_TOL, drift)
}

fn main() {
    let mut out = Vec::new();
    run(&mut out, 1, "fast-math accuracy", fastmath_accuracy);
    run(&mut out, 2, "lane equivalence", lane_equivalence);
    run(&mut out, 3, "continuity invariant", continuity);
    run(&mut out, 4, "equilibrium convergence", equilibrium_convergence);
    run(&mut out, 5, "constant-temperature closed form", closed_form_oracle);
    run(&mut out, 6, "scheme cross-check", scheme_cross_check);

    let mut monotone = Vec::new();
    run(&mut out, 7, "fully martensitic cube proxy", || {
        let r = cube_build(false, ROOM_PREHEAT, ROOM_LAYERS, ROOM_DWELL);
        monotone.push(r.consolidation_monotone);
        fully_martensitic(&r)
    });
    run(&mut out, 8, "scan-strategy sensitivity", || {
        let single = cube_build(false, HOT_PREHEAT, HOT_LAYERS, HOT_DWELL);
        let four = cube_build(true, HOT_PREHEAT, HOT_LAYERS, HOT_DWELL);
        monotone.extend([single.consolidation_monotone, four.consolidation_monotone]);
        strategy_sensitivity(&single, &four)
    });
    run(&mut out, 9, "throughput ordering", throughput_ordering);
    run(&mut out, 10, "thermal sanity", || {
        let (conserved, drift) = insulated_enthalpy();
        let all_monotone = monotone.len() == 3 && monotone.iter().all(|&m| m);
        (
                conserved && all_monotone,
                format!(
                    "enthalpy drift {drift:.1e} per {ENTHALPY_STEPS} steps <= {ENTHALPY_TOL:e}, consolidation monotone in {}/3 builds",
                    monotone.iter().filter(|&&m| m).count()
                ),
            )
    });

    let failed: Vec<u32> = out.iter().filter(|o| !o.pass).map(|o| o.criterion).collect();
    println!("acceptance: {}/{} criteria pass", out.len() - failed.len(), out.len());
    if !failed.is_empty() {
        println!("failed: {failed:?}");
        if std::env::var_os("AMPHASE_ACCEPTANCE_STRICT").is_some_and(|v| v == "1") {
            std::process::exit(1);
        }
    }
}
