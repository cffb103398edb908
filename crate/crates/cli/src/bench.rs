use std::path::PathBuf;

use amphase::bench::{generate_layout, measure_throughput, Baselines, RooflineReport, ThroughputConfig, Timing};
use amphase::integrator::Scheme;

use crate::{open_output, CliError};

#[derive(Debug, clap::Args)]
pub struct Args {
    /// Branch block sizes of the synthetic layouts.
    #[arg(long = "block-size", default_values_t = [1usize, 10, 100])]
    pub block_sizes: Vec<usize>,
    /// Points per layout.
    #[arg(long, default_value_t = 1 << 16)]
    pub points: usize,
    /// Lane widths to measure.
    #[arg(long = "lanes", default_values_t = [1usize, 2, 4, 8])]
    pub lanes: Vec<usize>,
    #[arg(long = "scheme", default_values_t = [Scheme::Explicit, Scheme::CrankNicolson])]
    pub schemes: Vec<Scheme>,
    /// Timed repetitions; the median is reported.
    #[arg(long, default_value_t = 20)]
    pub reps: usize,
    #[arg(long, default_value_t = 10)]
    pub warmups: usize,
    /// Kinetics time step (s).
    #[arg(long, default_value_t = 1e-3)]
    pub dt: f64,
    /// Scale of the compute ceiling.
    #[arg(long, default_value_t = 1.0)]
    pub mix_factor: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Spread batches over the thread pool.
    #[arg(long)]
    pub parallel: bool,
    /// CSV report; standard output by default.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Gnuplot data file with the roofline ceilings in its header.
    #[arg(long)]
    pub gnuplot: Option<PathBuf>,
}

pub fn run(args: &Args) -> Result<(), CliError> {
    if args.points == 0 || args.reps == 0 {
        return Err(CliError::Validation("--points and --reps must be positive".into()));
    }
    if args.block_sizes.contains(&0) {
        return Err(CliError::Validation("--block-size must be at least 1".into()));
    }
    if let Some(l) = args.lanes.iter().find(|l| !amphase::batch::LANE_WIDTHS.contains(l)) {
        return Err(CliError::Validation(format!("--lanes {l}: must be one of {:?}", amphase::batch::LANE_WIDTHS)));
    }
    if !(args.dt > 0.0) || !(args.mix_factor > 0.0) {
        return Err(CliError::Validation("--dt and --mix-factor must be positive".into()));
    }
    let timing = Timing { warmups: args.warmups, repetitions: args.reps };
    let baselines = Baselines::measure(timing);
    let config = ThroughputConfig { dt: args.dt, timing, parallel: args.parallel };
    let mut runs = Vec::new();
    for &block in &args.block_sizes {
        let layout = generate_layout(block, args.points, args.seed);
        for &scheme in &args.schemes {
            for &lanes in &args.lanes {
                let m = measure_throughput(&layout, block, scheme, lanes, config)
                    .map_err(|e| CliError::Runtime(format!("benchmark failed: {e}")))?;
                eprintln!("block {block:>4} {scheme:<14} lanes {lanes}: {:.3e} DoF/s", m.dof_per_second);
                runs.push(m);
            }
        }
    }
    let report = RooflineReport::new(baselines, args.mix_factor, runs);
    eprintln!(
        "bandwidth {:.2} GB/s, peak {:.2} GFlop/s, memory-bound limit {:.3e} DoF/s",
        baselines.bandwidth,
        baselines.peak_flops,
        baselines.max_dof_per_second()
    );
    report.write_csv(open_output(args.out.as_ref())?).map_err(|e| CliError::io("writing report", e))?;
    if let Some(path) = &args.gnuplot {
        report.write_gnuplot(open_output(Some(path))?).map_err(|e| CliError::io(path.display(), e))?;
    }
    for v in report.violations() {
        eprintln!("warning: run {} reaches {:.3} GFlop/s above the ceiling {:.3}", v.run, v.achieved, v.ceiling);
    }
    Ok(())
}
