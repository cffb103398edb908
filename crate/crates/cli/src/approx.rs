use std::path::PathBuf;

use amphase::fastmath::{error_sweep, ApproxFn, Spacing};
use clap::ValueEnum;

use crate::{open_output, CliError};

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Function {
    Exp,
    Ln,
    Pow,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SpacingArg {
    Linear,
    Log,
}

#[derive(Debug, clap::Args)]
pub struct Args {
    #[arg(long = "fn", value_enum)]
    pub function: Function,
    /// Sweep interval `LO HI`; for pow the base range.
    #[arg(long, num_args = 2, value_names = ["LO", "HI"], allow_negative_numbers = true)]
    pub range: Vec<f64>,
    #[arg(long, default_value_t = 100_000)]
    pub samples: usize,
    /// Linear for exp, logarithmic otherwise when omitted.
    #[arg(long, value_enum)]
    pub spacing: Option<SpacingArg>,
    /// Exponent of the pow sweep.
    #[arg(long, default_value_t = 2.51)]
    pub exponent: f64,
    /// Exit with status 3 when the maximum relative error exceeds this.
    #[arg(long)]
    pub tolerance: Option<f64>,
    /// Sweep CSV; standard output by default.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn run(args: &Args) -> Result<(), CliError> {
    let (lo, hi) = match args.range.as_slice() {
        [lo, hi] => (*lo, *hi),
        _ => return Err(CliError::Usage("--range takes two values".into())),
    };
    let spacing = match args.spacing {
        Some(SpacingArg::Linear) => Spacing::Linear,
        Some(SpacingArg::Log) => Spacing::Logarithmic,
        None if args.function == Function::Exp => Spacing::Linear,
        None => Spacing::Logarithmic,
    };
    if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
        return Err(CliError::Validation("--range: LO must be below HI".into()));
    }
    if spacing == Spacing::Logarithmic && !(lo > 0.0) {
        return Err(CliError::Validation("--range: logarithmic sweeps need LO > 0".into()));
    }
    if args.samples < 2 {
        return Err(CliError::Validation("--samples must be at least 2".into()));
    }
    let func = match args.function {
        Function::Exp => ApproxFn::Exp,
        Function::Ln => ApproxFn::Ln,
        Function::Pow => ApproxFn::Pow { exponent: args.exponent },
    };
    let rows = error_sweep(func, lo, hi, args.samples, spacing);
    let mut w = csv::Writer::from_writer(open_output(args.out.as_ref())?);
    let err = |e: csv::Error| CliError::io("writing sweep", e);
    w.write_record(["x", "exact", "approx", "rel_err"]).map_err(err)?;
    let mut max_err = 0.0f64;
    for r in &rows {
        max_err = max_err.max(r.rel_err);
        w.write_record([r.x, r.exact, r.approx, r.rel_err].map(|v| v.to_string())).map_err(err)?;
    }
    w.flush().map_err(|e| CliError::io("writing sweep", e))?;
    eprintln!("max relative error {max_err:e} over {} samples", rows.len());
    match args.tolerance {
        Some(tol) if max_err > tol => {
            Err(CliError::Runtime(format!("max relative error {max_err:e} exceeds tolerance {tol:e}")))
        }
        _ => Ok(()),
    }
}
