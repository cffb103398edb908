use std::path::{Path, PathBuf};

use amphase::integrator::{IntegratorConfig, PointIntegrator, Scheme};
use amphase::kinetics::{apply_corrections, KineticsParams, PhaseState};
use serde::Deserialize;

use crate::{open_output, CliError};

#[derive(Debug, clap::Args)]
pub struct Args {
    /// Temperature history CSV with columns `t,T`.
    pub history: PathBuf,
    /// Phase output CSV; standard output by default.
    #[arg(long, short)]
    pub output: Option<PathBuf>,
    /// TOML file with optional `[kinetics]` and `[integrator]` tables.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides the integrator scheme of the configuration.
    #[arg(long)]
    pub scheme: Option<Scheme>,
    /// Initial `x_alpha_s,x_alpha_m,x_beta`; freshly solidified beta by default.
    #[arg(long, value_delimiter = ',')]
    pub initial: Option<Vec<f64>>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct KineticsFile {
    #[serde(default)]
    kinetics: KineticsParams,
    #[serde(default)]
    integrator: IntegratorConfig,
}

#[derive(Debug, Deserialize)]
struct Row {
    t: f64,
    #[serde(rename = "T")]
    temperature: f64,
}

/// Rows of a `t,T` history; time must increase strictly.
pub fn read_history(path: &Path) -> Result<Vec<(f64, f64)>, CliError> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))?;
    let mut rows = Vec::new();
    for (i, rec) in reader.deserialize::<Row>().enumerate() {
        let row = rec.map_err(|e| CliError::Validation(format!("{} row {}: {e}", path.display(), i + 1)))?;
        if !row.t.is_finite() || !(row.temperature > 0.0) {
            return Err(CliError::Validation(format!("{} row {}: invalid time or temperature", path.display(), i + 1)));
        }
        if let Some(&(prev, _)) = rows.last() {
            if !(row.t > prev) {
                return Err(CliError::Validation(format!(
                    "{} row {}: time {} does not increase past {}",
                    path.display(),
                    i + 1,
                    row.t,
                    prev
                )));
            }
        }
        rows.push((row.t, row.temperature));
    }
    if rows.is_empty() {
        return Err(CliError::Validation(format!("{}: history is empty", path.display())));
    }
    Ok(rows)
}

/// Phase state after each history row.
pub fn integrate(
    rows: &[(f64, f64)],
    initial: PhaseState,
    params: &KineticsParams,
    config: &IntegratorConfig,
) -> Result<Vec<PhaseState>, CliError> {
    let start = apply_corrections(&initial, rows[0].1, params);
    let mut point = PointIntegrator::new(start, *params, *config);
    let mut out = vec![start];
    for w in rows.windows(2) {
        let ((t0, temp0), (t1, temp1)) = (w[0], w[1]);
        let state = point
            .advance(temp0, temp1, t1 - t0)
            .map_err(|e| CliError::Runtime(format!("integration failed between t = {t0} and t = {t1}: {e}")))?;
        out.push(state);
    }
    Ok(out)
}

pub fn run(args: &Args) -> Result<(), CliError> {
    let file = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::Validation(format!("cannot read {}: {e}", path.display())))?;
            serde_path_to_error::deserialize(toml::Deserializer::new(&text)).map_err(|e| {
                CliError::Validation(format!("{}: {}: {}", path.display(), e.path(), e.inner().message()))
            })?
        }
        None => KineticsFile::default(),
    };
    let mut config = file.integrator;
    if let Some(s) = args.scheme {
        config.scheme = s;
    }
    config.validate().map_err(|e| CliError::Validation(format!("integrator: {e}")))?;
    let initial = match args.initial.as_deref() {
        Some([s, m, b]) => {
            if [s, m, b].iter().any(|v| !(0.0..=1.0).contains(*v)) || (s + m + b - 1.0).abs() > 1e-12 {
                return Err(CliError::Validation("--initial: fractions must lie in [0, 1] and sum to 1".into()));
            }
            PhaseState::new(*s, *m, *b)
        }
        Some(_) => return Err(CliError::Usage("--initial takes three comma-separated values".into())),
        None => PhaseState::fresh_beta(),
    };
    let rows = read_history(&args.history)?;
    let states = integrate(&rows, initial, &file.kinetics, &config)?;

    let mut w = csv::Writer::from_writer(open_output(args.output.as_ref())?);
    let err = |e: csv::Error| CliError::io("writing phases", e);
    w.write_record(["t", "T", "x_alpha_s", "x_alpha_m", "x_beta"]).map_err(err)?;
    for (&(t, temp), s) in rows.iter().zip(&states) {
        w.write_record([t, temp, s.x_alpha_s, s.x_alpha_m, s.x_beta].map(|v| v.to_string())).map_err(err)?;
    }
    w.flush().map_err(|e| CliError::io("writing phases", e))
}
