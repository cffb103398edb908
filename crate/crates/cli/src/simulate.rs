use std::fs::File;
use std::io::{self, BufWriter};
use std::path::{Path, PathBuf};
use std::time::Instant;

use amphase::batch::GlobalFields;
use amphase::thermal::{run_build, write_vtk, BuildObserver, ProbeSample, ThermalField};
use serde::Serialize;

use crate::config::RunConfig;
use crate::CliError;

#[derive(Debug, clap::Args)]
pub struct Args {
    /// Run configuration (TOML).
    pub config: PathBuf,
    /// Override `output.directory`.
    #[arg(long)]
    pub output_dir: Option<PathBuf>,
}

struct VtkWriter {
    dir: PathBuf,
    written: Vec<SnapshotEntry>,
}

#[derive(Serialize)]
struct SnapshotEntry {
    label: String,
    time: f64,
    file: String,
}

impl BuildObserver for VtkWriter {
    fn snapshot(&mut self, label: &str, time: f64, field: &ThermalField, phases: &GlobalFields) -> io::Result<()> {
        let file = format!("snapshot_{label}.vtk");
        let out = BufWriter::new(File::create(self.dir.join(&file))?);
        write_vtk(out, &format!("{label} t={time}"), field, phases)?;
        self.written.push(SnapshotEntry { label: label.to_string(), time, file });
        Ok(())
    }
}

#[derive(Serialize)]
struct Manifest<'a> {
    name: &'static str,
    version: &'static str,
    core_version: &'static str,
    config: &'a RunConfig,
    simulated_time: f64,
    wall_clock_seconds: f64,
    phase_seconds: amphase::thermal::PhaseTimings,
    counters: amphase::thermal::CouplingCounters,
    consolidation_monotone: bool,
    melted_voxels: usize,
    snapshots: &'a [SnapshotEntry],
    probes: Vec<String>,
}

pub fn write_probe_csv(path: &Path, samples: impl Iterator<Item = ProbeSample>) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| CliError::io(path.display(), e))?;
    let ctx = |e| CliError::io(path.display(), e);
    w.write_record(["t", "T", "x_alpha_s", "x_alpha_m", "x_beta"]).map_err(ctx)?;
    for s in samples {
        w.write_record([s.t, s.temperature, s.x_alpha_s, s.x_alpha_m, s.x_beta].map(|v| v.to_string())).map_err(ctx)?;
    }
    w.flush().map_err(|e| CliError::io(path.display(), e))
}

pub fn run(args: &Args) -> Result<(), CliError> {
    let mut cfg = RunConfig::load(&args.config)?;
    if let Some(dir) = &args.output_dir {
        cfg.output.directory = dir.clone();
    }
    let base = args.config.parent().unwrap_or(Path::new("."));
    let scan = cfg.scan_path(base)?;
    let dir = cfg.output.directory.clone();
    std::fs::create_dir_all(&dir).map_err(|e| CliError::io(dir.display(), e))?;

    let build = cfg.build_config();
    let mut observer = VtkWriter { dir: dir.clone(), written: Vec::new() };
    let start = Instant::now();
    let result =
        run_build(&build, &scan, &mut observer).map_err(|e| CliError::Runtime(format!("build failed: {e}")))?;
    let wall = start.elapsed().as_secs_f64();

    let mut probe_files = Vec::new();
    for p in 0..cfg.output.probes.len() {
        let file = format!("probe_{p}.csv");
        write_probe_csv(&dir.join(&file), result.probes.iter().filter(|s| s.probe == p).copied())?;
        probe_files.push(file);
    }

    std::fs::write(dir.join("config.resolved.toml"), cfg.to_toml()).map_err(|e| CliError::io(dir.display(), e))?;
    let manifest = Manifest {
        name: env!("CARGO_PKG_NAME"),
        version: env!("CARGO_PKG_VERSION"),
        core_version: amphase::VERSION,
        config: &cfg,
        simulated_time: result.time,
        wall_clock_seconds: wall,
        phase_seconds: result.timings,
        counters: result.counters,
        consolidation_monotone: result.consolidation_monotone,
        melted_voxels: result.field.melted(cfg.thermal.t_solidus).count(),
        snapshots: &observer.written,
        probes: probe_files,
    };
    let path = dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| CliError::io(path.display(), e))?;
    std::fs::write(&path, text).map_err(|e| CliError::io(path.display(), e))?;
    eprintln!(
        "simulated {:.4} s in {:.1} s wall clock; {} snapshots in {}",
        result.time,
        wall,
        observer.written.len(),
        dir.display()
    );
    Ok(())
}
