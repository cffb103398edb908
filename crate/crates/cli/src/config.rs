//! Run configuration file.
//!
//! TOML with one table per concern. `geometry`, `beam` and `scan` are
//! required; every other table falls back to the built-in defaults.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use amphase::batch::BatchOptions;
use amphase::integrator::IntegratorConfig;
use amphase::kinetics::{KineticsParams, PhaseState};
use amphase::scanpath::{four_islands, parse_path_file, serpentine, PathError, Rect, ScanPath, ScanSegment};
use amphase::thermal::{BeamParams, BuildConfig, BuildGeometry, Schedule, ThermalParams};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::CliError;

type Generator = fn(Rect, f64, f64, f64, u32) -> Result<Vec<ScanSegment>, PathError>;

/// Interlayer dwell used when neither the schedule nor a path file sets one (s).
pub const DEFAULT_DWELL: f64 = 1.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub geometry: BuildGeometry,
    pub beam: BeamConfig,
    pub scan: ScanConfig,
    #[serde(default)]
    pub schedule: Schedule,
    #[serde(default)]
    pub thermal: ThermalParams,
    #[serde(default)]
    pub kinetics: KineticsParams,
    #[serde(default)]
    pub integrator: IntegratorConfig,
    #[serde(default)]
    pub batch: BatchConfig,
    /// Microstructure of plate and powder `[x_alpha_s, x_alpha_m, x_beta]`.
    #[serde(default = "default_initial_state")]
    pub initial_state: [f64; 3],
    #[serde(default)]
    pub output: OutputConfig,
}

fn default_initial_state() -> [f64; 3] {
    let s = PhaseState::annealed();
    [s.x_alpha_s, s.x_alpha_m, s.x_beta]
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BeamConfig {
    /// Effective power (W).
    pub power: f64,
    /// Scan speed (m/s).
    pub speed: f64,
    /// Hatch distance (m).
    pub hatch: f64,
    #[serde(default = "default_radius")]
    pub radius: f64,
    /// Energy deposition depth; zero selects the layer thickness (m).
    #[serde(default)]
    pub depth: f64,
}

fn default_radius() -> f64 {
    BeamParams::default().radius
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Strategy {
    Serpentine,
    FourIslands,
    File(PathBuf),
}

impl FromStr for Strategy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "serpentine" => Ok(Self::Serpentine),
            "four_islands" => Ok(Self::FourIslands),
            _ => match s.strip_prefix("file:") {
                Some(path) if !path.is_empty() => Ok(Self::File(PathBuf::from(path))),
                _ => Err(format!("unknown scan strategy `{s}`; expected serpentine, four_islands or file:<path>")),
            },
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Serpentine => f.write_str("serpentine"),
            Self::FourIslands => f.write_str("four_islands"),
            Self::File(p) => write!(f, "file:{}", p.display()),
        }
    }
}

impl Serialize for Strategy {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Strategy {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScanConfig {
    pub strategy: Strategy,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BatchConfig {
    pub lanes: usize,
    pub parallel: bool,
}

impl Default for BatchConfig {
    fn default() -> Self {
        let d = BatchOptions::default();
        Self { lanes: d.lanes, parallel: d.parallel }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    pub directory: PathBuf,
    /// Snapshot after every n-th layer; 0 writes only the final state.
    pub snapshot_every: usize,
    /// Probe locations `[x, y, z]` (m).
    pub probes: Vec<[f64; 3]>,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self { directory: PathBuf::from("output"), snapshot_every: 1, probes: Vec::new() }
    }
}

fn validation(path: &str, message: impl fmt::Display) -> CliError {
    CliError::Validation(format!("{path}: {message}"))
}

impl RunConfig {
    /// Parse and validate; errors name the offending field.
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let de = toml::Deserializer::new(text);
        let cfg: Self = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            let inner = e.into_inner();
            let message = inner.message().to_string();
            if path.is_empty() || path == "." {
                CliError::Validation(message)
            } else {
                validation(&path, message)
            }
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Validation(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let g = &self.geometry;
        let lengths = [
            ("geometry.base_size", g.base_size[0].min(g.base_size[1])),
            ("geometry.base_height", g.base_height),
            ("geometry.part_size", g.part_size[0].min(g.part_size[1])),
            ("geometry.layer_thickness", g.layer_thickness),
            ("beam.power", self.beam.power),
            ("beam.speed", self.beam.speed),
            ("beam.hatch", self.beam.hatch),
            ("beam.radius", self.beam.radius),
            ("schedule.dt_active", self.schedule.dt_active),
            ("schedule.dt_max", self.schedule.dt_max),
        ];
        for (path, v) in lengths {
            if !(v > 0.0) {
                return Err(validation(path, "must be positive"));
            }
        }
        if !(self.beam.depth >= 0.0) {
            return Err(validation("beam.depth", "must not be negative"));
        }
        if g.n_layers == 0 {
            return Err(validation("geometry.n_layers", "must be positive"));
        }
        let grid = g.grid().map_err(|e| validation("geometry", e))?;
        self.schedule.validate().map_err(|e| validation("schedule", e))?;
        self.thermal.validate().map_err(|e| validation("thermal", e))?;
        self.integrator.validate().map_err(|e| validation("integrator", e))?;
        if !amphase::batch::LANE_WIDTHS.contains(&self.batch.lanes) {
            return Err(validation("batch.lanes", format!("must be one of {:?}", amphase::batch::LANE_WIDTHS)));
        }
        let [s, m, b] = self.initial_state;
        if [s, m, b].iter().any(|v| !(0.0..=1.0).contains(v)) || (s + m + b - 1.0).abs() > 1e-12 {
            return Err(validation("initial_state", "fractions must lie in [0, 1] and sum to 1"));
        }
        for (i, p) in self.output.probes.iter().enumerate() {
            if grid.locate(*p).is_none() {
                return Err(validation(&format!("output.probes[{i}]"), "lies outside the domain"));
            }
        }
        Ok(())
    }

    /// Scan path for all layers; relative path files resolve against `base_dir`.
    pub fn scan_path(&self, base_dir: &Path) -> Result<ScanPath, CliError> {
        let extent = self.geometry.part_extent();
        let b = &self.beam;
        let generate = |f: Generator| -> Result<ScanPath, CliError> {
            let mut segments = Vec::new();
            for layer in 0..self.geometry.n_layers as u32 {
                segments.extend(f(extent, b.hatch, b.speed, b.power, layer).map_err(|e| validation("scan", e))?);
            }
            Ok(ScanPath { segments, dwell: DEFAULT_DWELL })
        };
        let path = match &self.scan.strategy {
            Strategy::Serpentine => generate(serpentine)?,
            Strategy::FourIslands => generate(four_islands)?,
            Strategy::File(p) => {
                let full = if p.is_absolute() { p.clone() } else { base_dir.join(p) };
                let text = std::fs::read_to_string(&full)
                    .map_err(|e| validation("scan.strategy", format!("cannot read {}: {e}", full.display())))?;
                parse_path_file(&text).map_err(|e| validation(&format!("scan file {}", full.display()), e))?
            }
        };
        if path.layers().len() > self.geometry.n_layers {
            return Err(validation("scan", "path has more layers than geometry.n_layers"));
        }
        Ok(path)
    }

    pub fn build_config(&self) -> BuildConfig {
        let [s, m, b] = self.initial_state;
        BuildConfig {
            geometry: self.geometry,
            beam: BeamParams { radius: self.beam.radius, depth: self.beam.depth },
            schedule: self.schedule,
            thermal: self.thermal,
            kinetics: self.kinetics,
            integrator: self.integrator,
            batch: BatchOptions { lanes: self.batch.lanes, parallel: self.batch.parallel },
            initial_state: PhaseState::new(s, m, b),
            probes: self.output.probes.clone(),
            snapshot_every: self.output.snapshot_every,
        }
    }

    /// Fully resolved configuration as TOML.
    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("configuration serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
[geometry]
base_size = [1.2e-3, 1.2e-3]
base_height = 1.0e-3
part_size = [1.0e-3, 1.0e-3]
layer_thickness = 50e-6
n_layers = 5

[beam]
power = 180.0
speed = 0.96
hatch = 0.08e-3

[scan]
strategy = "serpentine"
"#;

    #[test]
    fn minimal_config_takes_defaults() {
        let cfg = RunConfig::parse(MINIMAL).unwrap();
        assert_eq!(cfg.schedule, Schedule::default());
        assert_eq!(cfg.beam.radius, 0.06e-3);
        assert_eq!(cfg.initial_state, [0.9, 0.0, 0.1]);
        assert_eq!(cfg.scan.strategy, Strategy::Serpentine);
    }

    #[test]
    fn resolved_config_round_trips() {
        let cfg = RunConfig::parse(MINIMAL).unwrap();
        assert_eq!(RunConfig::parse(&cfg.to_toml()).unwrap(), cfg);
    }

    #[test]
    fn missing_field_is_named() {
        let text = MINIMAL.replace("n_layers = 5\n", "");
        let err = RunConfig::parse(&text).unwrap_err().to_string();
        assert!(err.contains("geometry") && err.contains("n_layers"), "{err}");
    }

    #[test]
    fn bad_values_are_named() {
        let err = RunConfig::parse(&MINIMAL.replace("speed = 0.96", "speed = -1.0")).unwrap_err().to_string();
        assert!(err.contains("beam.speed"), "{err}");
        let err = RunConfig::parse(&MINIMAL.replace("\"serpentine\"", "\"zigzag\"")).unwrap_err().to_string();
        assert!(err.contains("scan.strategy"), "{err}");
        let err = RunConfig::parse(&format!("{MINIMAL}\n[thermal]\nk_p = \"x\"\n")).unwrap_err().to_string();
        assert!(err.contains("thermal.k_p"), "{err}");
        let err =
            RunConfig::parse(&format!("{MINIMAL}\n[output]\nprobes = [[5.0, 0.0, 0.0]]\n")).unwrap_err().to_string();
        assert!(err.contains("output.probes[0]"), "{err}");
    }

    #[test]
    fn strategies() {
        assert_eq!("four_islands".parse::<Strategy>().unwrap(), Strategy::FourIslands);
        assert_eq!("file:a/b.txt".parse::<Strategy>().unwrap(), Strategy::File("a/b.txt".into()));
        assert!("file:".parse::<Strategy>().is_err());
        let cfg = RunConfig::parse(MINIMAL).unwrap();
        let path = cfg.scan_path(Path::new(".")).unwrap();
        assert_eq!(path.layers(), vec![0, 1, 2, 3, 4]);
    }
}
