//! Laser scan paths.
//!
//! Paths are lists of straight segments traversed at constant speed and
//! power, grouped by layer. Generators cover a rectangle with a serpentine
//! track (passes along y, hatching along x) either as one island or as four
//! quadrant islands. Paths can also be read from a line-based text format:
//!
//! ```text
//! # comment
//! dwell 1.0
//! layer 0
//! segment <x0> <y0> <x1> <y1> <speed> <power>
//! ```
//!
//! All values are SI units (m, m/s, W, s). Layers must be strictly
//! increasing; `dwell` sets the interlayer cool-down time of the whole path
//! and may appear anywhere.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Axis-aligned rectangle in the scan plane (m).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rect {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl Rect {
    pub fn new(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        Self { x0, y0, x1, y1 }
    }

    pub fn width(&self) -> f64 {
        self.x1 - self.x0
    }

    pub fn height(&self) -> f64 {
        self.y1 - self.y0
    }

    pub fn contains(&self, x: f64, y: f64, slack: f64) -> bool {
        x >= self.x0 - slack && x <= self.x1 + slack && y >= self.y0 - slack && y <= self.y1 + slack
    }

    /// Quadrants in processing order: (-x,-y), (+x,-y), (-x,+y), (+x,+y).
    pub fn quadrants(&self) -> [Rect; 4] {
        let xm = 0.5 * (self.x0 + self.x1);
        let ym = 0.5 * (self.y0 + self.y1);
        [
            Rect::new(self.x0, self.y0, xm, ym),
            Rect::new(xm, self.y0, self.x1, ym),
            Rect::new(self.x0, ym, xm, self.y1),
            Rect::new(xm, ym, self.x1, self.y1),
        ]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScanSegment {
    pub start: [f64; 2],
    pub end: [f64; 2],
    /// Scan speed (m/s).
    pub speed: f64,
    /// Effective power (W).
    pub power: f64,
    pub layer: u32,
}

impl ScanSegment {
    pub fn length(&self) -> f64 {
        (self.end[0] - self.start[0]).hypot(self.end[1] - self.start[1])
    }

    pub fn duration(&self) -> f64 {
        self.length() / self.speed
    }

    fn validate(&self) -> Result<(), String> {
        let values = [self.start[0], self.start[1], self.end[0], self.end[1], self.speed, self.power];
        if values.iter().any(|v| !v.is_finite()) {
            return Err("segment values must be finite".into());
        }
        if !(self.speed > 0.0) {
            return Err(format!("speed must be positive, got {}", self.speed));
        }
        if self.power < 0.0 {
            return Err(format!("power must be non-negative, got {}", self.power));
        }
        if self.start == self.end {
            return Err("segment start and end coincide".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Error, PartialEq)]
pub enum PathError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("line {line}: {message}")]
    Invalid { line: usize, message: String },
    #[error("invalid scan parameters: {0}")]
    Parameters(String),
}

/// Segments of all layers in scan order, plus the interlayer dwell time.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ScanPath {
    pub segments: Vec<ScanSegment>,
    /// Cool-down time after each layer (s).
    pub dwell: f64,
}

impl ScanPath {
    /// Distinct layer indices in order.
    pub fn layers(&self) -> Vec<u32> {
        let mut out: Vec<u32> = Vec::new();
        for s in &self.segments {
            if out.last() != Some(&s.layer) {
                out.push(s.layer);
            }
        }
        out
    }

    pub fn layer(&self, layer: u32) -> impl Iterator<Item = &ScanSegment> {
        self.segments.iter().filter(move |s| s.layer == layer)
    }

    /// Beam schedule of one layer.
    pub fn track(&self, layer: u32) -> BeamTrack {
        BeamTrack::new(self.layer(layer).copied().collect())
    }

    /// Same segments repeated on layers `0..n_layers`.
    pub fn repeat_layers(pattern: &[ScanSegment], n_layers: u32, dwell: f64) -> Self {
        let segments =
            (0..n_layers).flat_map(|layer| pattern.iter().map(move |s| ScanSegment { layer, ..*s })).collect();
        Self { segments, dwell }
    }

    pub fn validate(&self) -> Result<(), PathError> {
        let mut last: Option<u32> = None;
        for (i, s) in self.segments.iter().enumerate() {
            s.validate().map_err(|message| PathError::Invalid { line: i + 1, message })?;
            if let Some(prev) = last {
                if s.layer < prev {
                    return Err(PathError::Invalid {
                        line: i + 1,
                        message: format!("layer {} follows layer {prev}", s.layer),
                    });
                }
            }
            last = Some(s.layer);
        }
        if !(self.dwell >= 0.0) {
            return Err(PathError::Parameters(format!("dwell must be non-negative, got {}", self.dwell)));
        }
        Ok(())
    }

    /// Text form readable by [`parse_path_file`].
    pub fn to_path_file(&self) -> String {
        let mut out = String::new();
        writeln!(out, "dwell {}", self.dwell).unwrap();
        let mut current = None;
        for s in &self.segments {
            if current != Some(s.layer) {
                writeln!(out, "layer {}", s.layer).unwrap();
                current = Some(s.layer);
            }
            writeln!(out, "segment {} {} {} {} {} {}", s.start[0], s.start[1], s.end[0], s.end[1], s.speed, s.power)
                .unwrap();
        }
        out
    }
}

fn check_params(extent: &Rect, hatch: f64, speed: f64, power: f64) -> Result<(), PathError> {
    if !(hatch > 0.0) {
        return Err(PathError::Parameters(format!("hatch must be positive, got {hatch}")));
    }
    if !(extent.width() > 0.0) || !(extent.height() > 0.0) {
        return Err(PathError::Parameters("scan extent is degenerate".into()));
    }
    if !(speed > 0.0) || !(power >= 0.0) {
        return Err(PathError::Parameters("speed must be positive and power non-negative".into()));
    }
    Ok(())
}

/// Number of passes covering `width` with spacing `hatch`.
pub fn pass_count(width: f64, hatch: f64) -> usize {
    (width / hatch + 1e-9).floor() as usize + 1
}

/// Continuous serpentine: passes along alternating ±y, spaced `hatch` in x
/// and centred in the extent, joined by short connectors along x.
pub fn serpentine(extent: Rect, hatch: f64, speed: f64, power: f64, layer: u32) -> Result<Vec<ScanSegment>, PathError> {
    check_params(&extent, hatch, speed, power)?;
    let passes = pass_count(extent.width(), hatch);
    let span = (passes - 1) as f64 * hatch;
    let offset = 0.5 * (extent.width() - span);
    let seg = |start, end| ScanSegment { start, end, speed, power, layer };
    let mut out = Vec::with_capacity(2 * passes - 1);
    for i in 0..passes {
        let x = extent.x0 + offset + i as f64 * hatch;
        let (ya, yb) = if i % 2 == 0 { (extent.y0, extent.y1) } else { (extent.y1, extent.y0) };
        if i > 0 {
            let prev = extent.x0 + offset + (i - 1) as f64 * hatch;
            out.push(seg([prev, ya], [x, ya]));
        }
        out.push(seg([x, ya], [x, yb]));
    }
    Ok(out)
}

/// Serpentine per quadrant, quadrants in the order of [`Rect::quadrants`].
/// The beam jumps between islands without delay.
pub fn four_islands(
    extent: Rect,
    hatch: f64,
    speed: f64,
    power: f64,
    layer: u32,
) -> Result<Vec<ScanSegment>, PathError> {
    check_params(&extent, hatch, speed, power)?;
    let mut out = Vec::new();
    for q in extent.quadrants() {
        out.extend(serpentine(q, hatch, speed, power, layer)?);
    }
    Ok(out)
}

fn fields<const K: usize>(line: usize, args: &[&str]) -> Result<[f64; K], PathError> {
    if args.len() != K {
        return Err(PathError::Parse { line, message: format!("expected {K} values, found {}", args.len()) });
    }
    let mut out = [0.0; K];
    for (o, a) in out.iter_mut().zip(args) {
        *o = a.parse().map_err(|_| PathError::Parse { line, message: format!("invalid number `{a}`") })?;
    }
    Ok(out)
}

/// Read the text path format described in the module documentation.
pub fn parse_path_file(text: &str) -> Result<ScanPath, PathError> {
    let mut path = ScanPath { segments: Vec::new(), dwell: 0.0 };
    let mut layer: Option<u32> = None;
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let mut words = content.split_whitespace();
        let keyword = words.next().unwrap();
        let args: Vec<&str> = words.collect();
        match keyword {
            "layer" => {
                if args.len() != 1 {
                    return Err(PathError::Parse { line, message: "expected `layer <n>`".into() });
                }
                let n: u32 = args[0]
                    .parse()
                    .map_err(|_| PathError::Parse { line, message: format!("invalid layer index `{}`", args[0]) })?;
                if let Some(prev) = layer {
                    if n <= prev {
                        return Err(PathError::Invalid {
                            line,
                            message: format!("layer {n} does not follow layer {prev}"),
                        });
                    }
                }
                layer = Some(n);
            }
            "segment" => {
                let [x0, y0, x1, y1, speed, power] = fields::<6>(line, &args)?;
                let Some(layer) = layer else {
                    return Err(PathError::Parse { line, message: "segment before any `layer` line".into() });
                };
                let s = ScanSegment { start: [x0, y0], end: [x1, y1], speed, power, layer };
                s.validate().map_err(|message| PathError::Invalid { line, message })?;
                path.segments.push(s);
            }
            "dwell" => {
                let [d] = fields::<1>(line, &args)?;
                if !(d >= 0.0) || !d.is_finite() {
                    return Err(PathError::Invalid { line, message: format!("dwell must be non-negative, got {d}") });
                }
                path.dwell = d;
            }
            other => {
                return Err(PathError::Parse { line, message: format!("unknown keyword `{other}`") });
            }
        }
    }
    Ok(path)
}

/// Time-parametrised beam position over the segments of one layer.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct BeamTrack {
    segments: Vec<ScanSegment>,
    /// Start time of each segment; one extra entry holds the total duration.
    starts: Vec<f64>,
}

/// Beam location and power at an instant.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BeamSample {
    pub x: f64,
    pub y: f64,
    pub power: f64,
}

impl BeamTrack {
    pub fn new(segments: Vec<ScanSegment>) -> Self {
        let mut starts = Vec::with_capacity(segments.len() + 1);
        let mut t = 0.0;
        starts.push(t);
        for s in &segments {
            t += s.duration();
            starts.push(t);
        }
        Self { segments, starts }
    }

    /// Total scan time.
    pub fn duration(&self) -> f64 {
        *self.starts.last().unwrap()
    }

    pub fn segments(&self) -> &[ScanSegment] {
        &self.segments
    }

    /// Beam state at time `t` after the layer start, `None` once the layer is done.
    pub fn at(&self, t: f64) -> Option<BeamSample> {
        if self.segments.is_empty() || t < 0.0 || t >= self.duration() {
            return None;
        }
        let i = self.starts.partition_point(|&s| s <= t) - 1;
        let s = &self.segments[i.min(self.segments.len() - 1)];
        let frac = ((t - self.starts[i]) / s.duration()).clamp(0.0, 1.0);
        Some(BeamSample {
            x: s.start[0] + frac * (s.end[0] - s.start[0]),
            y: s.start[1] + frac * (s.end[1] - s.start[1]),
            power: s.power,
        })
    }
}
