//! Scan-resolved heat conduction on a uniform voxel grid.
//!
//! The build consists of a base plate box with the part layers stacked on
//! top; every powder layer covers the full plate footprint. Voxels are cubes
//! whose edge equals the powder layer thickness. Conduction uses a 7-point
//! explicit finite-difference stencil with harmonic-mean face conductivities.
//! The plate bottom is held at a prescribed temperature through a ghost cell
//! one spacing below, lateral faces are insulated, and exposed top faces lose
//! heat by radiation and evaporation.

use std::io::{self, Write};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::batch::{step_all, BatchError, BatchOptions, GlobalFields};
use crate::fastmath::fast_exp;
use crate::integrator::IntegratorConfig;
use crate::kinetics::{KineticsParams, PhaseState};
use crate::scanpath::{Rect, ScanPath};

/// Stefan-Boltzmann constant (W/(m^2 K^4)).
pub const STEFAN_BOLTZMANN: f64 = 5.670_374_419e-8;
/// Sub-samples per axis used to average the beam profile over a voxel.
const SOURCE_SAMPLES: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ThermalParams {
    /// Conductivity of melt and solid (W/(m K)).
    pub k_ms: f64,
    /// Conductivity of powder (W/(m K)).
    pub k_p: f64,
    pub rho: f64,
    pub c: f64,
    pub t_solidus: f64,
    pub t_liquidus: f64,
    pub t_ambient: f64,
    pub emissivity: f64,
    pub sigma_s: f64,
    /// Boiling temperature (K).
    pub t_v: f64,
    /// Recoil pressure factor (Pa).
    pub c_p: f64,
    /// Recoil pressure temperature factor (K).
    pub c_t: f64,
    /// Heat loss temperature factor (K s^2/m^2).
    pub c_m: f64,
    /// Molar mass (kg/mol). Carried for completeness; the loss law does not use it.
    pub molar_mass: f64,
    /// Latent heat of evaporation (J/kg).
    pub h_v: f64,
    /// Enthalpy reference temperature (K).
    pub t_h0: f64,
    /// Temperature cap inside the evaporation law (K).
    pub t_max_clamp: f64,
}

impl Default for ThermalParams {
    fn default() -> Self {
        Self {
            k_ms: 28.6,
            k_p: 0.286,
            rho: 4090.0,
            c: 1130.0,
            t_solidus: 1878.0,
            t_liquidus: 1928.0,
            t_ambient: 293.0,
            emissivity: 0.7,
            sigma_s: STEFAN_BOLTZMANN,
            t_v: 3130.0,
            c_p: 54e3,
            c_t: 5.07e4,
            c_m: 9.15e-4,
            molar_mass: 0.0478,
            h_v: 8.84e6,
            t_h0: 538.0,
            t_max_clamp: 3130.0 + 1000.0,
        }
    }
}

impl ThermalParams {
    /// Volumetric heat capacity (J/(m^3 K)).
    pub fn rho_c(&self) -> f64 {
        self.rho * self.c
    }

    /// Largest stable explicit step for voxel size `h`.
    pub fn stable_dt(&self, h: f64) -> f64 {
        h * h * self.rho_c() / (6.0 * self.k_ms.max(self.k_p))
    }

    /// Liquid fraction, linear between solidus and liquidus.
    #[inline]
    pub fn liquid_fraction(&self, t: f64) -> f64 {
        ((t - self.t_solidus) / (self.t_liquidus - self.t_solidus)).clamp(0.0, 1.0)
    }

    pub fn validate(&self) -> Result<(), String> {
        let positive = [
            ("k_ms", self.k_ms),
            ("k_p", self.k_p),
            ("rho", self.rho),
            ("c", self.c),
            ("t_v", self.t_v),
            ("sigma_s", self.sigma_s),
        ];
        for (name, v) in positive {
            if !(v > 0.0) {
                return Err(format!("{name} must be positive"));
            }
        }
        if !(self.t_liquidus > self.t_solidus) {
            return Err("t_liquidus must exceed t_solidus".into());
        }
        if !(self.t_max_clamp > self.t_v) {
            return Err("t_max_clamp must exceed t_v".into());
        }
        Ok(())
    }
}

/// State-interpolated conductivity; melt and solid share `k_ms`.
pub fn conductivity(t: f64, r_c: f64, params: &ThermalParams) -> f64 {
    let g = params.liquid_fraction(t);
    let powder = 1.0 - r_c;
    let melt = g;
    let solid = r_c - g;
    powder * params.k_p + melt * params.k_ms + solid * params.k_ms
}

/// Radiation and evaporation flux `(q_rad, q_evap)` leaving a surface at `t` (W/m^2).
pub fn surface_losses(t: f64, params: &ThermalParams) -> (f64, f64) {
    let q_rad = params.emissivity * params.sigma_s * (t.powi(4) - params.t_ambient.powi(4));
    let tc = t.min(params.t_max_clamp);
    let q_evap = if tc > params.t_v {
        0.82 * params.c_p
            * fast_exp(-params.c_t * (1.0 / tc - 1.0 / params.t_v))
            * (params.c_m / tc).sqrt()
            * (params.h_v + params.c * (tc - params.t_h0))
    } else {
        0.0
    };
    (q_rad, q_evap)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeatSource {
    /// Effective power (W).
    pub power: f64,
    /// Beam radius (m).
    pub radius: f64,
    /// Penetration depth, one powder layer (m).
    pub depth: f64,
    pub x: f64,
    pub y: f64,
    pub active: bool,
}

impl HeatSource {
    pub fn peak(&self) -> f64 {
        2.0 * self.power / (std::f64::consts::PI * self.radius * self.radius * self.depth)
    }
}

/// Pointwise volumetric heat input (W/m^3) at `(x, y)` and a depth `depth_below`
/// under the current top surface.
pub fn source_term(x: f64, y: f64, depth_below: f64, source: &HeatSource) -> f64 {
    if !source.active || depth_below <= 0.0 || depth_below >= source.depth {
        return 0.0;
    }
    let dx = x - source.x;
    let dy = y - source.y;
    source.peak() * fast_exp(-2.0 * (dx * dx + dy * dy) / (source.radius * source.radius))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum VoxelKind {
    Inactive,
    /// Deposited as powder; consolidates on melting.
    Powder,
    /// Initially consolidated (base plate).
    Consolidated,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub nx: usize,
    pub ny: usize,
    pub nz: usize,
    /// Voxel edge length (m).
    pub h: f64,
}

impl Grid {
    pub fn len(&self) -> usize {
        self.nx * self.ny * self.nz
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline(always)]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.nx * (j + self.ny * k)
    }

    pub fn coords(&self, idx: usize) -> (usize, usize, usize) {
        let i = idx % self.nx;
        let j = (idx / self.nx) % self.ny;
        (i, j, idx / (self.nx * self.ny))
    }

    /// Centre of voxel `(i, j, k)` with the origin at the bottom plate corner.
    pub fn center(&self, i: usize, j: usize, k: usize) -> [f64; 3] {
        [(i as f64 + 0.5) * self.h, (j as f64 + 0.5) * self.h, (k as f64 + 0.5) * self.h]
    }

    /// Voxel containing a point, if inside the grid.
    pub fn locate(&self, p: [f64; 3]) -> Option<usize> {
        let cell = |v: f64, n: usize| {
            let c = (v / self.h).floor();
            (c >= 0.0 && (c as usize) < n).then_some(c as usize)
        };
        Some(self.index(cell(p[0], self.nx)?, cell(p[1], self.ny)?, cell(p[2], self.nz)?))
    }

    fn plane(&self) -> usize {
        self.nx * self.ny
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Boundaries {
    /// Temperature held below the plate, or `None` for an insulated bottom.
    pub bottom: Option<f64>,
    /// Radiation and evaporation on exposed top faces.
    pub surface_losses: bool,
}

impl Default for Boundaries {
    fn default() -> Self {
        Self { bottom: Some(293.0), surface_losses: true }
    }
}

#[derive(Debug, Error)]
pub enum ThermalError {
    #[error("time step {dt:e} s exceeds the stability limit {admissible:e} s")]
    Stability { dt: f64, admissible: f64 },
    #[error("all {0} layers are already active")]
    BuildComplete(usize),
    #[error("invalid geometry: {0}")]
    Geometry(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("kinetics update failed: {0}")]
    Kinetics(#[from] BatchError),
    #[error("output failed: {0}")]
    Io(#[from] io::Error),
}

/// Temperatures and material state of all voxels.
#[derive(Clone, Debug)]
pub struct ThermalField {
    pub grid: Grid,
    pub temperature: Vec<f64>,
    /// Consolidated fraction `r_c`.
    pub consolidated: Vec<f64>,
    pub kind: Vec<VoxelKind>,
    /// Highest temperature each voxel has reached.
    pub peak_temperature: Vec<f64>,
    /// Number of active z-planes, counted from the bottom.
    pub active_planes: usize,
    pub boundaries: Boundaries,
    scratch: Vec<f64>,
    buffer: Vec<f64>,
    kappa: Vec<f64>,
}

impl ThermalField {
    /// Grid with the lowest `consolidated_planes` planes active as base plate at `t0`.
    pub fn new(grid: Grid, consolidated_planes: usize, t0: f64, boundaries: Boundaries) -> Self {
        let n = grid.len();
        let mut kind = vec![VoxelKind::Inactive; n];
        let mut consolidated = vec![0.0; n];
        let active = consolidated_planes.min(grid.nz);
        for idx in 0..active * grid.plane() {
            kind[idx] = VoxelKind::Consolidated;
            consolidated[idx] = 1.0;
        }
        Self {
            grid,
            temperature: vec![t0; n],
            consolidated,
            kind,
            peak_temperature: vec![t0; n],
            active_planes: active,
            boundaries,
            scratch: vec![0.0; n],
            buffer: vec![0.0; n],
            kappa: vec![0.0; n],
        }
    }

    /// Height of the current top surface (m).
    pub fn surface_z(&self) -> f64 {
        self.active_planes as f64 * self.grid.h
    }

    /// Activate the next plane as powder at `t0`.
    pub fn activate_layer(&mut self, t0: f64) -> Result<usize, ThermalError> {
        if self.active_planes >= self.grid.nz {
            return Err(ThermalError::BuildComplete(self.grid.nz));
        }
        let k = self.active_planes;
        let plane = self.grid.plane();
        for idx in k * plane..(k + 1) * plane {
            self.kind[idx] = VoxelKind::Powder;
            self.temperature[idx] = t0;
            self.consolidated[idx] = 0.0;
            self.peak_temperature[idx] = t0;
        }
        self.active_planes += 1;
        Ok(k)
    }

    /// Total enthalpy `sum rho c T h^3` over active voxels (J, relative to 0 K).
    pub fn enthalpy(&self, params: &ThermalParams) -> f64 {
        let vol = self.grid.h.powi(3);
        self.temperature
            .iter()
            .zip(&self.kind)
            .filter(|(_, k)| **k != VoxelKind::Inactive)
            .map(|(t, _)| params.rho_c() * t * vol)
            .sum()
    }

    /// Running maximum of the liquid fraction for powder-origin voxels.
    pub fn update_consolidation(&mut self, params: &ThermalParams) {
        for idx in 0..self.temperature.len() {
            match self.kind[idx] {
                VoxelKind::Powder => {
                    let g = params.liquid_fraction(self.temperature[idx]);
                    if g > self.consolidated[idx] {
                        self.consolidated[idx] = g;
                    }
                }
                VoxelKind::Consolidated => self.consolidated[idx] = 1.0,
                VoxelKind::Inactive => {}
            }
            let t = self.temperature[idx];
            if t > self.peak_temperature[idx] {
                self.peak_temperature[idx] = t;
            }
        }
    }

    /// Voxel-averaged volumetric source of the top plane(s) under the beam.
    fn source_field(&self, source: &HeatSource, out: &mut [f64]) {
        out.iter_mut().for_each(|v| *v = 0.0);
        if !source.active || source.power == 0.0 {
            return;
        }
        let g = self.grid;
        let reach = 3.0 * source.radius;
        let span = |c: f64, n: usize| {
            let lo = ((c - reach) / g.h).floor().max(0.0) as usize;
            let hi = (((c + reach) / g.h).ceil().max(0.0) as usize).min(n);
            lo..hi
        };
        // separable profile: average of exp(-2 d^2 / R^2) along each axis
        let axis = |i: usize, c: f64| {
            let mut sum = 0.0;
            for s in 0..SOURCE_SAMPLES {
                let x = (i as f64 + (s as f64 + 0.5) / SOURCE_SAMPLES as f64) * g.h - c;
                sum += fast_exp(-2.0 * x * x / (source.radius * source.radius));
            }
            sum / SOURCE_SAMPLES as f64
        };
        let wx: Vec<(usize, f64)> = span(source.x, g.nx).map(|i| (i, axis(i, source.x))).collect();
        let wy: Vec<(usize, f64)> = span(source.y, g.ny).map(|j| (j, axis(j, source.y))).collect();
        let surface = self.surface_z();
        for k in (0..self.active_planes).rev() {
            let depth = surface - (k as f64 + 0.5) * g.h;
            if depth >= source.depth {
                break;
            }
            for &(j, fy) in &wy {
                for &(i, fx) in &wx {
                    let idx = g.index(i, j, k);
                    if self.kind[idx] != VoxelKind::Inactive {
                        out[idx] = source.peak() * fx * fy;
                    }
                }
            }
        }
    }

    /// One explicit conduction step followed by the consolidation update.
    pub fn step(&mut self, source: &HeatSource, dt: f64, params: &ThermalParams) -> Result<(), ThermalError> {
        let admissible = params.stable_dt(self.grid.h);
        if dt > admissible * (1.0 + 1e-12) {
            return Err(ThermalError::Stability { dt, admissible });
        }
        let g = self.grid;
        let n = g.len();
        let plane = g.plane();
        for idx in 0..n {
            self.kappa[idx] = if self.kind[idx] == VoxelKind::Inactive {
                0.0
            } else {
                conductivity(self.temperature[idx], self.consolidated[idx], params)
            };
        }
        let mut q = std::mem::take(&mut self.scratch);
        self.source_field(source, &mut q);

        let temperature = &self.temperature;
        let kappa = &self.kappa;
        let kind = &self.kind;
        let boundaries = self.boundaries;
        let rho_c = params.rho_c();
        let h = g.h;
        let inv_h2 = 1.0 / (h * h);
        let active_planes = self.active_planes;

        let face = |ka: f64, kb: f64| if ka + kb > 0.0 { 2.0 * ka * kb / (ka + kb) } else { 0.0 };
        let mut next = std::mem::take(&mut self.buffer);
        next.resize(n, 0.0);
        next.par_chunks_mut(plane).enumerate().for_each(|(k, out)| {
            for j in 0..g.ny {
                for i in 0..g.nx {
                    let idx = g.index(i, j, k);
                    let t = temperature[idx];
                    if kind[idx] == VoxelKind::Inactive {
                        out[idx - k * plane] = t;
                        continue;
                    }
                    let ka = kappa[idx];
                    let mut flux = 0.0;
                    let mut neighbor = |nb: usize| {
                        flux += face(ka, kappa[nb]) * (temperature[nb] - t);
                    };
                    if i > 0 {
                        neighbor(idx - 1);
                    }
                    if i + 1 < g.nx {
                        neighbor(idx + 1);
                    }
                    if j > 0 {
                        neighbor(idx - g.nx);
                    }
                    if j + 1 < g.ny {
                        neighbor(idx + g.nx);
                    }
                    if k > 0 {
                        neighbor(idx - plane);
                    }
                    if k + 1 < g.nz {
                        neighbor(idx + plane);
                    }
                    if k == 0 {
                        if let Some(tb) = boundaries.bottom {
                            flux += ka * (tb - t);
                        }
                    }
                    let mut dt_t = dt / rho_c * (flux * inv_h2 + q[idx]);
                    let exposed = k + 1 == active_planes || (k + 1 < g.nz && kind[idx + plane] == VoxelKind::Inactive);
                    if boundaries.surface_losses && exposed {
                        let (q_rad, q_evap) = surface_losses(t, params);
                        dt_t -= dt * q_rad / (rho_c * h);
                        // evaporation may not cool a voxel below the boiling point within one step
                        let evap = dt * q_evap / (rho_c * h);
                        dt_t -= evap.min((t - params.t_v).max(0.0));
                    }
                    out[idx - k * plane] = t + dt_t;
                }
            }
        });
        self.buffer = std::mem::replace(&mut self.temperature, next);
        self.scratch = q;
        self.update_consolidation(params);
        Ok(())
    }

    /// Advance by `dt` in equal substeps that respect the stability limit.
    pub fn advance(&mut self, source: &HeatSource, dt: f64, params: &ThermalParams) -> Result<usize, ThermalError> {
        let limit = params.stable_dt(self.grid.h);
        let n = (dt / limit).ceil().max(1.0) as usize;
        let sub = dt / n as f64;
        for _ in 0..n {
            self.step(source, sub, params)?;
        }
        Ok(n)
    }

    /// Voxels whose peak temperature exceeded `t_solidus`.
    pub fn melted(&self, t_solidus: f64) -> impl Iterator<Item = usize> + '_ {
        self.peak_temperature.iter().enumerate().filter(move |(_, &p)| p > t_solidus).map(|(i, _)| i)
    }
}

/// Box geometry: part footprint centred on a base plate, both in metres.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BuildGeometry {
    /// Plate footprint (x, y).
    pub base_size: [f64; 2],
    pub base_height: f64,
    /// Part footprint (x, y), centred on the plate.
    pub part_size: [f64; 2],
    pub layer_thickness: f64,
    pub n_layers: usize,
}

impl BuildGeometry {
    /// Desk-scale cube proxy: 1 x 1 mm part, five 50 um layers on a 1.2 x 1.2 x 1 mm plate.
    pub fn cube_proxy() -> Self {
        Self {
            base_size: [1.2e-3, 1.2e-3],
            base_height: 1.0e-3,
            part_size: [1.0e-3, 1.0e-3],
            layer_thickness: 50e-6,
            n_layers: 5,
        }
    }

    fn cells(&self, length: f64) -> Result<usize, ThermalError> {
        let n = (length / self.layer_thickness).round();
        if !(n >= 1.0) || ((n * self.layer_thickness - length).abs() > 1e-6 * self.layer_thickness) {
            return Err(ThermalError::Geometry(format!(
                "length {length} m is not a whole multiple of the voxel size {} m",
                self.layer_thickness
            )));
        }
        Ok(n as usize)
    }

    pub fn grid(&self) -> Result<Grid, ThermalError> {
        if !(self.layer_thickness > 0.0) || self.n_layers == 0 {
            return Err(ThermalError::Geometry("layer thickness and layer count must be positive".into()));
        }
        if self.part_size[0] > self.base_size[0] || self.part_size[1] > self.base_size[1] {
            return Err(ThermalError::Geometry("part footprint exceeds the base plate".into()));
        }
        Ok(Grid {
            nx: self.cells(self.base_size[0])?,
            ny: self.cells(self.base_size[1])?,
            nz: self.base_planes()? + self.n_layers,
            h: self.layer_thickness,
        })
    }

    pub fn base_planes(&self) -> Result<usize, ThermalError> {
        self.cells(self.base_height)
    }

    /// Scanned area in grid coordinates.
    pub fn part_extent(&self) -> Rect {
        let x0 = 0.5 * (self.base_size[0] - self.part_size[0]);
        let y0 = 0.5 * (self.base_size[1] - self.part_size[1]);
        Rect::new(x0, y0, x0 + self.part_size[0], y0 + self.part_size[1])
    }
}

/// Macro time stepping of the build.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Schedule {
    /// Step size while the laser is on and at the start of each cool-down (s).
    pub dt_active: f64,
    /// Cool-down steps taken at `dt_active` before the step starts growing.
    pub cooldown_fixed_steps: usize,
    /// The step doubles after this many steps.
    pub growth_interval: usize,
    pub growth_factor: f64,
    pub dt_max: f64,
    /// Interlayer cool-down; overrides the scan path dwell when set (s).
    pub dwell: Option<f64>,
    pub final_cooldown: f64,
    /// Bottom temperature during the final cool-down (K).
    pub final_bottom_temperature: f64,
    /// Initial and bottom temperature during the build (K).
    pub preheat: f64,
}

impl Default for Schedule {
    fn default() -> Self {
        Self {
            dt_active: 2e-5,
            cooldown_fixed_steps: 2000,
            growth_interval: 10,
            growth_factor: 2.0,
            dt_max: 0.1,
            dwell: None,
            final_cooldown: 5.0,
            final_bottom_temperature: 293.0,
            preheat: 293.0,
        }
    }
}

impl Schedule {
    /// Step sizes of a cool-down lasting `duration`.
    pub fn cooldown_steps(&self, duration: f64) -> Vec<f64> {
        let mut steps = Vec::new();
        let mut elapsed = 0.0;
        let eps = 1e-12 * duration.max(1.0);
        while elapsed < duration - eps {
            let n = steps.len();
            let doublings = n.saturating_sub(self.cooldown_fixed_steps) / self.growth_interval;
            let dt = (self.dt_active * self.growth_factor.powi(doublings.min(1000) as i32)).min(self.dt_max);
            let step = dt.min(duration - elapsed);
            steps.push(step);
            elapsed += step;
        }
        steps
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(self.dt_active > 0.0) || !(self.dt_max >= self.dt_active) {
            return Err("dt_active must be positive and not exceed dt_max".into());
        }
        if self.growth_interval == 0 || !(self.growth_factor >= 1.0) {
            return Err("growth_interval must be positive and growth_factor at least 1".into());
        }
        if !(self.final_cooldown >= 0.0) || self.dwell.is_some_and(|d| !(d >= 0.0)) {
            return Err("cool-down durations must be non-negative".into());
        }
        if !(self.preheat > 0.0) || !(self.final_bottom_temperature > 0.0) {
            return Err("temperatures must be positive".into());
        }
        Ok(())
    }
}

/// Beam parameters shared by every segment of a generated scan path.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BeamParams {
    /// Beam radius (m).
    pub radius: f64,
    /// Energy deposition depth; defaults to the layer thickness when zero (m).
    pub depth: f64,
}

impl Default for BeamParams {
    fn default() -> Self {
        Self { radius: 0.06e-3, depth: 0.0 }
    }
}

#[derive(Clone, Debug)]
pub struct BuildConfig {
    pub geometry: BuildGeometry,
    pub beam: BeamParams,
    pub schedule: Schedule,
    pub thermal: ThermalParams,
    pub kinetics: KineticsParams,
    pub integrator: IntegratorConfig,
    pub batch: BatchOptions,
    /// Microstructure of plate and fresh powder.
    pub initial_state: PhaseState,
    /// Probe locations (m).
    pub probes: Vec<[f64; 3]>,
    /// Emit a snapshot after every `n`-th layer; 0 disables layer snapshots.
    pub snapshot_every: usize,
}

impl BuildConfig {
    pub fn new(geometry: BuildGeometry) -> Self {
        Self {
            geometry,
            beam: BeamParams::default(),
            schedule: Schedule::default(),
            thermal: ThermalParams::default(),
            kinetics: KineticsParams::default(),
            integrator: IntegratorConfig::default(),
            batch: BatchOptions::default(),
            initial_state: PhaseState::annealed(),
            probes: Vec::new(),
            snapshot_every: 0,
        }
    }
}

/// Instrumentation of the thermal to kinetics hand-over.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CouplingCounters {
    pub thermal_macro_steps: u64,
    pub thermal_substeps: u64,
    pub kinetics_steps: u64,
    /// Kinetics steps whose start temperatures differed from the previous thermal output.
    pub mismatched_pairs: u64,
}

/// Wall-clock seconds per phase.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PhaseTimings {
    pub active_thermal: f64,
    pub active_kinetics: f64,
    pub cooldown_thermal: f64,
    pub cooldown_kinetics: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeSample {
    pub probe: usize,
    pub t: f64,
    pub temperature: f64,
    pub x_alpha_s: f64,
    pub x_alpha_m: f64,
    pub x_beta: f64,
}

/// Receives snapshots during a build.
pub trait BuildObserver {
    fn snapshot(&mut self, _label: &str, _time: f64, _field: &ThermalField, _phases: &GlobalFields) -> io::Result<()> {
        Ok(())
    }
}

impl BuildObserver for () {}

/// Keeps every snapshot in memory.
#[derive(Default)]
pub struct SnapshotLog {
    pub labels: Vec<(String, f64)>,
}

impl BuildObserver for SnapshotLog {
    fn snapshot(&mut self, label: &str, time: f64, _: &ThermalField, _: &GlobalFields) -> io::Result<()> {
        self.labels.push((label.to_string(), time));
        Ok(())
    }
}

pub struct BuildResult {
    pub field: ThermalField,
    pub phases: GlobalFields,
    pub probes: Vec<ProbeSample>,
    pub counters: CouplingCounters,
    pub timings: PhaseTimings,
    /// Simulated time at the end of the build (s).
    pub time: f64,
    /// Whether `r_c` never decreased in any voxel over the run.
    pub consolidation_monotone: bool,
}

struct Run<'a, O: BuildObserver> {
    cfg: &'a BuildConfig,
    field: ThermalField,
    phases: GlobalFields,
    probes: Vec<Option<usize>>,
    samples: Vec<ProbeSample>,
    counters: CouplingCounters,
    timings: PhaseTimings,
    time: f64,
    monotone: bool,
    observer: &'a mut O,
}

impl<O: BuildObserver> Run<'_, O> {
    fn macro_step(&mut self, source: &HeatSource, dt: f64, active: bool) -> Result<(), ThermalError> {
        let before = self.field.consolidated.clone();
        if self.phases.temperature_old != self.field.temperature {
            self.counters.mismatched_pairs += 1;
        }
        let t0 = Instant::now();
        let subs = self.field.advance(source, dt, &self.cfg.thermal)?;
        let t1 = Instant::now();
        self.counters.thermal_macro_steps += 1;
        self.counters.thermal_substeps += subs as u64;
        self.monotone &= before.iter().zip(&self.field.consolidated).all(|(a, b)| b >= a);

        self.phases.temperature_new.copy_from_slice(&self.field.temperature);
        step_all(&mut self.phases, dt, &self.cfg.kinetics, &self.cfg.integrator, self.cfg.batch)?;
        self.counters.kinetics_steps += 1;
        let t2 = Instant::now();

        let (th, ki) = ((t1 - t0).as_secs_f64(), (t2 - t1).as_secs_f64());
        if active {
            self.timings.active_thermal += th;
            self.timings.active_kinetics += ki;
        } else {
            self.timings.cooldown_thermal += th;
            self.timings.cooldown_kinetics += ki;
        }
        self.time += dt;
        self.sample();
        Ok(())
    }

    fn sample(&mut self) {
        for (p, idx) in self.probes.iter().enumerate() {
            if let Some(idx) = *idx {
                self.samples.push(ProbeSample {
                    probe: p,
                    t: self.time,
                    temperature: self.field.temperature[idx],
                    x_alpha_s: self.phases.x_alpha_s[idx],
                    x_alpha_m: self.phases.x_alpha_m[idx],
                    x_beta: self.phases.x_beta[idx],
                });
            }
        }
    }

    fn cooldown(&mut self, duration: f64) -> Result<(), ThermalError> {
        let off = HeatSource { power: 0.0, radius: 1.0, depth: 1.0, x: 0.0, y: 0.0, active: false };
        for dt in self.cfg.schedule.cooldown_steps(duration) {
            self.macro_step(&off, dt, false)?;
        }
        Ok(())
    }

    /// Kinetics starts from the thermal state it is coupled to.
    fn sync_temperatures(&mut self) {
        self.phases.temperature_old.copy_from_slice(&self.field.temperature);
        self.phases.temperature_new.copy_from_slice(&self.field.temperature);
    }
}

/// Simulate the layer-by-layer build with one-way coupled kinetics.
pub fn run_build(
    cfg: &BuildConfig,
    scan: &ScanPath,
    observer: &mut impl BuildObserver,
) -> Result<BuildResult, ThermalError> {
    cfg.thermal.validate().map_err(ThermalError::Config)?;
    cfg.schedule.validate().map_err(ThermalError::Config)?;
    cfg.integrator.validate().map_err(ThermalError::Config)?;
    scan.validate().map_err(|e| ThermalError::Config(e.to_string()))?;
    let grid = cfg.geometry.grid()?;
    let base = cfg.geometry.base_planes()?;
    let schedule = &cfg.schedule;
    let boundaries = Boundaries { bottom: Some(schedule.preheat), surface_losses: true };
    let field = ThermalField::new(grid, base, schedule.preheat, boundaries);
    let phases = GlobalFields::uniform(grid.len(), cfg.initial_state, schedule.preheat);
    let probes = cfg.probes.iter().map(|&p| grid.locate(p)).collect::<Vec<_>>();
    if let Some(i) = probes.iter().position(Option::is_none) {
        return Err(ThermalError::Config(format!("probe {i} lies outside the grid")));
    }
    let depth = if cfg.beam.depth > 0.0 { cfg.beam.depth } else { cfg.geometry.layer_thickness };
    let dwell = schedule.dwell.unwrap_or(scan.dwell);
    let layers = scan.layers();
    if layers.len() > cfg.geometry.n_layers {
        return Err(ThermalError::Config(format!(
            "scan path has {} layers but the geometry only {}",
            layers.len(),
            cfg.geometry.n_layers
        )));
    }

    let mut run = Run {
        cfg,
        field,
        phases,
        probes,
        samples: Vec::new(),
        counters: CouplingCounters::default(),
        timings: PhaseTimings::default(),
        time: 0.0,
        monotone: true,
        observer,
    };
    run.sample();

    for layer in 0..cfg.geometry.n_layers {
        let k = run.field.activate_layer(schedule.preheat)?;
        let plane = grid.nx * grid.ny;
        for idx in k * plane..(k + 1) * plane {
            run.phases.set_state(idx, cfg.initial_state);
            run.phases.temperature_old[idx] = schedule.preheat;
            run.phases.temperature_new[idx] = schedule.preheat;
        }
        run.sync_temperatures();

        let track = layers.get(layer).map(|&l| scan.track(l)).unwrap_or_default();
        let duration = track.duration();
        let mut t = 0.0;
        while t < duration - 1e-15 {
            let dt = schedule.dt_active.min(duration - t);
            let mid = track.at(t + 0.5 * dt).or_else(|| track.at(t));
            let source = match mid {
                Some(b) => HeatSource { power: b.power, radius: cfg.beam.radius, depth, x: b.x, y: b.y, active: true },
                None => HeatSource { power: 0.0, radius: cfg.beam.radius, depth, x: 0.0, y: 0.0, active: false },
            };
            run.macro_step(&source, dt, true)?;
            t += dt;
        }
        run.cooldown(dwell)?;
        if cfg.snapshot_every > 0 && (layer + 1) % cfg.snapshot_every == 0 {
            run.observer.snapshot(&format!("layer_{:03}", layer + 1), run.time, &run.field, &run.phases)?;
        }
    }

    run.field.boundaries.bottom = Some(schedule.final_bottom_temperature);
    run.cooldown(schedule.final_cooldown)?;
    run.observer.snapshot("final", run.time, &run.field, &run.phases)?;

    Ok(BuildResult {
        field: run.field,
        phases: run.phases,
        probes: run.samples,
        counters: run.counters,
        timings: run.timings,
        time: run.time,
        consolidation_monotone: run.monotone,
    })
}

/// Legacy ASCII structured-points volume with temperature, consolidation and phases.
pub fn write_vtk<W: Write>(mut w: W, title: &str, field: &ThermalField, phases: &GlobalFields) -> io::Result<()> {
    let g = field.grid;
    writeln!(w, "# vtk DataFile Version 3.0")?;
    writeln!(w, "{}", title.lines().next().unwrap_or(""))?;
    writeln!(w, "ASCII")?;
    writeln!(w, "DATASET STRUCTURED_POINTS")?;
    writeln!(w, "DIMENSIONS {} {} {}", g.nx, g.ny, g.nz)?;
    writeln!(w, "ORIGIN {} {} {}", 0.5 * g.h, 0.5 * g.h, 0.5 * g.h)?;
    writeln!(w, "SPACING {} {} {}", g.h, g.h, g.h)?;
    writeln!(w, "POINT_DATA {}", g.len())?;
    let arrays: [(&str, &[f64]); 6] = [
        ("temperature", &field.temperature),
        ("consolidated_fraction", &field.consolidated),
        ("x_alpha_s", &phases.x_alpha_s),
        ("x_alpha_m", &phases.x_alpha_m),
        ("x_beta", &phases.x_beta),
        ("peak_temperature", &field.peak_temperature),
    ];
    for (name, values) in arrays {
        writeln!(w, "SCALARS {name} double 1")?;
        writeln!(w, "LOOKUP_TABLE default")?;
        for v in values {
            writeln!(w, "{v}")?;
        }
    }
    writeln!(w, "SCALARS active int 1")?;
    writeln!(w, "LOOKUP_TABLE default")?;
    for k in &field.kind {
        writeln!(w, "{}", (*k != VoxelKind::Inactive) as u8)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p() -> ThermalParams {
        ThermalParams::default()
    }

    #[test]
    fn defaults_match_table() {
        let p = p();
        assert_eq!((p.k_ms, p.k_p, p.rho, p.c), (28.6, 0.286, 4090.0, 1130.0));
        assert_eq!((p.emissivity, p.t_v, p.c_p, p.c_t), (0.7, 3130.0, 54e3, 5.07e4));
        assert_eq!((p.c_m, p.molar_mass, p.h_v, p.t_h0), (9.15e-4, 0.0478, 8.84e6, 538.0));
        assert_eq!(p.t_max_clamp, 4130.0);
    }

    #[test]
    fn conductivity_examples() {
        assert!((conductivity(300.0, 0.0, &p()) - 0.286).abs() < 1e-15);
        assert!((conductivity(300.0, 1.0, &p()) - 28.6).abs() < 1e-15);
        assert!((conductivity(1903.0, 1.0, &p()) - 28.6).abs() < 1e-12);
    }

    #[test]
    fn losses() {
        let params = p();
        assert_eq!(surface_losses(293.0, &params), (0.0, 0.0));
        let (rad, evap) = surface_losses(2000.0, &params);
        assert!((rad - 0.7 * STEFAN_BOLTZMANN * (2000f64.powi(4) - 293f64.powi(4))).abs() < 1e-6);
        assert_eq!(evap, 0.0);
        let (_, hot) = surface_losses(5000.0, &params);
        let (_, capped) = surface_losses(4130.0, &params);
        assert_eq!(hot, capped);
        let tc = 4130.0f64;
        let want = 0.82
            * 54e3
            * (-5.07e4 * (1.0 / tc - 1.0 / 3130.0)).exp()
            * (9.15e-4 / tc).sqrt()
            * (8.84e6 + 1130.0 * (tc - 538.0));
        assert!(((capped - want) / want).abs() < 1e-6);
    }

    #[test]
    fn source_profile() {
        let s = HeatSource { power: 180.0, radius: 60e-6, depth: 50e-6, x: 0.0, y: 0.0, active: true };
        let axis = source_term(0.0, 0.0, 10e-6, &s);
        assert!((axis - 2.0 * 180.0 / (std::f64::consts::PI * 3.6e-9 * 50e-6)).abs() / axis < 1e-9);
        let off = source_term(60e-6, 0.0, 10e-6, &s);
        assert!((off / axis - (-2.0f64).exp()).abs() < 1e-6);
        assert_eq!(source_term(0.0, 0.0, 60e-6, &s), 0.0);
    }

    #[test]
    fn deposited_power_matches_beam() {
        let grid = Grid { nx: 40, ny: 40, nz: 3, h: 25e-6 };
        let field = ThermalField::new(grid, 3, 293.0, Boundaries::default());
        let s = HeatSource { power: 180.0, radius: 60e-6, depth: 25e-6, x: 0.5e-3, y: 0.5e-3, active: true };
        let mut q = vec![0.0; grid.len()];
        field.source_field(&s, &mut q);
        let total: f64 = q.iter().sum::<f64>() * grid.h.powi(3);
        assert!((total - 180.0).abs() / 180.0 < 0.01, "{total}");
    }

    #[test]
    fn stability_limit_is_enforced() {
        let grid = Grid { nx: 2, ny: 2, nz: 2, h: 50e-6 };
        let mut f = ThermalField::new(grid, 2, 293.0, Boundaries::default());
        let off = HeatSource { power: 0.0, radius: 1.0, depth: 1.0, x: 0.0, y: 0.0, active: false };
        let limit = p().stable_dt(50e-6);
        assert!((limit - 6.734e-5).abs() < 1e-8);
        match f.step(&off, 2.0 * limit, &p()) {
            Err(ThermalError::Stability { admissible, .. }) => assert_eq!(admissible, limit),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn uniform_field_is_steady() {
        let grid = Grid { nx: 4, ny: 3, nz: 5, h: 50e-6 };
        let mut f = ThermalField::new(grid, 5, 293.0, Boundaries::default());
        let off = HeatSource { power: 0.0, radius: 1.0, depth: 1.0, x: 0.0, y: 0.0, active: false };
        f.advance(&off, 1e-3, &p()).unwrap();
        assert!(f.temperature.iter().all(|&t| t == 293.0));
    }

    #[test]
    fn activation() {
        let grid = Grid { nx: 2, ny: 2, nz: 3, h: 50e-6 };
        let mut f = ThermalField::new(grid, 1, 500.0, Boundaries::default());
        f.temperature[0] = 700.0;
        assert_eq!(f.activate_layer(400.0).unwrap(), 1);
        assert_eq!(f.temperature[0], 700.0);
        assert!((4..8).all(|i| f.kind[i] == VoxelKind::Powder && f.consolidated[i] == 0.0 && f.temperature[i] == 400.0));
        assert!((f.surface_z() - 100e-6).abs() < 1e-18);
        f.activate_layer(400.0).unwrap();
        assert!(matches!(f.activate_layer(400.0), Err(ThermalError::BuildComplete(3))));
    }

    #[test]
    fn consolidation_is_a_running_max() {
        let grid = Grid { nx: 1, ny: 1, nz: 2, h: 50e-6 };
        let mut f = ThermalField::new(grid, 1, 293.0, Boundaries::default());
        f.activate_layer(293.0).unwrap();
        f.temperature[1] = 1903.0;
        f.update_consolidation(&p());
        assert_eq!(f.consolidated[1], 0.5);
        f.temperature[1] = 300.0;
        f.update_consolidation(&p());
        assert_eq!(f.consolidated[1], 0.5);
        assert_eq!(f.consolidated[0], 1.0);
    }

    #[test]
    fn cooldown_schedule() {
        let s = Schedule::default();
        let steps = s.cooldown_steps(1.0);
        assert!(steps[..2000].iter().all(|&d| d == 2e-5));
        assert!(steps[2000..2010].iter().all(|&d| d == 2e-5));
        assert!(steps[2010..2020].iter().all(|&d| d == 4e-5));
        assert!(steps.iter().all(|&d| d <= 0.1));
        let total: f64 = steps.iter().sum();
        assert!((total - 1.0).abs() < 1e-12);
        assert!(s.cooldown_steps(10.0).iter().any(|&d| d == 0.1));
    }

    #[test]
    fn geometry_grid() {
        let g = BuildGeometry::cube_proxy().grid().unwrap();
        assert_eq!((g.nx, g.ny, g.nz), (24, 24, 25));
        let e = BuildGeometry::cube_proxy().part_extent();
        assert!((e.x0 - 0.1e-3).abs() < 1e-15 && (e.width() - 1e-3).abs() < 1e-15);
        let bad = BuildGeometry { base_height: 1.01e-3 + 1e-7, ..BuildGeometry::cube_proxy() };
        assert!(bad.grid().is_err());
    }
}
