//! Gridded M_t / P_0 climatology from radar footprint observations.
//!
//! Pipeline: render footprints onto the target grid with per-pixel
//! de-duplication → initial per-pixel estimates → blend toward a smoothed
//! reference M_t grid, with the blend weight falling off with terrain
//! roughness → final Gaussian smoothing.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Deserialize;

use crate::error::{Error, Result, StageExt};
use crate::raster::{self, Grid, GridGeometry, Resampling};

/// Hours per year (365.25 days).
pub const HOURS_PER_YEAR: f64 = 8766.0;
/// Kilometres per degree of latitude on a sphere of radius 6371.0088 km.
pub const KM_PER_DEG: f64 = 6371.0088 * std::f64::consts::PI / 180.0;

pub const DEFAULT_DEDUP_WINDOW_S: f64 = 60.0;
pub const DEFAULT_K_UNIFORM: usize = 121;
pub const DEFAULT_K_GAUSS: usize = 21;

const DIAMETER_BAND_KM: (f64, f64) = (3.0, 6.0);

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SwathObservation {
    /// Seconds since the epoch.
    pub time: f64,
    pub lat: f64,
    pub lon: f64,
    /// Near-surface rain rate, mm/h.
    pub nsrr: f64,
    pub rain_certain: bool,
    pub diameter_km: f64,
}

impl SwathObservation {
    pub fn validate(&self) -> Result<()> {
        if !self.time.is_finite() || !self.lat.is_finite() || !self.lon.is_finite() {
            return Err(Error::Data("observation time/location must be finite".into()));
        }
        if !(self.nsrr.is_finite() && self.nsrr >= 0.0) {
            return Err(Error::Data(format!("NSRR must be >= 0, got {}", self.nsrr)));
        }
        let (lo, hi) = DIAMETER_BAND_KM;
        if !(self.diameter_km >= lo && self.diameter_km <= hi) {
            return Err(Error::Data(format!(
                "footprint diameter {} km outside [{lo}, {hi}]",
                self.diameter_km
            )));
        }
        Ok(())
    }

    /// Counts as rain only when flagged rain-certain with a positive rate.
    pub fn is_rain(&self) -> bool {
        self.rain_certain && self.nsrr > 0.0
    }
}

/// Per-pixel observation tallies.
#[derive(Debug, Clone, PartialEq)]
pub struct AccumulatorGrid {
    pub geometry: GridGeometry,
    pub n_total: Vec<u32>,
    pub n_rain: Vec<u32>,
    pub sum_nsrr: Vec<f64>,
}

impl AccumulatorGrid {
    pub fn empty(geometry: GridGeometry) -> Self {
        let n = geometry.len();
        AccumulatorGrid {
            geometry,
            n_total: vec![0; n],
            n_rain: vec![0; n],
            sum_nsrr: vec![0.0; n],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Rendered {
    pub acc: AccumulatorGrid,
    pub observations: usize,
    /// Observations whose footprint covers no pixel center of the grid.
    pub skipped: usize,
}

/// The window currently open at one pixel.
#[derive(Clone, Copy)]
struct OpenWindow {
    start: f64,
    rain: bool,
    max_nsrr: f64,
}

struct Band<'a> {
    geometry: &'a GridGeometry,
    rows: std::ops::Range<usize>,
    window_s: f64,
    open: Vec<Option<OpenWindow>>,
    n_total: Vec<u32>,
    n_rain: Vec<u32>,
    sum_nsrr: Vec<f64>,
}

impl<'a> Band<'a> {
    fn new(geometry: &'a GridGeometry, rows: std::ops::Range<usize>, window_s: f64) -> Self {
        let n = rows.len() * geometry.ncols;
        Band {
            geometry,
            rows,
            window_s,
            open: vec![None; n],
            n_total: vec![0; n],
            n_rain: vec![0; n],
            sum_nsrr: vec![0.0; n],
        }
    }

    fn commit(&mut self, i: usize, w: OpenWindow) {
        self.n_total[i] += 1;
        if w.rain {
            self.n_rain[i] += 1;
            self.sum_nsrr[i] += w.max_nsrr;
        }
    }

    fn touch(&mut self, i: usize, obs: &SwathObservation) {
        let rain = obs.is_rain();
        let value = if rain { obs.nsrr } else { 0.0 };
        match self.open[i] {
            Some(ref mut w) if obs.time - w.start <= self.window_s => {
                w.rain |= rain;
                w.max_nsrr = w.max_nsrr.max(value);
            }
            prev => {
                if let Some(w) = prev {
                    self.commit(i, w);
                }
                self.open[i] = Some(OpenWindow {
                    start: obs.time,
                    rain,
                    max_nsrr: value,
                });
            }
        }
    }

    fn render(&mut self, obs: &SwathObservation) -> bool {
        let g = self.geometry;
        let mut hit = false;
        for_each_covered(g, obs, self.rows.clone(), |row, col| {
            let i = (row - self.rows.start) * g.ncols + col;
            self.touch(i, obs);
            hit = true;
        });
        hit
    }

    fn finish(mut self) -> Self {
        for i in 0..self.open.len() {
            if let Some(w) = self.open[i].take() {
                self.commit(i, w);
            }
        }
        self
    }
}

/// Calls `f(row, col)` for every pixel in `rows` whose center lies inside
/// the observation's footprint disk. Distances use a local equirectangular
/// approximation scaled by cos(latitude of the footprint center).
pub fn for_each_covered(
    g: &GridGeometry,
    obs: &SwathObservation,
    rows: std::ops::Range<usize>,
    mut f: impl FnMut(usize, usize),
) {
    let radius = obs.diameter_km / 2.0;
    let r2 = radius * radius;
    let coslat = obs.lat.to_radians().cos();
    let dlat = radius / KM_PER_DEG;
    let dlon = radius / (KM_PER_DEG * coslat.max(1e-6));

    // candidate index ranges, padded by one cell; the disk test decides
    let south_lo = ((obs.lat - dlat - g.yll) / g.cell - 0.5).floor() - 1.0;
    let south_hi = ((obs.lat + dlat - g.yll) / g.cell - 0.5).ceil() + 1.0;
    let col_lo = ((obs.lon - dlon - g.xll) / g.cell - 0.5).floor() - 1.0;
    let col_hi = ((obs.lon + dlon - g.xll) / g.cell - 0.5).ceil() + 1.0;
    if south_hi < 0.0 || col_hi < 0.0 {
        return;
    }
    let nr = g.nrows as f64;
    let nc = g.ncols as f64;
    if south_lo >= nr || col_lo >= nc {
        return;
    }
    let s0 = south_lo.max(0.0) as usize;
    let s1 = south_hi.min(nr - 1.0) as usize;
    let c0 = col_lo.max(0.0) as usize;
    let c1 = col_hi.min(nc - 1.0) as usize;
    let row_lo = (g.nrows - 1 - s1).max(rows.start);
    let row_hi = (g.nrows - 1 - s0).min(rows.end.saturating_sub(1));
    if rows.is_empty() || row_lo > row_hi {
        return;
    }
    for row in row_lo..=row_hi {
        for col in c0..=c1 {
            let (lat_c, lon_c) = g.cell_center(row, col);
            let dx = (lon_c - obs.lon) * coslat * KM_PER_DEG;
            let dy = (lat_c - obs.lat) * KM_PER_DEG;
            if dx * dx + dy * dy <= r2 {
                f(row, col);
            }
        }
    }
}

/// Renders a time-sorted observation stream onto `geometry`.
///
/// Per pixel, observations within `dedup_window_s` of the pixel's window
/// start collapse into one logical observation (rain flag OR-ed, maximum
/// raining NSRR kept). Work is split into row bands, each of which scans
/// the whole stream in order, so the result does not depend on the number
/// of worker threads.
pub fn render_observations(
    observations: &[SwathObservation],
    geometry: &GridGeometry,
    dedup_window_s: f64,
) -> Result<Rendered> {
    geometry.validate()?;
    if !(dedup_window_s.is_finite() && dedup_window_s > 0.0) {
        return Err(Error::Argument(format!(
            "dedup window must be positive, got {dedup_window_s}"
        )));
    }
    for (i, obs) in observations.iter().enumerate() {
        obs.validate()
            .map_err(|e| Error::Data(format!("observation {}: {e}", i + 1)))?;
    }
    if let Some(i) = observations.windows(2).position(|w| w[1].time < w[0].time) {
        return Err(Error::Data(format!(
            "observations not sorted by time at record {}",
            i + 2
        )));
    }

    let bands = rayon::current_num_threads().clamp(1, geometry.nrows);
    let per = geometry.nrows.div_ceil(bands);
    let ranges: Vec<_> = (0..geometry.nrows)
        .step_by(per)
        .map(|s| s..(s + per).min(geometry.nrows))
        .collect();

    let results: Vec<(Band, Vec<bool>)> = ranges
        .into_par_iter()
        .map(|rows| {
            let mut band = Band::new(geometry, rows, dedup_window_s);
            let hits: Vec<bool> = observations.iter().map(|o| band.render(o)).collect();
            (band.finish(), hits)
        })
        .collect();

    let mut acc = AccumulatorGrid::empty(*geometry);
    let mut covered = vec![false; observations.len()];
    for (band, hits) in results {
        let off = band.rows.start * geometry.ncols;
        let n = band.n_total.len();
        acc.n_total[off..off + n].copy_from_slice(&band.n_total);
        acc.n_rain[off..off + n].copy_from_slice(&band.n_rain);
        acc.sum_nsrr[off..off + n].copy_from_slice(&band.sum_nsrr);
        for (c, h) in covered.iter_mut().zip(hits) {
            *c |= h;
        }
    }
    let skipped = covered.iter().filter(|&&c| !c).count();
    Ok(Rendered {
        acc,
        observations: observations.len(),
        skipped,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct InitialEstimates {
    /// Mean annual rainfall, mm/yr.
    pub mt: Grid,
    /// Rain probability, percent.
    pub p0: Grid,
    /// Mean rate over raining observations, mm/h.
    pub cond_rate: Grid,
}

pub fn initial_estimates(acc: &AccumulatorGrid) -> InitialEstimates {
    let g = acc.geometry;
    let mut mt = Grid::nodata_like(g);
    let mut p0 = Grid::nodata_like(g);
    let mut cond = Grid::nodata_like(g);
    for i in 0..g.len() {
        let total = acc.n_total[i];
        if total == 0 {
            continue;
        }
        let rain = acc.n_rain[i];
        let prob = 100.0 * rain as f64 / total as f64;
        let rate = if rain == 0 { 0.0 } else { acc.sum_nsrr[i] / rain as f64 };
        mt.values_mut()[i] = rate * HOURS_PER_YEAR * (prob / 100.0);
        p0.values_mut()[i] = prob;
        cond.values_mut()[i] = rate;
    }
    InitialEstimates {
        mt,
        p0,
        cond_rate: cond,
    }
}

/// Blend weight toward the reference grid: `1 / (1 + ln(1 + IQR))` of the
/// elevation in each k×k window. Flat terrain gets weight 1.
pub fn elevation_weight(elev: &Grid, k: usize) -> Result<Grid> {
    let iqr = raster::window_iqr(elev, k)?;
    let nodata = elev.nodata();
    let mut out = Grid::nodata_like(*elev.geometry());
    for (i, slot) in out.values_mut().iter_mut().enumerate() {
        let e = elev.values()[i];
        let q = iqr.values()[i];
        if elev.is_nodata(e) || iqr.is_nodata(q) {
            *slot = nodata;
            continue;
        }
        *slot = (1.0 / (1.0 + q.max(0.0).ln_1p())).clamp(0.0, 1.0);
    }
    Ok(out)
}

/// `(1 − w)·M_sat + w·uniform_k(M_ref)` per pixel, falling back to `M_sat`
/// where the smoothed reference or the weight is missing.
pub fn merge_reference(m_sat: &Grid, m_ref: &Grid, w: &Grid, k: usize) -> Result<Grid> {
    let g = *m_sat.geometry();
    g.ensure_aligned(m_ref.geometry())?;
    g.ensure_aligned(w.geometry())?;
    let smoothed = raster::uniform_filter(m_ref, k)?;
    let mut out = m_sat.clone();
    for (i, slot) in out.values_mut().iter_mut().enumerate() {
        let sat = m_sat.values()[i];
        let r = smoothed.values()[i];
        let wt = w.values()[i];
        if m_sat.is_nodata(sat) || smoothed.is_nodata(r) || w.is_nodata(wt) {
            continue;
        }
        let wt = wt.clamp(0.0, 1.0);
        let blended = (1.0 - wt) * sat + wt * r;
        *slot = blended.clamp(sat.min(r), sat.max(r));
    }
    Ok(out)
}

/// Gaussian smoothing of both grids, then P_0 clamped to [0, 100] and M_t
/// to ≥ 0.
pub fn finalize(mt: &Grid, p0: &Grid, k: usize, sigma: Option<f64>) -> Result<(Grid, Grid)> {
    mt.geometry().ensure_aligned(p0.geometry())?;
    let m = raster::gaussian_filter(mt, k, sigma)?.map_valid(|v| v.max(0.0));
    let p = raster::gaussian_filter(p0, k, sigma)?.map_valid(|v| v.clamp(0.0, 100.0));
    Ok((m, p))
}

// ---------------------------------------------------------------------------
// Pipeline

#[derive(Debug, Clone, PartialEq)]
pub struct ClimatologyParams {
    pub k_uniform: usize,
    pub k_gauss: usize,
    pub sigma: Option<f64>,
    pub dedup_window_s: f64,
}

impl Default for ClimatologyParams {
    fn default() -> Self {
        ClimatologyParams {
            k_uniform: DEFAULT_K_UNIFORM,
            k_gauss: DEFAULT_K_GAUSS,
            sigma: None,
            dedup_window_s: DEFAULT_DEDUP_WINDOW_S,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClimatologyConfig {
    pub observations: PathBuf,
    pub geometry: GridGeometry,
    pub reference: PathBuf,
    pub elevation: PathBuf,
    pub params: ClimatologyParams,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClimatologyReport {
    pub observations: usize,
    pub rain_observations: usize,
    pub skipped: usize,
    pub pixels: usize,
    pub observed_pixels: usize,
    pub mean_mt_initial: Option<f64>,
    pub mean_p0_initial: Option<f64>,
    pub mean_weight: Option<f64>,
    pub mean_mt_merged: Option<f64>,
    pub mean_mt_final: Option<f64>,
    pub mean_p0_final: Option<f64>,
}

impl ClimatologyReport {
    pub fn to_text(&self) -> String {
        let opt = |v: Option<f64>| v.map_or_else(|| "nodata".to_string(), |v| format!("{v:.6}"));
        let mut s = String::new();
        let _ = writeln!(s, "observations={}", self.observations);
        let _ = writeln!(s, "rain_observations={}", self.rain_observations);
        let _ = writeln!(s, "skipped_observations={}", self.skipped);
        let _ = writeln!(s, "pixels={}", self.pixels);
        let _ = writeln!(s, "observed_pixels={}", self.observed_pixels);
        let _ = writeln!(s, "mean_mt_initial={}", opt(self.mean_mt_initial));
        let _ = writeln!(s, "mean_p0_initial={}", opt(self.mean_p0_initial));
        let _ = writeln!(s, "mean_weight={}", opt(self.mean_weight));
        let _ = writeln!(s, "mean_mt_merged={}", opt(self.mean_mt_merged));
        let _ = writeln!(s, "mean_mt_final={}", opt(self.mean_mt_final));
        let _ = writeln!(s, "mean_p0_final={}", opt(self.mean_p0_final));
        s
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Climatology {
    pub mt: Grid,
    pub p0: Grid,
    pub report: ClimatologyReport,
}

/// Runs the full gridding pipeline on in-memory inputs. The reference and
/// elevation grids are bilinearly resampled onto `geometry` first.
pub fn run_pipeline(
    observations: &[SwathObservation],
    geometry: &GridGeometry,
    reference: &Grid,
    elevation: &Grid,
    params: &ClimatologyParams,
) -> Result<Climatology> {
    let rendered = render_observations(observations, geometry, params.dedup_window_s).stage("render")?;
    let init = initial_estimates(&rendered.acc);
    let reference = raster::resample(reference, geometry, Resampling::Bilinear).stage("resample-reference")?;
    let elevation = raster::resample(elevation, geometry, Resampling::Bilinear).stage("resample-elevation")?;
    let weight = elevation_weight(&elevation, params.k_uniform).stage("elevation-weight")?;
    let merged = merge_reference(&init.mt, &reference, &weight, params.k_uniform).stage("merge")?;
    let (mt, p0) = finalize(&merged, &init.p0, params.k_gauss, params.sigma).stage("finalize")?;

    let report = ClimatologyReport {
        observations: rendered.observations,
        rain_observations: observations.iter().filter(|o| o.is_rain()).count(),
        skipped: rendered.skipped,
        pixels: geometry.len(),
        observed_pixels: rendered.acc.n_total.iter().filter(|&&n| n > 0).count(),
        mean_mt_initial: init.mt.mean_valid(),
        mean_p0_initial: init.p0.mean_valid(),
        mean_weight: weight.mean_valid(),
        mean_mt_merged: merged.mean_valid(),
        mean_mt_final: mt.mean_valid(),
        mean_p0_final: p0.mean_valid(),
    };
    Ok(Climatology { mt, p0, report })
}

/// Reads the configured inputs and runs [`run_pipeline`].
pub fn build_climatology(config: &ClimatologyConfig) -> Result<Climatology> {
    let observations = read_observations(&config.observations).stage("read-observations")?;
    let reference = raster::read_grid(&config.reference).stage("read-reference")?;
    let elevation = raster::read_grid(&config.elevation).stage("read-elevation")?;
    run_pipeline(&observations, &config.geometry, &reference, &elevation, &config.params)
}

// ---------------------------------------------------------------------------
// Observation CSV

pub const OBSERVATION_CSV_HEADER: &str = "time_s,lat,lon,nsrr_mm_h,rain_certain,diameter_km";

#[derive(Deserialize)]
struct ObservationRow {
    time_s: f64,
    lat: f64,
    lon: f64,
    nsrr_mm_h: f64,
    rain_certain: u8,
    diameter_km: f64,
}

pub fn parse_observations(text: &str, source: &str) -> Result<Vec<SwathObservation>> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let mut out = Vec::new();
    for (i, rec) in rdr.deserialize::<ObservationRow>().enumerate() {
        let line = i + 2;
        let row = rec.map_err(|e| Error::parse(source, line, e.to_string()))?;
        let rain_certain = match row.rain_certain {
            0 => false,
            1 => true,
            v => {
                return Err(Error::parse(
                    source,
                    line,
                    format!("rain_certain must be 0 or 1, got {v}"),
                ))
            }
        };
        let obs = SwathObservation {
            time: row.time_s,
            lat: row.lat,
            lon: row.lon,
            nsrr: row.nsrr_mm_h,
            rain_certain,
            diameter_km: row.diameter_km,
        };
        obs.validate().map_err(|e| Error::parse(source, line, e.to_string()))?;
        out.push(obs);
    }
    Ok(out)
}

pub fn read_observations(path: impl AsRef<Path>) -> Result<Vec<SwathObservation>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_observations(&text, &path.display().to_string())
}

pub fn observations_to_csv(observations: &[SwathObservation]) -> String {
    let mut s = String::from(OBSERVATION_CSV_HEADER);
    s.push('\n');
    for o in observations {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{}",
            o.time,
            o.lat,
            o.lon,
            o.nsrr,
            u8::from(o.rain_certain),
            o.diameter_km
        );
    }
    s
}
