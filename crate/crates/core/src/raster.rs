//! Regular geographic (lat/lon) rasters.
//!
//! Grids use lower-left-corner registration: `xll`/`yll` are the outer
//! corner of the south-west cell, and every value represents the cell
//! centered at `(xll + (col + 0.5)·cell, yll + (nrows − row − 0.5)·cell)`.
//! Values are stored row-major with the northernmost row first.
//!
//! The text format is the familiar six-line `ncols`/`nrows`/`xllcorner`/
//! `yllcorner`/`cellsize`/`NODATA_value` header followed by one line per
//! row. Filters are nodata-aware: invalid cells carry zero weight and the
//! remaining weights are renormalized per output pixel.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rayon::prelude::*;

use crate::error::{Error, Result};

const LAT_EPS: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridGeometry {
    pub ncols: usize,
    pub nrows: usize,
    /// Longitude of the lower-left corner, degrees.
    pub xll: f64,
    /// Latitude of the lower-left corner, degrees.
    pub yll: f64,
    /// Degrees per pixel.
    pub cell: f64,
    pub nodata: f64,
}

impl GridGeometry {
    pub fn new(ncols: usize, nrows: usize, xll: f64, yll: f64, cell: f64, nodata: f64) -> Result<Self> {
        let g = GridGeometry {
            ncols,
            nrows,
            xll,
            yll,
            cell,
            nodata,
        };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        if self.ncols == 0 || self.nrows == 0 {
            return Err(Error::Argument(format!(
                "grid dimensions must be positive (got {}x{})",
                self.ncols, self.nrows
            )));
        }
        if !(self.cell.is_finite() && self.cell > 0.0) {
            return Err(Error::Argument(format!(
                "cell size must be positive, got {}",
                self.cell
            )));
        }
        if !self.xll.is_finite() || !self.yll.is_finite() {
            return Err(Error::Argument("grid corner must be finite".into()));
        }
        if self.yll < -90.0 - LAT_EPS || self.north() > 90.0 + LAT_EPS {
            return Err(Error::Argument(format!(
                "latitude extent [{}, {}] exceeds [-90, 90]",
                self.yll,
                self.north()
            )));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.ncols * self.nrows
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn west(&self) -> f64 {
        self.xll
    }

    pub fn east(&self) -> f64 {
        self.xll + self.ncols as f64 * self.cell
    }

    pub fn south(&self) -> f64 {
        self.yll
    }

    pub fn north(&self) -> f64 {
        self.yll + self.nrows as f64 * self.cell
    }

    /// Same shape, origin and cell size (the nodata sentinel may differ).
    pub fn is_aligned(&self, other: &GridGeometry) -> bool {
        self.ncols == other.ncols
            && self.nrows == other.nrows
            && self.xll == other.xll
            && self.yll == other.yll
            && self.cell == other.cell
    }

    pub fn ensure_aligned(&self, other: &GridGeometry) -> Result<()> {
        if self.is_aligned(other) {
            Ok(())
        } else {
            Err(Error::Alignment(format!(
                "{}x{}@({}, {}, {}) vs {}x{}@({}, {}, {})",
                self.ncols,
                self.nrows,
                self.xll,
                self.yll,
                self.cell,
                other.ncols,
                other.nrows,
                other.xll,
                other.yll,
                other.cell
            )))
        }
    }

    /// (lat, lon) of the center of a stored cell.
    pub fn cell_center(&self, row: usize, col: usize) -> (f64, f64) {
        let lon = self.xll + (col as f64 + 0.5) * self.cell;
        let lat = self.yll + ((self.nrows - row) as f64 - 0.5) * self.cell;
        (lat, lon)
    }

    pub fn contains(&self, lat: f64, lon: f64) -> bool {
        lat >= self.south() && lat <= self.north() && lon >= self.west() && lon <= self.east()
    }

    /// Stored (row, col) of the cell containing a point, if inside the grid.
    /// Points on the east or north outer edge map to the last cell.
    pub fn cell_of(&self, lat: f64, lon: f64) -> Option<(usize, usize)> {
        if !self.contains(lat, lon) {
            return None;
        }
        let col = (((lon - self.xll) / self.cell).floor() as usize).min(self.ncols - 1);
        let south_row = (((lat - self.yll) / self.cell).floor() as usize).min(self.nrows - 1);
        Some((self.nrows - 1 - south_row, col))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    geometry: GridGeometry,
    values: Vec<f64>,
}

impl Grid {
    pub fn new(geometry: GridGeometry, values: Vec<f64>) -> Result<Self> {
        geometry.validate()?;
        if values.len() != geometry.len() {
            return Err(Error::Argument(format!(
                "expected {} values, got {}",
                geometry.len(),
                values.len()
            )));
        }
        let grid = Grid { geometry, values };
        if let Some(i) = grid.values.iter().position(|&v| !v.is_finite() && !grid.is_nodata(v)) {
            return Err(Error::Data(format!("non-finite value at index {i}")));
        }
        Ok(grid)
    }

    pub fn filled(geometry: GridGeometry, value: f64) -> Self {
        Grid {
            geometry,
            values: vec![value; geometry.len()],
        }
    }

    pub fn nodata_like(geometry: GridGeometry) -> Self {
        Self::filled(geometry, geometry.nodata)
    }

    pub fn geometry(&self) -> &GridGeometry {
        &self.geometry
    }

    pub fn ncols(&self) -> usize {
        self.geometry.ncols
    }

    pub fn nrows(&self) -> usize {
        self.geometry.nrows
    }

    pub fn nodata(&self) -> f64 {
        self.geometry.nodata
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn is_nodata(&self, v: f64) -> bool {
        is_nodata(v, self.geometry.nodata)
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.geometry.ncols + col]
    }

    /// The value at (row, col), or `None` for nodata.
    pub fn valid(&self, row: usize, col: usize) -> Option<f64> {
        let v = self.get(row, col);
        (!self.is_nodata(v)).then_some(v)
    }

    pub fn set(&mut self, row: usize, col: usize, value: f64) {
        let n = self.geometry.ncols;
        self.values[row * n + col] = value;
    }

    pub fn valid_count(&self) -> usize {
        self.values.iter().filter(|&&v| !self.is_nodata(v)).count()
    }

    /// Mean of the valid cells, or `None` when every cell is nodata.
    pub fn mean_valid(&self) -> Option<f64> {
        let (sum, n) = self
            .values
            .iter()
            .filter(|&&v| !self.is_nodata(v))
            .fold((0.0, 0usize), |(s, n), &v| (s + v, n + 1));
        (n > 0).then(|| sum / n as f64)
    }

    /// Applies `f` to every valid cell; nodata is carried over.
    pub fn map_valid(&self, f: impl Fn(f64) -> f64) -> Grid {
        let nodata = self.nodata();
        let values = self
            .values
            .iter()
            .map(|&v| if is_nodata(v, nodata) { nodata } else { f(v) })
            .collect();
        Grid {
            geometry: self.geometry,
            values,
        }
    }
}

pub(crate) fn is_nodata(v: f64, nodata: f64) -> bool {
    v == nodata || (nodata.is_nan() && v.is_nan())
}

// ---------------------------------------------------------------------------
// Text I/O

const HEADER_KEYS: [&str; 6] = ["ncols", "nrows", "xllcorner", "yllcorner", "cellsize", "NODATA_value"];

/// Renders a grid in the text format. `f64`'s shortest round-trip
/// formatting makes write→read→write byte-stable.
pub fn grid_to_string(grid: &Grid) -> String {
    let g = grid.geometry();
    let mut out = String::with_capacity(grid.values.len() * 8 + 128);
    let _ = writeln!(out, "ncols {}", g.ncols);
    let _ = writeln!(out, "nrows {}", g.nrows);
    let _ = writeln!(out, "xllcorner {}", g.xll);
    let _ = writeln!(out, "yllcorner {}", g.yll);
    let _ = writeln!(out, "cellsize {}", g.cell);
    let _ = writeln!(out, "NODATA_value {}", g.nodata);
    for row in grid.values.chunks(g.ncols) {
        for (i, v) in row.iter().enumerate() {
            if i > 0 {
                out.push(' ');
            }
            let _ = write!(out, "{v}");
        }
        out.push('\n');
    }
    out
}

pub fn parse_grid(text: &str, source: &str) -> Result<Grid> {
    let mut lines = text.lines().enumerate();
    let mut header = [None::<f64>; 6];
    for _ in 0..HEADER_KEYS.len() {
        let (idx, line) = lines
            .next()
            .ok_or_else(|| Error::parse(source, text.lines().count() + 1, "truncated header"))?;
        let lineno = idx + 1;
        let mut parts = line.split_whitespace();
        let (key, value) = match (parts.next(), parts.next(), parts.next()) {
            (Some(k), Some(v), None) => (k, v),
            _ => return Err(Error::parse(source, lineno, "expected `key value` header line")),
        };
        let slot = HEADER_KEYS
            .iter()
            .position(|k| k.eq_ignore_ascii_case(key))
            .ok_or_else(|| Error::parse(source, lineno, format!("unknown header key `{key}`")))?;
        if header[slot].is_some() {
            return Err(Error::parse(source, lineno, format!("duplicate header key `{key}`")));
        }
        let v: f64 = value
            .parse()
            .map_err(|_| Error::parse(source, lineno, format!("non-numeric header value `{value}`")))?;
        header[slot] = Some(v);
    }
    let [ncols, nrows, xll, yll, cell, nodata] = header.map(|v| v.expect("all header keys seen"));
    let as_count = |v: f64, key: &str| -> Result<usize> {
        if v >= 1.0 && v.fract() == 0.0 {
            Ok(v as usize)
        } else {
            Err(Error::parse(
                source,
                1,
                format!("{key} must be a positive integer, got {v}"),
            ))
        }
    };
    let geometry = GridGeometry::new(
        as_count(ncols, "ncols")?,
        as_count(nrows, "nrows")?,
        xll,
        yll,
        cell,
        nodata,
    )
    .map_err(|e| Error::parse(source, 1, e.to_string()))?;

    let mut values = Vec::with_capacity(geometry.len());
    let mut rows_read = 0usize;
    for (idx, line) in lines {
        let lineno = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        if rows_read == geometry.nrows {
            return Err(Error::parse(
                source,
                lineno,
                format!("more than {} data rows", geometry.nrows),
            ));
        }
        let before = values.len();
        for tok in line.split_whitespace() {
            let v: f64 = tok
                .parse()
                .map_err(|_| Error::parse(source, lineno, format!("non-numeric token `{tok}`")))?;
            if !v.is_finite() && !is_nodata(v, nodata) {
                return Err(Error::parse(source, lineno, format!("non-finite value `{tok}`")));
            }
            values.push(v);
        }
        let got = values.len() - before;
        if got != geometry.ncols {
            return Err(Error::parse(
                source,
                lineno,
                format!("expected {} columns, found {got}", geometry.ncols),
            ));
        }
        rows_read += 1;
    }
    if rows_read != geometry.nrows {
        return Err(Error::parse(
            source,
            text.lines().count(),
            format!("expected {} data rows, found {rows_read}", geometry.nrows),
        ));
    }
    Grid::new(geometry, values)
}

pub fn read_grid(path: impl AsRef<Path>) -> Result<Grid> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_grid(&text, &path.display().to_string())
}

pub fn write_grid(grid: &Grid, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, grid_to_string(grid)).map_err(|e| Error::io(path, e))
}

// ---------------------------------------------------------------------------
// Sampling and resampling

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Resampling {
    Nearest,
    Bilinear,
}

impl std::str::FromStr for Resampling {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "nearest" => Ok(Resampling::Nearest),
            "bilinear" => Ok(Resampling::Bilinear),
            other => Err(Error::Argument(format!("unknown resampling method `{other}`"))),
        }
    }
}

/// Fractional cell-center coordinate, snapped to the nearest integer when
/// within rounding noise of it.
fn center_coord(offset: f64, cell: f64) -> f64 {
    let f = offset / cell - 0.5;
    let r = f.round();
    if (f - r).abs() < 1e-9 {
        r
    } else {
        f
    }
}

/// Splits a fractional cell coordinate into a base index, the neighbor
/// index and the neighbor weight. Near the outer edges the coordinate is
/// clamped onto the edge cells.
fn bracket(f: f64, n: usize) -> (usize, usize, f64) {
    let max = (n - 1) as f64;
    let f = f.clamp(0.0, max);
    let i0 = f.floor() as usize;
    let t = f - i0 as f64;
    if t == 0.0 || i0 + 1 >= n {
        (i0, i0, 0.0)
    } else {
        (i0, i0 + 1, t)
    }
}

/// Bilinear interpolation between the four cell centers surrounding a
/// point. Returns the grid's nodata sentinel if any contributing corner is
/// nodata.
pub fn sample_bilinear(grid: &Grid, lat: f64, lon: f64) -> Result<f64> {
    let g = grid.geometry();
    if !(lat.is_finite() && lon.is_finite()) || !g.contains(lat, lon) {
        return Err(Error::Range(format!(
            "({lat}, {lon}) outside grid bounds lat [{}, {}], lon [{}, {}]",
            g.south(),
            g.north(),
            g.west(),
            g.east()
        )));
    }
    let fx = center_coord(lon - g.xll, g.cell);
    let fy = center_coord(lat - g.yll, g.cell);
    let (c0, c1, tx) = bracket(fx, g.ncols);
    let (s0, s1, ty) = bracket(fy, g.nrows);
    let row = |south: usize| g.nrows - 1 - south;

    let corners = [
        (row(s0), c0, (1.0 - tx) * (1.0 - ty)),
        (row(s0), c1, tx * (1.0 - ty)),
        (row(s1), c0, (1.0 - tx) * ty),
        (row(s1), c1, tx * ty),
    ];
    let mut acc = 0.0;
    for (r, c, w) in corners {
        let v = grid.get(r, c);
        if grid.is_nodata(v) {
            return Ok(g.nodata);
        }
        acc += w * v;
    }
    Ok(acc)
}

/// Resamples onto `target`, evaluating `method` at every target cell
/// center. Centers outside the source extent become nodata.
pub fn resample(grid: &Grid, target: &GridGeometry, method: Resampling) -> Result<Grid> {
    target.validate()?;
    let src = grid.geometry();
    let overlaps = target.west() < src.east()
        && target.east() > src.west()
        && target.south() < src.north()
        && target.north() > src.south();
    if !overlaps {
        return Err(Error::Range("target geometry does not overlap source".into()));
    }
    let mut values = vec![target.nodata; target.len()];
    values.par_chunks_mut(target.ncols).enumerate().for_each(|(row, out)| {
        for (col, slot) in out.iter_mut().enumerate() {
            let (lat, lon) = target.cell_center(row, col);
            let v = match method {
                Resampling::Nearest => src.cell_of(lat, lon).and_then(|(r, c)| grid.valid(r, c)),
                Resampling::Bilinear if src.contains(lat, lon) => {
                    let v = sample_bilinear(grid, lat, lon).expect("point inside source");
                    (!grid.is_nodata(v)).then_some(v)
                }
                Resampling::Bilinear => None,
            };
            if let Some(v) = v {
                *slot = v;
            }
        }
    });
    Grid::new(*target, values)
}

// ---------------------------------------------------------------------------
// Neighborhood filters

fn check_window(k: usize) -> Result<()> {
    if k == 0 || k.is_multiple_of(2) {
        Err(Error::Argument(format!(
            "window size must be odd and positive, got {k}"
        )))
    } else {
        Ok(())
    }
}

/// Per-cell partial sums along one row for a separable weighted filter.
#[derive(Clone, Copy)]
struct Partial {
    wsum: f64,
    weight: f64,
    min: f64,
    max: f64,
}

impl Partial {
    const EMPTY: Partial = Partial {
        wsum: 0.0,
        weight: 0.0,
        min: f64::INFINITY,
        max: f64::NEG_INFINITY,
    };
}

/// Separable, nodata-aware weighted mean over a k×k window. `kernel` holds
/// the 1-D weights (length k, all positive); the 2-D weight of an offset is
/// the product of the two 1-D weights. The result is clamped into the
/// range of valid window values, so constant windows reproduce their value
/// exactly.
fn separable_mean(grid: &Grid, kernel: &[f64]) -> Grid {
    let g = *grid.geometry();
    let (nc, nr) = (g.ncols, g.nrows);
    let half = kernel.len() / 2;

    let mut horiz = vec![Partial::EMPTY; g.len()];
    horiz.par_chunks_mut(nc).enumerate().for_each(|(row, out)| {
        let src = &grid.values[row * nc..(row + 1) * nc];
        for (col, slot) in out.iter_mut().enumerate() {
            let lo = col.saturating_sub(half);
            let hi = (col + half).min(nc - 1);
            let mut p = Partial::EMPTY;
            for c in lo..=hi {
                let v = src[c];
                if is_nodata(v, g.nodata) {
                    continue;
                }
                let w = kernel[c + half - col];
                p.wsum += w * v;
                p.weight += w;
                p.min = p.min.min(v);
                p.max = p.max.max(v);
            }
            *slot = p;
        }
    });

    let mut values = vec![g.nodata; g.len()];
    values.par_chunks_mut(nc).enumerate().for_each(|(row, out)| {
        let lo = row.saturating_sub(half);
        let hi = (row + half).min(nr - 1);
        for (col, slot) in out.iter_mut().enumerate() {
            let mut wsum = 0.0;
            let mut weight = 0.0;
            let mut min = f64::INFINITY;
            let mut max = f64::NEG_INFINITY;
            for r in lo..=hi {
                let p = horiz[r * nc + col];
                if p.weight == 0.0 {
                    continue;
                }
                let w = kernel[r + half - row];
                wsum += w * p.wsum;
                weight += w * p.weight;
                min = min.min(p.min);
                max = max.max(p.max);
            }
            if weight > 0.0 {
                *slot = (wsum / weight).clamp(min, max);
            }
        }
    });
    Grid { geometry: g, values }
}

/// Mean of the valid cells in the k×k window around each cell.
pub fn uniform_filter(grid: &Grid, k: usize) -> Result<Grid> {
    check_window(k)?;
    Ok(separable_mean(grid, &vec![1.0; k]))
}

/// Truncated k×k Gaussian smoothing with standard deviation `sigma`
/// (in pixels); `None` selects k/6.
pub fn gaussian_filter(grid: &Grid, k: usize, sigma: Option<f64>) -> Result<Grid> {
    check_window(k)?;
    let sigma = sigma.unwrap_or(k as f64 / 6.0);
    if !(sigma.is_finite() && sigma > 0.0) {
        return Err(Error::Argument(format!("sigma must be positive, got {sigma}")));
    }
    Ok(separable_mean(grid, &gaussian_kernel(k, sigma)))
}

/// Unnormalized 1-D Gaussian weights for offsets −k/2..=k/2.
pub fn gaussian_kernel(k: usize, sigma: f64) -> Vec<f64> {
    let half = (k / 2) as isize;
    (-half..=half)
        .map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp())
        .collect()
}

/// Linear-interpolated quantile of an unsorted sample at position
/// (n−1)·q. Reorders `values`.
pub(crate) fn quantile_linear(values: &mut [f64], q: f64) -> f64 {
    let pos = (values.len() - 1) as f64 * q;
    let i = pos.floor() as usize;
    let frac = pos - i as f64;
    let (_, &mut lo, rest) = values.select_nth_unstable_by(i, f64::total_cmp);
    if frac == 0.0 || rest.is_empty() {
        return lo;
    }
    let hi = rest.iter().copied().fold(f64::INFINITY, f64::min);
    lo + frac * (hi - lo)
}

/// Interquartile range of the valid cells in each k×k window; nodata where
/// fewer than four cells are valid.
pub fn window_iqr(grid: &Grid, k: usize) -> Result<Grid> {
    check_window(k)?;
    let g = *grid.geometry();
    let (nc, nr) = (g.ncols, g.nrows);
    let half = k / 2;
    let mut values = vec![g.nodata; g.len()];
    values.par_chunks_mut(nc).enumerate().for_each(|(row, out)| {
        let mut buf = Vec::with_capacity(k * k);
        let (r0, r1) = (row.saturating_sub(half), (row + half).min(nr - 1));
        for (col, slot) in out.iter_mut().enumerate() {
            let (c0, c1) = (col.saturating_sub(half), (col + half).min(nc - 1));
            buf.clear();
            for r in r0..=r1 {
                buf.extend(
                    grid.values[r * nc + c0..=r * nc + c1]
                        .iter()
                        .copied()
                        .filter(|&v| !is_nodata(v, g.nodata)),
                );
            }
            if buf.len() >= 4 {
                let q1 = quantile_linear(&mut buf, 0.25);
                let q3 = quantile_linear(&mut buf, 0.75);
                *slot = q3 - q1;
            }
        }
    });
    Ok(Grid { geometry: g, values })
}
