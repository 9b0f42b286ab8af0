//! Rain-rate maps, heavy-rain masks and population tabulations.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::evaluation::HEAVY_THRESHOLD_MM_H;
use crate::rainmodel::{self, ClimatePoint, ModelParams};
use crate::raster::{Grid, GridGeometry};

/// Rain zones with their tabulated R_0.01 (mm/h). Zone codes in category
/// grids are the 1-based positions in this table (A = 1 … Q = 12).
pub const RAIN_ZONES: [(&str, f64); 12] = [
    ("A", 8.0),
    ("C", 15.0),
    ("D", 19.0),
    ("E", 22.0),
    ("F", 28.0),
    ("H", 32.0),
    ("J", 35.0),
    ("K", 42.0),
    ("M", 63.0),
    ("N", 95.0),
    ("P", 145.0),
    ("Q", 115.0),
];

pub fn zone_name(code: i64) -> Option<&'static str> {
    usize::try_from(code - 1)
        .ok()
        .and_then(|i| RAIN_ZONES.get(i))
        .map(|z| z.0)
}

pub fn zone_r001(code: i64) -> Option<f64> {
    usize::try_from(code - 1)
        .ok()
        .and_then(|i| RAIN_ZONES.get(i))
        .map(|z| z.1)
}

/// Neumaier-compensated running sum.
#[derive(Debug, Clone, Copy, Default)]
struct Sum {
    s: f64,
    c: f64,
}

impl Sum {
    fn add(&mut self, v: f64) {
        let t = self.s + v;
        if self.s.abs() >= v.abs() {
            self.c += (self.s - t) + v;
        } else {
            self.c += (v - t) + self.s;
        }
        self.s = t;
    }

    fn value(&self) -> f64 {
        self.s + self.c
    }
}

/// Rain rate exceeded `p` percent of the time at every pixel where both
/// climate grids are valid.
pub fn rate_map(mt: &Grid, p0: &Grid, params: &ModelParams, p: f64) -> Result<Grid> {
    let g = *mt.geometry();
    g.ensure_aligned(p0.geometry())?;
    params.validate()?;
    if !(p > 0.0 && p <= 100.0) {
        return Err(Error::Argument(format!("p must be in (0, 100], got {p}")));
    }
    let rows: Vec<Vec<f64>> = (0..g.nrows)
        .into_par_iter()
        .map(|row| {
            (0..g.ncols)
                .map(|col| match (mt.valid(row, col), p0.valid(row, col)) {
                    (Some(m), Some(q)) => {
                        let climate = ClimatePoint::new(m, q)?;
                        rainmodel::rain_rate(p, &climate, params)
                    }
                    _ => Ok(g.nodata),
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    Grid::new(g, rows.concat())
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeavyMask {
    pub geometry: GridGeometry,
    pub mask: Vec<bool>,
    /// Pixels that were nodata in the rate grid (reported as `false`).
    pub nodata: usize,
}

impl HeavyMask {
    pub fn count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

/// `rate > threshold` per pixel; nodata pixels are `false`.
pub fn heavy_mask(rate: &Grid, threshold: f64) -> HeavyMask {
    let mut nodata = 0;
    let mask = rate
        .values()
        .iter()
        .map(|&v| {
            if rate.is_nodata(v) {
                nodata += 1;
                false
            } else {
                v > threshold
            }
        })
        .collect();
    HeavyMask {
        geometry: *rate.geometry(),
        mask,
        nodata,
    }
}

pub fn default_heavy_mask(rate: &Grid) -> HeavyMask {
    heavy_mask(rate, HEAVY_THRESHOLD_MM_H)
}

fn category(grid: &Grid, i: usize) -> Result<Option<i64>> {
    let v = grid.values()[i];
    if grid.is_nodata(v) {
        return Ok(None);
    }
    if v.fract() != 0.0 || v < 0.0 {
        return Err(Error::Data(format!("category value {v} is not a non-negative integer")));
    }
    Ok(Some(v as i64))
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct PopulationTotals {
    /// Population over all pixels of the unit.
    pub total: f64,
    /// Population over masked pixels.
    pub heavy: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PopulationTable {
    pub countries: BTreeMap<i64, PopulationTotals>,
    /// Pixels with a nodata country code.
    pub unassigned: PopulationTotals,
    pub grand: PopulationTotals,
}

impl PopulationTable {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("country_code,total_pop,heavy_pop\n");
        for (code, t) in &self.countries {
            let _ = writeln!(s, "{code},{},{}", t.total, t.heavy);
        }
        let _ = writeln!(s, "unassigned,{},{}", self.unassigned.total, self.unassigned.heavy);
        let _ = writeln!(s, "total,{},{}", self.grand.total, self.grand.heavy);
        s
    }
}

/// Per-country population totals, overall and under the mask. Pixels with
/// a valid population but nodata country are kept under `unassigned`, so
/// the grand totals cover every populated pixel.
pub fn zonal_population(pop: &Grid, mask: &HeavyMask, countries: &Grid) -> Result<PopulationTable> {
    let g = pop.geometry();
    g.ensure_aligned(&mask.geometry)?;
    g.ensure_aligned(countries.geometry())?;
    let mut per: BTreeMap<i64, (Sum, Sum)> = BTreeMap::new();
    let mut unassigned = (Sum::default(), Sum::default());
    let mut grand = (Sum::default(), Sum::default());
    for i in 0..g.len() {
        let v = pop.values()[i];
        if pop.is_nodata(v) {
            continue;
        }
        let slot = match category(countries, i)? {
            Some(code) => per.entry(code).or_default(),
            None => &mut unassigned,
        };
        slot.0.add(v);
        grand.0.add(v);
        if mask.mask[i] {
            slot.1.add(v);
            grand.1.add(v);
        }
    }
    let totals = |(a, b): (Sum, Sum)| PopulationTotals {
        total: a.value(),
        heavy: b.value(),
    };
    Ok(PopulationTable {
        countries: per.into_iter().map(|(k, v)| (k, totals(v))).collect(),
        unassigned: totals(unassigned),
        grand: totals(grand),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ZoneCoverage {
    pub code: i64,
    /// Share of valid zone pixels, percent.
    pub land_pct: f64,
    /// Share of populated pixels, percent.
    pub populated_pct: f64,
    /// Share of population, percent.
    pub pop_pct: f64,
}

/// Per-zone shares of land pixels, populated pixels and population, over
/// pixels with a valid zone code. A zero-population input leaves the two
/// population columns at zero.
pub fn zone_coverage(zones: &Grid, pop: &Grid) -> Result<Vec<ZoneCoverage>> {
    let g = zones.geometry();
    g.ensure_aligned(pop.geometry())?;
    let mut per: BTreeMap<i64, (u64, u64, Sum)> = BTreeMap::new();
    let (mut land, mut populated, mut people) = (0u64, 0u64, Sum::default());
    for i in 0..g.len() {
        let Some(code) = category(zones, i)? else {
            continue;
        };
        let e = per.entry(code).or_default();
        e.0 += 1;
        land += 1;
        let v = pop.values()[i];
        if !pop.is_nodata(v) && v > 0.0 {
            e.1 += 1;
            e.2.add(v);
            populated += 1;
            people.add(v);
        }
    }
    if land == 0 {
        return Err(Error::EmptyData("zone grid has no valid pixels".into()));
    }
    let people = people.value();
    let pct = |num: f64, den: f64| if den > 0.0 { 100.0 * num / den } else { 0.0 };
    Ok(per
        .into_iter()
        .map(|(code, (n, np, pp))| ZoneCoverage {
            code,
            land_pct: pct(n as f64, land as f64),
            populated_pct: pct(np as f64, populated as f64),
            pop_pct: pct(pp.value(), people),
        })
        .collect())
}

pub fn zone_coverage_to_csv(rows: &[ZoneCoverage]) -> String {
    let mut s = String::from("zone,r001_mm_h,land_pct_px,populated_pct_px,pop_pct\n");
    for r in rows {
        let name = zone_name(r.code).map_or_else(|| r.code.to_string(), str::to_string);
        let r001 = zone_r001(r.code).map_or_else(String::new, |v| v.to_string());
        let _ = writeln!(
            s,
            "{name},{r001},{:.4},{:.4},{:.4}",
            r.land_pct, r.populated_pct, r.pop_pct
        );
    }
    s
}
