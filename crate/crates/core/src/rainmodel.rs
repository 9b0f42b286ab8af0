//! Three-parameter rain-rate exceedance model.
//!
//! The fraction of time (percent) that the 1-min rain rate exceeds `R` at a
//! location with mean annual rainfall `M_t` (mm) and rain probability `P_0`
//! (percent) is
//!
//! ```text
//! P(R) = P_0 · exp(−a·R·(1 + b·R) / (1 + c·R)),   a = x,  b = M_t / (y·P_0),  c = z·b
//! ```
//!
//! with three global constants `(x, y, z)`. All probabilities are in percent.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Exceedance probabilities (percent) at which site statistics are tabulated.
pub const STANDARD_LADDER: [f64; 16] = [
    0.001, 0.002, 0.003, 0.005, 0.01, 0.02, 0.03, 0.05, 0.1, 0.2, 0.3, 0.5, 1.0, 2.0, 3.0, 5.0,
];

const BRACKET_CAP_MM_H: f64 = 10_000.0;
const BISECT_REL_TOL: f64 = 1e-9;
const BISECT_WIDTH_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl ModelParams {
    pub fn new(x: f64, y: f64, z: f64) -> Result<Self> {
        let p = ModelParams { x, y, z };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("x", self.x), ("y", self.y), ("z", self.z)] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Argument(format!(
                    "model parameter {name} must be positive and finite, got {v}"
                )));
            }
        }
        Ok(())
    }

    /// Parses the three-line `x=`, `y=`, `z=` config text.
    pub fn parse(text: &str, source: &str) -> Result<Self> {
        let mut vals = [None; 3];
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::parse(source, idx + 1, "expected key=value"))?;
            let slot = match k.trim() {
                "x" => 0,
                "y" => 1,
                "z" => 2,
                other => return Err(Error::parse(source, idx + 1, format!("unknown key `{other}`"))),
            };
            if vals[slot].is_some() {
                return Err(Error::parse(source, idx + 1, format!("duplicate key `{}`", k.trim())));
            }
            let v: f64 = v
                .trim()
                .parse()
                .map_err(|_| Error::parse(source, idx + 1, format!("bad number `{}`", v.trim())))?;
            vals[slot] = Some(v);
        }
        match vals {
            [Some(x), Some(y), Some(z)] => {
                ModelParams::new(x, y, z).map_err(|e| Error::parse(source, 0, e.to_string()))
            }
            _ => Err(Error::parse(source, 0, "params need x, y and z")),
        }
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, &path.display().to_string())
    }

    pub fn to_config_string(&self) -> String {
        format!("x={}\ny={}\nz={}\n", self.x, self.y, self.z)
    }

    fn key(&self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }
}

/// Local rain climate: mean annual rainfall (mm) and rain probability (%).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClimatePoint {
    pub mt: f64,
    pub p0: f64,
}

impl ClimatePoint {
    pub fn new(mt: f64, p0: f64) -> Result<Self> {
        if !(mt.is_finite() && mt >= 0.0) {
            return Err(Error::Argument(format!("M_t must be >= 0, got {mt}")));
        }
        if !(p0.is_finite() && (0.0..=100.0).contains(&p0)) {
            return Err(Error::Argument(format!("P_0 must be in [0, 100], got {p0}")));
        }
        Ok(ClimatePoint { mt, p0 })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Coefficients {
    a: f64,
    b: f64,
    c: f64,
}

fn coefficients(climate: &ClimatePoint, params: &ModelParams) -> Coefficients {
    let b = climate.mt / (params.y * climate.p0);
    Coefficients {
        a: params.x,
        b,
        c: params.z * b,
    }
}

/// Percent of time the rain rate `r` (mm/h) is exceeded.
pub fn exceedance_probability(r: f64, climate: &ClimatePoint, params: &ModelParams) -> Result<f64> {
    if !(r >= 0.0) {
        return Err(Error::Argument(format!("rain rate must be >= 0, got {r}")));
    }
    if climate.p0 == 0.0 {
        return Ok(0.0);
    }
    Ok(exceedance_unchecked(r, coefficients(climate, params), climate.p0))
}

fn exceedance_unchecked(r: f64, k: Coefficients, p0: f64) -> f64 {
    p0 * (-k.a * r * (1.0 + k.b * r) / (1.0 + k.c * r)).exp()
}

fn check_probability(p: f64) -> Result<()> {
    if p > 0.0 && p <= 100.0 {
        Ok(())
    } else {
        Err(Error::Argument(format!(
            "exceedance probability must be in (0, 100], got {p}"
        )))
    }
}

/// Rain rate (mm/h) exceeded `p` percent of the time, by bracketed
/// bisection on the forward model. Zero when `p ≥ P_0`.
pub fn rain_rate(p: f64, climate: &ClimatePoint, params: &ModelParams) -> Result<f64> {
    check_probability(p)?;
    if p >= climate.p0 {
        return Ok(0.0);
    }
    let k = coefficients(climate, params);
    let prob = |r: f64| exceedance_unchecked(r, k, climate.p0);

    let mut hi = 1.0;
    while prob(hi) >= p {
        if hi >= BRACKET_CAP_MM_H {
            return Err(Error::Solver(format!(
                "no bracket below {BRACKET_CAP_MM_H} mm/h for p={p} (M_t={}, P_0={})",
                climate.mt, climate.p0
            )));
        }
        hi = (hi * 2.0).min(BRACKET_CAP_MM_H);
    }
    let mut lo = 0.0;
    loop {
        let mid = 0.5 * (lo + hi);
        let pm = prob(mid);
        if (pm - p).abs() <= BISECT_REL_TOL * p || hi - lo <= BISECT_WIDTH_TOL {
            return Ok(mid);
        }
        if pm > p {
            lo = mid;
        } else {
            hi = mid;
        }
    }
}

/// Closed-form inverse: with `L = ln(P_0/p)` the model reduces to the
/// quadratic `a·b·R² + (a − L·c)·R − L = 0`, whose positive root is taken.
pub fn rain_rate_closed_form(p: f64, climate: &ClimatePoint, params: &ModelParams) -> Result<f64> {
    check_probability(p)?;
    Ok(closed_form_unchecked(p, climate, params))
}

fn closed_form_unchecked(p: f64, climate: &ClimatePoint, params: &ModelParams) -> f64 {
    if p >= climate.p0 {
        return 0.0;
    }
    let k = coefficients(climate, params);
    let l = (climate.p0 / p).ln();
    let qa = k.a * k.b;
    let qb = k.a - l * k.c;
    if qa == 0.0 {
        return l / k.a;
    }
    let disc = (qb * qb + 4.0 * qa * l).sqrt();
    if qb > 0.0 {
        2.0 * l / (qb + disc)
    } else {
        (disc - qb) / (2.0 * qa)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SitePoint {
    /// Exceedance probability, percent.
    pub p: f64,
    /// Rain rate, mm/h.
    pub rate: f64,
}

/// Model curve at every rung of `ladder`.
pub fn estimate_site_curve(climate: &ClimatePoint, params: &ModelParams, ladder: &[f64]) -> Result<Vec<SitePoint>> {
    ladder
        .iter()
        .map(|&p| {
            Ok(SitePoint {
                p,
                rate: rain_rate(p, climate, params)?,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct SiteStatistics {
    pub site_id: String,
    pub lat: f64,
    pub lon: f64,
    pub country: String,
    pub years: f64,
    pub points: Vec<SitePoint>,
}

impl SiteStatistics {
    /// Checks value ranges and that the rate never increases with p.
    pub fn validate(&self) -> Result<()> {
        if !(self.years.is_finite() && self.years > 0.0) {
            return Err(Error::Data(format!("site {}: duration must be positive", self.site_id)));
        }
        for pt in &self.points {
            if !(pt.p > 0.0 && pt.p <= 100.0) {
                return Err(Error::Data(format!(
                    "site {}: p={} outside (0, 100]",
                    self.site_id, pt.p
                )));
            }
            if !(pt.rate.is_finite() && pt.rate >= 0.0) {
                return Err(Error::Data(format!(
                    "site {}: negative or non-finite rate",
                    self.site_id
                )));
            }
        }
        let mut sorted = self.points.clone();
        sorted.sort_by(|a, b| a.p.total_cmp(&b.p));
        for w in sorted.windows(2) {
            if w[0].p == w[1].p {
                return Err(Error::Data(format!("site {}: duplicate p={}", self.site_id, w[0].p)));
            }
            if w[1].rate > w[0].rate {
                return Err(Error::Data(format!(
                    "site {}: rate increases from p={} to p={}",
                    self.site_id, w[0].p, w[1].p
                )));
            }
        }
        Ok(())
    }

    pub fn rate_at(&self, p: f64) -> Option<f64> {
        self.points.iter().find(|pt| pt.p == p).map(|pt| pt.rate)
    }
}

/// Log-linear interpolation of a site curve onto `targets`. Targets outside
/// the observed probability range are dropped.
pub fn loglinear_resample(points: &[SitePoint], targets: &[f64]) -> Result<Vec<SitePoint>> {
    if points.len() < 2 {
        return Err(Error::Argument(format!(
            "log-linear resampling needs at least 2 points, got {}",
            points.len()
        )));
    }
    let mut knots = points.to_vec();
    knots.sort_by(|a, b| a.p.total_cmp(&b.p));
    if knots.iter().any(|k| !(k.p > 0.0)) {
        return Err(Error::Argument("probabilities must be positive".into()));
    }
    let (pmin, pmax) = (knots[0].p, knots[knots.len() - 1].p);
    let mut out = Vec::new();
    for &t in targets {
        if !(t >= pmin && t <= pmax) {
            continue;
        }
        if let Some(k) = knots.iter().find(|k| k.p == t) {
            out.push(*k);
            continue;
        }
        let j = knots.partition_point(|k| k.p < t);
        let (a, b) = (knots[j - 1], knots[j]);
        let f = (t.ln() - a.p.ln()) / (b.p.ln() - a.p.ln());
        out.push(SitePoint {
            p: t,
            rate: a.rate + f * (b.rate - a.rate),
        });
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Fitting

#[derive(Debug, Clone)]
pub struct FitOptions {
    /// Seed for start-point jitter.
    pub seed: u64,
    /// Multiplicative start jitter, as a fraction of a natural-log unit.
    pub jitter: f64,
    /// Relative objective change that counts as converged.
    pub tolerance: f64,
    pub max_evaluations: usize,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            seed: 0,
            jitter: 0.1,
            tolerance: 1e-8,
            max_evaluations: 20_000,
        }
    }
}

#[derive(Debug, Clone)]
pub struct FitResult {
    pub params: ModelParams,
    /// Mean squared relative error at `params`.
    pub objective: f64,
    pub samples: usize,
    pub starts: usize,
    pub converged_starts: usize,
}

#[derive(Debug, Clone, Copy)]
struct Sample {
    p: f64,
    observed: f64,
    climate: ClimatePoint,
}

fn training_samples(training: &[(SiteStatistics, ClimatePoint)]) -> Result<Vec<Sample>> {
    let samples: Vec<Sample> = training
        .iter()
        .flat_map(|(site, climate)| {
            site.points.iter().filter(|pt| pt.rate > 0.0).map(move |pt| Sample {
                p: pt.p,
                observed: pt.rate,
                climate: *climate,
            })
        })
        .collect();
    if !samples.iter().any(|s| s.p < s.climate.p0) {
        return Err(Error::Argument(
            "training set needs at least one point with R > 0 and p < P_0".into(),
        ));
    }
    Ok(samples)
}

fn objective_of(samples: &[Sample], params: &ModelParams) -> f64 {
    let sum: f64 = samples
        .iter()
        .map(|s| {
            let predicted = closed_form_unchecked(s.p, &s.climate, params);
            let e = (predicted - s.observed) / s.observed;
            e * e
        })
        .sum();
    let v = sum / samples.len() as f64;
    if v.is_finite() {
        v
    } else {
        f64::INFINITY
    }
}

/// Mean squared relative error of the model over all training points with
/// an observed rate above zero.
pub fn fit_objective(training: &[(SiteStatistics, ClimatePoint)], params: &ModelParams) -> Result<f64> {
    params.validate()?;
    Ok(objective_of(&training_samples(training)?, params))
}

const LOG_BOUND: (f64, f64) = (-25.0, 25.0);
const START_X: [f64; 3] = [0.3, 1.0, 3.0];
const START_Y: [f64; 3] = [2e3, 2e4, 2e5];
const START_Z: [f64; 3] = [3.0, 30.0, 300.0];

fn params_of(theta: &[f64; 3]) -> ModelParams {
    let t = theta.map(|v| v.clamp(LOG_BOUND.0, LOG_BOUND.1).exp());
    ModelParams {
        x: t[0],
        y: t[1],
        z: t[2],
    }
}

struct Descent {
    theta: [f64; 3],
    value: f64,
    converged: bool,
}

/// Nelder–Mead over log-parameters, restarted from the incumbent until a
/// restart no longer improves the objective.
fn nelder_mead(f: &dyn Fn(&[f64; 3]) -> f64, start: [f64; 3], opts: &FitOptions) -> Descent {
    let mut best = start;
    let mut best_val = f(&start);
    let mut evals = 1usize;
    let mut converged = false;
    let mut step = 0.5;
    for _restart in 0..8 {
        let (theta, val, ok, used) = nm_run(f, best, step, opts, opts.max_evaluations.saturating_sub(evals));
        evals += used;
        let improved = best_val - val > opts.tolerance * best_val.abs().max(1e-300);
        if val <= best_val {
            best = theta;
            best_val = val;
        }
        converged = ok;
        if !ok || !improved || evals >= opts.max_evaluations {
            break;
        }
        step = 0.1;
    }
    Descent {
        theta: best,
        value: best_val,
        converged,
    }
}

fn nm_run(
    f: &dyn Fn(&[f64; 3]) -> f64,
    start: [f64; 3],
    step: f64,
    opts: &FitOptions,
    budget: usize,
) -> ([f64; 3], f64, bool, usize) {
    const N: usize = 3;
    let mut simplex: Vec<([f64; 3], f64)> = Vec::with_capacity(N + 1);
    simplex.push((start, f(&start)));
    for i in 0..N {
        let mut v = start;
        v[i] += step;
        simplex.push((v, f(&v)));
    }
    let mut evals = N + 1;
    let lerp = |a: &[f64; 3], b: &[f64; 3], t: f64| -> [f64; 3] {
        [
            a[0] + t * (b[0] - a[0]),
            a[1] + t * (b[1] - a[1]),
            a[2] + t * (b[2] - a[2]),
        ]
    };
    loop {
        simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
        let (lo, hi) = (simplex[0].1, simplex[N].1);
        let spread = hi - lo;
        if spread <= opts.tolerance * lo.abs() || spread <= 1e-30 {
            return (simplex[0].0, lo, true, evals);
        }
        if evals >= budget {
            return (simplex[0].0, lo, false, evals);
        }
        let mut centroid = [0.0; 3];
        for (v, _) in &simplex[..N] {
            for i in 0..N {
                centroid[i] += v[i] / N as f64;
            }
        }
        let worst = simplex[N].0;
        let reflected = lerp(&centroid, &worst, -1.0);
        let fr = f(&reflected);
        evals += 1;
        if fr < simplex[0].1 {
            let expanded = lerp(&centroid, &worst, -2.0);
            let fe = f(&expanded);
            evals += 1;
            simplex[N] = if fe < fr { (expanded, fe) } else { (reflected, fr) };
        } else if fr < simplex[N - 1].1 {
            simplex[N] = (reflected, fr);
        } else {
            let contracted = if fr < simplex[N].1 {
                lerp(&centroid, &reflected, 0.5)
            } else {
                lerp(&centroid, &worst, 0.5)
            };
            let fc = f(&contracted);
            evals += 1;
            if fc < simplex[N].1.min(fr) {
                simplex[N] = (contracted, fc);
            } else {
                let best = simplex[0].0;
                for entry in simplex.iter_mut().skip(1) {
                    let v = lerp(&best, &entry.0, 0.5);
                    *entry = (v, f(&v));
                }
                evals += N;
            }
        }
    }
}

/// Fits `(x, y, z)` by minimizing the mean squared relative error of
/// predicted rain rates over the training set.
///
/// Descents start from a 3×3×3 logarithmic grid of parameter values,
/// each jittered from `opts.seed`, and run in parallel. The best converged
/// start wins; ties go to the lexicographically smallest `(x, y, z)`.
pub fn fit_params(training: &[(SiteStatistics, ClimatePoint)], opts: &FitOptions) -> Result<FitResult> {
    if training.is_empty() {
        return Err(Error::Argument("empty training set".into()));
    }
    let samples = training_samples(training)?;

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut starts = Vec::with_capacity(27);
    for &x in &START_X {
        for &y in &START_Y {
            for &z in &START_Z {
                let mut theta = [x.ln(), y.ln(), z.ln()];
                for t in &mut theta {
                    *t += opts.jitter * rng.gen_range(-1.0..=1.0);
                }
                starts.push(theta);
            }
        }
    }

    let objective = |theta: &[f64; 3]| objective_of(&samples, &params_of(theta));
    let descents: Vec<Descent> = starts.par_iter().map(|&s| nelder_mead(&objective, s, opts)).collect();

    let converged_starts = descents.iter().filter(|d| d.converged).count();
    let best = descents
        .iter()
        .filter(|d| d.converged && d.value.is_finite())
        .map(|d| (params_of(&d.theta), d.value))
        .min_by(|a, b| {
            a.1.total_cmp(&b.1).then_with(|| {
                let (ka, kb) = (a.0.key(), b.0.key());
                ka[0]
                    .total_cmp(&kb[0])
                    .then(ka[1].total_cmp(&kb[1]))
                    .then(ka[2].total_cmp(&kb[2]))
            })
        })
        .ok_or_else(|| Error::Solver("no multi-start descent converged".into()))?;

    Ok(FitResult {
        params: best.0,
        objective: best.1,
        samples: samples.len(),
        starts: starts.len(),
        converged_starts,
    })
}

/// Per-point relative residuals of a fitted model, in training order.
pub fn fit_residuals(
    training: &[(SiteStatistics, ClimatePoint)],
    params: &ModelParams,
) -> Result<Vec<(String, SitePoint, f64)>> {
    let mut out = Vec::new();
    for (site, climate) in training {
        for pt in site.points.iter().filter(|pt| pt.rate > 0.0) {
            let predicted = rain_rate(pt.p, climate, params)?;
            out.push((site.site_id.clone(), *pt, predicted));
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Site-statistics CSV

#[derive(Debug, Serialize, Deserialize)]
struct SiteRow {
    site_id: String,
    lat: f64,
    lon: f64,
    country: String,
    years: f64,
    p_percent: f64,
    rate_mm_h: f64,
}

pub const SITE_CSV_HEADER: &str = "site_id,lat,lon,country,years,p_percent,rate_mm_h";

/// Parses a site-statistics CSV, grouping rows by site in first-seen order.
pub fn parse_site_statistics(text: &str, source: &str) -> Result<Vec<SiteStatistics>> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let mut sites: Vec<SiteStatistics> = Vec::new();
    let mut index: HashMap<String, usize> = HashMap::new();
    for (i, rec) in rdr.deserialize::<SiteRow>().enumerate() {
        let row = rec.map_err(|e| Error::parse(source, i + 2, e.to_string()))?;
        let idx = *index.entry(row.site_id.clone()).or_insert_with(|| {
            sites.push(SiteStatistics {
                site_id: row.site_id.clone(),
                lat: row.lat,
                lon: row.lon,
                country: row.country.clone(),
                years: row.years,
                points: Vec::new(),
            });
            sites.len() - 1
        });
        let site = &mut sites[idx];
        if site.lat != row.lat || site.lon != row.lon || site.country != row.country || site.years != row.years {
            return Err(Error::parse(
                source,
                i + 2,
                format!("site {} metadata differs between rows", row.site_id),
            ));
        }
        site.points.push(SitePoint {
            p: row.p_percent,
            rate: row.rate_mm_h,
        });
    }
    for s in &sites {
        s.validate()?;
    }
    Ok(sites)
}

pub fn read_site_statistics(path: impl AsRef<Path>) -> Result<Vec<SiteStatistics>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_site_statistics(&text, &path.display().to_string())
}

pub fn site_statistics_to_csv(sites: &[SiteStatistics]) -> String {
    let mut out = String::from(SITE_CSV_HEADER);
    out.push('\n');
    for s in sites {
        for pt in &s.points {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{}",
                s.site_id, s.lat, s.lon, s.country, s.years, pt.p, pt.rate
            );
        }
    }
    out
}
