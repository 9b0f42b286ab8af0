//! The `rainstat` batch front-end.
//!
//! Every subcommand reads a flat `key = value` configuration file, computes
//! all of its outputs in memory and only then writes them, together with a
//! `manifest.txt`, into the configured `out_dir`. A failing run leaves the
//! output directory untouched.

use std::collections::{BTreeMap, BTreeSet};
use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::Deserialize;
use sha2::{Digest, Sha256};

use crate::climatology::{self, ClimatologyParams};
use crate::error::{Error, Result, StageExt};
use crate::evaluation::{self, ConfusionMatrix, ErrorSample};
use crate::gauge::{self, DEFAULT_MIN_COUNT};
use crate::impact;
use crate::rainmodel::{self, ClimatePoint, FitOptions, ModelParams, SiteStatistics, STANDARD_LADDER};
use crate::raster::{self, Grid, GridGeometry};

const MINUTES_PER_YEAR: f64 = 365.25 * 1440.0;

#[derive(Debug, Parser)]
#[command(name = "rainstat", version, about = "Rain-rate exceedance statistics toolkit")]
pub struct Cli {
    /// Run configuration (flat key = value text).
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Seed for every random choice made by the run.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Worker threads (default: all cores). Outputs do not depend on it.
    #[arg(long, global = true, value_parser = clap::value_parser!(u16).range(1..))]
    pub threads: Option<u16>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Fit model parameters to a training set of site curves.
    Fit,
    /// Model curves at sites from climate grids or a climate table.
    Predict,
    /// Grid footprint observations into M_t and P_0 climatologies.
    #[command(name = "build-clim")]
    BuildClim,
    /// Reduce tipping-bucket records to exceedance statistics.
    Gauge,
    /// Error statistics, REC curve and heavy-rain classification scores.
    Eval,
    /// Rain-rate map, heavy-rain population and zone coverage tables.
    Impact,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Fit => "fit",
            Command::Predict => "predict",
            Command::BuildClim => "build-clim",
            Command::Gauge => "gauge",
            Command::Eval => "eval",
            Command::Impact => "impact",
        }
    }

    fn keys(self) -> &'static [&'static str] {
        match self {
            Command::Fit => &[
                "out_dir",
                "training",
                "climate",
                "mt_grid",
                "p0_grid",
                "jitter",
                "tolerance",
                "max_evaluations",
            ],
            Command::Predict => &[
                "out_dir", "sites", "climate", "mt_grid", "p0_grid", "params", "ladder", "years",
            ],
            Command::BuildClim => &[
                "out_dir",
                "observations",
                "reference",
                "elevation",
                "ncols",
                "nrows",
                "xllcorner",
                "yllcorner",
                "cellsize",
                "nodata",
                "k_uniform",
                "k_gauss",
                "sigma",
                "dedup_window_s",
            ],
            Command::Gauge => &["out_dir", "sites", "exclude", "min_count", "ladder"],
            Command::Eval => &[
                "out_dir",
                "samples",
                "site_countries",
                "stations",
                "mt_grid",
                "threshold",
                "class_p",
                "rec_max_pct",
                "rec_step_pct",
            ],
            Command::Impact => &[
                "out_dir",
                "mt_grid",
                "p0_grid",
                "params",
                "population",
                "countries",
                "zones",
                "p",
                "threshold",
            ],
        }
    }
}

// ---------------------------------------------------------------------------
// Configuration

/// A parsed run configuration. Relative paths resolve against the
/// directory holding the configuration file.
#[derive(Debug, Clone)]
pub struct RunConfig {
    path: PathBuf,
    base: PathBuf,
    digest: String,
    entries: BTreeMap<String, String>,
}

impl RunConfig {
    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("{}:{}: expected key = value", path.display(), i + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            if entries.insert(k.to_string(), v.to_string()).is_some() {
                return Err(Error::Config(format!(
                    "{}:{}: duplicate key `{k}`",
                    path.display(),
                    i + 1
                )));
            }
        }
        Ok(RunConfig {
            path: path.to_path_buf(),
            base: path.parent().map(Path::to_path_buf).unwrap_or_default(),
            digest: sha256_hex(text.as_bytes()),
            entries,
        })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text, path)
    }

    fn check_keys(&self, command: Command) -> Result<()> {
        let allowed = command.keys();
        match self.entries.keys().find(|k| !allowed.contains(&k.as_str())) {
            Some(k) => Err(Error::Config(format!(
                "unknown key `{k}` for `{}` (allowed: {})",
                command.name(),
                allowed.join(", ")
            ))),
            None => Ok(()),
        }
    }

    fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    fn required(&self, key: &str) -> Result<&str> {
        self.get(key)
            .ok_or_else(|| Error::Config(format!("missing required key `{key}`")))
    }

    fn resolve(&self, value: &str) -> PathBuf {
        let p = Path::new(value);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base.join(p)
        }
    }

    fn number<T: std::str::FromStr>(&self, key: &str, default: T) -> Result<T> {
        match self.get(key) {
            None => Ok(default),
            Some(v) => v
                .parse()
                .map_err(|_| Error::Config(format!("`{key}`: cannot parse `{v}`"))),
        }
    }

    fn positive(&self, key: &str, default: f64) -> Result<f64> {
        let v = self.number(key, default)?;
        if v.is_finite() && v > 0.0 {
            Ok(v)
        } else {
            Err(Error::Config(format!("`{key}` must be positive, got {v}")))
        }
    }

    fn ladder(&self) -> Result<Vec<f64>> {
        let Some(text) = self.get("ladder") else {
            return Ok(STANDARD_LADDER.to_vec());
        };
        let mut out = Vec::new();
        for item in text.split(',') {
            let p: f64 = item
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("`ladder`: cannot parse `{}`", item.trim())))?;
            if !(p > 0.0 && p <= 100.0) {
                return Err(Error::Config(format!("`ladder`: {p} outside (0, 100]")));
            }
            out.push(p);
        }
        out.sort_by(f64::total_cmp);
        out.dedup();
        Ok(out)
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .fold(String::with_capacity(64), |mut s, b| {
            let _ = write!(s, "{b:02x}");
            s
        })
}

/// Input files of a run: checked for existence up front, read once, and
/// hashed into the manifest.
struct Inputs<'a> {
    config: &'a RunConfig,
    records: Vec<(String, String, String)>,
}

impl<'a> Inputs<'a> {
    fn new(config: &'a RunConfig) -> Self {
        Inputs {
            config,
            records: Vec::new(),
        }
    }

    /// Fails with a data error if any listed path key names a missing file.
    fn validate(&self, keys: &[&str]) -> Result<()> {
        for key in keys {
            if let Some(v) = self.config.get(key) {
                check_exists(&self.config.resolve(v))?;
            }
        }
        Ok(())
    }

    fn text(&mut self, label: &str, value: &str) -> Result<(String, String)> {
        let path = self.config.resolve(value);
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let text = String::from_utf8(bytes).map_err(|_| Error::Data(format!("{}: not valid UTF-8", path.display())))?;
        self.records
            .push((label.to_string(), value.to_string(), sha256_hex(text.as_bytes())));
        Ok((text, path.display().to_string()))
    }

    fn key_text(&mut self, key: &str) -> Result<(String, String)> {
        let value = self.config.required(key)?.to_string();
        self.text(key, &value)
    }

    fn grid(&mut self, key: &str) -> Result<Grid> {
        let (text, source) = self.key_text(key)?;
        raster::parse_grid(&text, &source)
    }

    fn params(&mut self) -> Result<ModelParams> {
        let (text, source) = self.key_text("params")?;
        ModelParams::parse(&text, &source)
    }
}

fn check_exists(path: &Path) -> Result<()> {
    fs::metadata(path).map(|_| ()).map_err(|e| Error::io(path, e))
}

// ---------------------------------------------------------------------------
// Running

/// Everything a successful run writes, in memory.
#[derive(Debug, Clone, PartialEq)]
pub struct RunOutput {
    pub out_dir: PathBuf,
    /// File name and contents, in write order; the manifest comes last.
    pub files: Vec<(String, String)>,
}

impl RunOutput {
    pub fn file(&self, name: &str) -> Option<&str> {
        self.files.iter().find(|(n, _)| n == name).map(|(_, c)| c.as_str())
    }

    pub fn write(&self) -> Result<()> {
        fs::create_dir_all(&self.out_dir).map_err(|e| Error::io(&self.out_dir, e))?;
        for (name, contents) in &self.files {
            let path = self.out_dir.join(name);
            fs::write(&path, contents).map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }
}

/// Runs a subcommand and returns its outputs without writing anything.
pub fn execute(command: Command, config: &RunConfig, seed: u64) -> Result<RunOutput> {
    config.check_keys(command)?;
    let out_dir = config.resolve(config.required("out_dir")?);
    let mut inputs = Inputs::new(config);
    let mut files = match command {
        Command::Fit => cmd_fit(config, &mut inputs, seed)?,
        Command::Predict => cmd_predict(config, &mut inputs)?,
        Command::BuildClim => cmd_build_clim(config, &mut inputs)?,
        Command::Gauge => cmd_gauge(config, &mut inputs)?,
        Command::Eval => cmd_eval(config, &mut inputs)?,
        Command::Impact => cmd_impact(config, &mut inputs)?,
    };
    files.push(("manifest.txt".into(), manifest(command, config, seed, &inputs, &files)));
    Ok(RunOutput { out_dir, files })
}

fn manifest(command: Command, config: &RunConfig, seed: u64, inputs: &Inputs, files: &[(String, String)]) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "version={}", env!("CARGO_PKG_VERSION"));
    let _ = writeln!(s, "subcommand={}", command.name());
    let _ = writeln!(s, "seed={seed}");
    let _ = writeln!(s, "config={}", config.path.display());
    let _ = writeln!(s, "config_sha256={}", config.digest);
    for (label, value, digest) in &inputs.records {
        let _ = writeln!(s, "input.{label}={value}");
        let _ = writeln!(s, "input.{label}.sha256={digest}");
    }
    for (name, contents) in files {
        let _ = writeln!(s, "output.{name}.sha256={}", sha256_hex(contents.as_bytes()));
    }
    s
}

/// Parses arguments, runs the command on a pool of the requested size and
/// writes the outputs. Returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("rainstat {}: {e}", cli.command.name());
            e.exit_code()
        }
    }
}

pub fn run(cli: &Cli) -> Result<()> {
    let path = cli
        .config
        .as_deref()
        .ok_or_else(|| Error::Config("--config PATH is required".into()))?;
    let config = RunConfig::read(path)?;
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = cli.threads {
        builder = builder.num_threads(n.into());
    }
    let pool = builder
        .build()
        .map_err(|e| Error::Argument(format!("cannot start worker pool: {e}")))?;
    let output = pool.install(|| execute(cli.command, &config, cli.seed))?;
    output.write()
}

// ---------------------------------------------------------------------------
// Shared tables

#[derive(Deserialize)]
struct ClimateRow {
    site_id: String,
    mt_mm: f64,
    p0_percent: f64,
}

#[derive(Deserialize)]
struct SiteRow {
    site_id: String,
    lat: f64,
    lon: f64,
    country: String,
}

fn read_rows<R: for<'de> Deserialize<'de>>(text: &str, source: &str) -> Result<Vec<R>> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    rdr.deserialize()
        .enumerate()
        .map(|(i, r)| r.map_err(|e| Error::parse(source, i + 2, e.to_string())))
        .collect()
}

/// Climate at each site, from a `site_id,mt_mm,p0_percent` table or by
/// bilinear sampling of M_t and P_0 grids.
enum ClimateSource {
    Table(BTreeMap<String, ClimatePoint>),
    Grids(Grid, Grid),
}

impl ClimateSource {
    fn keys(config: &RunConfig) -> Result<&'static [&'static str]> {
        match (config.get("climate"), config.get("mt_grid"), config.get("p0_grid")) {
            (Some(_), None, None) => Ok(&["climate"]),
            (None, Some(_), Some(_)) => Ok(&["mt_grid", "p0_grid"]),
            _ => Err(Error::Config(
                "give either `climate` or both `mt_grid` and `p0_grid`".into(),
            )),
        }
    }

    fn load(config: &RunConfig, inputs: &mut Inputs) -> Result<Self> {
        if config.get("climate").is_some() {
            let (text, source) = inputs.key_text("climate")?;
            let mut map = BTreeMap::new();
            for (i, row) in read_rows::<ClimateRow>(&text, &source)?.into_iter().enumerate() {
                let c = ClimatePoint::new(row.mt_mm, row.p0_percent)
                    .map_err(|e| Error::parse(&source, i + 2, e.to_string()))?;
                if map.insert(row.site_id.clone(), c).is_some() {
                    return Err(Error::parse(
                        &source,
                        i + 2,
                        format!("duplicate site `{}`", row.site_id),
                    ));
                }
            }
            Ok(ClimateSource::Table(map))
        } else {
            let mt = inputs.grid("mt_grid")?;
            let p0 = inputs.grid("p0_grid")?;
            mt.geometry().ensure_aligned(p0.geometry())?;
            Ok(ClimateSource::Grids(mt, p0))
        }
    }

    fn at(&self, site_id: &str, lat: f64, lon: f64) -> Result<ClimatePoint> {
        match self {
            ClimateSource::Table(map) => map
                .get(site_id)
                .copied()
                .ok_or_else(|| Error::Data(format!("no climate row for site `{site_id}`"))),
            ClimateSource::Grids(mt, p0) => {
                let m = raster::sample_bilinear(mt, lat, lon)?;
                let p = raster::sample_bilinear(p0, lat, lon)?;
                if mt.is_nodata(m) || p0.is_nodata(p) {
                    return Err(Error::Data(format!("site `{site_id}` falls on nodata climate")));
                }
                ClimatePoint::new(m, p).map_err(|e| Error::Data(format!("site `{site_id}`: {e}")))
            }
        }
    }
}

fn data_error(e: Error) -> Error {
    match e {
        Error::Argument(m) | Error::Range(m) => Error::Data(m),
        other => other,
    }
}

// ---------------------------------------------------------------------------
// Subcommands

type Files = Vec<(String, String)>;

fn cmd_fit(config: &RunConfig, inputs: &mut Inputs, seed: u64) -> Result<Files> {
    let mut keys = vec!["training"];
    keys.extend_from_slice(ClimateSource::keys(config)?);
    let defaults = FitOptions::default();
    let opts = FitOptions {
        seed,
        jitter: config.number("jitter", defaults.jitter)?,
        tolerance: config.positive("tolerance", defaults.tolerance)?,
        max_evaluations: config.number("max_evaluations", defaults.max_evaluations)?,
    };
    if !(opts.jitter.is_finite() && opts.jitter >= 0.0) {
        return Err(Error::Config("`jitter` must be a non-negative number".into()));
    }
    inputs.validate(&keys)?;

    let (text, source) = inputs.key_text("training")?;
    let sites = rainmodel::parse_site_statistics(&text, &source)?;
    let climate = ClimateSource::load(config, inputs)?;
    let training = sites
        .into_iter()
        .map(|s| {
            let c = climate.at(&s.site_id, s.lat, s.lon)?;
            Ok((s, c))
        })
        .collect::<Result<Vec<_>>>()?;

    let fit = rainmodel::fit_params(&training, &opts)
        .map_err(data_error)
        .stage("fit")?;
    let residuals = rainmodel::fit_residuals(&training, &fit.params).stage("residuals")?;

    let mut csv = String::from("site_id,p_percent,observed,predicted,relative_error_pct\n");
    for (site, pt, predicted) in &residuals {
        let _ = writeln!(
            csv,
            "{site},{},{},{predicted},{:.6}",
            pt.p,
            pt.rate,
            100.0 * (predicted - pt.rate) / pt.rate
        );
    }
    let mut report = String::new();
    let _ = writeln!(report, "sites={}", training.len());
    let _ = writeln!(report, "samples={}", fit.samples);
    let _ = writeln!(report, "objective={:.6e}", fit.objective);
    let _ = writeln!(report, "rms_relative_error_pct={:.4}", 100.0 * fit.objective.sqrt());
    let _ = writeln!(report, "starts={}", fit.starts);
    let _ = writeln!(report, "converged_starts={}", fit.converged_starts);
    let _ = writeln!(report, "x={}", fit.params.x);
    let _ = writeln!(report, "y={}", fit.params.y);
    let _ = writeln!(report, "z={}", fit.params.z);
    Ok(vec![
        ("params.txt".into(), fit.params.to_config_string()),
        ("residuals.csv".into(), csv),
        ("fit_report.txt".into(), report),
    ])
}

fn cmd_predict(config: &RunConfig, inputs: &mut Inputs) -> Result<Files> {
    let mut keys = vec!["sites", "params"];
    keys.extend_from_slice(ClimateSource::keys(config)?);
    let ladder = config.ladder()?;
    let years = config.positive("years", 1.0)?;
    inputs.validate(&keys)?;

    let (text, source) = inputs.key_text("sites")?;
    let rows: Vec<SiteRow> = read_rows(&text, &source)?;
    let params = inputs.params()?;
    let climate = ClimateSource::load(config, inputs)?;
    let mut out = Vec::with_capacity(rows.len());
    for row in rows {
        let c = climate.at(&row.site_id, row.lat, row.lon)?;
        let points = rainmodel::estimate_site_curve(&c, &params, &ladder).stage("predict")?;
        out.push(SiteStatistics {
            site_id: row.site_id,
            lat: row.lat,
            lon: row.lon,
            country: row.country,
            years,
            points,
        });
    }
    Ok(vec![("sites.csv".into(), rainmodel::site_statistics_to_csv(&out))])
}

fn cmd_build_clim(config: &RunConfig, inputs: &mut Inputs) -> Result<Files> {
    let geometry = GridGeometry::new(
        config.number("ncols", 0usize)?,
        config.number("nrows", 0usize)?,
        config.number("xllcorner", f64::NAN)?,
        config.number("yllcorner", f64::NAN)?,
        config.number("cellsize", f64::NAN)?,
        config.number("nodata", -9999.0)?,
    )
    .map_err(|e| Error::Config(format!("output geometry: {e}")))?;
    let defaults = ClimatologyParams::default();
    let sigma = match config.get("sigma") {
        None => None,
        Some(_) => Some(config.positive("sigma", 1.0)?),
    };
    let params = ClimatologyParams {
        k_uniform: config.number("k_uniform", defaults.k_uniform)?,
        k_gauss: config.number("k_gauss", defaults.k_gauss)?,
        sigma,
        dedup_window_s: config.number("dedup_window_s", defaults.dedup_window_s)?,
    };
    if params.k_uniform.is_multiple_of(2) || params.k_gauss.is_multiple_of(2) {
        return Err(Error::Config("window sizes must be odd".into()));
    }
    if !(params.dedup_window_s.is_finite() && params.dedup_window_s >= 0.0) {
        return Err(Error::Config("`dedup_window_s` must be non-negative".into()));
    }
    for key in ["observations", "reference", "elevation"] {
        config.required(key)?;
    }
    inputs.validate(&["observations", "reference", "elevation"])?;

    let (text, source) = inputs.key_text("observations")?;
    let observations = climatology::parse_observations(&text, &source)?;
    let reference = inputs.grid("reference")?;
    let elevation = inputs.grid("elevation")?;
    let clim = climatology::run_pipeline(&observations, &geometry, &reference, &elevation, &params)?;
    Ok(vec![
        ("mt.grd".into(), raster::grid_to_string(&clim.mt)),
        ("p0.grd".into(), raster::grid_to_string(&clim.p0)),
        ("clim_report.txt".into(), clim.report.to_text()),
    ])
}

#[derive(Deserialize)]
struct GaugeSiteRow {
    site_id: String,
    lat: f64,
    lon: f64,
    country: String,
    tips: String,
    start: String,
    end: String,
}

fn cmd_gauge(config: &RunConfig, inputs: &mut Inputs) -> Result<Files> {
    let ladder = config.ladder()?;
    let min_count: usize = config.number("min_count", DEFAULT_MIN_COUNT)?;
    if min_count == 0 {
        return Err(Error::Config("`min_count` must be at least 1".into()));
    }
    let exclude: BTreeSet<String> = config
        .get("exclude")
        .map(|v| {
            v.split(',')
                .map(|s| s.trim().to_string())
                .filter(|s| !s.is_empty())
                .collect()
        })
        .unwrap_or_default();
    config.required("sites")?;
    inputs.validate(&["sites"])?;

    let (text, source) = inputs.key_text("sites")?;
    let rows: Vec<GaugeSiteRow> = read_rows(&text, &source)?;
    let mut seen = BTreeSet::new();
    let mut windows = Vec::with_capacity(rows.len());
    for (i, row) in rows.iter().enumerate() {
        if !seen.insert(row.site_id.as_str()) {
            return Err(Error::parse(
                &source,
                i + 2,
                format!("duplicate site `{}`", row.site_id),
            ));
        }
        let parse =
            |s: &str| gauge::parse_time(s).ok_or_else(|| Error::parse(&source, i + 2, format!("bad timestamp `{s}`")));
        let (start, end) = (parse(&row.start)?, parse(&row.end)?);
        if start % 60.0 != 0.0 || end % 60.0 != 0.0 || end <= start {
            return Err(Error::parse(
                &source,
                i + 2,
                "record window must be whole minutes with end > start",
            ));
        }
        windows.push(((start / 60.0) as i64, ((end - start) / 60.0) as usize));
        if !exclude.contains(&row.site_id) {
            check_exists(&config.resolve(&row.tips))?;
        }
    }

    let mut sites = Vec::new();
    let mut report = String::new();
    let _ = writeln!(report, "min_count={min_count}");
    for (row, &(start_minute, minutes)) in rows.iter().zip(&windows) {
        let id = &row.site_id;
        if exclude.contains(id) {
            let _ = writeln!(report, "site.{id}.status=excluded");
            continue;
        }
        let (text, source) = inputs.text(&format!("tips.{id}"), &row.tips)?;
        let tips = gauge::parse_tips(&text, &source)?;
        let (t0, t1) = (
            start_minute as f64 * 60.0,
            (start_minute + minutes as i64) as f64 * 60.0,
        );
        let inside: Vec<_> = tips.iter().copied().filter(|t| t.time >= t0 && t.time <= t1).collect();
        let series = gauge::tips_to_rates(&inside, start_minute, minutes)
            .map_err(|e| Error::Data(format!("site `{id}`: {e}")))?;
        let series = gauge::qc_filter(&series);
        let _ = writeln!(report, "site.{id}.tips={}", inside.len());
        let _ = writeln!(report, "site.{id}.tips_outside_window={}", tips.len() - inside.len());
        let _ = writeln!(report, "site.{id}.minutes={}", series.len());
        let _ = writeln!(
            report,
            "site.{id}.qc_invalid_minutes={}",
            series.len() - series.valid_count()
        );
        let Some(selected) = gauge::select_periods(&series) else {
            let _ = writeln!(report, "site.{id}.status=no_qualifying_period");
            continue;
        };
        let points = gauge::exceedance_stats(&selected, &ladder, min_count);
        let years = (selected.len() as f64 / MINUTES_PER_YEAR).round();
        let _ = writeln!(report, "site.{id}.selected_years={years}");
        let _ = writeln!(report, "site.{id}.rungs={}", points.len());
        if points.is_empty() {
            let _ = writeln!(report, "site.{id}.status=no_rungs");
            continue;
        }
        let _ = writeln!(report, "site.{id}.status=ok");
        sites.push(SiteStatistics {
            site_id: id.clone(),
            lat: row.lat,
            lon: row.lon,
            country: row.country.clone(),
            years,
            points,
        });
    }
    Ok(vec![
        ("sites.csv".into(), rainmodel::site_statistics_to_csv(&sites)),
        ("gauge_report.txt".into(), report),
    ])
}

#[derive(Deserialize)]
struct CountryRow {
    site_id: String,
    country: String,
}

#[derive(Deserialize)]
struct StationRow {
    #[allow(dead_code)]
    station_id: String,
    lat: f64,
    lon: f64,
    mt_mm: f64,
}

fn write_summary(s: &mut String, prefix: &str, summary: &evaluation::P311Summary) {
    let _ = writeln!(s, "{prefix}n={}", summary.n);
    let _ = writeln!(s, "{prefix}mean_pct={:.4}", 100.0 * summary.mean);
    let _ = writeln!(s, "{prefix}sd_pct={:.4}", 100.0 * summary.sd);
    let _ = writeln!(s, "{prefix}rms_pct={:.4}", 100.0 * summary.rms);
}

fn write_matrix(s: &mut String, prefix: &str, m: &ConfusionMatrix) {
    let _ = writeln!(s, "{prefix}n={}", m.total());
    let _ = writeln!(s, "{prefix}tn={}", m.tn);
    let _ = writeln!(s, "{prefix}fp={}", m.fp);
    let _ = writeln!(s, "{prefix}fn={}", m.fn_);
    let _ = writeln!(s, "{prefix}tp={}", m.tp);
    let _ = writeln!(s, "{prefix}accuracy={:.4}", m.accuracy());
    let _ = writeln!(s, "{prefix}mcc={:.4}", m.mcc());
}

fn cmd_eval(config: &RunConfig, inputs: &mut Inputs) -> Result<Files> {
    let threshold: f64 = config.number("threshold", evaluation::HEAVY_THRESHOLD_MM_H)?;
    let class_p = config.positive("class_p", evaluation::CLASSIFICATION_P)?;
    let rec_max = config.positive("rec_max_pct", 100.0)?;
    let rec_step = config.positive("rec_step_pct", 1.0)?;
    if config.get("stations").is_some() != config.get("mt_grid").is_some() {
        return Err(Error::Config("`stations` and `mt_grid` go together".into()));
    }
    config.required("samples")?;
    inputs.validate(&["samples", "site_countries", "stations", "mt_grid"])?;

    let (text, source) = inputs.key_text("samples")?;
    let samples = evaluation::parse_error_samples(&text, &source)?;
    if samples.is_empty() {
        return Err(Error::EmptyData(format!("{source}: no samples")));
    }
    let errors = samples
        .iter()
        .map(ErrorSample::relative_error)
        .collect::<Result<Vec<f64>>>()
        .map_err(data_error)?;

    let mut report = String::new();
    write_summary(&mut report, "", &evaluation::p311_summary(&errors)?);
    let _ = writeln!(
        report,
        "mean_bias_mm_h={:.4}",
        samples.iter().map(ErrorSample::bias_error).sum::<f64>() / samples.len() as f64
    );

    let mut by_p: BTreeMap<u64, (f64, Vec<f64>)> = BTreeMap::new();
    for (s, &e) in samples.iter().zip(&errors) {
        by_p.entry(s.p.to_bits()).or_insert((s.p, Vec::new())).1.push(e);
    }
    let mut by_p: Vec<_> = by_p.into_values().collect();
    by_p.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut per_p = String::from("p_percent,n,mean_pct,sd_pct,rms_pct\n");
    for (p, errs) in &by_p {
        let s = evaluation::p311_summary(errs)?;
        let _ = writeln!(
            per_p,
            "{p},{},{:.4},{:.4},{:.4}",
            s.n,
            100.0 * s.mean,
            100.0 * s.sd,
            100.0 * s.rms
        );
    }

    let steps = (rec_max / rec_step + 1e-9).floor() as usize;
    let thresholds: Vec<f64> = (0..=steps).map(|i| i as f64 * rec_step).collect();
    let pct: Vec<f64> = errors.iter().map(|e| 100.0 * e).collect();
    let fractions = evaluation::rec_curve(&pct, &thresholds)?;
    let mut rec = String::from("threshold_pct,fraction\n");
    for (t, f) in thresholds.iter().zip(&fractions) {
        let _ = writeln!(rec, "{t},{f:.6}");
    }

    // heavy-rain classification on the class_p samples, one per site
    let mut labels: BTreeMap<&str, (bool, bool)> = BTreeMap::new();
    for s in samples.iter().filter(|s| s.p == class_p) {
        let label = (s.observed > threshold, s.predicted > threshold);
        if labels.insert(&s.site_id, label).is_some() {
            return Err(Error::Data(format!(
                "site `{}` has more than one p={class_p} sample",
                s.site_id
            )));
        }
    }
    let _ = writeln!(report, "class_p_percent={class_p}");
    let _ = writeln!(report, "class_threshold_mm_h={threshold:.4}");
    if !labels.is_empty() {
        let actual: Vec<bool> = labels.values().map(|l| l.0).collect();
        let predicted: Vec<bool> = labels.values().map(|l| l.1).collect();
        write_matrix(&mut report, "by_site.", &evaluation::confusion(&actual, &predicted)?);
    }
    if config.get("site_countries").is_some() {
        let (text, source) = inputs.key_text("site_countries")?;
        let countries: BTreeMap<String, String> = read_rows::<CountryRow>(&text, &source)?
            .into_iter()
            .map(|r| (r.site_id, r.country))
            .collect();
        let mut records = Vec::with_capacity(labels.len());
        for (site, &(a, p)) in &labels {
            let c = countries
                .get(*site)
                .ok_or_else(|| Error::Data(format!("no country for site `{site}`")))?;
            records.push((c.as_str(), a, p));
        }
        let grouped = evaluation::by_country(&records);
        if !grouped.is_empty() {
            let actual: Vec<bool> = grouped.iter().map(|g| g.1).collect();
            let predicted: Vec<bool> = grouped.iter().map(|g| g.2).collect();
            write_matrix(&mut report, "by_country.", &evaluation::confusion(&actual, &predicted)?);
        }
    }
    if config.get("stations").is_some() {
        let (text, source) = inputs.key_text("stations")?;
        let stations: Vec<(f64, f64, f64)> = read_rows::<StationRow>(&text, &source)?
            .into_iter()
            .map(|r| (r.lat, r.lon, r.mt_mm))
            .collect();
        let grid = inputs.grid("mt_grid")?;
        let cmp = evaluation::station_comparison(&grid, &stations).map_err(data_error)?;
        let _ = writeln!(report, "station.skipped={}", cmp.skipped);
        write_summary(&mut report, "station.", &cmp.summary);
    }
    Ok(vec![
        ("metrics.txt".into(), report),
        ("p311_by_p.csv".into(), per_p),
        ("rec.csv".into(), rec),
    ])
}

fn cmd_impact(config: &RunConfig, inputs: &mut Inputs) -> Result<Files> {
    let p = config.positive("p", evaluation::CLASSIFICATION_P)?;
    if p > 100.0 {
        return Err(Error::Config("`p` must be at most 100".into()));
    }
    let threshold: f64 = config.number("threshold", evaluation::HEAVY_THRESHOLD_MM_H)?;
    let keys = ["mt_grid", "p0_grid", "params", "population", "countries"];
    for key in keys {
        config.required(key)?;
    }
    inputs.validate(&keys)?;
    inputs.validate(&["zones"])?;

    let mt = inputs.grid("mt_grid")?;
    let p0 = inputs.grid("p0_grid")?;
    let params = inputs.params()?;
    let pop = inputs.grid("population")?;
    let countries = inputs.grid("countries")?;
    let zones = match config.get("zones") {
        Some(_) => Some(inputs.grid("zones")?),
        None => None,
    };

    let rate = impact::rate_map(&mt, &p0, &params, p).stage("rate-map")?;
    let mask = impact::heavy_mask(&rate, threshold);
    let table = impact::zonal_population(&pop, &mask, &countries).stage("population")?;
    let mut report = String::new();
    let _ = writeln!(report, "p_percent={p}");
    let _ = writeln!(report, "threshold_mm_h={threshold:.4}");
    let _ = writeln!(report, "pixels={}", mask.mask.len());
    let _ = writeln!(report, "nodata_pixels={}", mask.nodata);
    let _ = writeln!(report, "heavy_pixels={}", mask.count());
    let _ = writeln!(report, "total_pop={:.4}", table.grand.total);
    let _ = writeln!(report, "heavy_pop={:.4}", table.grand.heavy);

    let mut files = vec![
        ("rate.grd".to_string(), raster::grid_to_string(&rate)),
        ("impact.csv".to_string(), table.to_csv()),
    ];
    if let Some(zones) = zones {
        let rows = impact::zone_coverage(&zones, &pop).stage("zones")?;
        files.push(("zones.csv".into(), impact::zone_coverage_to_csv(&rows)));
    }
    files.push(("impact_report.txt".into(), report));
    Ok(files)
}
