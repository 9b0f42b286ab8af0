#![allow(dead_code)]

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Output;

use rainstat::evaluation::{error_samples_to_csv, ErrorSample};
use rainstat::gauge::tips_to_csv;
use rainstat::rainmodel::{self, ClimatePoint, ModelParams, SiteStatistics};
use rainstat::raster::{grid_to_string, Grid, GridGeometry};
use rainstat::{climatology, synth};

pub const GEN: (f64, f64, f64) = (1.09, 21797.0, 26.02);

pub fn gen_params() -> ModelParams {
    ModelParams::new(GEN.0, GEN.1, GEN.2).unwrap()
}

pub fn rainstat(args: &[&str]) -> Output {
    std::process::Command::new(env!("CARGO_BIN_EXE_rainstat"))
        .args(args)
        .output()
        .expect("spawn rainstat")
}

pub fn put(dir: &Path, name: &str, contents: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, contents).unwrap();
    p
}

pub fn grid(ncols: usize, nrows: usize, xll: f64, yll: f64, cell: f64, values: Vec<f64>) -> Grid {
    Grid::new(
        GridGeometry::new(ncols, nrows, xll, yll, cell, -9999.0).unwrap(),
        values,
    )
    .unwrap()
}

/// All files below `dir`, by relative path.
pub fn snapshot(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    if let Ok(entries) = fs::read_dir(dir) {
        for e in entries {
            let e = e.unwrap();
            let name = e.file_name().to_string_lossy().into_owned();
            out.insert(name, fs::read(e.path()).unwrap());
        }
    }
    out
}

pub fn report_value(text: &str, key: &str) -> Option<f64> {
    text.lines()
        .find_map(|l| l.strip_prefix(key).and_then(|r| r.strip_prefix('=')))
        .and_then(|v| v.parse().ok())
}

fn training_fixture(dir: &Path) {
    let climates = synth::random_climates(8, (300.0, 3000.0), (1.0, 8.0), 11);
    let training = synth::training_set(&gen_params(), &climates, &rainmodel::STANDARD_LADDER, 0.05, 12).unwrap();
    let sites: Vec<SiteStatistics> = training.iter().map(|(s, _)| s.clone()).collect();
    put(dir, "training.csv", &rainmodel::site_statistics_to_csv(&sites));
    let mut csv = String::from("site_id,mt_mm,p0_percent\n");
    for (s, c) in &training {
        let _ = writeln!(csv, "{},{},{}", s.site_id, c.mt, c.p0);
    }
    put(dir, "climate.csv", &csv);
}

fn climate_grids(dir: &Path) {
    let n = 10;
    let mut mt = Vec::new();
    let mut p0 = Vec::new();
    for r in 0..n {
        for c in 0..n {
            mt.push(500.0 + 150.0 * c as f64 + 40.0 * r as f64);
            p0.push(1.0 + 0.5 * r as f64 + 0.2 * c as f64);
        }
    }
    put(dir, "mt.grd", &grid_to_string(&grid(n, n, 0.0, 0.0, 1.0, mt)));
    put(dir, "p0.grd", &grid_to_string(&grid(n, n, 0.0, 0.0, 1.0, p0)));
}

fn clim_fixture(dir: &Path) {
    let g = GridGeometry::new(40, 40, 10.0, 45.0, 0.01, -9999.0).unwrap();
    let obs = synth::scattered_observations(&g, 3000, 0.3, 5.0, 30.0, 21);
    put(dir, "observations.csv", &climatology::observations_to_csv(&obs));
    let reference: Vec<f64> = (0..400).map(|i| 900.0 + (i % 20) as f64 * 10.0).collect();
    put(
        dir,
        "reference.grd",
        &grid_to_string(&grid(20, 20, 10.0, 45.0, 0.02, reference)),
    );
    let elevation: Vec<f64> = (0..1600).map(|i| ((i * 37) % 101) as f64 * 3.0).collect();
    put(
        dir,
        "elevation.grd",
        &grid_to_string(&grid(40, 40, 10.0, 45.0, 0.01, elevation)),
    );
}

fn gauge_fixture(dir: &Path) {
    let start = 978_307_200 / 60; // 2001-01-01T00:00:00Z
    let minutes = 365 * 1440;
    let mut sites = String::from("site_id,lat,lon,country,tips,start,end\n");
    for (i, (mt, p0)) in [(1500.0, 4.0), (900.0, 2.5)].into_iter().enumerate() {
        let c = ClimatePoint::new(mt, p0).unwrap();
        let series = synth::minute_series_from_curve(&c, &gen_params(), start, minutes, 12, 30 + i as u64).unwrap();
        let tips = synth::tips_from_rates(&series, 0.254);
        put(dir, &format!("tips{i}.csv"), &tips_to_csv(&tips));
        let _ = writeln!(
            sites,
            "G{i},{},{},C{i},tips{i}.csv,2001-01-01T00:00:00Z,2002-01-01T00:00:00Z",
            10.0 + i as f64,
            20.0
        );
    }
    sites.push_str("G9,0,0,C9,missing_tips.csv,2001-01-01T00:00:00Z,2002-01-01T00:00:00Z\n");
    put(dir, "gauge_sites.csv", &sites);
}

fn eval_fixture(dir: &Path) {
    let mut r = synth::rng(41);
    use rand::Rng;
    let climates = synth::random_climates(12, (400.0, 4000.0), (1.0, 9.0), 42);
    let mut samples = Vec::new();
    let mut countries = String::from("site_id,country\n");
    for (i, c) in climates.iter().enumerate() {
        for p in [0.01, 0.1, 1.0] {
            let observed = rainmodel::rain_rate(p, c, &gen_params()).unwrap();
            let predicted = observed * (1.0 + r.gen_range(-0.4..0.4));
            samples.push(ErrorSample {
                site_id: format!("E{i:02}"),
                p,
                observed,
                predicted,
            });
        }
        let _ = writeln!(countries, "E{i:02},K{}", i % 4);
    }
    put(dir, "samples.csv", &error_samples_to_csv(&samples));
    put(dir, "site_countries.csv", &countries);
    put(
        dir,
        "stations.csv",
        "station_id,lat,lon,mt_mm\nA,2.5,2.5,900\nB,5.5,7.5,1800\nC,8.1,1.2,1000\n",
    );
}

fn impact_fixture(dir: &Path) {
    // R_0.01 is about 43 mm/h on the dry pixels and about 116 mm/h on the
    // wet ones
    let w = (4000.0, 9.0);
    let d = (200.0, 0.5);
    let cells = [d, d, w, w, d, d, w, w, d, d, d, w, d, d, d, d];
    let mt: Vec<f64> = cells.iter().map(|c| c.0).collect();
    let p0: Vec<f64> = cells.iter().map(|c| c.1).collect();
    put(dir, "imp_mt.grd", &grid_to_string(&grid(4, 4, 0.0, 0.0, 1.0, mt)));
    put(dir, "imp_p0.grd", &grid_to_string(&grid(4, 4, 0.0, 0.0, 1.0, p0)));
    let pop = vec![
        10.0, 20.0, 30.0, 40.0, //
        0.0, 5.0, 5.0, -9999.0, //
        1.0, 2.0, 3.0, 4.0, //
        100.0, 0.0, 0.0, 7.0,
    ];
    put(dir, "pop.grd", &grid_to_string(&grid(4, 4, 0.0, 0.0, 1.0, pop)));
    let countries = vec![
        1.0, 1.0, 2.0, 2.0, //
        1.0, 1.0, 2.0, 2.0, //
        3.0, 3.0, 3.0, 2.0, //
        -9999.0, 3.0, 3.0, 3.0,
    ];
    put(
        dir,
        "countries.grd",
        &grid_to_string(&grid(4, 4, 0.0, 0.0, 1.0, countries)),
    );
    let zones = vec![
        1.0, 1.0, 12.0, 12.0, //
        1.0, 1.0, 12.0, 12.0, //
        5.0, 5.0, 5.0, 12.0, //
        -9999.0, 5.0, 5.0, 5.0,
    ];
    put(dir, "zones.grd", &grid_to_string(&grid(4, 4, 0.0, 0.0, 1.0, zones)));
}

/// Writes inputs and one configuration per subcommand into `dir`. Returns
/// (subcommand, config path, output directory).
pub fn all_fixtures(dir: &Path) -> Vec<(&'static str, PathBuf, PathBuf)> {
    training_fixture(dir);
    climate_grids(dir);
    clim_fixture(dir);
    gauge_fixture(dir);
    eval_fixture(dir);
    impact_fixture(dir);
    put(dir, "params.txt", &gen_params().to_config_string());
    put(
        dir,
        "sites.csv",
        "site_id,lat,lon,country\nP1,2.2,3.7,AA\nP2,7.9,8.1,BB\nP3,5.0,5.0,AA\n",
    );

    let configs = [
        (
            "fit",
            "out_dir = out_fit\ntraining = training.csv\nclimate = climate.csv\n",
        ),
        (
            "predict",
            "out_dir = out_predict\nsites = sites.csv\nmt_grid = mt.grd\np0_grid = p0.grd\nparams = params.txt\n",
        ),
        (
            "build-clim",
            "out_dir = out_clim\nobservations = observations.csv\nreference = reference.grd\n\
             elevation = elevation.grd\nncols = 40\nnrows = 40\nxllcorner = 10\nyllcorner = 45\n\
             cellsize = 0.01\n",
        ),
        ("gauge", "out_dir = out_gauge\nsites = gauge_sites.csv\nexclude = G9\n"),
        (
            "eval",
            "out_dir = out_eval\nsamples = samples.csv\nsite_countries = site_countries.csv\n\
             stations = stations.csv\nmt_grid = mt.grd\n",
        ),
        (
            "impact",
            "out_dir = out_impact\nmt_grid = imp_mt.grd\np0_grid = imp_p0.grd\nparams = params.txt\n\
             population = pop.grd\ncountries = countries.grd\nzones = zones.grd\n",
        ),
    ];
    configs
        .iter()
        .map(|(cmd, text)| {
            let cfg = put(dir, &format!("{cmd}.cfg"), text);
            let out = dir.join(format!("out_{}", if *cmd == "build-clim" { "clim" } else { cmd }));
            (*cmd, cfg, out)
        })
        .collect()
}
