mod common;

use std::fs;
use std::path::Path;

use rainstat::rainmodel::{self, ClimatePoint, STANDARD_LADDER};
use rainstat::raster;
use sha2::{Digest, Sha256};

use common::{all_fixtures, gen_params, put, rainstat, report_value, snapshot};

fn hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn run_ok(cfg: &Path, cmd: &str) {
    let out = rainstat(&["--config", cfg.to_str().unwrap(), cmd]);
    assert_eq!(
        out.status.code(),
        Some(0),
        "{cmd}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

#[test]
fn every_subcommand_writes_a_consistent_manifest() {
    let dir = tempfile::tempdir().unwrap();
    for (cmd, cfg, out_dir) in all_fixtures(dir.path()) {
        run_ok(&cfg, cmd);
        let files = snapshot(&out_dir);
        let manifest = String::from_utf8(files["manifest.txt"].clone()).unwrap();
        assert!(manifest.contains(&format!("subcommand={cmd}\n")), "{manifest}");
        assert!(manifest.contains("seed=0\n"));
        assert!(manifest.contains(&format!("config_sha256={}\n", hex(&fs::read(&cfg).unwrap()))));
        let mut outputs = 0;
        for (name, bytes) in &files {
            if name == "manifest.txt" {
                continue;
            }
            assert!(
                manifest.contains(&format!("output.{name}.sha256={}\n", hex(bytes))),
                "{cmd}: {name}"
            );
            outputs += 1;
        }
        assert_eq!(manifest.matches("output.").count(), outputs);
        // input paths are recorded as written, relative to the config file
        for line in manifest
            .lines()
            .filter(|l| l.starts_with("input.") && !l.contains(".sha256="))
        {
            let (key, path) = line.split_once('=').unwrap();
            let digest = format!(
                "{key}.sha256={}",
                hex(&fs::read(cfg.parent().unwrap().join(path)).unwrap())
            );
            assert!(manifest.contains(&digest), "{cmd}: {key}");
        }
    }
}

#[test]
fn fit_on_noiseless_sites_recovers_zero_objective() {
    let dir = tempfile::tempdir().unwrap();
    let climates = rainstat::synth::random_climates(6, (300.0, 3000.0), (1.0, 8.0), 2);
    let training = rainstat::synth::training_set(&gen_params(), &climates, &STANDARD_LADDER, 0.0, 3).unwrap();
    let sites: Vec<_> = training.iter().map(|(s, _)| s.clone()).collect();
    put(dir.path(), "training.csv", &rainmodel::site_statistics_to_csv(&sites));
    let mut climate = String::from("site_id,mt_mm,p0_percent\n");
    for (s, c) in &training {
        climate.push_str(&format!("{},{},{}\n", s.site_id, c.mt, c.p0));
    }
    put(dir.path(), "climate.csv", &climate);
    let cfg = put(
        dir.path(),
        "fit.cfg",
        "out_dir = out\ntraining = training.csv\nclimate = climate.csv\n",
    );
    run_ok(&cfg, "fit");

    let report = fs::read_to_string(dir.path().join("out/fit_report.txt")).unwrap();
    assert!(report_value(&report, "objective").unwrap() < 1e-6, "{report}");
    let rungs: usize = sites
        .iter()
        .map(|s| s.points.iter().filter(|p| p.rate > 0.0).count())
        .sum();
    let residuals = fs::read_to_string(dir.path().join("out/residuals.csv")).unwrap();
    assert_eq!(residuals.lines().count(), rungs + 1);
    assert!(residuals.starts_with("site_id,p_percent,observed,predicted,relative_error_pct\n"));
    let text = fs::read_to_string(dir.path().join("out/params.txt")).unwrap();
    let params = rainmodel::ModelParams::parse(&text, "params.txt").unwrap();
    assert!((params.x - 1.09).abs() / 1.09 < 1e-3, "{params:?}");
}

#[test]
fn missing_input_exits_2_and_leaves_outputs_alone() {
    let dir = tempfile::tempdir().unwrap();
    let fixtures = all_fixtures(dir.path());
    let (_, cfg, out_dir) = fixtures.iter().find(|f| f.0 == "predict").unwrap();
    fs::create_dir_all(out_dir).unwrap();
    put(out_dir, "sentinel.txt", "keep");
    fs::remove_file(dir.path().join("p0.grd")).unwrap();
    let out = rainstat(&["--config", cfg.to_str().unwrap(), "predict"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("p0.grd"));
    let files = snapshot(out_dir);
    assert_eq!(files.len(), 1);
    assert_eq!(files["sentinel.txt"], b"keep");
}

#[test]
fn configuration_problems_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = put(dir.path(), "bad.cfg", "out_dir = o\nsamples = s.csv\nbogus = 1\n");
    let out = rainstat(&["--config", cfg.to_str().unwrap(), "eval"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("bogus"));

    assert_eq!(rainstat(&["eval"]).status.code(), Some(1));
    assert_eq!(rainstat(&["--config", "x.cfg", "nonsense"]).status.code(), Some(1));
    assert_eq!(
        rainstat(&["--threads", "0", "--config", "x.cfg", "fit"]).status.code(),
        Some(1)
    );
    assert_eq!(
        rainstat(&["--config", dir.path().join("absent.cfg").to_str().unwrap(), "fit"])
            .status
            .code(),
        Some(1)
    );

    let help = rainstat(&["--help"]);
    assert_eq!(help.status.code(), Some(0));
    let text = String::from_utf8_lossy(&help.stdout);
    for cmd in ["fit", "predict", "build-clim", "gauge", "eval", "impact"] {
        assert!(text.contains(cmd), "{text}");
    }
}

#[test]
fn unbracketed_inversion_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    put(dir.path(), "sites.csv", "site_id,lat,lon,country\nP1,0,0,AA\n");
    put(dir.path(), "climate.csv", "site_id,mt_mm,p0_percent\nP1,3000,9\n");
    // with a tiny exponent the rate at 0.001 % runs past the search cap
    put(dir.path(), "params.txt", "x=0.000001\ny=21797\nz=26.02\n");
    let cfg = put(
        dir.path(),
        "p.cfg",
        "out_dir = out\nsites = sites.csv\nclimate = climate.csv\nparams = params.txt\n",
    );
    let out = rainstat(&["--config", cfg.to_str().unwrap(), "predict"]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(!dir.path().join("out").exists());
}

#[test]
fn predict_samples_the_grids_and_inverts_the_model() {
    let dir = tempfile::tempdir().unwrap();
    let fixtures = all_fixtures(dir.path());
    let (_, cfg, out_dir) = fixtures.iter().find(|f| f.0 == "predict").unwrap();
    run_ok(cfg, "predict");
    let sites = rainmodel::read_site_statistics(out_dir.join("sites.csv")).unwrap();
    assert_eq!(sites.len(), 3);
    let mt = raster::read_grid(dir.path().join("mt.grd")).unwrap();
    let p0 = raster::read_grid(dir.path().join("p0.grd")).unwrap();
    for s in &sites {
        assert_eq!(s.years, 1.0);
        let c = ClimatePoint::new(
            raster::sample_bilinear(&mt, s.lat, s.lon).unwrap(),
            raster::sample_bilinear(&p0, s.lat, s.lon).unwrap(),
        )
        .unwrap();
        assert_eq!(s.points.len(), STANDARD_LADDER.len());
        for pt in &s.points {
            let want = rainmodel::rain_rate(pt.p, &c, &gen_params()).unwrap();
            assert!(
                (pt.rate - want).abs() <= 1e-9 * want.max(1.0),
                "{} p={}",
                s.site_id,
                pt.p
            );
        }
    }
}

#[test]
fn gauge_reports_each_site() {
    let dir = tempfile::tempdir().unwrap();
    let fixtures = all_fixtures(dir.path());
    let (_, cfg, out_dir) = fixtures.iter().find(|f| f.0 == "gauge").unwrap();
    run_ok(cfg, "gauge");
    let report = fs::read_to_string(out_dir.join("gauge_report.txt")).unwrap();
    assert!(report.contains("site.G9.status=excluded"), "{report}");
    for id in ["G0", "G1"] {
        assert!(report.contains(&format!("site.{id}.status=ok")), "{report}");
        assert_eq!(report_value(&report, &format!("site.{id}.selected_years")), Some(1.0));
    }
    let sites = rainmodel::read_site_statistics(out_dir.join("sites.csv")).unwrap();
    assert_eq!(
        sites.iter().map(|s| s.site_id.as_str()).collect::<Vec<_>>(),
        ["G0", "G1"]
    );
    for s in &sites {
        // a year of minutes supports at least 20 exceedances only down to p = 0.005 %
        assert_eq!(s.points.first().unwrap().p, 0.005);
        assert!(s.points.windows(2).all(|w| w[1].rate <= w[0].rate));
    }
}

#[test]
fn eval_reports_summary_and_scores() {
    let dir = tempfile::tempdir().unwrap();
    let fixtures = all_fixtures(dir.path());
    let (_, cfg, out_dir) = fixtures.iter().find(|f| f.0 == "eval").unwrap();
    run_ok(cfg, "eval");
    let metrics = fs::read_to_string(out_dir.join("metrics.txt")).unwrap();
    for key in [
        "n",
        "mean_pct",
        "sd_pct",
        "rms_pct",
        "by_site.mcc",
        "by_country.accuracy",
        "station.n",
    ] {
        assert!(report_value(&metrics, key).is_some(), "{key} missing from\n{metrics}");
    }
    assert_eq!(report_value(&metrics, "n"), Some(36.0));
    let (mean, sd, rms) = (
        report_value(&metrics, "mean_pct").unwrap(),
        report_value(&metrics, "sd_pct").unwrap(),
        report_value(&metrics, "rms_pct").unwrap(),
    );
    assert!((rms - (mean * mean + sd * sd).sqrt()).abs() < 1e-3);
    let rec = fs::read_to_string(out_dir.join("rec.csv")).unwrap();
    let last: f64 = rec.lines().last().unwrap().split(',').nth(1).unwrap().parse().unwrap();
    assert_eq!(last, 1.0);
}

#[test]
fn impact_tables_match_the_hand_count() {
    let dir = tempfile::tempdir().unwrap();
    let fixtures = all_fixtures(dir.path());
    let (_, cfg, out_dir) = fixtures.iter().find(|f| f.0 == "impact").unwrap();
    run_ok(cfg, "impact");
    assert_eq!(
        fs::read_to_string(out_dir.join("impact.csv")).unwrap(),
        "country_code,total_pop,heavy_pop\n1,35,0\n2,79,79\n3,13,0\nunassigned,100,0\ntotal,227,79\n"
    );
    assert_eq!(
        fs::read_to_string(out_dir.join("zones.csv")).unwrap(),
        "zone,r001_mm_h,land_pct_px,populated_pct_px,pop_pct\n\
         A,8,26.6667,27.2727,27.5591\nF,28,40.0000,36.3636,10.2362\nQ,115,33.3333,36.3636,62.2047\n"
    );
    let report = fs::read_to_string(out_dir.join("impact_report.txt")).unwrap();
    assert_eq!(report_value(&report, "heavy_pixels"), Some(5.0));
    assert_eq!(report_value(&report, "nodata_pixels"), Some(0.0));
}
