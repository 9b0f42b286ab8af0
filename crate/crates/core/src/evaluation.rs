//! Error figures, summary statistics, REC curves and heavy-rain
//! classification scores.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::Deserialize;

use crate::error::{Error, Result};
use crate::raster::{self, Grid};

/// R_0.01 (mm/h) above which a location counts as heavier than zone N.
pub const HEAVY_THRESHOLD_MM_H: f64 = 95.0;
/// Exceedance probability (percent) used for heavy-rain classification.
pub const CLASSIFICATION_P: f64 = 0.01;

#[derive(Debug, Clone, PartialEq)]
pub struct ErrorSample {
    pub site_id: String,
    /// Exceedance probability, percent.
    pub p: f64,
    /// Observed rate, mm/h.
    pub observed: f64,
    /// Predicted rate, mm/h.
    pub predicted: f64,
}

impl ErrorSample {
    pub fn relative_error(&self) -> Result<f64> {
        relative_error(self.observed, self.predicted)
    }

    pub fn bias_error(&self) -> f64 {
        bias_error(self.observed, self.predicted)
    }
}

/// `(predicted − observed) / observed`.
pub fn relative_error(observed: f64, predicted: f64) -> Result<f64> {
    if !(observed > 0.0) {
        return Err(Error::Argument(format!(
            "relative error needs observed > 0, got {observed}"
        )));
    }
    Ok((predicted - observed) / observed)
}

/// `predicted − observed`.
pub fn bias_error(observed: f64, predicted: f64) -> f64 {
    predicted - observed
}

/// Mean, population standard deviation and `rms = √(μ² + σ²)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct P311Summary {
    pub mean: f64,
    pub sd: f64,
    pub rms: f64,
    pub n: usize,
}

pub fn p311_summary(errors: &[f64]) -> Result<P311Summary> {
    if errors.is_empty() {
        return Err(Error::Argument("summary of an empty error list".into()));
    }
    let n = errors.len() as f64;
    let mean = errors.iter().sum::<f64>() / n;
    let var = errors.iter().map(|e| (e - mean) * (e - mean)).sum::<f64>() / n;
    let sd = var.sqrt();
    Ok(P311Summary {
        mean,
        sd,
        rms: mean.hypot(sd),
        n: errors.len(),
    })
}

/// Fraction of samples with `|error| ≤ t` for each threshold `t`.
pub fn rec_curve(errors: &[f64], thresholds: &[f64]) -> Result<Vec<f64>> {
    if errors.is_empty() {
        return Err(Error::Argument("REC curve of an empty sample".into()));
    }
    if thresholds.windows(2).any(|w| !(w[0] <= w[1])) {
        return Err(Error::Argument("REC thresholds must be sorted ascending".into()));
    }
    let mut abs: Vec<f64> = errors.iter().map(|e| e.abs()).collect();
    abs.sort_unstable_by(f64::total_cmp);
    let n = abs.len() as f64;
    Ok(thresholds
        .iter()
        .map(|&t| abs.partition_point(|&e| e <= t) as f64 / n)
        .collect())
}

/// Heavier than zone N: R_0.01 strictly above 95 mm/h.
pub fn classify_heavy(r001: f64) -> bool {
    r001 > HEAVY_THRESHOLD_MM_H
}

/// 2×2 counts of actual-by-predicted outcomes.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ConfusionMatrix {
    pub tn: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tp: u64,
}

impl ConfusionMatrix {
    pub fn new(tn: u64, fp: u64, fn_: u64, tp: u64) -> Self {
        ConfusionMatrix { tn, fp, fn_, tp }
    }

    pub fn total(&self) -> u64 {
        self.tn + self.fp + self.fn_ + self.tp
    }

    pub fn accuracy(&self) -> f64 {
        let total = self.total();
        if total == 0 {
            return 0.0;
        }
        (self.tp + self.tn) as f64 / total as f64
    }

    /// Matthews correlation coefficient; 0 when any marginal is empty.
    pub fn mcc(&self) -> f64 {
        let (tp, tn, fp, fn_) = (self.tp as f64, self.tn as f64, self.fp as f64, self.fn_ as f64);
        let factors = [tp + fp, tp + fn_, tn + fp, tn + fn_];
        if factors.contains(&0.0) {
            return 0.0;
        }
        let denom = factors.iter().product::<f64>().sqrt();
        (tp * tn - fp * fn_) / denom
    }
}

pub fn confusion(actuals: &[bool], predictions: &[bool]) -> Result<ConfusionMatrix> {
    if actuals.len() != predictions.len() {
        return Err(Error::Argument(format!(
            "{} actual labels vs {} predictions",
            actuals.len(),
            predictions.len()
        )));
    }
    if actuals.is_empty() {
        return Err(Error::Argument("no labels to score".into()));
    }
    let mut cm = ConfusionMatrix::default();
    for (&a, &p) in actuals.iter().zip(predictions) {
        match (a, p) {
            (false, false) => cm.tn += 1,
            (false, true) => cm.fp += 1,
            (true, false) => cm.fn_ += 1,
            (true, true) => cm.tp += 1,
        }
    }
    Ok(cm)
}

/// Per-country labels: a country is actually (resp. predicted) heavy when
/// any of its sites is. Countries come back in code order.
pub fn by_country<S: AsRef<str>>(records: &[(S, bool, bool)]) -> Vec<(String, bool, bool)> {
    let mut map: BTreeMap<&str, (bool, bool)> = BTreeMap::new();
    for (country, actual, predicted) in records {
        let e = map.entry(country.as_ref()).or_default();
        e.0 |= *actual;
        e.1 |= *predicted;
    }
    map.into_iter().map(|(c, (a, p))| (c.to_string(), a, p)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StationComparison {
    pub summary: P311Summary,
    pub used: usize,
    pub skipped: usize,
}

/// Relative error of a gridded M_t against station values, sampled
/// bilinearly at each station. Stations on nodata are skipped.
pub fn station_comparison(climatology: &Grid, stations: &[(f64, f64, f64)]) -> Result<StationComparison> {
    let mut errors = Vec::with_capacity(stations.len());
    let mut skipped = 0;
    for &(lat, lon, mt) in stations {
        let v = raster::sample_bilinear(climatology, lat, lon)?;
        if climatology.is_nodata(v) {
            skipped += 1;
            continue;
        }
        errors.push(relative_error(mt, v)?);
    }
    if errors.is_empty() {
        return Err(Error::EmptyData(format!("all {skipped} stations fall on nodata")));
    }
    Ok(StationComparison {
        summary: p311_summary(&errors)?,
        used: errors.len(),
        skipped,
    })
}

// ---------------------------------------------------------------------------
// Error-samples CSV

pub const SAMPLES_CSV_HEADER: &str = "site_id,p_percent,observed,predicted";

#[derive(Deserialize)]
struct SampleRow {
    site_id: String,
    p_percent: f64,
    observed: f64,
    predicted: f64,
}

pub fn parse_error_samples(text: &str, source: &str) -> Result<Vec<ErrorSample>> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let mut out = Vec::new();
    for (i, rec) in rdr.deserialize::<SampleRow>().enumerate() {
        let row = rec.map_err(|e| Error::parse(source, i + 2, e.to_string()))?;
        if !(row.observed > 0.0) || !(row.predicted >= 0.0) {
            return Err(Error::parse(source, i + 2, "observed must be > 0 and predicted >= 0"));
        }
        out.push(ErrorSample {
            site_id: row.site_id,
            p: row.p_percent,
            observed: row.observed,
            predicted: row.predicted,
        });
    }
    Ok(out)
}

pub fn read_error_samples(path: impl AsRef<Path>) -> Result<Vec<ErrorSample>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_error_samples(&text, &path.display().to_string())
}

pub fn error_samples_to_csv(samples: &[ErrorSample]) -> String {
    let mut s = String::from(SAMPLES_CSV_HEADER);
    s.push('\n');
    for e in samples {
        let _ = writeln!(s, "{},{},{},{}", e.site_id, e.p, e.observed, e.predicted);
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raster::GridGeometry;

    #[test]
    fn error_figures() {
        assert_eq!(relative_error(100.0, 100.0).unwrap(), 0.0);
        assert_eq!(bias_error(100.0, 100.0), 0.0);
        assert!((relative_error(100.0, 130.0).unwrap() - 0.30).abs() < 1e-15);
        assert_eq!(bias_error(100.0, 130.0), 30.0);
        assert_eq!(relative_error(50.0, 25.0).unwrap(), -0.5);
        assert!(matches!(relative_error(0.0, 1.0), Err(Error::Argument(_))));
    }

    #[test]
    fn summary_cases() {
        let s = p311_summary(&[0.0; 4]).unwrap();
        assert_eq!((s.mean, s.sd, s.rms), (0.0, 0.0, 0.0));
        let s = p311_summary(&[10.0, -10.0]).unwrap();
        assert_eq!((s.mean, s.sd, s.rms), (0.0, 10.0, 10.0));
        assert!(p311_summary(&[]).is_err());
    }

    #[test]
    fn rec_cases() {
        let e = [1.0, -2.0, 3.0];
        assert_eq!(rec_curve(&e, &[1.5]).unwrap(), vec![1.0 / 3.0]);
        assert_eq!(
            rec_curve(&e, &[0.0, 1.0, 2.0, 3.0]).unwrap(),
            vec![0.0, 1.0 / 3.0, 2.0 / 3.0, 1.0]
        );
        assert!(rec_curve(&[], &[1.0]).is_err());
        assert!(rec_curve(&e, &[2.0, 1.0]).is_err());
    }

    #[test]
    fn heavy_boundary() {
        assert!(!classify_heavy(95.0));
        assert!(classify_heavy(95.1));
        assert!(!classify_heavy(0.0));
    }

    #[test]
    fn confusion_counts_and_perfect_score() {
        let a = [true, false, true, false, false];
        let cm = confusion(&a, &a).unwrap();
        assert_eq!(cm, ConfusionMatrix::new(3, 0, 0, 2));
        assert_eq!(cm.accuracy(), 1.0);
        assert!((cm.mcc() - 1.0).abs() < 1e-15);
        assert!(confusion(&a, &a[..4]).is_err());
        assert!(confusion(&[], &[]).is_err());
        // degenerate marginal
        assert_eq!(ConfusionMatrix::new(5, 0, 3, 0).mcc(), 0.0);
    }

    #[test]
    fn country_rollup() {
        let recs = [
            ("KE", false, false),
            ("BD", false, true),
            ("BD", true, false),
            ("AU", true, true),
        ];
        let c = by_country(&recs);
        assert_eq!(
            c,
            vec![
                ("AU".to_string(), true, true),
                ("BD".to_string(), true, true),
                ("KE".to_string(), false, false)
            ]
        );
    }

    #[test]
    fn station_cases() {
        let g = GridGeometry::new(4, 4, 0.0, 0.0, 1.0, -9999.0).unwrap();
        let grid = Grid::filled(g, 1000.0);
        let r = station_comparison(&grid, &[(1.5, 1.5, 1000.0), (2.2, 0.7, 1000.0)]).unwrap();
        assert_eq!((r.summary.mean, r.summary.sd, r.summary.rms), (0.0, 0.0, 0.0));
        let r = station_comparison(&grid, &[(1.5, 1.5, 500.0)]).unwrap();
        assert_eq!(r.summary.mean, 1.0);

        let mut holes = grid.clone();
        holes.set(0, 0, -9999.0);
        let r = station_comparison(&holes, &[(3.5, 0.5, 900.0), (0.5, 3.5, 800.0)]).unwrap();
        assert_eq!((r.used, r.skipped), (1, 1));
        assert!(matches!(
            station_comparison(&holes, &[(3.5, 0.5, 900.0)]),
            Err(Error::EmptyData(_))
        ));
        assert!(matches!(
            station_comparison(&grid, &[(9.0, 0.5, 900.0)]),
            Err(Error::Range(_))
        ));
    }

    #[test]
    fn samples_csv() {
        let s = vec![ErrorSample {
            site_id: "a".into(),
            p: 0.01,
            observed: 100.0,
            predicted: 87.5,
        }];
        let text = error_samples_to_csv(&s);
        assert_eq!(text, "site_id,p_percent,observed,predicted\na,0.01,100,87.5\n");
        assert_eq!(parse_error_samples(&text, "x").unwrap(), s);
        assert!(parse_error_samples("site_id,p_percent,observed,predicted\na,1,0,3\n", "x").is_err());
    }
}
