//! Tipping-bucket gauge records → 1-min rain-rate series → site statistics.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use chrono::{DateTime, Datelike, Months, NaiveDate, TimeZone, Utc};
use serde::Deserialize;

use crate::error::{Error, Result};
use crate::rainmodel::SitePoint;

/// Dry spell (seconds) that separates two rain events.
pub const EVENT_GAP_S: f64 = 30.0 * 60.0;
/// 2 in/min expressed in mm/h.
pub const QC_CAP_MM_H: f64 = 3048.0;
/// Lead-in assumed before the first tip of a single-tip event.
pub const SINGLE_TIP_LEAD_S: f64 = 10.0 * 60.0;
pub const DEFAULT_MIN_COUNT: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TipEvent {
    /// Seconds since the epoch.
    pub time: f64,
    /// Depth recorded by this tip, mm.
    pub depth: f64,
}

impl TipEvent {
    /// Tips of one fixed bucket size at the given times.
    pub fn uniform(times: &[f64], bucket_mm: f64) -> Vec<TipEvent> {
        times.iter().map(|&time| TipEvent { time, depth: bucket_mm }).collect()
    }
}

/// Consecutive 1-min rain rates starting at `start_minute` (minutes since
/// the epoch).
#[derive(Debug, Clone, PartialEq)]
pub struct MinuteSeries {
    pub start_minute: i64,
    /// mm/h per minute.
    pub rates: Vec<f64>,
    pub valid: Vec<bool>,
}

impl MinuteSeries {
    pub fn new(start_minute: i64, rates: Vec<f64>) -> Self {
        let valid = vec![true; rates.len()];
        MinuteSeries {
            start_minute,
            rates,
            valid,
        }
    }

    pub fn len(&self) -> usize {
        self.rates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rates.is_empty()
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }

    pub fn valid_rates(&self) -> impl Iterator<Item = f64> + '_ {
        self.rates
            .iter()
            .zip(&self.valid)
            .filter(|(_, &ok)| ok)
            .map(|(&r, _)| r)
    }

    fn slice(&self, from: usize, to: usize) -> MinuteSeries {
        MinuteSeries {
            start_minute: self.start_minute + from as i64,
            rates: self.rates[from..to].to_vec(),
            valid: self.valid[from..to].to_vec(),
        }
    }
}

/// Natural cubic spline through strictly increasing knots.
struct NaturalSpline {
    x: Vec<f64>,
    y: Vec<f64>,
    /// Second derivatives at the knots.
    m: Vec<f64>,
}

impl NaturalSpline {
    fn new(x: Vec<f64>, y: Vec<f64>) -> Self {
        let n = x.len();
        let mut m = vec![0.0; n];
        if n > 2 {
            // tridiagonal system for interior second derivatives (Thomas)
            let k = n - 2;
            let mut diag = vec![0.0; k];
            let mut upper = vec![0.0; k];
            let mut rhs = vec![0.0; k];
            for i in 1..n - 1 {
                let h0 = x[i] - x[i - 1];
                let h1 = x[i + 1] - x[i];
                diag[i - 1] = 2.0 * (h0 + h1);
                upper[i - 1] = h1;
                rhs[i - 1] = 6.0 * ((y[i + 1] - y[i]) / h1 - (y[i] - y[i - 1]) / h0);
            }
            for i in 1..k {
                let lower = x[i + 1] - x[i];
                let w = lower / diag[i - 1];
                diag[i] -= w * upper[i - 1];
                rhs[i] -= w * rhs[i - 1];
            }
            m[k] = rhs[k - 1] / diag[k - 1];
            for i in (0..k - 1).rev() {
                m[i + 1] = (rhs[i] - upper[i] * m[i + 2]) / diag[i];
            }
        }
        NaturalSpline { x, y, m }
    }

    /// Value at `t`, clamped to the knot range; `seg` is a cursor that
    /// only moves forward, so evaluate in non-decreasing `t`.
    fn eval(&self, t: f64, seg: &mut usize) -> f64 {
        let n = self.x.len();
        if t <= self.x[0] {
            return self.y[0];
        }
        if t >= self.x[n - 1] {
            return self.y[n - 1];
        }
        while self.x[*seg + 1] < t {
            *seg += 1;
        }
        let i = *seg;
        let h = self.x[i + 1] - self.x[i];
        let a = (self.x[i + 1] - t) / h;
        let b = (t - self.x[i]) / h;
        a * self.y[i]
            + b * self.y[i + 1]
            + ((a * a * a - a) * self.m[i] + (b * b * b - b) * self.m[i + 1]) * h * h / 6.0
    }
}

/// Converts tip times into a 1-min rate series covering
/// `[start_minute, start_minute + minutes)`.
///
/// Tips are grouped into events split by dry gaps longer than 30 min. For
/// each event, cumulative depth against time (anchored at zero one
/// inter-tip interval before the first tip) is interpolated with a natural
/// cubic spline and differenced at minute boundaries. Negative minute
/// depths from spline overshoot are zeroed and the event rescaled so its
/// total depth is preserved.
pub fn tips_to_rates(events: &[TipEvent], start_minute: i64, minutes: usize) -> Result<MinuteSeries> {
    let t0 = start_minute as f64 * 60.0;
    let t1 = t0 + minutes as f64 * 60.0;
    for (i, e) in events.iter().enumerate() {
        if !(e.depth.is_finite() && e.depth > 0.0) {
            return Err(Error::Data(format!("tip {}: depth must be positive", i + 1)));
        }
        if !(e.time >= t0 && e.time <= t1) {
            return Err(Error::Data(format!(
                "tip {} at t={} outside the series span",
                i + 1,
                e.time
            )));
        }
    }
    if let Some(i) = events.windows(2).position(|w| !(w[1].time > w[0].time)) {
        return Err(Error::Data(format!(
            "tip times not strictly increasing at tip {}",
            i + 2
        )));
    }

    let mut depth = vec![0.0; minutes];
    let mut begin = 0;
    while begin < events.len() {
        let mut end = begin + 1;
        while end < events.len() && events[end].time - events[end - 1].time <= EVENT_GAP_S {
            end += 1;
        }
        add_event(&events[begin..end], t0, &mut depth);
        begin = end;
    }
    let rates = depth.into_iter().map(|d| d * 60.0).collect();
    Ok(MinuteSeries::new(start_minute, rates))
}

fn add_event(tips: &[TipEvent], t0: f64, depth: &mut [f64]) {
    let lead = if tips.len() >= 2 {
        (tips[1].time - tips[0].time).min(EVENT_GAP_S)
    } else {
        SINGLE_TIP_LEAD_S
    };
    let anchor = (tips[0].time - lead).max(t0);
    let mut x = Vec::with_capacity(tips.len() + 1);
    let mut y = Vec::with_capacity(tips.len() + 1);
    let total: f64 = tips.iter().map(|t| t.depth).sum();
    if anchor < tips[0].time {
        x.push(anchor);
        y.push(0.0);
    }
    let mut cum = 0.0;
    for t in tips {
        cum += t.depth;
        x.push(t.time);
        y.push(cum);
    }
    let last = depth.len().saturating_sub(1);
    let minute_of = |t: f64| (((t - t0) / 60.0).floor().max(0.0) as usize).min(last);

    if x.len() == 1 {
        // the only tip sits at the very start of the series
        depth[minute_of(x[0])] += total;
        return;
    }
    let (first_min, last_min) = (minute_of(x[0]), minute_of(x[x.len() - 1]));
    let spline = NaturalSpline::new(x, y);
    let mut seg = 0;
    let mut prev = spline.eval(t0 + first_min as f64 * 60.0, &mut seg);
    let mut local = Vec::with_capacity(last_min - first_min + 1);
    for m in first_min..=last_min {
        let next = spline.eval(t0 + (m + 1) as f64 * 60.0, &mut seg);
        local.push((next - prev).max(0.0));
        prev = next;
    }
    let kept: f64 = local.iter().sum();
    let scale = if kept > 0.0 { total / kept } else { 0.0 };
    for (slot, d) in depth[first_min..=last_min].iter_mut().zip(local) {
        *slot += d * scale;
    }
}

/// Marks minutes above 2 in/min invalid; rates are left untouched.
pub fn qc_filter(series: &MinuteSeries) -> MinuteSeries {
    let mut out = series.clone();
    for (v, &r) in out.valid.iter_mut().zip(&series.rates) {
        if r > QC_CAP_MM_H {
            *v = false;
        }
    }
    out
}

fn minute_to_datetime(minute: i64) -> DateTime<Utc> {
    Utc.timestamp_opt(minute * 60, 0)
        .single()
        .expect("minute within chrono range")
}

fn first_full_month(start: DateTime<Utc>) -> DateTime<Utc> {
    let month_start = NaiveDate::from_ymd_opt(start.year(), start.month(), 1)
        .expect("valid month")
        .and_hms_opt(0, 0, 0)
        .expect("midnight")
        .and_utc();
    if month_start == start {
        month_start
    } else {
        month_start + Months::new(1)
    }
}

/// The longest run of consecutive calendar 12-month periods, counted from
/// the first full month, in which more than 90% of minutes are valid.
/// Ties go to the earliest run. `None` when no period qualifies.
pub fn select_periods(series: &MinuteSeries) -> Option<MinuteSeries> {
    let start = minute_to_datetime(series.start_minute);
    let end_minute = series.start_minute + series.len() as i64;
    let mut periods = Vec::new();
    let mut p_start = first_full_month(start);
    loop {
        let p_end = p_start + Months::new(12);
        let (a, b) = (p_start.timestamp() / 60, p_end.timestamp() / 60);
        if b > end_minute {
            break;
        }
        let (ia, ib) = ((a - series.start_minute) as usize, (b - series.start_minute) as usize);
        let valid = series.valid[ia..ib].iter().filter(|&&v| v).count();
        let total = ib - ia;
        periods.push((ia, ib, valid * 10 > total * 9));
        p_start = p_end;
    }

    let mut best: Option<(usize, usize)> = None; // (first period, count)
    let mut i = 0;
    while i < periods.len() {
        if !periods[i].2 {
            i += 1;
            continue;
        }
        let mut j = i;
        while j + 1 < periods.len() && periods[j + 1].2 {
            j += 1;
        }
        let len = j - i + 1;
        if best.is_none_or(|(_, n)| len > n) {
            best = Some((i, len));
        }
        i = j + 1;
    }
    best.map(|(first, n)| series.slice(periods[first].0, periods[first + n - 1].1))
}

/// Empirical rain rate exceeded at each ladder probability (percent).
///
/// With `N` valid minutes, a rung `p` is kept only when `(p/100)·N ≥
/// min_count`; its value is the k-th largest valid rate, `k = ⌊(p/100)·N⌋`.
pub fn exceedance_stats(series: &MinuteSeries, ladder: &[f64], min_count: usize) -> Vec<SitePoint> {
    let mut rates: Vec<f64> = series.valid_rates().collect();
    rates.sort_unstable_by(|a, b| b.total_cmp(a));
    let n = rates.len() as f64;
    ladder
        .iter()
        .filter_map(|&p| {
            // absorb decimal representation noise in p (0.02 % of 10^5 is 20)
            let expected = p * n / 100.0 * (1.0 + 1e-12);
            if expected < min_count as f64 {
                return None;
            }
            let k = (expected.floor() as usize).clamp(1, rates.len());
            Some(SitePoint { p, rate: rates[k - 1] })
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Tip CSV

#[derive(Deserialize)]
struct TipRow {
    time_iso8601_utc: String,
    depth_mm: f64,
}

pub fn parse_time(s: &str) -> Option<f64> {
    let dt = DateTime::parse_from_rfc3339(s).ok()?;
    Some(dt.timestamp() as f64 + f64::from(dt.timestamp_subsec_nanos()) * 1e-9)
}

pub fn format_time(t: f64) -> String {
    let secs = t.floor();
    let millis = ((t - secs) * 1000.0).round() as i64;
    let dt = Utc
        .timestamp_opt(secs as i64, 0)
        .single()
        .expect("time within chrono range")
        + chrono::Duration::milliseconds(millis);
    dt.format("%Y-%m-%dT%H:%M:%S%.3fZ").to_string()
}

pub fn parse_tips(text: &str, source: &str) -> Result<Vec<TipEvent>> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let mut out = Vec::new();
    for (i, rec) in rdr.deserialize::<TipRow>().enumerate() {
        let line = i + 2;
        let row = rec.map_err(|e| Error::parse(source, line, e.to_string()))?;
        let time = parse_time(&row.time_iso8601_utc)
            .ok_or_else(|| Error::parse(source, line, format!("bad timestamp `{}`", row.time_iso8601_utc)))?;
        out.push(TipEvent {
            time,
            depth: row.depth_mm,
        });
    }
    Ok(out)
}

pub fn read_tips(path: impl AsRef<Path>) -> Result<Vec<TipEvent>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_tips(&text, &path.display().to_string())
}

pub fn tips_to_csv(tips: &[TipEvent]) -> String {
    let mut s = String::from("time_iso8601_utc,depth_mm\n");
    for t in tips {
        let _ = writeln!(s, "{},{}", format_time(t.time), t.depth);
    }
    s
}
