//! Seeded synthetic data generators for fixtures and self-consistency runs.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::climatology::SwathObservation;
use crate::error::Result;
use crate::gauge::{MinuteSeries, TipEvent};
use crate::rainmodel::{self, ClimatePoint, ModelParams, SitePoint, SiteStatistics};
use crate::raster::GridGeometry;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Climates with M_t uniform in `mt` (mm) and P_0 uniform in `p0` (%).
pub fn random_climates(n: usize, mt: (f64, f64), p0: (f64, f64), seed: u64) -> Vec<ClimatePoint> {
    let mut r = rng(seed);
    (0..n)
        .map(|_| ClimatePoint {
            mt: r.gen_range(mt.0..=mt.1),
            p0: r.gen_range(p0.0..=p0.1),
        })
        .collect()
}

/// Model curves for each climate over the ladder rungs below P_0, with
/// optional multiplicative noise uniform in `[1 − noise, 1 + noise]`.
/// Noisy curves are made monotone with a running maximum from large to
/// small p.
pub fn training_set(
    params: &ModelParams,
    climates: &[ClimatePoint],
    ladder: &[f64],
    noise: f64,
    seed: u64,
) -> Result<Vec<(SiteStatistics, ClimatePoint)>> {
    let mut r = rng(seed);
    let mut out = Vec::with_capacity(climates.len());
    for (i, c) in climates.iter().enumerate() {
        let mut points = Vec::new();
        for &p in ladder.iter().filter(|&&p| p < c.p0) {
            let mut rate = rainmodel::rain_rate(p, c, params)?;
            if noise > 0.0 {
                rate *= 1.0 + r.gen_range(-noise..=noise);
            }
            points.push(SitePoint { p, rate });
        }
        points.sort_by(|a, b| b.p.total_cmp(&a.p));
        let mut floor = 0.0f64;
        for pt in &mut points {
            floor = floor.max(pt.rate);
            pt.rate = floor;
        }
        points.reverse();
        out.push((
            SiteStatistics {
                site_id: format!("S{i:03}"),
                lat: 0.0,
                lon: 0.0,
                country: "ZZ".into(),
                years: 10.0,
                points,
            },
            *c,
        ));
    }
    Ok(out)
}

/// A 1-min rain-rate series whose rate distribution follows the model
/// curve.
///
/// Rates are stratified inverse-CDF draws: the j-th largest of the
/// `round(N·P_0/100)` raining minutes is the model rate at
/// `p = 100·(j − ½)/N`. They are dealt round-robin into one storm per
/// calendar-month slot, each storm arranged as a rise-and-fall profile so
/// that consecutive minutes change smoothly, and the storms are placed at
/// random offsets within their slots.
pub fn minute_series_from_curve(
    climate: &ClimatePoint,
    params: &ModelParams,
    start_minute: i64,
    minutes: usize,
    storms: usize,
    seed: u64,
) -> Result<MinuteSeries> {
    let mut r = rng(seed);
    let n = minutes as f64;
    let raining = (n * climate.p0 / 100.0).round() as usize;
    let storms = storms.clamp(1, raining.max(1));
    let mut ranked = Vec::with_capacity(raining);
    for j in 0..raining {
        let p = 100.0 * (j as f64 + 0.5) / n;
        ranked.push(rainmodel::rain_rate(p, climate, params)?);
    }

    let mut order: Vec<usize> = (0..storms).collect();
    order.shuffle(&mut r);
    let slot = minutes / storms;
    let mut rates = vec![0.0; minutes];
    for (s, &deal) in order.iter().enumerate() {
        // descending rates dealt to this storm
        let dealt: Vec<f64> = ranked.iter().skip(deal).step_by(storms).copied().collect();
        let len = dealt.len();
        if len == 0 {
            continue;
        }
        let mut profile = vec![0.0; len];
        // largest in the middle, alternating outwards
        let mid = len / 2;
        for (k, &v) in dealt.iter().enumerate() {
            let off = k.div_ceil(2);
            let pos = if k % 2 == 1 {
                mid - off.min(mid)
            } else {
                (mid + off).min(len - 1)
            };
            profile[pos] = v;
        }
        let room = slot.saturating_sub(len);
        let start = s * slot + if room > 0 { r.gen_range(0..room) } else { 0 };
        let end = (start + len).min(minutes);
        rates[start..end].copy_from_slice(&profile[..end - start]);
    }
    Ok(MinuteSeries::new(start_minute, rates))
}

/// Tip times of a bucket gauge under a rate that is constant within each
/// minute.
pub fn tips_from_rates(series: &MinuteSeries, bucket_mm: f64) -> Vec<TipEvent> {
    let mut tips = Vec::new();
    let mut cum = 0.0;
    let mut k = 1u64;
    for (m, &rate) in series.rates.iter().enumerate() {
        if rate <= 0.0 {
            continue;
        }
        let t0 = (series.start_minute + m as i64) as f64 * 60.0;
        let d = rate / 60.0;
        let end = cum + d;
        loop {
            let level = k as f64 * bucket_mm;
            if level > end {
                break;
            }
            tips.push(TipEvent {
                time: t0 + (level - cum) / d * 60.0,
                depth: bucket_mm,
            });
            k += 1;
        }
        cum = end;
    }
    tips.dedup_by(|b, a| b.time <= a.time);
    tips
}

/// Footprints scattered uniformly over `geometry`, one every `spacing_s`
/// seconds, raining with probability `rain_prob` at an exponentially
/// distributed rate of mean `mean_nsrr` mm/h.
pub fn scattered_observations(
    geometry: &GridGeometry,
    count: usize,
    rain_prob: f64,
    mean_nsrr: f64,
    spacing_s: f64,
    seed: u64,
) -> Vec<SwathObservation> {
    let mut r = rng(seed);
    (0..count)
        .map(|i| {
            let lat = r.gen_range(geometry.south()..geometry.north());
            let lon = r.gen_range(geometry.west()..geometry.east());
            let rain = r.gen_bool(rain_prob);
            let u: f64 = r.gen();
            let nsrr = if rain { -mean_nsrr * (1.0 - u).ln() } else { 0.0 };
            SwathObservation {
                time: i as f64 * spacing_s,
                lat,
                lon,
                nsrr,
                rain_certain: rain && nsrr > 0.0,
                diameter_km: r.gen_range(4.0..=5.0),
            }
        })
        .collect()
}
