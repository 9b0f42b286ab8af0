mod common;

use proptest::prelude::*;
use rainstat::gauge::{self, MinuteSeries, TipEvent};
use rainstat::rainmodel::{self, ClimatePoint, STANDARD_LADDER};
use rainstat::synth;
use rand::Rng;

use common::gen_params;

const JAN_2001: i64 = 978_307_200 / 60;

fn random_tips(seed: u64, n: usize, span_s: f64) -> Vec<TipEvent> {
    let mut r = synth::rng(seed);
    let mut t = 0.0;
    let mut times = Vec::with_capacity(n);
    for _ in 0..n {
        // in-storm intervals, and dry gaps long enough that events never share a minute
        t += if r.gen_bool(0.1) {
            r.gen_range(1900.0..20_000.0)
        } else {
            r.gen_range(1.0..600.0)
        };
        if t >= span_s {
            break;
        }
        times.push(t);
    }
    TipEvent::uniform(&times, 0.254)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn every_event_conserves_depth(seed in any::<u64>(), n in 0usize..300) {
        let minutes = 10 * 1440;
        let tips = random_tips(seed, n, minutes as f64 * 60.0);
        let series = gauge::tips_to_rates(&tips, 0, minutes).unwrap();
        prop_assert!(series.rates.iter().all(|&r| r >= 0.0));
        let total: f64 = series.rates.iter().sum::<f64>() / 60.0;
        let expected = 0.254 * tips.len() as f64;
        prop_assert!((total - expected).abs() <= 1e-6 * expected.max(1e-300), "{total} vs {expected}");

        // per event: minutes strictly between events carry no rain
        let mut begin = 0;
        while begin < tips.len() {
            let mut end = begin + 1;
            while end < tips.len() && tips[end].time - tips[end - 1].time <= gauge::EVENT_GAP_S {
                end += 1;
            }
            let first = ((tips[begin].time - gauge::EVENT_GAP_S).max(0.0) / 60.0).floor() as usize;
            let last = ((tips[end - 1].time / 60.0).floor() as usize).min(minutes - 1);
            let depth: f64 = series.rates[first..=last].iter().sum::<f64>() / 60.0;
            let want = 0.254 * (end - begin) as f64;
            prop_assert!((depth - want).abs() <= 1e-6 * want, "event {begin}..{end}: {depth} vs {want}");
            begin = end;
        }
    }

    #[test]
    fn exceedance_matches_full_sort(seed in any::<u64>(), n in 1usize..3000, min_count in 1usize..40) {
        let mut r = synth::rng(seed);
        let rates: Vec<f64> = (0..n).map(|_| if r.gen_bool(0.6) { 0.0 } else { r.gen_range(0.0..200.0) }).collect();
        let mut series = MinuteSeries::new(0, rates);
        for v in series.valid.iter_mut() {
            *v = r.gen_bool(0.9);
        }
        let got = gauge::exceedance_stats(&series, &STANDARD_LADDER, min_count);

        let mut sorted: Vec<f64> = series.rates.iter().zip(&series.valid).filter(|(_, v)| **v).map(|(r, _)| *r).collect();
        sorted.sort_by(|a, b| b.total_cmp(a));
        let mut want = Vec::new();
        for &p in &STANDARD_LADDER {
            // exact rational count: p·N/100 with p given to three decimals
            let milli = (p * 1000.0).round() as u64;
            let scaled = milli * sorted.len() as u64;
            if scaled < min_count as u64 * 100_000 {
                continue;
            }
            let k = (scaled / 100_000) as usize;
            want.push((p, sorted[k.max(1) - 1]));
        }
        prop_assert_eq!(got.len(), want.len());
        for (g, (p, rate)) in got.iter().zip(&want) {
            prop_assert_eq!(g.p, *p);
            prop_assert_eq!(g.rate, *rate);
        }
        for w in got.windows(2) {
            prop_assert!(w[1].rate <= w[0].rate);
        }
    }

    #[test]
    fn qc_only_touches_flags(seed in any::<u64>()) {
        let mut r = synth::rng(seed);
        let rates: Vec<f64> = (0..500).map(|_| r.gen_range(0.0..4000.0)).collect();
        let series = MinuteSeries::new(5, rates);
        let checked = gauge::qc_filter(&series);
        prop_assert_eq!(&checked.rates, &series.rates);
        for (rate, valid) in checked.rates.iter().zip(&checked.valid) {
            prop_assert_eq!(*valid, *rate <= gauge::QC_CAP_MM_H);
        }
    }
}

#[test]
fn steady_tipping_interior_is_fifteen_mm_per_hour() {
    let times: Vec<f64> = (0..120).map(|i| 30.0 + 60.0 * i as f64).collect();
    let series = gauge::tips_to_rates(&TipEvent::uniform(&times, 0.254), 0, 130).unwrap();
    for m in 20..100 {
        assert!(
            (series.rates[m] - 15.24).abs() < 1e-6,
            "minute {m}: {}",
            series.rates[m]
        );
    }
}

#[test]
fn tip_csv_feeds_the_reduction() {
    let c = ClimatePoint::new(1500.0, 4.0).unwrap();
    let minutes = 365 * 1440;
    let series = synth::minute_series_from_curve(&c, &gen_params(), JAN_2001, minutes, 12, 1).unwrap();
    let tips = synth::tips_from_rates(&series, 0.254);
    let parsed = gauge::parse_tips(&gauge::tips_to_csv(&tips), "mem").unwrap();
    assert_eq!(parsed.len(), tips.len());
    assert!(parsed.iter().zip(&tips).all(|(a, b)| (a.time - b.time).abs() <= 5e-4));
    let a = gauge::tips_to_rates(&parsed, JAN_2001, minutes).unwrap();
    let sel = gauge::select_periods(&gauge::qc_filter(&a)).unwrap();
    assert_eq!(sel.len(), minutes);
    let points = gauge::exceedance_stats(&sel, &STANDARD_LADDER, 20);
    assert!(points.iter().all(|p| p.p > 0.002), "one year cannot support p <= 0.002");
}

/// With the reference model constants, rungs whose rate is at least
/// 2 mm/h (several tips per 10 min) are reconstructed within 5%.
#[test]
fn resolvable_rungs_follow_the_reference_curve() {
    let c = ClimatePoint::new(2000.0, 8.0).unwrap();
    let minutes = (365 * 5 + 1) * 1440;
    let series = synth::minute_series_from_curve(&c, &gen_params(), JAN_2001, minutes, 60, 2).unwrap();
    let tips = synth::tips_from_rates(&series, 0.254);
    let rates = gauge::tips_to_rates(&tips, JAN_2001, minutes).unwrap();
    let sel = gauge::select_periods(&gauge::qc_filter(&rates)).unwrap();
    let mut checked = 0;
    for pt in gauge::exceedance_stats(&sel, &STANDARD_LADDER, 20) {
        let want = rainmodel::rain_rate(pt.p, &c, &gen_params()).unwrap();
        if want >= 2.0 {
            assert!(
                (pt.rate - want).abs() / want <= 0.05,
                "p={}: {} vs {want}",
                pt.p,
                pt.rate
            );
            checked += 1;
        }
    }
    assert!(checked >= 12);
}
