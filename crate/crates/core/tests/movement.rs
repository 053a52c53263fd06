use std::f64::consts::PI;

use chrono::{DateTime, Duration, TimeZone, Utc};
use hmm_order::movement::{
    haversine_km, preprocess, read_step_angle_csv, read_tracks, regularize_hourly, split_segments, steps_and_angles,
    to_observation_set, write_step_angle_csv, DropReason, Fix, RawTrack, SplitRules,
};
use hmm_order::Error;
use proptest::prelude::*;

fn t0() -> DateTime<Utc> {
    Utc.with_ymd_and_hms(2017, 8, 10, 0, 0, 0).unwrap()
}

/// One fix per listed hour offset, moving north by 0.01° per hour.
fn track(id: &str, hours: &[i64]) -> RawTrack {
    RawTrack::new(
        id,
        hours
            .iter()
            .map(|&h| Fix {
                time: t0() + Duration::hours(h),
                lat: 70.0 + 0.01 * h as f64,
                lon: -80.0 + 0.005 * (h % 3) as f64,
                covariates: vec![h as f64],
            })
            .collect(),
    )
    .unwrap()
}

fn run(tracks: &[RawTrack]) -> (Vec<hmm_order::movement::StepAngleSeries>, hmm_order::movement::PreprocessSummary) {
    preprocess(tracks, &SplitRules::default()).unwrap()
}

#[test]
fn thirteen_missing_hours_split_the_track() {
    let hours: Vec<i64> = (0..10).chain(23..33).collect();
    let (series, summary) = run(&[track("n1", &hours)]);
    assert_eq!(series.len(), 2);
    assert_eq!(summary.segments.len(), 2);
    assert_eq!(summary.segments[0].id, "n1-1");
    assert_eq!(summary.segments[1].id, "n1-2");
    assert_eq!(summary.segments[1].start, t0() + Duration::hours(23));
    assert!(summary.dropped.is_empty());
}

#[test]
fn twelve_missing_hours_do_not_split() {
    let hours: Vec<i64> = (0..10).chain(22..32).collect();
    let (series, summary) = run(&[track("n1", &hours)]);
    assert_eq!(series.len(), 1);
    assert_eq!(summary.segments[0].hours, 32);
    assert!((summary.segments[0].missing_fraction - 12.0 / 32.0).abs() < 1e-15);
}

#[test]
fn five_fix_segments_are_dropped_and_six_kept() {
    let hours: Vec<i64> = (0..5).chain(30..36).collect();
    let (series, summary) = run(&[track("n2", &hours)]);
    assert_eq!(series.len(), 1);
    assert_eq!(summary.segments[0].fixes, 6);
    assert_eq!(summary.dropped.len(), 1);
    let d = &summary.dropped[0];
    assert_eq!((d.fixes, d.reason, d.start), (5, DropReason::TooFewFixes, t0()));
}

#[test]
fn colliding_fixes_keep_the_latest() {
    let mut tr = track("n3", &(0..8).collect::<Vec<_>>());
    // 03:50 rounds to 04:00 and precedes the on-the-hour fix; 05:10 follows the 05:00 fix
    tr.fixes.insert(
        4,
        Fix {
            time: t0() + Duration::minutes(3 * 60 + 50),
            lat: 10.0,
            lon: 10.0,
            covariates: vec![-1.0],
        },
    );
    tr.fixes.insert(
        7,
        Fix {
            time: t0() + Duration::minutes(5 * 60 + 10),
            lat: 70.3,
            lon: -80.2,
            covariates: vec![-2.0],
        },
    );
    tr.validate().unwrap();
    let hourly = regularize_hourly(&tr);
    assert_eq!(hourly.hours.len(), 8);
    assert_eq!(hourly.hours[4].as_ref().unwrap().lat, 70.04);
    assert_eq!(hourly.hours[5].as_ref().unwrap().lat, 70.3);
    let (series, summary) = run(&[tr]);
    assert_eq!(summary.collisions, 2);
    assert_eq!(summary.fixes_in, 10);
    assert_eq!(summary.fixes_kept, 8);
    assert_eq!(series[0].records[5].covariates, Some(vec![-2.0]));
}

#[test]
fn sparse_pieces_are_split_at_their_longest_gap() {
    // 6 fixes, 11 missing, 6 fixes, 8 missing, 1 fix: missing fraction 19/32 ≥ 0.5
    let hours: Vec<i64> = (0..6).chain(17..23).chain([31]).collect();
    let (series, summary) = run(&[track("n4", &hours)]);
    assert_eq!(series.len(), 2);
    for s in &summary.segments {
        assert_eq!(s.fixes, 6);
        assert!(s.missing_fraction < 0.5);
    }
    assert_eq!(summary.dropped.len(), 1);
    assert_eq!(summary.dropped[0].fixes, 1);
}

#[test]
fn continuous_track_is_one_identical_segment() {
    let tr = track("n5", &(0..48).collect::<Vec<_>>());
    let hourly = regularize_hourly(&tr);
    let split = split_segments(&hourly, &SplitRules::default());
    assert_eq!(split.segments.len(), 1);
    assert_eq!(split.segments[0].hours, hourly.hours);
    assert_eq!(split.segments[0].start, hourly.start);
}

#[test]
fn all_short_tracks_give_empty_output() {
    let (series, summary) = run(&[track("a", &[0, 1, 2]), track("b", &[0, 5, 9, 11])]);
    assert!(series.is_empty());
    assert!(summary.segments.is_empty());
    assert_eq!(summary.dropped.len(), 2);
}

#[test]
fn straight_paths_have_zero_turning_angle() {
    let tr = RawTrack::new(
        "s",
        (0..3)
            .map(|h| Fix {
                time: t0() + Duration::hours(h),
                lat: 0.1 * h as f64,
                lon: 0.0,
                covariates: vec![],
            })
            .collect(),
    )
    .unwrap();
    let s = steps_and_angles(&regularize_hourly(&tr));
    assert!(s.records[0].angle_rad.is_none());
    assert!(s.records[1].angle_rad.unwrap().abs() < 1e-12);
    assert!(s.records[2].step_km.is_none());
}

#[test]
fn processed_files_round_trip_and_are_not_raw_input() {
    let hours: Vec<i64> = (0..10).chain([11, 12, 14]).collect();
    let text = {
        let mut s = String::from("id,timestamp,lat,lon,shore_km\n");
        for f in &track("z", &hours).fixes {
            s.push_str(&format!("z,{},{},{},{}\n", f.time.to_rfc3339(), f.lat, f.lon, f.covariates[0]));
        }
        s
    };
    let (cov, tracks) = read_tracks(text.as_bytes()).unwrap();
    assert_eq!(cov, vec!["shore_km".to_string()]);
    let (series, _) = preprocess(&tracks, &SplitRules::default()).unwrap();
    let mut buf = Vec::new();
    write_step_angle_csv(&mut buf, &series, &cov).unwrap();
    let (cov2, back) = read_step_angle_csv(buf.as_slice()).unwrap();
    assert_eq!(cov2, cov);
    assert_eq!(back, series);
    let obs = to_observation_set(&back, &cov2).unwrap();
    assert_eq!(obs.total_len(), 15);
    assert_eq!(obs.series[0].covariates.as_ref().unwrap()[13], vec![12.0]);
    match read_tracks(buf.as_slice()) {
        Err(Error::Parse { line: 1, message }) => assert!(message.contains("already a processed")),
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn malformed_rows_report_their_line() {
    let text = "id,timestamp,lat,lon\na,2017-08-10T00:00:00Z,70,-80\na,2017-08-10T01:00:00Z,95,-80\n";
    assert!(matches!(read_tracks(text.as_bytes()), Err(Error::Parse { line: 3, .. })));
    let text = "id,timestamp,lat,lon\na,2017-08-10T00:00:00Z,70,-80\na,yesterday,70,-80\n";
    assert!(matches!(read_tracks(text.as_bytes()), Err(Error::Parse { line: 3, .. })));
    let text = "id,time,lat,lon\n";
    assert!(matches!(read_tracks(text.as_bytes()), Err(Error::Parse { line: 1, .. })));
}

proptest! {
    #[test]
    fn haversine_is_a_metric(a in -89.0f64..89.0, b in -180.0f64..180.0, c in -89.0f64..89.0, d in -180.0f64..180.0, e in -89.0f64..89.0, f in -180.0f64..180.0) {
        let ab = haversine_km(a, b, c, d);
        prop_assert!((ab - haversine_km(c, d, a, b)).abs() < 1e-9);
        prop_assert!(ab >= 0.0);
        prop_assert!(ab <= haversine_km(a, b, e, f) + haversine_km(e, f, c, d) + 1e-9);
        prop_assert!(haversine_km(a, b, a, b).abs() < 1e-9);
    }

    #[test]
    fn pipeline_output_respects_the_rules(offsets in proptest::collection::btree_set(0i64..400, 0..120), jitter in proptest::collection::vec(-29i64..29, 120)) {
        let fixes: Vec<Fix> = offsets
            .iter()
            .zip(&jitter)
            .map(|(&h, &j)| Fix {
                time: t0() + Duration::minutes(60 * h + j),
                lat: 70.0 + 0.02 * ((h * 7) % 11) as f64,
                lon: -80.0 + 0.03 * ((h * 5) % 13) as f64,
                covariates: vec![],
            })
            .collect();
        let mut fixes = fixes;
        fixes.sort_by_key(|f| f.time);
        fixes.dedup_by_key(|f| f.time);
        let n_in = fixes.len();
        let tr = RawTrack::new("p", fixes).unwrap();
        let (series, summary) = preprocess(&[tr], &SplitRules::default()).unwrap();
        prop_assert_eq!(summary.fixes_in, n_in);
        prop_assert!(summary.fixes_kept <= n_in);
        let kept: usize = summary.segments.iter().map(|s| s.fixes).sum();
        let dropped: usize = summary.dropped.iter().map(|d| d.fixes).sum();
        prop_assert_eq!(kept, summary.fixes_kept);
        prop_assert_eq!(kept + dropped + summary.collisions, n_in);
        for s in &summary.segments {
            prop_assert!(s.fixes >= 6);
            prop_assert!(s.missing_fraction < 0.5);
        }
        for s in &series {
            for r in &s.records {
                if let Some(x) = r.step_km { prop_assert!(x >= 0.0); }
                if let Some(a) = r.angle_rad { prop_assert!(a > -PI && a <= PI); }
            }
        }
    }
}
