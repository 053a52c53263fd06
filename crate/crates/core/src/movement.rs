//! Track preprocessing: hourly regularization, gap splitting and
//! step-length/turning-angle derivation.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::io::{Read, Write};

use chrono::{DateTime, NaiveDateTime, SecondsFormat, TimeZone, Utc};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Channel, ChannelKind, ObservationSet, Series};
use crate::error::{Error, Result};
use crate::wrap_angle;

/// Mean Earth radius in km.
pub const EARTH_RADIUS_KM: f64 = 6371.0088;

const HOUR: i64 = 3600;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Fix {
    pub time: DateTime<Utc>,
    pub lat: f64,
    pub lon: f64,
    pub covariates: Vec<f64>,
}

/// One animal's fixes in strictly increasing time order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawTrack {
    pub id: String,
    pub fixes: Vec<Fix>,
}

impl RawTrack {
    pub fn new(id: impl Into<String>, fixes: Vec<Fix>) -> Result<Self> {
        let t = Self { id: id.into(), fixes };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<()> {
        for (k, f) in self.fixes.iter().enumerate() {
            if !(f.lat.abs() <= 90.0) || !(f.lon.abs() <= 180.0) {
                return Err(Error::InvalidData(format!(
                    "track '{}': fix {k} has invalid position ({}, {})",
                    self.id, f.lat, f.lon
                )));
            }
            if f.covariates.iter().any(|c| !c.is_finite()) {
                return Err(Error::InvalidData(format!("track '{}': fix {k} has a non-finite covariate", self.id)));
            }
            if k > 0 && f.time <= self.fixes[k - 1].time {
                return Err(Error::InvalidData(format!(
                    "track '{}': timestamps not strictly increasing at fix {k}",
                    self.id
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HourFix {
    pub lat: f64,
    pub lon: f64,
    pub covariates: Vec<f64>,
}

/// Fixes on a regular hourly grid starting at `start`; `None` marks an hour
/// without a fix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HourlyTrack {
    pub id: String,
    pub start: DateTime<Utc>,
    pub hours: Vec<Option<HourFix>>,
}

impl HourlyTrack {
    pub fn num_fixes(&self) -> usize {
        self.hours.iter().filter(|h| h.is_some()).count()
    }

    pub fn missing_fraction(&self) -> f64 {
        if self.hours.is_empty() {
            return 0.0;
        }
        1.0 - self.num_fixes() as f64 / self.hours.len() as f64
    }

    pub fn hour(&self, k: usize) -> DateTime<Utc> {
        self.start + chrono::Duration::hours(k as i64)
    }

    fn slice(&self, lo: usize, hi: usize) -> Self {
        Self {
            id: self.id.clone(),
            start: self.hour(lo),
            hours: self.hours[lo..hi].to_vec(),
        }
    }
}

/// Snaps each fix to the nearest hour, half-hours rounding up. When several
/// fixes land on the same hour the one with the latest timestamp is kept.
pub fn regularize_hourly(track: &RawTrack) -> HourlyTrack {
    let mut slots: BTreeMap<i64, &Fix> = BTreeMap::new();
    for f in &track.fixes {
        let slot = (f.time.timestamp() + HOUR / 2).div_euclid(HOUR);
        match slots.get(&slot) {
            Some(prev) if prev.time > f.time => {}
            _ => {
                slots.insert(slot, f);
            }
        }
    }
    let (Some((&first, _)), Some((&last, _))) = (slots.first_key_value(), slots.last_key_value()) else {
        return HourlyTrack {
            id: track.id.clone(),
            start: DateTime::<Utc>::UNIX_EPOCH,
            hours: Vec::new(),
        };
    };
    let mut hours = vec![None; (last - first + 1) as usize];
    for (&slot, f) in &slots {
        hours[(slot - first) as usize] = Some(HourFix {
            lat: f.lat,
            lon: f.lon,
            covariates: f.covariates.clone(),
        });
    }
    HourlyTrack {
        id: track.id.clone(),
        start: Utc.timestamp_opt(first * HOUR, 0).single().unwrap_or(DateTime::<Utc>::UNIX_EPOCH),
        hours,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitRules {
    /// A run of more than this many missing hours ends a segment.
    pub gap_hours: usize,
    /// Segments with fewer fixes are dropped.
    pub min_fixes: usize,
    /// Segments must have a missing fraction strictly below this.
    pub max_missing_frac: f64,
}

impl Default for SplitRules {
    fn default() -> Self {
        Self {
            gap_hours: 12,
            min_fixes: 6,
            max_missing_frac: 0.5,
        }
    }
}

impl SplitRules {
    pub fn validate(&self) -> Result<()> {
        if self.min_fixes == 0 || !(self.max_missing_frac > 0.0 && self.max_missing_frac <= 1.0) {
            return Err(Error::Config(format!("invalid split rules {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DropReason {
    TooFewFixes,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DroppedPiece {
    pub track: String,
    pub start: DateTime<Utc>,
    pub hours: usize,
    pub fixes: usize,
    pub reason: DropReason,
}

/// Kept segments and the pieces that were discarded.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Split {
    pub segments: Vec<HourlyTrack>,
    pub dropped: Vec<DroppedPiece>,
}

/// Splits at runs of more than `gap_hours` missing hours, then splits any
/// piece whose missing fraction is too high at its longest internal gap
/// until every piece passes or is too short. Kept segments are trimmed to
/// start and end on a fix and are named `<track>-<k>`.
pub fn split_segments(track: &HourlyTrack, rules: &SplitRules) -> Split {
    let mut pieces = Vec::new();
    let mut lo: Option<usize> = None;
    let mut last_fix = 0;
    for (k, h) in track.hours.iter().enumerate() {
        if h.is_none() {
            continue;
        }
        match lo {
            None => lo = Some(k),
            Some(l) if k - last_fix - 1 > rules.gap_hours => {
                pieces.push((l, last_fix + 1));
                lo = Some(k);
            }
            Some(_) => {}
        }
        last_fix = k;
    }
    if let Some(l) = lo {
        pieces.push((l, last_fix + 1));
    }
    let mut out = Split {
        segments: Vec::new(),
        dropped: Vec::new(),
    };
    for (l, h) in pieces {
        refine(track, l, h, rules, &mut out);
    }
    for (k, s) in out.segments.iter_mut().enumerate() {
        s.id = format!("{}-{}", track.id, k + 1);
    }
    out
}

fn refine(track: &HourlyTrack, lo: usize, hi: usize, rules: &SplitRules, out: &mut Split) {
    let piece = track.slice(lo, hi);
    let fixes = piece.num_fixes();
    if fixes < rules.min_fixes {
        out.dropped.push(DroppedPiece {
            track: track.id.clone(),
            start: piece.start,
            hours: piece.hours.len(),
            fixes,
            reason: DropReason::TooFewFixes,
        });
        return;
    }
    if piece.missing_fraction() < rules.max_missing_frac {
        out.segments.push(piece);
        return;
    }
    // longest run of missing hours; the earliest wins ties
    let (mut best, mut best_len) = (0, 0);
    let mut k = lo;
    while k < hi {
        if track.hours[k].is_none() {
            let s = k;
            while k < hi && track.hours[k].is_none() {
                k += 1;
            }
            if k - s > best_len {
                best = s;
                best_len = k - s;
            }
        } else {
            k += 1;
        }
    }
    refine(track, lo, best, rules, out);
    refine(track, best + best_len, hi, rules, out);
}

/// Great-circle distance in km.
pub fn haversine_km(lat1: f64, lon1: f64, lat2: f64, lon2: f64) -> f64 {
    let (p1, p2) = (lat1.to_radians(), lat2.to_radians());
    let dp = p2 - p1;
    let dl = (lon2 - lon1).to_radians();
    let a = (dp / 2.0).sin().powi(2) + p1.cos() * p2.cos() * (dl / 2.0).sin().powi(2);
    2.0 * EARTH_RADIUS_KM * a.clamp(0.0, 1.0).sqrt().asin()
}

/// Initial great-circle bearing in radians, clockwise from north.
pub fn initial_bearing(lat1: f64, lon1: f64, lat2: f64, lon2: f64) -> f64 {
    let (p1, p2) = (lat1.to_radians(), lat2.to_radians());
    let dl = (lon2 - lon1).to_radians();
    let y = dl.sin() * p2.cos();
    let x = p1.cos() * p2.sin() - p1.sin() * p2.cos() * dl.cos();
    y.atan2(x)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub hour: DateTime<Utc>,
    /// Distance to the next hour's fix.
    pub step_km: Option<f64>,
    /// Change of heading at this hour's fix.
    pub angle_rad: Option<f64>,
    /// Covariates of this hour's fix; `None` when the hour has no fix.
    pub covariates: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepAngleSeries {
    pub segment_id: String,
    pub records: Vec<StepRecord>,
}

/// Row t holds the step from hour t to t+1 and the turning angle at hour t.
/// A step needs both fixes; an angle needs both adjacent steps to exist and
/// be positive.
pub fn steps_and_angles(segment: &HourlyTrack) -> StepAngleSeries {
    let h = &segment.hours;
    let len = h.len();
    let step: Vec<Option<f64>> = (0..len)
        .map(|t| match (h.get(t).and_then(Option::as_ref), h.get(t + 1).and_then(Option::as_ref)) {
            (Some(a), Some(b)) => Some(haversine_km(a.lat, a.lon, b.lat, b.lon)),
            _ => None,
        })
        .collect();
    let bearing = |t: usize| {
        let (a, b) = (h[t].as_ref()?, h[t + 1].as_ref()?);
        Some(initial_bearing(a.lat, a.lon, b.lat, b.lon))
    };
    let records = (0..len)
        .map(|t| {
            let angle = if t == 0 || t + 1 >= len {
                None
            } else {
                match (step[t - 1], step[t]) {
                    (Some(s0), Some(s1)) if s0 > 0.0 && s1 > 0.0 => {
                        bearing(t - 1).zip(bearing(t)).map(|(b0, b1)| wrap_angle(b1 - b0))
                    }
                    _ => None,
                }
            };
            StepRecord {
                hour: segment.hour(t),
                step_km: step[t],
                angle_rad: angle,
                covariates: h[t].as_ref().map(|f| f.covariates.clone()),
            }
        })
        .collect();
    StepAngleSeries {
        segment_id: segment.id.clone(),
        records,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentSummary {
    pub id: String,
    pub track: String,
    pub start: DateTime<Utc>,
    pub hours: usize,
    pub fixes: usize,
    pub missing_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreprocessSummary {
    pub tracks: usize,
    pub fixes_in: usize,
    /// Fixes discarded because a later fix rounded to the same hour.
    pub collisions: usize,
    pub fixes_kept: usize,
    pub segments: Vec<SegmentSummary>,
    pub dropped: Vec<DroppedPiece>,
}

/// Regularizes, splits and converts every track; tracks are processed in
/// parallel and results keep the input order.
pub fn preprocess(tracks: &[RawTrack], rules: &SplitRules) -> Result<(Vec<StepAngleSeries>, PreprocessSummary)> {
    rules.validate()?;
    for t in tracks {
        t.validate()?;
    }
    let per_track: Vec<(usize, Split)> = tracks
        .par_iter()
        .map(|t| {
            let hourly = regularize_hourly(t);
            let collisions = t.fixes.len() - hourly.num_fixes();
            (collisions, split_segments(&hourly, rules))
        })
        .collect();
    let mut summary = PreprocessSummary {
        tracks: tracks.len(),
        fixes_in: tracks.iter().map(|t| t.fixes.len()).sum(),
        collisions: 0,
        fixes_kept: 0,
        segments: Vec::new(),
        dropped: Vec::new(),
    };
    let mut out = Vec::new();
    for (track, (collisions, split)) in tracks.iter().zip(per_track) {
        summary.collisions += collisions;
        for s in &split.segments {
            summary.fixes_kept += s.num_fixes();
            summary.segments.push(SegmentSummary {
                id: s.id.clone(),
                track: track.id.clone(),
                start: s.start,
                hours: s.hours.len(),
                fixes: s.num_fixes(),
                missing_fraction: s.missing_fraction(),
            });
            out.push(steps_and_angles(s));
        }
        summary.dropped.extend(split.dropped);
    }
    Ok((out, summary))
}

/// Two-channel (step, angle) observation set. Covariates of hours without a
/// fix carry the previous value forward; leading gaps take the first value.
pub fn to_observation_set(series: &[StepAngleSeries], covariate_names: &[String]) -> Result<ObservationSet> {
    let ncov = covariate_names.len();
    let mut out = Vec::with_capacity(series.len());
    for s in series {
        let values = s.records.iter().map(|r| vec![r.step_km, r.angle_rad]).collect();
        let covariates = if ncov == 0 {
            None
        } else {
            let first = s
                .records
                .iter()
                .find_map(|r| r.covariates.clone())
                .ok_or_else(|| Error::InvalidData(format!("segment '{}' has no covariate values", s.segment_id)))?;
            if first.len() != ncov {
                return Err(Error::Dimension(format!(
                    "segment '{}' has {} covariates, expected {ncov}",
                    s.segment_id,
                    first.len()
                )));
            }
            let mut cur = first;
            let mut rows = Vec::with_capacity(s.records.len());
            for r in &s.records {
                if let Some(c) = &r.covariates {
                    cur = c.clone();
                }
                rows.push(cur.clone());
            }
            Some(rows)
        };
        out.push(Series {
            id: s.segment_id.clone(),
            values,
            covariates,
        });
    }
    ObservationSet::new(
        vec![
            Channel {
                name: "step".into(),
                kind: ChannelKind::Step,
            },
            Channel {
                name: "angle".into(),
                kind: ChannelKind::Angle,
            },
        ],
        covariate_names.to_vec(),
        out,
    )
}

fn parse_time(s: &str) -> Option<DateTime<Utc>> {
    if let Ok(t) = DateTime::parse_from_rfc3339(s) {
        return Some(t.with_timezone(&Utc));
    }
    ["%Y-%m-%dT%H:%M:%S", "%Y-%m-%d %H:%M:%S", "%Y-%m-%dT%H:%M", "%Y-%m-%d %H:%M"]
        .iter()
        .find_map(|f| NaiveDateTime::parse_from_str(s, f).ok())
        .map(|t| t.and_utc())
}

const PROCESSED_HEADER: [&str; 4] = ["segment_id", "hour", "step_km", "angle_rad"];

/// Reads `id,timestamp,lat,lon[,covariate...]`. Rows of a track need not be
/// sorted; tracks keep the order of first appearance.
pub fn read_tracks<R: Read>(reader: R) -> Result<(Vec<String>, Vec<RawTrack>)> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    if header.len() >= 4 && header[..4].iter().zip(PROCESSED_HEADER).all(|(a, b)| a == b) {
        return Err(Error::Parse {
            line: 1,
            message: "input is already a processed step/angle file; expected columns id,timestamp,lat,lon".into(),
        });
    }
    if header.len() < 4 || header[..4] != ["id", "timestamp", "lat", "lon"] {
        return Err(Error::Parse {
            line: 1,
            message: format!("expected header id,timestamp,lat,lon[,covariate...], found {}", header.join(",")),
        });
    }
    let cov_names = header[4..].to_vec();
    let mut order: Vec<String> = Vec::new();
    let mut by_id: BTreeMap<String, Vec<(usize, Fix)>> = BTreeMap::new();
    for (k, rec) in rdr.records().enumerate() {
        let line = k + 2;
        let rec = rec.map_err(|e| Error::Parse {
            line,
            message: e.to_string(),
        })?;
        if rec.len() != header.len() {
            return Err(Error::Parse {
                line,
                message: format!("{} fields, expected {}", rec.len(), header.len()),
            });
        }
        let num = |i: usize| {
            rec[i].parse::<f64>().map_err(|_| Error::Parse {
                line,
                message: format!("column '{}': '{}' is not a number", header[i], &rec[i]),
            })
        };
        let time = parse_time(&rec[1]).ok_or_else(|| Error::Parse {
            line,
            message: format!("'{}' is not an ISO-8601 timestamp", &rec[1]),
        })?;
        let (lat, lon) = (num(2)?, num(3)?);
        if !(lat.abs() <= 90.0) || !(lon.abs() <= 180.0) {
            return Err(Error::Parse {
                line,
                message: format!("position ({lat}, {lon}) out of range"),
            });
        }
        let covariates = (4..header.len()).map(num).collect::<Result<Vec<_>>>()?;
        let id = rec[0].to_string();
        if !by_id.contains_key(&id) {
            order.push(id.clone());
        }
        by_id.entry(id).or_default().push((
            line,
            Fix {
                time,
                lat,
                lon,
                covariates,
            },
        ));
    }
    let mut tracks = Vec::with_capacity(order.len());
    for id in order {
        let mut fixes = by_id.remove(&id).unwrap_or_default();
        fixes.sort_by_key(|(_, f)| f.time);
        if let Some(w) = fixes.windows(2).find(|w| w[0].1.time == w[1].1.time) {
            return Err(Error::Parse {
                line: w[1].0,
                message: format!("duplicate timestamp {} for id '{id}'", w[1].1.time.to_rfc3339()),
            });
        }
        tracks.push(RawTrack::new(id, fixes.into_iter().map(|(_, f)| f).collect())?);
    }
    Ok((cov_names, tracks))
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map(|v| format!("{v}")).unwrap_or_default()
}

/// Writes `segment_id,hour,step_km,angle_rad[,covariate...]`, leaving
/// missing values empty.
pub fn write_step_angle_csv<W: Write>(writer: W, series: &[StepAngleSeries], covariate_names: &[String]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header: Vec<String> = PROCESSED_HEADER.iter().map(|s| s.to_string()).collect();
    header.extend(covariate_names.iter().cloned());
    w.write_record(&header)?;
    for s in series {
        for r in &s.records {
            let mut row = vec![
                s.segment_id.clone(),
                r.hour.to_rfc3339_opts(SecondsFormat::Secs, true),
                fmt_opt(r.step_km),
                fmt_opt(r.angle_rad),
            ];
            for c in 0..covariate_names.len() {
                row.push(fmt_opt(r.covariates.as_ref().and_then(|v| v.get(c).copied())));
            }
            w.write_record(&row)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads a file written by [`write_step_angle_csv`].
pub fn read_step_angle_csv<R: Read>(reader: R) -> Result<(Vec<String>, Vec<StepAngleSeries>)> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    if header.len() < 4 || header[..4].iter().zip(PROCESSED_HEADER).any(|(a, b)| a != b) {
        return Err(Error::Parse {
            line: 1,
            message: format!(
                "expected header segment_id,hour,step_km,angle_rad[,covariate...], found {}",
                header.join(",")
            ),
        });
    }
    let cov_names = header[4..].to_vec();
    let mut out: Vec<StepAngleSeries> = Vec::new();
    for (k, rec) in rdr.records().enumerate() {
        let line = k + 2;
        let rec = rec.map_err(|e| Error::Parse {
            line,
            message: e.to_string(),
        })?;
        let opt = |i: usize| -> Result<Option<f64>> {
            if rec[i].is_empty() {
                return Ok(None);
            }
            rec[i].parse::<f64>().map(Some).map_err(|_| Error::Parse {
                line,
                message: format!("column '{}': '{}' is not a number", header[i], &rec[i]),
            })
        };
        let hour = parse_time(&rec[1]).ok_or_else(|| Error::Parse {
            line,
            message: format!("'{}' is not an ISO-8601 timestamp", &rec[1]),
        })?;
        let step_km = opt(2)?;
        let angle_rad = opt(3)?;
        if step_km.is_some_and(|s| s < 0.0) || angle_rad.is_some_and(|a| !(a > -PI && a <= PI)) {
            return Err(Error::Parse {
                line,
                message: "step must be non-negative and angle in (-pi, pi]".into(),
            });
        }
        let covs = (4..header.len()).map(opt).collect::<Result<Vec<_>>>()?;
        let covariates = if covs.iter().all(Option::is_some) && !covs.is_empty() {
            Some(covs.into_iter().flatten().collect())
        } else if covs.is_empty() {
            Some(Vec::new())
        } else {
            None
        };
        let rec_out = StepRecord {
            hour,
            step_km,
            angle_rad,
            covariates,
        };
        match out.last_mut() {
            Some(s) if s.segment_id == rec[0] => s.records.push(rec_out),
            _ => out.push(StepAngleSeries {
                segment_id: rec[0].to_string(),
                records: vec![rec_out],
            }),
        }
    }
    Ok((cov_names, out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn at(h: u32, m: u32) -> DateTime<Utc> {
        Utc.with_ymd_and_hms(2017, 8, 1, h, m, 0).unwrap()
    }

    fn fix(t: DateTime<Utc>, lat: f64) -> Fix {
        Fix {
            time: t,
            lat,
            lon: -80.0,
            covariates: vec![],
        }
    }

    #[test]
    fn collisions_keep_the_latest_fix() {
        let tr = RawTrack::new("a", vec![fix(at(10, 58), 70.0), fix(at(11, 2), 71.0)]).unwrap();
        let h = regularize_hourly(&tr);
        assert_eq!(h.hours.len(), 1);
        assert_eq!(h.start, at(11, 0));
        assert_eq!(h.hours[0].as_ref().unwrap().lat, 71.0);
    }

    #[test]
    fn half_hours_round_up() {
        let tr = RawTrack::new("a", vec![fix(at(9, 30), 70.0)]).unwrap();
        assert_eq!(regularize_hourly(&tr).start, at(10, 0));
    }

    #[test]
    fn one_degree_of_latitude() {
        assert_relative_eq!(haversine_km(0.0, 0.0, 1.0, 0.0), EARTH_RADIUS_KM * PI / 180.0, epsilon = 1e-9);
        assert!((haversine_km(70.0, -80.0, 71.0, -80.0) - 111.195).abs() < 1e-3);
    }

    #[test]
    fn retrace_gives_plus_pi() {
        let seg = HourlyTrack {
            id: "s".into(),
            start: at(0, 0),
            hours: [70.0, 70.1, 70.0]
                .iter()
                .map(|&lat| {
                    Some(HourFix {
                        lat,
                        lon: -80.0,
                        covariates: vec![],
                    })
                })
                .collect(),
        };
        let s = steps_and_angles(&seg);
        assert_eq!(s.records[0].angle_rad, None);
        assert_eq!(s.records[1].angle_rad, Some(PI));
        assert_eq!(s.records[2].step_km, None);
    }
}
