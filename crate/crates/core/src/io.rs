//! Observation CSV: `series_id,t,<channel...>,cov_<name>...`.
//!
//! `t` runs 1..T within each series and rows of a series are contiguous.
//! Empty channel cells are missing values. Channel kinds follow the column
//! name: `step*` is a step length, `angle*` an angle, anything else real.

use std::io::{Read, Write};

use crate::data::{Channel, ChannelKind, ObservationSet, Series};
use crate::error::{Error, Result};

pub const COVARIATE_PREFIX: &str = "cov_";

pub fn channel_kind_for(name: &str) -> ChannelKind {
    if name.starts_with("step") {
        ChannelKind::Step
    } else if name.starts_with("angle") {
        ChannelKind::Angle
    } else {
        ChannelKind::Real
    }
}

pub fn write_observations<W: Write>(writer: W, obs: &ObservationSet) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec!["series_id".to_string(), "t".to_string()];
    header.extend(obs.channels.iter().map(|c| c.name.clone()));
    header.extend(obs.covariate_names.iter().map(|c| format!("{COVARIATE_PREFIX}{c}")));
    w.write_record(&header)?;
    for s in &obs.series {
        for (t, row) in s.values.iter().enumerate() {
            let mut rec = vec![s.id.clone(), (t + 1).to_string()];
            rec.extend(row.iter().map(|v| v.map(|x| format!("{x}")).unwrap_or_default()));
            if let Some(c) = s.covariate_row(t) {
                rec.extend(c.iter().map(|x| format!("{x}")));
            }
            w.write_record(&rec)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_observations<R: Read>(reader: R) -> Result<ObservationSet> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    if header.len() < 3 || header[0] != "series_id" || header[1] != "t" {
        return Err(Error::Parse {
            line: 1,
            message: format!("expected header series_id,t,<channel...>[,cov_...], found {}", header.join(",")),
        });
    }
    let first_cov = header
        .iter()
        .position(|h| h.starts_with(COVARIATE_PREFIX))
        .unwrap_or(header.len());
    if first_cov == 2 {
        return Err(Error::Parse {
            line: 1,
            message: "no channel columns".into(),
        });
    }
    if header[first_cov..].iter().any(|h| !h.starts_with(COVARIATE_PREFIX)) {
        return Err(Error::Parse {
            line: 1,
            message: "covariate columns must come after all channel columns".into(),
        });
    }
    let channels: Vec<Channel> = header[2..first_cov]
        .iter()
        .map(|n| Channel {
            name: n.clone(),
            kind: channel_kind_for(n),
        })
        .collect();
    let cov_names: Vec<String> = header[first_cov..]
        .iter()
        .map(|h| h[COVARIATE_PREFIX.len()..].to_string())
        .collect();
    let mut series: Vec<Series> = Vec::new();
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
        let parse = |i: usize| {
            rec[i].parse::<f64>().map_err(|_| Error::Parse {
                line,
                message: format!("column '{}': '{}' is not a number", header[i], &rec[i]),
            })
        };
        let id = &rec[0];
        let t: usize = rec[1].parse().map_err(|_| Error::Parse {
            line,
            message: format!("'{}' is not a positive integer time index", &rec[1]),
        })?;
        let mut values = Vec::with_capacity(channels.len());
        for (c, ch) in channels.iter().enumerate() {
            let i = c + 2;
            if rec[i].is_empty() {
                values.push(None);
                continue;
            }
            let v = parse(i)?;
            if !ch.kind.admits(v) {
                return Err(Error::Parse {
                    line,
                    message: format!("value {v} outside the range of channel '{}'", ch.name),
                });
            }
            values.push(Some(v));
        }
        let cov = (first_cov..header.len()).map(parse).collect::<Result<Vec<_>>>()?;
        if cov.iter().any(|x| !x.is_finite()) {
            return Err(Error::Parse {
                line,
                message: "non-finite covariate".into(),
            });
        }
        let new_series = series.last().is_none_or(|s| s.id != id);
        if new_series {
            if series.iter().any(|s| s.id == id) {
                return Err(Error::Parse {
                    line,
                    message: format!("rows of series '{id}' are not contiguous"),
                });
            }
            series.push(Series {
                id: id.to_string(),
                values: Vec::new(),
                covariates: (!cov_names.is_empty()).then(Vec::new),
            });
        }
        let s = series.last_mut().expect("series pushed above");
        if t != s.values.len() + 1 {
            return Err(Error::Parse {
                line,
                message: format!("series '{id}': expected t = {}, found {t}", s.values.len() + 1),
            });
        }
        s.values.push(values);
        if let Some(c) = s.covariates.as_mut() {
            c.push(cov);
        }
    }
    if series.is_empty() {
        return Err(Error::Parse {
            line: 1,
            message: "no data rows".into(),
        });
    }
    ObservationSet::new(channels, cov_names, series)
}
