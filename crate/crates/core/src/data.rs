//! Multi-individual observation time series.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// What a channel measures; determines the admissible value range.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChannelKind {
    /// Non-negative quantity such as a step length in km.
    Step,
    /// Angle in radians on (-π, π].
    Angle,
    /// Unrestricted real value.
    Real,
}

impl ChannelKind {
    pub(crate) fn admits(self, value: f64) -> bool {
        match self {
            ChannelKind::Step => value.is_finite() && value >= 0.0,
            ChannelKind::Angle => value.is_finite() && value > -PI && value <= PI,
            ChannelKind::Real => value.is_finite(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Channel {
    pub name: String,
    pub kind: ChannelKind,
}

/// One individual's series. `values[t][c]` is channel `c` at time `t`;
/// `None` marks a missing value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Series {
    pub id: String,
    pub values: Vec<Vec<Option<f64>>>,
    /// Row `t` holds the covariate vector at time `t`.
    pub covariates: Option<Vec<Vec<f64>>>,
}

impl Series {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn covariate_row(&self, t: usize) -> Option<&[f64]> {
        self.covariates.as_ref().map(|c| c[t].as_slice())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservationSet {
    pub channels: Vec<Channel>,
    pub covariate_names: Vec<String>,
    pub series: Vec<Series>,
}

impl ObservationSet {
    pub fn new(
        channels: Vec<Channel>,
        covariate_names: Vec<String>,
        series: Vec<Series>,
    ) -> Result<Self> {
        let set = Self {
            channels,
            covariate_names,
            series,
        };
        set.validate()?;
        Ok(set)
    }

    /// Single real-valued channel, one series, no covariates.
    pub fn univariate(kind: ChannelKind, values: &[f64]) -> Result<Self> {
        Self::new(
            vec![Channel {
                name: "y".into(),
                kind,
            }],
            Vec::new(),
            vec![Series {
                id: "1".into(),
                values: values.iter().map(|&v| vec![Some(v)]).collect(),
                covariates: None,
            }],
        )
    }

    pub fn validate(&self) -> Result<()> {
        if self.series.is_empty() {
            return Err(Error::InvalidData("observation set has no series".into()));
        }
        let nc = self.channels.len();
        if nc == 0 {
            return Err(Error::InvalidData("observation set has no channels".into()));
        }
        let ncov = self.covariate_names.len();
        for (m, s) in self.series.iter().enumerate() {
            if s.values.is_empty() {
                return Err(Error::InvalidData(format!("series {m} is empty")));
            }
            for (t, row) in s.values.iter().enumerate() {
                if row.len() != nc {
                    return Err(Error::Dimension(format!(
                        "series {m}, t = {t}: {} channels, expected {nc}",
                        row.len()
                    )));
                }
                for (c, v) in row.iter().enumerate() {
                    if let Some(v) = v {
                        if !self.channels[c].kind.admits(*v) {
                            return Err(Error::InvalidData(format!(
                                "series {m}, t = {t}: value {v} outside range of channel '{}'",
                                self.channels[c].name
                            )));
                        }
                    }
                }
            }
            match &s.covariates {
                Some(cov) => {
                    if cov.len() != s.len() {
                        return Err(Error::Dimension(format!(
                            "series {m}: {} covariate rows for {} time points",
                            cov.len(),
                            s.len()
                        )));
                    }
                    if cov.iter().any(|r| r.len() != ncov) {
                        return Err(Error::Dimension(format!(
                            "series {m}: covariate rows must have {ncov} entries"
                        )));
                    }
                    if cov.iter().flatten().any(|v| !v.is_finite()) {
                        return Err(Error::Numeric(format!("series {m}: non-finite covariate")));
                    }
                }
                None if ncov > 0 => {
                    return Err(Error::Dimension(format!(
                        "series {m} lacks the declared covariates"
                    )));
                }
                None => {}
            }
        }
        Ok(())
    }

    pub fn num_channels(&self) -> usize {
        self.channels.len()
    }

    pub fn num_covariates(&self) -> usize {
        self.covariate_names.len()
    }

    pub fn has_covariates(&self) -> bool {
        !self.covariate_names.is_empty()
    }

    /// Total number of time points over all series.
    pub fn total_len(&self) -> usize {
        self.series.iter().map(Series::len).sum()
    }

    /// Observed (non-missing) values of one channel, pooled over series.
    pub fn channel_values(&self, channel: usize) -> Vec<f64> {
        self.series
            .iter()
            .flat_map(|s| s.values.iter().filter_map(move |row| row[channel]))
            .collect()
    }

    /// Copy without covariates, for fitting homogeneous models.
    pub fn without_covariates(&self) -> Self {
        Self {
            channels: self.channels.clone(),
            covariate_names: Vec::new(),
            series: self
                .series
                .iter()
                .map(|s| Series {
                    id: s.id.clone(),
                    values: s.values.clone(),
                    covariates: None,
                })
                .collect(),
        }
    }

    /// Copy keeping only the named covariates, in the given order.
    pub fn select_covariates(&self, names: &[String]) -> Result<Self> {
        let idx = names
            .iter()
            .map(|n| {
                self.covariate_names
                    .iter()
                    .position(|c| c == n)
                    .ok_or_else(|| Error::Config(format!("no covariate named '{n}'")))
            })
            .collect::<Result<Vec<_>>>()?;
        if names.is_empty() {
            return Ok(self.without_covariates());
        }
        Ok(Self {
            channels: self.channels.clone(),
            covariate_names: names.to_vec(),
            series: self
                .series
                .iter()
                .map(|s| Series {
                    id: s.id.clone(),
                    values: s.values.clone(),
                    covariates: s
                        .covariates
                        .as_ref()
                        .map(|c| c.iter().map(|row| idx.iter().map(|&i| row[i]).collect()).collect()),
                })
                .collect(),
        })
    }
}
