//! Order selection for hidden Markov models by double-penalized maximum
//! likelihood, with information-criterion baselines, scenario simulators and
//! movement-track preprocessing.

pub mod benchmark;
pub mod data;
pub mod em;
pub mod emission;
pub mod error;
pub mod hmm;
pub mod io;
pub mod matrix;
pub mod movement;
pub mod optim;
pub mod scad;
pub mod selection;
pub mod sim;
pub mod special;
pub mod transition;

pub use data::{Channel, ChannelKind, ObservationSet, Series};
pub use emission::{ChannelParams, EmissionParams, Family, StateEmission};
pub use error::{Error, Result};
pub use hmm::{forward_backward, log_likelihood, occupancy_estimate, viterbi, FbResult};
pub use matrix::SquareMatrix;
pub use scad::{scad_derivative, scad_value, PenaltyConfig};
pub use transition::{stationary_distribution, transition_matrix_at, LogitCoefficients, ParameterVector, TransitionModel};

use std::f64::consts::PI;

/// Wraps an angle onto (−π, π].
pub fn wrap_angle(x: f64) -> f64 {
    let two_pi = 2.0 * PI;
    let w = x - two_pi * ((x - PI) / two_pi).ceil();
    if w <= -PI {
        w + two_pi
    } else {
        w
    }
}
