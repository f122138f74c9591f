//! Toolkit for simulating transport-based single-qubit logic gates in a
//! segmented ion trap.
//!
//! An ion is shuttled through a stationary laser beam by moving the confining
//! potential well with electrode voltage waveforms; the ion experiences a
//! shaped Rabi pulse whose rotation angle is set by the transport velocity.
//! This crate models the full chain:
//!
//! * [`trap`]: axial electrode potentials, well finding and characterisation;
//! * [`waveform`]: constrained voltage-waveform synthesis, output filtering,
//!   realized-well tracking and classical ion dynamics;
//! * [`beam`]: Gaussian beam crossings, Rabi frequency and detuning models;
//! * [`qubit`]: two-level spin propagation through pulse sequences and the
//!   closed-form transit-Rabi model;
//! * [`measure`]: SPAM errors, projection-noise sampling and scan execution;
//! * [`fit`]: weighted Levenberg-Marquardt fitting with the scan fit models;
//! * [`calibrate`]: inverse problems: velocity solving, Doppler nulling,
//!   detuning fidelity budgets;
//! * [`scenario`]: declarative experiment descriptions (TOML) resolved into
//!   runnable sequences.
//!
//! All quantities are SI unless a name says otherwise (`depth_ev`,
//! `*_khz` in configs). Angular frequencies are rad/s throughout.

pub mod beam;
pub mod calibrate;
pub mod fit;
pub mod measure;
pub mod numeric;
pub mod qubit;
pub mod scenario;
pub mod trap;
pub mod waveform;

use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("{what} out of range: {value}")]
    OutOfRange { what: String, value: f64 },

    #[error("parse error in {path} at line {line}, column {column}: {message}")]
    Parse {
        path: String,
        line: usize,
        column: String,
        message: String,
    },

    #[error("waveform synthesis infeasible at timestep {timestep}: {message}")]
    Synthesis { timestep: usize, message: String },

    #[error("well tracking lost the minimum at timestep {timestep}")]
    Tracking { timestep: usize },

    #[error("ion escaped the basis grid at t = {time:.3e} s")]
    Escape { time: f64 },

    #[error("sequence element {element}: {message}")]
    Sequencing { element: usize, message: String },

    #[error("bracket [{lo}, {hi}] does not enclose the target (f(lo) = {f_lo:.6e}, f(hi) = {f_hi:.6e})")]
    Bracket { lo: f64, hi: f64, f_lo: f64, f_hi: f64 },

    #[error("normal matrix is rank deficient; unidentifiable parameters: {0:?}")]
    RankDeficient(Vec<String>),

    #[error("matrix is not unitary (deviation {deviation:.3e})")]
    NotUnitary { deviation: f64 },

    #[error("configuration error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
