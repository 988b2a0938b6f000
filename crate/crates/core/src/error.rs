// Copyright 2026 fluxqa Contributors
// SPDX-License-Identifier: Apache-2.0

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("unknown axis label `{0}`")]
    UnknownAxis(String),

    /// Too few lattice features to calibrate from.
    #[error("calibration insufficient: {0}")]
    CalibrationInsufficient(String),

    /// Centers are fewer than three or all lie on one line.
    #[error("collinear or insufficient centers: {0}")]
    DegenerateCenters(String),

    #[error("ambiguous lattice basis: {0}")]
    AmbiguousBasis(String),

    #[error("fit did not converge: {0}")]
    FitDiverged(String),

    #[error("integrator step size underflow at s = {s:.6}")]
    StepUnderflow { s: f64 },

    #[error("could not generate an invertible control matrix after {attempts} attempts")]
    SingularDevice { attempts: usize },

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// True for failures of a numerical procedure (as opposed to bad input).
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::FitDiverged(_)
                | Error::StepUnderflow { .. }
                | Error::SingularDevice { .. }
                | Error::CalibrationInsufficient(_)
        )
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidParameter(msg.into())
    }
}
