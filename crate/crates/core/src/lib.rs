// Copyright 2026 fluxqa Contributors
// SPDX-License-Identifier: Apache-2.0

//! Simulator and calibration toolkit for a small coherent flux-qubit
//! annealing testbed.
//!
//! * [`device`]: simulated hardware with hidden crosstalk, offsets and noise.
//! * [`xtalk`]: 2D flux scans, lattice detection and affine crosstalk correction.
//! * [`characterization`]: T1 and Ramsey traces and their fits.
//! * [`readout`]: dispersive single-shot readout and threshold discrimination.
//! * [`anneal`]: transverse-field Ising dynamics, closed and open system.

pub mod anneal;
pub mod characterization;
pub mod device;
pub mod error;
pub mod ode;
pub mod readout;
pub mod textio;
pub mod xtalk;

pub use error::{Error, Result};
