// Copyright 2026 fluxqa Contributors
// SPDX-License-Identifier: Apache-2.0

//! Command-line workflows and the REST service of the fluxqa simulator.

pub mod cli;
pub mod error;
pub mod jobs;
pub mod server;

pub use error::{Result, ServiceError};
