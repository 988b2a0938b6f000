// Copyright 2026 fluxqa Contributors
// SPDX-License-Identifier: Apache-2.0

fn main() {
    std::process::exit(fluxqa::cli::run(std::env::args_os()));
}
