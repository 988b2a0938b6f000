// Copyright 2026 fluxqa Contributors
// SPDX-License-Identifier: Apache-2.0

use fluxqa_core::characterization::*;

const T1_NS: f64 = 3500.0;
const T2_NS: f64 = 130.0;
const DETUNING_MHZ: f64 = 5.0;

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

#[test]
fn trace_reference_values() {
    let t1 = simulate_t1_trace(T1_NS, &[0.0, T1_NS, 7000.0], 0.0, 0).unwrap();
    assert_eq!(t1.populations[0], 1.0);
    assert!((t1.populations[1] - (-1f64).exp()).abs() < 1e-15);
    assert!((t1.populations[2] - 0.1353).abs() < 1e-4);

    let r = simulate_ramsey_trace(T2_NS, DETUNING_MHZ, &[0.0, 100.0], 0.0, 0).unwrap();
    assert_eq!(r.populations[0], 1.0);
    assert!((r.populations[1] - 0.2683).abs() < 1e-4, "{}", r.populations[1]);
    assert!(simulate_t1_trace(T1_NS, &[], 0.0, 0).is_err());
    assert!(simulate_ramsey_trace(T2_NS, DETUNING_MHZ, &[], 0.0, 0).is_err());
}

#[test]
fn noiseless_fits_recover_figure_values() {
    let t1 = simulate_t1_trace(T1_NS, &default_t1_delays(T1_NS), 0.0, 0).unwrap();
    let f = fit_decay(&t1).unwrap();
    assert!((f.time_constant_ns / T1_NS - 1.0).abs() < 1e-6);

    let r = simulate_ramsey_trace(T2_NS, DETUNING_MHZ, &default_ramsey_delays(T2_NS, DETUNING_MHZ), 0.0, 0).unwrap();
    let f = fit_decay(&r).unwrap();
    assert!((f.time_constant_ns / T2_NS - 1.0).abs() < 1e-6);
    assert!((f.ramsey_detuning_mhz.unwrap() / DETUNING_MHZ - 1.0).abs() < 1e-6);
}

#[test]
fn noisy_fits_have_small_median_error() {
    let t1_delays = default_t1_delays(T1_NS);
    let r_delays = default_ramsey_delays(T2_NS, DETUNING_MHZ);
    let mut e1 = Vec::new();
    let mut e2 = Vec::new();
    for seed in 0..100 {
        let t1 = simulate_t1_trace(T1_NS, &t1_delays, 0.02, seed).unwrap();
        e1.push((fit_decay(&t1).unwrap().time_constant_ns / T1_NS - 1.0).abs());
        let r = simulate_ramsey_trace(T2_NS, DETUNING_MHZ, &r_delays, 0.02, seed).unwrap();
        e2.push((fit_decay(&r).unwrap().time_constant_ns / T2_NS - 1.0).abs());
    }
    let (m1, m2) = (median(e1), median(e2));
    assert!(m1 < 0.05, "T1 median error {m1}");
    assert!(m2 < 0.05, "T2* median error {m2}");
}

#[test]
fn ramsey_frequency_within_three_standard_errors() {
    let delays = default_ramsey_delays(T2_NS, DETUNING_MHZ);
    for seed in 0..20 {
        let r = simulate_ramsey_trace(T2_NS, DETUNING_MHZ, &delays, 0.02, seed).unwrap();
        let f = fit_decay(&r).unwrap();
        let se = f.covariance_diag[2].sqrt();
        let err = (f.ramsey_detuning_mhz.unwrap() - DETUNING_MHZ).abs();
        assert!(err <= 3.0 * se, "seed {seed}: {err} vs {se}");
    }
}

#[test]
fn figure_pair_is_physical() {
    assert!(physicality_warning(T1_NS, T2_NS).is_none());
    assert!(physicality_warning(100.0, 250.0).is_some());
}
