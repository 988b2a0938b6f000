// Copyright 2026 fluxqa Contributors
// SPDX-License-Identifier: Apache-2.0

use fluxqa_core::device::{build_device, DeviceConfig, DeviceTruth, FluxVector};
use fluxqa_core::xtalk::*;
use fluxqa_core::Error;
use nalgebra::{DMatrix, Matrix2};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

/// Single-qubit device whose nominal control block is exactly `g`.
fn planted(g: Mat2, seed: u64) -> DeviceTruth {
    let mut d = build_device(&DeviceConfig::single_qubit(0.0, seed)).unwrap();
    d.true_control_matrix = DMatrix::from_row_slice(2, 2, &[g[0][0], g[0][1], g[1][0], g[1][1]]);
    d
}

fn inv2(g: Mat2) -> Mat2 {
    let det = g[0][0] * g[1][1] - g[0][1] * g[1][0];
    [[g[1][1] / det, -g[0][1] / det], [-g[1][0] / det, g[0][0] / det]]
}

fn mat_vec(a: Mat2, v: [f64; 2]) -> [f64; 2] {
    [a[0][0] * v[0] + a[0][1] * v[1], a[1][0] * v[0] + a[1][1] * v[1]]
}

/// Analytic feature centers of qubit 0 inside the scan window, in the scan's
/// coordinates.
fn truth_centers(d: &DeviceTruth, req: &ScanRequest, corr: Option<&AffineCorrection>) -> Vec<Point> {
    let g = d.nominal_response();
    let g2 = [[g[(0, 0)], g[(0, 1)]], [g[(1, 0)], g[(1, 1)]]];
    let a = inv2(g2);
    let mut out = Vec::new();
    for m in -12..=12 {
        for n in -12..=12 {
            let phi = [
                d.pattern_fractional_offset[0] - d.flux_offsets[0] + m as f64,
                d.pattern_fractional_offset[1] - d.flux_offsets[1] + n as f64,
            ];
            let u = mat_vec(a, phi);
            let p = corr.map_or(u, |c| c.to_corrected(u));
            let (x, y) = (&req.axis_x, &req.axis_y);
            if p[0] > x.start && p[0] < x.stop && p[1] > y.start && p[1] < y.stop {
                out.push(p);
            }
        }
    }
    out
}

fn dist(a: Point, b: Point) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

fn snr_sigma(d: &DeviceTruth, snr: f64) -> f64 {
    feature_contrast(d, 0, d.resonators[0].f_down_ghz) / snr
}

fn axes() -> [String; 2] {
    ["x0".to_string(), "z0".to_string()]
}

#[test]
fn transmission_is_periodic_in_each_loop() {
    let d = build_device(&DeviceConfig::single_qubit(0.3, 4)).unwrap();
    let probe = d.resonators[0].f_down_ghz;
    let at = |a: f64, b: f64| {
        transmission_model(&d, &FluxVector { values: vec![a, b], labels: vec!["x0".into(), "z0".into()] }, probe, 0)
            .unwrap()
    };
    for &(a, b) in &[(0.13, -0.42), (0.5, 0.5), (-1.7, 2.21)] {
        assert!((at(a, b) - at(a + 1.0, b)).abs() < 1e-12);
        assert!((at(a, b) - at(a, b + 1.0)).abs() < 1e-12);
        assert!((0.0..=1.0).contains(&at(a, b)));
    }
}

#[test]
fn transmission_minimum_sits_at_pattern_offset() {
    let d = build_device(&DeviceConfig::single_qubit(0.3, 11)).unwrap();
    let probe = d.resonators[0].f_down_ghz;
    let step = 0.0025;
    let mut best = (f64::INFINITY, 0.0, 0.0);
    for i in 0..400 {
        for j in 0..400 {
            let (a, b) = (i as f64 * step, j as f64 * step);
            let f = FluxVector { values: vec![a, b], labels: vec!["x0".into(), "z0".into()] };
            let v = transmission_model(&d, &f, probe, 0).unwrap();
            if v < best.0 {
                best = (v, a, b);
            }
        }
    }
    let wrap = |x: f64| x - x.round();
    assert!(wrap(best.1 - d.pattern_fractional_offset[0]).abs() <= step);
    assert!(wrap(best.2 - d.pattern_fractional_offset[1]).abs() <= step);
    let depth = d.resonators[0].depth;
    assert!((best.0 - (1.0 - depth)).abs() < 1e-3);
}

#[test]
fn acquisition_time_model() {
    let raster = simulate_acquisition_time(101, 101, &AcquisitionParams::raster()).unwrap();
    let saw = simulate_acquisition_time(101, 101, &AcquisitionParams::sawtooth()).unwrap();
    let three_h = 3.0 * 3600.0;
    assert!((raster.total_time_s - three_h).abs() / three_h < 0.2, "{}", raster.total_time_s);
    assert!((raster.total_time_s - 101.0 * 101.0 * (1.0 + 1000.0 * 5e-6)).abs() < 1e-6);
    assert!((saw.total_time_s - (101.0 * 45.0 / 500.0 + 101.0 * 1e-3)).abs() < 1e-12);
    assert!(saw.total_time_s > 1.0 && saw.total_time_s < 100.0);
    assert!(raster.total_time_s / saw.total_time_s >= 1000.0);

    let mut bad = AcquisitionParams::sawtooth();
    bad.ramp_hz = 50.0;
    assert!(simulate_acquisition_time(101, 101, &bad).is_err());
    bad = AcquisitionParams::sawtooth();
    bad.dwell_us = 0.0;
    assert!(simulate_acquisition_time(101, 101, &bad).is_err());
    let mut r = AcquisitionParams::raster();
    r.settle_ms = -1.0;
    assert!(simulate_acquisition_time(101, 101, &r).is_err());
}

#[test]
fn zero_crosstalk_lattice_is_axis_aligned() {
    let d = build_device(&DeviceConfig::single_qubit(0.0, 3)).unwrap();
    let scan = scan_transmission(&d, &ScanRequest::for_qubit(0), None).unwrap();
    let cal = calibrate_auto(&scan, &DetectionParams::default()).unwrap();
    let (_, angles) = orthogonality_metrics(&cal.fit.primitive_vectors);
    assert!(angles[0] < 0.5 && angles[1] < 0.5, "{angles:?}");
}

#[test]
fn sheared_device_recovers_inverse_control_block() {
    let g = [[1.0, 0.25], [-0.15, 1.0]];
    let d = planted(g, 5);
    let scan = scan_transmission(&d, &ScanRequest::for_qubit(0), None).unwrap();
    let cal = calibrate_auto(&scan, &DetectionParams::default()).unwrap();
    let a = inv2(g);
    let fit = cal.fit.primitive_vectors;
    for r in 0..2 {
        for c in 0..2 {
            assert!((fit[r][c] - a[r][c]).abs() < 2e-3, "{fit:?} vs {a:?}");
        }
    }
}

#[test]
fn noiseless_detection_is_subpixel_accurate() {
    for seed in 0..6 {
        let d = build_device(&DeviceConfig::single_qubit(0.3, seed)).unwrap();
        let req = ScanRequest::for_qubit(0);
        let scan = scan_transmission(&d, &req, None).unwrap();
        let found = detect_centers_auto(&scan).unwrap();
        let truth = truth_centers(&d, &req, None);
        let step = req.axis_x.step();
        for c in &found {
            let nearest = truth.iter().map(|t| dist(*t, *c)).fold(f64::INFINITY, f64::min);
            assert!(nearest < 0.2 * step, "seed {seed}: center {c:?} is {} steps from truth", nearest / step);
        }
        assert!(found.len() as f64 >= 0.8 * truth.len() as f64, "seed {seed}: {found:?} vs {truth:?}");
    }
}

#[test]
fn noisy_detection_recall_at_snr_5() {
    for seed in 0..10 {
        let d = build_device(&DeviceConfig::single_qubit(0.3, 100 + seed)).unwrap();
        let req = ScanRequest::for_qubit(0).with_noise(snr_sigma(&d, 5.0)).with_seed(seed);
        let scan = scan_transmission(&d, &req, None).unwrap();
        let found = detect_centers_auto(&scan).unwrap();
        let truth = truth_centers(&d, &req, None);
        let tol = 0.25;
        let hits = truth.iter().filter(|t| found.iter().any(|c| dist(**t, *c) < tol)).count();
        let false_centers = found.iter().filter(|c| !truth.iter().any(|t| dist(*t, **c) < tol)).count();
        assert!(hits as f64 >= 0.8 * truth.len() as f64, "seed {seed}: {hits}/{}", truth.len());
        assert_eq!(false_centers, 0, "seed {seed}");
    }
}

#[test]
fn narrow_window_is_insufficient() {
    let d = build_device(&DeviceConfig::single_qubit(0.0, 2)).unwrap();
    let req = ScanRequest::square("x0", "z0", 0.75, 61);
    let scan = scan_transmission(&d, &req, None).unwrap();
    match detect_centers_auto(&scan) {
        Err(Error::CalibrationInsufficient(_)) => {}
        other => panic!("expected insufficient, got {other:?}"),
    }
}

#[test]
fn probe_outside_band_gives_flat_map_with_warning() {
    let d = build_device(&DeviceConfig::single_qubit(0.3, 2)).unwrap();
    let mut req = ScanRequest::for_qubit(0);
    req.probe_ghz = Some(7.5);
    let scan = scan_transmission(&d, &req, None).unwrap();
    assert!(scan.warning.is_some());
    assert!(scan.values.iter().flatten().all(|&v| v == 1.0));
    assert!(matches!(detect_centers_auto(&scan), Err(Error::CalibrationInsufficient(_))));
}

#[test]
fn unknown_axis_is_rejected() {
    let d = build_device(&DeviceConfig::single_qubit(0.3, 2)).unwrap();
    let req = ScanRequest::square("x0", "z3", 1.25, 31);
    assert!(matches!(scan_transmission(&d, &req, None), Err(Error::UnknownAxis(_))));
}

#[test]
fn assign_identity_lattice() {
    let pts: Vec<Point> = (-2..=2).flat_map(|i| (-2..=2).map(move |j| [i as f64, j as f64])).collect();
    let asg = assign_lattice_indices(&pts, &Matrix2::identity(), [0.0, 0.0]).unwrap();
    assert!(asg.rejected.is_empty());
    for e in &asg.indexed {
        assert_eq!([e.index[0] as f64, e.index[1] as f64], e.position);
    }
}

#[test]
fn assign_sheared_lattice_recovers_planted_indices() {
    let a = Matrix2::new(0.9, 0.35, -0.2, 1.1);
    let b = [0.17, -0.31];
    let mut pts = Vec::new();
    let mut planted_idx = Vec::new();
    for i in -3..=3i64 {
        for j in -3..=3i64 {
            let v = a * nalgebra::Vector2::new(i as f64, j as f64);
            pts.push([v[0] + b[0], v[1] + b[1]]);
            planted_idx.push([i, j]);
        }
    }
    let asg = assign_lattice_indices(&pts, &a, b).unwrap();
    assert_eq!(asg.indexed.len(), pts.len());
    for (e, m) in asg.indexed.iter().zip(&planted_idx) {
        assert_eq!(&e.index, m);
    }
}

#[test]
fn half_integer_outlier_is_rejected() {
    let mut pts: Vec<Point> = (0..3).flat_map(|i| (0..3).map(move |j| [i as f64, j as f64])).collect();
    pts.push([0.5, 0.5]);
    let asg = assign_lattice_indices(&pts, &Matrix2::identity(), [0.0, 0.0]).unwrap();
    assert_eq!(asg.rejected, vec![[0.5, 0.5]]);
    assert_eq!(asg.indexed.len(), 9);
}

#[test]
fn near_singular_basis_is_ambiguous() {
    let pts = vec![[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]];
    let a = Matrix2::new(1.0, 1.0, 1.0, 1.0 + 1e-13);
    assert!(matches!(assign_lattice_indices(&pts, &a, [0.0, 0.0]), Err(Error::AmbiguousBasis(_))));
}

fn lattice_points(a: Mat2, b: Point, range: std::ops::RangeInclusive<i64>) -> Vec<IndexedCenter> {
    let mut out = Vec::new();
    for i in range.clone() {
        for j in range.clone() {
            let v = mat_vec(a, [i as f64, j as f64]);
            out.push(IndexedCenter { position: [v[0] + b[0], v[1] + b[1]], index: [i, j], rounding_residual: 0.0 });
        }
    }
    out
}

#[test]
fn fit_affine_identity() {
    let pts = lattice_points([[1.0, 0.0], [0.0, 1.0]], [0.0, 0.0], -1..=1);
    let (fit, corr) = fit_affine(&pts, CenterSource::Manual, axes()).unwrap();
    for r in 0..2 {
        for c in 0..2 {
            let want = if r == c { 1.0 } else { 0.0 };
            assert!((corr.t[r][c] - want).abs() < 1e-10);
        }
        assert!(corr.offset[r].abs() < 1e-10);
    }
    assert!(fit.residual_rms < 1e-10);
}

#[test]
fn fit_affine_sheared_exact() {
    let a = [[1.0, 0.3], [0.05, 1.0]];
    let b = [0.1, -0.2];
    let pts = lattice_points(a, b, -2..=2);
    let (fit, corr) = fit_affine(&pts, CenterSource::Manual, axes()).unwrap();
    for r in 0..2 {
        for c in 0..2 {
            assert!((fit.primitive_vectors[r][c] - a[r][c]).abs() < 1e-9);
        }
        assert!((corr.offset[r] - b[r]).abs() < 1e-9);
    }
    for e in &pts {
        let v = corr.to_corrected(e.position);
        assert!((v[0] - e.index[0] as f64).abs() < 1e-9 && (v[1] - e.index[1] as f64).abs() < 1e-9);
    }
}

#[test]
fn fit_affine_with_jitter() {
    let a = [[1.0, 0.3], [0.05, 1.0]];
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let normal = Normal::new(0.0, 0.005).unwrap();
    let mut pts: Vec<IndexedCenter> = lattice_points(a, [0.1, -0.2], -2..=2).into_iter().take(20).collect();
    for e in &mut pts {
        e.position[0] += normal.sample(&mut rng);
        e.position[1] += normal.sample(&mut rng);
    }
    let (fit, corr) = fit_affine(&pts, CenterSource::Manual, axes()).unwrap();
    for r in 0..2 {
        for c in 0..2 {
            assert!((fit.primitive_vectors[r][c] - a[r][c]).abs() < 0.01);
        }
    }
    for e in &pts {
        let u = fit.point(e.index);
        assert!(dist(u, e.position) <= 3.0 * fit.residual_rms * 2f64.sqrt());
    }
    corr.validate().unwrap();
}

#[test]
fn fit_affine_rejects_collinear_indices() {
    let pts: Vec<IndexedCenter> = (0..4)
        .map(|i| IndexedCenter { position: [i as f64, 0.0], index: [i, 0], rounding_residual: 0.0 })
        .collect();
    assert!(matches!(fit_affine(&pts, CenterSource::Manual, axes()), Err(Error::DegenerateCenters(_))));
}

#[test]
fn corrected_scan_puts_centers_on_integers() {
    let d = build_device(&DeviceConfig::single_qubit(0.3, 21)).unwrap();
    let scan = scan_transmission(&d, &ScanRequest::for_qubit(0), None).unwrap();
    let cal = calibrate_auto(&scan, &DetectionParams::default()).unwrap();
    let rescan = scan_transmission(&d, &ScanRequest::for_qubit(0), Some(&cal.correction)).unwrap();
    assert!(rescan.corrected);
    let found = detect_centers_auto(&rescan).unwrap();
    assert!(found.len() >= 4);
    for c in found {
        assert!((c[0] - c[0].round()).abs() < 0.02 && (c[1] - c[1].round()).abs() < 0.02, "{c:?}");
    }
}

#[test]
fn perfect_correction_verifies_exactly() {
    let d = build_device(&DeviceConfig::single_qubit(0.3, 8)).unwrap();
    let corr = AffineCorrection::from_truth(&d, ["x0", "z0"], &[]).unwrap();
    let report = verify_orthogonality(&d, &corr, &ScanRequest::for_qubit(0), &DetectionParams::default()).unwrap();
    assert!(report.residual_offdiag_fraction < 1e-6, "{}", report.residual_offdiag_fraction);
}

#[test]
fn identity_correction_reports_raw_crosstalk() {
    let g = [[1.0, 0.3], [-0.3, 1.0]];
    let d = planted(g, 9);
    let report = verify_orthogonality(
        &d,
        &AffineCorrection::identity(axes()),
        &ScanRequest::for_qubit(0),
        &DetectionParams::default(),
    )
    .unwrap();
    // With unit diagonal, G⁻¹ has the same off-diagonal ratios as G.
    assert!((report.residual_offdiag_fraction - 0.3).abs() < 0.01, "{}", report.residual_offdiag_fraction);
}

#[test]
fn twenty_center_noisy_fit_verifies() {
    let d = build_device(&DeviceConfig::single_qubit(0.3, 31)).unwrap();
    let sigma = snr_sigma(&d, 10.0);
    let wide = ScanRequest::square("x0", "z0", 2.5, 201).with_noise(sigma).with_seed(1);
    let scan = scan_transmission(&d, &wide, None).unwrap();
    let cal = calibrate_auto(&scan, &DetectionParams::default()).unwrap();
    assert!(cal.fit.n_centers_used >= 20, "{}", cal.fit.n_centers_used);
    let check = ScanRequest::for_qubit(0).with_noise(sigma).with_seed(2);
    let report = verify_orthogonality(&d, &cal.correction, &check, &DetectionParams::default()).unwrap();
    assert!(report.residual_offdiag_fraction < 0.01, "{}", report.residual_offdiag_fraction);
}

#[test]
fn manual_and_auto_fits_agree() {
    let d = build_device(&DeviceConfig::single_qubit(0.3, 41)).unwrap();
    let req = ScanRequest::for_qubit(0).with_noise(snr_sigma(&d, 10.0)).with_seed(3);
    let scan = scan_transmission(&d, &req, None).unwrap();
    let auto = calibrate_auto(&scan, &DetectionParams::default()).unwrap();
    let truth = truth_centers(&d, &req, None);
    assert!(truth.len() >= 6);
    let manual = fit_manual_centers(&truth, None, axes()).unwrap();
    let tol = 3.0 * auto.fit.residual_rms.max(manual.fit.residual_rms);
    for r in 0..2 {
        for c in 0..2 {
            let (x, y) = (auto.fit.primitive_vectors[r][c], manual.fit.primitive_vectors[r][c]);
            assert!((x - y).abs() <= tol, "{x} vs {y}, tol {tol}");
        }
    }
}

#[test]
fn too_few_manual_centers_are_rejected() {
    let r = fit_manual_centers(&[[0.0, 0.0], [1.0, 0.0]], None, axes());
    assert!(matches!(r, Err(Error::DegenerateCenters(_))));
    let r = fit_manual_centers(&[[0.0, 0.0], [1.0, 0.0], [2.0, 0.0]], None, axes());
    assert!(matches!(r, Err(Error::DegenerateCenters(_))));
}

#[test]
fn scan_text_round_trip_is_byte_stable() {
    let d = build_device(&DeviceConfig::single_qubit(0.3, 6)).unwrap();
    let req = ScanRequest::square("x0", "z0", 1.25, 41).with_noise(0.01).with_seed(9);
    let a = scan_transmission(&d, &req, None).unwrap();
    let b = scan_transmission(&d, &req, None).unwrap();
    assert_eq!(a.to_text(), b.to_text());
    let back = ScanGrid2D::from_text(&a.to_text()).unwrap();
    assert_eq!(back, a);
    assert_eq!(back.to_text(), a.to_text());
}

#[test]
fn correction_toml_round_trip() {
    let d = build_device(&DeviceConfig::single_qubit(0.3, 6)).unwrap();
    let corr = AffineCorrection::from_truth(&d, ["x0", "z0"], &[]).unwrap();
    let text = corr.to_toml_string().unwrap();
    let back = AffineCorrection::from_toml_str(&text).unwrap();
    assert_eq!(back, corr);
    assert_eq!(back.to_toml_string().unwrap(), text);
}

#[test]
fn blockwise_calibration_covers_every_qubit() {
    let d = build_device(&DeviceConfig::with_qubits(3, 0.3, 12)).unwrap();
    let cals = calibrate_blockwise(&d, &ScanRequest::for_qubit(0), &DetectionParams::default()).unwrap();
    assert_eq!(cals.len(), 3);
    for (q, cal) in cals.iter().enumerate() {
        assert_eq!(cal.correction.axes, [format!("x{q}"), format!("z{q}")]);
        let check = ScanRequest::for_qubit(q);
        let report = verify_orthogonality(&d, &cal.correction, &check, &DetectionParams::default()).unwrap();
        assert!(report.residual_offdiag_fraction < 0.01, "qubit {q}: {}", report.residual_offdiag_fraction);
    }
}

fn random_block(rng: &mut ChaCha8Rng, bound: f64) -> Mat2 {
    [[1.0, rng.random_range(-bound..=bound)], [rng.random_range(-bound..=bound), 1.0]]
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 12, .. ProptestConfig::default() })]

    #[test]
    fn round_trip_pipeline_orthogonalizes(seed in 0u64..10_000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = planted(random_block(&mut rng, 0.4), seed);
        let sigma = snr_sigma(&d, 10.0);
        let scan = scan_transmission(&d, &ScanRequest::for_qubit(0).with_noise(sigma).with_seed(seed), None).unwrap();
        let cal = calibrate_auto(&scan, &DetectionParams::default()).unwrap();
        let check = ScanRequest::for_qubit(0).with_noise(sigma).with_seed(seed + 1);
        let report = verify_orthogonality(&d, &cal.correction, &check, &DetectionParams::default()).unwrap();
        prop_assert!(report.residual_offdiag_fraction < 0.01, "{}", report.residual_offdiag_fraction);
    }

    #[test]
    fn second_pass_does_not_degrade(seed in 0u64..10_000) {
        let d = build_device(&DeviceConfig::single_qubit(0.3, seed)).unwrap();
        let params = DetectionParams::default();
        let first = calibrate_auto(&scan_transmission(&d, &ScanRequest::for_qubit(0), None).unwrap(), &params).unwrap();
        let rescan = scan_transmission(&d, &ScanRequest::for_qubit(0), Some(&first.correction)).unwrap();
        let second = calibrate_auto(&rescan, &params).unwrap();
        let composed = first.correction.compose(&second.correction).unwrap();
        let r1 = verify_orthogonality(&d, &first.correction, &ScanRequest::for_qubit(0), &params).unwrap();
        let r2 = verify_orthogonality(&d, &composed, &ScanRequest::for_qubit(0), &params).unwrap();
        prop_assert!(r2.residual_offdiag_fraction <= r1.residual_offdiag_fraction + 1e-4,
            "{} -> {}", r1.residual_offdiag_fraction, r2.residual_offdiag_fraction);
    }

    #[test]
    fn fit_is_exact_on_exact_lattices(
        a00 in 0.6f64..1.4, a01 in -0.4f64..0.4, a10 in -0.4f64..0.4, a11 in 0.6f64..1.4,
        b0 in -1.0f64..1.0, b1 in -1.0f64..1.0,
    ) {
        let a = [[a00, a01], [a10, a11]];
        let pts = lattice_points(a, [b0, b1], -1..=2);
        let (fit, corr) = fit_affine(&pts, CenterSource::Automatic, axes()).unwrap();
        for r in 0..2 {
            for c in 0..2 {
                prop_assert!((fit.primitive_vectors[r][c] - a[r][c]).abs() < 1e-12);
            }
        }
        prop_assert!(fit.residual_rms < 1e-12);
        corr.validate().unwrap();
    }
}
