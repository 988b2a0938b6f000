// Copyright 2026 fluxqa Contributors
// SPDX-License-Identifier: Apache-2.0

use std::f64::consts::PI;
use std::path::PathBuf;

use fluxqa_core::anneal::*;
use fluxqa_core::ode::Tolerance;
use fluxqa_core::Error;
use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use proptest::prelude::*;

const TOL: Tolerance = Tolerance { atol: 1e-10, rtol: 1e-10, max_step: f64::INFINITY };

fn corpus() -> Vec<(String, IsingProblem)> {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/data/ising");
    let mut files: Vec<_> = std::fs::read_dir(dir).unwrap().map(|e| e.unwrap().path()).collect();
    files.sort();
    files
        .into_iter()
        .map(|p| {
            let text = std::fs::read_to_string(&p).unwrap();
            (p.file_stem().unwrap().to_string_lossy().into_owned(), IsingProblem::from_text(&text).unwrap())
        })
        .collect()
}

fn kron(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let (ar, ac) = a.shape();
    let (br, bc) = b.shape();
    DMatrix::from_fn(ar * br, ac * bc, |r, k| a[(r / br, k / bc)] * b[(r % br, k % bc)])
}

/// Operator `op` on qubit `i` of `n`, qubit 0 the rightmost factor.
fn on_qubit(op: &DMatrix<f64>, i: usize, n: usize) -> DMatrix<f64> {
    let id = DMatrix::identity(2, 2);
    (0..n).rev().fold(DMatrix::identity(1, 1), |acc, q| kron(&acc, if q == i { op } else { &id }))
}

fn oracle_hamiltonian(p: &IsingProblem, a: f64, b: f64) -> DMatrix<f64> {
    // Bit value 1 is spin up.
    let z = DMatrix::from_row_slice(2, 2, &[-1.0, 0.0, 0.0, 1.0]);
    let x = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0]);
    let d = 1 << p.n;
    let mut h = DMatrix::zeros(d, d);
    for i in 0..p.n {
        h -= on_qubit(&x, i, p.n) * (a / 2.0);
        h += on_qubit(&z, i, p.n) * (b / 2.0 * p.h[i]);
    }
    for &(i, j, v) in &p.couplings {
        h += on_qubit(&z, i, p.n) * on_qubit(&z, j, p.n) * (b / 2.0 * v);
    }
    h
}

/// Cyclic Jacobi eigenvalues, ascending.
fn jacobi_eigenvalues(m: &DMatrix<f64>) -> Vec<f64> {
    let mut a = m.clone();
    let n = a.nrows();
    for _ in 0..100 {
        let off: f64 = (0..n).flat_map(|i| (0..n).map(move |j| (i, j))).filter(|(i, j)| i != j).map(|(i, j)| a[(i, j)].powi(2)).sum();
        if off < 1e-30 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if a[(p, q)].abs() < 1e-300 {
                    continue;
                }
                let theta = (a[(q, q)] - a[(p, p)]) / (2.0 * a[(p, q)]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (a[(k, p)], a[(k, q)]);
                    a[(k, p)] = c * akp - s * akq;
                    a[(k, q)] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[(p, k)], a[(q, k)]);
                    a[(p, k)] = c * apk - s * aqk;
                    a[(q, k)] = s * apk + c * aqk;
                }
            }
        }
    }
    let mut e: Vec<f64> = (0..n).map(|i| a[(i, i)]).collect();
    e.sort_by(f64::total_cmp);
    e
}

/// Exhaustive ground space from the oracle diagonal at `A = 0`.
fn oracle_ground(p: &IsingProblem) -> Vec<usize> {
    let h = oracle_hamiltonian(p, 0.0, 2.0);
    let diag: Vec<f64> = (0..h.nrows()).map(|k| h[(k, k)]).collect();
    let min = diag.iter().copied().fold(f64::INFINITY, f64::min);
    (0..diag.len()).filter(|&k| diag[k] - min < 1e-9).collect()
}

fn oracle_gap(p: &IsingProblem, sched: &AnnealSchedule, level: usize, s: f64) -> f64 {
    let (a, b) = sched.envelopes(s);
    let e = jacobi_eigenvalues(&oracle_hamiltonian(p, a, b));
    e[level] - e[0]
}

/// Dense scan on 10⁴ points, then a 10⁻⁷-spaced scan around the best.
fn dense_min_gap(p: &IsingProblem, sched: &AnnealSchedule, level: usize) -> (f64, f64) {
    let n = 10_000;
    let (mut bs, mut bg) = (0.0, f64::INFINITY);
    for k in 0..=n {
        let s = k as f64 / n as f64;
        let g = oracle_gap(p, sched, level, s);
        if g < bg {
            (bs, bg) = (s, g);
        }
    }
    let centre = bs;
    for k in -1000..=1000 {
        let s = (centre + k as f64 * 1e-7).clamp(0.0, 1.0);
        let g = oracle_gap(p, sched, level, s);
        if g < bg {
            (bs, bg) = (s, g);
        }
    }
    (bs, bg)
}

fn closed_success(p: &IsingProblem, sched: &AnnealSchedule) -> f64 {
    let run = evolve_closed(p, sched, None, TOL).unwrap();
    success_probability(&QuantumState::Pure(run.state), p).unwrap()
}

fn open_success(p: &IsingProblem, sched: &AnnealSchedule, noise: &NoiseSpec) -> f64 {
    let run = evolve_open(p, sched, noise, None, TOL).unwrap();
    assert!(run.trace_drift < 1e-6, "trace drift {}", run.trace_drift);
    assert!(run.min_eigenvalue > -1e-8, "negative eigenvalue {}", run.min_eigenvalue);
    success_probability(&QuantumState::Mixed(run.rho), p).unwrap()
}

fn fidelity(a: &DVector<Complex64>, b: &DVector<Complex64>) -> f64 {
    a.dotc(b).norm_sqr()
}

// ---------------------------------------------------------------------------
// Hamiltonians and spectra

#[test]
fn single_spin_transverse_field_at_start() {
    let p = IsingProblem::new(1, vec![0.0], vec![]).unwrap();
    let sched = AnnealSchedule::default();
    let sp = instantaneous_spectrum(&p, &sched, 0.0, 2).unwrap();
    assert!((sp.eigenvalues[0] + DEFAULT_A0_GHZ / 2.0).abs() < 1e-12);
    assert!((sp.eigenvalues[1] - DEFAULT_A0_GHZ / 2.0).abs() < 1e-12);
}

#[test]
fn start_spectrum_is_binomial() {
    let p = IsingProblem::k3_mixed_for_tests();
    let sched = AnnealSchedule::default();
    let sp = instantaneous_spectrum(&p, &sched, 0.0, 8).unwrap();
    let a0 = DEFAULT_A0_GHZ;
    let mut expected = Vec::new();
    for (m, mult) in [(0, 1), (1, 3), (2, 3), (3, 1)] {
        expected.extend(std::iter::repeat(-a0 * 1.5 + a0 * m as f64).take(mult));
    }
    for (got, want) in sp.eigenvalues.iter().zip(&expected) {
        assert!((got - want).abs() < 1e-10, "{got} vs {want}");
    }
}

trait TestProblems {
    fn k3_mixed_for_tests() -> IsingProblem;
}

impl TestProblems for IsingProblem {
    fn k3_mixed_for_tests() -> IsingProblem {
        IsingProblem::k3([0.2, -0.4, 0.1], [0.9, -0.6, 0.7]).unwrap()
    }
}

#[test]
fn single_qubit_gap_closed_form() {
    let h0 = 0.37;
    let p = IsingProblem::new(1, vec![h0], vec![]).unwrap();
    let sched = AnnealSchedule::default();
    for k in 0..=50 {
        let s = k as f64 / 50.0;
        let (a, b) = sched.envelopes(s);
        let sp = instantaneous_spectrum(&p, &sched, s, 2).unwrap();
        let want = (a * a + (b * h0).powi(2)).sqrt();
        assert!((sp.gap - want).abs() < 1e-12, "s={s}: {} vs {want}", sp.gap);
    }
}

#[test]
fn corpus_spectra_match_dense_oracle() {
    let sched = AnnealSchedule::default();
    for (name, p) in corpus() {
        assert!(p.n <= 3);
        for k in 0..=20 {
            let s = k as f64 / 20.0;
            let (a, b) = sched.envelopes(s);
            let want = jacobi_eigenvalues(&oracle_hamiltonian(&p, a, b));
            let got = instantaneous_spectrum(&p, &sched, s, p.dim()).unwrap().eigenvalues;
            for (g, w) in got.iter().zip(&want) {
                assert!((g - w).abs() < 1e-10, "{name} s={s}: {g} vs {w}");
            }
        }
    }
}

#[test]
fn hamiltonian_matches_kronecker_construction() {
    let sched = AnnealSchedule::default();
    for (name, p) in corpus() {
        let h = build_hamiltonian(&p, &sched, 0.3).unwrap();
        let (a, b) = sched.envelopes(0.3);
        let diff = (&h - oracle_hamiltonian(&p, a, b)).abs().max();
        assert!(diff < 1e-12, "{name}: {diff}");
        assert!((&h - h.transpose()).abs().max() < 1e-12);
    }
}

#[test]
fn end_hamiltonian_is_diagonal_classical_energy() {
    let sched = AnnealSchedule::default();
    for (name, p) in corpus() {
        let h = build_hamiltonian(&p, &sched, 1.0).unwrap();
        let (_, b1) = sched.envelopes(1.0);
        for r in 0..p.dim() {
            for k in 0..p.dim() {
                let want = if r == k { b1 / 2.0 * p.classical_energy(r) } else { 0.0 };
                assert!((h[(r, k)] - want).abs() < 1e-12, "{name}");
            }
        }
        assert_eq!(classical_ground_space(&p).states, oracle_ground(&p), "{name}");
    }
}

#[test]
fn k3_afm_ground_space_is_sixfold() {
    let gs = classical_ground_space(&IsingProblem::k3_afm());
    assert_eq!(gs.degeneracy(), 6);
    assert!(!gs.states.contains(&0) && !gs.states.contains(&7));
    assert!((gs.energy + 1.0).abs() < 1e-12);
}

#[test]
fn gap_is_continuous_in_s() {
    let p = IsingProblem::k3_mixed_for_tests();
    let sched = AnnealSchedule::default();
    for k in 0..40 {
        let s = k as f64 / 40.0;
        let g0 = instantaneous_spectrum(&p, &sched, s, 2).unwrap().gap;
        let g1 = instantaneous_spectrum(&p, &sched, s + 1e-7, 2).unwrap().gap;
        assert!((g1 - g0).abs() < 1e-5, "s={s}");
    }
}

#[test]
fn dimension_and_range_guards() {
    assert!(IsingProblem::new(9, vec![0.0; 9], vec![]).is_err());
    assert!(IsingProblem::new(2, vec![2.5, 0.0], vec![]).is_err());
    assert!(IsingProblem::new(2, vec![0.0, 0.0], vec![(0, 1, 1.5)]).is_err());
    assert!(IsingProblem::new(2, vec![0.0, 0.0], vec![(1, 1, 0.5)]).is_err());
    assert!(IsingProblem::new(2, vec![0.0, 0.0], vec![(0, 1, 0.5), (1, 0, 0.2)]).is_err());
    let p = IsingProblem::new(2, vec![0.0, 0.0], vec![(1, 0, 0.5)]).unwrap();
    assert_eq!(p.couplings, vec![(0, 1, 0.5)]);
    let sched = AnnealSchedule::default();
    assert!(build_hamiltonian(&p, &sched, 1.5).is_err());
    assert!(instantaneous_spectrum(&p, &sched, 0.5, 5).is_err());
}

#[test]
fn problem_file_errors() {
    assert!(matches!(IsingProblem::from_text("h 0 1"), Err(Error::Parse(_))));
    assert!(matches!(IsingProblem::from_text("n 2\nh 0 x"), Err(Error::Parse(_))));
    assert!(matches!(IsingProblem::from_text("n 2\nh 5 0.1"), Err(Error::Parse(_))));
    assert!(matches!(IsingProblem::from_text("n 2\nq 0 1"), Err(Error::Parse(_))));
    let p = IsingProblem::from_text("n 3 # triangle\n\nJ 0 2 0.5\n").unwrap();
    assert_eq!(p.h, vec![0.0; 3]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn problem_text_round_trip(
        n in 1usize..=5,
        h in proptest::collection::vec(-2.0f64..2.0, 5),
        j in proptest::collection::vec(-1.0f64..1.0, 10),
    ) {
        let mut couplings = Vec::new();
        let mut k = 0;
        for a in 0..n {
            for b in a + 1..n {
                couplings.push((a, b, j[k]));
                k += 1;
            }
        }
        let p = IsingProblem::new(n, h[..n].to_vec(), couplings).unwrap();
        let back = IsingProblem::from_text(&p.to_text()).unwrap();
        prop_assert_eq!(back, p);
    }
}

// ---------------------------------------------------------------------------
// Schedules and flux map

#[test]
fn default_schedule_endpoints() {
    let sched = AnnealSchedule::default();
    assert_eq!(sched.envelopes(0.0), (DEFAULT_A0_GHZ, 0.0));
    assert_eq!(sched.envelopes(1.0), (0.0, DEFAULT_B0_GHZ));
    assert!((sched.s_at(25.0) - 0.25).abs() < 1e-15);
}

#[test]
fn tabulated_envelope_round_trip() {
    let env = Envelope::Tabulated { s: vec![0.0, 0.2, 1.0], values: vec![5.0, 3.5, 0.0] };
    let back = Envelope::from_table_text(&env.to_table_text(0)).unwrap();
    assert_eq!(back, env);
    assert!((back.at(0.1) - 4.25).abs() < 1e-12);
    let lin = Envelope::Linear { start: 0.0, end: 5.0 };
    let tab = Envelope::from_table_text(&lin.to_table_text(11)).unwrap();
    for k in 0..=100 {
        let s = k as f64 / 100.0;
        assert!((tab.at(s) - lin.at(s)).abs() < 1e-12);
    }
    assert!(Envelope::from_table_text("0 1\n0.5 2\n0.4 1\n").is_err());
    assert!(Envelope::from_table_text("0 1\n0.5 -2\n1 1\n").is_err());
    assert!(Envelope::from_table_text("0 1 2\n").is_err());
}

#[test]
fn flux_map_lookup() {
    let map = FluxScheduleMap::default();
    map.validate().unwrap();
    assert!((map.a_at(670.0) - 4.2).abs() < 1e-12);
    // ε = 2·Ip·Φz/h with Ip = 50 nA, Φz = 1 mΦ0.
    let want = 2.0 * 50e-9 * 1e-3 * 2.067833848e-15 / 6.62607015e-34 / 1e9;
    assert!((map.epsilon_ghz(1.0) - want).abs() < 1e-12 * want);
    let env = map.envelope_from_ramp(&[600.0, 800.0, 1000.0]).unwrap();
    assert!((env.at(0.0) - 5.0).abs() < 1e-12 && env.at(1.0).abs() < 1e-12);
    let bad = FluxScheduleMap { a_ghz: vec![5.0, 4.2, 4.5, 0.5, 0.0], ..map };
    assert!(bad.validate().is_err());
}

// ---------------------------------------------------------------------------
// Minimum gap

#[test]
fn min_gap_single_qubit_matches_closed_form() {
    let h0 = 0.1;
    let p = IsingProblem::new(1, vec![h0], vec![]).unwrap();
    let rep = find_min_gap(&p, &AnnealSchedule::default(), 64).unwrap();
    // gap² ∝ (1 − s)² + h0²·s², minimized at s = 1/(1 + h0²).
    let s_star = 1.0 / (1.0 + h0 * h0);
    let gap = DEFAULT_A0_GHZ * h0 / (1.0 + h0 * h0).sqrt();
    assert!((rep.s_star - s_star).abs() < 1e-4, "{} vs {s_star}", rep.s_star);
    assert!((rep.gap_ghz - gap).abs() < 1e-9);
    let (ds, dg) = dense_min_gap(&p, &AnnealSchedule::default(), 1);
    assert!((rep.s_star - ds).abs() < 1e-4);
    assert!((rep.gap_ghz - dg).abs() <= 1e-6 * dg);
}

#[test]
fn min_gap_k3_afm_matches_dense_scan() {
    let p = IsingProblem::k3_afm();
    let sched = AnnealSchedule::default();
    let rep = find_min_gap(&p, &sched, 128).unwrap();
    assert_eq!(rep.degeneracy, 6);
    let (ds, dg) = dense_min_gap(&p, &sched, 6);
    assert!((rep.gap_ghz - dg).abs() <= 1e-6 * dg, "{} vs {dg}", rep.gap_ghz);
    assert!((rep.s_star - ds).abs() < 1e-4, "{} vs {ds}", rep.s_star);
}

#[test]
fn min_gap_under_rescaling_matches_dense_scan() {
    let sched = AnnealSchedule::default();
    let base = IsingProblem::k3_mixed_for_tests();
    let mut results = Vec::new();
    for p in [base.clone(), base.scaled(2.0)] {
        let rep = find_min_gap(&p, &sched, 128).unwrap();
        let (ds, dg) = dense_min_gap(&p, &sched, rep.degeneracy);
        assert!((rep.gap_ghz - dg).abs() <= 1e-6 * dg, "{} vs {dg}", rep.gap_ghz);
        assert!((rep.s_star - ds).abs() < 1e-4, "{} vs {ds}", rep.s_star);
        results.push(rep);
    }
    assert!(results[0].s_star != results[1].s_star);
    assert!(results[0].gap_ghz != results[1].gap_ghz);
}

#[test]
fn min_gap_rejects_coarse_grid_and_gapless_problem() {
    let sched = AnnealSchedule::default();
    assert!(find_min_gap(&IsingProblem::k3_afm(), &sched, 63).is_err());
    let free = IsingProblem::new(2, vec![0.0, 0.0], vec![]).unwrap();
    assert!(find_min_gap(&free, &sched, 64).is_err());
}

#[test]
fn search_fixed_family_of_one() {
    let sched = AnnealSchedule::default();
    let p = IsingProblem::k3_mixed_for_tests();
    let fam = InstanceFamily::Fixed { problems: vec![p.clone()] };
    let rep = search_small_gap_instances(&fam, &sched, 50, 1, 64).unwrap();
    assert_eq!(rep.ranking.len(), 1);
    assert_eq!(rep.ranking[0].min_gap, find_min_gap(&p, &sched, 64).unwrap());
    let empty = InstanceFamily::Fixed { problems: vec![] };
    assert!(search_small_gap_instances(&empty, &sched, 10, 1, 64).is_err());
}

#[test]
fn search_random_k3_ranking() {
    let sched = AnnealSchedule::default();
    let fam = InstanceFamily::k3_default();
    let rep = search_small_gap_instances(&fam, &sched, 200, 42, 64).unwrap();
    assert_eq!(rep.ranking.len(), 200);
    let gaps: Vec<f64> = rep.ranking.iter().map(|r| r.min_gap.gap_ghz).collect();
    assert!(gaps.windows(2).all(|w| w[0] <= w[1]));
    let median = gaps[100];
    assert!(gaps[0] <= median);
    assert!(rep.ranking.iter().enumerate().all(|(k, r)| r.rank == k));

    let again = search_small_gap_instances(&fam, &sched, 200, 42, 64).unwrap();
    assert_eq!(again, rep);
    let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    let serial = pool.install(|| search_small_gap_instances(&fam, &sched, 200, 42, 64).unwrap());
    assert_eq!(serial, rep);
    let other = search_small_gap_instances(&fam, &sched, 200, 43, 64).unwrap();
    assert_ne!(other.ranking[0].problem, rep.ranking[0].problem);
}

// ---------------------------------------------------------------------------
// Closed-system dynamics

#[test]
fn stationary_hamiltonian_leaves_eigenstate_unchanged() {
    let p = IsingProblem::k3_mixed_for_tests();
    let sched = AnnealSchedule {
        a: Envelope::Linear { start: 3.0, end: 3.0 },
        b: Envelope::Linear { start: 0.0, end: 0.0 },
        t_f_ns: 37.0,
        s_of_t: TimeMapping::Linear,
    };
    let psi0 = initial_ground_state(&p, &sched).unwrap();
    let tight = Tolerance { atol: 1e-12, rtol: 1e-12, max_step: f64::INFINITY };
    let run = evolve_closed(&p, &sched, Some(psi0.clone()), tight).unwrap();
    let f = fidelity(&psi0, &run.state);
    assert!((f - 1.0).abs() < 1e-8, "{f} {}", run.norm_drift);
    assert!(run.norm_drift < 1e-6);
}

#[test]
fn landau_zener_crossing_matches_closed_form() {
    // H = v·t/2·σz − Δ/2·σx for t ∈ [−T, T]; diabatic probability
    // exp(−π²Δ²/v) in cyclic-frequency units.
    let delta = 0.5;
    let half = 25.0;
    let z = DMatrix::from_row_slice(2, 2, &[-1.0, 0.0, 0.0, 1.0]);
    let x = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0]);
    let mut last = 1.0;
    for v in [4.0, 2.0, 1.0, 0.5] {
        let h_of_t = |t: f64| &z * (v * (t - half) / 2.0) - &x * (delta / 2.0);
        let (_, vec0) = fluxqa_core::anneal::sorted_eigen(&h_of_t(0.0));
        let psi0 = vec0.column(0).map(|r| Complex64::new(r, 0.0));
        let run = evolve_closed_with(h_of_t, 2.0 * half, psi0, TOL).unwrap();
        let (_, vec1) = fluxqa_core::anneal::sorted_eigen(&h_of_t(2.0 * half));
        let ground = vec1.column(0).map(|r| Complex64::new(r, 0.0));
        let excitation = 1.0 - fidelity(&ground, &run.state);
        let lz = (-PI * PI * delta * delta / v).exp();
        assert!((excitation - lz).abs() < 0.1 * lz, "v={v}: {excitation} vs {lz}");
        assert!(excitation < last);
        last = excitation;
    }
}

#[test]
fn single_qubit_excitation_falls_with_anneal_time() {
    let p = IsingProblem::new(1, vec![0.1], vec![]).unwrap();
    let mut last = 1.0;
    for t_f in [0.5, 1.0, 2.0, 4.0, 8.0, 16.0, 32.0] {
        let exc = 1.0 - closed_success(&p, &AnnealSchedule::default().with_t_f(t_f));
        assert!(exc < last, "t_f={t_f}: {exc} ≥ {last}");
        last = exc;
    }
}

#[test]
fn k3_afm_adiabatic_success() {
    let p = IsingProblem::k3_afm();
    let run = evolve_closed(&p, &AnnealSchedule::default().with_t_f(100.0), None, TOL).unwrap();
    assert!(run.norm_drift < 1e-6);
    let succ = success_probability(&QuantumState::Pure(run.state), &p).unwrap();
    assert!(succ >= 0.99, "{succ}");
}

#[test]
fn success_approaches_one_along_doubling_sequence() {
    let p = IsingProblem::k3_mixed_for_tests();
    assert_eq!(classical_ground_space(&p).degeneracy(), 1);
    let mut last = 0.0;
    for t_f in [1.0, 2.0, 4.0, 8.0, 16.0, 32.0, 64.0] {
        let succ = closed_success(&p, &AnnealSchedule::default().with_t_f(t_f));
        assert!(succ >= last - 1e-3, "t_f={t_f}: {succ} < {last}");
        last = succ;
    }
    assert!(last > 0.99, "{last}");
}

#[test]
fn success_probability_reference_states() {
    let p = IsingProblem::k3_afm();
    assert!((success_probability(&QuantumState::maximally_mixed(8), &p).unwrap() - 0.75).abs() < 1e-12);
    for b in oracle_ground(&p) {
        assert!((success_probability(&QuantumState::basis(8, b), &p).unwrap() - 1.0).abs() < 1e-12);
    }
    assert_eq!(success_probability(&QuantumState::basis(8, 0), &p).unwrap(), 0.0);
    assert!(success_probability(&QuantumState::basis(4, 0), &p).is_err());

    // h = +1 favours spin down, basis state 0.
    let single = IsingProblem::new(1, vec![1.0], vec![]).unwrap();
    assert_eq!(oracle_ground(&single), vec![0]);
    let run = evolve_closed(&single, &AnnealSchedule::default().with_t_f(50.0), None, TOL).unwrap();
    assert!(run.state[0].norm_sqr() >= 0.99);
    assert!(success_probability(&QuantumState::Pure(run.state), &single).unwrap() >= 0.99);
}

#[test]
fn closed_rejects_wrong_initial_dimension() {
    let p = IsingProblem::k3_afm();
    let psi = DVector::from_element(4, Complex64::new(0.5, 0.0));
    assert!(evolve_closed(&p, &AnnealSchedule::default(), Some(psi), TOL).is_err());
}

// ---------------------------------------------------------------------------
// Open-system dynamics

#[test]
fn zero_rates_reproduce_closed_evolution() {
    let p = IsingProblem::k3_mixed_for_tests();
    let sched = AnnealSchedule::default().with_t_f(5.0);
    let closed = evolve_closed(&p, &sched, None, TOL).unwrap();
    let rho_closed = &closed.state * closed.state.adjoint();
    for basis in [DecoherenceBasis::InstantaneousEigenbasis, DecoherenceBasis::Computational] {
        let open = evolve_open(&p, &sched, &NoiseSpec::dephasing(basis, 0.0), None, TOL).unwrap();
        let diff = (&open.rho - &rho_closed).iter().map(|z| z.norm()).fold(0.0, f64::max);
        assert!(diff < 1e-6, "{basis}: {diff}");
    }
}

#[test]
fn eigenbasis_dephasing_is_innocuous_computational_is_not() {
    let p = IsingProblem::k3_afm();
    let sched = AnnealSchedule::default().with_t_f(50.0);
    let closed = closed_success(&p, &sched);
    let eig = open_success(&p, &sched, &NoiseSpec::dephasing(DecoherenceBasis::InstantaneousEigenbasis, 10.0));
    let comp = open_success(&p, &sched, &NoiseSpec::dephasing(DecoherenceBasis::Computational, 10.0));
    assert!((eig - closed).abs() < 1e-3, "{eig} vs {closed}");
    assert!(comp < eig, "{comp} vs {eig}");
    assert!(comp < closed - 1e-3);
}

#[test]
fn open_system_contracts_hold_with_relaxation() {
    let p = IsingProblem::k3_mixed_for_tests();
    let noise = NoiseSpec {
        basis: DecoherenceBasis::Computational,
        dephasing_rate_per_us: 20.0,
        relaxation: Some(Relaxation { temperature_ghz: 2.0, coupling_rate_per_us: 10.0, detailed_balance: true }),
    };
    let run = evolve_open(&p, &AnnealSchedule::default().with_t_f(20.0), &noise, None, TOL).unwrap();
    assert!(run.trace_drift < 1e-6);
    assert!(run.hermiticity_error < 1e-10);
    assert!(run.min_eigenvalue > -1e-8);
    QuantumState::Mixed(run.rho).validate().unwrap();
}

#[test]
fn open_guards() {
    let big = IsingProblem::new(7, vec![0.0; 7], vec![]).unwrap();
    let sched = AnnealSchedule::default();
    assert!(evolve_open(&big, &sched, &NoiseSpec::default(), None, TOL).is_err());
    let p = IsingProblem::k3_afm();
    let cold = NoiseSpec {
        relaxation: Some(Relaxation { temperature_ghz: 0.0, coupling_rate_per_us: 1.0, detailed_balance: true }),
        ..NoiseSpec::default()
    };
    assert!(evolve_open(&p, &sched, &cold, None, TOL).is_err());
    let negative = NoiseSpec::dephasing(DecoherenceBasis::Computational, -1.0);
    assert!(evolve_open(&p, &sched, &negative, None, TOL).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn ohmic_rates_obey_detailed_balance(omega in 1e-3f64..20.0, t in 0.05f64..20.0, k in 0.01f64..10.0) {
        let up = ohmic_rate(-omega, t, k);
        let down = ohmic_rate(omega, t, k);
        let ratio = down / up;
        let want = (omega / t).exp();
        prop_assert!((ratio / want - 1.0).abs() < 1e-12, "{} vs {}", ratio, want);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn eigenbasis_dephasing_never_worse(
        h in proptest::collection::vec(-1.0f64..1.0, 2),
        j in -1.0f64..1.0,
        t_f in 2.0f64..20.0,
    ) {
        let p = IsingProblem::new(2, h, vec![(0, 1, j)]).unwrap();
        let sched = AnnealSchedule::default().with_t_f(t_f);
        let eig = open_success(&p, &sched, &NoiseSpec::dephasing(DecoherenceBasis::InstantaneousEigenbasis, 20.0));
        let comp = open_success(&p, &sched, &NoiseSpec::dephasing(DecoherenceBasis::Computational, 20.0));
        prop_assert!(eig >= comp - 1e-6, "{} < {}", eig, comp);
    }
}

// ---------------------------------------------------------------------------
// Thermal effects

fn relaxing(t: f64) -> NoiseSpec {
    NoiseSpec {
        basis: DecoherenceBasis::InstantaneousEigenbasis,
        dephasing_rate_per_us: 0.0,
        relaxation: Some(Relaxation { temperature_ghz: t, coupling_rate_per_us: 5.0, detailed_balance: true }),
    }
}

#[test]
fn cold_bath_matches_relaxation_free_run() {
    let p = IsingProblem::k3_afm();
    let sched = AnnealSchedule::default().with_t_f(50.0);
    let free = open_success(&p, &sched, &NoiseSpec::default());
    let cold = open_success(&p, &sched, &relaxing(1e-3));
    assert!((cold - free).abs() < 1e-3, "{cold} vs {free}");
}

#[test]
fn hot_bath_depopulates_ground_space() {
    let p = IsingProblem::k3_afm();
    let sched = AnnealSchedule::default().with_t_f(50.0);
    let gap = find_min_gap(&p, &sched, 64).unwrap().gap_ghz;
    let cold = open_success(&p, &sched, &relaxing(1e-3));
    let hot = open_success(&p, &sched, &relaxing(10.0 * gap));
    assert!(hot < cold - 1e-3, "{hot} vs {cold}");
}

#[test]
fn thermal_sweep_is_nonincreasing() {
    let p = IsingProblem::k3_afm();
    let sched = AnnealSchedule::default().with_t_f(50.0);
    let temps = [0.01, 0.3, 1.0, 3.0, 10.0, 30.0];
    let sweep = thermal_depopulation_sweep(&p, &sched, &relaxing(1.0), &temps, TOL).unwrap();
    assert_eq!(sweep.points.len(), temps.len());
    assert!(sweep.nonincreasing, "{:?}", sweep.points);
    for w in sweep.points.windows(2) {
        assert!(w[1].success <= w[0].success + 1e-3);
    }
    assert!(thermal_depopulation_sweep(&p, &sched, &relaxing(1.0), &temps[..2], TOL).is_err());
    assert!(thermal_depopulation_sweep(&p, &sched, &NoiseSpec::default(), &temps, TOL).is_err());
}

fn oracle_gibbs(p: &IsingProblem, b: f64, t: f64) -> Vec<f64> {
    let h = oracle_hamiltonian(p, 0.0, b);
    let w: Vec<f64> = (0..h.nrows()).map(|k| (-h[(k, k)] / t).exp()).collect();
    let z: f64 = w.iter().sum();
    w.iter().map(|x| x / z).collect()
}

#[test]
fn holding_at_end_thermalizes_to_gibbs() {
    for (p, t) in [(IsingProblem::new(1, vec![1.0], vec![]).unwrap(), 3.0), (IsingProblem::k3_afm(), 4.0)] {
        let sched = AnnealSchedule::default().hold(1.0, 400.0);
        let noise = NoiseSpec {
            relaxation: Some(Relaxation { temperature_ghz: t, coupling_rate_per_us: 20.0, detailed_balance: true }),
            ..NoiseSpec::default()
        };
        let start = QuantumState::basis(p.dim(), 0).density_matrix();
        let run = evolve_open(&p, &sched, &noise, Some(start), TOL).unwrap();
        let want = oracle_gibbs(&p, DEFAULT_B0_GHZ, t);
        let lib = gibbs_populations(&p, DEFAULT_B0_GHZ, t);
        for k in 0..p.dim() {
            assert!((run.rho[(k, k)].re - want[k]).abs() < 1e-3, "n={} k={k}: {} vs {}", p.n, run.rho[(k, k)].re, want[k]);
            assert!((lib[k] - want[k]).abs() < 1e-12);
        }
    }
}
