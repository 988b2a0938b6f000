// Copyright 2026 fluxqa Contributors
// SPDX-License-Identifier: Apache-2.0

//! Adaptive Dormand–Prince 5(4) integrator over any vector-like state.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;

/// State types the integrator can advance.
pub trait OdeState: Clone {
    /// `self += a · x`
    fn axpy(&mut self, a: f64, x: &Self);

    /// Largest componentwise `|err| / (atol + rtol · max(|y0|, |y1|))`.
    fn error_ratio(err: &Self, y0: &Self, y1: &Self, atol: f64, rtol: f64) -> f64;
}

fn ratio_over<'a>(
    err: impl Iterator<Item = &'a Complex64>,
    y0: impl Iterator<Item = &'a Complex64>,
    y1: impl Iterator<Item = &'a Complex64>,
    atol: f64,
    rtol: f64,
) -> f64 {
    err.zip(y0.zip(y1))
        .map(|(e, (a, b))| e.norm() / (atol + rtol * a.norm().max(b.norm())))
        .fold(0.0, |acc: f64, r| if r.is_nan() || acc.is_nan() { f64::NAN } else { acc.max(r) })
}

impl OdeState for DVector<Complex64> {
    fn axpy(&mut self, a: f64, x: &Self) {
        self.axpy(Complex64::new(a, 0.0), x, Complex64::new(1.0, 0.0));
    }

    fn error_ratio(err: &Self, y0: &Self, y1: &Self, atol: f64, rtol: f64) -> f64 {
        ratio_over(err.iter(), y0.iter(), y1.iter(), atol, rtol)
    }
}

impl OdeState for DMatrix<Complex64> {
    fn axpy(&mut self, a: f64, x: &Self) {
        self.zip_apply(x, |s, v| *s += v * a);
    }

    fn error_ratio(err: &Self, y0: &Self, y1: &Self, atol: f64, rtol: f64) -> f64 {
        ratio_over(err.iter(), y0.iter(), y1.iter(), atol, rtol)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Tolerance {
    pub atol: f64,
    pub rtol: f64,
    /// Upper bound on a single step, in the same units as `t`.
    pub max_step: f64,
}

impl Default for Tolerance {
    fn default() -> Self {
        Self { atol: 1e-10, rtol: 1e-10, max_step: f64::INFINITY }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct StepStats {
    pub accepted: usize,
    pub rejected: usize,
}

/// Step size collapsed below the representable resolution at time `t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepUnderflow {
    pub t: f64,
}

const C2: f64 = 1.0 / 5.0;
const C3: f64 = 3.0 / 10.0;
const C4: f64 = 4.0 / 5.0;
const C5: f64 = 8.0 / 9.0;
const A21: f64 = 1.0 / 5.0;
const A31: f64 = 3.0 / 40.0;
const A32: f64 = 9.0 / 40.0;
const A41: f64 = 44.0 / 45.0;
const A42: f64 = -56.0 / 15.0;
const A43: f64 = 32.0 / 9.0;
const A51: f64 = 19372.0 / 6561.0;
const A52: f64 = -25360.0 / 2187.0;
const A53: f64 = 64448.0 / 6561.0;
const A54: f64 = -212.0 / 729.0;
const A61: f64 = 9017.0 / 3168.0;
const A62: f64 = -355.0 / 33.0;
const A63: f64 = 46732.0 / 5247.0;
const A64: f64 = 49.0 / 176.0;
const A65: f64 = -5103.0 / 18656.0;
const B1: f64 = 35.0 / 384.0;
const B3: f64 = 500.0 / 1113.0;
const B4: f64 = 125.0 / 192.0;
const B5: f64 = -2187.0 / 6784.0;
const B6: f64 = 11.0 / 84.0;
// Differences between the 5th- and embedded 4th-order weights.
const E1: f64 = 71.0 / 57600.0;
const E3: f64 = -71.0 / 16695.0;
const E4: f64 = 71.0 / 1920.0;
const E5: f64 = -17253.0 / 339200.0;
const E6: f64 = 22.0 / 525.0;
const E7: f64 = -1.0 / 40.0;

fn combo<S: OdeState>(y: &S, h: f64, terms: &[(f64, &S)]) -> S {
    let mut out = y.clone();
    for &(c, k) in terms {
        if c != 0.0 {
            out.axpy(h * c, k);
        }
    }
    out
}

/// Integrates `dy/dt = rhs(t, y)` from `t0` to `t1`.
///
/// `on_accept` is called after every accepted step with the new time and
/// state.
pub fn integrate<S, F, G>(
    mut rhs: F,
    t0: f64,
    t1: f64,
    y0: S,
    tol: Tolerance,
    mut on_accept: G,
) -> Result<(S, StepStats), StepUnderflow>
where
    S: OdeState,
    F: FnMut(f64, &S) -> S,
    G: FnMut(f64, &S),
{
    let span = t1 - t0;
    let mut stats = StepStats::default();
    if span <= 0.0 {
        return Ok((y0, stats));
    }
    let mut t = t0;
    let mut y = y0;
    let mut k1 = rhs(t, &y);
    let mut h = (span / 100.0).min(tol.max_step);
    let h_min = span * 1e-14;

    while t < t1 {
        if t + h > t1 {
            h = t1 - t;
        }
        let k2 = rhs(t + C2 * h, &combo(&y, h, &[(A21, &k1)]));
        let k3 = rhs(t + C3 * h, &combo(&y, h, &[(A31, &k1), (A32, &k2)]));
        let k4 = rhs(t + C4 * h, &combo(&y, h, &[(A41, &k1), (A42, &k2), (A43, &k3)]));
        let k5 = rhs(t + C5 * h, &combo(&y, h, &[(A51, &k1), (A52, &k2), (A53, &k3), (A54, &k4)]));
        let k6 = rhs(
            t + h,
            &combo(&y, h, &[(A61, &k1), (A62, &k2), (A63, &k3), (A64, &k4), (A65, &k5)]),
        );
        let y_new = combo(&y, h, &[(B1, &k1), (B3, &k3), (B4, &k4), (B5, &k5), (B6, &k6)]);
        let k7 = rhs(t + h, &y_new);

        let mut err = combo(&y, h, &[(E1, &k1), (E3, &k3), (E4, &k4), (E5, &k5), (E6, &k6), (E7, &k7)]);
        err.axpy(-1.0, &y);
        let ratio = S::error_ratio(&err, &y, &y_new, tol.atol, tol.rtol);

        if ratio <= 1.0 {
            t += h;
            y = y_new;
            k1 = k7;
            stats.accepted += 1;
            on_accept(t, &y);
            let factor = if ratio == 0.0 { 5.0 } else { (0.9 * ratio.powf(-0.2)).clamp(0.2, 5.0) };
            h = (h * factor).min(tol.max_step);
        } else {
            stats.rejected += 1;
            let factor = if ratio.is_finite() { (0.9 * ratio.powf(-0.25)).clamp(0.1, 0.9) } else { 0.1 };
            h *= factor;
            if h < h_min {
                return Err(StepUnderflow { t });
            }
        }
    }
    Ok((y, stats))
}
