//! Central finite-difference comparison against tape gradients.

use super::{grad, NumericsError, RealArray, Result, Tape, Var};

pub const DEFAULT_STEP: f64 = 1e-5;

/// Relative errors are measured against `max(|analytic|, |numeric|, floor)`
/// so entries whose true gradient is zero do not divide by round-off.
pub const DEFAULT_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
    pub max_rel_error: f64,
    pub worst_index: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_error < tolerance
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// `(f(θ + h·eᵢ) − f(θ − h·eᵢ)) / 2h` for every coordinate.
pub fn central_difference<E: From<NumericsError>>(
    mut f: impl FnMut(&RealArray<f64>) -> std::result::Result<f64, E>,
    theta: &RealArray<f64>,
    step: f64,
) -> std::result::Result<RealArray<f64>, E> {
    let mut numeric = Vec::with_capacity(theta.len());
    let mut probe = theta.data().to_vec();
    for i in 0..theta.len() {
        let original = probe[i];
        probe[i] = original + step;
        let plus = f(&RealArray::new(theta.shape().to_vec(), probe.clone())?)?;
        probe[i] = original - step;
        let minus = f(&RealArray::new(theta.shape().to_vec(), probe.clone())?)?;
        probe[i] = original;
        numeric.push((plus - minus) / (2.0 * step));
    }
    Ok(RealArray::new(theta.shape().to_vec(), numeric)?)
}

pub fn compare(analytic: &RealArray<f64>, numeric: &RealArray<f64>, floor: f64) -> GradCheckReport {
    let mut worst = (0.0, 0);
    for (i, (&a, &n)) in analytic.data().iter().zip(numeric.data()).enumerate() {
        let e = relative_error(a, n, floor);
        if e > worst.0 {
            worst = (e, i);
        }
    }
    GradCheckReport {
        analytic: analytic.data().to_vec(),
        numeric: numeric.data().to_vec(),
        max_rel_error: worst.0,
        worst_index: worst.1,
    }
}

/// Checks the gradient of a scalar function recorded by `build`, which
/// receives a fresh tape and the leaf holding `theta`. `prepare` configures
/// the tape used for the analytic pass only.
pub fn check_leaf<'w>(
    build: impl Fn(&mut Tape<'w, f64>, Var) -> Result<Var>,
    prepare: impl Fn(&mut Tape<'w, f64>),
    theta: &RealArray<f64>,
    step: f64,
    floor: f64,
) -> Result<GradCheckReport> {
    let mut tape = Tape::new();
    prepare(&mut tape);
    let leaf = tape.leaf(theta.clone());
    let out = build(&mut tape, leaf)?;
    let analytic = grad(&tape, out, leaf)?;
    let numeric = central_difference(
        |probe| {
            let mut t = Tape::new();
            let l = t.leaf(probe.clone());
            let o = build(&mut t, l)?;
            t.value(o).scalar_value()
        },
        theta,
        step,
    )?;
    Ok(compare(&analytic, &numeric, floor))
}
