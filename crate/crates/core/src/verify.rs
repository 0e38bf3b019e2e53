//! Invariant checks run against a single model, each with a measured slack.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::continuum::{run_pde, verify_affine_connection, ContinuumField, PdeOptions};
use crate::error::Result;
use crate::lattice::default_grid;
use crate::model::{Chart, Side, SystemModel, Vector};
use crate::potential::{
    find_fixed_points, force_line_integral, potential, potential_flow, potential_gradient,
    FixedPointReport,
};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct InvariantCheck {
    pub name: String,
    pub measured: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl InvariantCheck {
    /// Passes when `measured <= tolerance` (NaN fails).
    pub fn at_most(name: &str, measured: f64, tolerance: f64) -> Self {
        Self {
            name: name.to_string(),
            measured,
            tolerance,
            passed: measured <= tolerance,
        }
    }

    /// Passes when `measured >= tolerance` (NaN fails).
    pub fn at_least(name: &str, measured: f64, tolerance: f64) -> Self {
        Self {
            name: name.to_string(),
            measured,
            tolerance,
            passed: measured >= tolerance,
        }
    }

    /// A yes/no condition, recorded as 1 or 0 against a tolerance of 1.
    pub fn flag(name: &str, ok: bool) -> Self {
        Self {
            name: name.to_string(),
            measured: f64::from(u8::from(ok)),
            tolerance: 1.0,
            passed: ok,
        }
    }
}

/// `max |V(u*) − Ṽ(v*)|` over the listed fixed points.
pub fn fixed_point_potential_gap(report: &FixedPointReport) -> f64 {
    report
        .points
        .iter()
        .map(|p| (p.potential - p.dual_potential).abs())
        .fold(0.0, f64::max)
}

/// Worst relative error of the closed-form gradient of `V` against central
/// differences at `samples` random points of the model's sample box.
pub fn gradient_identity_error(
    model: &dyn SystemModel,
    samples: usize,
    rng: &mut ChaCha8Rng,
) -> f64 {
    const H: f64 = 1e-5;
    let bx = model.sample_box();
    let mut worst = 0.0_f64;
    for _ in 0..samples {
        let u = bx.sample(rng);
        let exact = potential_gradient(model, u.as_slice());
        let fd = Vector::from_fn(model.dim(), |a, _| {
            let mut p = u.clone();
            let mut m = u.clone();
            p[a] += H;
            m[a] -= H;
            (potential(model, p.as_slice()) - potential(model, m.as_slice())) / (2.0 * H)
        });
        let scale = fd.amax().max(1e-8);
        worst = worst.max((exact - fd).amax() / scale);
    }
    worst
}

/// Largest per-step increase of `V` along Euler flows from random starts, and
/// the largest distance of an end point from the nearest listed fixed point.
pub fn flow_descent(
    model: &dyn SystemModel,
    report: &FixedPointReport,
    starts: usize,
    rng: &mut ChaCha8Rng,
) -> (f64, f64) {
    let bx = model.sample_box();
    let mut max_increase = f64::NEG_INFINITY;
    let mut max_miss = 0.0_f64;
    for _ in 0..starts {
        let u0 = bx.sample(rng);
        let trace = potential_flow(model, u0.as_slice(), 1e-3, 2_000_000, 1e-11);
        max_increase = max_increase.max(trace.max_increase);
        let miss = report
            .points
            .iter()
            .map(|p| {
                p.u.iter()
                    .zip(&trace.end)
                    .fold(0.0_f64, |m, (a, b)| m.max((a - b).abs()))
            })
            .fold(f64::INFINITY, f64::min);
        max_miss = max_miss.max(if trace.converged { miss } else { f64::INFINITY });
    }
    (max_increase, max_miss)
}

/// Worst gap between the force line integral and the potential difference.
pub fn line_integral_error(
    model: &dyn SystemModel,
    segments: usize,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let bx = model.sample_box();
    let mut worst = 0.0_f64;
    for _ in 0..segments {
        let (ua, ub) = (bx.sample(rng), bx.sample(rng));
        let (va, vb) = (model.grad_g(ua.as_slice()), model.grad_g(ub.as_slice()));
        let integral = force_line_integral(model, va.as_slice(), vb.as_slice(), 400)?;
        let diff = potential(model, ub.as_slice()) - potential(model, ua.as_slice());
        worst = worst.max((integral - diff).abs());
    }
    Ok(worst)
}

/// Largest `‖Γ‖∞` over random points of the sample box.
pub fn connection_error(
    model: &dyn SystemModel,
    samples: usize,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let bx = model.sample_box();
    let mut worst = 0.0_f64;
    for _ in 0..samples {
        let u = bx.sample(rng);
        worst = worst.max(verify_affine_connection(model, u.as_slice())?.max_abs());
    }
    Ok(worst)
}

/// Runs the invariant suite for one model.
pub fn invariant_suite(model: &dyn SystemModel, seed: u64) -> Result<Vec<InvariantCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let report = find_fixed_points(model, default_grid(model.dim()))?;
    let mut checks = vec![InvariantCheck::at_most(
        "fixed_point_potential_equality",
        fixed_point_potential_gap(&report),
        1e-10,
    )];
    checks.push(InvariantCheck::at_most(
        "potential_gradient_identity",
        gradient_identity_error(model, 100, &mut rng),
        1e-5,
    ));
    let (increase, miss) = flow_descent(model, &report, 10, &mut rng);
    checks.push(InvariantCheck::at_most(
        "uncoupled_flow_descent",
        increase,
        1e-12,
    ));
    checks.push(InvariantCheck::at_most(
        "uncoupled_flow_endpoint",
        miss,
        1e-6,
    ));
    checks.push(InvariantCheck::at_most(
        "force_line_integral",
        line_integral_error(model, 10, &mut rng)?,
        1e-6,
    ));
    checks.push(InvariantCheck::at_most(
        "affine_connection",
        connection_error(model, 50, &mut rng)?,
        1e-6,
    ));

    let bx = model.sample_box();
    let mut symmetry = 0.0_f64;
    for _ in 0..10 {
        let u = bx.sample(&mut rng);
        symmetry = symmetry.max(Side::G.third(model, u.as_slice()).symmetry_defect());
    }
    checks.push(InvariantCheck::at_most(
        "third_derivative_symmetry",
        symmetry,
        1e-12,
    ));

    if let (Some(good), Some(bad)) = (report.good_state(), report.worst_stable_state()) {
        let field = ContinuumField::from_states(
            model,
            1,
            33,
            Chart::VAffine,
            1e-2,
            good.as_slice(),
            bad.as_slice(),
        )?;
        let opts = PdeOptions {
            max_steps: 500,
            stop_eps: 1e-10,
            ..Default::default()
        };
        let run = run_pde(model, field, &opts, |_, _| {})?;
        checks.push(InvariantCheck::at_most(
            "pde_energy_descent",
            run.max_energy_increase.max(0.0),
            1e-9,
        ));
    }
    Ok(checks)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::RegularBec;

    #[test]
    fn suite_passes_on_bec() {
        let m = RegularBec::new(3, 6, 0.45).unwrap();
        let checks = invariant_suite(&m, 7).unwrap();
        for c in &checks {
            assert!(c.passed, "{c:?}");
        }
        assert!(checks.len() >= 7);
    }

    #[test]
    fn constructors() {
        assert!(!InvariantCheck::at_most("x", f64::NAN, 1.0).passed);
        assert!(InvariantCheck::at_most("x", 1.0, 1.0).passed);
        assert!(InvariantCheck::at_least("x", 2.5, 2.0).passed);
        assert!(!InvariantCheck::at_least("x", f64::NAN, 2.0).passed);
        assert!(!InvariantCheck::flag("x", false).passed);
    }
}
