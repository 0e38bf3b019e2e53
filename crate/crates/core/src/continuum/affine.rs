//! Affine coordinates `(ũ, ṽ) = (∇F(v), ∇G(u))` and their inverses.

use crate::error::{GscError, Result};
use crate::model::{Chart, Side, SystemModel, Vector, VectorState};

/// Sup-norm residual at which a gradient inversion is accepted.
pub const INVERSION_TOL: f64 = 1e-12;
const MAX_NEWTON_ITERS: usize = 200;

fn sup(x: &Vector) -> f64 {
    x.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
}

/// Solves `∇S(x) = target` for `x` in the domain of side `S` by damped Newton.
///
/// `side = Side::G` computes `Φ(ṽ)`; `side = Side::F` computes `Ψ(ũ)`.
pub fn invert_gradient(
    model: &dyn SystemModel,
    side: Side,
    target: &[f64],
    seed: Option<&[f64]>,
) -> Result<Vector> {
    let n = model.dim();
    if target.len() != n {
        return Err(GscError::DimensionMismatch {
            expected: n,
            got: target.len(),
        });
    }
    if target.iter().any(|t| !t.is_finite()) {
        return Err(GscError::NonFinite {
            context: "gradient inversion target".into(),
        });
    }
    let domain = side.domain(model);
    let center = domain.center();
    let target = Vector::from_column_slice(target);
    let mut x = match seed {
        Some(s) => Vector::from_column_slice(s),
        None => center.clone(),
    };
    domain.clamp(x.as_mut_slice());

    let residual = |x: &Vector| side.grad(model, x.as_slice()) - &target;
    let mut res = residual(&x);
    let mut rn = sup(&res);
    let mut polished = false;

    for _ in 0..MAX_NEWTON_ITERS {
        if rn <= INVERSION_TOL && polished {
            return Ok(x);
        }
        if rn <= INVERSION_TOL {
            polished = true;
        }
        let hess = side.hess(model, x.as_slice());
        let step = hess
            .lu()
            .solve(&(-&res))
            .filter(|d| d.iter().all(|v| v.is_finite()));
        let Some(step) = step else {
            if rn <= INVERSION_TOL {
                return Ok(x);
            }
            // Singular Hessian: move off the degenerate point toward the box centre.
            x += 0.01 * (&center - &x);
            x.iter_mut().enumerate().for_each(|(i, xi)| {
                if *xi == domain.lo[i] {
                    *xi += 1e-6 * domain.width(i);
                }
            });
            res = residual(&x);
            rn = sup(&res);
            continue;
        };

        let mut alpha = 1.0;
        let mut accepted = None;
        while alpha > 1e-12 {
            let mut trial = &x + alpha * &step;
            domain.clamp(trial.as_mut_slice());
            let tres = residual(&trial);
            let trn = sup(&tres);
            if trn < rn || (trn <= rn && rn <= INVERSION_TOL) {
                accepted = Some((trial, tres, trn));
                break;
            }
            alpha *= 0.5;
        }
        match accepted {
            Some((trial, tres, trn)) => {
                x = trial;
                res = tres;
                rn = trn;
            }
            None if rn <= INVERSION_TOL => return Ok(x),
            None => break,
        }
    }
    if rn <= INVERSION_TOL {
        return Ok(x);
    }
    Err(GscError::NoConvergence {
        residual: rn,
        last: x.as_slice().to_vec(),
    })
}

/// Forward map into affine coordinates: `u ↦ ṽ = ∇G(u)`, `v ↦ ũ = ∇F(v)`.
pub fn to_affine(model: &dyn SystemModel, state: &VectorState) -> Result<VectorState> {
    let (values, chart) = match state.chart {
        Chart::U => (model.grad_g(state.as_slice()), Chart::VAffine),
        Chart::V => (model.grad_f(state.as_slice()), Chart::UAffine),
        other => {
            return Err(GscError::invalid(
                "chart",
                format!("to_affine expects U or V, got {other:?}"),
            ));
        }
    };
    if values.iter().any(|v| !v.is_finite()) {
        return Err(GscError::NonFinite {
            context: "to_affine".into(),
        });
    }
    Ok(VectorState::new(values, chart))
}

/// Inverse map: `ṽ ↦ Φ(ṽ) = u`, `ũ ↦ Ψ(ũ) = v`.
pub fn from_affine(
    model: &dyn SystemModel,
    state: &VectorState,
    seed: Option<&[f64]>,
) -> Result<VectorState> {
    match state.chart {
        Chart::VAffine => Ok(VectorState::new(
            invert_gradient(model, Side::G, state.as_slice(), seed)?,
            Chart::U,
        )),
        Chart::UAffine => Ok(VectorState::new(
            invert_gradient(model, Side::F, state.as_slice(), seed)?,
            Chart::V,
        )),
        other => Err(GscError::invalid(
            "chart",
            format!("from_affine expects an affine chart, got {other:?}"),
        )),
    }
}
