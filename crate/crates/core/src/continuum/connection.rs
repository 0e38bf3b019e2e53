//! Numerical check that the affine connection vanishes in `ṽ` coordinates.

use super::affine::invert_gradient;
use crate::error::{GscError, Result};
use crate::model::{Side, SystemModel, Tensor3};
use crate::numeric::ridders_derivative;
use crate::potential::{condition_number, MAX_CONDITION};

/// `Γₐᵇᶜ = gᵈᵇ gᵉᶜ ∂ₐ∂_d∂_e G − (∂g_ad/∂ṽ_c) gᵈᵇ` at `u`.
///
/// The first term uses the model's third derivatives; the second
/// differentiates `g(Φ(ṽ))` numerically, so the result is zero up to
/// finite-difference error.
pub fn verify_affine_connection(model: &dyn SystemModel, u: &[f64]) -> Result<Tensor3> {
    let n = model.dim();
    if u.len() != n {
        return Err(GscError::DimensionMismatch {
            expected: n,
            got: u.len(),
        });
    }
    let g = model.hess_g(u);
    let condition = condition_number(&g);
    if !(condition <= MAX_CONDITION) {
        return Err(GscError::SingularHessian { condition });
    }
    let ginv = g
        .clone()
        .try_inverse()
        .ok_or(GscError::SingularHessian { condition })?;
    let third = Side::G.third(model, u);
    let vt = model.grad_g(u);
    let dtilde = model.domain_dtilde();

    // dg[c] = ∂g/∂ṽ_c, flattened row-major.
    let mut dg = Vec::with_capacity(n);
    for c in 0..n {
        let room = (vt[c] - dtilde.lo[c]).min(dtilde.hi[c] - vt[c]);
        if !(room > 0.0) {
            return Err(GscError::invalid(
                "u",
                format!("affine image of u lies on the domain edge along axis {c}"),
            ));
        }
        let h = 0.1 * room;
        let failure = std::sync::Mutex::new(None);
        let (d, _err) = ridders_derivative(
            |t| {
                let mut target = vt.clone();
                target[c] += t;
                match invert_gradient(model, Side::G, target.as_slice(), Some(u)) {
                    Ok(p) => model.hess_g(p.as_slice()).iter().copied().collect(),
                    Err(e) => {
                        failure.lock().unwrap().get_or_insert(e);
                        vec![f64::NAN; n * n]
                    }
                }
            },
            h,
        );
        if let Some(e) = failure.into_inner().unwrap() {
            return Err(e);
        }
        dg.push(d);
    }

    let mut gamma = Tensor3::zeros(n);
    for a in 0..n {
        for b in 0..n {
            for c in 0..n {
                let mut t1 = 0.0;
                let mut t2 = 0.0;
                for d in 0..n {
                    for e in 0..n {
                        t1 += ginv[(d, b)] * ginv[(e, c)] * third.get(a, d, e);
                    }
                    // nalgebra iterates column-major: entry (a, d) sits at a + d n.
                    t2 += dg[c][a + d * n] * ginv[(d, b)];
                }
                gamma.set(a, b, c, t1 - t2);
            }
        }
    }
    Ok(gamma)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ProductModel, RegularBec};

    #[test]
    fn vanishes_for_bec() {
        let m = RegularBec::new(3, 6, 0.5).unwrap();
        let gamma = verify_affine_connection(&m, &[0.5]).unwrap();
        assert!(gamma.max_abs() < 1e-6, "{}", gamma.max_abs());
    }

    #[test]
    fn product_is_block_diagonal() {
        let m = ProductModel::new(vec![
            Box::new(RegularBec::new(3, 6, 0.45).unwrap()),
            Box::new(RegularBec::new(4, 8, 0.45).unwrap()),
        ])
        .unwrap();
        let gamma = verify_affine_connection(&m, &[0.3, 0.2]).unwrap();
        assert!(gamma.max_abs() < 1e-6);
    }

    #[test]
    fn singular_at_full_erasure() {
        let m = RegularBec::new(3, 6, 0.45).unwrap();
        assert!(matches!(
            verify_affine_connection(&m, &[1.0]),
            Err(GscError::SingularHessian { .. })
        ));
    }
}
