//! Energy tensor and the `K = 1` conservation law of stationary `ũ` profiles.

use serde::Serialize;

use super::flow::current_preimages;
use super::ContinuumField;
use crate::error::{GscError, Result};
use crate::model::{Chart, Matrix, SystemModel, Vector};
use crate::potential::dual_potential;

fn require_u_chart(field: &ContinuumField) -> Result<()> {
    if field.chart() != Chart::UAffine {
        return Err(GscError::invalid(
            "chart",
            "expected a field in the u-affine chart",
        ));
    }
    Ok(())
}

/// `∂ũ/∂x^axis` at a node: central in the interior, second-order one-sided
/// on the boundary.
fn axis_derivative(field: &ContinuumField, node: usize, axis: usize) -> Vector {
    let s = field.stride(axis);
    let i = field.grid_index(node)[axis];
    let n = field.n();
    let h = field.dx();
    let at = |node: usize| Vector::from_column_slice(field.value(node));
    if i == 0 {
        (-3.0 * at(node) + 4.0 * at(node + s) - at(node + 2 * s)) / (2.0 * h)
    } else if i == n - 1 {
        (3.0 * at(node) - 4.0 * at(node - s) + at(node - 2 * s)) / (2.0 * h)
    } else {
        (at(node + s) - at(node - s)) / (2.0 * h)
    }
}

fn tensor_at(
    model: &dyn SystemModel,
    field: &ContinuumField,
    node: usize,
    preimage: &[f64],
) -> Matrix {
    let k = field.k();
    let m = field.m_coeff();
    let g = model.hess_g(field.value(node));
    let grads: Vec<Vector> = (0..k).map(|a| axis_derivative(field, node, a)).collect();
    let gram = Matrix::from_fn(k, k, |a, b| grads[a].dot(&(&g * &grads[b])));
    let lagrangian = dual_potential(model, preimage) + 0.5 * m * gram.trace();
    m * gram - Matrix::identity(k, k) * lagrangian
}

/// `T^α_β = M ∂_α ũᵃ ∂_β ũᵇ g_ab(ũ) − δ^α_β 𝔏̃` at a node, with
/// `𝔏̃ = Ṽ(Ψ(ũ)) + (M/2) Σ_α ⟨∂_α ũ, g ∂_α ũ⟩`.
pub fn energy_tensor(
    model: &dyn SystemModel,
    field: &ContinuumField,
    node: usize,
) -> Result<Matrix> {
    require_u_chart(field)?;
    if node >= field.nodes() {
        return Err(GscError::invalid(
            "node",
            format!("node {node} out of range"),
        ));
    }
    let pre = super::affine::invert_gradient(
        model,
        crate::model::Side::F,
        field.value(node),
        Some(field.preimage(node)),
    )?;
    Ok(tensor_at(model, field, node, pre.as_slice()))
}

#[derive(Clone, Debug, Serialize)]
pub struct ConservationReport {
    pub x: Vec<f64>,
    /// `E(x) = Ṽ(Ψ(ũ)) − (M/2)⟨ũ′, g ũ′⟩` per node.
    pub energy: Vec<f64>,
    /// `E` at the left boundary node.
    pub reference: f64,
    /// `max |E(x) − reference|` over interior nodes.
    pub max_drift: f64,
}

/// Evaluates the first integral `E(x)` along a `K = 1` profile.
pub fn conservation_check(
    model: &dyn SystemModel,
    field: &ContinuumField,
) -> Result<ConservationReport> {
    require_u_chart(field)?;
    if field.k() != 1 {
        return Err(GscError::invalid(
            "k",
            "conservation check is defined for K = 1",
        ));
    }
    let dim = field.dim();
    let pre = current_preimages(model, field)?;
    let energy: Vec<f64> = (0..field.nodes())
        .map(|node| -tensor_at(model, field, node, &pre[node * dim..(node + 1) * dim])[(0, 0)])
        .collect();
    let reference = energy[0];
    let max_drift = energy[1..field.n() - 1]
        .iter()
        .fold(0.0_f64, |m, e| m.max((e - reference).abs()));
    let x = (0..field.nodes()).map(|i| field.coords(i)[0]).collect();
    Ok(ConservationReport {
        x,
        energy,
        reference,
        max_drift,
    })
}
