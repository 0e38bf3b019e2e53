//! Gradient flow of the energy functional and the stationary problem.
//!
//! The discrete energy is
//!
//! ```text
//! H = Σ_nodes w_i P(x_i) + (M/2) Σ_edges (w_e/Δx) δᵀ Q(x_mid) δ
//! ```
//!
//! with trapezoid weights, `δ` the difference across an edge and `Q` the
//! coupling metric at the edge midpoint. The coupling operator is the exact
//! node gradient of the edge sum divided by `−M w_i`, so an explicit step
//! `x ← x + dt · mob · (M 𝔠 − ∇P)` is gradient descent on `H` under the
//! positive semidefinite mobility.

use rayon::prelude::*;
use serde::Serialize;

use super::{ChartOps, ContinuumField};
use crate::error::{GscError, Result};
use crate::lattice::LatticeField;
use crate::model::{Chart, SystemModel, Vector};
use crate::numeric::pairwise_sum;

fn sup(xs: &[f64]) -> f64 {
    xs.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
}

fn quad(q: &nalgebra::DMatrix<f64>, d: &Vector) -> f64 {
    d.dot(&(q * d))
}

fn coupling_at(
    model: &dyn SystemModel,
    field: &ContinuumField,
    ops: ChartOps,
    node: usize,
) -> Vector {
    let side = ops.metric_side();
    let dx2 = field.dx() * field.dx();
    let x = Vector::from_column_slice(field.value(node));
    let mut c = Vector::zeros(field.dim());
    for axis in 0..field.k() {
        let s = field.stride(axis);
        let xp = Vector::from_column_slice(field.value(node + s));
        let xm = Vector::from_column_slice(field.value(node - s));
        let dp = &xp - &x;
        let dm = &x - &xm;
        let midp = 0.5 * (&x + &xp);
        let midm = 0.5 * (&x + &xm);
        let qp = side.hess(model, midp.as_slice());
        let qm = side.hess(model, midm.as_slice());
        let tp = side
            .third(model, midp.as_slice())
            .contract2(dp.as_slice(), dp.as_slice());
        let tm = side
            .third(model, midm.as_slice())
            .contract2(dm.as_slice(), dm.as_slice());
        c += (qp * &dp - qm * &dm - 0.25 * (tp + tm)) / dx2;
    }
    c
}

/// Coupling operator `𝔠` (`ṽ` chart, metric `f`) or `𝔠̃` (`ũ` chart, metric
/// `g`) at an interior node.
pub fn coupling_operator(
    model: &dyn SystemModel,
    field: &ContinuumField,
    node: usize,
) -> Result<Vector> {
    let ops = ChartOps::new(field.chart())?;
    if node >= field.nodes() || field.is_boundary(node) {
        return Err(GscError::invalid(
            "node",
            format!("node {node} is not an interior node"),
        ));
    }
    Ok(coupling_at(model, field, ops, node))
}

/// Per-node quantities of one flow evaluation.
struct NodeTerms {
    preimages: Vec<f64>,
    potentials: Vec<f64>,
    /// `M 𝔠 − ∇P` at interior nodes, zero on the boundary.
    residual: Vec<f64>,
    /// `mob · residual`.
    rate: Vec<f64>,
}

fn evaluate(
    model: &dyn SystemModel,
    field: &ContinuumField,
    with_rates: bool,
) -> Result<NodeTerms> {
    let ops = ChartOps::new(field.chart())?;
    let dim = field.dim();
    let m = field.m_coeff();
    let per_node: Vec<Result<(Vector, f64, Vector, Vector)>> = (0..field.nodes())
        .into_par_iter()
        .map(|node| {
            let value = field.value(node);
            let zero = Vector::zeros(dim);
            if field.is_boundary(node) {
                let pre = Vector::from_column_slice(field.preimage(node));
                let p = ops.potential_value(model, pre.as_slice());
                return Ok((pre, p, zero.clone(), zero));
            }
            let pre = ops
                .preimage(model, value, Some(field.preimage(node)))
                .map_err(|e| match e {
                    GscError::NoConvergence { residual, .. } => GscError::NoConvergence {
                        residual,
                        last: field.coords(node),
                    },
                    other => other,
                })?;
            let p = ops.potential_value(model, pre.as_slice());
            if !with_rates {
                return Ok((pre, p, zero.clone(), zero));
            }
            let grad = ops.potential_gradient(model, value, pre.as_slice());
            let residual = m * coupling_at(model, field, ops, node) - grad;
            let mobility = ops.preimage_side().hess(model, pre.as_slice());
            let rate = mobility * &residual;
            Ok((pre, p, residual, rate))
        })
        .collect();

    let nodes = field.nodes();
    let mut terms = NodeTerms {
        preimages: Vec::with_capacity(nodes * dim),
        potentials: Vec::with_capacity(nodes),
        residual: Vec::with_capacity(nodes * dim),
        rate: Vec::with_capacity(nodes * dim),
    };
    for r in per_node {
        let (pre, p, res, rate) = r?;
        terms.preimages.extend_from_slice(pre.as_slice());
        terms.potentials.push(p);
        terms.residual.extend_from_slice(res.as_slice());
        terms.rate.extend_from_slice(rate.as_slice());
    }
    Ok(terms)
}

fn trapezoid_factor(i: usize, n: usize) -> f64 {
    if i == 0 || i == n - 1 {
        0.5
    } else {
        1.0
    }
}

fn energy_from(model: &dyn SystemModel, field: &ContinuumField, potentials: &[f64]) -> f64 {
    let side = ChartOps::new(field.chart())
        .expect("affine chart")
        .metric_side();
    let (k, n, dx) = (field.k(), field.n(), field.dx());
    let half_m = 0.5 * field.m_coeff();
    let contributions: Vec<f64> = (0..field.nodes())
        .into_par_iter()
        .map(|node| {
            let idx = field.grid_index(node);
            let factors: Vec<f64> = idx.iter().map(|&i| trapezoid_factor(i, n)).collect();
            let node_weight: f64 = factors.iter().product::<f64>() * dx.powi(k as i32);
            let mut acc = node_weight * potentials[node];
            for axis in 0..k {
                if idx[axis] == n - 1 {
                    continue;
                }
                let other = field.value(node + field.stride(axis));
                let here = field.value(node);
                let delta = Vector::from_fn(field.dim(), |a, _| other[a] - here[a]);
                let mid: Vec<f64> = here.iter().zip(other).map(|(a, b)| 0.5 * (a + b)).collect();
                let transverse: f64 = (0..k)
                    .filter(|&b| b != axis)
                    .map(|b| factors[b])
                    .product::<f64>()
                    * dx.powi(k as i32 - 1);
                acc += half_m * transverse / dx * quad(&side.hess(model, &mid), &delta);
            }
            acc
        })
        .collect();
    pairwise_sum(&contributions)
}

/// Preimages of every node, recomputed from the current values.
pub fn current_preimages(model: &dyn SystemModel, field: &ContinuumField) -> Result<Vec<f64>> {
    Ok(evaluate(model, field, false)?.preimages)
}

/// Discrete energy functional `H` of a field in either affine chart.
pub fn energy_functional(model: &dyn SystemModel, field: &ContinuumField) -> Result<f64> {
    let terms = evaluate(model, field, false)?;
    Ok(energy_from(model, field, &terms.potentials))
}

/// `M 𝔠 − ∂P` at every node (zero on the boundary), flattened node-major.
pub fn stationarity_residual(model: &dyn SystemModel, field: &ContinuumField) -> Result<Vec<f64>> {
    Ok(evaluate(model, field, true)?.residual)
}

/// Residual `M 𝔠̃ₐ(ũ) − ∂Ṽ(Ψ(ũ))/∂ũᵃ` of the stationary boundary-value problem.
pub fn bvp_residual(model: &dyn SystemModel, field: &ContinuumField) -> Result<Vec<f64>> {
    if field.chart() != Chart::UAffine {
        return Err(GscError::invalid(
            "chart",
            "bvp_residual expects a field in the u-affine chart",
        ));
    }
    stationarity_residual(model, field)
}

fn apply(
    model: &dyn SystemModel,
    field: &ContinuumField,
    terms: NodeTerms,
    dt: f64,
) -> Result<ContinuumField> {
    let domain = ChartOps::new(field.chart())?.value_domain(model);
    let dim = field.dim();
    let mut values: Vec<f64> = field
        .values()
        .iter()
        .zip(&terms.rate)
        .map(|(x, r)| x + dt * r)
        .collect();
    if let Some(bad) = values
        .chunks(dim)
        .position(|c| c.iter().any(|x| !x.is_finite()))
    {
        return Err(GscError::NonFinite {
            context: format!(
                "pde_step at node {bad} (x = {:?}); time step too large?",
                field.coords(bad)
            ),
        });
    }
    values.chunks_mut(dim).for_each(|c| domain.clamp(c));
    let mut next = field.clone();
    next.set_values(values, terms.preimages);
    Ok(next)
}

/// One explicit Euler step of the gradient flow on interior nodes.
pub fn pde_step(
    model: &dyn SystemModel,
    field: &ContinuumField,
    dt: f64,
) -> Result<ContinuumField> {
    if !(dt > 0.0) || !dt.is_finite() {
        return Err(GscError::invalid(
            "dt",
            format!("time step must be positive, got {dt}"),
        ));
    }
    let terms = evaluate(model, field, true)?;
    apply(model, field, terms, dt)
}

/// Bound on the spectral radius of `mobility · metric` over the chart.
fn spectral_bound(model: &dyn SystemModel, chart: Chart) -> Result<f64> {
    let ops = ChartOps::new(chart)?;
    let pre_side = ops.preimage_side();
    let pre_box = pre_side.domain(model);
    let value_box = ops.value_domain(model);
    let n = model.dim();
    let per_axis: usize = match n {
        1 => 257,
        2 => 65,
        _ => 9,
    };
    let mut worst = 0.0_f64;
    let total = per_axis.pow(n as u32);
    for mut flat in 0..total {
        let mut p = vec![0.0; n];
        for axis in (0..n).rev() {
            let i = flat % per_axis;
            flat /= per_axis;
            p[axis] = pre_box.lo[axis] + pre_box.width(axis) * i as f64 / (per_axis - 1) as f64;
        }
        let mut value = pre_side.grad(model, &p);
        value_box.clamp(value.as_mut_slice());
        let prod = pre_side.hess(model, &p) * ops.metric_side().hess(model, value.as_slice());
        let radius = prod
            .complex_eigenvalues()
            .iter()
            .map(|z| z.norm())
            .fold(0.0_f64, f64::max);
        if radius.is_finite() {
            worst = worst.max(radius);
        }
    }
    Ok(worst)
}

/// `dt = 0.2 Δx² / (K M λ_max + Δx²)`.
pub fn stable_time_step(
    model: &dyn SystemModel,
    chart: Chart,
    k: usize,
    n: usize,
    m_coeff: f64,
) -> Result<f64> {
    let dx = 2.0 / (n - 1) as f64;
    let lambda = spectral_bound(model, chart)?;
    Ok(0.2 * dx * dx / (k as f64 * m_coeff * lambda + dx * dx))
}

#[derive(Clone, Debug)]
pub struct PdeOptions {
    /// Explicit step; `None` picks [`stable_time_step`].
    pub dt: Option<f64>,
    pub max_steps: usize,
    /// Stop once `‖∂x/∂t‖∞` falls below this.
    pub stop_eps: f64,
    /// Keep every `record_every`-th energy row (the last one is always kept).
    pub record_every: usize,
}

impl Default for PdeOptions {
    fn default() -> Self {
        Self {
            dt: None,
            max_steps: 1_000_000,
            stop_eps: 1e-10,
            record_every: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EnergyRow {
    pub step: usize,
    pub energy: f64,
    pub max_residual: f64,
    pub max_rate: f64,
}

#[derive(Clone, Debug)]
pub struct PdeRun {
    pub field: ContinuumField,
    pub energy: Vec<EnergyRow>,
    pub steps: usize,
    pub converged: bool,
    pub dt: f64,
    /// Largest single-step increase of `H` over the whole run.
    pub max_energy_increase: f64,
    pub initial_residual: f64,
}

/// Integrates the flow until `‖∂x/∂t‖∞ < stop_eps` or `max_steps`.
///
/// `observe(step, field)` is called on every field before it is advanced.
pub fn run_pde(
    model: &dyn SystemModel,
    field: ContinuumField,
    opts: &PdeOptions,
    mut observe: impl FnMut(usize, &ContinuumField),
) -> Result<PdeRun> {
    let dt = match opts.dt {
        Some(dt) => dt,
        None => stable_time_step(model, field.chart(), field.k(), field.n(), field.m_coeff())?,
    };
    if !(dt > 0.0) || !dt.is_finite() {
        return Err(GscError::invalid(
            "dt",
            format!("time step must be positive, got {dt}"),
        ));
    }
    let every = opts.record_every.max(1);
    let mut field = field;
    let mut energy = Vec::new();
    let mut prev_h: Option<f64> = None;
    let mut max_increase = f64::NEG_INFINITY;
    let mut initial_residual = f64::NAN;
    let mut converged;
    let mut step = 0;
    loop {
        observe(step, &field);
        let terms = evaluate(model, &field, true)?;
        let h = energy_from(model, &field, &terms.potentials);
        let max_residual = sup(&terms.residual);
        let max_rate = sup(&terms.rate);
        if step == 0 {
            initial_residual = max_residual;
        }
        if let Some(p) = prev_h {
            max_increase = max_increase.max(h - p);
        }
        prev_h = Some(h);
        converged = max_rate < opts.stop_eps;
        let last = converged || step >= opts.max_steps;
        if step % every == 0 || last {
            energy.push(EnergyRow {
                step,
                energy: h,
                max_residual,
                max_rate,
            });
        }
        if last {
            break;
        }
        field = apply(model, &field, terms, dt)?;
        step += 1;
    }
    Ok(PdeRun {
        field,
        energy,
        steps: step,
        converged,
        dt,
        max_energy_increase: max_increase,
        initial_residual,
    })
}

/// Maps a `ṽ`-chart field to the `ũ` chart through `v = ṽ + (M/2) Δṽ`,
/// `ũ = ∇F(v)`. Boundary nodes map to `∇F(ṽ_G)`.
pub fn dual_field(model: &dyn SystemModel, field: &ContinuumField) -> Result<ContinuumField> {
    if field.chart() != Chart::VAffine {
        return Err(GscError::invalid(
            "chart",
            "dual_field expects a v-affine field",
        ));
    }
    let dim = field.dim();
    let dx2 = field.dx() * field.dx();
    let half_m = 0.5 * field.m_coeff();
    let dtilde = model.domain_dtilde();
    let d = model.domain_d();
    let mut values = Vec::with_capacity(field.values().len());
    let mut preimages = Vec::with_capacity(field.values().len());
    for node in 0..field.nodes() {
        let x = field.value(node);
        let mut v = x.to_vec();
        if !field.is_boundary(node) {
            for axis in 0..field.k() {
                let s = field.stride(axis);
                let (p, m) = (field.value(node + s), field.value(node - s));
                for a in 0..dim {
                    v[a] += half_m * (p[a] - 2.0 * x[a] + m[a]) / dx2;
                }
            }
        }
        dtilde.clamp(&mut v);
        let mut ut = model.grad_f(&v);
        d.clamp(ut.as_mut_slice());
        values.extend_from_slice(ut.as_slice());
        preimages.extend_from_slice(&v);
    }
    let mut out = ContinuumField {
        chart: Chart::UAffine,
        ..field.clone()
    };
    out.set_values(values, preimages);
    Ok(out)
}

/// Sup-norm distance between a converged `K = 1` lattice and a `ṽ`-chart
/// continuum profile, comparing `u` at every lattice site `x = l/L` against
/// the linear interpolant of `Φ(ṽ)`.
pub fn lattice_profile_distance(
    model: &dyn SystemModel,
    lattice: &LatticeField,
    field: &ContinuumField,
) -> Result<f64> {
    if lattice.config().k() != 1 || field.k() != 1 {
        return Err(GscError::invalid(
            "k",
            "profile distance is defined for K = 1",
        ));
    }
    if field.chart() != Chart::VAffine {
        return Err(GscError::invalid(
            "chart",
            "expected a v-affine continuum field",
        ));
    }
    let terms = evaluate(model, field, false)?;
    let dim = field.dim();
    let dx = field.dx();
    let l_size = lattice.config().l_size() as i64;
    let mut worst = 0.0_f64;
    for l in -(l_size - 1)..=(l_size - 1) {
        let x = l as f64 / l_size as f64;
        let s = ((x + 1.0) / dx).clamp(0.0, (field.n() - 1) as f64);
        let j = (s.floor() as usize).min(field.n() - 2);
        let t = s - j as f64;
        let ul = lattice.get(&[l]);
        for a in 0..dim {
            let u =
                (1.0 - t) * terms.preimages[j * dim + a] + t * terms.preimages[(j + 1) * dim + a];
            worst = worst.max((ul[a] - u).abs());
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{DomainBox, Matrix, RegularBec, Tensor3};

    /// `G(u) = ½ a u²`, `F(v) = ½ b v²` on generous boxes: constant metrics.
    #[derive(Debug)]
    struct Quadratic {
        a: f64,
        b: f64,
    }

    impl SystemModel for Quadratic {
        fn dim(&self) -> usize {
            1
        }
        fn eval_f(&self, v: &[f64]) -> f64 {
            0.5 * self.b * v[0] * v[0]
        }
        fn eval_g(&self, u: &[f64]) -> f64 {
            0.5 * self.a * u[0] * u[0]
        }
        fn grad_f(&self, v: &[f64]) -> Vector {
            Vector::from_element(1, self.b * v[0])
        }
        fn grad_g(&self, u: &[f64]) -> Vector {
            Vector::from_element(1, self.a * u[0])
        }
        fn hess_f(&self, _v: &[f64]) -> Matrix {
            Matrix::from_element(1, 1, self.b)
        }
        fn hess_g(&self, _u: &[f64]) -> Matrix {
            Matrix::from_element(1, 1, self.a)
        }
        fn third_f(&self, _v: &[f64]) -> Option<Tensor3> {
            Some(Tensor3::zeros(1))
        }
        fn third_g(&self, _u: &[f64]) -> Option<Tensor3> {
            Some(Tensor3::zeros(1))
        }
        fn domain_d(&self) -> DomainBox {
            DomainBox::new(vec![-10.0], vec![10.0])
        }
        fn domain_dtilde(&self) -> DomainBox {
            DomainBox::new(vec![-10.0], vec![10.0])
        }
    }

    #[test]
    fn laplacian_of_parabola() {
        let m = Quadratic { a: 1.0, b: 0.7 };
        let f = ContinuumField::new(&m, 1, 17, Chart::VAffine, 1e-2, &[1.0], &[0.0])
            .unwrap()
            .with_interior(&m, |x| vec![x[0] * x[0]])
            .unwrap();
        for node in 1..16 {
            let c = coupling_operator(&m, &f, node).unwrap()[0];
            assert!((c - 2.0 * 0.7).abs() < 1e-10, "node {node}: {c}");
        }
    }

    #[test]
    fn uniform_field_has_no_coupling() {
        let m = RegularBec::new(3, 6, 0.45).unwrap();
        let f = ContinuumField::new(&m, 2, 9, Chart::VAffine, 1e-3, &[0.3], &[0.3]).unwrap();
        let c = coupling_operator(&m, &f, f.center_node()).unwrap();
        assert_eq!(c[0], 0.0);
        assert!(coupling_operator(&m, &f, 0).is_err());
    }

    #[test]
    fn uniform_energy_is_volume_times_potential() {
        let m = RegularBec::new(3, 6, 0.45).unwrap();
        for k in 1..=2 {
            let f = ContinuumField::from_states(&m, k, 9, Chart::VAffine, 1e-3, &[0.3], &[0.3])
                .unwrap();
            let h = energy_functional(&m, &f).unwrap();
            let v = crate::potential::potential(&m, f.preimage(0));
            assert!((h - 2f64.powi(k as i32) * v).abs() < 1e-12, "k = {k}");
        }
    }

    #[test]
    fn boundary_nodes_do_not_move() {
        let m = RegularBec::new(3, 6, 0.46).unwrap();
        let f =
            ContinuumField::from_states(&m, 2, 9, Chart::VAffine, 1e-3, &[0.0], &[0.35]).unwrap();
        let dt = stable_time_step(&m, Chart::VAffine, 2, 9, 1e-3).unwrap();
        let g = pde_step(&m, &f, dt).unwrap();
        for node in (0..f.nodes()).filter(|&i| f.is_boundary(i)) {
            assert_eq!(g.value(node), f.value(node));
        }
        assert!(g.values() != f.values());
    }

    #[test]
    fn uniform_fixed_point_is_stationary() {
        let m = RegularBec::new(3, 6, 0.45).unwrap();
        let fp = crate::potential::find_fixed_points(&m, 2001).unwrap();
        let ub = fp.bad_state().unwrap();
        for chart in [Chart::VAffine, Chart::UAffine] {
            let f =
                ContinuumField::from_states(&m, 1, 33, chart, 1e-3, ub.as_slice(), ub.as_slice())
                    .unwrap();
            let g = pde_step(&m, &f, 1e-3).unwrap();
            let diff = sup(&g
                .values()
                .iter()
                .zip(f.values())
                .map(|(a, b)| a - b)
                .collect::<Vec<_>>());
            assert!(diff < 1e-14, "{chart:?}: {diff}");
        }
    }

    #[test]
    fn bvp_residual_needs_u_chart() {
        let m = RegularBec::new(3, 6, 0.45).unwrap();
        let f =
            ContinuumField::from_states(&m, 1, 9, Chart::VAffine, 1e-3, &[0.0], &[0.0]).unwrap();
        assert!(bvp_residual(&m, &f).is_err());
    }

    #[test]
    fn uniform_nonstationary_residual_is_minus_gradient() {
        let m = RegularBec::new(3, 6, 0.45).unwrap();
        let f = ContinuumField::new(&m, 1, 9, Chart::UAffine, 1e-3, &[0.2], &[0.2]).unwrap();
        let r = bvp_residual(&m, &f).unwrap();
        let v = f.preimage(4)[0];
        let expect = -(v - m.grad_g(&[0.2])[0]);
        assert!((r[4] - expect).abs() < 1e-12);
        assert_eq!(r[0], 0.0);
    }
}
