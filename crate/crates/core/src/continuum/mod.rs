//! Continuum limit of the coupled system on the hypercube `[−1, 1]^K`.
//!
//! Fields are stored in affine coordinates, either `ṽ = ∇G(u)` (chart
//! [`Chart::VAffine`]) or `ũ = ∇F(v)` (chart [`Chart::UAffine`]). The two
//! charts are treated symmetrically:
//!
//! | chart | coupling metric | preimage | mobility | potential |
//! |-------|-----------------|----------|----------|-----------|
//! | `ṽ`   | `f = ∇²F(ṽ)`    | `u = Φ(ṽ)` | `g(u)` | `V(u)`    |
//! | `ũ`   | `g = ∇²G(ũ)`    | `v = Ψ(ũ)` | `f(v)` | `Ṽ(v)`    |
//!
//! Boundary nodes are pinned to the affine image of `u_G`.

pub mod affine;
mod connection;
mod conservation;
mod flow;

pub use connection::verify_affine_connection;
pub use conservation::{conservation_check, energy_tensor, ConservationReport};
pub use flow::{
    bvp_residual, coupling_operator, current_preimages, dual_field, energy_functional,
    lattice_profile_distance, pde_step, run_pde, stable_time_step, stationarity_residual,
    EnergyRow, PdeOptions, PdeRun,
};

use crate::continuum::affine::invert_gradient;
use crate::error::{GscError, Result};
use crate::lattice::MAX_K;
use crate::model::{Chart, DomainBox, Side, SystemModel, Vector};
use crate::potential::{dual_potential, potential};

/// Per-chart choice of fields; see the module table.
#[derive(Copy, Clone, Debug)]
pub(crate) struct ChartOps {
    pub chart: Chart,
}

impl ChartOps {
    pub fn new(chart: Chart) -> Result<Self> {
        match chart {
            Chart::VAffine | Chart::UAffine => Ok(Self { chart }),
            other => Err(GscError::invalid(
                "chart",
                format!("continuum fields need an affine chart, got {other:?}"),
            )),
        }
    }

    /// Side whose Hessian is the coupling metric (field values are its argument).
    pub fn metric_side(self) -> Side {
        match self.chart {
            Chart::VAffine => Side::F,
            _ => Side::G,
        }
    }

    /// Side inverted to get the preimage (and whose Hessian is the mobility).
    pub fn preimage_side(self) -> Side {
        self.metric_side().other()
    }

    pub fn value_domain(self, model: &dyn SystemModel) -> DomainBox {
        self.metric_side().domain(model)
    }

    pub fn preimage(
        self,
        model: &dyn SystemModel,
        value: &[f64],
        seed: Option<&[f64]>,
    ) -> Result<Vector> {
        invert_gradient(model, self.preimage_side(), value, seed)
    }

    /// `V(Φ(ṽ))` or `Ṽ(Ψ(ũ))`, given the preimage.
    pub fn potential_value(self, model: &dyn SystemModel, preimage: &[f64]) -> f64 {
        match self.chart {
            Chart::VAffine => potential(model, preimage),
            _ => dual_potential(model, preimage),
        }
    }

    /// `∂V(Φ(ṽ))/∂ṽ = Φ(ṽ) − ∇F(ṽ)` or `∂Ṽ(Ψ(ũ))/∂ũ = Ψ(ũ) − ∇G(ũ)`.
    pub fn potential_gradient(
        self,
        model: &dyn SystemModel,
        value: &[f64],
        preimage: &[f64],
    ) -> Vector {
        Vector::from_column_slice(preimage) - self.metric_side().grad(model, value)
    }
}

/// Field on the uniform grid with `n` nodes per axis over `[−1, 1]^K`.
#[derive(Clone, Debug)]
pub struct ContinuumField {
    k: usize,
    n: usize,
    dim: usize,
    chart: Chart,
    m_coeff: f64,
    values: Vec<f64>,
    /// Last known preimage per node, used to seed Newton inversions.
    preimages: Vec<f64>,
}

impl ContinuumField {
    /// Uniform interior value with pinned boundary value, both given in the
    /// field's chart.
    pub fn new(
        model: &dyn SystemModel,
        k: usize,
        n: usize,
        chart: Chart,
        m_coeff: f64,
        boundary: &[f64],
        interior: &[f64],
    ) -> Result<Self> {
        let ops = ChartOps::new(chart)?;
        if k == 0 || k > MAX_K {
            return Err(GscError::invalid(
                "k",
                format!("coupling dimension must be in 1..={MAX_K}, got {k}"),
            ));
        }
        if n < 3 {
            return Err(GscError::invalid(
                "n",
                format!("need at least 3 nodes per axis, got {n}"),
            ));
        }
        if !(m_coeff > 0.0) || !m_coeff.is_finite() {
            return Err(GscError::invalid(
                "m",
                format!("coupling coefficient must be positive, got {m_coeff}"),
            ));
        }
        let dim = model.dim();
        for v in [boundary, interior] {
            if v.len() != dim {
                return Err(GscError::DimensionMismatch {
                    expected: dim,
                    got: v.len(),
                });
            }
        }
        let pb = ops.preimage(model, boundary, None)?;
        let pi = ops.preimage(model, interior, None)?;
        let nodes = n.pow(k as u32);
        let mut field = Self {
            k,
            n,
            dim,
            chart,
            m_coeff,
            values: Vec::with_capacity(nodes * dim),
            preimages: Vec::with_capacity(nodes * dim),
        };
        for i in 0..nodes {
            let boundary_node = field.is_boundary(i);
            field
                .values
                .extend_from_slice(if boundary_node { boundary } else { interior });
            field.preimages.extend_from_slice(if boundary_node {
                pb.as_slice()
            } else {
                pi.as_slice()
            });
        }
        Ok(field)
    }

    /// Field built from `u`-states at DE fixed points: in the `ṽ` chart the
    /// value is `∇G(u)`, in the `ũ` chart `∇F(∇G(u))`.
    pub fn from_states(
        model: &dyn SystemModel,
        k: usize,
        n: usize,
        chart: Chart,
        m_coeff: f64,
        u_boundary: &[f64],
        u_interior: &[f64],
    ) -> Result<Self> {
        let lift = |u: &[f64]| -> Vector {
            let vt = model.grad_g(u);
            match chart {
                Chart::UAffine => model.grad_f(vt.as_slice()),
                _ => vt,
            }
        };
        let b = lift(u_boundary);
        let i = lift(u_interior);
        Self::new(model, k, n, chart, m_coeff, b.as_slice(), i.as_slice())
    }

    /// Replaces interior values from a function of the node coordinates.
    pub fn with_interior(
        mut self,
        model: &dyn SystemModel,
        f: impl Fn(&[f64]) -> Vec<f64>,
    ) -> Result<Self> {
        let ops = ChartOps::new(self.chart)?;
        let mut seed: Option<Vector> = None;
        for i in 0..self.nodes() {
            if self.is_boundary(i) {
                continue;
            }
            let x = self.coords(i);
            let v = f(&x);
            if v.len() != self.dim {
                return Err(GscError::DimensionMismatch {
                    expected: self.dim,
                    got: v.len(),
                });
            }
            let p = ops.preimage(model, &v, seed.as_ref().map(|s| s.as_slice()))?;
            self.values[i * self.dim..(i + 1) * self.dim].copy_from_slice(&v);
            self.preimages[i * self.dim..(i + 1) * self.dim].copy_from_slice(p.as_slice());
            seed = Some(p);
        }
        Ok(self)
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn chart(&self) -> Chart {
        self.chart
    }

    pub fn m_coeff(&self) -> f64 {
        self.m_coeff
    }

    pub fn dx(&self) -> f64 {
        2.0 / (self.n - 1) as f64
    }

    pub fn nodes(&self) -> usize {
        self.n.pow(self.k as u32)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn value(&self, node: usize) -> &[f64] {
        &self.values[node * self.dim..(node + 1) * self.dim]
    }

    /// Cached preimage (`Φ(ṽ)` or `Ψ(ũ)`) of a node.
    pub fn preimage(&self, node: usize) -> &[f64] {
        &self.preimages[node * self.dim..(node + 1) * self.dim]
    }

    pub fn boundary_value(&self) -> &[f64] {
        self.value(0)
    }

    pub fn index_of(&self, idx: &[usize]) -> usize {
        idx.iter().fold(0, |acc, &i| acc * self.n + i)
    }

    pub fn grid_index(&self, mut node: usize) -> Vec<usize> {
        let mut out = vec![0; self.k];
        for axis in (0..self.k).rev() {
            out[axis] = node % self.n;
            node /= self.n;
        }
        out
    }

    pub fn coords(&self, node: usize) -> Vec<f64> {
        let dx = self.dx();
        self.grid_index(node)
            .iter()
            .map(|&i| -1.0 + i as f64 * dx)
            .collect()
    }

    pub fn is_boundary(&self, node: usize) -> bool {
        let mut rest = node;
        for _ in 0..self.k {
            let i = rest % self.n;
            if i == 0 || i == self.n - 1 {
                return true;
            }
            rest /= self.n;
        }
        false
    }

    /// Flat offset between neighbours along `axis`.
    pub fn stride(&self, axis: usize) -> usize {
        self.n.pow((self.k - 1 - axis) as u32)
    }

    /// Node at `x = 0` on every axis (`n` odd) or the nearest one below.
    pub fn center_node(&self) -> usize {
        self.index_of(&vec![(self.n - 1) / 2; self.k])
    }

    /// Sup-norm distance of every node from a constant vector.
    pub fn sup_deviation(&self, value: &[f64]) -> f64 {
        self.values
            .chunks(self.dim)
            .flat_map(|c| c.iter().zip(value).map(|(a, b)| (a - b).abs()))
            .fold(0.0, f64::max)
    }

    /// Binary dump: `K`, `n`, `N` as little-endian `u64`, then the values as
    /// little-endian `f64`, row-major over nodes then components.
    pub fn write_snapshot<W: std::io::Write>(&self, mut out: W) -> std::io::Result<()> {
        for h in [self.k as u64, self.n as u64, self.dim as u64] {
            out.write_all(&h.to_le_bytes())?;
        }
        for x in &self.values {
            out.write_all(&x.to_le_bytes())?;
        }
        Ok(())
    }

    pub(crate) fn set_values(&mut self, values: Vec<f64>, preimages: Vec<f64>) {
        debug_assert_eq!(values.len(), self.values.len());
        self.values = values;
        self.preimages = preimages;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::RegularBec;

    #[test]
    fn grid_geometry() {
        let m = RegularBec::new(3, 6, 0.45).unwrap();
        let f =
            ContinuumField::from_states(&m, 2, 5, Chart::VAffine, 1e-3, &[0.0], &[0.3]).unwrap();
        assert_eq!(f.nodes(), 25);
        assert_eq!(f.dx(), 0.5);
        assert!(f.is_boundary(0));
        assert!(f.is_boundary(4));
        assert!(f.is_boundary(20));
        assert!(!f.is_boundary(6));
        assert_eq!(f.coords(f.center_node()), vec![0.0, 0.0]);
        assert_eq!(f.stride(0), 5);
        assert_eq!(f.stride(1), 1);
        assert_eq!(f.boundary_value(), &[0.0]);
        // Interior holds ∇G(0.3) and caches its preimage.
        assert!((f.value(6)[0] - (1.0 - 0.7f64.powi(5))).abs() < 1e-15);
        assert!((f.preimage(6)[0] - 0.3).abs() < 1e-10);
    }

    #[test]
    fn rejects_plain_charts() {
        let m = RegularBec::new(3, 6, 0.45).unwrap();
        assert!(ContinuumField::new(&m, 1, 9, Chart::U, 1e-3, &[0.0], &[0.1]).is_err());
        assert!(ContinuumField::new(&m, 1, 9, Chart::VAffine, 0.0, &[0.0], &[0.1]).is_err());
        assert!(ContinuumField::new(&m, 1, 2, Chart::VAffine, 1e-3, &[0.0], &[0.1]).is_err());
    }
}
