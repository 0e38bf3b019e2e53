//! Uncoupled systems described by a pair of scalar fields.
//!
//! A system is given by `G` on the `u` side and `F` on the `v` side. One
//! density-evolution step reads `v = ∇G(u)` and then `u⁺ = ∇F(v)`. Everything
//! downstream (potentials, lattices, continuum flows) only talks to models
//! through [`SystemModel`].

use std::fmt;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{GscError, Result};

pub type Vector = DVector<f64>;
pub type Matrix = DMatrix<f64>;

/// Dense, fully indexed rank-3 tensor `t[a][b][c]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor3 {
    n: usize,
    data: Vec<f64>,
}

impl Tensor3 {
    pub fn zeros(n: usize) -> Self {
        Self {
            n,
            data: vec![0.0; n * n * n],
        }
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn get(&self, a: usize, b: usize, c: usize) -> f64 {
        self.data[(a * self.n + b) * self.n + c]
    }

    #[inline]
    pub fn set(&mut self, a: usize, b: usize, c: usize, value: f64) {
        self.data[(a * self.n + b) * self.n + c] = value;
    }

    /// Contraction `out_a = Σ_bc t[a][b][c] x_b y_c`.
    pub fn contract2(&self, x: &[f64], y: &[f64]) -> Vector {
        let n = self.n;
        Vector::from_fn(n, |a, _| {
            let mut acc = 0.0;
            for b in 0..n {
                for c in 0..n {
                    acc += self.get(a, b, c) * x[b] * y[c];
                }
            }
            acc
        })
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0_f64, |m, x| m.max(x.abs()))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    /// Largest deviation from full index-permutation symmetry.
    pub fn symmetry_defect(&self) -> f64 {
        let n = self.n;
        let mut worst = 0.0_f64;
        for a in 0..n {
            for b in 0..n {
                for c in 0..n {
                    let x = self.get(a, b, c);
                    for y in [
                        self.get(a, c, b),
                        self.get(b, a, c),
                        self.get(b, c, a),
                        self.get(c, a, b),
                        self.get(c, b, a),
                    ] {
                        worst = worst.max((x - y).abs());
                    }
                }
            }
        }
        worst
    }
}

/// Axis-aligned box in ℝᴺ.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainBox {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl DomainBox {
    pub fn new(lo: Vec<f64>, hi: Vec<f64>) -> Self {
        assert_eq!(lo.len(), hi.len());
        Self { lo, hi }
    }

    pub fn unit(n: usize) -> Self {
        Self::new(vec![0.0; n], vec![1.0; n])
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn width(&self, axis: usize) -> f64 {
        self.hi[axis] - self.lo[axis]
    }

    pub fn center(&self) -> Vector {
        Vector::from_fn(self.dim(), |i, _| 0.5 * (self.lo[i] + self.hi[i]))
    }

    pub fn contains(&self, x: &[f64], tol: f64) -> bool {
        x.iter()
            .enumerate()
            .all(|(i, &xi)| xi >= self.lo[i] - tol && xi <= self.hi[i] + tol)
    }

    pub fn clamp(&self, x: &mut [f64]) {
        for (i, xi) in x.iter_mut().enumerate() {
            *xi = xi.clamp(self.lo[i], self.hi[i]);
        }
    }

    /// Shrinks every side by `frac` of the width.
    pub fn contract(&self, frac: f64) -> Self {
        let lo = (0..self.dim())
            .map(|i| self.lo[i] + frac * self.width(i))
            .collect();
        let hi = (0..self.dim())
            .map(|i| self.hi[i] - frac * self.width(i))
            .collect();
        Self::new(lo, hi)
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vector {
        Vector::from_fn(self.dim(), |i, _| rng.gen_range(self.lo[i]..=self.hi[i]))
    }

    /// Cartesian product of two boxes.
    pub fn product(&self, other: &DomainBox) -> Self {
        let lo = self.lo.iter().chain(&other.lo).copied().collect();
        let hi = self.hi.iter().chain(&other.hi).copied().collect();
        Self::new(lo, hi)
    }
}

/// Coordinate chart a state vector lives in.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Chart {
    U,
    V,
    UAffine,
    VAffine,
}

#[derive(Clone, Debug, PartialEq)]
pub struct VectorState {
    pub values: Vector,
    pub chart: Chart,
}

impl VectorState {
    pub fn new(values: Vector, chart: Chart) -> Self {
        Self { values, chart }
    }

    pub fn u(values: &[f64]) -> Self {
        Self::new(Vector::from_column_slice(values), Chart::U)
    }

    pub fn v(values: &[f64]) -> Self {
        Self::new(Vector::from_column_slice(values), Chart::V)
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        self.values.as_slice()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|x| x.is_finite())
    }
}

/// An uncoupled system: scalar fields `F(v)`, `G(u)` and their derivatives.
///
/// `perf` is a loss: smaller values mean better performance.
pub trait SystemModel: Send + Sync + fmt::Debug {
    fn dim(&self) -> usize;

    fn eval_f(&self, v: &[f64]) -> f64;
    fn eval_g(&self, u: &[f64]) -> f64;

    fn grad_f(&self, v: &[f64]) -> Vector;
    fn grad_g(&self, u: &[f64]) -> Vector;

    fn hess_f(&self, v: &[f64]) -> Matrix;
    fn hess_g(&self, u: &[f64]) -> Matrix;

    /// Analytic `∂ᵃ∂ᵇ∂ᶜF`, if the model has one.
    fn third_f(&self, _v: &[f64]) -> Option<Tensor3> {
        None
    }

    /// Analytic `∂ₐ∂_b∂_cG`, if the model has one.
    fn third_g(&self, _u: &[f64]) -> Option<Tensor3> {
        None
    }

    /// Box containing the `u` states.
    fn domain_d(&self) -> DomainBox;

    /// Box containing the `v` states.
    fn domain_dtilde(&self) -> DomainBox;

    fn perf(&self, u: &[f64]) -> f64 {
        u[0]
    }

    /// Region used for randomized interior checks. Defaults to the `u` box
    /// shrunk by 5% per side.
    fn sample_box(&self) -> DomainBox {
        self.domain_d().contract(0.05)
    }
}

/// Selects one of the two scalar fields of a model.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum Side {
    /// `G(u)`, gradient maps `u → ṽ`.
    G,
    /// `F(v)`, gradient maps `v → ũ`.
    F,
}

impl Side {
    pub fn other(self) -> Side {
        match self {
            Side::G => Side::F,
            Side::F => Side::G,
        }
    }

    pub fn value(self, model: &dyn SystemModel, x: &[f64]) -> f64 {
        match self {
            Side::G => model.eval_g(x),
            Side::F => model.eval_f(x),
        }
    }

    pub fn grad(self, model: &dyn SystemModel, x: &[f64]) -> Vector {
        match self {
            Side::G => model.grad_g(x),
            Side::F => model.grad_f(x),
        }
    }

    pub fn hess(self, model: &dyn SystemModel, x: &[f64]) -> Matrix {
        match self {
            Side::G => model.hess_g(x),
            Side::F => model.hess_f(x),
        }
    }

    /// Third derivative, analytic when available, else central differences
    /// of the Hessian.
    pub fn third(self, model: &dyn SystemModel, x: &[f64]) -> Tensor3 {
        let analytic = match self {
            Side::G => model.third_g(x),
            Side::F => model.third_f(x),
        };
        analytic.unwrap_or_else(|| third_by_differences(model, self, x))
    }

    /// Box holding the argument of this side's field.
    pub fn domain(self, model: &dyn SystemModel) -> DomainBox {
        match self {
            Side::G => model.domain_d(),
            Side::F => model.domain_dtilde(),
        }
    }
}

/// Step for the third-derivative fallback, relative to the domain width.
pub const THIRD_FD_STEP: f64 = 1e-4;

fn third_by_differences(model: &dyn SystemModel, side: Side, x: &[f64]) -> Tensor3 {
    let n = x.len();
    let domain = side.domain(model);
    let mut t = Tensor3::zeros(n);
    let mut xp = x.to_vec();
    for c in 0..n {
        let h = THIRD_FD_STEP * domain.width(c).max(f64::MIN_POSITIVE);
        xp[c] = x[c] + h;
        let hp = side.hess(model, &xp);
        xp[c] = x[c] - h;
        let hm = side.hess(model, &xp);
        xp[c] = x[c];
        for a in 0..n {
            for b in 0..n {
                t.set(a, b, c, (hp[(a, b)] - hm[(a, b)]) / (2.0 * h));
            }
        }
    }
    t
}

/// Regular `(l, r)` LDPC ensemble on the binary erasure channel.
///
/// `G(u) = u − (1 − (1 − u)^r)/r` and `F(v) = ε vˡ / l`, so one DE step is
/// `u⁺ = ε (1 − (1 − u)^{r−1})^{l−1}`.
#[derive(Clone, Debug, PartialEq)]
pub struct RegularBec {
    l: u32,
    r: u32,
    eps: f64,
}

impl RegularBec {
    pub fn new(l: u32, r: u32, eps: f64) -> Result<Self> {
        if l < 3 {
            return Err(GscError::invalid(
                "l",
                format!("variable degree must be >= 3, got {l}"),
            ));
        }
        if r < l {
            return Err(GscError::invalid(
                "r",
                format!("check degree must be >= l = {l}, got {r}"),
            ));
        }
        if !(0.0..=1.0).contains(&eps) || !eps.is_finite() {
            return Err(GscError::invalid(
                "eps",
                format!("erasure probability must lie in [0, 1], got {eps}"),
            ));
        }
        Ok(Self { l, r, eps })
    }

    pub fn l(&self) -> u32 {
        self.l
    }

    pub fn r(&self) -> u32 {
        self.r
    }

    pub fn eps(&self) -> f64 {
        self.eps
    }

    fn li(&self) -> i32 {
        self.l as i32
    }

    fn ri(&self) -> i32 {
        self.r as i32
    }
}

impl SystemModel for RegularBec {
    fn dim(&self) -> usize {
        1
    }

    fn eval_f(&self, v: &[f64]) -> f64 {
        self.eps * v[0].powi(self.li()) / self.l as f64
    }

    fn eval_g(&self, u: &[f64]) -> f64 {
        let r = self.r as f64;
        u[0] - (1.0 - (1.0 - u[0]).powi(self.ri())) / r
    }

    fn grad_f(&self, v: &[f64]) -> Vector {
        Vector::from_element(1, self.eps * v[0].powi(self.li() - 1))
    }

    fn grad_g(&self, u: &[f64]) -> Vector {
        Vector::from_element(1, 1.0 - (1.0 - u[0]).powi(self.ri() - 1))
    }

    fn hess_f(&self, v: &[f64]) -> Matrix {
        let l = self.l as f64;
        Matrix::from_element(1, 1, self.eps * (l - 1.0) * v[0].powi(self.li() - 2))
    }

    fn hess_g(&self, u: &[f64]) -> Matrix {
        let r = self.r as f64;
        Matrix::from_element(1, 1, (r - 1.0) * (1.0 - u[0]).powi(self.ri() - 2))
    }

    fn third_f(&self, v: &[f64]) -> Option<Tensor3> {
        let l = self.l as f64;
        let mut t = Tensor3::zeros(1);
        t.set(
            0,
            0,
            0,
            self.eps * (l - 1.0) * (l - 2.0) * v[0].powi(self.li() - 3),
        );
        Some(t)
    }

    fn third_g(&self, u: &[f64]) -> Option<Tensor3> {
        let r = self.r as f64;
        let mut t = Tensor3::zeros(1);
        t.set(
            0,
            0,
            0,
            -(r - 1.0) * (r - 2.0) * (1.0 - u[0]).powi(self.ri() - 3),
        );
        Some(t)
    }

    fn domain_d(&self) -> DomainBox {
        DomainBox::unit(1)
    }

    fn domain_dtilde(&self) -> DomainBox {
        DomainBox::unit(1)
    }

    fn perf(&self, u: &[f64]) -> f64 {
        u[0]
    }

    // g = (r−1)(1−u)^{r−2} vanishes at u = 1; keep sampled points well away
    // from that corner so inverse-Hessian quantities stay O(1).
    fn sample_box(&self) -> DomainBox {
        DomainBox::new(vec![0.02], vec![0.6])
    }
}

/// Block-diagonal composition of independent systems.
#[derive(Debug)]
pub struct ProductModel {
    components: Vec<Box<dyn SystemModel>>,
    offsets: Vec<usize>,
    dim: usize,
}

impl ProductModel {
    pub fn new(components: Vec<Box<dyn SystemModel>>) -> Result<Self> {
        if components.is_empty() {
            return Err(GscError::invalid(
                "components",
                "product needs at least one component",
            ));
        }
        let mut offsets = Vec::with_capacity(components.len());
        let mut dim = 0;
        for c in &components {
            offsets.push(dim);
            dim += c.dim();
        }
        Ok(Self {
            components,
            offsets,
            dim,
        })
    }

    pub fn components(&self) -> &[Box<dyn SystemModel>] {
        &self.components
    }

    fn slice<'a>(&self, i: usize, x: &'a [f64]) -> &'a [f64] {
        let start = self.offsets[i];
        &x[start..start + self.components[i].dim()]
    }

    fn stack_vec(&self, f: impl Fn(&dyn SystemModel, &[f64]) -> Vector, x: &[f64]) -> Vector {
        let mut out = Vector::zeros(self.dim);
        for (i, c) in self.components.iter().enumerate() {
            let part = f(c.as_ref(), self.slice(i, x));
            out.rows_mut(self.offsets[i], c.dim()).copy_from(&part);
        }
        out
    }

    fn stack_mat(&self, f: impl Fn(&dyn SystemModel, &[f64]) -> Matrix, x: &[f64]) -> Matrix {
        let mut out = Matrix::zeros(self.dim, self.dim);
        for (i, c) in self.components.iter().enumerate() {
            let (o, d) = (self.offsets[i], c.dim());
            out.view_mut((o, o), (d, d))
                .copy_from(&f(c.as_ref(), self.slice(i, x)));
        }
        out
    }

    fn stack_third(&self, side: Side, x: &[f64]) -> Tensor3 {
        let mut out = Tensor3::zeros(self.dim);
        for (i, c) in self.components.iter().enumerate() {
            let (o, d) = (self.offsets[i], c.dim());
            let t = side.third(c.as_ref(), self.slice(i, x));
            for a in 0..d {
                for b in 0..d {
                    for cc in 0..d {
                        out.set(o + a, o + b, o + cc, t.get(a, b, cc));
                    }
                }
            }
        }
        out
    }
}

impl SystemModel for ProductModel {
    fn dim(&self) -> usize {
        self.dim
    }

    fn eval_f(&self, v: &[f64]) -> f64 {
        self.components
            .iter()
            .enumerate()
            .map(|(i, c)| c.eval_f(self.slice(i, v)))
            .sum()
    }

    fn eval_g(&self, u: &[f64]) -> f64 {
        self.components
            .iter()
            .enumerate()
            .map(|(i, c)| c.eval_g(self.slice(i, u)))
            .sum()
    }

    fn grad_f(&self, v: &[f64]) -> Vector {
        self.stack_vec(|m, x| m.grad_f(x), v)
    }

    fn grad_g(&self, u: &[f64]) -> Vector {
        self.stack_vec(|m, x| m.grad_g(x), u)
    }

    fn hess_f(&self, v: &[f64]) -> Matrix {
        self.stack_mat(|m, x| m.hess_f(x), v)
    }

    fn hess_g(&self, u: &[f64]) -> Matrix {
        self.stack_mat(|m, x| m.hess_g(x), u)
    }

    fn third_f(&self, v: &[f64]) -> Option<Tensor3> {
        Some(self.stack_third(Side::F, v))
    }

    fn third_g(&self, u: &[f64]) -> Option<Tensor3> {
        Some(self.stack_third(Side::G, u))
    }

    fn domain_d(&self) -> DomainBox {
        self.components
            .iter()
            .map(|c| c.domain_d())
            .reduce(|a, b| a.product(&b))
            .expect("non-empty product")
    }

    fn domain_dtilde(&self) -> DomainBox {
        self.components
            .iter()
            .map(|c| c.domain_dtilde())
            .reduce(|a, b| a.product(&b))
            .expect("non-empty product")
    }

    fn perf(&self, u: &[f64]) -> f64 {
        self.components
            .iter()
            .enumerate()
            .map(|(i, c)| c.perf(self.slice(i, u)))
            .sum()
    }

    fn sample_box(&self) -> DomainBox {
        self.components
            .iter()
            .map(|c| c.sample_box())
            .reduce(|a, b| a.product(&b))
            .expect("non-empty product")
    }
}

/// Configuration record for building a model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelSpec {
    RegularBec { l: u32, r: u32, eps: f64 },
    Product { components: Vec<ModelSpec> },
}

impl ModelSpec {
    pub fn regular_bec(l: u32, r: u32, eps: f64) -> Self {
        ModelSpec::RegularBec { l, r, eps }
    }

    pub fn build(&self) -> Result<Box<dyn SystemModel>> {
        match self {
            ModelSpec::RegularBec { l, r, eps } => Ok(Box::new(RegularBec::new(*l, *r, *eps)?)),
            ModelSpec::Product { components } => {
                let parts = components
                    .iter()
                    .map(|c| c.build())
                    .collect::<Result<Vec<_>>>()?;
                Ok(Box::new(ProductModel::new(parts)?))
            }
        }
    }

    /// Same model with its channel parameter replaced; products set every
    /// component.
    pub fn with_eps(&self, eps: f64) -> Self {
        match self {
            ModelSpec::RegularBec { l, r, .. } => ModelSpec::RegularBec { l: *l, r: *r, eps },
            ModelSpec::Product { components } => ModelSpec::Product {
                components: components.iter().map(|c| c.with_eps(eps)).collect(),
            },
        }
    }
}

/// The models every invariant sweep runs over.
pub fn shipped_models() -> Vec<(String, ModelSpec)> {
    let mut out: Vec<(String, ModelSpec)> = [0.40, 0.45, 0.50, 0.55]
        .iter()
        .map(|&eps| {
            (
                format!("bec(3,6,{eps:.2})"),
                ModelSpec::regular_bec(3, 6, eps),
            )
        })
        .collect();
    out.push((
        "product[bec(3,6,0.45), bec(4,8,0.45)]".to_string(),
        ModelSpec::Product {
            components: vec![
                ModelSpec::regular_bec(3, 6, 0.45),
                ModelSpec::regular_bec(4, 8, 0.45),
            ],
        },
    ));
    out
}

fn check_finite(x: &Vector, context: &str) -> Result<()> {
    if x.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(GscError::NonFinite {
            context: context.to_string(),
        })
    }
}

/// The composite DE map `u ↦ ∇F(∇G(u))` with clamping, on raw slices.
pub fn de_map(model: &dyn SystemModel, u: &[f64]) -> Vector {
    let mut v = model.grad_g(u);
    model.domain_dtilde().clamp(v.as_mut_slice());
    let mut next = model.grad_f(v.as_slice());
    model.domain_d().clamp(next.as_mut_slice());
    next
}

/// One uncoupled density-evolution step. Returns `(u_next, v)`.
pub fn de_step(model: &dyn SystemModel, u: &VectorState) -> Result<(VectorState, VectorState)> {
    if u.chart != Chart::U {
        return Err(GscError::invalid(
            "chart",
            format!("de_step expects a U-chart state, got {:?}", u.chart),
        ));
    }
    if u.dim() != model.dim() {
        return Err(GscError::DimensionMismatch {
            expected: model.dim(),
            got: u.dim(),
        });
    }
    let mut v = model.grad_g(u.as_slice());
    check_finite(&v, "de_step: v = grad G(u)")?;
    model.domain_dtilde().clamp(v.as_mut_slice());
    let mut next = model.grad_f(v.as_slice());
    check_finite(&next, "de_step: u_next = grad F(v)")?;
    model.domain_d().clamp(next.as_mut_slice());
    Ok((
        VectorState::new(next, Chart::U),
        VectorState::new(v, Chart::V),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn bec(eps: f64) -> RegularBec {
        RegularBec::new(3, 6, eps).unwrap()
    }

    #[test]
    fn rejects_bad_degrees() {
        assert!(matches!(
            RegularBec::new(2, 6, 0.4),
            Err(GscError::InvalidParameter { name: "l", .. })
        ));
        assert!(matches!(
            RegularBec::new(4, 3, 0.4),
            Err(GscError::InvalidParameter { name: "r", .. })
        ));
        assert!(RegularBec::new(3, 3, 0.4).is_ok());
        assert!(RegularBec::new(3, 6, 1.5).is_err());
    }

    #[test]
    fn one_step_from_full_erasure() {
        let m = bec(0.5);
        assert_eq!(m.grad_g(&[1.0])[0], 1.0);
        assert_eq!(m.grad_f(&[1.0])[0], 0.5);
        let (next, v) = de_step(&m, &VectorState::u(&[1.0])).unwrap();
        assert_eq!(v.values[0], 1.0);
        assert_eq!(next.values[0], 0.5);
    }

    #[test]
    fn zero_is_fixed_for_every_eps() {
        for eps in [0.0, 0.3, 0.45, 1.0] {
            let m = bec(eps);
            assert_eq!(m.grad_g(&[0.0])[0], 0.0);
            assert_eq!(m.grad_f(&[0.0])[0], 0.0);
        }
    }

    #[test]
    fn hess_g_closed_form() {
        let m = bec(0.45);
        for i in 0..=20 {
            let u = i as f64 / 20.0;
            let h = m.hess_g(&[u])[(0, 0)];
            assert_abs_diff_eq!(h, 5.0 * (1.0 - u).powi(4), epsilon = 1e-14);
            assert!(h >= 0.0);
        }
    }

    #[test]
    fn product_blocks() {
        let p = ModelSpec::Product {
            components: vec![
                ModelSpec::regular_bec(3, 6, 0.3),
                ModelSpec::regular_bec(3, 6, 0.3),
            ],
        }
        .build()
        .unwrap();
        let h = p.hess_g(&[0.2, 0.7]);
        assert_eq!(h.nrows(), 2);
        assert_eq!(h[(0, 1)], 0.0);
        assert_eq!(h[(1, 0)], 0.0);
        let single = bec(0.3);
        assert_eq!(h[(1, 1)], single.hess_g(&[0.7])[(0, 0)]);
        assert_eq!(p.perf(&[0.2, 0.7]), 0.2 + 0.7);
    }

    #[test]
    fn de_step_rejects_wrong_chart() {
        let m = bec(0.4);
        assert!(de_step(&m, &VectorState::v(&[0.3])).is_err());
    }

    #[test]
    fn fd_third_matches_analytic() {
        let m = bec(0.47);
        for side in [Side::G, Side::F] {
            for x in [0.1, 0.35, 0.6] {
                let analytic = side.third(&m, &[x]).get(0, 0, 0);
                let fd = third_by_differences(&m, side, &[x]).get(0, 0, 0);
                assert!(
                    (analytic - fd).abs() <= 1e-6 * (1.0 + analytic.abs()),
                    "{side:?} {x}"
                );
            }
        }
    }
}
