//! Potential functions of an uncoupled system and what they predict.
//!
//! With the divergence `D(u, v) = G(u) + F(v) − ⟨u, v⟩`, the potential is
//! `V(u) = −D(u, ∇G(u))` and the dual potential `Ṽ(v) = −D(∇F(v), v)`. Their
//! stationary points are exactly the DE fixed points, and the two agree there.

use nalgebra::Complex;
use serde::Serialize;

use crate::continuum::affine::invert_gradient;
use crate::error::{GscError, Result};
use crate::model::{de_map, DomainBox, Matrix, RegularBec, Side, SystemModel, Vector};

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn sup(x: &Vector) -> f64 {
    x.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
}

pub fn divergence(model: &dyn SystemModel, u: &[f64], v: &[f64]) -> Result<f64> {
    if u.iter().chain(v).any(|x| !x.is_finite()) {
        return Err(GscError::NonFinite {
            context: "divergence arguments".into(),
        });
    }
    Ok(model.eval_g(u) + model.eval_f(v) - dot(u, v))
}

/// `V(u) = ⟨u, ∇G(u)⟩ − G(u) − F(∇G(u))`.
pub fn potential(model: &dyn SystemModel, u: &[f64]) -> f64 {
    let v = model.grad_g(u);
    dot(u, v.as_slice()) - model.eval_g(u) - model.eval_f(v.as_slice())
}

/// `Ṽ(v) = ⟨∇F(v), v⟩ − G(∇F(v)) − F(v)`.
pub fn dual_potential(model: &dyn SystemModel, v: &[f64]) -> f64 {
    let u = model.grad_f(v);
    dot(u.as_slice(), v) - model.eval_g(u.as_slice()) - model.eval_f(v)
}

/// DE residual `u − ∇F(∇G(u))`; zero exactly at fixed points.
pub fn de_residual(model: &dyn SystemModel, u: &[f64]) -> Vector {
    let v = model.grad_g(u);
    Vector::from_column_slice(u) - model.grad_f(v.as_slice())
}

/// Closed-form `∂ₐV(u) = g_ab(u) (uᵇ − ∂ᵇF(∇G(u)))`.
pub fn potential_gradient(model: &dyn SystemModel, u: &[f64]) -> Vector {
    model.hess_g(u) * de_residual(model, u)
}

/// Closed-form `∂ᵃṼ(v) = fᵃᵇ(v) (v_b − ∂_bG(∇F(v)))`.
pub fn dual_potential_gradient(model: &dyn SystemModel, v: &[f64]) -> Vector {
    let u = model.grad_f(v);
    model.hess_f(v) * (Vector::from_column_slice(v) - model.grad_g(u.as_slice()))
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Stability {
    Stable,
    Unstable,
    Degenerate,
}

/// Band around unit modulus treated as neither stable nor unstable.
pub const STABILITY_BAND: f64 = 1e-9;
/// Hessians above this condition number are classified degenerate.
pub const MAX_CONDITION: f64 = 1e12;
/// Fixed points closer than this (sup-norm) are merged.
pub const DEDUP_TOL: f64 = 1e-7;
/// Sup-norm DE residual required of a reported fixed point.
pub const FIXED_POINT_TOL: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FixedPoint {
    pub u: Vec<f64>,
    pub v: Vec<f64>,
    pub potential: f64,
    pub dual_potential: f64,
    pub perf: f64,
    pub classification: Stability,
    pub spectral_radius: f64,
    pub residual: f64,
}

/// Every fixed point found, sorted lexicographically by `u`.
///
/// `good` is the stable point with the best (smallest) performance loss, `bad`
/// the stable point with the worst one when it differs. `potential_minimizer`
/// is the stable point that strictly minimizes `V` over all listed points, if
/// there is one.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FixedPointReport {
    pub points: Vec<FixedPoint>,
    pub good: Option<usize>,
    pub bad: Option<usize>,
    pub potential_minimizer: Option<usize>,
    pub failed_seeds: usize,
}

impl FixedPointReport {
    /// The good solution is the unique stable minimizer of the potential.
    pub fn hypothesis_holds(&self) -> bool {
        self.good.is_some() && self.good == self.potential_minimizer
    }

    pub fn good_state(&self) -> Option<Vector> {
        self.good
            .map(|i| Vector::from_column_slice(&self.points[i].u))
    }

    pub fn bad_state(&self) -> Option<Vector> {
        self.bad
            .map(|i| Vector::from_column_slice(&self.points[i].u))
    }

    /// Worst-performing stable point; the good one when no bad one exists.
    pub fn worst_stable_state(&self) -> Option<Vector> {
        self.bad
            .or(self.good)
            .map(|i| Vector::from_column_slice(&self.points[i].u))
    }
}

/// Condition number of a symmetric matrix from its singular values.
pub fn condition_number(m: &nalgebra::DMatrix<f64>) -> f64 {
    let sv = m.singular_values();
    let max = sv.iter().cloned().fold(0.0_f64, f64::max);
    let min = sv.iter().cloned().fold(f64::INFINITY, f64::min);
    if min <= 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

/// Spectral radius of the DE Jacobian `f(v*) g(u*)` and its classification.
pub fn classify(model: &dyn SystemModel, u: &[f64]) -> (Stability, f64) {
    let g = model.hess_g(u);
    let v = model.grad_g(u);
    let jac = model.hess_f(v.as_slice()) * &g;
    let radius = jac
        .complex_eigenvalues()
        .iter()
        .map(|z: &Complex<f64>| z.norm())
        .fold(0.0_f64, f64::max);
    if condition_number(&g) > MAX_CONDITION {
        return (Stability::Degenerate, radius);
    }
    let class = if radius < 1.0 - STABILITY_BAND {
        Stability::Stable
    } else if radius > 1.0 + STABILITY_BAND {
        Stability::Unstable
    } else {
        Stability::Degenerate
    };
    (class, radius)
}

/// Damped Newton on `r(u) = u − ∇F(∇G(u))` inside the `u` box.
fn refine_fixed_point(
    model: &dyn SystemModel,
    seed: &Vector,
    domain: &DomainBox,
) -> Option<Vector> {
    let n = model.dim();
    let mut u = seed.clone();
    let mut res = de_residual(model, u.as_slice());
    let mut rn = sup(&res);
    for _ in 0..200 {
        if rn <= 1e-15 {
            break;
        }
        let v = model.grad_g(u.as_slice());
        let jac = Matrix::identity(n, n) - model.hess_f(v.as_slice()) * model.hess_g(u.as_slice());
        let step = jac
            .lu()
            .solve(&(-&res))
            .filter(|d| d.iter().all(|x| x.is_finite()))
            .unwrap_or_else(|| -&res);
        let mut alpha = 1.0;
        let mut improved = false;
        while alpha > 1e-10 {
            let mut trial = &u + alpha * &step;
            domain.clamp(trial.as_mut_slice());
            let tres = de_residual(model, trial.as_slice());
            let trn = sup(&tres);
            if trn < rn {
                u = trial;
                res = tres;
                rn = trn;
                improved = true;
                break;
            }
            alpha *= 0.5;
        }
        if !improved {
            break;
        }
    }
    (rn <= FIXED_POINT_TOL).then_some(u)
}

fn grid_points(domain: &DomainBox, resolution: usize) -> Vec<Vector> {
    let n = domain.dim();
    let total = resolution.pow(n as u32);
    (0..total)
        .map(|mut flat| {
            let mut p = Vector::zeros(n);
            for axis in (0..n).rev() {
                let i = flat % resolution;
                flat /= resolution;
                p[axis] = domain.lo[axis] + domain.width(axis) * i as f64 / (resolution - 1) as f64;
            }
            p
        })
        .collect()
}

/// Indices of grid nodes whose residual norm is no larger than at any neighbour.
fn local_minima(values: &[f64], resolution: usize, n: usize) -> Vec<usize> {
    let mut strides = vec![1usize; n];
    for axis in (0..n.saturating_sub(1)).rev() {
        strides[axis] = strides[axis + 1] * resolution;
    }
    let coords = |mut flat: usize| {
        let mut c = vec![0usize; n];
        for axis in (0..n).rev() {
            c[axis] = flat % resolution;
            flat /= resolution;
        }
        c
    };
    let offsets: Vec<Vec<i64>> = (0..3usize.pow(n as u32))
        .map(|mut k| {
            (0..n)
                .map(|_| {
                    let d = (k % 3) as i64 - 1;
                    k /= 3;
                    d
                })
                .collect()
        })
        .filter(|o: &Vec<i64>| o.iter().any(|&d| d != 0))
        .collect();
    (0..values.len())
        .filter(|&idx| {
            let c = coords(idx);
            offsets.iter().all(|off| {
                let mut nb = 0usize;
                for axis in 0..n {
                    let x = c[axis] as i64 + off[axis];
                    if x < 0 || x >= resolution as i64 {
                        return true;
                    }
                    nb += x as usize * strides[axis];
                }
                values[idx] <= values[nb]
            })
        })
        .collect()
}

/// Locates all DE fixed points on the `u` box.
///
/// Seeds are grid nodes where `‖u − ∇F(∇G(u))‖` is locally minimal, refined by
/// damped Newton; converged roots are deduplicated and classified.
pub fn find_fixed_points(
    model: &dyn SystemModel,
    grid_resolution: usize,
) -> Result<FixedPointReport> {
    if grid_resolution < 2 {
        return Err(GscError::invalid(
            "grid_resolution",
            "need at least 2 points per axis",
        ));
    }
    let n = model.dim();
    let total = (grid_resolution as f64).powi(n as i32);
    if total > 2e7 {
        return Err(GscError::invalid(
            "grid_resolution",
            format!("{total:e} grid points is too many"),
        ));
    }
    let domain = model.domain_d();
    let grid = grid_points(&domain, grid_resolution);
    let norms: Vec<f64> = grid
        .iter()
        .map(|p| de_residual(model, p.as_slice()).norm_squared())
        .collect();
    let seeds = local_minima(&norms, grid_resolution, n);

    let mut roots: Vec<Vector> = Vec::new();
    let mut failed = 0;
    for &s in &seeds {
        match refine_fixed_point(model, &grid[s], &domain) {
            Some(root) => {
                if !roots.iter().any(|r| (r - &root).amax() < DEDUP_TOL) {
                    roots.push(root);
                }
            }
            None => failed += 1,
        }
    }
    roots.sort_by(|a, b| {
        a.iter()
            .zip(b.iter())
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    });

    let points: Vec<FixedPoint> = roots
        .iter()
        .map(|u| {
            let v = model.grad_g(u.as_slice());
            let (classification, spectral_radius) = classify(model, u.as_slice());
            FixedPoint {
                u: u.as_slice().to_vec(),
                v: v.as_slice().to_vec(),
                potential: potential(model, u.as_slice()),
                dual_potential: dual_potential(model, v.as_slice()),
                perf: model.perf(u.as_slice()),
                classification,
                spectral_radius,
                residual: sup(&de_residual(model, u.as_slice())),
            }
        })
        .collect();

    let stable: Vec<usize> = (0..points.len())
        .filter(|&i| points[i].classification == Stability::Stable)
        .collect();
    let good = stable
        .iter()
        .copied()
        .min_by(|&a, &b| points[a].perf.total_cmp(&points[b].perf));
    let bad = stable
        .iter()
        .copied()
        .max_by(|&a, &b| points[a].perf.total_cmp(&points[b].perf))
        .filter(|&b| Some(b) != good);
    let potential_minimizer = stable.iter().copied().find(|&i| {
        (0..points.len()).all(|j| j == i || points[i].potential < points[j].potential - 1e-12)
    });

    Ok(FixedPointReport {
        points,
        good,
        bad,
        potential_minimizer,
        failed_seeds: failed,
    })
}

/// One-parameter family of models, monotone in the parameter.
pub trait ModelFamily: Sync {
    fn build(&self, param: f64) -> Result<Box<dyn SystemModel>>;

    /// Declared search interval for thresholds.
    fn bracket(&self) -> (f64, f64);

    /// Worst-case initial state for uncoupled DE.
    fn worst_state(&self, model: &dyn SystemModel) -> Vector {
        Vector::from_column_slice(&model.domain_d().hi)
    }
}

/// `(l, r)`-regular ensembles parameterized by the erasure probability.
#[derive(Clone, Debug)]
pub struct RegularBecFamily {
    pub l: u32,
    pub r: u32,
}

impl ModelFamily for RegularBecFamily {
    fn build(&self, eps: f64) -> Result<Box<dyn SystemModel>> {
        Ok(Box::new(RegularBec::new(self.l, self.r, eps)?))
    }

    fn bracket(&self) -> (f64, f64) {
        (0.0, 1.0)
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ThresholdKind {
    /// Largest parameter for which uncoupled DE from the worst state reaches `u_G`.
    Bp,
    /// Largest parameter for which `u_G` is the unique stable minimizer of `V`.
    Potential,
}

#[derive(Clone, Debug)]
pub struct ThresholdOptions {
    pub tol: f64,
    pub de_iterations: usize,
    pub grid_resolution: usize,
}

impl Default for ThresholdOptions {
    fn default() -> Self {
        Self {
            tol: 1e-3,
            de_iterations: 10_000,
            grid_resolution: 1001,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct ThresholdResult {
    pub threshold: f64,
    pub lo: f64,
    pub hi: f64,
    pub evaluations: Vec<(f64, bool)>,
}

/// Uncoupled DE from `start` for at most `iterations` steps reaches `target`.
pub fn de_reaches(
    model: &dyn SystemModel,
    start: &Vector,
    target: &Vector,
    iterations: usize,
) -> bool {
    let mut u = start.clone();
    for _ in 0..iterations {
        if (&u - target).amax() < 1e-8 {
            return true;
        }
        u = de_map(model, u.as_slice());
    }
    (&u - target).amax() < 1e-8
}

fn threshold_predicate(
    family: &dyn ModelFamily,
    kind: ThresholdKind,
    param: f64,
    opts: &ThresholdOptions,
) -> Result<bool> {
    let model = family.build(param)?;
    let report = find_fixed_points(model.as_ref(), opts.grid_resolution)?;
    match kind {
        ThresholdKind::Potential => Ok(report.hypothesis_holds()),
        ThresholdKind::Bp => {
            let good = report.good_state().ok_or(GscError::NoStableSolution)?;
            let start = family.worst_state(model.as_ref());
            Ok(de_reaches(
                model.as_ref(),
                &start,
                &good,
                opts.de_iterations,
            ))
        }
    }
}

/// Bisects the family's bracket for the BP or potential threshold.
///
/// Each step evaluates the midpoint of the current bracket; the midpoint is
/// returned as soon as the bracket half-width is within `tol`.
pub fn threshold_scan(
    family: &dyn ModelFamily,
    kind: ThresholdKind,
    opts: &ThresholdOptions,
) -> Result<ThresholdResult> {
    if !(opts.tol > 0.0) {
        return Err(GscError::invalid("tol", "tolerance must be positive"));
    }
    let (mut lo, mut hi) = family.bracket();
    let mut evaluations = Vec::new();
    let at_lo = threshold_predicate(family, kind, lo, opts)?;
    let at_hi = threshold_predicate(family, kind, hi, opts)?;
    evaluations.push((lo, at_lo));
    evaluations.push((hi, at_hi));
    if at_lo == at_hi {
        return Err(GscError::NonBracketing {
            lo,
            hi,
            value: at_lo,
        });
    }
    // Orient so that the predicate holds at `lo`.
    let holds_low = at_lo;
    loop {
        let mid = 0.5 * (lo + hi);
        if 0.5 * (hi - lo).abs() <= opts.tol {
            return Ok(ThresholdResult {
                threshold: mid,
                lo,
                hi,
                evaluations,
            });
        }
        let p = threshold_predicate(family, kind, mid, opts)?;
        evaluations.push((mid, p));
        if p == holds_low {
            lo = mid;
        } else {
            hi = mid;
        }
    }
}

/// Outcome of Euler-integrating the uncoupled gradient flow.
#[derive(Clone, Debug, Serialize)]
pub struct FlowTrace {
    pub start: Vec<f64>,
    pub end: Vec<f64>,
    pub steps: usize,
    pub converged: bool,
    pub initial_potential: f64,
    pub final_potential: f64,
    /// Largest single-step increase of `V` (negative when strictly decreasing).
    pub max_increase: f64,
}

/// Explicit Euler on `du/dt = −g⁻¹∇V = −(u − ∇F(∇G(u)))`.
pub fn potential_flow(
    model: &dyn SystemModel,
    start: &[f64],
    step: f64,
    max_steps: usize,
    tol: f64,
) -> FlowTrace {
    let domain = model.domain_d();
    let mut u = Vector::from_column_slice(start);
    let mut value = potential(model, u.as_slice());
    let initial = value;
    let mut max_increase = f64::NEG_INFINITY;
    let mut steps = 0;
    let mut converged = false;
    while steps < max_steps {
        let r = de_residual(model, u.as_slice());
        if sup(&r) < tol {
            converged = true;
            break;
        }
        u -= step * r;
        domain.clamp(u.as_mut_slice());
        let next = potential(model, u.as_slice());
        max_increase = max_increase.max(next - value);
        value = next;
        steps += 1;
    }
    FlowTrace {
        start: start.to_vec(),
        end: u.as_slice().to_vec(),
        steps,
        converged,
        initial_potential: initial,
        final_potential: value,
        max_increase,
    }
}

/// Composite-Simpson quadrature of `∫ Aᵃ dṽₐ` along the straight segment from
/// `vt_start` to `vt_end`, where `A = Φ(ṽ) − ∇F(ṽ)`.
pub fn force_line_integral(
    model: &dyn SystemModel,
    vt_start: &[f64],
    vt_end: &[f64],
    intervals: usize,
) -> Result<f64> {
    let intervals = intervals.max(2) + intervals % 2;
    let a = Vector::from_column_slice(vt_start);
    let b = Vector::from_column_slice(vt_end);
    let dir = &b - &a;
    let mut seed: Option<Vector> = None;
    let mut acc = 0.0;
    for k in 0..=intervals {
        let t = k as f64 / intervals as f64;
        let vt = &a + t * &dir;
        let u = invert_gradient(
            model,
            Side::G,
            vt.as_slice(),
            seed.as_ref().map(|s| s.as_slice()),
        )?;
        let force = &u - model.grad_f(vt.as_slice());
        let w = if k == 0 || k == intervals {
            1.0
        } else if k % 2 == 1 {
            4.0
        } else {
            2.0
        };
        acc += w * force.dot(&dir);
        seed = Some(u);
    }
    Ok(acc / (3.0 * intervals as f64))
}
