//! Spatially-coupled density evolution on `[−L+1 : L−1]^K`.
//!
//! Both half-steps average over a cubic window `[−W : W]^K`:
//!
//! ```text
//! v(l)   = ⟨ ∇G(u(l − m)) ⟩_m
//! u⁺(l)  = ⟨ ∇F(v(l + m)) ⟩_m
//! ```
//!
//! Sites outside the lattice hold the good solution `u_G`. The `v` half-step
//! is evaluated on every position its forward average touches, including the
//! `W`-wide rim outside the lattice, from the pinned `u` values.

use std::io::{self, Read, Write};

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{GscError, Result};
use crate::model::{SystemModel, Vector};
use crate::potential::find_fixed_points;

/// Largest supported coupling dimension.
pub const MAX_K: usize = 3;

#[derive(Clone, Debug, PartialEq)]
pub struct CouplingConfig {
    k: usize,
    l_size: usize,
    w: usize,
    boundary: Vector,
}

impl CouplingConfig {
    pub fn new(k: usize, l_size: usize, w: usize, boundary: Vector) -> Result<Self> {
        if k == 0 || k > MAX_K {
            return Err(GscError::invalid(
                "k",
                format!("coupling dimension must be in 1..={MAX_K}, got {k}"),
            ));
        }
        if l_size < 2 {
            return Err(GscError::invalid(
                "l",
                format!("half-size must be >= 2, got {l_size}"),
            ));
        }
        if boundary.iter().any(|x| !x.is_finite()) {
            return Err(GscError::NonFinite {
                context: "boundary state".into(),
            });
        }
        Ok(Self {
            k,
            l_size,
            w,
            boundary,
        })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn l_size(&self) -> usize {
        self.l_size
    }

    pub fn w(&self) -> usize {
        self.w
    }

    pub fn boundary(&self) -> &Vector {
        &self.boundary
    }

    /// `M = Σ_{m=−W..W} m² / (L² (2W + 1))`.
    pub fn m_coeff(&self) -> f64 {
        let w = self.w as i64;
        let sum: i64 = (-w..=w).map(|m| m * m).sum();
        sum as f64 / ((self.l_size * self.l_size) as f64 * (2 * self.w + 1) as f64)
    }

    /// Sites per axis, `2L − 1`.
    pub fn side(&self) -> usize {
        2 * self.l_size - 1
    }

    pub fn sites(&self) -> usize {
        self.side().pow(self.k as u32)
    }

    /// Lattice position of a flat index (axis 0 slowest).
    pub fn position(&self, mut flat: usize) -> Vec<i64> {
        let side = self.side();
        let offset = self.l_size as i64 - 1;
        let mut pos = vec![0i64; self.k];
        for axis in (0..self.k).rev() {
            pos[axis] = (flat % side) as i64 - offset;
            flat /= side;
        }
        pos
    }

    /// Flat index of a position, `None` outside the lattice.
    pub fn index(&self, pos: &[i64]) -> Option<usize> {
        let half = self.l_size as i64 - 1;
        let side = self.side();
        let mut flat = 0usize;
        for &p in pos {
            if p < -half || p > half {
                return None;
            }
            flat = flat * side + (p + half) as usize;
        }
        Some(flat)
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum Direction {
    /// Reads `l + m`.
    Forward,
    /// Reads `l − m`.
    Backward,
}

/// `N`-vector per lattice site, row-major over positions then components.
#[derive(Clone, Debug, PartialEq)]
pub struct LatticeField {
    config: CouplingConfig,
    n: usize,
    data: Vec<f64>,
    t: u64,
}

impl LatticeField {
    pub fn uniform(config: CouplingConfig, value: &[f64]) -> Result<Self> {
        let n = value.len();
        if config.boundary.len() != n {
            return Err(GscError::DimensionMismatch {
                expected: config.boundary.len(),
                got: n,
            });
        }
        let data = value
            .iter()
            .copied()
            .cycle()
            .take(config.sites() * n)
            .collect();
        Ok(Self {
            config,
            n,
            data,
            t: 0,
        })
    }

    pub fn from_data(config: CouplingConfig, n: usize, data: Vec<f64>) -> Result<Self> {
        if config.boundary.len() != n {
            return Err(GscError::DimensionMismatch {
                expected: config.boundary.len(),
                got: n,
            });
        }
        if data.len() != config.sites() * n {
            return Err(GscError::DimensionMismatch {
                expected: config.sites() * n,
                got: data.len(),
            });
        }
        Ok(Self {
            config,
            n,
            data,
            t: 0,
        })
    }

    pub fn config(&self) -> &CouplingConfig {
        &self.config
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn iteration(&self) -> u64 {
        self.t
    }

    pub fn site(&self, flat: usize) -> &[f64] {
        &self.data[flat * self.n..(flat + 1) * self.n]
    }

    /// Value at any integer position; `u_G` outside the lattice.
    pub fn get(&self, pos: &[i64]) -> &[f64] {
        match self.config.index(pos) {
            Some(i) => self.site(i),
            None => self.config.boundary.as_slice(),
        }
    }

    pub fn sup_distance(&self, other: &LatticeField) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .fold(0.0_f64, |m, (a, b)| m.max((a - b).abs()))
    }
}

/// Uniform average of the `(2W+1)^K` shifted values around `position`.
///
/// The window is symmetric, so both directions visit the same values; they
/// are kept apart to mirror the two half-steps of [`gsc_step`].
pub fn window_average(field: &LatticeField, position: &[i64], direction: Direction) -> Vector {
    let cfg = &field.config;
    let _ = direction;
    let grid = PaddedGrid {
        k: cfg.k,
        half: cfg.l_size as i64 - 1,
        side: cfg.side(),
        n: field.n,
        data: &field.data,
        outside: cfg.boundary.as_slice(),
    };
    let mut out = Vector::zeros(field.n);
    let mut scratch = vec![vec![0.0; field.n]; 2 * cfg.k];
    let mut pos = [0i64; MAX_K];
    pos[..cfg.k].copy_from_slice(position);
    let mut shifted = [0i64; MAX_K];
    symmetric_window_sum(
        &grid,
        &pos,
        cfg.w as i64,
        0,
        &mut shifted,
        out.as_mut_slice(),
        &mut scratch,
    );
    out / (2 * cfg.w + 1).pow(cfg.k as u32) as f64
}

/// Sum over `[−W, W]^K` around `center`, adding the `±m` pair of every axis
/// before accumulating so that the result is bitwise invariant under
/// reflecting any axis.
fn symmetric_window_sum(
    source: &PaddedGrid<'_>,
    center: &[i64; MAX_K],
    w: i64,
    axis: usize,
    shifted: &mut [i64; MAX_K],
    out: &mut [f64],
    scratch: &mut [Vec<f64>],
) {
    if axis == source.k {
        out.copy_from_slice(source.get(&shifted[..source.k]));
        return;
    }
    let (mine, rest) = scratch.split_at_mut(2);
    let (plus, minus) = mine.split_at_mut(1);
    let (plus, minus) = (&mut plus[0], &mut minus[0]);
    shifted[axis] = center[axis];
    symmetric_window_sum(source, center, w, axis + 1, shifted, out, rest);
    for m in 1..=w {
        shifted[axis] = center[axis] + m;
        symmetric_window_sum(source, center, w, axis + 1, shifted, plus, rest);
        shifted[axis] = center[axis] - m;
        symmetric_window_sum(source, center, w, axis + 1, shifted, minus, rest);
        for ((o, p), q) in out.iter_mut().zip(plus.iter()).zip(minus.iter()) {
            *o += p + q;
        }
    }
}

/// Cubic grid of half-size `half` with a constant value outside it.
struct PaddedGrid<'a> {
    k: usize,
    half: i64,
    side: usize,
    n: usize,
    data: &'a [f64],
    outside: &'a [f64],
}

impl PaddedGrid<'_> {
    #[inline]
    fn get(&self, pos: &[i64]) -> &[f64] {
        let mut flat = 0usize;
        for &p in &pos[..self.k] {
            if p < -self.half || p > self.half {
                return self.outside;
            }
            flat = flat * self.side + (p + self.half) as usize;
        }
        &self.data[flat * self.n..(flat + 1) * self.n]
    }

    fn position(&self, mut flat: usize, out: &mut [i64]) {
        for axis in (0..self.k).rev() {
            out[axis] = (flat % self.side) as i64 - self.half;
            flat /= self.side;
        }
    }
}

fn averaged_map(source: &PaddedGrid<'_>, target_half: i64, w: i64, n: usize) -> Vec<f64> {
    let k = source.k;
    let side = (2 * target_half + 1) as usize;
    let count = side.pow(k as u32);
    let target = PaddedGrid {
        k,
        half: target_half,
        side,
        n,
        data: &[],
        outside: &[],
    };
    let scale = 1.0 / ((2 * w + 1) as f64).powi(k as i32);
    let mut out = vec![0.0; count * n];
    out.par_chunks_mut(n).enumerate().for_each_init(
        || vec![vec![0.0; n]; 2 * k],
        |scratch, (flat, slot)| {
            let mut pos = [0i64; MAX_K];
            let mut shifted = [0i64; MAX_K];
            target.position(flat, &mut pos);
            symmetric_window_sum(source, &pos, w, 0, &mut shifted, slot, scratch);
            slot.iter_mut().for_each(|s| *s *= scale);
        },
    );
    out
}

fn map_sites(data: &[f64], n: usize, f: impl Fn(&[f64]) -> Vector + Sync) -> Vec<f64> {
    let mut out = vec![0.0; data.len()];
    out.par_chunks_mut(n)
        .zip(data.par_chunks(n))
        .for_each(|(o, x)| o.copy_from_slice(f(x).as_slice()));
    out
}

fn first_non_finite(data: &[f64], n: usize) -> Option<usize> {
    data.chunks(n)
        .position(|c| c.iter().any(|x| !x.is_finite()))
}

/// One synchronous coupled DE step.
pub fn gsc_step(model: &dyn SystemModel, field: &LatticeField) -> Result<LatticeField> {
    let cfg = &field.config;
    let n = field.n;
    if n != model.dim() {
        return Err(GscError::DimensionMismatch {
            expected: model.dim(),
            got: n,
        });
    }
    let k = cfg.k;
    let half = cfg.l_size as i64 - 1;
    let w = cfg.w as i64;
    let dom_d = model.domain_d();
    let dom_dt = model.domain_dtilde();

    // ∇G(u) on the lattice, ∇G(u_G) outside.
    let grad_g = map_sites(&field.data, n, |u| model.grad_g(u));
    let outside_g = model.grad_g(cfg.boundary.as_slice());
    let src = PaddedGrid {
        k,
        half,
        side: cfg.side(),
        n,
        data: &grad_g,
        outside: outside_g.as_slice(),
    };

    // v on the lattice plus the W-wide rim read by the forward average.
    let mut v = averaged_map(&src, half + w, w, n);
    v.par_chunks_mut(n).for_each(|c| dom_dt.clamp(c));

    let grad_f = map_sites(&v, n, |x| model.grad_f(x));
    if let Some(bad) = first_non_finite(&grad_f, n) {
        let vgrid = PaddedGrid {
            k,
            half: half + w,
            side: (2 * (half + w) + 1) as usize,
            n,
            data: &[],
            outside: &[],
        };
        let mut pos = vec![0i64; k];
        vgrid.position(bad, &mut pos);
        return Err(GscError::NonFinite {
            context: format!("gsc_step: v half-step at position {pos:?}"),
        });
    }
    // Positions beyond the rim are never read.
    let unused = vec![f64::NAN; n];
    let vsrc = PaddedGrid {
        k,
        half: half + w,
        side: (2 * (half + w) + 1) as usize,
        n,
        data: &grad_f,
        outside: &unused,
    };
    let mut next = averaged_map(&vsrc, half, w, n);
    if let Some(bad) = first_non_finite(&next, n) {
        return Err(GscError::NonFinite {
            context: format!("gsc_step: u half-step at position {:?}", cfg.position(bad)),
        });
    }
    next.par_chunks_mut(n).for_each(|c| dom_d.clamp(c));

    Ok(LatticeField {
        config: cfg.clone(),
        n,
        data: next,
        t: field.t + 1,
    })
}

#[derive(Clone, Debug)]
pub enum Init {
    /// Worst stable fixed point at every site.
    AllBad,
    /// `u_G` at every site.
    AllGood,
    Custom(Vec<f64>),
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct HistoryRow {
    pub iter: u64,
    pub linf_change: f64,
    pub max_perf: f64,
    pub mean_perf: f64,
}

#[derive(Clone, Debug)]
pub struct GscRun {
    pub field: LatticeField,
    pub history: Vec<HistoryRow>,
    pub converged: bool,
}

/// Runtime limits for [`run_gsc`].
#[derive(Clone, Debug)]
pub struct RunLimits {
    pub max_iters: u64,
    pub stop_eps: f64,
}

impl Default for RunLimits {
    fn default() -> Self {
        Self {
            max_iters: 100_000,
            stop_eps: 1e-10,
        }
    }
}

/// Resolves an [`Init`] into an initial field.
pub fn initial_field(
    model: &dyn SystemModel,
    config: &CouplingConfig,
    init: &Init,
) -> Result<LatticeField> {
    match init {
        Init::AllGood => LatticeField::uniform(config.clone(), config.boundary.as_slice()),
        Init::AllBad => {
            let report = find_fixed_points(model, default_grid(model.dim()))?;
            let bad = report
                .worst_stable_state()
                .ok_or(GscError::NoStableSolution)?;
            LatticeField::uniform(config.clone(), bad.as_slice())
        }
        Init::Custom(data) => LatticeField::from_data(config.clone(), model.dim(), data.clone()),
    }
}

/// Fixed-point search grid resolution per axis for a model of dimension `n`.
pub fn default_grid(n: usize) -> usize {
    match n {
        1 => 2001,
        2 => 201,
        _ => 41,
    }
}

fn perf_stats(model: &dyn SystemModel, field: &LatticeField) -> (f64, f64) {
    let perfs: Vec<f64> = field
        .data
        .par_chunks(field.n)
        .map(|u| model.perf(u))
        .collect();
    let max = perfs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    (
        max,
        crate::numeric::pairwise_sum(&perfs) / perfs.len() as f64,
    )
}

/// Iterates [`gsc_step`] until the sup-norm change drops below `stop_eps`.
pub fn run_gsc(
    model: &dyn SystemModel,
    config: &CouplingConfig,
    init: &Init,
    limits: &RunLimits,
) -> Result<GscRun> {
    let field = initial_field(model, config, init)?;
    run_gsc_from(model, field, limits, |_| {})
}

/// Like [`run_gsc`] from an explicit field; `observe` sees every new field.
pub fn run_gsc_from(
    model: &dyn SystemModel,
    mut field: LatticeField,
    limits: &RunLimits,
    mut observe: impl FnMut(&LatticeField),
) -> Result<GscRun> {
    let mut history = Vec::new();
    let mut converged = false;
    for _ in 0..limits.max_iters {
        let next = gsc_step(model, &field)?;
        let change = next.sup_distance(&field);
        let (max_perf, mean_perf) = perf_stats(model, &next);
        history.push(HistoryRow {
            iter: next.t,
            linf_change: change,
            max_perf,
            mean_perf,
        });
        field = next;
        observe(&field);
        if change < limits.stop_eps {
            converged = true;
            break;
        }
    }
    Ok(GscRun {
        field,
        history,
        converged,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ProfilePoint {
    pub x: f64,
    pub perf: f64,
    pub u: Vec<f64>,
}

/// Values along `axis` through the lattice centre.
pub fn profile_extract(
    model: &dyn SystemModel,
    field: &LatticeField,
    axis: usize,
) -> Result<Vec<ProfilePoint>> {
    let cfg = &field.config;
    if axis >= cfg.k {
        return Err(GscError::invalid(
            "axis",
            format!("axis {axis} out of range for K = {}", cfg.k),
        ));
    }
    let half = cfg.l_size as i64 - 1;
    let mut pos = vec![0i64; cfg.k];
    Ok((-half..=half)
        .map(|l| {
            pos[axis] = l;
            let u = field.get(&pos).to_vec();
            ProfilePoint {
                x: l as f64 / cfg.l_size as f64,
                perf: model.perf(&u),
                u,
            }
        })
        .collect())
}

/// Writes `K`, `L`, `N` as little-endian `u64` followed by every value as a
/// little-endian `f64`, row-major over positions then components.
pub fn write_snapshot<W: Write>(field: &LatticeField, mut out: W) -> io::Result<()> {
    for h in [
        field.config.k as u64,
        field.config.l_size as u64,
        field.n as u64,
    ] {
        out.write_all(&h.to_le_bytes())?;
    }
    for x in &field.data {
        out.write_all(&x.to_le_bytes())?;
    }
    Ok(())
}

/// Reads a snapshot back as `(K, L, N, values)`.
pub fn read_snapshot<R: Read>(mut input: R) -> io::Result<(usize, usize, usize, Vec<f64>)> {
    let mut word = [0u8; 8];
    let mut header = [0usize; 3];
    for h in header.iter_mut() {
        input.read_exact(&mut word)?;
        *h = u64::from_le_bytes(word) as usize;
    }
    let [k, l, n] = header;
    let count = (2 * l - 1).pow(k as u32) * n;
    let mut values = Vec::with_capacity(count);
    for _ in 0..count {
        input.read_exact(&mut word)?;
        values.push(f64::from_le_bytes(word));
    }
    Ok((k, l, n, values))
}
