//! Acceptance suite: one line per criterion, non-zero exit if any fails.
//!
//! Run a subset by number, e.g. `cargo test -p gsc-core --test acceptance -- 4 9`.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::ExitCode;
use std::time::Instant;

use gsc_core::continuum::{
    bvp_residual, conservation_check, lattice_profile_distance, run_pde, verify_affine_connection,
};
use gsc_core::lattice::run_gsc;
use gsc_core::potential::{
    find_fixed_points, potential, potential_flow, potential_gradient, threshold_scan,
    ThresholdResult,
};
use gsc_core::{
    shipped_models, Chart, ContinuumField, CouplingConfig, Init, PdeOptions, RegularBec,
    RegularBecFamily, RunLimits, SystemModel, ThresholdKind, ThresholdOptions, Vector,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn models() -> Vec<(String, Box<dyn SystemModel>)> {
    shipped_models()
        .into_iter()
        .map(|(name, spec)| (name, spec.build().unwrap()))
        .collect()
}

fn sup(xs: &[f64]) -> f64 {
    xs.iter().fold(0.0_f64, |m, x| m.max(x.abs()))
}

fn bad_state(model: &dyn SystemModel) -> Vector {
    find_fixed_points(model, 2001)
        .unwrap()
        .worst_stable_state()
        .unwrap()
}

fn fixed_point_equality() -> Outcome {
    let mut worst = 0.0_f64;
    let mut count = 0;
    for (name, m) in models() {
        let report =
            find_fixed_points(m.as_ref(), gsc_core::lattice::default_grid(m.dim())).unwrap();
        assert!(!report.points.is_empty(), "{name}: no fixed points");
        for p in &report.points {
            worst = worst.max((p.potential - p.dual_potential).abs());
            count += 1;
        }
    }
    outcome(
        worst < 1e-10,
        format!("max |V(u*) - Vdual(v*)| = {worst:.3e} over {count} fixed points (tol 1e-10)"),
    )
}

fn gradient_identity() -> Outcome {
    const H: f64 = 1e-5;
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = 0.0_f64;
    for (_, m) in models() {
        let bx = m.sample_box();
        for _ in 0..100 {
            let u = bx.sample(&mut rng);
            let exact = potential_gradient(m.as_ref(), u.as_slice());
            for a in 0..m.dim() {
                let mut p = u.clone();
                let mut q = u.clone();
                p[a] += H;
                q[a] -= H;
                let fd = (potential(m.as_ref(), p.as_slice())
                    - potential(m.as_ref(), q.as_slice()))
                    / (2.0 * H);
                worst = worst.max((exact[a] - fd).abs() / fd.abs().max(1e-8));
            }
        }
    }
    outcome(
        worst < 1e-5,
        format!("max relative gradient error = {worst:.3e} (tol 1e-5)"),
    )
}

fn uncoupled_descent() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut max_increase = f64::NEG_INFINITY;
    let mut max_miss = 0.0_f64;
    for (_, m) in models() {
        let report =
            find_fixed_points(m.as_ref(), gsc_core::lattice::default_grid(m.dim())).unwrap();
        let bx = m.sample_box();
        for _ in 0..10 {
            let start = bx.sample(&mut rng);
            let trace = potential_flow(m.as_ref(), start.as_slice(), 1e-3, 2_000_000, 1e-11);
            max_increase = max_increase.max(trace.max_increase);
            let miss = report
                .points
                .iter()
                .map(|p| {
                    p.u.iter()
                        .zip(&trace.end)
                        .fold(0.0_f64, |s, (a, b)| s.max((a - b).abs()))
                })
                .fold(f64::INFINITY, f64::min);
            max_miss = max_miss.max(if trace.converged { miss } else { f64::INFINITY });
        }
    }
    outcome(
        max_increase <= 1e-12 && max_miss < 1e-6,
        format!("max per-step increase of V = {max_increase:.3e} (slack 1e-12), end point distance to listed fixed point = {max_miss:.3e}"),
    )
}

// Scalar (3,6) oracles written directly from the closed forms.
fn de36(eps: f64, x: f64) -> f64 {
    eps * (1.0 - (1.0 - x).powi(5)).powi(2)
}

fn bp_oracle() -> f64 {
    let converges = |eps: f64| {
        let mut x = 1.0;
        for _ in 0..10_000 {
            x = de36(eps, x);
        }
        x < 1e-8
    };
    let (mut lo, mut hi) = (0.3, 0.6);
    while hi - lo > 1e-7 {
        let mid = 0.5 * (lo + hi);
        if converges(mid) {
            lo = mid
        } else {
            hi = mid
        }
    }
    0.5 * (lo + hi)
}

fn potential_oracle() -> f64 {
    let v36 = |eps: f64, u: f64| {
        let gp = 1.0 - (1.0 - u).powi(5);
        let g = u - (1.0 - (1.0 - u).powi(6)) / 6.0;
        u * gp - g - eps * gp.powi(3) / 3.0
    };
    // Largest root of u = de36(u): scan down from u = 1, then bisect.
    let largest_root = |eps: f64| {
        let h = |u: f64| u - de36(eps, u);
        let mut hi = 1.0;
        let mut lo = hi - 1e-4;
        while h(lo) > 0.0 {
            hi = lo;
            lo -= 1e-4;
        }
        for _ in 0..80 {
            let mid = 0.5 * (lo + hi);
            if h(mid) > 0.0 {
                hi = mid
            } else {
                lo = mid
            }
        }
        0.5 * (lo + hi)
    };
    let (mut lo, mut hi) = (0.44, 0.55);
    while hi - lo > 1e-9 {
        let mid = 0.5 * (lo + hi);
        if v36(mid, largest_root(mid)) > 0.0 {
            lo = mid
        } else {
            hi = mid
        }
    }
    0.5 * (lo + hi)
}

fn thresholds() -> Outcome {
    let family = RegularBecFamily { l: 3, r: 6 };
    let opts = ThresholdOptions::default();
    let bp: ThresholdResult = threshold_scan(&family, ThresholdKind::Bp, &opts).unwrap();
    let pot: ThresholdResult = threshold_scan(&family, ThresholdKind::Potential, &opts).unwrap();
    let (bp_o, pot_o) = (bp_oracle(), potential_oracle());
    let pass = (bp.threshold - 0.4294).abs() <= 1e-3
        && (pot.threshold - 0.4881).abs() <= 1e-3
        && (bp.threshold - bp_o).abs() <= 1e-3
        && (pot.threshold - pot_o).abs() <= 1e-3;
    outcome(
        pass,
        format!(
            "BP {:.5} (oracle {bp_o:.5}, target 0.4294), potential {:.5} (oracle {pot_o:.5}, target 0.4881), tol 1e-3",
            bp.threshold, pot.threshold
        ),
    )
}

/// Runs the coupled iteration from the worst state and returns
/// `(max perf, max distance from u_B over the central half of every axis)`.
fn saturation_run(k: usize, l: usize, w: usize, eps: f64) -> (f64, f64, bool) {
    let m = RegularBec::new(3, 6, eps).unwrap();
    let ub = bad_state(&m);
    let cfg = CouplingConfig::new(k, l, w, Vector::zeros(1)).unwrap();
    let run = run_gsc(
        &m,
        &cfg,
        &Init::AllBad,
        &RunLimits {
            max_iters: 200_000,
            stop_eps: 1e-12,
        },
    )
    .unwrap();
    let max_perf = run.history.last().unwrap().max_perf;
    let half = (l / 2) as i64;
    let mut dev = 0.0_f64;
    for flat in 0..cfg.sites() {
        let pos = cfg.position(flat);
        if pos.iter().all(|p| p.abs() <= half) {
            dev = dev.max((run.field.site(flat)[0] - ub[0]).abs());
        }
    }
    (max_perf, dev, run.converged)
}

fn saturation(k: usize, l: usize, w: usize) -> Outcome {
    let (perf_low, _, conv_low) = saturation_run(k, l, w, 0.46);
    let (_, dev_high, conv_high) = saturation_run(k, l, w, 0.50);
    outcome(
        conv_low && conv_high && perf_low < 1e-6 && dev_high < 1e-3,
        format!(
            "K={k} L={l} W={w}: eps=0.46 max perf {perf_low:.3e} (< 1e-6); eps=0.50 central-half distance from u_B {dev_high:.3e} (< 1e-3)"
        ),
    )
}

fn pde_field(eps: f64, n: usize, chart: Chart, m_coeff: f64) -> (RegularBec, ContinuumField) {
    let m = RegularBec::new(3, 6, eps).unwrap();
    let ub = bad_state(&m);
    let f = ContinuumField::from_states(&m, 1, n, chart, m_coeff, &[0.0], ub.as_slice()).unwrap();
    (m, f)
}

fn pde_lyapunov() -> Outcome {
    let n = 257;
    let dx = 2.0 / (n - 1) as f64;
    let opts = PdeOptions {
        max_steps: 400_000,
        stop_eps: 1e-10,
        record_every: 1000,
        ..Default::default()
    };
    let mut pass = true;
    let mut lines = Vec::new();
    for eps in [0.46, 0.50] {
        for chart in [Chart::VAffine, Chart::UAffine] {
            let (m, f) = pde_field(eps, n, chart, 1e-3);
            let run = run_pde(&m, f, &opts, |_, _| {}).unwrap();
            let mut ok = run.converged && run.max_energy_increase <= 1e-9;
            let mut line = format!(
                "eps={eps} {chart:?}: max dH {:.2e}",
                run.max_energy_increase
            );
            if chart == Chart::UAffine {
                let res = sup(&bvp_residual(&m, &run.field).unwrap());
                let bound = 10.0 * dx * dx * run.initial_residual;
                ok &= res < bound;
                line += &format!(", residual {res:.2e} < {bound:.2e}");
            }
            pass &= ok;
            lines.push(line);
        }
    }
    outcome(pass, lines.join("; "))
}

fn conservation() -> Outcome {
    let opts = PdeOptions {
        max_steps: 2_000_000,
        stop_eps: 1e-12,
        record_every: 100_000,
        ..Default::default()
    };
    let drift: Vec<f64> = [129, 257]
        .iter()
        .map(|&n| {
            let (m, f) = pde_field(0.50, n, Chart::UAffine, 1e-3);
            let run = run_pde(&m, f, &opts, |_, _| {}).unwrap();
            assert!(run.converged, "n = {n} did not converge");
            conservation_check(&m, &run.field).unwrap().max_drift
        })
        .collect();
    let ratio = drift[0] / drift[1];
    outcome(
        ratio >= 2.0,
        format!(
            "eps=0.50 M=1e-3: drift {:.3e} (n=129) -> {:.3e} (n=257), ratio {ratio:.2} (>= 2)",
            drift[0], drift[1]
        ),
    )
}

fn affine_connection() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut worst = 0.0_f64;
    for (_, m) in models() {
        let bx = m.sample_box();
        for _ in 0..50 {
            let u = bx.sample(&mut rng);
            worst = worst.max(
                verify_affine_connection(m.as_ref(), u.as_slice())
                    .unwrap()
                    .max_abs(),
            );
        }
    }
    outcome(
        worst < 1e-6,
        format!("max |Gamma| = {worst:.3e} over 50 points per shipped model (tol 1e-6)"),
    )
}

fn lattice_continuum() -> Outcome {
    let m = RegularBec::new(3, 6, 0.50).unwrap();
    let ub = bad_state(&m);
    let mut dist = Vec::new();
    for l in [32usize, 64, 128] {
        let cfg = CouplingConfig::new(1, l, 1, Vector::zeros(1)).unwrap();
        let lat = run_gsc(
            &m,
            &cfg,
            &Init::AllBad,
            &RunLimits {
                max_iters: 1_000_000,
                stop_eps: 1e-13,
            },
        )
        .unwrap();
        let f = ContinuumField::from_states(
            &m,
            1,
            8 * l + 1,
            Chart::VAffine,
            cfg.m_coeff(),
            &[0.0],
            ub.as_slice(),
        )
        .unwrap();
        let opts = PdeOptions {
            max_steps: 5_000_000,
            stop_eps: 1e-11,
            record_every: 1_000_000,
            ..Default::default()
        };
        let run = run_pde(&m, f, &opts, |_, _| {}).unwrap();
        assert!(lat.converged && run.converged);
        dist.push(lattice_profile_distance(&m, &lat.field, &run.field).unwrap());
    }
    let pass = dist.windows(2).all(|w| w[1] < w[0]);
    outcome(
        pass,
        format!("eps=0.50 W=1: distance {:.7e} (L=32), {:.7e} (L=64), {:.7e} (L=128); strictly decreasing required", dist[0], dist[1], dist[2]),
    )
}

type Criterion = (u32, &'static str, Box<dyn Fn() -> Outcome>);

fn main() -> ExitCode {
    let criteria: Vec<Criterion> = vec![
        (
            1,
            "potential equals dual potential at fixed points",
            Box::new(fixed_point_equality),
        ),
        (
            2,
            "potential gradient identity",
            Box::new(gradient_identity),
        ),
        (
            3,
            "uncoupled flow decreases the potential",
            Box::new(uncoupled_descent),
        ),
        (
            4,
            "BP and potential thresholds of (3,6)",
            Box::new(thresholds),
        ),
        (
            5,
            "threshold saturation K=1",
            Box::new(|| saturation(1, 64, 2)),
        ),
        (
            6,
            "threshold saturation K=2",
            Box::new(|| saturation(2, 16, 1)),
        ),
        (
            7,
            "PDE energy is a Lyapunov function",
            Box::new(pde_lyapunov),
        ),
        (
            8,
            "conservation-law drift under refinement",
            Box::new(conservation),
        ),
        (9, "affine connection vanishes", Box::new(affine_connection)),
        (
            10,
            "lattice-continuum distance decreases in L",
            Box::new(lattice_continuum),
        ),
    ];
    let selected: Vec<u32> = std::env::args()
        .skip(1)
        .filter_map(|a| a.parse().ok())
        .collect();
    let mut failed = 0;
    for (id, name, check) in &criteria {
        if !selected.is_empty() && !selected.contains(id) {
            continue;
        }
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            outcome(false, format!("panicked: {msg}"))
        });
        if !result.pass {
            failed += 1;
        }
        println!(
            "criterion {id:>2} {}: {name}: {} [{:.1}s]",
            if result.pass { "PASS" } else { "FAIL" },
            result.detail,
            start.elapsed().as_secs_f64()
        );
    }
    println!("acceptance: {failed} failed");
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
