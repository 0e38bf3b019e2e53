//! One function per subcommand. Each writes its artifacts and returns whether
//! every check passed.

use std::fs::File;
use std::io::BufWriter;

use gsc_core::continuum::{
    conservation_check, current_preimages, dual_field, run_pde, stationarity_residual,
    ConservationReport,
};
use gsc_core::lattice::{
    default_grid, initial_field, profile_extract, run_gsc_from, write_snapshot,
};
use gsc_core::potential::{find_fixed_points, potential, threshold_scan, FixedPointReport};
use gsc_core::verify::{fixed_point_potential_gap, invariant_suite};
use gsc_core::{
    shipped_models, Chart, ContinuumField, CouplingConfig, GscError, Init, ModelSpec, PdeOptions,
    RegularBecFamily, RunLimits, SystemModel, ThresholdKind, ThresholdOptions, Vector,
};
use serde_json::{json, Value};

use crate::config::{
    ChartKind, ConservationConfig, ExperimentConfig, FixedPointsConfig, GscRunConfig, InitKind,
    Kind, Params, PdeRunConfig, ThresholdConfig, VerifyConfig,
};
use crate::report::{indexed, num, Check, OutDir, Table};
use crate::CliError;

pub fn run(config: &mut ExperimentConfig) -> Result<bool, CliError> {
    let out = OutDir::create(&config.common.out)?;
    let seed = config.common.seed;
    // Defaults that depend on the model are resolved before echoing.
    if let Params::FixedPoints(p) = &mut config.params {
        if p.grid.is_none() {
            p.grid = Some(default_grid(build(&p.model)?.dim()));
        }
    }
    let echo = config.echo();
    let (results, checks) = match &config.params {
        Params::FixedPoints(p) => fixed_points(p, &out)?,
        Params::Threshold(p) => threshold(p, &out)?,
        Params::GscRun(p) => gsc_run(p, &out)?,
        Params::PdeRun(p) => pde_run(p, &out)?,
        Params::Conservation(p) => conservation(p, &out)?,
        Params::Verify(p) => verify(p, seed, &out)?,
    };
    out.write_summary(echo, results, &checks)
}

type Outcome = (Value, Vec<Check>);

fn build(spec: &ModelSpec) -> Result<Box<dyn SystemModel>, CliError> {
    spec.build()
        .map_err(|e| CliError::Config(format!("key `model`: {e}")))
}

fn fixed_points_of(model: &dyn SystemModel, grid: usize) -> Result<FixedPointReport, CliError> {
    Ok(find_fixed_points(model, grid)?)
}

/// `V` along the diagonal of the `u` box from `lo` to `hi`.
fn potential_profile(model: &dyn SystemModel, points: usize, out: &OutDir) -> Result<(), CliError> {
    let d = model.domain_d();
    let n = model.dim();
    let mut header = vec!["t".to_string()];
    header.extend(indexed("u", n));
    header.extend(["potential".to_string(), "perf".to_string()]);
    let mut table = Table::new(header);
    for i in 0..points {
        let t = i as f64 / (points - 1) as f64;
        let u: Vec<f64> = (0..n).map(|a| d.lo[a] + t * d.width(a)).collect();
        let mut row = vec![num(t)];
        row.extend(u.iter().map(|&x| num(x)));
        row.push(num(potential(model, &u)));
        row.push(num(model.perf(&u)));
        table.push(row);
    }
    table.write(&out.path("potential_profile.csv"))
}

fn report_checks(report: &FixedPointReport) -> Vec<Check> {
    let residual = report.points.iter().map(|p| p.residual).fold(0.0, f64::max);
    vec![
        Check::at_most(
            "fixed_point_potential_equality",
            fixed_point_potential_gap(report),
            1e-10,
        ),
        Check::at_most("fixed_point_residual", residual, 1e-10),
        Check::flag("stable_solution_exists", report.good.is_some()),
    ]
}

fn fixed_points(p: &FixedPointsConfig, out: &OutDir) -> Result<Outcome, CliError> {
    let model = build(&p.model)?;
    let report = fixed_points_of(model.as_ref(), p.grid.expect("resolved"))?;
    potential_profile(model.as_ref(), p.profile_points, out)?;
    let checks = report_checks(&report);
    let results = json!({
        "report": report,
        "hypothesis_holds": report.hypothesis_holds(),
    });
    Ok((results, checks))
}

fn threshold(p: &ThresholdConfig, out: &OutDir) -> Result<Outcome, CliError> {
    let family = RegularBecFamily {
        l: p.model.l,
        r: p.model.r,
    };
    let kind = match p.kind {
        Kind::Bp => ThresholdKind::Bp,
        Kind::Potential => ThresholdKind::Potential,
    };
    let opts = ThresholdOptions {
        tol: p.tol,
        de_iterations: p.de_iterations,
        grid_resolution: p.grid,
    };
    let result = threshold_scan(&family, kind, &opts)?;
    let model = build(&ModelSpec::regular_bec(
        p.model.l,
        p.model.r,
        result.threshold,
    ))?;
    potential_profile(model.as_ref(), p.profile_points, out)?;
    let report = fixed_points_of(model.as_ref(), p.grid)?;
    let checks = vec![Check::at_most(
        "bracket_half_width",
        0.5 * (result.hi - result.lo),
        p.tol,
    )];
    let results = json!({
        "threshold": result.threshold,
        "bracket": [result.lo, result.hi],
        "evaluations": result.evaluations,
        "fixed_points_at_threshold": report,
    });
    Ok((results, checks))
}

fn profile_tables(
    model: &dyn SystemModel,
    field: &gsc_core::LatticeField,
    out: &OutDir,
) -> Result<(), CliError> {
    for axis in 0..field.config().k() {
        let mut header = vec!["x".to_string(), "perf".to_string()];
        header.extend(indexed("u", field.dim()));
        let mut table = Table::new(header);
        for pt in profile_extract(model, field, axis)? {
            let mut row = vec![num(pt.x), num(pt.perf)];
            row.extend(pt.u.iter().map(|&x| num(x)));
            table.push(row);
        }
        table.write(&out.path(&format!("profile_axis{axis}.csv")))?;
    }
    Ok(())
}

fn gsc_run(p: &GscRunConfig, out: &OutDir) -> Result<Outcome, CliError> {
    let model = build(&p.model)?;
    let report = fixed_points_of(model.as_ref(), default_grid(model.dim()))?;
    let good = report.good_state().ok_or(GscError::NoStableSolution)?;
    let cfg = CouplingConfig::new(p.k, p.l, p.w, good.clone())?;
    let init = match p.init {
        InitKind::AllBad => Init::AllBad,
        InitKind::AllGood => Init::AllGood,
    };
    let start = initial_field(model.as_ref(), &cfg, &init)?;
    let initial_state = start.site(0).to_vec();
    let snapshots = if p.snapshot_every > 0 {
        Some(out.subdir("snapshots")?)
    } else {
        None
    };
    let mut previous = start.data().to_vec();
    let mut max_rise = f64::NEG_INFINITY;
    let mut io_error: Option<CliError> = None;
    let limits = RunLimits {
        max_iters: p.max_iters,
        stop_eps: p.stop_eps,
    };
    let run = run_gsc_from(model.as_ref(), start, &limits, |field| {
        let rise = field
            .data()
            .iter()
            .zip(&previous)
            .map(|(a, b)| a - b)
            .fold(f64::NEG_INFINITY, f64::max);
        max_rise = max_rise.max(rise);
        previous.copy_from_slice(field.data());
        if let Some(dir) = &snapshots {
            if field.iteration() % p.snapshot_every == 0 && io_error.is_none() {
                let path = dir.join(format!("iter_{:08}.bin", field.iteration()));
                let res =
                    File::create(&path).and_then(|f| write_snapshot(field, BufWriter::new(f)));
                if let Err(e) = res {
                    io_error = Some(CliError::io(&path, e));
                }
            }
        }
    })?;
    if let Some(e) = io_error {
        return Err(e);
    }

    let mut history = Table::new(["iter", "linf_change", "max_perf", "mean_perf"]);
    for h in &run.history {
        history.push(vec![
            h.iter.to_string(),
            num(h.linf_change),
            num(h.max_perf),
            num(h.mean_perf),
        ]);
    }
    history.write(&out.path("history.csv"))?;
    profile_tables(model.as_ref(), &run.field, out)?;

    let last = run.history.last();
    let mut checks = Vec::new();
    if p.init == InitKind::AllBad {
        // The start is a computed fixed point, so its first image can differ in the last bits.
        checks.push(Check::at_most(
            "monotone_from_worst_state",
            max_rise.max(0.0),
            1e-12,
        ));
    }
    let results = json!({
        "converged": run.converged,
        "iterations": run.history.len(),
        "m_coeff": cfg.m_coeff(),
        "boundary_state": good.as_slice(),
        "initial_state": initial_state,
        "final_max_perf": last.map(|h| h.max_perf),
        "final_mean_perf": last.map(|h| h.mean_perf),
        "final_linf_change": last.map(|h| h.linf_change),
    });
    Ok((results, checks))
}

fn continuum_start(
    model: &dyn SystemModel,
    k: usize,
    n: usize,
    chart: Chart,
    m: f64,
    init: InitKind,
) -> Result<(ContinuumField, Vector), CliError> {
    let report = fixed_points_of(model, default_grid(model.dim()))?;
    let good = report.good_state().ok_or(GscError::NoStableSolution)?;
    let interior = match init {
        InitKind::AllBad => report
            .worst_stable_state()
            .ok_or(GscError::NoStableSolution)?,
        InitKind::AllGood => good.clone(),
    };
    let field =
        ContinuumField::from_states(model, k, n, chart, m, good.as_slice(), interior.as_slice())?;
    Ok((field, good))
}

fn conservation_table(report: &ConservationReport) -> Table {
    let mut table = Table::new(["x", "energy", "drift"]);
    for (x, e) in report.x.iter().zip(&report.energy) {
        table.push(vec![num(*x), num(*e), num(e - report.reference)]);
    }
    table
}

fn pde_run(p: &PdeRunConfig, out: &OutDir) -> Result<Outcome, CliError> {
    let model = build(&p.model)?;
    let chart = match p.chart {
        ChartKind::VAffine => Chart::VAffine,
        ChartKind::UAffine => Chart::UAffine,
    };
    let (field, _) = continuum_start(model.as_ref(), p.k, p.n, chart, p.m, p.init)?;
    let snapshots = if p.snapshot_every > 0 {
        Some(out.subdir("snapshots")?)
    } else {
        None
    };
    let mut io_error: Option<CliError> = None;
    let opts = PdeOptions {
        dt: p.dt,
        max_steps: p.steps,
        stop_eps: p.stop_eps,
        record_every: p.record_every,
    };
    let run = run_pde(model.as_ref(), field, &opts, |step, f| {
        if let Some(dir) = &snapshots {
            if step % p.snapshot_every == 0 && io_error.is_none() {
                let path = dir.join(format!("step_{step:08}.bin"));
                if let Err(e) =
                    File::create(&path).and_then(|file| f.write_snapshot(BufWriter::new(file)))
                {
                    io_error = Some(CliError::io(&path, e));
                }
            }
        }
    })?;
    if let Some(e) = io_error {
        return Err(e);
    }

    let mut energy = Table::new(["step", "energy", "max_residual", "max_rate"]);
    for r in &run.energy {
        energy.push(vec![
            r.step.to_string(),
            num(r.energy),
            num(r.max_residual),
            num(r.max_rate),
        ]);
    }
    energy.write(&out.path("energy.csv"))?;

    let field = &run.field;
    let dim = field.dim();
    let pre = current_preimages(model.as_ref(), field)?;
    let (value_name, pre_name) = match chart {
        Chart::VAffine => ("v_affine", "u"),
        _ => ("u_affine", "v"),
    };
    let mut header = indexed("x", field.k());
    header.extend(indexed(value_name, dim));
    header.extend(indexed(pre_name, dim));
    header.push("perf".into());
    let mut profile = Table::new(header);
    for node in 0..field.nodes() {
        let u = match chart {
            Chart::VAffine => &pre[node * dim..(node + 1) * dim],
            _ => field.value(node),
        };
        let mut row: Vec<String> = field.coords(node).iter().map(|&x| num(x)).collect();
        row.extend(field.value(node).iter().map(|&x| num(x)));
        row.extend(pre[node * dim..(node + 1) * dim].iter().map(|&x| num(x)));
        row.push(num(model.perf(u)));
        profile.push(row);
    }
    profile.write(&out.path("profile.csv"))?;

    let residual = stationarity_residual(model.as_ref(), field)?;
    let max_residual = residual.iter().fold(0.0_f64, |m, x| m.max(x.abs()));
    let mut conservation = Value::Null;
    if field.k() == 1 {
        let dual = match chart {
            Chart::UAffine => field.clone(),
            _ => dual_field(model.as_ref(), field)?,
        };
        let report = conservation_check(model.as_ref(), &dual)?;
        conservation_table(&report).write(&out.path("conservation.csv"))?;
        conservation = json!({
            "source": if chart == Chart::UAffine { "u_affine_run" } else { "v_affine_run_transformed" },
            "reference": report.reference,
            "max_drift": report.max_drift,
        });
    }
    let checks = vec![Check::at_most(
        "energy_nonincreasing",
        run.max_energy_increase.max(0.0),
        1e-9,
    )];
    let results = json!({
        "converged": run.converged,
        "steps": run.steps,
        "dt": run.dt,
        "initial_energy": run.energy.first().map(|r| r.energy),
        "final_energy": run.energy.last().map(|r| r.energy),
        "max_energy_increase": run.max_energy_increase,
        "initial_residual": run.initial_residual,
        "final_residual": max_residual,
        "deviation_from_boundary": field.sup_deviation(field.boundary_value()),
        "conservation": conservation,
    });
    Ok((results, checks))
}

fn conservation(p: &ConservationConfig, out: &OutDir) -> Result<Outcome, CliError> {
    let model = build(&p.model)?;
    let sizes: Vec<usize> = if p.refine {
        vec![p.n, 2 * p.n - 1]
    } else {
        vec![p.n]
    };
    let opts = PdeOptions {
        dt: None,
        max_steps: p.steps,
        stop_eps: p.stop_eps,
        record_every: usize::MAX,
    };
    let mut runs = Vec::new();
    let mut checks = Vec::new();
    for (i, &n) in sizes.iter().enumerate() {
        let (field, _) =
            continuum_start(model.as_ref(), 1, n, Chart::UAffine, p.m, InitKind::AllBad)?;
        let run = run_pde(model.as_ref(), field, &opts, |_, _| {})?;
        checks.push(Check::flag(&format!("converged_n{n}"), run.converged));
        let report = conservation_check(model.as_ref(), &run.field)?;
        let name = if i == 0 {
            "conservation.csv"
        } else {
            "conservation_refined.csv"
        };
        conservation_table(&report).write(&out.path(name))?;
        runs.push(json!({
            "n": n,
            "steps": run.steps,
            "converged": run.converged,
            "reference": report.reference,
            "max_drift": report.max_drift,
        }));
    }
    let mut results = json!({ "runs": runs });
    if p.refine {
        let ratio = runs[0]["max_drift"].as_f64().unwrap_or(f64::NAN)
            / runs[1]["max_drift"].as_f64().unwrap_or(f64::NAN);
        results["drift_ratio"] = json!(ratio);
        checks.push(Check::at_least("drift_halves_under_refinement", ratio, 2.0));
    }
    Ok((results, checks))
}

fn verify(p: &VerifyConfig, seed: u64, out: &OutDir) -> Result<Outcome, CliError> {
    let models: Vec<(String, ModelSpec)> = match &p.model {
        Some(spec) => vec![("model".to_string(), spec.clone())],
        None => shipped_models(),
    };
    let mut table = Table::new(["model", "invariant", "measured", "tolerance", "passed"]);
    let mut per_model = Vec::new();
    let mut all = Vec::new();
    for (name, spec) in &models {
        let model = build(spec)?;
        let checks = invariant_suite(model.as_ref(), seed)?;
        for c in &checks {
            table.push(vec![
                name.clone(),
                c.name.clone(),
                num(c.measured),
                num(c.tolerance),
                c.passed.to_string(),
            ]);
            all.push(Check {
                name: format!("{name}/{}", c.name),
                ..c.clone()
            });
        }
        per_model.push(json!({ "name": name, "model": spec, "checks": checks }));
    }
    table.write(&out.path("invariants.csv"))?;
    Ok((json!({ "models": per_model }), all))
}
