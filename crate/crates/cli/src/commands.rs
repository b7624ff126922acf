//! Subcommand implementations.  Every command reads one parsed
//! [`ExperimentConfig`], writes CSV artifacts plus a checksummed manifest
//! into the output directory, and returns a process exit code.

use crate::config::ExperimentConfig;
use crate::manifest::RunManifest;
use mfc_core::grid::SpaceTimeGrid;
use mfc_core::linearized::{
    classify_stability, random_beta, second_order_form, ClassifyOptions, Verdict,
};
use mfc_core::measures::GridDensity;
use mfc_core::mfg::{
    dynamic_programming_gap, master_equation_residual, solve_mfc, SolverConfig,
};
use mfc_core::model::{builtin, duality_identities, ProblemSpec};
use mfc_core::particles::{chaos_rate_experiment, solve_vn_small, vn_vs_u_gap};
use mfc_core::pde::solve_fp_forward;
use mfc_core::seeding::stage_rng;
use mfc_core::Real;
use std::path::Path;
use std::sync::Arc;

/// Command failure carrying the process exit code (2 for configuration
/// errors, 1 for runtime failures) and a machine-readable record.
pub struct CmdError {
    pub code: i32,
    pub kind: String,
    pub message: String,
}

impl CmdError {
    fn config(kind: &str, message: String) -> Self {
        Self { code: 2, kind: kind.into(), message }
    }

    fn runtime(kind: &str, message: String) -> Self {
        Self { code: 1, kind: kind.into(), message }
    }
}

type CmdResult = Result<i32, CmdError>;

fn core_err(e: mfc_core::Error) -> CmdError {
    let code = if matches!(e, mfc_core::Error::UnknownDescriptor(_)) { 2 } else { 1 };
    CmdError { code, kind: error_kind(&e).into(), message: e.to_string() }
}

fn error_kind(e: &mfc_core::Error) -> &'static str {
    use mfc_core::Error::*;
    match e {
        UnknownDescriptor(_) => "unknown_descriptor",
        NoStartConverged { .. } | NotConverged { .. } => "solver_failure",
        BlowUp { .. } => "blow_up",
        LinearizedDivergence { .. } => "linearized_divergence",
        MemoryBudget { .. } => "memory_budget",
        _ => "core_error",
    }
}

fn build_grid(cfg: &ExperimentConfig) -> Result<Arc<SpaceTimeGrid<f64>>, CmdError> {
    SpaceTimeGrid::new(
        cfg.grid.dim,
        cfg.grid.box_halfwidth,
        cfg.grid.nx,
        cfg.grid.t0,
        cfg.grid.t_final,
        cfg.grid.nt,
    )
    .map_err(|e| CmdError::config("invalid_grid", e.to_string()))
}

fn build_spec(cfg: &ExperimentConfig) -> Result<ProblemSpec<f64>, CmdError> {
    let grid = build_grid(cfg)?;
    builtin(grid, &cfg.spec.descriptor).map_err(core_err)
}

fn solver_config(cfg: &ExperimentConfig) -> SolverConfig<f64> {
    SolverConfig {
        damping: cfg.solver.damping,
        max_iterations: cfg.solver.max_iterations,
        tolerance: cfg.solver.tolerance,
        multistarts: cfg.solver.multistarts,
        seed: cfg.run.seed,
    }
}

fn initial_density(
    cfg: &ExperimentConfig,
    grid: &Arc<SpaceTimeGrid<f64>>,
) -> Result<GridDensity<f64>, CmdError> {
    GridDensity::gaussian(grid.clone(), [cfg.initial.mean, 0.0], [cfg.initial.std, cfg.initial.std])
        .map_err(core_err)
}

/// Builds one CSV in memory (RFC-4180 quoting, header row) and hands the
/// bytes to the manifest writer.
fn write_csv(
    manifest: &mut RunManifest,
    name: &str,
    header: &[&str],
    rows: &[Vec<String>],
) -> Result<(), CmdError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header).expect("in-memory csv");
    for row in rows {
        w.write_record(row).expect("in-memory csv");
    }
    let bytes = w.into_inner().expect("in-memory csv");
    manifest.write_file(name, &bytes).map_err(|m| CmdError::runtime("io_error", m))?;
    Ok(())
}

/// Shortest round-trip decimal formatting; deterministic across runs.
fn fmt(v: f64) -> String {
    if v == 0.0 {
        "0".into()
    } else {
        format!("{v}")
    }
}

pub fn cmd_solve_mfg(cfg: &ExperimentConfig, manifest: &mut RunManifest) -> CmdResult {
    let spec = build_spec(cfg)?;
    let grid = spec.grid.clone();
    let m0 = initial_density(cfg, &grid)?;
    let solver = solver_config(cfg);
    let set = solve_mfc(&spec, &m0, &solver).map_err(core_err)?;
    manifest.finish_stage("solve");
    let best = set.best();

    let mut u_rows = Vec::new();
    let mut m_rows = Vec::new();
    for k in 0..grid.time_count() {
        let t = grid.time(k);
        for n in 0..grid.node_count() {
            let p = grid.position(n);
            let mut row = vec![k.to_string(), fmt(t), n.to_string(), fmt(p[0])];
            if grid.dim == 2 {
                row.push(fmt(p[1]));
            }
            let mut mrow = row.clone();
            row.push(fmt(best.u.slices[k][n]));
            mrow.push(fmt(best.m.slices[k].values[n]));
            u_rows.push(row);
            m_rows.push(mrow);
        }
    }
    let header: Vec<&str> = if grid.dim == 2 {
        vec!["k", "t", "node", "x", "y", "value"]
    } else {
        vec!["k", "t", "node", "x", "value"]
    };
    write_csv(manifest, "value_field.csv", &header, &u_rows)?;
    write_csv(manifest, "density_path.csv", &header, &m_rows)?;

    let conv_rows: Vec<Vec<String>> = set
        .solutions
        .iter()
        .map(|s| {
            vec![
                s.start_label.clone(),
                s.iterations.to_string(),
                fmt(s.fixed_point_residual),
                fmt(s.cost),
            ]
        })
        .collect();
    write_csv(
        manifest,
        "convergence.csv",
        &["start_label", "iterations", "fixed_point_residual", "cost"],
        &conv_rows,
    )?;
    let cluster_rows: Vec<Vec<String>> = set
        .clusters
        .iter()
        .enumerate()
        .map(|(i, c)| {
            vec![
                i.to_string(),
                set.solutions[c.representative].start_label.clone(),
                fmt(c.cost),
                c.members.len().to_string(),
            ]
        })
        .collect();
    write_csv(
        manifest,
        "clusters.csv",
        &["cluster", "representative", "cost", "members"],
        &cluster_rows,
    )?;
    manifest.finish_stage("write");
    println!(
        "solve-mfg: {} cluster(s), value {:.6e}, best start '{}'",
        set.clusters.len(),
        set.global_min_cost,
        best.start_label
    );
    Ok(0)
}

pub fn cmd_stability_scan(cfg: &ExperimentConfig, manifest: &mut RunManifest) -> CmdResult {
    if cfg.stability.scan_means.is_empty() || cfg.stability.scan_stds.is_empty() {
        return Err(CmdError::config(
            "empty_family",
            "stability scan needs a nonempty means x stds family".into(),
        ));
    }
    let spec = build_spec(cfg)?;
    let grid = spec.grid.clone();
    let solver = solver_config(cfg);
    let options =
        ClassifyOptions { sigma_grid: cfg.stability.sigma_grid.clone(), threshold: cfg.stability.threshold };
    let mut rows = Vec::new();
    let mut strongly = 0usize;
    let mut total = 0usize;
    for &mean in &cfg.stability.scan_means {
        for &std in &cfg.stability.scan_stds {
            total += 1;
            let outcome = GridDensity::gaussian(grid.clone(), [mean, 0.0], [std, std])
                .and_then(|m0| solve_mfc(&spec, &m0, &solver))
                .and_then(|set| {
                    let report = classify_stability(&spec, set.best(), &options)?;
                    Ok((set.clusters.len(), report))
                });
            match outcome {
                Ok((clusters, report)) => {
                    let cell_strong =
                        clusters == 1 && report.verdict == Verdict::StronglyStable;
                    if cell_strong {
                        strongly += 1;
                    }
                    let smin_at_one = report
                        .assessments
                        .last()
                        .map(|a| a.min_singular_value)
                        .unwrap_or(f64::NAN);
                    rows.push(vec![
                        fmt(mean),
                        fmt(std),
                        clusters.to_string(),
                        report.verdict.as_str().to_string(),
                        cell_strong.to_string(),
                        fmt(smin_at_one),
                    ]);
                }
                Err(e) => {
                    rows.push(vec![
                        fmt(mean),
                        fmt(std),
                        "0".into(),
                        format!("error:{}", error_kind(&e)),
                        "false".into(),
                        "nan".into(),
                    ]);
                }
            }
        }
    }
    write_csv(
        manifest,
        "stability_scan.csv",
        &["mean", "std", "clusters", "verdict", "cell_strongly_stable", "min_singular_at_one"],
        &rows,
    )?;
    let fraction = strongly as f64 / total as f64;
    write_csv(
        manifest,
        "stability_summary.csv",
        &["cells", "strongly_stable", "fraction"],
        &[vec![total.to_string(), strongly.to_string(), fmt(fraction)]],
    )?;
    manifest.finish_stage("scan");
    println!("stability-scan: {strongly}/{total} cells strongly stable");
    Ok(0)
}

pub fn cmd_chaos_rate(cfg: &ExperimentConfig, manifest: &mut RunManifest) -> CmdResult {
    let spec = build_spec(cfg)?;
    let grid = spec.grid.clone();
    let m0 = initial_density(cfg, &grid)?;
    let solver = solver_config(cfg);
    let set = solve_mfc(&spec, &m0, &solver).map_err(core_err)?;
    if !set.unique_cluster() {
        return Err(CmdError::runtime(
            "non_unique_cluster",
            format!(
                "chaos experiment requires a unique cluster, found {}",
                set.clusters.len()
            ),
        ));
    }
    manifest.finish_stage("solve");
    let result = chaos_rate_experiment(
        &spec,
        set.best(),
        &cfg.particles.n_schedule,
        cfg.particles.replicas,
        cfg.run.seed,
    )
    .map_err(core_err)?;
    manifest.finish_stage("simulate");

    let rows: Vec<Vec<String>> = result
        .n_values
        .iter()
        .zip(result.errors.iter().zip(&result.ci_halfwidths).zip(&result.replicas_used))
        .map(|(&n, ((&e, &ci), &used))| {
            vec![n.to_string(), fmt(e), fmt(ci), used.to_string()]
        })
        .collect();
    write_csv(
        manifest,
        "chaos.csv",
        &["N", "mean_error", "ci_halfwidth", "replicas_used"],
        &rows,
    )?;
    write_csv(
        manifest,
        "chaos_fit.csv",
        &["gamma_hat", "c_hat", "r_squared", "excluded", "n_ninth_envelope"],
        &[vec![
            fmt(result.fitted_rate),
            fmt(result.fitted_constant),
            fmt(result.r_squared),
            result.excluded.to_string(),
            fmt(result.n_ninth_envelope()),
        ]],
    )?;
    // gnuplot-compatible two-column data
    let mut dat = String::from("# N mean_error\n");
    for (n, e) in result.n_values.iter().zip(&result.errors) {
        dat.push_str(&format!("{n} {}\n", fmt(*e)));
    }
    manifest
        .write_file("chaos.dat", dat.as_bytes())
        .map_err(|m| CmdError::runtime("io_error", m))?;
    if cfg.particles.replicas == 1 {
        write_csv(
            manifest,
            "warnings.csv",
            &["warning"],
            &[vec!["replicas = 1: confidence half-widths are degenerate".into()]],
        )?;
    }
    manifest.finish_stage("write");
    println!(
        "chaos-rate: gamma_hat {:.3}, C_hat {:.3}, r^2 {:.3}, excluded {}",
        result.fitted_rate, result.fitted_constant, result.r_squared, result.excluded
    );
    Ok(0)
}

pub fn cmd_vn_compare(cfg: &ExperimentConfig, manifest: &mut RunManifest) -> CmdResult {
    let spec = build_spec(cfg)?;
    if !(1..=3).contains(&cfg.particles.small_n) {
        return Err(CmdError::config(
            "invalid_small_n",
            format!("small_n must be in 1..=3, got {}", cfg.particles.small_n),
        ));
    }
    let mut gap_rows = Vec::new();
    let mut summary_rows = Vec::new();
    for n in 1..=cfg.particles.small_n {
        let small = solve_vn_small(&spec, n).map_err(core_err)?;
        let report =
            vn_vs_u_gap(&spec, &small, cfg.particles.sample_points, cfg.run.seed).map_err(core_err)?;
        for (k, coords, gap) in &report.samples {
            let xs = coords.iter().map(|x| fmt(*x)).collect::<Vec<_>>().join(";");
            gap_rows.push(vec![n.to_string(), k.to_string(), xs, fmt(*gap)]);
        }
        summary_rows.push(vec![
            n.to_string(),
            fmt(report.max_gap),
            fmt(report.mean_gap),
            fmt(small.lipschitz_diagnostic),
        ]);
        manifest.finish_stage(&format!("small-n-{n}"));
    }
    write_csv(manifest, "vn_gaps.csv", &["N", "k", "coordinates", "gap"], &gap_rows)?;
    write_csv(
        manifest,
        "vn_summary.csv",
        &["N", "max_gap", "mean_gap", "lipschitz_diagnostic"],
        &summary_rows,
    )?;
    manifest.finish_stage("write");
    for row in &summary_rows {
        println!("vn-compare: N={} max gap {}, mean gap {}", row[0], row[1], row[2]);
    }
    Ok(0)
}

pub fn cmd_second_order_check(cfg: &ExperimentConfig, manifest: &mut RunManifest) -> CmdResult {
    let spec = build_spec(cfg)?;
    let grid = spec.grid.clone();
    let m0 = initial_density(cfg, &grid)?;
    let solver = solver_config(cfg);
    let set = solve_mfc(&spec, &m0, &solver).map_err(core_err)?;
    manifest.finish_stage("solve");
    let base = set.best();
    let mut rows = Vec::new();
    let mut min_value = f64::INFINITY;
    for i in 0..cfg.particles.beta_count {
        let beta = random_beta(&spec, cfg.run.seed, i as u64);
        let value = second_order_form(&spec, base, &beta).map_err(core_err)?;
        min_value = min_value.min(value);
        rows.push(vec![i.to_string(), fmt(value)]);
    }
    write_csv(manifest, "second_order.csv", &["beta_index", "value"], &rows)?;
    write_csv(
        manifest,
        "second_order_summary.csv",
        &["beta_count", "min_value", "unique_cluster", "nonnegative"],
        &[vec![
            cfg.particles.beta_count.to_string(),
            fmt(min_value),
            set.unique_cluster().to_string(),
            (min_value >= -1e-6).to_string(),
        ]],
    )?;
    manifest.finish_stage("write");
    println!(
        "second-order-check: min value {min_value:.3e} over {} fields (unique cluster: {})",
        cfg.particles.beta_count,
        set.unique_cluster()
    );
    Ok(0)
}

struct Check {
    name: &'static str,
    measured: f64,
    tolerance: f64,
    pass: bool,
}

fn upper_check(name: &'static str, measured: f64, tolerance: f64) -> Check {
    Check { name, measured, tolerance, pass: measured <= tolerance }
}

fn lower_check(name: &'static str, measured: f64, tolerance: f64) -> Check {
    Check { name, measured, tolerance, pass: measured >= tolerance }
}

/// Full invariant suite.  Every quantitative tolerance is multiplied by
/// `verify.tolerance_scale`, so scaling it down by 100 exercises the failure
/// path.
pub fn cmd_verify(cfg: &ExperimentConfig, manifest: &mut RunManifest) -> CmdResult {
    let s = cfg.verify.tolerance_scale;
    if !(s > 0.0) {
        return Err(CmdError::config(
            "invalid_tolerance_scale",
            format!("tolerance_scale must be positive, got {s}"),
        ));
    }
    let solver = solver_config(cfg);
    let mut checks: Vec<Check> = Vec::new();

    // 1. Legendre duality identities on the configured Hamiltonian.
    let spec_cfg = build_spec(cfg)?;
    let mut rng = stage_rng(cfg.run.seed, "verify-duality", 0);
    let mut duality_worst = 0.0f64;
    for _ in 0..50 {
        let x = [(f64::uniform_01(&mut rng) - 0.5) * 2.0 * spec_cfg.grid.box_halfwidth, 0.0];
        let p = [(f64::uniform_01(&mut rng) - 0.5) * 6.0, 0.0];
        let report = duality_identities(&spec_cfg.hamiltonian, x, p);
        duality_worst = duality_worst
            .max(report.hamiltonian_residual)
            .max(report.gradient_residual);
    }
    checks.push(upper_check("duality_identities", duality_worst, 1e-7 * s));
    manifest.finish_stage("duality");

    // 2. Affine HJB exactness on a 257-point grid: with G(x) = c x and
    //    H = |p|^2 the value is u = c x - c^2 (T - t).
    {
        // Box wide enough that the wall boundary layer (width ~ sqrt(T))
        // is negligible on the measured interior |x| <= 4.
        let g = SpaceTimeGrid::<f64>::new(1, 12.0, 257, 0.0, 1.0, 64).map_err(core_err)?;
        let spec = builtin(g.clone(), "quadratic-free").map_err(core_err)?;
        let m0 = GridDensity::gaussian(g.clone(), [0.0, 0.0], [0.8, 1.0]).map_err(core_err)?;
        let set = solve_mfc(&spec, &m0, &solver).map_err(core_err)?;
        let u = &set.best().u;
        let c = 0.5;
        let mut worst = 0.0f64;
        for k in 0..g.time_count() {
            let t = g.time(k);
            for n in 0..g.node_count() {
                let x = g.position(n)[0];
                if x.abs() <= 4.0 {
                    let exact = c * x - c * c * (g.t_final - t);
                    worst = worst.max((u.slices[k][n] - exact).abs());
                }
            }
        }
        checks.push(upper_check("affine_hjb_exactness", worst, 1e-4 * s));
        manifest.finish_stage("affine-hjb");
    }

    // 3. Fokker-Planck Gaussian variance growth under zero drift.
    {
        let g = SpaceTimeGrid::<f64>::new(1, 10.0, 201, 0.0, 1.0, 50).map_err(core_err)?;
        let m0 = GridDensity::gaussian(g.clone(), [0.0, 0.0], [0.5, 1.0]).map_err(core_err)?;
        let drift = mfc_core::pde::DriftField::zero(g.clone());
        let path = solve_fp_forward(&g, &m0, &drift).map_err(core_err)?;
        let var0 = m0.variance();
        let var_t = path.terminal().variance();
        let rel = ((var_t - (var0 + 2.0)) / (var0 + 2.0)).abs();
        checks.push(upper_check("fp_variance_growth", rel, 0.01 * s));
        manifest.finish_stage("fp-variance");
    }

    // 4. Master-equation residual shrinks under refinement (ratio >= 1.5,
    //    scale-independent by construction).
    {
        let mut residuals = Vec::new();
        for (nx, nt) in [(65, 20), (129, 40), (257, 80)] {
            let g = SpaceTimeGrid::<f64>::new(1, 8.0, nx, 0.0, 1.0, nt).map_err(core_err)?;
            let spec = builtin(g.clone(), "quadratic-free").map_err(core_err)?;
            let m0 = GridDensity::gaussian(g.clone(), [0.0, 0.0], [0.8, 1.0]).map_err(core_err)?;
            let set = solve_mfc(&spec, &m0, &solver).map_err(core_err)?;
            let res = master_equation_residual(&spec, &set, &solver, nt / 2).map_err(core_err)?;
            residuals.push(res);
        }
        let ratio_min = (residuals[0] / residuals[1]).min(residuals[1] / residuals[2]);
        checks.push(lower_check("master_residual_refinement", ratio_min, 1.5));
        manifest.finish_stage("master-residual");
    }

    // 5. Second-order form at the configured minimizer.
    {
        let grid = spec_cfg.grid.clone();
        let m0 = initial_density(cfg, &grid)?;
        let set = solve_mfc(&spec_cfg, &m0, &solver).map_err(core_err)?;
        let base = set.best();
        let mut min_value = f64::INFINITY;
        for i in 0..10 {
            let beta = random_beta(&spec_cfg, cfg.run.seed, i);
            min_value = min_value.min(second_order_form(&spec_cfg, base, &beta).map_err(core_err)?);
        }
        checks.push(lower_check("second_order_form", min_value, -1e-6 * s));
        manifest.finish_stage("second-order");

        // 6. Dynamic-programming defect at mid-horizon.
        if set.unique_cluster() {
            let gap = dynamic_programming_gap(&spec_cfg, &set, &solver, grid.nt / 2)
                .map_err(core_err)?;
            checks.push(upper_check("dpp_gap", gap, 2.0 * cfg.solver.tolerance.max(1e-4) * s));
        }
        manifest.finish_stage("dpp");
    }

    // 7. Small-N value against the mean-field value (linear couplings).
    {
        let g = SpaceTimeGrid::<f64>::new(1, 8.0, 65, 0.0, 1.0, 32).map_err(core_err)?;
        let spec = builtin(g, "quadratic-free").map_err(core_err)?;
        let small = solve_vn_small(&spec, 2).map_err(core_err)?;
        let report = vn_vs_u_gap(&spec, &small, 10, cfg.run.seed).map_err(core_err)?;
        checks.push(upper_check("vn_vs_u_gap", report.max_gap, 5e-3 * s));
        manifest.finish_stage("vn-gap");
    }

    let rows: Vec<Vec<String>> = checks
        .iter()
        .map(|c| {
            vec![c.name.to_string(), fmt(c.measured), fmt(c.tolerance), c.pass.to_string()]
        })
        .collect();
    write_csv(manifest, "verify.csv", &["check", "measured", "tolerance", "pass"], &rows)?;
    let failing: Vec<&str> = checks.iter().filter(|c| !c.pass).map(|c| c.name).collect();
    if failing.is_empty() {
        println!("verify: {} checks passed", checks.len());
        Ok(0)
    } else {
        println!(
            "verify: {}/{} checks failed: {}",
            failing.len(),
            checks.len(),
            failing.join(", ")
        );
        Ok(1)
    }
}

/// Dispatch table used by `main`.
pub fn run(
    name: &str,
    cfg: &ExperimentConfig,
    out_dir: &Path,
    config_text: &str,
) -> CmdResult {
    std::fs::create_dir_all(out_dir)
        .map_err(|e| CmdError::runtime("io_error", format!("cannot create {}: {e}", out_dir.display())))?;
    let mut manifest = RunManifest::new(config_text, out_dir);
    let code = match name {
        "solve-mfg" => cmd_solve_mfg(cfg, &mut manifest)?,
        "stability-scan" => cmd_stability_scan(cfg, &mut manifest)?,
        "chaos-rate" => cmd_chaos_rate(cfg, &mut manifest)?,
        "vn-compare" => cmd_vn_compare(cfg, &mut manifest)?,
        "second-order-check" => cmd_second_order_check(cfg, &mut manifest)?,
        "verify" => cmd_verify(cfg, &mut manifest)?,
        other => {
            return Err(CmdError::config("unknown_command", format!("unknown subcommand {other}")))
        }
    };
    manifest.finalize().map_err(|m| CmdError::runtime("io_error", m))?;
    Ok(code)
}
