use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::config::ProblemConfig;
use super::report::{inputs_digest, write_field_csv, write_table_csv, CaseReport, RunReport, Timing, Verdict};
use crate::bsdej::sample_terminal;
use crate::controls::{fenchel_f, JumpSlope, JumpValues};
use crate::error::{Error, Result};
use crate::grid::ValueField;
use crate::paths::{doleans_exponential, map_paths, mc_terminal, pathwise_qv, McEstimate};
use crate::pide::{compare_fields, default_audit_tol, solve_pide, viscosity_audit, TestFunctionFamily, ViolationKind};
use crate::value2::{dpp_check, k_increments, minimality_report, solve_dynamic, solve_static, NEGATIVE_K_TOL};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Suite {
    SolvePide,
    SolveProb,
    Compare,
    Simulate,
    Fenchel,
    CheckViscosity,
    DppCheck,
    Minimality,
    All,
}

impl Suite {
    pub const EACH: [Suite; 8] = [
        Suite::SolvePide,
        Suite::SolveProb,
        Suite::Compare,
        Suite::Simulate,
        Suite::Fenchel,
        Suite::CheckViscosity,
        Suite::DppCheck,
        Suite::Minimality,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Suite::SolvePide => "solve-pide",
            Suite::SolveProb => "solve-prob",
            Suite::Compare => "compare",
            Suite::Simulate => "simulate",
            Suite::Fenchel => "fenchel",
            Suite::CheckViscosity => "check-viscosity",
            Suite::DppCheck => "dpp-check",
            Suite::Minimality => "minimality",
            Suite::All => "all",
        }
    }
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Suite {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Suite::EACH
            .into_iter()
            .chain([Suite::All])
            .find(|x| x.name() == s)
            .ok_or_else(|| format!("unknown suite {s:?}"))
    }
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Overrides `run.seed`.
    pub seed: Option<u64>,
    pub csv_dir: Option<PathBuf>,
}

/// Runs one suite (or all of them) and assembles the report.
///
/// Solver errors become failed verdicts; only report serialisation can fail.
pub fn run_suite(cfg: &ProblemConfig, suite: Suite, opts: &RunOptions) -> RunReport {
    let started = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_millis())
        .unwrap_or(0);
    let clock = Instant::now();
    let seed = opts.seed.unwrap_or(cfg.run.seed);
    let list: Vec<Suite> = if suite == Suite::All { Suite::EACH.to_vec() } else { vec![suite] };
    let mut cases = Vec::new();
    let mut suite_ms = std::collections::BTreeMap::new();
    for s in list {
        let t = Instant::now();
        let ctx = Ctx {
            cfg,
            seed,
            csv_dir: opts.csv_dir.as_deref(),
        };
        let case = match run_one(&ctx, s) {
            Ok(c) => c,
            Err(e) => {
                let mut c = CaseReport::new(s.name());
                c.verdict(Verdict::check("solver completed", false, e.to_string()));
                c
            }
        };
        suite_ms.insert(s.name().to_string(), t.elapsed().as_secs_f64() * 1e3);
        cases.push(case);
    }
    RunReport {
        suite: suite.name().to_string(),
        inputs_digest: inputs_digest(&cfg.source, seed),
        seed,
        threads: rayon::current_num_threads(),
        config: cfg.source.clone(),
        pass: cases.iter().all(|c| c.pass),
        cases,
        timing: Timing {
            started_unix_ms: started,
            total_ms: clock.elapsed().as_secs_f64() * 1e3,
            suite_ms,
        },
    }
}

struct Ctx<'a> {
    cfg: &'a ProblemConfig,
    seed: u64,
    csv_dir: Option<&'a Path>,
}

impl Ctx<'_> {
    fn csv_path(&self, name: &str) -> Result<Option<PathBuf>> {
        match self.csv_dir {
            None => Ok(None),
            Some(dir) => {
                std::fs::create_dir_all(dir)?;
                Ok(Some(dir.join(name)))
            }
        }
    }

    fn export_field(&self, name: &str, field: &ValueField) -> Result<()> {
        if let Some(p) = self.csv_path(&format!("{name}.csv"))? {
            write_field_csv(&p, field, "u")?;
        }
        Ok(())
    }
}

fn run_one(ctx: &Ctx<'_>, suite: Suite) -> Result<CaseReport> {
    match suite {
        Suite::SolvePide => suite_solve_pide(ctx),
        Suite::SolveProb => suite_solve_prob(ctx),
        Suite::Compare => suite_compare(ctx),
        Suite::Simulate => suite_simulate(ctx),
        Suite::Fenchel => suite_fenchel(ctx),
        Suite::CheckViscosity => suite_viscosity(ctx),
        Suite::DppCheck => suite_dpp(ctx),
        Suite::Minimality => suite_minimality(ctx),
        Suite::All => unreachable!("expanded by run_suite"),
    }
}

#[derive(Serialize)]
struct Probe {
    x: f64,
    u: f64,
}

fn probes(field: &ValueField, xs: &[f64]) -> Vec<Probe> {
    xs.iter().map(|&x| Probe { x, u: field.value_at_start(x) }).collect()
}

fn reference_verdict(case: &mut CaseReport, ctx: &Ctx<'_>, field: &ValueField) {
    if let Some(r) = ctx.cfg.run.reference {
        let got = field.value_at_start(ctx.cfg.run.x0);
        case.verdict(
            Verdict::at_most("closed-form value at x0", (got - r).abs(), ctx.cfg.run.tol_reference)
                .with_detail(format!("u(0, {}) = {got}, reference {r}", ctx.cfg.run.x0)),
        );
    }
}

fn grid_outputs(case: &mut CaseReport, cfg: &ProblemConfig) {
    let g = cfg.grid;
    case.output("grid", g);
    case.output("dx", g.dx());
    case.output("dt", g.dt());
}

fn suite_solve_pide(ctx: &Ctx<'_>) -> Result<CaseReport> {
    let cfg = ctx.cfg;
    let mut case = CaseReport::new("solve-pide");
    grid_outputs(&mut case, cfg);
    let sol = solve_pide(&cfg.controls, &cfg.generator, &cfg.terminal, &cfg.grid, cfg.run.n_picard)?;
    case.output("u0", probes(&sol.u, &cfg.run.probes));
    case.output("cfl_margin", sol.cfl_margin);
    case.output("boundary_influence", sol.boundary_influence);
    case.verdict(Verdict::check("CFL satisfied", sol.cfl_margin >= 1.0, format!("margin {}", sol.cfl_margin)));
    let terminal_exact = sol.u.terminal() == sample_terminal(&cfg.terminal, &cfg.grid)?.as_slice();
    case.verdict(Verdict::check("terminal slice equals g", terminal_exact, ""));
    if let Some(b) = sol.boundary_influence {
        case.verdict(Verdict::at_most("boundary influence on central half", b, cfg.run.tol_compare));
    }
    reference_verdict(&mut case, ctx, &sol.u);
    ctx.export_field("solve_pide", &sol.u)?;
    Ok(case)
}

fn suite_solve_prob(ctx: &Ctx<'_>) -> Result<CaseReport> {
    let cfg = ctx.cfg;
    let run = &cfg.run;
    let mut case = CaseReport::new("solve-prob");
    grid_outputs(&mut case, cfg);
    let dynamic = solve_dynamic(&cfg.controls, &cfg.generator, &cfg.terminal, &cfg.grid, run.n_picard)?;
    let stat = solve_static(&cfg.controls, &cfg.generator, &cfg.terminal, &cfg.grid, run.n_picard)?;
    case.output("u0", probes(&dynamic.u, &run.probes));
    let excess = stat
        .u0
        .iter()
        .zip(dynamic.u.initial())
        .map(|(s, d)| s - d)
        .fold(f64::NEG_INFINITY, f64::max);
    case.output("static_minus_dynamic_max", excess);
    case.verdict(Verdict::at_most("static value below dynamic value", excess, 1e-10));
    reference_verdict(&mut case, ctx, &dynamic.u);

    // a single control with zero driver is a plain expectation
    if cfg.controls.len() == 1 && cfg.generator.is_zero() {
        let c = &cfg.controls.points()[0];
        let mut mc = Vec::new();
        for (k, &x) in run.probes.iter().enumerate() {
            let est = mc_terminal(c, &cfg.terminal, x, 0.0, cfg.grid.t_end, run.mc_dt, run.n_paths, ctx.seed.wrapping_add(k as u64))?;
            let u = dynamic.u.value_at_start(x);
            case.verdict(
                Verdict::at_most(&format!("Monte Carlo agreement at x = {x}"), (est.mean - u).abs(), 3.0 * est.std_error)
                    .with_detail(format!("grid {u}, MC {} ± {}", est.mean, est.std_error)),
            );
            mc.push(est);
        }
        case.output("monte_carlo", mc);
    }
    ctx.export_field("solve_prob", &dynamic.u)?;
    Ok(case)
}

fn suite_compare(ctx: &Ctx<'_>) -> Result<CaseReport> {
    let cfg = ctx.cfg;
    let mut case = CaseReport::new("compare");
    grid_outputs(&mut case, cfg);
    let pide = solve_pide(&cfg.controls, &cfg.generator, &cfg.terminal, &cfg.grid, cfg.run.n_picard)?;
    let dynamic = solve_dynamic(&cfg.controls, &cfg.generator, &cfg.terminal, &cfg.grid, cfg.run.n_picard)?;
    let diff = compare_fields(&pide.u, &dynamic.u, cfg.run.region)?;
    case.output("diff", diff);
    case.output("u0_pide", probes(&pide.u, &cfg.run.probes));
    case.output("u0_dynamic", probes(&dynamic.u, &cfg.run.probes));
    case.verdict(Verdict::at_most("sup difference on region", diff.sup_diff, cfg.run.tol_compare));
    reference_verdict(&mut case, ctx, &pide.u);
    reference_verdict(&mut case, ctx, &dynamic.u);
    Ok(case)
}

#[derive(Serialize)]
struct ControlSimulation {
    control: String,
    terminal_increment: McEstimate,
    doleans: McEstimate,
    doleans_min: f64,
    continuous_qv_density: McEstimate,
}

fn suite_simulate(ctx: &Ctx<'_>) -> Result<CaseReport> {
    let cfg = ctx.cfg;
    let run = &cfg.run;
    let mut case = CaseReport::new("simulate");
    let gamma = JumpSlope::new(run.doleans_c, cfg.generator.jump_slope.delta)?;
    let mut summaries = Vec::new();
    for (k, c) in cfg.controls.points().iter().enumerate() {
        let rows = map_paths(c, run.x0, 0.0, cfg.grid.t_end, run.mc_dt, run.n_paths, ctx.seed.wrapping_add(k as u64), |p| {
            let qv = pathwise_qv(p);
            let d = doleans_exponential(p, run.eta, |e| gamma.gamma(e), c)?;
            Ok([p.terminal() - run.x0, d, qv.continuous_density, qv.total, p.jumps.len() as f64])
        })?;
        let column = |j: usize| rows.iter().map(|r| r[j]).collect::<Vec<f64>>();
        let incr = McEstimate::from_samples(&column(0));
        let doleans = McEstimate::from_samples(&column(1));
        let qv = McEstimate::from_samples(&column(2));
        let doleans_min = column(1).into_iter().fold(f64::INFINITY, f64::min);
        case.verdict(
            Verdict::at_most(&format!("control {k}: state is a martingale"), incr.mean.abs(), 3.0 * incr.std_error)
                .with_detail(format!("E[X_T - x0] = {} ± {}", incr.mean, incr.std_error)),
        );
        case.verdict(
            Verdict::at_most(&format!("control {k}: Doléans-Dade mean is 1"), (doleans.mean - 1.0).abs(), 3.0 * doleans.std_error)
                .with_detail(format!("mean {} ± {}", doleans.mean, doleans.std_error)),
        );
        case.verdict(Verdict::check(
            &format!("control {k}: Doléans-Dade exponential positive"),
            doleans_min > 0.0,
            format!("min {doleans_min}"),
        ));
        case.verdict(
            Verdict::at_most(&format!("control {k}: continuous QV density is a"), (qv.mean - c.a).abs(), 3.0 * qv.std_error)
                .with_detail(format!("density {} ± {}, a = {}", qv.mean, qv.std_error, c.a)),
        );
        if let Some(path) = ctx.csv_path(&format!("simulate_control{k}.csv"))? {
            let head: Vec<Vec<f64>> = rows
                .iter()
                .take(run.csv_paths)
                .enumerate()
                .map(|(i, r)| std::iter::once(i as f64).chain(r.iter().copied()).collect())
                .collect();
            write_table_csv(&path, &["path", "increment", "doleans", "qv_density", "qv_total", "jumps"], &head)?;
        }
        summaries.push(ControlSimulation {
            control: c.to_string(),
            terminal_increment: incr,
            doleans,
            doleans_min,
            continuous_qv_density: qv,
        });
    }
    case.output("controls", summaries);
    Ok(case)
}

fn suite_fenchel(ctx: &Ctx<'_>) -> Result<CaseReport> {
    let cfg = ctx.cfg;
    let mut case = CaseReport::new("fenchel");
    let span = 2.0 * cfg.controls.a_max() + 1.0;
    let step = 0.01;
    let gammas: Vec<f64> = (0..=(2.0 * span / step).round() as usize).map(|k| -span + k as f64 * step).collect();
    let mut worst = 0.0f64;
    for c in cfg.controls.points() {
        let marks: Vec<f64> = c.nu.atoms().iter().map(|&(e, _)| e).collect();
        let zero = [JumpValues::from_fn(&marks, |_| 0.0)];
        let v = fenchel_f(|g, _| g * g / 4.0, &gammas, &zero, c.a, &c.nu)?;
        worst = worst.max((v.value - c.a * c.a / 4.0).abs());
    }
    case.output("quadratic_max_error", worst);
    case.verdict(Verdict::at_most("quadratic conjugate equals a²/4", worst, step * step / 16.0 + 1e-12));

    // refining the (γ, ṽ) grids can only raise the supremum
    let mut rng = ChaCha8Rng::seed_from_u64(ctx.seed);
    let coarse_g: Vec<f64> = (0..=32).map(|k| -8.0 + 0.5 * k as f64).collect();
    let fine_g: Vec<f64> = (0..=64).map(|k| -8.0 + 0.25 * k as f64).collect();
    let mut failures = 0;
    let instances = 10;
    for _ in 0..instances {
        let alpha = rng.random_range(0.1..2.0);
        let beta = rng.random_range(-2.0..2.0);
        let kink = rng.random_range(0.0..1.0);
        let rho = rng.random_range(-2.0..2.0);
        let mu = rng.random_range(0.1..1.0);
        let h = |g: f64, v: &JumpValues| {
            alpha * (g - beta).powi(2) + kink * (g - rho).abs() + mu * v.entries().iter().map(|&(_, u)| u * u).sum::<f64>()
        };
        for c in cfg.controls.points() {
            let marks: Vec<f64> = c.nu.atoms().iter().map(|&(e, _)| e).collect();
            let vbars = |levels: &[f64]| levels.iter().map(|&l| JumpValues::from_fn(&marks, |_| l)).collect::<Vec<_>>();
            let coarse = fenchel_f(h, &coarse_g, &vbars(&[-1.0, 0.0, 1.0]), c.a, &c.nu)?;
            let fine = fenchel_f(h, &fine_g, &vbars(&[-1.0, -0.5, 0.0, 0.5, 1.0]), c.a, &c.nu)?;
            if fine.value < coarse.value {
                failures += 1;
            }
        }
    }
    case.output("refinement_instances", instances);
    case.verdict(Verdict::check(
        "refinement never lowers the conjugate",
        failures == 0,
        format!("{failures} decreases"),
    ));
    Ok(case)
}

fn suite_viscosity(ctx: &Ctx<'_>) -> Result<CaseReport> {
    let cfg = ctx.cfg;
    let grid = cfg.grid;
    let mut case = CaseReport::new("check-viscosity");
    let sol = solve_pide(&cfg.controls, &cfg.generator, &cfg.terminal, &grid, cfg.run.n_picard)?;
    let fam = TestFunctionFamily {
        region: cfg.run.region,
        ..TestFunctionFamily::default()
    }
    .with_slice_budget(&grid, cfg.run.audit_slices);
    let tol = cfg.run.tol_audit.unwrap_or_else(|| default_audit_tol(&grid));
    let rep = viscosity_audit(&sol.u, &fam, &cfg.controls, &cfg.generator, tol)?;
    case.output("tol", tol);
    case.output("touches_checked", rep.touches_checked);
    case.output("worst_super", rep.worst_super);
    case.output("worst_sub", rep.worst_sub);
    case.verdict(Verdict::check(
        "no viscosity violations",
        rep.super_violations + rep.sub_violations == 0,
        format!("{} super, {} sub", rep.super_violations, rep.sub_violations),
    ));
    case.output("violations", &rep.violations);

    // a spike on an audited slice must be caught
    let audited = (1..grid.nt).step_by(fam.slice_stride).count();
    let n = 1 + fam.slice_stride * (audited / 2);
    let i = grid.nearest(cfg.run.x0);
    let mut bad = sol.u.clone();
    bad.data[n][i] += 0.5;
    let spiked = viscosity_audit(&bad, &fam, &cfg.controls, &cfg.generator, tol)?;
    let caught = spiked.violations.iter().any(|v| v.kind == ViolationKind::Sub && v.node == (n, i));
    case.verdict(Verdict::check(
        "corrupted node flagged",
        caught,
        format!("+0.5 at (t = {}, x = {})", grid.t(n), grid.x(i)),
    ));
    Ok(case)
}

fn suite_dpp(ctx: &Ctx<'_>) -> Result<CaseReport> {
    let cfg = ctx.cfg;
    let mut case = CaseReport::new("dpp-check");
    let split = cfg.run.split_time.unwrap_or_else(|| cfg.grid.t(cfg.grid.nt / 2));
    let rep = dpp_check(&cfg.controls, &cfg.generator, &cfg.terminal, &cfg.grid, split, cfg.run.region, cfg.run.n_picard)?;
    case.output("report", rep.clone());
    case.verdict(Verdict::at_most("two-stage factorisation", rep.factorization_diff, 1e-12));
    case.verdict(Verdict::at_most("static over split below dynamic", rep.static_excess, 1e-10));
    if let Some(tol) = cfg.run.tol_static_gap {
        case.verdict(Verdict::at_most("static equals dynamic on region", rep.static_gap, tol));
    }
    Ok(case)
}

fn suite_minimality(ctx: &Ctx<'_>) -> Result<CaseReport> {
    let cfg = ctx.cfg;
    let mut case = CaseReport::new("minimality");
    let dynamic = solve_dynamic(&cfg.controls, &cfg.generator, &cfg.terminal, &cfg.grid, cfg.run.n_picard)?;
    let k = k_increments(&dynamic.u, &cfg.controls, &cfg.generator, cfg.run.n_picard)?;
    let rep = minimality_report(&k);
    let i = cfg.grid.nearest(cfg.run.x0);
    let total_at_x0: Vec<f64> = rep.total_k0.iter().map(|t| t[i]).collect();
    case.output("max_of_minima", rep.max_of_minima);
    case.output("min_increment", rep.min_increment);
    case.output("negative_violations", rep.negative_violations);
    case.output("total_k_at_x0", total_at_x0);
    case.verdict(Verdict::at_most("minimum condition", rep.max_of_minima, 1e-10));
    case.verdict(Verdict::check(
        "K nondecreasing",
        rep.negative_violations == 0,
        format!("{} increments below -{NEGATIVE_K_TOL:e}, smallest {}", rep.negative_violations, rep.min_increment),
    ));
    Ok(case)
}

/// Reads `LEVY2B_THREADS` (unset or 0: all cores).
pub fn threads_from_env() -> std::result::Result<usize, Error> {
    match std::env::var("LEVY2B_THREADS") {
        Err(_) => Ok(0),
        Ok(s) => s.trim().parse::<usize>().map_err(|_| {
            Error::Config(vec![crate::error::ConfigIssue {
                location: "LEVY2B_THREADS".into(),
                message: format!("expected a nonnegative integer, got {s:?}"),
            }])
        }),
    }
}

/// Runs inside a dedicated pool of `threads` workers (0: rayon's default).
pub fn run_in_pool<T: Send>(threads: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::Spec(format!("cannot start thread pool: {e}")))?;
    Ok(pool.install(f))
}
