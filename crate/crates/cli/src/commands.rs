//! Experiment drivers behind the CLI subcommands.

use std::fmt::Write as _;
use std::time::Instant;

use geomint::control::{self, OcpProblem};
use geomint::integrator::{self, IntegratorConfig};
use geomint::mechanics::{self, CotangentState, MechanicalSystem, TangentState};
use geomint::oracle::{self, OracleConfig};
use geomint::systems;
use nalgebra::DVector;

use crate::config::{IntegratorKind, ScenarioConfig};
use crate::CliError;

/// CSV floats carry 17 significant digits so downstream readers can
/// round-trip them exactly.
fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

fn numerical(err: impl std::fmt::Display) -> CliError {
    CliError::Numerical(err.to_string())
}

fn mechanical_system(cfg: &ScenarioConfig) -> Result<MechanicalSystem, CliError> {
    systems::mechanical_by_name(&cfg.system).ok_or_else(|| {
        CliError::Config(format!(
            "system `{}` is not a mechanical system; this command needs one",
            cfg.system
        ))
    })
}

fn initial_state(cfg: &ScenarioConfig) -> Result<CotangentState, CliError> {
    CotangentState::new(
        DVector::from_vec(cfg.q0.clone()),
        DVector::from_vec(cfg.p0.clone()),
    )
    .map_err(numerical)
}

fn least_squares_slope(times: &[f64], values: &[f64]) -> f64 {
    let n = values.len() as f64;
    let t_mean = times.iter().sum::<f64>() / n;
    let v_mean = values.iter().sum::<f64>() / n;
    let mut num = 0.0;
    let mut den = 0.0;
    for (t, v) in times.iter().zip(values) {
        num += (t - t_mean) * (v - v_mean);
        den += (t - t_mean) * (t - t_mean);
    }
    if den == 0.0 {
        0.0
    } else {
        num / den
    }
}

/// Uniform per-point record shared by both integrators.
struct Sampled {
    times: Vec<f64>,
    qs: Vec<DVector<f64>>,
    ps: Vec<DVector<f64>>,
    energies: Vec<f64>,
    residuals: Vec<DVector<f64>>,
    multipliers: Vec<DVector<f64>>,
    newton_iters: Vec<usize>,
}

fn run_alpha_scheme(
    sys: &MechanicalSystem,
    cfg: &ScenarioConfig,
    s0: &CotangentState,
) -> Result<Sampled, CliError> {
    let icfg = IntegratorConfig::new(cfg.alpha, cfg.h);
    let traj = integrator::run(sys, &icfg, s0, cfg.steps).map_err(numerical)?;
    Ok(Sampled {
        times: traj.times,
        qs: traj.qs,
        ps: traj.ps,
        energies: traj.energies,
        residuals: traj.constraint_residuals,
        multipliers: traj.multipliers,
        newton_iters: traj.newton_iters,
    })
}

fn run_rk4(
    sys: &MechanicalSystem,
    cfg: &ScenarioConfig,
    s0: &CotangentState,
) -> Result<Sampled, CliError> {
    let states = oracle::rk4_integrate(sys, s0, cfg.h, cfg.steps).map_err(numerical)?;
    let mut out = Sampled {
        times: Vec::new(),
        qs: Vec::new(),
        ps: Vec::new(),
        energies: Vec::new(),
        residuals: Vec::new(),
        multipliers: Vec::new(),
        newton_iters: Vec::new(),
    };
    for (k, s) in states.iter().enumerate() {
        out.times.push(k as f64 * cfg.h);
        out.energies.push(mechanics::hamiltonian(sys, s).map_err(numerical)?);
        let v = mechanics::legendre_inv(sys, s).map_err(numerical)?.v;
        out.residuals.push((sys.phi)(&s.q, &v));
        let state = TangentState::new(s.q.clone(), v).map_err(numerical)?;
        out.multipliers
            .push(mechanics::multiplier_force(sys, &state).map_err(numerical)?.lambda);
        out.qs.push(s.q.clone());
        out.ps.push(s.p.clone());
        out.newton_iters.push(0);
    }
    Ok(out)
}

fn simulate_csv(sys: &MechanicalSystem, data: &Sampled) -> String {
    let mut header = String::from("step,t");
    for i in 0..sys.n {
        write!(header, ",q{i}").unwrap();
    }
    for i in 0..sys.n {
        write!(header, ",p{i}").unwrap();
    }
    header.push_str(",energy");
    for a in 0..sys.m {
        write!(header, ",constraint_residual{a}").unwrap();
    }
    for a in 0..sys.m {
        write!(header, ",lambda{a}").unwrap();
    }
    header.push_str(",newton_iters");

    let mut csv = header;
    csv.push('\n');
    for k in 0..data.times.len() {
        write!(csv, "{k},{}", fmt_f64(data.times[k])).unwrap();
        for i in 0..sys.n {
            write!(csv, ",{}", fmt_f64(data.qs[k][i])).unwrap();
        }
        for i in 0..sys.n {
            write!(csv, ",{}", fmt_f64(data.ps[k][i])).unwrap();
        }
        write!(csv, ",{}", fmt_f64(data.energies[k])).unwrap();
        for a in 0..sys.m {
            write!(csv, ",{}", fmt_f64(data.residuals[k][a])).unwrap();
        }
        for a in 0..sys.m {
            write!(csv, ",{}", fmt_f64(data.multipliers[k][a])).unwrap();
        }
        write!(csv, ",{}", data.newton_iters[k]).unwrap();
        csv.push('\n');
    }
    csv
}

fn write_out(cfg: &ScenarioConfig, contents: &str) -> Result<(), CliError> {
    if let Some(path) = &cfg.out {
        std::fs::write(path, contents.as_bytes())
            .map_err(|e| CliError::Numerical(format!("cannot write {}: {e}", path.display())))?;
    }
    Ok(())
}

fn print_summary(pairs: &[(&str, String)]) {
    for (key, value) in pairs {
        println!("{key}: {value}");
    }
}

pub fn simulate(cfg: &ScenarioConfig) -> Result<(), CliError> {
    let start = Instant::now();
    let sys = mechanical_system(cfg)?;
    let s0 = initial_state(cfg)?;
    let data = match cfg.integrator {
        IntegratorKind::AlphaScheme => run_alpha_scheme(&sys, cfg, &s0)?,
        IntegratorKind::Rk4 => run_rk4(&sys, cfg, &s0)?,
    };
    let csv = simulate_csv(&sys, &data);
    write_out(cfg, &csv)?;

    let e0 = data.energies[0];
    let drift: Vec<f64> = data.energies.iter().map(|e| e - e0).collect();
    let max_drift = drift.iter().fold(0.0f64, |a, d| a.max(d.abs()));
    let max_residual = data
        .residuals
        .iter()
        .filter(|r| !r.is_empty())
        .map(|r| r.amax())
        .fold(0.0f64, f64::max);
    let iters_max = data.newton_iters.iter().copied().max().unwrap_or(0);
    let iters_mean =
        data.newton_iters.iter().sum::<usize>() as f64 / data.newton_iters.len() as f64;

    print_summary(&[
        ("command", "simulate".into()),
        ("system", cfg.system.clone()),
        ("integrator", cfg.integrator.name().into()),
        ("alpha", format!("{}", cfg.alpha)),
        ("h", format!("{}", cfg.h)),
        ("steps", format!("{}", cfg.steps)),
        ("wall_time_s", format!("{:.6}", start.elapsed().as_secs_f64())),
        ("max_energy_drift", format!("{max_drift:e}")),
        (
            "drift_slope",
            format!("{:e}", least_squares_slope(&data.times, &drift)),
        ),
        ("max_constraint_residual", format!("{max_residual:e}")),
        ("newton_iters_max", format!("{iters_max}")),
        ("newton_iters_mean", format!("{iters_mean:.3}")),
        (
            "out",
            cfg.out
                .as_ref()
                .map(|p| p.display().to_string())
                .unwrap_or_else(|| "-".into()),
        ),
        ("exit_status", "0".into()),
    ]);
    Ok(())
}

pub fn compare_energy(cfg: &ScenarioConfig) -> Result<(), CliError> {
    let start = Instant::now();
    let sys = mechanical_system(cfg)?;
    let s0 = initial_state(cfg)?;
    let alpha_run = run_alpha_scheme(&sys, cfg, &s0)?;
    let rk4_run = run_rk4(&sys, cfg, &s0)?;

    let e0a = alpha_run.energies[0];
    let e0r = rk4_run.energies[0];
    let err_alpha: Vec<f64> = alpha_run.energies.iter().map(|e| e - e0a).collect();
    let err_rk4: Vec<f64> = rk4_run.energies.iter().map(|e| e - e0r).collect();

    let mut csv = String::from("t,energy_err_alpha,energy_err_rk4\n");
    for k in 0..alpha_run.times.len() {
        writeln!(
            csv,
            "{},{},{}",
            fmt_f64(alpha_run.times[k]),
            fmt_f64(err_alpha[k]),
            fmt_f64(err_rk4[k])
        )
        .unwrap();
    }
    write_out(cfg, &csv)?;

    let max_abs = |v: &[f64]| v.iter().fold(0.0f64, |a, x| a.max(x.abs()));
    print_summary(&[
        ("command", "compare-energy".into()),
        ("system", cfg.system.clone()),
        ("alpha", format!("{}", cfg.alpha)),
        ("h", format!("{}", cfg.h)),
        ("steps", format!("{}", cfg.steps)),
        ("wall_time_s", format!("{:.6}", start.elapsed().as_secs_f64())),
        (
            "drift_slope_alpha",
            format!("{:e}", least_squares_slope(&alpha_run.times, &err_alpha)),
        ),
        (
            "drift_slope_rk4",
            format!("{:e}", least_squares_slope(&rk4_run.times, &err_rk4)),
        ),
        ("max_energy_err_alpha", format!("{:e}", max_abs(&err_alpha))),
        ("max_energy_err_rk4", format!("{:e}", max_abs(&err_rk4))),
        ("exit_status", "0".into()),
    ]);
    Ok(())
}

pub fn convergence(cfg: &ScenarioConfig) -> Result<(), CliError> {
    let start = Instant::now();
    println!("command: convergence");
    println!("system: {}", cfg.system);
    if cfg.is_mechanical() {
        convergence_mechanical(cfg)?;
    } else {
        convergence_control(cfg)?;
    }
    println!("wall_time_s: {:.6}", start.elapsed().as_secs_f64());
    println!("exit_status: 0");
    Ok(())
}

fn print_levels(levels: &[(f64, f64)]) {
    let mut previous: Option<f64> = None;
    for (k, (h, err)) in levels.iter().enumerate() {
        let order = match previous {
            Some(prev) if *err > 0.0 => format!("{:.3}", (prev / err).log2()),
            _ => "-".to_string(),
        };
        println!("level {k}: h = {h:e} error = {err:e} order = {order}");
        previous = Some(*err);
    }
}

fn convergence_mechanical(cfg: &ScenarioConfig) -> Result<(), CliError> {
    let sys = mechanical_system(cfg)?;
    let s0 = initial_state(cfg)?;
    let horizon = cfg.horizon;
    let n0 = (horizon / cfg.h).round().max(1.0) as usize;
    let endpoint = |n: usize| -> Result<DVector<f64>, CliError> {
        let icfg = IntegratorConfig::new(cfg.alpha, horizon / n as f64).with_tolerance(1e-12);
        let traj = integrator::run(&sys, &icfg, &s0, n).map_err(numerical)?;
        Ok(traj.qs.last().expect("nonempty").clone())
    };
    let reference = endpoint(64 * n0)?;
    let mut levels = Vec::new();
    for factor in [1usize, 2, 4, 8] {
        let n = factor * n0;
        let err = (endpoint(n)? - &reference).norm();
        levels.push((horizon / n as f64, err));
    }
    println!("alpha: {}", cfg.alpha);
    println!("horizon: {horizon}");
    print_levels(&levels);
    Ok(())
}

fn convergence_control(cfg: &ScenarioConfig) -> Result<(), CliError> {
    let cs = systems::control_by_name(&cfg.system)
        .ok_or_else(|| CliError::Config(format!("unknown control system `{}`", cfg.system)))?;
    let n0 = cfg.steps.max(1);
    let horizon = cfg.horizon;
    let solve = |n: usize| -> Result<Vec<DVector<f64>>, CliError> {
        let prob = OcpProblem::new(
            &cs,
            DVector::from_vec(cfg.q0.clone()),
            DVector::from_vec(cfg.qf.clone()),
            horizon,
            n,
        )
        .map_err(numerical)?;
        Ok(control::solve_ocp(&prob).map_err(numerical)?.qs)
    };
    let reference = solve(64 * n0)?;
    let mut levels = Vec::new();
    for factor in [1usize, 2, 4, 8] {
        let n = factor * n0;
        let qs = solve(n)?;
        let stride = 64 * n0 / n;
        let mut err = 0.0f64;
        for (k, q) in qs.iter().enumerate() {
            err = err.max((q - &reference[k * stride]).norm());
        }
        levels.push((horizon / n as f64, err));
    }
    println!("horizon: {horizon}");
    println!("boundary: q0 = {:?} -> qf = {:?}", cfg.q0, cfg.qf);
    print_levels(&levels);
    Ok(())
}

pub fn verify(cfg: &ScenarioConfig) -> Result<(), CliError> {
    let start = Instant::now();
    println!("command: verify");
    println!("system: {}", cfg.system);
    let ok = if cfg.is_mechanical() {
        verify_mechanical(cfg)?
    } else {
        verify_control(cfg)?
    };
    println!("wall_time_s: {:.6}", start.elapsed().as_secs_f64());
    println!("exit_status: {}", if ok { 0 } else { 1 });
    if ok {
        Ok(())
    } else {
        Err(CliError::Numerical(
            "verification defects exceed the configured tolerances".into(),
        ))
    }
}

fn verify_mechanical(cfg: &ScenarioConfig) -> Result<bool, CliError> {
    let sys = mechanical_system(cfg)?;
    let s0 = initial_state(cfg)?;
    let h = cfg.h;
    let ocfg = OracleConfig::default();
    let fine = oracle::rk4_integrate(&sys, &s0, 2.0 * h / 256.0, 256).map_err(numerical)?;
    let q2 = fine.last().expect("nonempty").q.clone();
    let check = oracle::composition_check(&sys, &ocfg, &s0.q, &q2, h).map_err(numerical)?;

    let additivity_tol = cfg.tol.unwrap_or(1e-5);
    let matching_tol = cfg.matching_tol;
    println!("check: two-segment action composition");
    println!("h: {h}");
    println!("additivity_defect: {:e}", check.additivity_defect);
    println!("matching_defect: {:e}", check.matching_defect);
    println!("additivity_tol: {additivity_tol:e}");
    println!("matching_tol: {matching_tol:e}");
    Ok(check.additivity_defect <= additivity_tol && check.matching_defect <= matching_tol)
}

fn verify_control(cfg: &ScenarioConfig) -> Result<bool, CliError> {
    let cs = systems::control_by_name(&cfg.system)
        .ok_or_else(|| CliError::Config(format!("unknown control system `{}`", cfg.system)))?;
    let n = cfg.steps;
    let h = cfg.horizon / n as f64;
    let q0 = DVector::from_vec(cfg.q0.clone());
    let p0 = DVector::from_element(cs.n, 0.3);

    let mut qs = vec![q0.clone()];
    let mut ps = vec![p0.clone()];
    for k in 0..n {
        let step = control::oc_step(&cs, h, &qs[k], &ps[k]).map_err(numerical)?;
        qs.push(step.q_next);
        ps.push(step.p_next);
    }
    let composed = control::compose_generating(&cs, h, n, &q0, &ps[n]).map_err(numerical)?;
    let mut defect = composed.stationarity_residual;
    for k in 0..=n {
        defect = defect.max((composed.qs[k].clone() - &qs[k]).amax());
        defect = defect.max((composed.ps[k].clone() - &ps[k]).amax());
    }

    let tol = cfg.tol.unwrap_or(1e-10);
    println!("check: composed generating function vs iterated stepping");
    println!("steps: {n}");
    println!("h: {h}");
    println!("composition_defect: {defect:e}");
    println!("tol: {tol:e}");
    Ok(defect <= tol)
}
