use std::fs::File;
use std::io::{BufWriter, Write};
use std::ops::ControlFlow;
use std::path::Path;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diffusion::{
    exponent_fit, half_gaussian_sqrt_ratio, peak_expectation, tail_bound_violation, w1_w2_cross_rate, write_peak_csv,
    ExponentFit, PeakMethod, PeakQuadrature, PeakValue, SigmaModel,
};
use crate::error::{Error, Result};
use crate::grid::{inner, make_grid, GridSpec};
use crate::integrator::{write_snapshot_binary, write_snapshots_csv, SkdvState};
use crate::limit::{
    build_weighted_frame, limit_coefficients, ou_covariance_trace, ou_evolve, semigroup_decay, solve_thetas,
    weighted_grid, write_spectrum_csv, LimitState, LimitSystem, WeightedFrame,
};
use crate::modulation::{refine_center, write_tracking_csv, ExitReason, Modulator, Tracker};
use crate::noise::{Kernel, NoiseState};
use crate::soliton::{energy, mass, soliton, soliton_at, soliton_dx, SolitonParams};
use crate::stats::{linear_fit, mean, std_error, wilson_interval};

use super::config::{ExperimentConfig, ExperimentKind};
use super::manifest::RunManifest;

/// Fraction of failed paths above which an ensemble is aborted.
pub const MAX_FAILURE_FRACTION: f64 = 0.01;

/// Grid, kernel and time stepping shared by every path of an ensemble.
#[derive(Debug, Clone)]
pub struct PathSetup {
    pub grid: Arc<GridSpec>,
    pub kernel: Arc<Kernel>,
    pub c0: f64,
    pub alpha: f64,
    pub dt: f64,
    pub t_end: f64,
    pub stride: usize,
    pub seed: u64,
}

impl PathSetup {
    pub fn from_config(cfg: &ExperimentConfig) -> Result<Self> {
        let grid = make_grid(cfg.grid.length, cfg.grid.points)?;
        let kernel = Arc::new(Kernel::new(cfg.kernel.clone(), &grid)?);
        Ok(Self {
            grid,
            kernel,
            c0: cfg.physics.c0,
            alpha: cfg.physics.alpha,
            dt: cfg.integration.dt,
            t_end: cfg.integration.t_end,
            stride: cfg.integration.stride,
            seed: cfg.ensemble.seed,
        })
    }

    fn steps(&self) -> usize {
        (self.t_end / self.dt).round() as usize
    }

    /// Full equation started at `φ_{c₀}` in the frame moving at `c₀`.
    pub fn full_state(&self, eps: f64, path: u64) -> Result<SkdvState> {
        let noise = NoiseState::new(self.kernel.clone(), self.seed, path);
        Ok(SkdvState::new(soliton(self.c0, &self.grid)?, eps, noise)?.with_frame_speed(self.c0))
    }

    pub fn limit_state(&self, path: u64) -> LimitState {
        LimitState::new(NoiseState::new(self.kernel.clone(), self.seed, path))
    }

    pub fn tracker(&self, eps: f64) -> Result<Tracker> {
        let m = Modulator::new(&self.grid, self.c0, self.alpha, eps)?;
        Ok(Tracker::new(m, SolitonParams { c: self.c0, x0: 0.0 }))
    }
}

/// Outcome of a single exit-time path.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum PathOutcome {
    Survived,
    Exited { t: f64, reason: ExitReason },
    Failed { t: f64, reason: String },
}

/// Run one path until `t_end` or the exit time.
pub fn exit_time_path(setup: &PathSetup, eps: f64, path: u64) -> PathOutcome {
    let mut tracker = match setup.tracker(eps) {
        Ok(t) => t,
        Err(e) => return PathOutcome::Failed { t: 0.0, reason: e.to_string() },
    };
    let mut state = match setup.full_state(eps, path) {
        Ok(s) => s,
        Err(e) => return PathOutcome::Failed { t: 0.0, reason: e.to_string() },
    };
    let run = state.run(setup.t_end, setup.dt, setup.stride, |s| {
        if tracker.observe(s.u(), s.t(), s.frame_offset()) {
            ControlFlow::Continue(())
        } else {
            ControlFlow::Break(())
        }
    });
    if let Err(e) = run {
        let t = match &e {
            Error::TrajectoryFailed { t, .. } => *t,
            _ => state.t(),
        };
        return PathOutcome::Failed { t, reason: e.to_string() };
    }
    match (tracker.exit_time(), tracker.exit_reason()) {
        (Some(t), Some(ExitReason::SolitonLost)) => PathOutcome::Failed { t, reason: "modulation lost the soliton".into() },
        (Some(t), Some(reason)) => PathOutcome::Exited { t, reason },
        _ => PathOutcome::Survived,
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExitTimeRow {
    pub eps: f64,
    pub paths: usize,
    pub exits: usize,
    pub speed_exits: usize,
    pub remainder_exits: usize,
    pub failures: usize,
    pub p_hat: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExitTimeReport {
    pub rows: Vec<ExitTimeRow>,
    /// slope of `log P̂` against `ε^{-2}`
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
    pub informative: bool,
    pub note: String,
}

fn check_failures(failures: usize, paths: usize, what: &str) -> Result<()> {
    if failures as f64 > MAX_FAILURE_FRACTION * paths as f64 {
        return Err(Error::Numerical(format!(
            "{what}: {failures} of {paths} paths failed (more than {:.0}%)",
            100.0 * MAX_FAILURE_FRACTION
        )));
    }
    Ok(())
}

pub fn exit_time_row(setup: &PathSetup, eps: f64, paths: usize) -> Result<(ExitTimeRow, Vec<PathOutcome>)> {
    let outcomes: Vec<PathOutcome> = (0..paths as u64).into_par_iter().map(|p| exit_time_path(setup, eps, p)).collect();
    let mut row = ExitTimeRow {
        eps,
        paths,
        exits: 0,
        speed_exits: 0,
        remainder_exits: 0,
        failures: 0,
        p_hat: 0.0,
        ci_low: 0.0,
        ci_high: 1.0,
    };
    for o in &outcomes {
        match o {
            PathOutcome::Exited { reason, .. } => {
                row.exits += 1;
                match reason {
                    ExitReason::Speed => row.speed_exits += 1,
                    _ => row.remainder_exits += 1,
                }
            }
            PathOutcome::Failed { .. } => row.failures += 1,
            PathOutcome::Survived => {}
        }
    }
    check_failures(row.failures, paths, &format!("exit time at eps = {eps}"))?;
    let valid = paths - row.failures;
    row.p_hat = row.exits as f64 / valid as f64;
    (row.ci_low, row.ci_high) = wilson_interval(row.exits, valid, 1.96);
    Ok((row, outcomes))
}

/// Regression of `log P̂` on `ε^{-2}` over the rows with at least one exit.
pub fn exit_time_regression(rows: Vec<ExitTimeRow>) -> ExitTimeReport {
    let used: Vec<&ExitTimeRow> = rows.iter().filter(|r| r.exits > 0 && r.eps > 0.0).collect();
    if used.len() < 2 {
        return ExitTimeReport {
            rows,
            slope: f64::NAN,
            intercept: f64::NAN,
            r_squared: f64::NAN,
            informative: false,
            note: "fewer than two noise levels produced exits; increase eps or t_end".into(),
        };
    }
    let x: Vec<f64> = used.iter().map(|r| r.eps.powi(-2)).collect();
    let y: Vec<f64> = used.iter().map(|r| r.p_hat.ln()).collect();
    let fit = linear_fit(&x, &y);
    let note = if used.len() < rows.len() { "rows without exits were left out of the fit".into() } else { String::new() };
    ExitTimeReport { rows, slope: fit.slope, intercept: fit.intercept, r_squared: fit.r_squared, informative: true, note }
}

/// Sup-norm statistics of one coupled full/limit path.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CltPathStats {
    pub eta_err: f64,
    pub eta_tilde_err: f64,
    pub z_err: f64,
    pub b_err: f64,
    pub y_err: f64,
    pub a_abs: f64,
    pub c_dev2: f64,
    pub eta_l2_4: f64,
    pub exited: bool,
    pub snapshots: usize,
}

/// Coupled run of the full equation, the modulation and the limit system on
/// one noise path, up to `t_end ∧ τ`.
pub fn clt_path(setup: &PathSetup, sys: &LimitSystem, eps: f64, path: u64) -> Result<CltPathStats> {
    let mut full = setup.full_state(eps, path)?;
    let mut lim = setup.limit_state(path);
    let mut tracker = setup.tracker(eps)?;
    let psi0 = soliton_dx(setup.c0, &setup.grid)?;
    let mut out = CltPathStats::default();
    tracker.observe(full.u(), 0.0, 0.0);
    for n in 1..=setup.steps() {
        full.step(setup.dt)?;
        sys.step(&mut lim)?;
        if n % setup.stride != 0 && n != setup.steps() {
            continue;
        }
        let t = full.t();
        if !tracker.observe(full.u(), t, full.frame_offset()) {
            match tracker.exit_reason() {
                Some(ExitReason::SolitonLost) | None => {
                    return Err(Error::TrajectoryFailed { t, reason: "modulation lost the soliton".into() })
                }
                _ => {
                    out.exited = true;
                    break;
                }
            }
        }
        let st = tracker.series().last().expect("observed state");
        let m = tracker.modulator();
        let coef = m.coefficients(st, &setup.kernel)?;
        let (z, b) = limit_coefficients(t, setup.c0, &setup.kernel)?;
        out.eta_err = out.eta_err.max(st.eta.sub(&lim.eta)?.norm_l2());
        let refined = refine_center(std::slice::from_ref(st), &[lim.lambda], eps)?;
        let eta_tilde = lim.eta.sub(&psi0.scale(lim.lambda))?;
        out.eta_tilde_err = out.eta_tilde_err.max(refined[0].eta_refined.sub(&eta_tilde)?.norm_l2());
        out.z_err = out.z_err.max(coef.reps.phi_star_z.sub(&z)?.norm_l2());
        out.b_err = out.b_err.max(coef.reps.phi_star_b.sub(&b)?.norm_l2());
        out.y_err = out.y_err.max((coef.y - sys.y(&lim.eta)?).abs());
        out.a_abs = out.a_abs.max(coef.a.abs());
        out.c_dev2 = out.c_dev2.max((st.c - setup.c0).powi(2));
        out.eta_l2_4 = out.eta_l2_4.max(st.eta.norm_l2().powi(4));
        out.snapshots += 1;
    }
    Ok(out)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CltRow {
    pub eps: f64,
    pub paths: usize,
    pub failures: usize,
    pub exits: usize,
    pub eta_err: f64,
    pub eta_err_se: f64,
    pub eta_tilde_err: f64,
    pub z_err: f64,
    pub b_err: f64,
    pub y_err: f64,
    pub a_abs: f64,
    pub c_dev2: f64,
    pub eta_l2_4: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CltReport {
    pub rows: Vec<CltRow>,
    /// consecutive ratios of the mean η error (larger ε over smaller ε)
    pub eta_ratios: Vec<f64>,
    pub monotone: bool,
    /// fit of `E sup|c − c₀|²` against `ε²`
    pub c_slope: f64,
    pub c_r_squared: f64,
}

pub fn clt_row(setup: &PathSetup, sys: &LimitSystem, eps: f64, paths: usize) -> Result<CltRow> {
    let results: Vec<Result<CltPathStats>> =
        (0..paths as u64).into_par_iter().map(|p| clt_path(setup, sys, eps, p)).collect();
    let ok: Vec<CltPathStats> = results.iter().filter_map(|r| r.as_ref().ok().cloned()).collect();
    let failures = paths - ok.len();
    check_failures(failures, paths, &format!("clt at eps = {eps}"))?;
    let col = |f: fn(&CltPathStats) -> f64| -> Vec<f64> { ok.iter().map(f).collect() };
    let eta = col(|s| s.eta_err);
    Ok(CltRow {
        eps,
        paths,
        failures,
        exits: ok.iter().filter(|s| s.exited).count(),
        eta_err: mean(&eta),
        eta_err_se: if eta.len() > 1 { std_error(&eta) } else { 0.0 },
        eta_tilde_err: mean(&col(|s| s.eta_tilde_err)),
        z_err: mean(&col(|s| s.z_err)),
        b_err: mean(&col(|s| s.b_err)),
        y_err: mean(&col(|s| s.y_err)),
        a_abs: mean(&col(|s| s.a_abs)),
        c_dev2: mean(&col(|s| s.c_dev2)),
        eta_l2_4: mean(&col(|s| s.eta_l2_4)),
    })
}

pub fn clt_report(rows: Vec<CltRow>) -> CltReport {
    let eta_ratios: Vec<f64> = rows.windows(2).map(|w| w[0].eta_err / w[1].eta_err).collect();
    let dec = |f: fn(&CltRow) -> f64| rows.windows(2).all(|w| f(&w[0]) > f(&w[1]));
    let monotone = dec(|r| r.eta_err) && dec(|r| r.z_err) && dec(|r| r.b_err) && dec(|r| r.a_abs);
    let fit = linear_fit(&rows.iter().map(|r| r.eps * r.eps).collect::<Vec<_>>(), &rows.iter().map(|r| r.c_dev2).collect::<Vec<_>>());
    CltReport { rows, eta_ratios, monotone, c_slope: fit.slope, c_r_squared: fit.r_squared }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FrameSummary {
    pub a: f64,
    pub theta1: f64,
    pub theta2: f64,
    pub biorthogonality: f64,
    pub p_idempotence: f64,
    pub pq: f64,
    pub nullspace_f1: f64,
    pub nullspace_f2: f64,
    pub commutation: f64,
    pub decay_rate: f64,
    pub decay_rates: Vec<f64>,
    pub leading_stable_eigenvalue: f64,
}

/// Invariants, commutation `‖Qe^{Ah}w − e^{Ah}Qw‖` and the decay fit.
pub fn frame_summary(frame: &WeightedFrame, samples: usize, t_end: f64, seed: u64) -> Result<FrameSummary> {
    let (pp, pq) = frame.projection_defects();
    let (n1, n2) = frame.nullspace_defects();
    let e = frame.propagator(1.0);
    let comm = (&frame.q * &e - &e * &frame.q).amax() / e.amax().max(1.0);
    let decay = semigroup_decay(frame, samples, t_end, seed)?;
    let spectrum = frame.spectrum();
    let stable = spectrum.iter().map(|z| z.re).filter(|r| *r < -1e-6).fold(f64::NEG_INFINITY, f64::max);
    Ok(FrameSummary {
        a: frame.a,
        theta1: frame.thetas.theta1,
        theta2: frame.thetas.theta2,
        biorthogonality: frame.biorthogonality_defect()?,
        p_idempotence: pp,
        pq,
        nullspace_f1: n1,
        nullspace_f2: n2,
        commutation: comm,
        decay_rate: decay.rate,
        decay_rates: decay.rates,
        leading_stable_eigenvalue: stable,
    })
}

/// Context shared by the experiment runners: output directory and manifest.
pub struct RunContext<'a> {
    pub cfg: &'a ExperimentConfig,
    pub out: &'a Path,
    pub manifest: RunManifest,
}

impl RunContext<'_> {
    fn path(&mut self, name: &str) -> std::path::PathBuf {
        self.manifest.add_file(name);
        self.out.join(name)
    }

    fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        let p = self.path(name);
        std::fs::write(p, serde_json::to_string_pretty(value)?)?;
        Ok(())
    }
}

fn csv_writer(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path)?))
}

/// Summary of a single-path simulation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimulateSummary {
    pub eps: f64,
    pub t_end: f64,
    pub mass_start: f64,
    pub mass_end: f64,
    pub energy_start: f64,
    pub energy_end: f64,
    /// relative L² distance to the translated soliton (meaningful at ε = 0)
    pub soliton_error: f64,
}

fn run_simulate(ctx: &mut RunContext) -> Result<()> {
    let setup = PathSetup::from_config(ctx.cfg)?;
    let eps = ctx.cfg.physics.eps[0];
    let mut st = setup.full_state(eps, 0)?;
    let (m0, e0) = (mass(st.u()), energy(st.u()));
    let mut snaps = Vec::new();
    st.run(setup.t_end, setup.dt, setup.stride, |s| {
        snaps.push((s.t(), s.u().clone()));
        ControlFlow::Continue(())
    })?;
    let exact = soliton_at(SolitonParams { c: setup.c0, x0: 0.0 }, &setup.grid)?;
    let summary = SimulateSummary {
        eps,
        t_end: st.t(),
        mass_start: m0,
        mass_end: mass(st.u()),
        energy_start: e0,
        energy_end: energy(st.u()),
        soliton_error: st.u().sub(&exact)?.norm_l2() / exact.norm_l2(),
    };
    write_snapshots_csv(&ctx.path("snapshots.csv"), &snaps)?;
    write_snapshot_binary(&ctx.path("final.bin"), st.u(), st.t(), eps)?;
    ctx.write_json("simulate.json", &summary)
}

fn run_track(ctx: &mut RunContext) -> Result<()> {
    let setup = PathSetup::from_config(ctx.cfg)?;
    let thetas = solve_thetas(setup.c0, &setup.grid)?;
    let sys = LimitSystem::new(&setup.grid, setup.c0, thetas, setup.dt)?;
    for (i, &eps) in ctx.cfg.physics.eps.iter().enumerate() {
        let mut full = setup.full_state(eps, 0)?;
        let mut lim = setup.limit_state(0);
        let mut tracker = setup.tracker(eps)?;
        let mut lambda = vec![0.0];
        tracker.observe(full.u(), 0.0, 0.0);
        for n in 1..=setup.steps() {
            full.step(setup.dt)?;
            sys.step(&mut lim)?;
            if n % setup.stride == 0 || n == setup.steps() {
                let alive = tracker.observe(full.u(), full.t(), full.frame_offset());
                lambda.push(lim.lambda);
                if !alive {
                    break;
                }
            }
        }
        let series = tracker.series();
        lambda.truncate(series.len());
        let refined = refine_center(series, &lambda, eps)?;
        write_tracking_csv(&ctx.path(&format!("tracking_{i}.csv")), series, Some(&refined))?;
    }
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LimitSummary {
    pub paths: usize,
    pub max_mean_eta_h1_4: f64,
    pub mean_sup_lambda_4: f64,
    pub max_orthogonality: f64,
}

fn run_limit(ctx: &mut RunContext) -> Result<()> {
    let setup = PathSetup::from_config(ctx.cfg)?;
    let thetas = solve_thetas(setup.c0, &setup.grid)?;
    let sys = LimitSystem::new(&setup.grid, setup.c0, thetas, setup.dt)?;
    let phi0 = soliton(setup.c0, &setup.grid)?;
    let psi0 = soliton_dx(setup.c0, &setup.grid)?;
    // per path: (t, λ, |η|_L2, |η|_H1) at snapshots, sup λ⁴, max orthogonality defect
    type Series = (Vec<(f64, f64, f64, f64)>, f64, f64);
    let per_path: Vec<Result<Series>> = (0..ctx.cfg.ensemble.paths as u64)
        .into_par_iter()
        .map(|p| {
            let mut st = setup.limit_state(p);
            let mut rows = vec![(0.0, 0.0, 0.0, 0.0)];
            let (mut sup_l, mut orth) = (0.0f64, 0.0f64);
            for n in 1..=setup.steps() {
                sys.step(&mut st)?;
                sup_l = sup_l.max(st.lambda.abs());
                if n % setup.stride == 0 {
                    let e = &st.eta;
                    orth = orth.max((inner(e, &phi0)?.abs() + inner(e, &psi0)?.abs()) / (1.0 + e.norm_l2()));
                    rows.push((st.t, st.lambda, e.norm_l2(), e.norm_h1()));
                }
            }
            Ok((rows, sup_l.powi(4), orth))
        })
        .collect();
    let per_path = per_path.into_iter().collect::<Result<Vec<_>>>()?;
    let n_t = per_path[0].0.len();
    let mut w = csv_writer(&ctx.path("limit.csv"))?;
    writeln!(w, "t,lambda,eta_l2,eta_h1,mean_eta_h1_4")?;
    let mut max_m4 = 0.0f64;
    for i in 0..n_t {
        let m4 = mean(&per_path.iter().map(|p| p.0[i].3.powi(4)).collect::<Vec<_>>());
        max_m4 = max_m4.max(m4);
        let r = per_path[0].0[i];
        writeln!(w, "{},{},{},{},{}", r.0, r.1, r.2, r.3, m4)?;
    }
    w.flush()?;
    let summary = LimitSummary {
        paths: per_path.len(),
        max_mean_eta_h1_4: max_m4,
        mean_sup_lambda_4: mean(&per_path.iter().map(|p| p.1).collect::<Vec<_>>()),
        max_orthogonality: per_path.iter().map(|p| p.2).fold(0.0, f64::max),
    };
    ctx.write_json("limit.json", &summary)
}

fn build_frame(cfg: &ExperimentConfig) -> Result<WeightedFrame> {
    let c0 = cfg.physics.c0;
    let grid = weighted_grid(cfg.frame.points)?;
    build_weighted_frame(c0, cfg.frame.a_fraction * (c0 / 3.0).sqrt(), &grid)
}

fn run_semigroup(ctx: &mut RunContext) -> Result<()> {
    let cfg = ctx.cfg;
    let frame = build_frame(cfg)?;
    let summary = frame_summary(&frame, cfg.frame.decay_samples, cfg.frame.decay_t_end, cfg.ensemble.seed)?;
    write_spectrum_csv(&ctx.path("spectrum.csv"), &frame.spectrum())?;
    let kernel = Arc::new(Kernel::new(cfg.kernel.clone(), &frame.grid)?);
    let trace = ou_covariance_trace(&frame, &kernel, cfg.frame.trace_t_end, cfg.frame.trace_step)?;
    let mut w = csv_writer(&ctx.path("trace.csv"))?;
    writeln!(w, "t,trace")?;
    for (t, v) in &trace {
        writeln!(w, "{t},{v}")?;
    }
    w.flush()?;
    let ou = ou_evolve(&frame, kernel, cfg.integration.t_end, cfg.integration.dt, cfg.ensemble.paths, cfg.ensemble.seed, cfg.integration.stride)?;
    let mut w = csv_writer(&ctx.path("ou.csv"))?;
    writeln!(w, "t,mean_h1_sq,max_p_leak")?;
    for (t, m, l) in &ou {
        writeln!(w, "{t},{m},{l}")?;
    }
    w.flush()?;
    ctx.write_json("semigroup.json", &summary)
}

fn run_exit_time(ctx: &mut RunContext) -> Result<()> {
    let setup = PathSetup::from_config(ctx.cfg)?;
    let mut rows = Vec::new();
    for &eps in &ctx.cfg.physics.eps {
        let (row, outcomes) = exit_time_row(&setup, eps, ctx.cfg.ensemble.paths)?;
        let mut w = csv_writer(&ctx.path(&format!("exit_paths_eps{eps}.csv")))?;
        writeln!(w, "path,outcome,t,reason")?;
        for (p, o) in outcomes.iter().enumerate() {
            match o {
                PathOutcome::Survived => writeln!(w, "{p},survived,,")?,
                PathOutcome::Exited { t, reason } => writeln!(w, "{p},exited,{t},{reason:?}")?,
                PathOutcome::Failed { t, reason } => writeln!(w, "{p},failed,{t},\"{reason}\"")?,
            }
        }
        w.flush()?;
        rows.push(row);
    }
    let report = exit_time_regression(rows);
    let mut w = csv_writer(&ctx.path("exit_time.csv"))?;
    writeln!(w, "eps,paths,exits,failures,p_hat,ci_low,ci_high")?;
    for r in &report.rows {
        writeln!(w, "{},{},{},{},{},{},{}", r.eps, r.paths, r.exits, r.failures, r.p_hat, r.ci_low, r.ci_high)?;
    }
    w.flush()?;
    ctx.write_json("exit_time.json", &report)
}

fn run_clt(ctx: &mut RunContext) -> Result<()> {
    let setup = PathSetup::from_config(ctx.cfg)?;
    let thetas = solve_thetas(setup.c0, &setup.grid)?;
    let sys = LimitSystem::new(&setup.grid, setup.c0, thetas, setup.dt)?;
    let mut rows = Vec::new();
    for &eps in &ctx.cfg.physics.eps {
        rows.push(clt_row(&setup, &sys, eps, ctx.cfg.ensemble.paths)?);
    }
    let report = clt_report(rows);
    let mut w = csv_writer(&ctx.path("clt.csv"))?;
    writeln!(w, "eps,paths,failures,exits,eta_err,eta_err_se,eta_tilde_err,z_err,b_err,y_err,a_abs,c_dev2")?;
    for r in &report.rows {
        writeln!(
            w,
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            r.eps, r.paths, r.failures, r.exits, r.eta_err, r.eta_err_se, r.eta_tilde_err, r.z_err, r.b_err, r.y_err, r.a_abs, r.c_dev2
        )?;
    }
    w.flush()?;
    ctx.write_json("clt.json", &report)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DiffusionReport {
    pub model: SigmaModel,
    pub fit: ExponentFit,
    pub w1_w2_cross_rate: f64,
    pub monte_carlo: PeakValue,
    pub quadrature_at_mc_point: PeakValue,
    pub tail_bound_violation: f64,
    pub half_gaussian_constant: Vec<(f64, f64)>,
    pub max_clipped_mass: f64,
}

pub fn diffusion_report(cfg: &ExperimentConfig) -> Result<DiffusionReport> {
    let grid = make_grid(cfg.grid.length, cfg.grid.points)?;
    let kernel = Kernel::new(cfg.kernel.clone(), &grid)?;
    let c0 = cfg.physics.c0;
    let model = SigmaModel::new(&kernel, c0, solve_thetas(c0, &grid)?)?;
    let d = &cfg.diffusion;
    let q = PeakQuadrature { speed: d.speed_nodes, position: d.position_nodes };
    let eps = cfg.physics.eps[cfg.physics.eps.len() / 2];
    let fit = exponent_fit(&model, eps, &cfg.diffusion_times(), &cfg.physics.eps, q)?;
    let mc_t = d.t_min;
    let monte_carlo = peak_expectation(
        &model,
        eps,
        mc_t,
        &PeakMethod::MonteCarlo { samples: d.mc_samples, seed: cfg.ensemble.seed, lattice: 801 },
    )?;
    let quadrature_at_mc_point = peak_expectation(&model, eps, mc_t, &PeakMethod::Quadrature(q))?;
    let tail = [10.0, 100.0]
        .iter()
        .map(|&t| tail_bound_violation(&model, eps, t, 41))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .fold(f64::NEG_INFINITY, f64::max);
    let max_clipped_mass = fit.table.iter().chain(&fit.eps_table).map(|p| p.clipped_mass).fold(0.0, f64::max);
    Ok(DiffusionReport {
        model,
        w1_w2_cross_rate: w1_w2_cross_rate(&kernel, c0)?,
        monte_carlo,
        quadrature_at_mc_point,
        tail_bound_violation: tail,
        half_gaussian_constant: [0.1, 1.0, 10.0].iter().map(|&a| (a, half_gaussian_sqrt_ratio(a))).collect(),
        max_clipped_mass,
        fit,
    })
}

fn run_diffusion(ctx: &mut RunContext) -> Result<()> {
    let report = diffusion_report(ctx.cfg)?;
    write_peak_csv(&ctx.path("peak.csv"), &report.fit.table, report.fit.k0)?;
    write_peak_csv(&ctx.path("peak_eps.csv"), &report.fit.eps_table, report.fit.k0)?;
    ctx.write_json("diffusion.json", &report)
}

/// Run the configured experiment, writing outputs and `manifest.json` to `out`.
pub fn run_experiment(cfg: &ExperimentConfig, out: &Path, threads: usize) -> Result<RunManifest> {
    cfg.validate()?;
    std::fs::create_dir_all(out)?;
    let mut ctx = RunContext { cfg, out, manifest: RunManifest::start(cfg, threads) };
    ctx.write_json("config.json", cfg)?;
    match cfg.experiment {
        ExperimentKind::Simulate => run_simulate(&mut ctx)?,
        ExperimentKind::Track => run_track(&mut ctx)?,
        ExperimentKind::Limit => run_limit(&mut ctx)?,
        ExperimentKind::Semigroup => run_semigroup(&mut ctx)?,
        ExperimentKind::ExitTime => run_exit_time(&mut ctx)?,
        ExperimentKind::Clt => run_clt(&mut ctx)?,
        ExperimentKind::Diffusion => run_diffusion(&mut ctx)?,
    }
    let mut manifest = ctx.manifest;
    manifest.finish(out)?;
    Ok(manifest)
}

/// `(λ, (η, g̃₁))` along one limit path, for the identity `Pw = λ f₁`.
pub fn lambda_consistency(setup: &PathSetup, sys: &LimitSystem, path: u64, steps: usize) -> Result<f64> {
    let mut st = setup.limit_state(path);
    let mut worst = 0.0f64;
    for _ in 0..steps {
        sys.step(&mut st)?;
        let pairing = inner(&st.eta, sys.g1())?;
        worst = worst.max((pairing - st.lambda).abs() / (1.0 + st.lambda.abs()));
    }
    Ok(worst)
}
