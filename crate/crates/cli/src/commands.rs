use std::path::{Path, PathBuf};
use std::time::Instant;

use degentaxis_core::config::RunConfig;
use degentaxis_core::monitors::{self, VerifyOptions};
use degentaxis_core::rescale::{self, LimitSummary};
use degentaxis_core::solver::advance;
use degentaxis_core::{io, Error, Result, StepControl, Trajectory};

use crate::args::{Global, RescaleArgs, RunArgs, VerifyArgs};

pub const REPORT_DIR: &str = "reports";
pub const RESCALE_DIR: &str = "rescale";
pub const W_FINAL: &str = "w_final.csv";

/// Outcome of a command that ran to completion.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Status {
    Ok,
    /// A check or threshold failed.
    Failed,
    /// At least one solver job aborted.
    Aborted,
}

impl Status {
    pub fn from_pass(pass: bool) -> Self {
        if pass {
            Status::Ok
        } else {
            Status::Failed
        }
    }
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.into(),
        source: e,
    })
}

pub fn load_config(path: &Path, seed: Option<u64>) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(path)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

/// Validates, integrates and persists one configuration.
pub fn execute(cfg: &RunConfig, out: &Path) -> Result<Trajectory> {
    let v = cfg.validate()?;
    log::info!(
        "case {:?}, grid {}x{}, m = {}, alpha = {}, l = {}",
        v.case,
        cfg.grid.nx,
        cfg.grid.ny,
        v.params.m,
        v.params.alpha,
        v.params.ell
    );
    let t0 = Instant::now();
    let traj = advance(&v.init, &v.params, &v.schedule, &v.stop, &v.control)?;
    let wall = t0.elapsed().as_secs_f64();
    io::write_run(out, &traj, cfg.to_json(), wall)?;
    log::info!(
        "{} steps to t = {:.6} ({:?}) in {wall:.2} s -> {}",
        traj.steps,
        traj.t_end(),
        traj.stop,
        out.display()
    );
    Ok(traj)
}

pub fn run(a: &RunArgs, g: &Global) -> Result<Status> {
    let cfg = load_config(&a.config, g.seed)?;
    let out: PathBuf = a.out.clone().or_else(|| cfg.output.clone()).ok_or_else(|| Error::Config {
        key: "output".into(),
        msg: "no run directory: pass --out or set `output` in the config".into(),
    })?;
    let traj = execute(&cfg, &out)?;
    if !traj.reached_v_tol() {
        log::warn!("T_max reached before v_tol; late-time checks will be inconclusive");
    }
    Ok(Status::Ok)
}

pub fn verify(a: &VerifyArgs) -> Result<Status> {
    let (traj, _) = io::load_run(&a.run_dir)?;
    let out = a.out.clone().unwrap_or_else(|| a.run_dir.join(REPORT_DIR));
    ensure_dir(&out)?;
    let opts = VerifyOptions { burn_in: a.burn_in };
    let reports = monitors::verify_all(&traj, &opts);
    let mut all = true;
    for r in &reports {
        io::write_json(out.join(format!("{}.json", r.lemma_id)), r)?;
        let tag = match (r.pass, r.inconclusive) {
            (true, false) => "PASS",
            (true, true) => "INCONCLUSIVE",
            (false, _) => "FAIL",
        };
        println!("{tag:<12} {}", r.lemma_id);
        if r.inconclusive {
            log::warn!("{}: {}", r.lemma_id, r.note.as_deref().unwrap_or("inconclusive"));
        }
        if let Some(t) = r.first_violation_t {
            log::warn!("{}: first violation at t = {t}", r.lemma_id);
        }
        all &= r.pass;
    }
    let harnack = monitors::harnack_scan(&traj, opts.burn_in);
    io::write_json(out.join("harnack.json"), &harnack)?;
    io::write_json(
        out.join("budget.json"),
        &monitors::budget_scan(&traj, harnack.lambda_hat),
    )?;
    let ladder = monitors::ladder_scan(&traj, 8);
    if !ladder.pass {
        log::warn!("exponent ladder check failed; see ladder.json");
    }
    io::write_json(out.join("ladder.json"), &ladder)?;
    Ok(Status::from_pass(all))
}

pub fn rescale(a: &RescaleArgs) -> Result<Status> {
    let (traj, manifest) = io::load_run(&a.run_dir)?;
    let out = a.out.clone().unwrap_or_else(|| a.run_dir.join(RESCALE_DIR));
    ensure_dir(&out)?;
    // Same CFL safety as the primal run; time caps do not carry over to tau.
    let safety = manifest
        .config
        .get("stepping")
        .and_then(|s| serde_json::from_value::<StepControl>(s.clone()).ok())
        .map_or(StepControl::default().safety, |s| s.safety);
    let control = StepControl {
        safety,
        ..StepControl::default()
    };
    let problem = rescale::build(&traj)?;
    let t0 = Instant::now();
    let run = rescale::solve_limit_problem(&problem, &traj.initial().u, &traj.params, &control, &[])?;
    let report = rescale::compare_limit(&run.w_final, &traj)?;
    let summary = LimitSummary::new(&problem, &run, &report, rescale::REL_GAP_TOL);
    rescale::write_artifacts(&out, &problem, &summary, a.stride)?;
    io::write_snapshot(out.join(W_FINAL), &run.w_final, 1.0)?;
    println!(
        "L = {:.6e} (tail {:.3e}), rel_gap = {:.3e}, bounds {}, {} steps in {:.2} s",
        summary.l,
        summary.tail,
        summary.rel_gap,
        if summary.bounds_ok { "ok" } else { "VIOLATED" },
        run.steps,
        t0.elapsed().as_secs_f64()
    );
    Ok(Status::from_pass(summary.pass))
}
