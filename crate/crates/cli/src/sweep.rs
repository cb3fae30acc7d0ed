//! `sweep`: a list of parameter tuples run as independent jobs over a shared
//! base configuration, plus an optional regularization study.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use degentaxis_core::config::RunConfig;
use degentaxis_core::monitors::{self, VerifyOptions};
use degentaxis_core::rescale::{self, epsilon_study};
use degentaxis_core::{io, Case, Error, Result, StepControl};

use crate::args::{Global, SweepArgs};
use crate::commands::{execute, Status};

pub const SUMMARY_CSV: &str = "summary.csv";
pub const EPSILON_CSV: &str = "epsilon_study.csv";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Tuple {
    pub m: f64,
    pub alpha: f64,
    pub ell: f64,
    pub epsilon: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EpsilonStudySpec {
    pub eps: Vec<f64>,
    pub t_final: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub base: RunConfig,
    #[serde(default)]
    pub runs: Vec<Tuple>,
    #[serde(default)]
    pub epsilon_study: Option<EpsilonStudySpec>,
}

impl SweepConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
            path: path.into(),
            source: e,
        })?;
        let de = &mut serde_json::Deserializer::from_str(&text);
        let mut cfg: SweepConfig = serde_path_to_error::deserialize(de).map_err(|e| Error::Config {
            key: e.path().to_string(),
            msg: e.into_inner().to_string(),
        })?;
        cfg.base.base_dir = path.parent().map(Path::to_path_buf);
        Ok(cfg)
    }

    fn variant(&self, t: &Tuple) -> RunConfig {
        let mut cfg = self.base.clone();
        cfg.model.m = t.m;
        cfg.model.alpha = t.alpha;
        cfg.model.ell = t.ell;
        cfg.model.epsilon = t.epsilon;
        cfg
    }
}

struct Row {
    tuple: Tuple,
    case: Option<Case>,
    status: String,
    lambda_hat: f64,
    l: f64,
    rel_gap: f64,
    passed: usize,
    total: usize,
}

fn run_one(cfg: &RunConfig, dir: &Path, tuple: Tuple, case: Case) -> Row {
    let mut row = Row {
        tuple,
        case: Some(case),
        status: "ok".into(),
        lambda_hat: f64::NAN,
        l: f64::NAN,
        rel_gap: f64::NAN,
        passed: 0,
        total: 0,
    };
    let traj = match execute(cfg, dir) {
        Ok(t) => t,
        Err(e) => {
            log::error!("{}: {e}", dir.display());
            row.status = match e {
                Error::Solver(_) => "solver-abort".into(),
                _ => "error".into(),
            };
            return row;
        }
    };
    let reports = monitors::verify_all(&traj, &VerifyOptions::default());
    row.total = reports.len();
    row.passed = reports.iter().filter(|r| r.pass).count();
    row.lambda_hat = monitors::harnack_scan(&traj, monitors::DEFAULT_BURN_IN).lambda_hat;
    if traj.reached_v_tol() {
        let control = StepControl {
            safety: cfg.stepping.safety,
            ..StepControl::default()
        };
        match rescale::cross_validate(&traj, &control, rescale::REL_GAP_TOL) {
            Ok((summary, _)) => {
                row.l = summary.l;
                row.rel_gap = summary.rel_gap;
            }
            Err(e) => log::warn!("{}: rescale failed: {e}", dir.display()),
        }
    } else {
        row.status = "t-max".into();
    }
    row
}

fn summary_csv(rows: &[Row]) -> String {
    let mut s = String::from("index,m,alpha,ell,epsilon,case,status,lambda_hat,L,rel_gap,checks_passed,checks_total\n");
    for (i, r) in rows.iter().enumerate() {
        let case = r.case.map_or("-".to_string(), |c| format!("{c:?}"));
        let _ = writeln!(
            s,
            "{i},{},{},{},{},{case},{},{},{},{},{},{}",
            io::fmt_f64(r.tuple.m),
            io::fmt_f64(r.tuple.alpha),
            io::fmt_f64(r.tuple.ell),
            io::fmt_f64(r.tuple.epsilon),
            r.status,
            io::fmt_f64(r.lambda_hat),
            io::fmt_f64(r.l),
            io::fmt_f64(r.rel_gap),
            r.passed,
            r.total
        );
    }
    s
}

pub fn sweep(a: &SweepArgs, g: &Global) -> Result<Status> {
    let mut cfg = SweepConfig::load(&a.config)?;
    if let Some(s) = g.seed {
        cfg.base.seed = s;
    }
    if cfg.runs.is_empty() && cfg.epsilon_study.is_none() {
        return Err(Error::Config {
            key: "runs".into(),
            msg: "the sweep lists no runs and no epsilon study".into(),
        });
    }
    // Reject every invalid tuple before anything starts.
    let mut jobs = Vec::with_capacity(cfg.runs.len());
    for (i, t) in cfg.runs.iter().enumerate() {
        let variant = cfg.variant(t);
        let v = variant.validate().map_err(|e| Error::Config {
            key: format!("runs[{i}]"),
            msg: e.to_string(),
        })?;
        jobs.push((variant, v.case, *t));
    }
    std::fs::create_dir_all(&a.out).map_err(|e| Error::Io {
        path: a.out.clone(),
        source: e,
    })?;
    let workers = g
        .jobs
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
        .max(1);

    let next = AtomicUsize::new(0);
    let rows: Mutex<Vec<Option<Row>>> = Mutex::new((0..jobs.len()).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..workers.min(jobs.len()) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some((variant, case, tuple)) = jobs.get(i) else {
                    break;
                };
                let dir: PathBuf = a.out.join(format!("run_{i:03}"));
                let row = run_one(variant, &dir, *tuple, *case);
                rows.lock().expect("no job panics while holding the lock")[i] = Some(row);
            });
        }
    });
    let rows: Vec<Row> = rows
        .into_inner()
        .expect("workers joined")
        .into_iter()
        .map(|r| r.expect("every job ran"))
        .collect();
    io::write_text(a.out.join(SUMMARY_CSV), &summary_csv(&rows))?;
    let mut ok = rows.iter().all(|r| r.status == "ok" || r.status == "t-max");

    if let Some(study) = &cfg.epsilon_study {
        let v = cfg.base.validate()?;
        let table = epsilon_study(
            &v.init,
            &v.params,
            &study.eps,
            study.t_final,
            &v.schedule,
            &v.control,
            workers,
        )?;
        let mut body = String::from("eps_i,eps_next,gap\n");
        for (i, g) in table.gaps.iter().enumerate() {
            let _ = writeln!(
                body,
                "{},{},{}",
                io::fmt_f64(table.eps[i]),
                io::fmt_f64(table.eps[i + 1]),
                io::fmt_f64(*g)
            );
        }
        io::write_text(a.out.join(EPSILON_CSV), &body)?;
        io::write_json(a.out.join("epsilon_study.json"), &table)?;
        if !table.decreasing && !table.eps_absent {
            log::warn!("successive gaps are not strictly decreasing: {:?}", table.gaps);
            ok = false;
        }
    }
    if rows.iter().any(|r| r.status == "solver-abort") {
        log::error!("at least one sweep job aborted; see {SUMMARY_CSV}");
        return Ok(Status::Aborted);
    }
    Ok(Status::from_pass(ok))
}
