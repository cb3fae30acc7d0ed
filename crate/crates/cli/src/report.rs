//! `report`: plot-ready CSV bundles for a finished run.

use std::path::Path;

use degentaxis_core::{io, monitors, rescale, Error, Result, Trajectory};

use crate::args::ReportArgs;
use crate::commands::Status;

pub const REPORT_DIR: &str = "report";
pub const DECAY_CSV: &str = "decay.csv";
pub const HARNACK_CSV: &str = "harnack.csv";
pub const LADDER_CSV: &str = "ladder.csv";
const LADDER_K_MAX: usize = 8;

fn decay_csv(traj: &Trajectory) -> String {
    io::csv_string(
        "t,sup_v,ln_sup_v",
        traj.samples.iter().map(|s| vec![s.t, s.sup_v, s.sup_v.ln()]),
    )
}

fn harnack_csv(traj: &Trajectory) -> String {
    io::csv_string(
        "t,min_v,sup_v,ratio",
        traj.samples
            .iter()
            .map(|s| vec![s.t, s.min_v, s.sup_v, s.harnack_ratio()]),
    )
}

fn ladder_csv(traj: &Trajectory) -> String {
    let ladder = monitors::ladder_scan(traj, LADDER_K_MAX);
    let mut rows = Vec::new();
    for (s, t) in ladder.snapshot_times.iter().enumerate() {
        for (k, p) in ladder.exponents.iter().enumerate() {
            rows.push(vec![*t, k as f64, *p, ladder.norms[s][k], ladder.sup_norms[s]]);
        }
    }
    io::csv_string("t,k,p_k,norm,sup_u", rows)
}

fn write(dir: &Path, name: &str, body: &str) -> Result<()> {
    io::write_text(dir.join(name), body)
}

pub fn report(a: &ReportArgs) -> Result<Status> {
    if !io::is_complete_run(&a.run_dir) {
        return Err(Error::Config {
            key: "run_dir".into(),
            msg: format!("{} is not a complete run directory", a.run_dir.display()),
        });
    }
    let (traj, _) = io::load_run(&a.run_dir)?;
    let out = a.out.clone().unwrap_or_else(|| a.run_dir.join(REPORT_DIR));
    std::fs::create_dir_all(&out).map_err(|e| Error::Io {
        path: out.clone(),
        source: e,
    })?;
    write(&out, DECAY_CSV, &decay_csv(&traj))?;
    write(&out, HARNACK_CSV, &harnack_csv(&traj))?;
    write(&out, LADDER_CSV, &ladder_csv(&traj))?;
    if traj.reached_v_tol() {
        let nt = rescale::compute_l(&traj)?;
        let phi = rescale::compute_phi(&traj, nt.l)?;
        write(
            &out,
            rescale::PHI_CSV,
            &io::csv_string("t,tau", phi.into_iter().map(|(t, p)| vec![t, p])),
        )?;
    } else {
        log::warn!("run stopped at T_max before v_tol; {} skipped", rescale::PHI_CSV);
    }
    println!("report written to {}", out.display());
    Ok(Status::Ok)
}
