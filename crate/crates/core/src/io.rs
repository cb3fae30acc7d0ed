//! On-disk formats: field snapshots, diagnostic series and run directories.
//!
//! A run directory holds
//!
//! ```text
//! trajectory.csv        t,sup_v,mass_u,mass_v,consumed,harnack_ratio,sup_u,lp_p64
//! aux.csv               t,min_v,grad6
//! snapshots.csv         index,t
//! snapshots/u_NNNNN.csv, snapshots/v_NNNNN.csv
//! manifest.json         written last; its presence marks a complete run
//! ```
//!
//! Every float is written with 17 significant digits so files round-trip
//! bit-exactly.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::grid::{Grid, ScalarField};
use crate::model::{Case, ModelParams};
use crate::solver::{Event, Sample, Snapshot, StopReason, StopRule, Trajectory};

pub const MANIFEST: &str = "manifest.json";
pub const TRAJECTORY_CSV: &str = "trajectory.csv";
pub const AUX_CSV: &str = "aux.csv";
pub const SNAPSHOT_INDEX: &str = "snapshots.csv";
pub const SNAPSHOT_DIR: &str = "snapshots";

const TRAJECTORY_HEADER: &str = "t,sup_v,mass_u,mass_v,consumed,harnack_ratio,sup_u,lp_p64";
const AUX_HEADER: &str = "t,min_v,grad6";
const SNAPSHOT_HEADER: &str = "# nx,ny,Lx,Ly,t";

/// Formats with 17 significant digits.
pub fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

fn parse_f64(s: &str, what: &str) -> Result<f64> {
    s.trim()
        .parse()
        .map_err(|_| Error::format(what, format!("not a number: {s:?}")))
}

/// Content hash in the style of `git hash-object`, with SHA-256.
pub fn blob_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    h.finalize().iter().fold(String::with_capacity(64), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Serializes a field: header comment, a comment line with the values of
/// `nx,ny,Lx,Ly,t`, then one row of `nx` values per `j`.
pub fn snapshot_to_string(field: &ScalarField, t: f64) -> String {
    let g = field.grid();
    let mut s = String::with_capacity(g.len() * 25 + 128);
    s.push_str(SNAPSHOT_HEADER);
    s.push('\n');
    let _ = writeln!(
        s,
        "# {},{},{},{},{}",
        g.nx(),
        g.ny(),
        fmt_f64(g.lx()),
        fmt_f64(g.ly()),
        fmt_f64(t)
    );
    for row in field.values().chunks(g.nx()) {
        for (i, x) in row.iter().enumerate() {
            if i > 0 {
                s.push(',');
            }
            s.push_str(&fmt_f64(*x));
        }
        s.push('\n');
    }
    s
}

pub fn parse_snapshot(text: &str) -> Result<(ScalarField, f64)> {
    let what = "snapshot";
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some(SNAPSHOT_HEADER) {
        return Err(Error::format(what, format!("expected header {SNAPSHOT_HEADER:?}")));
    }
    let meta = lines
        .next()
        .and_then(|l| l.strip_prefix('#'))
        .ok_or_else(|| Error::format(what, "missing grid line"))?;
    let parts: Vec<&str> = meta.split(',').map(str::trim).collect();
    if parts.len() != 5 {
        return Err(Error::format(what, "grid line needs nx,ny,Lx,Ly,t"));
    }
    let count = |s: &str| {
        s.parse::<usize>()
            .map_err(|_| Error::format(what, format!("bad cell count {s:?}")))
    };
    let grid = Grid::new(
        count(parts[0])?,
        count(parts[1])?,
        parse_f64(parts[2], what)?,
        parse_f64(parts[3], what)?,
    )?;
    let t = parse_f64(parts[4], what)?;
    let mut values = Vec::with_capacity(grid.len());
    let mut rows = 0;
    for line in lines.filter(|l| !l.trim().is_empty()) {
        let before = values.len();
        for x in line.split(',') {
            values.push(parse_f64(x, what)?);
        }
        if values.len() - before != grid.nx() {
            return Err(Error::format(what, format!("row {rows} has the wrong length")));
        }
        rows += 1;
    }
    if rows != grid.ny() {
        return Err(Error::format(what, format!("expected {} rows, found {rows}", grid.ny())));
    }
    Ok((ScalarField::new(grid, values)?, t))
}

pub fn write_snapshot(path: impl AsRef<Path>, field: &ScalarField, t: f64) -> Result<()> {
    write_bytes(path.as_ref(), snapshot_to_string(field, t).as_bytes())
}

pub fn read_snapshot(path: impl AsRef<Path>) -> Result<(ScalarField, f64)> {
    let path = path.as_ref();
    parse_snapshot(&read_text(path)?).map_err(|e| match e {
        Error::Format { what, msg } => Error::format(format!("{what} {}", path.display()), msg),
        e => e,
    })
}

/// Writes a CSV with the given header; every row must have as many columns.
pub fn csv_string(header: &str, rows: impl IntoIterator<Item = Vec<f64>>) -> String {
    let mut s = String::new();
    s.push_str(header);
    s.push('\n');
    for row in rows {
        let line: Vec<String> = row.into_iter().map(fmt_f64).collect();
        s.push_str(&line.join(","));
        s.push('\n');
    }
    s
}

/// Parses a numeric CSV, checking the header exactly.
pub fn parse_csv(text: &str, header: &str, what: &str) -> Result<Vec<Vec<f64>>> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h.trim() == header => {}
        _ => return Err(Error::format(what, format!("expected header {header:?}"))),
    }
    let cols = header.split(',').count();
    lines
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(n, l)| {
            let row = l
                .split(',')
                .map(|x| parse_f64(x, what))
                .collect::<Result<Vec<_>>>()?;
            if row.len() != cols {
                return Err(Error::format(what, format!("row {n} has {} columns", row.len())));
            }
            Ok(row)
        })
        .collect()
}

pub fn trajectory_csv(traj: &Trajectory) -> String {
    csv_string(
        TRAJECTORY_HEADER,
        traj.samples.iter().map(|s| {
            vec![
                s.t,
                s.sup_v,
                s.mass_u,
                s.mass_v,
                s.consumed,
                s.harnack_ratio(),
                s.sup_u,
                s.lp_p64,
            ]
        }),
    )
}

pub fn aux_csv(traj: &Trajectory) -> String {
    csv_string(
        AUX_HEADER,
        traj.samples.iter().map(|s| vec![s.t, s.min_v, s.grad6]),
    )
}

/// Everything needed to reload a run besides the series themselves.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    /// Echo of the configuration the run was started from, if any.
    pub config: serde_json::Value,
    pub config_hash: String,
    pub case: Case,
    pub params: ModelParams,
    pub grid: Grid,
    pub stop_rule: StopRule,
    pub stop: StopReason,
    pub steps: u64,
    pub cg_iterations: u64,
    pub clamped_cells: u64,
    pub vin_step_violations: u64,
    pub wall_time_s: f64,
    pub events: Vec<Event>,
    /// Relative path to content hash of every emitted file.
    pub files: BTreeMap<String, String>,
}

fn snapshot_names(k: usize) -> (String, String) {
    (
        format!("{SNAPSHOT_DIR}/u_{k:05}.csv"),
        format!("{SNAPSHOT_DIR}/v_{k:05}.csv"),
    )
}

/// Writes all run files, then the manifest. Returns the manifest.
pub fn write_run(
    dir: impl AsRef<Path>,
    traj: &Trajectory,
    config: serde_json::Value,
    wall_time_s: f64,
) -> Result<RunManifest> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    // A stale manifest would mark a half-written directory as complete.
    let manifest_path = dir.join(MANIFEST);
    if manifest_path.exists() {
        fs::remove_file(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    }

    let mut files = BTreeMap::new();
    let mut emit = |name: String, body: String| -> Result<()> {
        write_bytes(&dir.join(&name), body.as_bytes())?;
        files.insert(name, blob_hash(body.as_bytes()));
        Ok(())
    };
    emit(TRAJECTORY_CSV.into(), trajectory_csv(traj))?;
    emit(AUX_CSV.into(), aux_csv(traj))?;
    emit(
        SNAPSHOT_INDEX.into(),
        csv_string(
            "index,t",
            traj.snapshots
                .iter()
                .enumerate()
                .map(|(k, s)| vec![k as f64, s.t]),
        ),
    )?;
    for (k, s) in traj.snapshots.iter().enumerate() {
        let (un, vn) = snapshot_names(k);
        emit(un, snapshot_to_string(&s.u, s.t))?;
        emit(vn, snapshot_to_string(&s.v, s.t))?;
    }

    let config_bytes = serde_json::to_vec(&config).expect("JSON values serialize");
    let manifest = RunManifest {
        config_hash: blob_hash(&config_bytes),
        config,
        case: traj.case,
        params: traj.params,
        grid: traj.grid,
        stop_rule: traj.stop_rule,
        stop: traj.stop,
        steps: traj.steps,
        cg_iterations: traj.cg_iterations,
        clamped_cells: traj.clamped_cells,
        vin_step_violations: traj.vin_step_violations,
        wall_time_s,
        events: traj.events.clone(),
        files,
    };
    write_json(&manifest_path, &manifest)?;
    Ok(manifest)
}

pub fn write_json<T: Serialize>(path: impl AsRef<Path>, value: &T) -> Result<()> {
    let mut body = serde_json::to_string_pretty(value).expect("report types serialize");
    body.push('\n');
    write_bytes(path.as_ref(), body.as_bytes())
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: impl AsRef<Path>) -> Result<T> {
    let path = path.as_ref();
    serde_json::from_str(&read_text(path)?)
        .map_err(|e| Error::format(path.display().to_string(), e.to_string()))
}

pub fn write_text(path: impl AsRef<Path>, body: &str) -> Result<()> {
    write_bytes(path.as_ref(), body.as_bytes())
}

pub fn is_complete_run(dir: impl AsRef<Path>) -> bool {
    dir.as_ref().join(MANIFEST).is_file()
}

/// Reloads a complete run. Files whose hash differs from the manifest are
/// loaded anyway (with a warning) so that checks can judge their content.
pub fn load_run(dir: impl AsRef<Path>) -> Result<(Trajectory, RunManifest)> {
    let dir = dir.as_ref();
    if !is_complete_run(dir) {
        return Err(Error::format(
            "run directory",
            format!("{} has no {MANIFEST}; the run is incomplete", dir.display()),
        ));
    }
    let manifest: RunManifest = read_json(dir.join(MANIFEST))?;
    let read_checked = |name: &str| -> Result<String> {
        let text = read_text(&dir.join(name))?;
        match manifest.files.get(name) {
            Some(h) if *h != blob_hash(text.as_bytes()) => {
                log::warn!("{name} does not match the hash recorded in the manifest");
            }
            None => log::warn!("{name} is not listed in the manifest"),
            _ => {}
        }
        Ok(text)
    };

    let main = parse_csv(&read_checked(TRAJECTORY_CSV)?, TRAJECTORY_HEADER, TRAJECTORY_CSV)?;
    let aux = parse_csv(&read_checked(AUX_CSV)?, AUX_HEADER, AUX_CSV)?;
    if main.len() != aux.len() || main.is_empty() {
        return Err(Error::format(
            "run directory",
            format!("{TRAJECTORY_CSV} and {AUX_CSV} disagree on the sample count"),
        ));
    }
    let samples = main
        .iter()
        .zip(&aux)
        .map(|(r, a)| Sample {
            t: r[0],
            sup_v: r[1],
            mass_u: r[2],
            mass_v: r[3],
            consumed: r[4],
            sup_u: r[6],
            lp_p64: r[7],
            min_v: a[1],
            grad6: a[2],
        })
        .collect();

    let index = parse_csv(&read_checked(SNAPSHOT_INDEX)?, "index,t", SNAPSHOT_INDEX)?;
    let mut snapshots = Vec::with_capacity(index.len());
    for (k, row) in index.iter().enumerate() {
        let (un, vn) = snapshot_names(k);
        let (u, tu) = parse_snapshot(&read_checked(&un)?)?;
        let (v, tv) = parse_snapshot(&read_checked(&vn)?)?;
        u.grid().same_as(&manifest.grid)?;
        v.grid().same_as(&manifest.grid)?;
        if tu != row[1] || tv != row[1] {
            return Err(Error::format(
                "run directory",
                format!("snapshot {k} times disagree with {SNAPSHOT_INDEX}"),
            ));
        }
        snapshots.push(Snapshot { t: tu, u, v });
    }

    let traj = Trajectory {
        grid: manifest.grid,
        params: manifest.params,
        case: manifest.case,
        stop_rule: manifest.stop_rule,
        samples,
        snapshots,
        events: manifest.events.clone(),
        steps: manifest.steps,
        cg_iterations: manifest.cg_iterations,
        clamped_cells: manifest.clamped_cells,
        vin_step_violations: manifest.vin_step_violations,
        stop: manifest.stop,
    };
    Ok((traj, manifest))
}

/// Path of the `k`-th snapshot files inside a run directory.
pub fn snapshot_paths(dir: impl AsRef<Path>, k: usize) -> (PathBuf, PathBuf) {
    let (u, v) = snapshot_names(k);
    (dir.as_ref().join(u), dir.as_ref().join(v))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::FKind;
    use crate::solver::{advance, Schedule, StepControl};
    use crate::InitialData;

    fn tmpdir(tag: &str) -> PathBuf {
        let d = std::env::temp_dir().join(format!("degentaxis-io-{tag}-{}", std::process::id()));
        let _ = fs::remove_dir_all(&d);
        d
    }

    #[test]
    fn snapshot_round_trip_is_exact() {
        let g = Grid::new(5, 4, 2.0, 0.75).unwrap();
        let f = ScalarField::from_fn(g, |x, y| (x * 1e3).sin() / 3.0 + y.exp() * 1e-200);
        let text = snapshot_to_string(&f, 0.1 + 0.2);
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("# nx,ny,Lx,Ly,t"));
        assert!(lines.next().unwrap().starts_with("# 5,4,"));
        assert_eq!(text.lines().count(), 2 + 4);
        let (back, t) = parse_snapshot(&text).unwrap();
        assert_eq!(back, f);
        assert_eq!(t, 0.1 + 0.2);
    }

    #[test]
    fn snapshot_rejects_malformed_input() {
        let g = Grid::unit_square(4).unwrap();
        let text = snapshot_to_string(&ScalarField::constant(g, 1.0), 0.0);
        assert!(parse_snapshot(&text.replacen("# nx", "# mx", 1)).is_err());
        let short: String = text.lines().take(5).collect::<Vec<_>>().join("\n");
        assert!(parse_snapshot(&short).is_err());
        assert!(parse_snapshot(&text.replacen(",1.0", ",x", 1)).is_err());
    }

    #[test]
    fn seventeen_digits() {
        assert_eq!(fmt_f64(1.0), "1.0000000000000000e0");
        for x in [0.1, 1.0 / 3.0, 6.02214076e23, -2.2250738585072014e-308] {
            assert_eq!(fmt_f64(x).parse::<f64>().unwrap(), x);
        }
    }

    #[test]
    fn blob_hash_matches_git_convention() {
        // `printf 'hello\n' | git hash-object --object-format=sha256 --stdin`
        assert_eq!(
            blob_hash(b"hello\n"),
            "2cf8d83d9ee29543b34a87727421fdecb7e3f3a183d337639025de576db9ebb4"
        );
    }

    #[test]
    fn run_directory_round_trip() {
        let g = Grid::unit_square(8).unwrap();
        let u0 = ScalarField::from_fn(g, |x, y| 0.2 + x * y);
        let init = InitialData::new(u0, ScalarField::constant(g, 1.0));
        let p = ModelParams::new(2.0, 1.5, 0.5, 1.0, FKind::PowerLaw, 1e-3);
        let stop = StopRule { v_tol: 0.0, t_max: 0.3 };
        let traj = advance(&init, &p, &Schedule::default(), &stop, &StepControl::default()).unwrap();

        let dir = tmpdir("round-trip");
        let manifest = write_run(&dir, &traj, serde_json::json!({"note": "test"}), 0.5).unwrap();
        assert!(is_complete_run(&dir));
        assert_eq!(manifest.files.len(), 3 + 2 * traj.snapshots.len());

        let (back, m2) = load_run(&dir).unwrap();
        assert_eq!(m2, manifest);
        assert_eq!(back.snapshots, traj.snapshots);
        assert_eq!(back.samples.len(), traj.samples.len());
        for (a, b) in back.samples.iter().zip(&traj.samples) {
            assert_eq!(a.t, b.t);
            assert_eq!(a.sup_v, b.sup_v);
            assert_eq!(a.min_v, b.min_v);
            assert_eq!(a.grad6, b.grad6);
            assert_eq!(a.consumed, b.consumed);
        }
        assert_eq!(trajectory_csv(&back), trajectory_csv(&traj));

        fs::remove_file(dir.join(MANIFEST)).unwrap();
        assert!(load_run(&dir).is_err());
        let _ = fs::remove_dir_all(&dir);
    }
}
