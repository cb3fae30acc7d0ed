//! End-to-end acceptance suite. Prints one PASS/FAIL line per criterion and
//! exits nonzero if any criterion fails.
//!
//! Runs are cached across criteria: the standard scenario at 64x64 with
//! `l = 0` serves criteria 2-7 and 10.

use std::cell::OnceCell;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use degentaxis_core::monitors::{self, TestFunction};
use degentaxis_core::rescale;
use degentaxis_core::solver::{advance, step_u, step_v, Schedule};
use degentaxis_core::{io, FKind, Grid, InitialData, ModelParams, ScalarField, SimState, StepControl, StopRule, Trajectory};

const STANDARD_N: usize = 64;
const REFERENCE: &str = include_str!("../../../reference/harnack_reference.json");

struct Timed {
    traj: Trajectory,
    wall: Duration,
}

fn timed(f: impl FnOnce() -> Trajectory) -> Timed {
    let t0 = Instant::now();
    let traj = f();
    Timed {
        traj,
        wall: t0.elapsed(),
    }
}

fn gaussian(g: Grid) -> ScalarField {
    ScalarField::from_fn(g, |x, y| {
        let r2: f64 = (x - 0.35f64).powi(2) + (y - 0.4f64).powi(2);
        0.1 + (-r2 / (2.0 * 0.15 * 0.15)).exp()
    })
}

fn standard_params(ell: f64) -> ModelParams {
    ModelParams::new(2.0, 1.5, ell, 1.0, FKind::PowerLaw, 1e-3)
}

fn standard_init(n: usize) -> InitialData {
    let g = Grid::unit_square(n).unwrap();
    InitialData::new(gaussian(g), ScalarField::constant(g, 1.0))
}

fn standard_run(ell: f64) -> Trajectory {
    advance(
        &standard_init(STANDARD_N),
        &standard_params(ell),
        &Schedule::default(),
        &StopRule::default(),
        &StepControl::default(),
    )
    .expect("standard run")
}

/// `u0 = v0 = 1` on 32x32 with a negligible regularization, run to `v_tol`.
fn constant_run() -> Trajectory {
    let g = Grid::unit_square(32).unwrap();
    let init = InitialData::new(ScalarField::constant(g, 1.0), ScalarField::constant(g, 1.0));
    let params = ModelParams::new(2.0, 1.5, 0.0, 1.0, FKind::PowerLaw, 1e-13);
    let control = StepControl {
        dt_max: Some(2e-4),
        ..StepControl::default()
    };
    let schedule = Schedule {
        sample_dt: 0.01,
        snapshot_count: 256,
    };
    advance(&init, &params, &schedule, &StopRule::default(), &control).expect("constant run")
}

#[derive(Default)]
struct Cache {
    constant: OnceCell<Timed>,
    standard_l0: OnceCell<Timed>,
    standard_l1: OnceCell<Timed>,
}

impl Cache {
    fn constant(&self) -> &Timed {
        self.constant.get_or_init(|| timed(constant_run))
    }
    fn standard(&self, ell: f64) -> &Timed {
        let cell = if ell == 0.0 {
            &self.standard_l0
        } else {
            &self.standard_l1
        };
        cell.get_or_init(|| timed(|| standard_run(ell)))
    }
}

type Outcome = Result<String, String>;

fn ensure(ok: bool, msg: String) -> Outcome {
    if ok {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn criterion_1(c: &Cache) -> Outcome {
    let run = c.constant();
    let traj = &run.traj;
    let u_dev = traj
        .snapshots
        .iter()
        .map(|s| s.u.values().iter().map(|x| (x - 1.0).abs()).fold(0.0, f64::max))
        .fold(0.0, f64::max)
        .max(traj.samples.iter().map(|s| (s.sup_u - 1.0).abs()).fold(0.0, f64::max));
    let v_err = traj
        .samples
        .iter()
        .filter(|s| s.t <= 5.0)
        .map(|s| (s.sup_v - (-s.t).exp()).abs() / (-s.t).exp())
        .fold(0.0, f64::max);
    let covered = traj.t_end() >= 5.0;
    let secs = run.wall.as_secs_f64();
    ensure(
        u_dev <= 1e-10 && v_err <= 1e-3 && covered && secs < 10.0,
        format!("max|u-1| = {u_dev:.2e}, max rel |sup_v - e^-t| on [0,5] = {v_err:.2e}, runtime {secs:.1} s"),
    )
}

fn criterion_2(c: &Cache) -> Outcome {
    let mut parts = Vec::new();
    let mut ok = true;
    let mut total = 0.0;
    for ell in [0.0, 1.0] {
        let run = c.standard(ell);
        let t = &run.traj;
        let vin = monitors::check_v_monotone(t);
        let u1 = monitors::check_mass_sandwich(t);
        let uv1 = monitors::check_consumption(t);
        let secs = run.wall.as_secs_f64();
        total += secs;
        ok &= t.reached_v_tol()
            && vin.pass
            && t.vin_step_violations == 0
            && u1.pass
            && uv1.pass
            && secs < 120.0;
        parts.push(format!(
            "l={ell}: vin {} u1 {} uv1 {} (consumed/int v0 = {:.10}) {secs:.1} s",
            vin.pass,
            u1.pass,
            uv1.pass,
            uv1.measured["ratio"]
        ));
    }
    parts.push(format!("total {total:.1} s"));
    ensure(ok, parts.join("; "))
}

fn reference_lambda() -> (f64, f64) {
    let v: serde_json::Value = serde_json::from_str(REFERENCE).expect("reference json");
    (
        v["lambda_hat"].as_f64().expect("lambda_hat"),
        v["lambda_hat_threshold"].as_f64().expect("threshold"),
    )
}

fn criterion_3(c: &Cache) -> Outcome {
    let (ref_lambda, threshold) = reference_lambda();
    let mut parts = vec![format!("reference lambda_hat {ref_lambda:.4} (threshold {threshold:.0e})")];
    let mut ok = ref_lambda >= threshold;
    for ell in [0.0, 1.0] {
        let h = monitors::harnack_scan(&c.standard(ell).traj, monitors::DEFAULT_BURN_IN);
        ok &= h.lambda_hat >= threshold && h.final_quarter_slope >= -1e-6;
        parts.push(format!(
            "l={ell}: lambda_hat {:.4}, slope {:.2e}",
            h.lambda_hat, h.final_quarter_slope
        ));
    }
    ensure(ok, parts.join("; "))
}

fn criterion_4(c: &Cache) -> Outcome {
    let mut parts = Vec::new();
    let mut ok = true;
    for ell in [0.0, 1.0] {
        let t = &c.standard(ell).traj;
        let h = monitors::harnack_scan(t, monitors::DEFAULT_BURN_IN);
        let b = monitors::budget_scan(t, h.lambda_hat);
        ok &= !b.inconclusive && b.vinf_time_integral <= b.bound_rhs * 1.05;
        parts.push(format!(
            "l={ell}: {:.4} <= 1.05 * {:.4}",
            b.vinf_time_integral, b.bound_rhs
        ));
    }
    let t = &c.constant().traj;
    let h = monitors::harnack_scan(t, monitors::DEFAULT_BURN_IN);
    let b = monitors::budget_scan(t, h.lambda_hat);
    let rel = (b.vinf_time_integral - b.bound_rhs).abs() / b.bound_rhs;
    ok &= (h.lambda_hat - 1.0).abs() <= 1e-12 && rel <= 1e-3;
    parts.push(format!(
        "constant: lambda_hat {:.12}, {:.6} vs {:.6} (rel {rel:.1e})",
        h.lambda_hat, b.vinf_time_integral, b.bound_rhs
    ));
    ensure(ok, parts.join("; "))
}

fn criterion_5(c: &Cache) -> Outcome {
    let control = StepControl::default();
    let constant = &c.constant().traj;
    let (cs, _) = rescale::cross_validate(constant, &control, 1e-3).map_err(|e| e.to_string())?;
    let run = c.standard(0.0);
    let t0 = Instant::now();
    let (ss, _) = rescale::cross_validate(&run.traj, &control, rescale::REL_GAP_TOL).map_err(|e| e.to_string())?;
    let secs = run.wall.as_secs_f64() + t0.elapsed().as_secs_f64();
    ensure(
        cs.rel_gap <= 1e-3 && ss.rel_gap <= 0.05 && ss.bounds_ok && secs < 180.0,
        format!(
            "constant rel_gap {:.2e}; standard rel_gap {:.2e} (L = {:.4}, bounds {}), runtime {secs:.1} s",
            cs.rel_gap, ss.rel_gap, ss.l, ss.bounds_ok
        ),
    )
}

/// Short standard run (`l = 0`) to `t_test` with dense snapshots.
fn weak_run(n: usize, t_test: f64) -> Trajectory {
    let schedule = Schedule {
        sample_dt: 5e-4,
        snapshot_count: 4096,
    };
    let stop = StopRule {
        v_tol: 0.0,
        t_max: t_test,
    };
    advance(&standard_init(n), &standard_params(0.0), &schedule, &stop, &StepControl::default()).expect("weak run")
}

fn criterion_6(c: &Cache) -> Outcome {
    let t = &c.standard(0.0).traj;
    let w0 = monitors::weak_residual(t, &TestFunction::constant(t.t_end())).map_err(|e| e.to_string())?;
    let const_ok = w0.r_u <= 1e-10 && w0.r_v <= 1e-6;

    let t_test = 0.25;
    let tf = TestFunction { k: 1, l: 1, t_test };
    let coarse = monitors::weak_residual(&weak_run(32, t_test), &tf).map_err(|e| e.to_string())?;
    let fine = monitors::weak_residual(&weak_run(64, t_test), &tf).map_err(|e| e.to_string())?;
    let ru = coarse.r_u / fine.r_u;
    let rv = coarse.r_v / fine.r_v;
    ensure(
        const_ok && ru >= 1.5 && rv >= 1.5,
        format!(
            "constant mode r_u {:.1e}, r_v {:.1e}; (1,1) mode 32->64: r_u {:.2e}->{:.2e} (x{ru:.2}), r_v {:.2e}->{:.2e} (x{rv:.2})",
            w0.r_u, w0.r_v, coarse.r_u, fine.r_u, coarse.r_v, fine.r_v
        ),
    )
}

fn criterion_7(c: &Cache) -> Outcome {
    let ms = [1.0, 1.5, 2.0, 2.5, 3.5];
    let envelope = ms.iter().all(|&m| monitors::envelope_holds(m, 8));
    let mut parts = vec![format!("envelope {envelope} for m in {ms:?}")];
    let mut ok = envelope;
    for ell in [0.0, 1.0] {
        let l = monitors::ladder_scan(&c.standard(ell).traj, 8);
        ok &= l.monotone_ok && l.worst_high_p_gap <= 0.05 && !l.snapshot_times.is_empty();
        parts.push(format!(
            "l={ell}: {} snapshots, monotone {}, worst 1 - norm/sup at p >= 256: {:.3}",
            l.snapshot_times.len(),
            l.monotone_ok,
            l.worst_high_p_gap
        ));
    }
    ensure(ok, parts.join("; "))
}

fn criterion_8() -> Outcome {
    let eps: Vec<f64> = (3..=7).map(|k| (-(k as f64)).exp2()).collect();
    let table = rescale::epsilon_study(
        &standard_init(STANDARD_N),
        &standard_params(0.0),
        &eps,
        1.0,
        &Schedule::default(),
        &StepControl::default(),
        std::thread::available_parallelism().map_or(1, |n| n.get()),
    )
    .map_err(|e| e.to_string())?;
    let strict = table.gaps.windows(2).all(|w| w[1] < w[0]);
    ensure(
        strict && table.gaps.len() == 4 && !table.eps_absent,
        format!("gaps {:?}", table.gaps.iter().map(|g| format!("{g:.3e}")).collect::<Vec<_>>()),
    )
}

/// Interior faces as `(lower cell, upper cell, spacing, face length)`.
fn faces(g: &Grid) -> Vec<(usize, usize, f64, f64)> {
    let (nx, ny) = (g.nx(), g.ny());
    let mut out = Vec::new();
    for j in 0..ny {
        for i in 0..nx {
            if i + 1 < nx {
                out.push((g.index(i, j), g.index(i + 1, j), g.hx(), g.hy()));
            }
            if j + 1 < ny {
                out.push((g.index(i, j), g.index(i, j + 1), g.hy(), g.hx()));
            }
        }
    }
    out
}

fn dense_step_u(s: &SimState, dt: f64, p: &ModelParams) -> Vec<f64> {
    let g = *s.grid();
    let fs = faces(&g);
    let (n, nf) = (g.len(), fs.len());
    let u = DVector::from_column_slice(s.u.values());
    let v = DVector::from_column_slice(s.v.values());
    let mut grad = DMatrix::<f64>::zeros(nf, n);
    let mut div = DMatrix::<f64>::zeros(n, nf);
    let mut mob = DVector::<f64>::zeros(nf);
    let mut drift = DVector::<f64>::zeros(nf);
    for (e, &(a, b, h, len)) in fs.iter().enumerate() {
        grad[(e, a)] = -1.0 / h;
        grad[(e, b)] = 1.0 / h;
        div[(a, e)] = -len / g.cell_area();
        div[(b, e)] = len / g.cell_area();
        let vbar = 0.5 * (v[a] + v[b]);
        mob[e] = (0.5 * (u[a] + u[b])).powf(p.m - 1.0) * vbar;
        let up = if v[b] >= v[a] { a } else { b };
        drift[e] = p.f(u[up]).unwrap() * vbar;
    }
    let flux = -mob.component_mul(&(&grad * &u)) + drift.component_mul(&(&grad * &v));
    let out = &u + (&div * flux) * dt + u.component_mul(&v) * (dt * p.ell);
    out.as_slice().to_vec()
}

fn dense_step_v(s: &SimState, dt: f64) -> Vec<f64> {
    let g = *s.grid();
    let n = g.len();
    let mut a = DMatrix::<f64>::identity(n, n);
    for (p, q, h, len) in faces(&g) {
        let c = dt * len / (h * g.cell_area());
        a[(p, p)] += c;
        a[(q, q)] += c;
        a[(p, q)] -= c;
        a[(q, p)] -= c;
    }
    for k in 0..n {
        a[(k, k)] += dt * s.u.values()[k];
    }
    a.lu()
        .solve(&DVector::from_column_slice(s.v.values()))
        .unwrap()
        .as_slice()
        .to_vec()
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn criterion_9() -> Outcome {
    let g = Grid::unit_square(8).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let u = ScalarField::from_fn(g, |_, _| rng.gen_range(0.0..2.0));
    let v = ScalarField::from_fn(g, |_, _| rng.gen_range(0.2..1.5));
    let s = SimState::new(u, v);
    let p = standard_params(1.0);
    let dt = 1e-3;
    let du = max_diff(step_u(&s, dt, &p).map_err(|e| e.to_string())?.values(), &dense_step_u(&s, dt, &p));
    let dv = max_diff(step_v(&s, dt).map_err(|e| e.to_string())?.values(), &dense_step_v(&s, dt));
    ensure(
        du <= 1e-13 && dv <= 1e-9,
        format!("step_u vs dense {du:.2e}, step_v vs dense solve {dv:.2e}"),
    )
}

fn criterion_10(c: &Cache) -> Outcome {
    let mut parts = Vec::new();
    let mut ok = true;
    for ell in [0.0, 1.0] {
        let first = io::trajectory_csv(&c.standard(ell).traj);
        let second = io::trajectory_csv(&standard_run(ell));
        let same = first.as_bytes() == second.as_bytes();
        ok &= same;
        parts.push(format!(
            "l={ell}: {} bytes, hash {}, identical {same}",
            first.len(),
            &io::blob_hash(first.as_bytes())[..12]
        ));
    }
    ensure(ok, parts.join("; "))
}

fn main() -> ExitCode {
    let cache = Cache::default();
    let criteria: [(&str, &dyn Fn() -> Outcome); 10] = [
        ("closed-form constant-data decay", &|| criterion_1(&cache)),
        ("nutrient monotonicity, mass sandwich, consumption", &|| criterion_2(&cache)),
        ("Harnack ratio stability", &|| criterion_3(&cache)),
        ("nutrient time-integral budget", &|| criterion_4(&cache)),
        ("rescaling cross-validation", &|| criterion_5(&cache)),
        ("weak-form residuals", &|| criterion_6(&cache)),
        ("exponent ladder", &|| criterion_7(&cache)),
        ("regularization limit", &criterion_8),
        ("dense oracle equivalence", &criterion_9),
        ("determinism", &|| criterion_10(&cache)),
    ];
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let t0 = Instant::now();
        let (tag, detail) = match f() {
            Ok(d) => ("PASS", d),
            Err(d) => {
                failed += 1;
                ("FAIL", d)
            }
        };
        println!(
            "{tag} criterion {:>2} [{name}] {detail} ({:.1} s)",
            i + 1,
            t0.elapsed().as_secs_f64()
        );
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
