//! Time rescaling of a finished run onto `tau in [0, 1]`.
//!
//! With `L = int_0^inf |v|_inf dt` and `tau = phi(t) = (1/L) int_0^t |v|_inf`,
//! the density `w(x, tau) = u(x, phi^-1(tau))` solves
//!
//! ```text
//! w_tau = div(a w^{m-1} grad w) - div(b f(w)) + l a w,
//! a = L v / |v|_inf,   b = L v grad v / |v|_inf,
//! ```
//!
//! whose coefficients stay bounded above and below as `t -> inf`. Solving it
//! to `tau = 1` gives an independent estimate of the large-time limit of `u`.
//!
//! `b` lives on faces with the primal scheme's conventions (arithmetic face
//! mean of `v` times the face difference of `v`), so one `w` step with
//! `dtau = dt |v|_inf / L` reproduces one primal step with frozen `v`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Grid, ScalarField};
use crate::io;
use crate::model::{InitialData, ModelParams, TaxisLaw};
use crate::monitors::nutrient_integral;
use crate::power::Power;
use crate::solver::{
    advance, Schedule, SolverError, StepControl, StopReason, StopRule, Trajectory, CLAMP_FLOOR,
};

pub const TAU_NODES: usize = 512;
/// Default threshold on `rel_gap` for a generic run.
pub const REL_GAP_TOL: f64 = 0.05;
/// Relative slack on `min a >= lambda L`.
pub const A_LOWER_SLACK: f64 = 1e-6;
pub const PHI_CSV: &str = "phi.csv";
pub const COEFFICIENT_DIR: &str = "coefficients";
pub const COEFFICIENT_INDEX: &str = "coefficients.csv";
pub const LIMIT_REPORT: &str = "limit_report.json";
/// Every `stride`-th tau node is written to disk, plus the last.
pub const DEFAULT_COEFFICIENT_STRIDE: usize = 8;

/// `L` with its tail contribution.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NutrientTime {
    #[serde(rename = "L")]
    pub l: f64,
    pub tail: f64,
    pub tail_uncertainty: f64,
    /// The tail could not be fitted and was left out.
    pub flagged: bool,
}

/// `L` from the trapezoid of `|v|_inf` over the samples plus the fitted tail.
pub fn compute_l(traj: &Trajectory) -> Result<NutrientTime> {
    if traj.stop != StopReason::VTolReached {
        return Err(Error::Rescale(
            "run stopped before reaching v_tol; L would be truncated".into(),
        ));
    }
    let ni = nutrient_integral(traj);
    if ni.flagged {
        log::warn!("nutrient tail fit failed; L excludes the tail");
    }
    Ok(NutrientTime {
        l: ni.total(),
        tail: ni.tail,
        tail_uncertainty: 0.5 * ni.tail,
        flagged: ni.flagged,
    })
}

/// `(t_i, phi(t_i))` at every sample: running trapezoid of `|v|_inf` over `L`.
pub fn compute_phi(traj: &Trajectory, l: f64) -> Result<Vec<(f64, f64)>> {
    if !(l > 0.0 && l.is_finite()) {
        return Err(Error::Rescale(format!("L must be positive, got {l}")));
    }
    let s = &traj.samples;
    let mut out = Vec::with_capacity(s.len());
    let mut acc = 0.0;
    out.push((s[0].t, 0.0));
    for w in s.windows(2) {
        acc += 0.5 * (w[1].t - w[0].t) * (w[0].sup_v + w[1].sup_v);
        out.push((w[1].t, acc / l));
    }
    Ok(out)
}

/// `phi^-1(tau)` by monotone linear interpolation; `None` beyond the last
/// sample.
pub fn invert_phi(phi: &[(f64, f64)], tau: f64) -> Option<f64> {
    let last = phi.last()?;
    if tau > last.1 {
        return None;
    }
    let k = phi.partition_point(|p| p.1 < tau);
    if k == 0 {
        return Some(phi[0].0);
    }
    let (a, b) = (phi[k - 1], phi[k]);
    let w = (tau - a.1) / (b.1 - a.1);
    Some(a.0 + w * (b.0 - a.0))
}

/// `phi(t)` by linear interpolation of the sampled pairs.
pub fn eval_phi(phi: &[(f64, f64)], t: f64) -> f64 {
    let k = phi.partition_point(|p| p.0 < t);
    if k == 0 {
        return phi[0].1;
    }
    if k == phi.len() {
        return phi[k - 1].1;
    }
    let (a, b) = (phi[k - 1], phi[k]);
    a.1 + (t - a.0) / (b.0 - a.0) * (b.1 - a.1)
}

/// Where a tau node sits between two stored snapshots.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NodeBracket {
    pub tau: f64,
    /// `phi^-1(tau)`, or the final time for frozen nodes.
    pub t: f64,
    pub lo: usize,
    pub hi: usize,
    /// Weight of `hi`, linear in tau.
    pub weight: f64,
    /// Beyond `phi(T_end)`: coefficients frozen at the terminal snapshot.
    pub frozen: bool,
}

/// Coefficients on one tau node: `a` on cells, `b` on x- and y-faces.
#[derive(Debug, Clone, PartialEq)]
pub struct Coefficients {
    pub a: ScalarField,
    pub bx: Vec<f64>,
    pub by: Vec<f64>,
}

impl Coefficients {
    fn zeros(g: Grid) -> Self {
        Coefficients {
            a: ScalarField::zeros(g),
            bx: vec![0.0; g.x_face_len()],
            by: vec![0.0; g.y_face_len()],
        }
    }

    /// `self = (1 - s) p + s q`.
    fn blend(&mut self, p: &Coefficients, q: &Coefficients, s: f64) {
        let mix = |out: &mut [f64], x: &[f64], y: &[f64]| {
            for ((o, &x), &y) in out.iter_mut().zip(x).zip(y) {
                *o = x + s * (y - x);
            }
        };
        mix(self.a.values_mut(), p.a.values(), q.a.values());
        mix(&mut self.bx, &p.bx, &q.bx);
        mix(&mut self.by, &p.by, &q.by);
    }

    /// Largest `|b|` over faces.
    pub fn max_abs_b(&self) -> f64 {
        self.bx
            .iter()
            .chain(&self.by)
            .fold(0.0f64, |m, b| m.max(b.abs()))
    }

    /// Cell-centred components of `b`, averaging the bracketing faces.
    pub fn b_cell_average(&self) -> (ScalarField, ScalarField) {
        let g = *self.a.grid();
        let nx = g.nx();
        let mut gx = Vec::with_capacity(g.len());
        let mut gy = Vec::with_capacity(g.len());
        for j in 0..g.ny() {
            for i in 0..nx {
                gx.push(0.5 * (self.bx[i + (nx + 1) * j] + self.bx[i + 1 + (nx + 1) * j]));
                gy.push(0.5 * (self.by[i + nx * j] + self.by[i + nx * (j + 1)]));
            }
        }
        (
            ScalarField::from_vec_unchecked(g, gx),
            ScalarField::from_vec_unchecked(g, gy),
        )
    }
}

/// `a = L v / |v|_inf`, `b = L vbar dv/h / |v|_inf` for one snapshot of `v`.
fn snapshot_coefficients(v: &ScalarField, l: f64, out: &mut Coefficients) {
    let g = *v.grid();
    let (nx, ny) = (g.nx(), g.ny());
    let scale = l / v.sup_norm();
    let vv = v.values();
    for (a, &x) in out.a.values_mut().iter_mut().zip(vv) {
        *a = scale * x;
    }
    let (ihx, ihy) = (1.0 / g.hx(), 1.0 / g.hy());
    for j in 0..ny {
        for i in 1..nx {
            let (p, q) = (vv[i - 1 + nx * j], vv[i + nx * j]);
            out.bx[i + (nx + 1) * j] = scale * 0.5 * (p + q) * (q - p) * ihx;
        }
    }
    for j in 1..ny {
        for i in 0..nx {
            let (p, q) = (vv[i + nx * (j - 1)], vv[i + nx * j]);
            out.by[i + nx * j] = scale * 0.5 * (p + q) * (q - p) * ihy;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoefficientBounds {
    pub min_a: f64,
    pub max_a: f64,
    pub max_abs_b: f64,
    /// `min v / max v` over all samples, including the burn-in window.
    pub lambda_all: f64,
    /// `max(L, 1/(lambda L), max |b|) + 1`.
    pub c: f64,
    /// `min a >= lambda L (1 - 1e-6)` and `1/C <= a <= C`, `|b| <= C`.
    pub ok: bool,
}

/// The rescaled problem built from a finished run. Node coefficients are
/// evaluated on demand from the stored `v` snapshots.
#[derive(Debug, Clone)]
pub struct RescaledProblem<'a> {
    traj: &'a Trajectory,
    pub nutrient_time: NutrientTime,
    pub phi: Vec<(f64, f64)>,
    pub tau_grid: Vec<f64>,
    pub nodes: Vec<NodeBracket>,
    pub bounds: CoefficientBounds,
}

/// Builds `L`, `phi`, the tau grid and the coefficient brackets and checks
/// the coefficient bounds on every node.
pub fn build(traj: &Trajectory) -> Result<RescaledProblem<'_>> {
    build_with_nodes(traj, TAU_NODES)
}

pub fn build_with_nodes(traj: &Trajectory, n_nodes: usize) -> Result<RescaledProblem<'_>> {
    if n_nodes < 2 {
        return Err(Error::Rescale("need at least two tau nodes".into()));
    }
    let nt = compute_l(traj)?;
    let phi = compute_phi(traj, nt.l)?;
    let tau_grid: Vec<f64> = (0..n_nodes)
        .map(|j| j as f64 / (n_nodes - 1) as f64)
        .collect();
    let nodes = build_coefficients(traj, &phi, &tau_grid)?;
    let mut p = RescaledProblem {
        traj,
        nutrient_time: nt,
        phi,
        tau_grid,
        nodes,
        bounds: CoefficientBounds {
            min_a: 0.0,
            max_a: 0.0,
            max_abs_b: 0.0,
            lambda_all: 0.0,
            c: 0.0,
            ok: false,
        },
    };
    p.bounds = p.measure_bounds();
    if !p.bounds.ok {
        log::warn!("coefficient bounds violated: {:?}", p.bounds);
    }
    Ok(p)
}

/// Brackets each tau node between the snapshots around `phi^-1(tau)`.
/// Nodes past `phi(T_end)` are frozen at the terminal snapshot.
pub fn build_coefficients(
    traj: &Trajectory,
    phi: &[(f64, f64)],
    tau_grid: &[f64],
) -> Result<Vec<NodeBracket>> {
    let snaps = &traj.snapshots;
    let snap_tau: Vec<f64> = snaps.iter().map(|s| eval_phi(phi, s.t)).collect();
    let last = snaps.len() - 1;
    let mut out = Vec::with_capacity(tau_grid.len());
    for &tau in tau_grid {
        match invert_phi(phi, tau) {
            None => out.push(NodeBracket {
                tau,
                t: snaps[last].t,
                lo: last,
                hi: last,
                weight: 0.0,
                frozen: true,
            }),
            Some(t) => {
                let k = snap_tau.partition_point(|&x| x < tau);
                let (lo, hi) = if k == 0 {
                    (0, 0)
                } else if k > last {
                    (last, last)
                } else {
                    (k - 1, k)
                };
                let span = snap_tau[hi] - snap_tau[lo];
                let weight = if span > 0.0 {
                    ((tau - snap_tau[lo]) / span).clamp(0.0, 1.0)
                } else {
                    0.0
                };
                out.push(NodeBracket {
                    tau,
                    t,
                    lo,
                    hi,
                    weight,
                    frozen: false,
                });
            }
        }
    }
    let frozen = out.iter().filter(|n| n.frozen).count();
    if frozen > 0 {
        log::info!("{frozen} tau nodes beyond phi(T_end) use the terminal snapshot");
    }
    Ok(out)
}

impl<'a> RescaledProblem<'a> {
    pub fn trajectory(&self) -> &'a Trajectory {
        self.traj
    }

    pub fn l(&self) -> f64 {
        self.nutrient_time.l
    }

    pub fn frozen_nodes(&self) -> usize {
        self.nodes.iter().filter(|n| n.frozen).count()
    }

    /// Coefficients at node `j`.
    pub fn node(&self, j: usize) -> Coefficients {
        let mut out = Coefficients::zeros(self.traj.grid);
        let mut scratch = Coefficients::zeros(self.traj.grid);
        self.node_into(j, &mut out, &mut scratch);
        out
    }

    fn node_into(&self, j: usize, out: &mut Coefficients, scratch: &mut Coefficients) {
        let n = self.nodes[j];
        let snaps = &self.traj.snapshots;
        snapshot_coefficients(&snaps[n.lo].v, self.l(), out);
        if n.hi != n.lo && n.weight > 0.0 {
            snapshot_coefficients(&snaps[n.hi].v, self.l(), scratch);
            let lo = out.clone();
            out.blend(&lo, scratch, n.weight);
        }
    }

    fn measure_bounds(&self) -> CoefficientBounds {
        let lambda_all = self
            .traj
            .samples
            .iter()
            .map(|s| s.harnack_ratio())
            .fold(f64::INFINITY, f64::min);
        let (mut min_a, mut max_a, mut max_b) = (f64::INFINITY, 0.0f64, 0.0f64);
        let g = self.traj.grid;
        let (mut c, mut s) = (Coefficients::zeros(g), Coefficients::zeros(g));
        for j in 0..self.nodes.len() {
            self.node_into(j, &mut c, &mut s);
            min_a = min_a.min(c.a.min());
            max_a = max_a.max(c.a.max());
            max_b = max_b.max(c.max_abs_b());
        }
        let l = self.l();
        let big_c = l.max(1.0 / (lambda_all * l)).max(max_b) + 1.0;
        let ok = min_a > 0.0
            && min_a >= lambda_all * l * (1.0 - A_LOWER_SLACK)
            && 1.0 / big_c <= min_a
            && max_a <= big_c
            && max_b <= big_c;
        CoefficientBounds {
            min_a,
            max_a,
            max_abs_b: max_b,
            lambda_all,
            c: big_c,
            ok,
        }
    }
}

/// Result of integrating the rescaled problem to `tau = 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct LimitRun {
    pub w_final: ScalarField,
    /// `w` at the requested intermediate `tau` values.
    pub checkpoints: Vec<(f64, ScalarField)>,
    pub steps: u64,
    /// Largest `|int w - int w0| / int w0` seen along the way.
    pub max_mass_drift: f64,
    pub clamped_cells: u64,
}

/// Explicit finite-volume step for the `w` equation with the primal scheme's
/// face conventions.
struct LimitStepper {
    grid: Grid,
    law: TaxisLaw,
    mobility: Power,
    ell: f64,
    f_cell: Vec<f64>,
}

impl LimitStepper {
    fn stable_dt(&self, w: &[f64], c: &Coefficients, safety: f64) -> f64 {
        let g = self.grid;
        let (nx, ny) = (g.nx(), g.ny());
        let a = c.a.values();
        let mut d_max = 0.0f64;
        for (&wk, &ak) in w.iter().zip(a) {
            d_max = d_max.max(self.mobility.eval(wk) * ak);
        }
        let mut speed = 0.0f64;
        let mut face = |p: usize, q: usize, b: f64| {
            let abar = 0.5 * (a[p] + a[q]);
            d_max = d_max.max(self.mobility.eval(0.5 * (w[p] + w[q])) * abar);
            let up = if b > 0.0 { p } else { q };
            speed = speed.max(self.law.speed(w[up]) * b.abs());
        };
        for j in 0..ny {
            for i in 1..nx {
                let k = i + nx * j;
                face(k - 1, k, c.bx[i + (nx + 1) * j]);
            }
        }
        for k in nx..nx * ny {
            face(k - nx, k, c.by[k]);
        }
        let inv_h2 = 1.0 / (g.hx() * g.hx()) + 1.0 / (g.hy() * g.hy());
        let diffusive = if d_max > 0.0 {
            safety / (inv_h2 * 4.0 * d_max)
        } else {
            f64::INFINITY
        };
        let advective = if speed > 0.0 {
            safety * g.hx().min(g.hy()) / (2.0 * speed)
        } else {
            f64::INFINITY
        };
        diffusive.min(advective)
    }

    fn step(
        &mut self,
        w: &[f64],
        c: &Coefficients,
        dt: f64,
        tau: f64,
        out: &mut [f64],
    ) -> std::result::Result<usize, SolverError> {
        let g = self.grid;
        let (nx, ny) = (g.nx(), g.ny());
        let a = c.a.values();
        for k in 0..w.len() {
            self.f_cell[k] = self.law.f(w[k]);
            out[k] = w[k] + dt * self.ell * a[k] * w[k];
        }
        let (ihx, ihy) = (1.0 / g.hx(), 1.0 / g.hy());
        let mobility = self.mobility;
        let f_cell = &self.f_cell;
        let flux = |p: usize, q: usize, b: f64, ih: f64| {
            let mob = mobility.eval(0.5 * (w[p] + w[q])) * 0.5 * (a[p] + a[q]);
            let up = if b >= 0.0 { p } else { q };
            -mob * (w[q] - w[p]) * ih + f_cell[up] * b
        };
        for j in 0..ny {
            for i in 1..nx {
                let q = i + nx * j;
                let s = dt * ihx * flux(q - 1, q, c.bx[i + (nx + 1) * j], ihx);
                out[q - 1] -= s;
                out[q] += s;
            }
        }
        for q in nx..nx * ny {
            let s = dt * ihy * flux(q - nx, q, c.by[q], ihy);
            out[q - nx] -= s;
            out[q] += s;
        }
        let mut clamped = 0;
        for (k, x) in out.iter_mut().enumerate() {
            if *x < 0.0 {
                if *x >= CLAMP_FLOOR {
                    *x = 0.0;
                    clamped += 1;
                } else if x.is_finite() {
                    return Err(SolverError::NegativeDensity {
                        i: k % nx,
                        j: k / nx,
                        value: *x,
                        t: tau,
                    });
                }
            }
            if !x.is_finite() {
                return Err(SolverError::NonFinite {
                    field: "w",
                    i: k % nx,
                    j: k / nx,
                    t: tau,
                });
            }
        }
        Ok(clamped)
    }
}

/// Integrates the `w` equation from `w(0) = u0` to `tau = 1`, with the
/// coefficients linear in tau between adjacent nodes and frozen over each
/// step. Steps never exceed the node spacing; `checkpoints` are landed on
/// exactly.
pub fn solve_limit_problem(
    problem: &RescaledProblem<'_>,
    u0: &ScalarField,
    params: &ModelParams,
    control: &StepControl,
    checkpoints: &[f64],
) -> Result<LimitRun> {
    let g = problem.traj.grid;
    g.same_as(u0.grid())?;
    control.validate()?;
    if problem.bounds.min_a <= 0.0 {
        return Err(Error::Rescale(format!(
            "coefficient a must be positive, min a = {}",
            problem.bounds.min_a
        )));
    }
    let mut stepper = LimitStepper {
        grid: g,
        law: params.taxis_law(),
        mobility: Power::new(params.m - 1.0),
        ell: params.ell,
        f_cell: vec![0.0; g.len()],
    };
    let mut targets: Vec<f64> = checkpoints
        .iter()
        .copied()
        .filter(|&t| t > 0.0 && t < 1.0)
        .collect();
    targets.sort_by(f64::total_cmp);
    targets.push(1.0);

    let n = problem.tau_grid.len();
    let h_tau = 1.0 / (n - 1) as f64;
    let mut lo = problem.node(0);
    let mut hi = problem.node(1);
    let mut loaded = 0usize;
    let mut now = lo.clone();
    let mut scratch = Coefficients::zeros(g);

    let mass0 = u0.integrate();
    let mut w = u0.values().to_vec();
    let mut next = vec![0.0; w.len()];
    let mut tau = 0.0f64;
    let mut steps = 0u64;
    let mut clamped = 0u64;
    let mut drift = 0.0f64;
    let mut saved = Vec::new();
    for &target in &targets {
        while tau < target {
            let j = ((tau / h_tau) as usize).min(n - 2);
            if j != loaded {
                if j == loaded + 1 {
                    std::mem::swap(&mut lo, &mut hi);
                } else {
                    problem.node_into(j, &mut lo, &mut scratch);
                }
                problem.node_into(j + 1, &mut hi, &mut scratch);
                loaded = j;
            }
            let s = ((tau - problem.tau_grid[j]) / h_tau).clamp(0.0, 1.0);
            now.blend(&lo, &hi, s);
            // The node spacing bounds the step even when nothing else does,
            // so the source term is resolved on gradient-free data.
            let mut dt = stepper.stable_dt(&w, &now, control.safety).min(h_tau);
            if let Some(cap) = control.dt_max {
                dt = dt.min(cap);
            }
            if let Some(fixed) = control.fixed_dt {
                dt = fixed;
            }
            if tau + dt * (1.0 + 1e-9) >= target {
                dt = target - tau;
            }
            if !(dt > 0.0) || dt < 1e-300 {
                return Err(SolverError::DtUnderflow { dt, t: tau }.into());
            }
            clamped += stepper.step(&w, &now, dt, tau, &mut next)? as u64;
            std::mem::swap(&mut w, &mut next);
            tau = if dt == target - tau { target } else { tau + dt };
            steps += 1;
            if params.ell == 0.0 {
                let m = w.iter().sum::<f64>() * g.cell_area();
                drift = drift.max((m - mass0).abs() / mass0);
            }
        }
        saved.push((target, ScalarField::from_vec_unchecked(g, w.clone())));
    }
    let (_, w_final) = saved.pop().expect("tau = 1 is always a target");
    log::info!("limit problem: {steps} steps, mass drift {drift:.3e}");
    Ok(LimitRun {
        w_final,
        checkpoints: saved,
        steps,
        max_mass_drift: drift,
        clamped_cells: clamped,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct LimitReport {
    pub w_final: ScalarField,
    pub u_late: ScalarField,
    /// `|w(1) - u(T_end)|_inf / (|u(T_end)|_inf + 1e-30)`
    pub rel_gap: f64,
    /// `|u(T_end) - mean|_inf`
    pub heterogeneity: f64,
    /// `|v(T_end)|_inf < v_tol |v0|_inf`
    pub v_final_ok: bool,
}

pub fn compare_limit(w_final: &ScalarField, traj: &Trajectory) -> Result<LimitReport> {
    let u_late = &traj.last().u;
    let rel_gap = w_final.max_abs_diff(u_late)? / (u_late.sup_norm() + 1e-30);
    let mean = u_late.mean();
    let heterogeneity = u_late.map(|x| x - mean).sup_norm();
    let v_final_ok = traj.last().v.sup_norm() < traj.stop_rule.v_tol * traj.sup_v0();
    Ok(LimitReport {
        w_final: w_final.clone(),
        u_late: u_late.clone(),
        rel_gap,
        heterogeneity,
        v_final_ok,
    })
}

/// Serialized as `limit_report.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LimitSummary {
    #[serde(rename = "L")]
    pub l: f64,
    pub tail: f64,
    pub tail_uncertainty: f64,
    pub tail_flagged: bool,
    pub rel_gap: f64,
    pub rel_gap_tol: f64,
    pub heterogeneity: f64,
    pub frozen_nodes: usize,
    pub bounds: CoefficientBounds,
    pub limit_steps: u64,
    pub max_mass_drift: f64,
    pub rel_gap_ok: bool,
    pub bounds_ok: bool,
    pub v_final_ok: bool,
    pub pass: bool,
}

impl LimitSummary {
    pub fn new(problem: &RescaledProblem<'_>, run: &LimitRun, report: &LimitReport, tol: f64) -> Self {
        let rel_gap_ok = report.rel_gap <= tol;
        LimitSummary {
            l: problem.l(),
            tail: problem.nutrient_time.tail,
            tail_uncertainty: problem.nutrient_time.tail_uncertainty,
            tail_flagged: problem.nutrient_time.flagged,
            rel_gap: report.rel_gap,
            rel_gap_tol: tol,
            heterogeneity: report.heterogeneity,
            frozen_nodes: problem.frozen_nodes(),
            bounds: problem.bounds,
            limit_steps: run.steps,
            max_mass_drift: run.max_mass_drift,
            rel_gap_ok,
            bounds_ok: problem.bounds.ok,
            v_final_ok: report.v_final_ok,
            pass: rel_gap_ok && problem.bounds.ok && report.v_final_ok,
        }
    }
}

/// Builds the rescaled problem for a finished run, solves it and compares
/// `w(1)` with the final density.
pub fn cross_validate(
    traj: &Trajectory,
    control: &StepControl,
    tol: f64,
) -> Result<(LimitSummary, LimitReport)> {
    let problem = build(traj)?;
    let run = solve_limit_problem(&problem, &traj.initial().u, &traj.params, control, &[])?;
    let report = compare_limit(&run.w_final, traj)?;
    Ok((LimitSummary::new(&problem, &run, &report, tol), report))
}

/// Writes `phi.csv`, every `stride`-th node's coefficients and
/// `limit_report.json` into `dir`.
pub fn write_artifacts(
    dir: impl AsRef<Path>,
    problem: &RescaledProblem<'_>,
    summary: &LimitSummary,
    stride: usize,
) -> Result<()> {
    let dir = dir.as_ref();
    let cdir = dir.join(COEFFICIENT_DIR);
    std::fs::create_dir_all(&cdir).map_err(|e| Error::io(&cdir, e))?;
    io::write_text(
        dir.join(PHI_CSV),
        &io::csv_string("t,tau", problem.phi.iter().map(|&(t, p)| vec![t, p])),
    )?;
    let stride = stride.max(1);
    let last = problem.nodes.len() - 1;
    let mut rows = Vec::new();
    for (j, n) in problem.nodes.iter().enumerate() {
        if j % stride != 0 && j != last {
            continue;
        }
        let c = problem.node(j);
        let (bx, by) = c.b_cell_average();
        io::write_snapshot(cdir.join(format!("a_{j:05}.csv")), &c.a, n.tau)?;
        io::write_snapshot(cdir.join(format!("bx_{j:05}.csv")), &bx, n.tau)?;
        io::write_snapshot(cdir.join(format!("by_{j:05}.csv")), &by, n.tau)?;
        rows.push(vec![j as f64, n.tau, n.t, n.frozen as u8 as f64]);
    }
    io::write_text(
        dir.join(COEFFICIENT_INDEX),
        &io::csv_string("node,tau,t,frozen", rows),
    )?;
    io::write_json(dir.join(LIMIT_REPORT), summary)
}

/// Successive sup-norm gaps between runs with decreasing regularization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpsilonTable {
    pub eps: Vec<f64>,
    pub t_final: f64,
    /// `gaps[i] = |u_{eps_i}(T) - u_{eps_{i+1}}(T)|_inf`
    pub gaps: Vec<f64>,
    /// Gaps strictly decrease (vacuous for fewer than two gaps).
    pub decreasing: bool,
    /// `m >= 3`: the regularization does not enter the data.
    pub eps_absent: bool,
}

/// Runs `advance` to `t_final` for each `eps` (as independent jobs, at most
/// `jobs` at a time) and tabulates successive gaps in `u(T)`.
pub fn epsilon_study(
    init: &InitialData,
    params_base: &ModelParams,
    eps_list: &[f64],
    t_final: f64,
    schedule: &Schedule,
    control: &StepControl,
    jobs: usize,
) -> Result<EpsilonTable> {
    if eps_list.windows(2).any(|w| !(w[1] < w[0])) {
        return Err(Error::Config {
            key: "eps_list".into(),
            msg: "must be strictly decreasing".into(),
        });
    }
    let stop = StopRule {
        v_tol: 0.0,
        t_max: t_final,
    };
    let eps_absent = params_base.m >= 3.0;
    let run = |eps: f64| -> Result<ScalarField> {
        let params = ModelParams {
            epsilon: eps,
            ..*params_base
        };
        Ok(advance(init, &params, schedule, &stop, control)?.last().u.clone())
    };
    let jobs = jobs.max(1);
    let mut finals: Vec<Option<Result<ScalarField>>> = (0..eps_list.len()).map(|_| None).collect();
    for (chunk_eps, chunk_out) in eps_list.chunks(jobs).zip(finals.chunks_mut(jobs)) {
        std::thread::scope(|s| {
            let handles: Vec<_> = chunk_eps.iter().map(|&e| s.spawn(move || run(e))).collect();
            for (slot, h) in chunk_out.iter_mut().zip(handles) {
                *slot = Some(h.join().expect("epsilon job panicked"));
            }
        });
    }
    let finals: Vec<ScalarField> = finals
        .into_iter()
        .map(|r| r.expect("every job ran"))
        .collect::<Result<_>>()?;
    let gaps = finals
        .windows(2)
        .map(|w| w[0].max_abs_diff(&w[1]))
        .collect::<Result<Vec<f64>>>()?;
    let decreasing = gaps.windows(2).all(|w| w[1] < w[0]);
    Ok(EpsilonTable {
        eps: eps_list.to_vec(),
        t_final,
        gaps,
        decreasing,
        eps_absent,
    })
}
