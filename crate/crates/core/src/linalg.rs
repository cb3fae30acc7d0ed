//! Jacobi-preconditioned conjugate gradients for the implicit nutrient step
//! `((1 + dt u) I - dt lap) v = rhs`.
//!
//! The operator is symmetric positive definite on a uniform grid with
//! off-diagonals `<= 0` and strict diagonal dominance, so it is an M-matrix.

use crate::grid::Grid;

#[derive(Debug, Clone, Copy)]
pub(crate) struct CgOutcome {
    pub iterations: usize,
    pub converged: bool,
    pub relative_residual: f64,
}

#[derive(Debug, Clone)]
pub(crate) struct HelmholtzSolver {
    grid: Grid,
    r: Vec<f64>,
    z: Vec<f64>,
    p: Vec<f64>,
    ap: Vec<f64>,
    inv_diag: Vec<f64>,
    diag: Vec<f64>,
}

impl HelmholtzSolver {
    pub(crate) fn new(grid: Grid) -> Self {
        let n = grid.len();
        HelmholtzSolver {
            grid,
            r: vec![0.0; n],
            z: vec![0.0; n],
            p: vec![0.0; n],
            ap: vec![0.0; n],
            inv_diag: vec![0.0; n],
            diag: vec![0.0; n],
        }
    }

    /// Solves for `x` in place, starting from the guess already in `x`.
    pub(crate) fn solve(
        &mut self,
        dt: f64,
        u: &[f64],
        rhs: &[f64],
        x: &mut [f64],
        tol: f64,
        max_iter: usize,
    ) -> CgOutcome {
        let g = self.grid;
        let (nx, ny) = (g.nx(), g.ny());
        let cx = dt / (g.hx() * g.hx());
        let cy = dt / (g.hy() * g.hy());

        for j in 0..ny {
            for i in 0..nx {
                let k = i + nx * j;
                let mut d = 1.0 + dt * u[k];
                if i > 0 {
                    d += cx;
                }
                if i + 1 < nx {
                    d += cx;
                }
                if j > 0 {
                    d += cy;
                }
                if j + 1 < ny {
                    d += cy;
                }
                self.diag[k] = d;
                self.inv_diag[k] = 1.0 / d;
            }
        }

        let b_norm = dot(rhs, rhs).sqrt();
        if b_norm == 0.0 {
            x.iter_mut().for_each(|v| *v = 0.0);
            return CgOutcome {
                iterations: 0,
                converged: true,
                relative_residual: 0.0,
            };
        }

        apply(&g, cx, cy, &self.diag, x, &mut self.ap);
        for (r, (&b, &ax)) in self.r.iter_mut().zip(rhs.iter().zip(&self.ap)) {
            *r = b - ax;
        }
        let (mut r_norm_sq, mut rz) = precondition(&self.r, &self.inv_diag, &mut self.z);
        self.p.copy_from_slice(&self.z);
        let target = tol * b_norm;
        let mut iterations = 0;
        while r_norm_sq.sqrt() > target {
            if iterations >= max_iter {
                return CgOutcome {
                    iterations,
                    converged: false,
                    relative_residual: r_norm_sq.sqrt() / b_norm,
                };
            }
            let pap = apply(&g, cx, cy, &self.diag, &self.p, &mut self.ap);
            let alpha = rz / pap;
            for ((xk, r), (&pk, &apk)) in x
                .iter_mut()
                .zip(self.r.iter_mut())
                .zip(self.p.iter().zip(&self.ap))
            {
                *xk += alpha * pk;
                *r -= alpha * apk;
            }
            let (rr, rz_new) = precondition(&self.r, &self.inv_diag, &mut self.z);
            r_norm_sq = rr;
            let beta = rz_new / rz;
            rz = rz_new;
            for (p, z) in self.p.iter_mut().zip(&self.z) {
                *p = z + beta * *p;
            }
            iterations += 1;
        }
        CgOutcome {
            iterations,
            converged: true,
            relative_residual: r_norm_sq.sqrt() / b_norm,
        }
    }
}

const LANES: usize = 4;

/// `z = r * inv_diag`; returns `(r . r, r . z)`. Reductions use independent
/// partial sums so they are not latency-bound; the summation order is fixed.
fn precondition(r: &[f64], inv_diag: &[f64], z: &mut [f64]) -> (f64, f64) {
    let mut rr = [0.0; LANES];
    let mut rz = [0.0; LANES];
    let mut zc = z.chunks_exact_mut(LANES);
    let mut rc = r.chunks_exact(LANES);
    let mut dc = inv_diag.chunks_exact(LANES);
    for ((z, r), d) in (&mut zc).zip(&mut rc).zip(&mut dc) {
        for l in 0..LANES {
            z[l] = r[l] * d[l];
            rr[l] += r[l] * r[l];
            rz[l] += r[l] * z[l];
        }
    }
    for ((z, &r), &d) in zc
        .into_remainder()
        .iter_mut()
        .zip(rc.remainder())
        .zip(dc.remainder())
    {
        *z = r * d;
        rr[0] += r * r;
        rz[0] += r * *z;
    }
    (
        (rr[0] + rr[1]) + (rr[2] + rr[3]),
        (rz[0] + rz[1]) + (rz[2] + rz[3]),
    )
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; LANES];
    let mut ac = a.chunks_exact(LANES);
    let mut bc = b.chunks_exact(LANES);
    for (a, b) in (&mut ac).zip(&mut bc) {
        for l in 0..LANES {
            acc[l] += a[l] * b[l];
        }
    }
    for (a, b) in ac.remainder().iter().zip(bc.remainder()) {
        acc[0] += a * b;
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3])
}

/// `out = diag * x - cx (x_W + x_E) - cy (x_S + x_N)`, where `diag` already
/// holds the shift plus one `cx`/`cy` per existing neighbour and missing
/// neighbours contribute nothing. Returns `x . out`.
fn apply(g: &Grid, cx: f64, cy: f64, diag: &[f64], x: &[f64], out: &mut [f64]) -> f64 {
    let (nx, ny) = (g.nx(), g.ny());
    for j in 0..ny {
        let lo = nx * j;
        let row = &x[lo..lo + nx];
        let d = &diag[lo..lo + nx];
        let o = &mut out[lo..lo + nx];
        for ((o, &d), &xk) in o.iter_mut().zip(d).zip(row) {
            *o = d * xk;
        }
        o[0] -= cx * row[1];
        for (o, w) in o[1..nx - 1].iter_mut().zip(row.windows(3)) {
            *o -= cx * (w[0] + w[2]);
        }
        o[nx - 1] -= cx * row[nx - 2];
        if j > 0 {
            for (o, &b) in o.iter_mut().zip(&x[lo - nx..lo]) {
                *o -= cy * b;
            }
        }
        if j + 1 < ny {
            for (o, &a) in o.iter_mut().zip(&x[lo + nx..lo + 2 * nx]) {
                *o -= cy * a;
            }
        }
    }
    dot(x, out)
}
