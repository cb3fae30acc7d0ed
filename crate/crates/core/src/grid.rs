//! Uniform cell-centred rectangular mesh and the discrete calculus built on it.
//!
//! Cells are indexed row-major, `k = i + nx * j`, with `i` along x. Faces
//! normal to x are indexed `i + (nx + 1) * j` for `i in 0..=nx`, faces normal
//! to y are indexed `i + nx * j` for `j in 0..=ny`. Boundary faces always
//! carry zero, which is how the no-flux condition is encoded.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MIN_CELLS: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "GridSpec", into = "GridSpec")]
pub struct Grid {
    nx: usize,
    ny: usize,
    lx: f64,
    ly: f64,
    hx: f64,
    hy: f64,
}

/// Serialized form of a [`Grid`]; spacings are derived on load.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub nx: usize,
    pub ny: usize,
    #[serde(rename = "Lx")]
    pub lx: f64,
    #[serde(rename = "Ly")]
    pub ly: f64,
}

impl TryFrom<GridSpec> for Grid {
    type Error = Error;

    fn try_from(s: GridSpec) -> Result<Self> {
        Grid::new(s.nx, s.ny, s.lx, s.ly)
    }
}

impl From<Grid> for GridSpec {
    fn from(g: Grid) -> Self {
        GridSpec {
            nx: g.nx,
            ny: g.ny,
            lx: g.lx,
            ly: g.ly,
        }
    }
}

impl fmt::Display for Grid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{} on [0,{}]x[0,{}]", self.nx, self.ny, self.lx, self.ly)
    }
}

impl Grid {
    pub fn new(nx: usize, ny: usize, lx: f64, ly: f64) -> Result<Self> {
        if nx < MIN_CELLS || ny < MIN_CELLS {
            return Err(Error::InvalidGrid(format!(
                "need at least {MIN_CELLS} cells per direction, got {nx}x{ny}"
            )));
        }
        if !(lx > 0.0 && lx.is_finite() && ly > 0.0 && ly.is_finite()) {
            return Err(Error::InvalidGrid(format!(
                "extents must be positive and finite, got Lx={lx}, Ly={ly}"
            )));
        }
        Ok(Grid {
            nx,
            ny,
            lx,
            ly,
            hx: lx / nx as f64,
            hy: ly / ny as f64,
        })
    }

    pub fn unit_square(n: usize) -> Result<Self> {
        Grid::new(n, n, 1.0, 1.0)
    }

    pub fn nx(&self) -> usize {
        self.nx
    }

    pub fn ny(&self) -> usize {
        self.ny
    }

    pub fn lx(&self) -> f64 {
        self.lx
    }

    pub fn ly(&self) -> f64 {
        self.ly
    }

    pub fn hx(&self) -> f64 {
        self.hx
    }

    pub fn hy(&self) -> f64 {
        self.hy
    }

    pub fn cell_area(&self) -> f64 {
        self.hx * self.hy
    }

    pub fn area(&self) -> f64 {
        self.lx * self.ly
    }

    pub fn len(&self) -> usize {
        self.nx * self.ny
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize) -> usize {
        i + self.nx * j
    }

    pub fn cell_center(&self, i: usize, j: usize) -> (f64, f64) {
        ((i as f64 + 0.5) * self.hx, (j as f64 + 0.5) * self.hy)
    }

    pub fn x_face_len(&self) -> usize {
        (self.nx + 1) * self.ny
    }

    pub fn y_face_len(&self) -> usize {
        self.nx * (self.ny + 1)
    }

    pub(crate) fn same_as(&self, other: &Grid) -> Result<()> {
        if self == other {
            Ok(())
        } else {
            Err(Error::GridMismatch(self.to_string(), other.to_string()))
        }
    }
}

pub fn build_grid(nx: usize, ny: usize, lx: f64, ly: f64) -> Result<Grid> {
    Grid::new(nx, ny, lx, ly)
}

/// One real per cell.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarField {
    grid: Grid,
    values: Vec<f64>,
}

impl ScalarField {
    pub fn new(grid: Grid, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::format(
                "field",
                format!("expected {} values, got {}", grid.len(), values.len()),
            ));
        }
        if let Some(k) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::format(
                "field",
                format!("non-finite value at cell ({}, {})", k % grid.nx, k / grid.nx),
            ));
        }
        Ok(ScalarField { grid, values })
    }

    pub fn constant(grid: Grid, c: f64) -> Self {
        ScalarField {
            grid,
            values: vec![c; grid.len()],
        }
    }

    pub fn zeros(grid: Grid) -> Self {
        Self::constant(grid, 0.0)
    }

    /// Samples `f(x, y)` at cell centres.
    pub fn from_fn(grid: Grid, mut f: impl FnMut(f64, f64) -> f64) -> Self {
        let mut values = Vec::with_capacity(grid.len());
        for j in 0..grid.ny {
            for i in 0..grid.nx {
                let (x, y) = grid.cell_center(i, j);
                values.push(f(x, y));
            }
        }
        ScalarField { grid, values }
    }

    pub(crate) fn from_vec_unchecked(grid: Grid, values: Vec<f64>) -> Self {
        debug_assert_eq!(values.len(), grid.len());
        ScalarField { grid, values }
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub(crate) fn values_vec_mut(&mut self) -> &mut Vec<f64> {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[self.grid.index(i, j)]
    }

    pub fn integrate(&self) -> f64 {
        integrate(self)
    }

    pub fn sup_norm(&self) -> f64 {
        sup_norm(self)
    }

    pub fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn mean(&self) -> f64 {
        self.integrate() / self.grid.area()
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> ScalarField {
        ScalarField {
            grid: self.grid,
            values: self.values.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Cellwise `a * self + b * other`.
    pub fn combine(&self, a: f64, other: &ScalarField, b: f64) -> Result<ScalarField> {
        self.grid.same_as(&other.grid)?;
        Ok(ScalarField {
            grid: self.grid,
            values: self
                .values
                .iter()
                .zip(&other.values)
                .map(|(x, y)| a * x + b * y)
                .collect(),
        })
    }

    pub fn product(&self, other: &ScalarField) -> Result<ScalarField> {
        self.grid.same_as(&other.grid)?;
        Ok(ScalarField {
            grid: self.grid,
            values: self
                .values
                .iter()
                .zip(&other.values)
                .map(|(x, y)| x * y)
                .collect(),
        })
    }

    /// Max-norm distance between two fields on the same grid.
    pub fn max_abs_diff(&self, other: &ScalarField) -> Result<f64> {
        self.grid.same_as(&other.grid)?;
        Ok(self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }

    /// Cell-area weighted inner product.
    pub fn inner(&self, other: &ScalarField) -> Result<f64> {
        self.grid.same_as(&other.grid)?;
        let s: f64 = self.values.iter().zip(&other.values).map(|(a, b)| a * b).sum();
        Ok(s * self.grid.cell_area())
    }
}

/// Values on interior faces, split by normal direction.
#[derive(Debug, Clone, PartialEq)]
pub struct FaceField {
    grid: Grid,
    x: Vec<f64>,
    y: Vec<f64>,
}

impl FaceField {
    pub fn zeros(grid: Grid) -> Self {
        FaceField {
            grid,
            x: vec![0.0; grid.x_face_len()],
            y: vec![0.0; grid.y_face_len()],
        }
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    /// Face normal to x between cells `(i-1, j)` and `(i, j)`, `i in 0..=nx`.
    pub fn x_face(&self, i: usize, j: usize) -> f64 {
        self.x[i + (self.grid.nx + 1) * j]
    }

    /// Face normal to y between cells `(i, j-1)` and `(i, j)`, `j in 0..=ny`.
    pub fn y_face(&self, i: usize, j: usize) -> f64 {
        self.y[i + self.grid.nx * j]
    }

    pub fn x_values(&self) -> &[f64] {
        &self.x
    }

    pub fn y_values(&self) -> &[f64] {
        &self.y
    }

    /// Squared gradient magnitude at cell centres, averaging the squared face
    /// components on either side of each cell.
    pub fn cell_magnitude_sq(&self) -> ScalarField {
        let g = self.grid;
        let nx = g.nx;
        let mut out = Vec::with_capacity(g.len());
        for j in 0..g.ny {
            for i in 0..nx {
                let xl = self.x[i + (nx + 1) * j];
                let xr = self.x[i + 1 + (nx + 1) * j];
                let yb = self.y[i + nx * j];
                let yt = self.y[i + nx * (j + 1)];
                out.push(0.5 * (xl * xl + xr * xr) + 0.5 * (yb * yb + yt * yt));
            }
        }
        ScalarField::from_vec_unchecked(g, out)
    }

    /// Cell-centred vector obtained by averaging the two faces bracketing each
    /// cell in each direction.
    pub fn cell_average(&self) -> (ScalarField, ScalarField) {
        let g = self.grid;
        let nx = g.nx;
        let mut gx = Vec::with_capacity(g.len());
        let mut gy = Vec::with_capacity(g.len());
        for j in 0..g.ny {
            for i in 0..nx {
                gx.push(0.5 * (self.x[i + (nx + 1) * j] + self.x[i + 1 + (nx + 1) * j]));
                gy.push(0.5 * (self.y[i + nx * j] + self.y[i + nx * (j + 1)]));
            }
        }
        (
            ScalarField::from_vec_unchecked(g, gx),
            ScalarField::from_vec_unchecked(g, gy),
        )
    }
}

/// Midpoint rule: `sum(values) * cell_area`.
pub fn integrate(f: &ScalarField) -> f64 {
    f.values.iter().sum::<f64>() * f.grid.cell_area()
}

pub fn sup_norm(f: &ScalarField) -> f64 {
    f.values.iter().fold(0.0, |m, v| m.max(v.abs()))
}

/// Centred differences across interior faces, zero on the boundary.
pub fn face_gradient(f: &ScalarField) -> FaceField {
    let g = f.grid;
    let (nx, ny) = (g.nx, g.ny);
    let mut out = FaceField::zeros(g);
    let (ihx, ihy) = (1.0 / g.hx, 1.0 / g.hy);
    let v = &f.values;
    for j in 0..ny {
        let row = nx * j;
        let frow = (nx + 1) * j;
        for i in 1..nx {
            out.x[frow + i] = (v[row + i] - v[row + i - 1]) * ihx;
        }
    }
    for j in 1..ny {
        for i in 0..nx {
            out.y[i + nx * j] = (v[i + nx * j] - v[i + nx * (j - 1)]) * ihy;
        }
    }
    out
}

/// Divergence of the face gradient: the conservative 5-point Laplacian with
/// homogeneous Neumann boundary conditions.
pub fn neumann_laplacian(f: &ScalarField) -> ScalarField {
    let mut out = vec![0.0; f.grid.len()];
    apply_laplacian(&f.grid, &f.values, &mut out);
    ScalarField::from_vec_unchecked(f.grid, out)
}

/// Matrix-free kernel behind [`neumann_laplacian`]; writes into `out`.
pub(crate) fn apply_laplacian(g: &Grid, v: &[f64], out: &mut [f64]) {
    let (nx, ny) = (g.nx, g.ny);
    let cx = 1.0 / (g.hx * g.hx);
    let cy = 1.0 / (g.hy * g.hy);
    for j in 0..ny {
        let row = nx * j;
        for i in 0..nx {
            let k = row + i;
            let c = v[k];
            let mut acc = 0.0;
            if i > 0 {
                acc += (v[k - 1] - c) * cx;
            }
            if i + 1 < nx {
                acc += (v[k + 1] - c) * cx;
            }
            if j > 0 {
                acc += (v[k - nx] - c) * cy;
            }
            if j + 1 < ny {
                acc += (v[k + nx] - c) * cy;
            }
            out[k] = acc;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_field(g: Grid, seed: u64) -> ScalarField {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ScalarField::from_fn(g, |_, _| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn grid_spacings() {
        let g = build_grid(4, 4, 1.0, 1.0).unwrap();
        assert_eq!(g.hx(), 0.25);
        assert_eq!(g.hy(), 0.25);
        assert_eq!(g.cell_area(), 0.0625);

        let g = build_grid(8, 4, 2.0, 1.0).unwrap();
        assert_eq!(g.hx(), 0.25);
        assert_eq!(g.hy(), 0.25);
    }

    #[test]
    fn grid_rejects_bad_input() {
        assert!(build_grid(3, 4, 1.0, 1.0).is_err());
        assert!(build_grid(4, 2, 1.0, 1.0).is_err());
        assert!(build_grid(4, 4, 0.0, 1.0).is_err());
        assert!(build_grid(4, 4, 1.0, -1.0).is_err());
        assert!(build_grid(4, 4, f64::NAN, 1.0).is_err());
    }

    #[test]
    fn total_area() {
        let g = build_grid(7, 13, 2.3, 0.7).unwrap();
        let area = ScalarField::constant(g, 1.0).integrate();
        assert_relative_eq!(area, 2.3 * 0.7, max_relative = 1e-14);
    }

    #[test]
    fn integrate_constants() {
        let g = Grid::unit_square(8).unwrap();
        assert_eq!(ScalarField::constant(g, 1.0).integrate(), 1.0);
        let g = build_grid(8, 4, 2.0, 1.0).unwrap();
        assert_relative_eq!(ScalarField::constant(g, 3.5).integrate(), 7.0, max_relative = 1e-15);
    }

    #[test]
    fn integrate_matches_compensated_resum() {
        let g = Grid::unit_square(8).unwrap();
        let f = random_field(g, 7);
        // Kahan summation in reverse order.
        let (mut s, mut c) = (0.0f64, 0.0f64);
        for &v in f.values().iter().rev() {
            let y = v * g.cell_area() - c;
            let t = s + y;
            c = (t - s) - y;
            s = t;
        }
        assert_relative_eq!(f.integrate(), s, max_relative = 1e-14);
    }

    #[test]
    fn sup_norm_cases() {
        let g = Grid::unit_square(4).unwrap();
        assert_eq!(ScalarField::constant(g, 2.0).sup_norm(), 2.0);
        let mut f = ScalarField::zeros(g);
        f.values_mut()[5] = 5.0;
        assert_eq!(f.sup_norm(), 5.0);

        let f = random_field(Grid::unit_square(9).unwrap(), 3);
        let mut best = 0;
        for k in 0..f.values().len() {
            if f.values()[k].abs() > f.values()[best].abs() {
                best = k;
            }
        }
        assert_eq!(f.sup_norm(), f.values()[best].abs());
    }

    #[test]
    fn gradient_of_linear_profile() {
        let g = build_grid(10, 5, 1.0, 1.0).unwrap();
        let f = ScalarField::from_fn(g, |x, _| x);
        let grad = face_gradient(&f);
        for j in 0..5 {
            assert_eq!(grad.x_face(0, j), 0.0);
            assert_eq!(grad.x_face(10, j), 0.0);
            for i in 1..10 {
                assert_relative_eq!(grad.x_face(i, j), 1.0, max_relative = 1e-12);
            }
        }
        assert!(grad.y_values().iter().all(|&v| v == 0.0));
        let c = face_gradient(&ScalarField::constant(g, 4.2));
        assert!(c.x_values().iter().chain(c.y_values()).all(|&v| v == 0.0));
    }

    #[test]
    fn gradient_of_quadratic_is_second_order() {
        let g = build_grid(10, 4, 1.0, 1.0).unwrap();
        let f = ScalarField::from_fn(g, |x, _| x * x);
        let grad = face_gradient(&f);
        let h = g.hx();
        for i in 1..10 {
            let xf = i as f64 * h;
            // Centred difference of a quadratic is exact at the midpoint.
            assert!((grad.x_face(i, 0) - 2.0 * xf).abs() <= h * h);
        }
    }

    #[test]
    fn laplacian_of_constant_vanishes() {
        let g = build_grid(6, 5, 1.0, 2.0).unwrap();
        let lap = neumann_laplacian(&ScalarField::constant(g, 3.0));
        assert!(lap.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn cosine_mode_is_eigenfunction() {
        let g = build_grid(16, 8, 2.0, 1.0).unwrap();
        let f = ScalarField::from_fn(g, |x, _| (std::f64::consts::PI * x / 2.0).cos());
        let lap = neumann_laplacian(&f);
        assert!(lap.integrate().abs() <= 1e-12);
        // Discrete eigenvalue of the 1D Neumann operator for the first mode.
        let h = g.hx();
        let mu = -4.0 / (h * h) * (std::f64::consts::PI * h / 4.0).sin().powi(2);
        for (a, b) in lap.values().iter().zip(f.values()) {
            assert!((a - mu * b).abs() < 1e-10);
        }
    }

    #[test]
    fn laplacian_matches_assembled_matrix() {
        let g = build_grid(8, 8, 1.0, 1.3).unwrap();
        let f = random_field(g, 11);
        // Assemble the 5-point matrix as triplets, independently of the kernel.
        let n = g.len();
        let (cx, cy) = (1.0 / (g.hx() * g.hx()), 1.0 / (g.hy() * g.hy()));
        let mut triplets = Vec::new();
        for j in 0..8usize {
            for i in 0..8usize {
                let row = i + 8 * j;
                let neighbours = [
                    (i.wrapping_sub(1), j, cx),
                    (i + 1, j, cx),
                    (i, j.wrapping_sub(1), cy),
                    (i, j + 1, cy),
                ];
                for (ii, jj, c) in neighbours {
                    if ii < 8 && jj < 8 {
                        triplets.push((row, ii + 8 * jj, c));
                        triplets.push((row, row, -c));
                    }
                }
            }
        }
        let mut expect = vec![0.0; n];
        for (r, c, a) in triplets {
            expect[r] += a * f.values()[c];
        }
        let lap = neumann_laplacian(&f);
        for (a, b) in lap.values().iter().zip(&expect) {
            assert!((a - b).abs() <= 1e-13 * (1.0 + b.abs()), "{a} vs {b}");
        }
    }

    proptest! {
        #[test]
        fn laplacian_conserves_and_is_self_adjoint(
            seed in any::<u64>(),
            nx in 4usize..12,
            ny in 4usize..12,
            a in -3.0f64..3.0,
            b in -3.0f64..3.0,
        ) {
            let g = build_grid(nx, ny, 1.0 + nx as f64 * 0.1, 0.5 + ny as f64 * 0.05).unwrap();
            let f = random_field(g, seed);
            let h = random_field(g, seed.wrapping_add(1));
            let lf = neumann_laplacian(&f);
            let lh = neumann_laplacian(&h);

            prop_assert!(lf.integrate().abs() <= 1e-12 * (1.0 + f.sup_norm()) * g.area());

            let lhs = lf.inner(&h).unwrap();
            let rhs = f.inner(&lh).unwrap();
            prop_assert!((lhs - rhs).abs() <= 1e-12 * (1.0 + lhs.abs()));

            let combo = neumann_laplacian(&f.combine(a, &h, b).unwrap());
            let expect = lf.combine(a, &lh, b).unwrap();
            prop_assert!(combo.max_abs_diff(&expect).unwrap() <= 1e-11 / g.hx().min(g.hy()).powi(2));
        }
    }
}
