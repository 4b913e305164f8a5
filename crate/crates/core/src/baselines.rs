//! Classical reconstructions used as comparators: tricubic fusion of the
//! views and regularised least squares over the stacked view operators.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::forward::ViewOperator;
use crate::geometry::{tricubic_at_index, GridSpec, ViewGeometry, Volume3D};

fn check_views(views: &[Volume3D], geoms: &[ViewGeometry]) -> Result<()> {
    if views.is_empty() {
        return Err(invalid("at least one view is required"));
    }
    if views.len() != geoms.len() {
        return Err(invalid(format!("{} views but {} geometries", views.len(), geoms.len())));
    }
    geoms.iter().try_for_each(|g| g.validate())
}

/// Interpolates every view onto `grid` with Catmull-Rom tricubic weights and
/// averages the views covering each voxel. Uncovered voxels are 0.
pub fn tricubic_fuse(views: &[Volume3D], geoms: &[ViewGeometry], grid: &GridSpec) -> Result<Volume3D> {
    check_views(views, geoms)?;
    let pivot = grid.centroid();
    // world point p of the output is seen by view v at M_v^{-1} p
    let maps: Vec<_> = views
        .iter()
        .zip(geoms)
        .map(|(v, g)| {
            let undo = match &g.motion {
                Some(m) => m.inverse().as_affine_about(pivot),
                None => crate::geometry::AffineMatrix::identity(),
            };
            *v.grid().inverse_affine() * undo * *grid.affine()
        })
        .collect();
    let mut data = vec![0.0; grid.num_voxels()];
    let mut covered = 0usize;
    for (idx, out) in data.iter_mut().enumerate() {
        let [i, j, k] = grid.unflatten(idx);
        let p = [i as f64, j as f64, k as f64];
        let mut sum = 0.0;
        let mut n = 0usize;
        for (v, m) in views.iter().zip(&maps) {
            let q = m.transform_point(p);
            if v.grid().contains_index(q) {
                sum += tricubic_at_index(v, q);
                n += 1;
            }
        }
        if n > 0 {
            *out = sum / n as f64;
            covered += 1;
        }
    }
    if covered == 0 {
        return Err(Error::DegenerateGeometry(
            "no output voxel is covered by any view".into(),
        ));
    }
    Volume3D::new(grid.clone(), data)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LsSrrConfig {
    /// Weight of the squared-gradient penalty.
    pub lambda: f64,
    pub max_iterations: usize,
    /// Stop when the normal-equation residual falls below this fraction of
    /// its initial value.
    pub tolerance: f64,
}

impl Default for LsSrrConfig {
    fn default() -> Self {
        LsSrrConfig {
            lambda: 1e-3,
            max_iterations: 100,
            tolerance: 1e-6,
        }
    }
}

impl LsSrrConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(invalid("lambda must be >= 0"));
        }
        if self.max_iterations < 1 {
            return Err(invalid("max_iterations must be >= 1"));
        }
        if !(self.tolerance > 0.0) {
            return Err(invalid("tolerance must be > 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct LsSrrOutcome {
    pub volume: Volume3D,
    pub iterations: usize,
    /// Least-squares residual `‖A y − b‖` after each iteration, starting with
    /// the zero initialisation.
    pub residuals: Vec<f64>,
    /// Normal-equation residual `‖Aᵀ(b − A y)‖` relative to its initial value.
    pub relative_gradient: f64,
    pub converged: bool,
}

/// Forward differences along each axis; entries whose neighbour is outside
/// the grid are 0. Output layout: three blocks of `n` values.
fn gradient(dims: [usize; 3], y: &[f64], out: &mut [f64]) {
    let n = y.len();
    let strides = [1, dims[0], dims[0] * dims[1]];
    for idx in 0..n {
        let c = [idx % dims[0], (idx / dims[0]) % dims[1], idx / strides[2]];
        for a in 0..3 {
            out[a * n + idx] = if c[a] + 1 < dims[a] {
                y[idx + strides[a]] - y[idx]
            } else {
                0.0
            };
        }
    }
}

/// Transpose of [`gradient`], added to `out`.
fn gradient_t(dims: [usize; 3], g: &[f64], out: &mut [f64]) {
    let n = out.len();
    let strides = [1, dims[0], dims[0] * dims[1]];
    for idx in 0..n {
        let c = [idx % dims[0], (idx / dims[0]) % dims[1], idx / strides[2]];
        for a in 0..3 {
            if c[a] + 1 < dims[a] {
                let v = g[a * n + idx];
                out[idx + strides[a]] += v;
                out[idx] -= v;
            }
        }
    }
}

/// The stacked system `A = [H_1; …; H_V; sqrt(λ) D]`.
struct Stacked<'a> {
    ops: &'a [ViewOperator],
    dims: [usize; 3],
    sqrt_lambda: f64,
}

impl Stacked<'_> {
    fn apply(&self, y: &[f64]) -> Vec<Vec<f64>> {
        let mut out: Vec<Vec<f64>> = self.ops.iter().map(|op| op.forward(y)).collect();
        if self.sqrt_lambda > 0.0 {
            let mut g = vec![0.0; 3 * y.len()];
            gradient(self.dims, y, &mut g);
            g.iter_mut().for_each(|v| *v *= self.sqrt_lambda);
            out.push(g);
        }
        out
    }

    fn apply_t(&self, r: &[Vec<f64>], hr_len: usize) -> Vec<f64> {
        let mut out = vec![0.0; hr_len];
        for (op, rv) in self.ops.iter().zip(r) {
            for (o, v) in out.iter_mut().zip(op.adjoint(rv)) {
                *o += v;
            }
        }
        if self.sqrt_lambda > 0.0 {
            let g: Vec<f64> = r[self.ops.len()].iter().map(|v| v * self.sqrt_lambda).collect();
            gradient_t(self.dims, &g, &mut out);
        }
        out
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm2_blocks(r: &[Vec<f64>]) -> f64 {
    r.iter().map(|b| dot(b, b)).sum()
}

fn operators(views: &[Volume3D], geoms: &[ViewGeometry], grid: &GridSpec) -> Result<Vec<ViewOperator>> {
    views
        .iter()
        .zip(geoms)
        .map(|(v, g)| ViewOperator::new(grid, v.grid(), g.slice_factor, g.motion.as_ref()))
        .collect()
}

/// `(Σ H_vᵀ H_v + λ DᵀD) x`.
pub fn normal_operator(
    views: &[Volume3D],
    geoms: &[ViewGeometry],
    grid: &GridSpec,
    lambda: f64,
    x: &[f64],
) -> Result<Vec<f64>> {
    check_views(views, geoms)?;
    if x.len() != grid.num_voxels() {
        return Err(invalid("vector length does not match grid"));
    }
    let ops = operators(views, geoms, grid)?;
    let a = Stacked {
        ops: &ops,
        dims: grid.dims(),
        sqrt_lambda: lambda.max(0.0).sqrt(),
    };
    Ok(a.apply_t(&a.apply(x), x.len()))
}

/// Minimises `Σ_v ‖H_v y − LR_v‖² + λ‖D y‖²` from `y = 0` with conjugate
/// gradients on the normal equations, in the CGLS arrangement that tracks the
/// least-squares residual directly.
pub fn ls_srr(
    views: &[Volume3D],
    geoms: &[ViewGeometry],
    grid: &GridSpec,
    config: &LsSrrConfig,
) -> Result<LsSrrOutcome> {
    check_views(views, geoms)?;
    config.validate()?;
    let ops = operators(views, geoms, grid)?;
    let n = grid.num_voxels();
    let a = Stacked {
        ops: &ops,
        dims: grid.dims(),
        sqrt_lambda: config.lambda.sqrt(),
    };
    let mut r: Vec<Vec<f64>> = views.iter().map(|v| v.data().to_vec()).collect();
    if config.lambda > 0.0 {
        r.push(vec![0.0; 3 * n]);
    }
    let mut x = vec![0.0; n];
    let mut s = a.apply_t(&r, n);
    let mut p = s.clone();
    let mut gamma = dot(&s, &s);
    let gamma0 = gamma;
    let mut residuals = vec![norm2_blocks(&r).sqrt()];
    let mut growth = 0usize;
    let mut iterations = 0;
    let mut rel = if gamma0 > 0.0 { 1.0 } else { 0.0 };
    while iterations < config.max_iterations && rel > config.tolerance {
        let q = a.apply(&p);
        let delta = norm2_blocks(&q);
        if !(delta > 0.0) || !delta.is_finite() {
            break;
        }
        let alpha = gamma / delta;
        x.iter_mut().zip(&p).for_each(|(xi, pi)| *xi += alpha * pi);
        for (rb, qb) in r.iter_mut().zip(&q) {
            rb.iter_mut().zip(qb).for_each(|(ri, qi)| *ri -= alpha * qi);
        }
        iterations += 1;
        let res = norm2_blocks(&r).sqrt();
        if !res.is_finite() {
            return Err(Error::SolverFailed {
                reason: "non-finite residual".into(),
                iterations,
                residual: res,
                last_iterate: x,
            });
        }
        let prev = *residuals.last().expect("initial residual recorded");
        growth = if res > prev { growth + 1 } else { 0 };
        residuals.push(res);
        if growth >= 10 {
            return Err(Error::SolverFailed {
                reason: "residual grew for 10 consecutive iterations".into(),
                iterations,
                residual: res,
                last_iterate: x,
            });
        }
        s = a.apply_t(&r, n);
        let gamma_new = dot(&s, &s);
        rel = (gamma_new / gamma0).sqrt();
        let beta = gamma_new / gamma;
        gamma = gamma_new;
        p.iter_mut().zip(&s).for_each(|(pi, si)| *pi = si + beta * *pi);
    }
    Ok(LsSrrOutcome {
        volume: Volume3D::new(grid.clone(), x)?,
        iterations,
        residuals,
        relative_gradient: rel,
        converged: rel <= config.tolerance,
    })
}
