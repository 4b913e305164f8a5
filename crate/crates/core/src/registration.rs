//! Rigid alignment of views to a reference view.
//!
//! Pairwise: both volumes are resampled (tricubic) onto isotropic grids
//! aligned with their own axes. Each is then blurred with the *other* view's
//! slice profile, so both carry the same through-plane blur and the
//! thick-slice anisotropy does not bias the match. The mean squared
//! difference is minimised by a coarse rotation grid search followed by
//! coarse-to-fine damped Gauss-Newton steps on a finite-difference Jacobian.
//!
//! Multi-view: the pairwise result seeds an alternation between a volume
//! estimate and per-view motion fits through the forward model
//! ([`register_views`]).

use nalgebra::{Matrix6, Vector3, Vector6};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::{ls_srr, LsSrrConfig};
use crate::error::{invalid, Error, Result};
use crate::forward::ViewOperator;
use crate::geometry::{tricubic_at_index, AffineMatrix, GridSpec, RigidTransform, ViewGeometry, Volume3D};
use crate::trainer::ReconJob;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RegistrationOptions {
    /// Half-width of the coarse rotation search, degrees.
    pub search_range_deg: f64,
    pub search_step_deg: f64,
    /// Resolution levels; level `l` samples at `2^l` times the finest spacing.
    pub levels: usize,
    /// Descent stops when the step falls below this (degrees / mm).
    pub step_tolerance: f64,
    pub max_iterations: usize,
    /// Finest level used; levels below it are skipped.
    pub finest_level: usize,
}

impl Default for RegistrationOptions {
    fn default() -> Self {
        RegistrationOptions {
            search_range_deg: 12.0,
            search_step_deg: 2.0,
            levels: 3,
            step_tolerance: 1e-3,
            max_iterations: 400,
            finest_level: 0,
        }
    }
}

/// Gaussian prefilter width relative to the level spacing.
const SMOOTHING: f64 = 0.7;

/// Thick axis of a view: unit direction (world) and slice thickness.
fn slice_profile(grid: &GridSpec) -> Option<(Vector3<f64>, f64)> {
    let s = grid.spacing();
    let (axis, thick) = (0..3)
        .map(|a| (a, s[a]))
        .fold((0, 0.0), |m, x| if x.1 > m.1 { x } else { m });
    let thin = s.iter().cloned().fold(f64::INFINITY, f64::min);
    if thick <= thin * (1.0 + 1e-6) {
        return None;
    }
    Some((grid.direction().column(axis).into_owned(), thick))
}

/// Isotropic grid with spacing `h` sharing `grid`'s orientation and centroid
/// and covering its footprint.
fn iso_grid(grid: &GridSpec, h: f64) -> Result<GridSpec> {
    let d = grid.dims();
    let s = grid.spacing();
    let dims = [0, 1, 2].map(|a| ((d[a] as f64 * s[a] / h).floor() as usize).max(1));
    let c = grid.centroid();
    let centre = AffineMatrix::translation([0, 1, 2].map(|a| -(dims[a] as f64 - 1.0) * 0.5));
    let affine = AffineMatrix::translation(c)
        * AffineMatrix::from_linear(grid.direction(), [0.0; 3])
        * AffineMatrix::scaling([h; 3])
        * centre;
    GridSpec::new(dims, [h; 3], affine)
}

/// Separable Gaussian smoothing with standard deviation `sigma_mm` along each
/// grid axis; taps beyond the edge are dropped and the weights renormalised.
fn gaussian_smooth(vol: &Volume3D, sigma_mm: f64) -> Volume3D {
    let dims = vol.dims();
    let spacing = vol.spacing();
    let strides = [1, dims[0], dims[0] * dims[1]];
    let mut data = vol.data().to_vec();
    for a in 0..3 {
        let sigma = sigma_mm / spacing[a];
        if sigma < 0.25 || dims[a] == 1 {
            continue;
        }
        let r = (3.0 * sigma).ceil() as i64;
        let kernel: Vec<f64> = (-r..=r).map(|o| (-0.5 * (o as f64 / sigma).powi(2)).exp()).collect();
        let src = data.clone();
        for (idx, out) in data.iter_mut().enumerate() {
            let c = ((idx / strides[a]) % dims[a]) as i64;
            let mut acc = 0.0;
            let mut wsum = 0.0;
            for (ki, w) in kernel.iter().enumerate() {
                let q = c + ki as i64 - r;
                if q >= 0 && q < dims[a] as i64 {
                    acc += w * src[(idx as i64 + (q - c) * strides[a] as i64) as usize];
                    wsum += w;
                }
            }
            *out = acc / wsum;
        }
    }
    vol.with_data(data).expect("same grid")
}

/// `vol` on the isotropic grid, averaged along `blur` (direction, thickness).
/// Voxels whose samples leave the footprint are NaN.
fn prepare(vol: &Volume3D, iso: &GridSpec, blur: Option<(Vector3<f64>, f64)>, fine: f64) -> Vec<f64> {
    let offsets: Vec<Vector3<f64>> = match blur {
        Some((dir, thick)) => {
            let k = ((thick / (0.5 * fine)).ceil() as usize).max(1);
            (0..k)
                .map(|m| dir * (((m as f64 + 0.5) / k as f64 - 0.5) * thick))
                .collect()
        }
        None => vec![Vector3::zeros()],
    };
    let to_vol = *vol.grid().inverse_affine() * *iso.affine();
    let lin = vol.grid().inverse_affine().linear();
    let offsets_idx: Vec<Vector3<f64>> = offsets.iter().map(|o| lin * o).collect();
    (0..iso.num_voxels())
        .map(|i| {
            let [x, y, z] = iso.unflatten(i);
            let base = Vector3::from(to_vol.transform_point([x as f64, y as f64, z as f64]));
            let mut acc = 0.0;
            for o in &offsets_idx {
                let q = base + o;
                let q = [q[0], q[1], q[2]];
                if !vol.grid().contains_index(q) {
                    return f64::NAN;
                }
                acc += tricubic_at_index(vol, q);
            }
            acc / offsets_idx.len() as f64
        })
        .collect()
}

/// Tricubic lookup that yields `None` outside the grid or next to a NaN.
/// Trilinear interpolation is not used here: its blur is zero on grid points
/// only, which biases the cost towards grid-aligned transforms.
#[inline]
fn lookup(vol: &Volume3D, p: [f64; 3]) -> Option<f64> {
    if !vol.grid().contains_index(p) {
        return None;
    }
    let v = tricubic_at_index(vol, p);
    v.is_finite().then_some(v)
}

/// One resolution level of the matching problem.
struct Level {
    ref_idx: Vec<[f64; 3]>,
    ref_val: Vec<f64>,
    ref_affine: AffineMatrix,
    mov_inv: AffineMatrix,
    mov: Volume3D,
    min_overlap: usize,
}

impl Level {
    fn build(moving: &Volume3D, reference: &Volume3D, h: f64, fine: f64) -> Result<Level> {
        let ref_iso = iso_grid(reference.grid(), h)?;
        let mov_iso = iso_grid(moving.grid(), h)?;
        let sigma = SMOOTHING * h;
        let ref_data = prepare(
            &gaussian_smooth(reference, sigma),
            &ref_iso,
            slice_profile(moving.grid()),
            fine,
        );
        let mov_val = prepare(
            &gaussian_smooth(moving, sigma),
            &mov_iso,
            slice_profile(reference.grid()),
            fine,
        );
        let mut ref_idx = Vec::new();
        let mut ref_val = Vec::new();
        for (i, v) in ref_data.iter().enumerate() {
            if v.is_finite() {
                let [x, y, z] = ref_iso.unflatten(i);
                ref_idx.push([x as f64, y as f64, z as f64]);
                ref_val.push(*v);
            }
        }
        let n = ref_val.len();
        if n == 0 {
            return Err(Error::RegistrationFailed {
                reason: "reference has no valid samples".into(),
                cost: f64::NAN,
                overlap: 0,
            });
        }
        let mean = ref_val.iter().sum::<f64>() / n as f64;
        let var = ref_val.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
        let finite_mov: Vec<f64> = mov_val.iter().cloned().filter(|v| v.is_finite()).collect();
        let mm = finite_mov.iter().sum::<f64>() / finite_mov.len().max(1) as f64;
        let mvar = finite_mov.iter().map(|v| (v - mm).powi(2)).sum::<f64>() / finite_mov.len().max(1) as f64;
        if var < 1e-12 || mvar < 1e-12 {
            return Err(Error::RegistrationFailed {
                reason: "image has no intensity variation".into(),
                cost: f64::NAN,
                overlap: n,
            });
        }
        Ok(Level {
            ref_idx,
            ref_val,
            ref_affine: *ref_iso.affine(),
            mov_inv: *mov_iso.inverse_affine(),
            mov: Volume3D::new(mov_iso, mov_val)?,
            min_overlap: (n / 10).max(8),
        })
    }

    /// Differences `moving − reference` over all reference samples, or `None`
    /// when the overlap is too small.
    fn residuals(&self, t: &AffineMatrix) -> Option<Vec<f64>> {
        let a = self.mov_inv * *t * self.ref_affine;
        let mut n = 0;
        let r: Vec<f64> = self
            .ref_idx
            .iter()
            .zip(&self.ref_val)
            .map(|(p, r)| match lookup(&self.mov, a.transform_point(*p)) {
                Some(m) => {
                    n += 1;
                    m - r
                }
                None => -r,
            })
            .collect();
        (n >= self.min_overlap).then_some(r)
    }

    /// Mean squared difference over all reference samples and the overlap
    /// size for `t`. Samples that leave the moving footprint compare against
    /// background (0), so the normalisation does not depend on `t`.
    fn cost(&self, t: &AffineMatrix) -> (f64, usize) {
        let a = self.mov_inv * *t * self.ref_affine;
        let mut sum = 0.0;
        let mut n = 0;
        for (p, r) in self.ref_idx.iter().zip(&self.ref_val) {
            match lookup(&self.mov, a.transform_point(*p)) {
                Some(m) => {
                    sum += (m - r).powi(2);
                    n += 1;
                }
                None => sum += r * r,
            }
        }
        if n < self.min_overlap {
            return (f64::INFINITY, n);
        }
        (sum / self.ref_val.len() as f64, n)
    }
}

fn to_transform(x: &[f64; 6]) -> RigidTransform {
    RigidTransform::new([x[0], x[1], x[2]], [x[3], x[4], x[5]])
}

/// Finds `T` such that `moving(T q) ≈ reference(q)` for world points `q`,
/// with rotation about the reference centroid.
pub fn register_rigid(moving: &Volume3D, reference: &Volume3D) -> Result<RigidTransform> {
    register_rigid_about(
        moving,
        reference,
        reference.grid().centroid(),
        &RegistrationOptions::default(),
    )
}

/// [`register_rigid`] with an explicit rotation pivot and options.
pub fn register_rigid_about(
    moving: &Volume3D,
    reference: &Volume3D,
    pivot: [f64; 3],
    options: &RegistrationOptions,
) -> Result<RigidTransform> {
    if options.levels <= options.finest_level || !(options.step_tolerance > 0.0) || !(options.search_step_deg > 0.0) {
        return Err(invalid("registration needs levels > finest_level and positive steps"));
    }
    let fine = reference
        .spacing()
        .iter()
        .chain(moving.spacing().iter())
        .cloned()
        .fold(f64::INFINITY, f64::min);
    let levels: Vec<Level> = (options.finest_level..options.levels)
        .rev()
        .map(|l| Level::build(moving, reference, fine * (1u32 << l) as f64, fine))
        .collect::<Result<_>>()?;
    let eval = |level: &Level, x: &[f64; 6]| level.cost(&to_transform(x).as_affine_about(pivot));

    // coarse rotation search at the lowest resolution
    let coarse = &levels[0];
    let steps = (options.search_range_deg / options.search_step_deg).floor() as i64;
    let mut best = [0.0; 6];
    let mut best_cost = eval(coarse, &best).0;
    for a in -steps..=steps {
        for b in -steps..=steps {
            for c in -steps..=steps {
                let s = options.search_step_deg;
                let x = [a as f64 * s, b as f64 * s, c as f64 * s, 0.0, 0.0, 0.0];
                let (cost, _) = eval(coarse, &x);
                if cost < best_cost {
                    best_cost = cost;
                    best = x;
                }
            }
        }
    }
    if !best_cost.is_finite() {
        return Err(Error::RegistrationFailed {
            reason: "views do not overlap".into(),
            cost: best_cost,
            overlap: eval(coarse, &best).1,
        });
    }

    // coarse-to-fine refinement
    let mut x = best;
    let n_levels = levels.len();
    for (li, level) in levels.iter().enumerate() {
        let scale = (1u32 << (options.levels - 1 - li)) as f64;
        let last = li + 1 == n_levels;
        let tol = if last { options.step_tolerance } else { 0.02 * scale };
        let residuals = |p: &[f64; 6]| level.residuals(&to_transform(p).as_affine_about(pivot));
        match levenberg_marquardt(x, residuals, 0.05 * scale, tol, options.max_iterations) {
            Some((p, _)) => x = p,
            None => {
                let (cost, overlap) = eval(level, &x);
                return Err(Error::RegistrationFailed {
                    reason: "lost overlap during refinement".into(),
                    cost,
                    overlap,
                });
            }
        }
    }
    Ok(to_transform(&x))
}

/// Damped Gauss-Newton on a residual vector of fixed length, with a
/// central-difference Jacobian. Returns the parameters and the final sum of
/// squares, or `None` if the start point is infeasible.
fn levenberg_marquardt(
    x0: [f64; 6],
    residuals: impl Fn(&[f64; 6]) -> Option<Vec<f64>>,
    fd: f64,
    tol: f64,
    max_iterations: usize,
) -> Option<([f64; 6], f64)> {
    let sum_sq = |r: &[f64]| r.iter().map(|v| v * v).sum::<f64>();
    let mut x = x0;
    let mut r = residuals(&x)?;
    let mut cost = sum_sq(&r);
    let mut mu = 1e-3;
    let mut iter = 0;
    'outer: while iter < max_iterations {
        iter += 1;
        let mut jac: Vec<Vec<f64>> = Vec::with_capacity(6);
        for k in 0..6 {
            let (mut a, mut b) = (x, x);
            a[k] += fd;
            b[k] -= fd;
            let (Some(ra), Some(rb)) = (residuals(&a), residuals(&b)) else {
                break 'outer;
            };
            jac.push(ra.iter().zip(&rb).map(|(p, q)| (p - q) / (2.0 * fd)).collect());
        }
        let mut jtj = Matrix6::<f64>::zeros();
        let mut jtr = Vector6::<f64>::zeros();
        for a in 0..6 {
            jtr[a] = jac[a].iter().zip(&r).map(|(j, v)| j * v).sum();
            for b in a..6 {
                let v: f64 = jac[a].iter().zip(&jac[b]).map(|(p, q)| p * q).sum();
                jtj[(a, b)] = v;
                jtj[(b, a)] = v;
            }
        }
        loop {
            let mut damped = jtj;
            for a in 0..6 {
                damped[(a, a)] += mu * jtj[(a, a)].max(1e-12);
            }
            let Some(delta) = damped.cholesky().map(|c| c.solve(&(-jtr))) else {
                break 'outer;
            };
            let mut trial = x;
            for k in 0..6 {
                trial[k] += delta[k];
            }
            let small = delta.amax() < tol;
            if let Some(rt) = residuals(&trial) {
                let c = sum_sq(&rt);
                if c < cost {
                    x = trial;
                    r = rt;
                    cost = c;
                    mu = (mu * 0.3).max(1e-9);
                    if small {
                        break 'outer;
                    }
                    break;
                }
            }
            if small || mu > 1e8 {
                break 'outer;
            }
            mu *= 10.0;
        }
    }
    Some((x, cost))
}

/// Settings for [`register_views`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ViewRegistrationOptions {
    pub pairwise: RegistrationOptions,
    /// Alternations between the volume estimate and the per-view motions.
    pub rounds: usize,
    /// Regularisation and iteration cap for the intermediate volume estimate.
    pub lambda: f64,
    pub cg_iterations: usize,
}

impl Default for ViewRegistrationOptions {
    fn default() -> Self {
        ViewRegistrationOptions {
            pairwise: RegistrationOptions {
                finest_level: 1,
                ..RegistrationOptions::default()
            },
            rounds: 8,
            lambda: 1e-3,
            cg_iterations: 30,
        }
    }
}

/// Estimates a transform for each non-reference view (`moving(T q) ≈
/// reference(q)`, rotation about the centroid of `grid`), suitable for
/// [`apply_motion_correction`].
///
/// Pairwise registration to view 0 gives the starting point. The estimate is
/// then refined by alternating a regularised least-squares volume estimate
/// on `grid` with a per-view fit of the motion through the exact slice
/// profile, which removes the bias that the cross-blurred comparison has for
/// thick slices.
pub fn register_views(
    views: &[Volume3D],
    geoms: &[ViewGeometry],
    grid: &GridSpec,
    options: &ViewRegistrationOptions,
) -> Result<Vec<RigidTransform>> {
    if views.len() != geoms.len() || views.is_empty() {
        return Err(invalid("need one geometry per view and at least one view"));
    }
    let pivot = grid.centroid();
    // correction applied on top of each view's recorded motion; view 0 is
    // fitted too and the common part removed afterwards
    let mut corrections: Vec<RigidTransform> = std::iter::once(Ok(RigidTransform::identity()))
        .chain(
            views[1..]
                .par_iter()
                .zip(&geoms[1..])
                .map(|(v, g)| {
                    let t = register_rigid_about(v, &views[0], pivot, &options.pairwise)?;
                    let recorded = g.motion.unwrap_or_default();
                    Ok(t.inverse().compose(&recorded.inverse()))
                })
                .collect::<Vec<_>>(),
        )
        .collect::<Result<_>>()?;
    let cfg = LsSrrConfig {
        lambda: options.lambda,
        max_iterations: options.cg_iterations.max(1),
        tolerance: 1e-9,
    };
    let total = |c: &[RigidTransform]| -> Vec<RigidTransform> {
        c.iter()
            .zip(geoms)
            .map(|(c, g)| c.compose(&g.motion.unwrap_or_default()))
            .collect()
    };
    for _ in 0..options.rounds {
        let current: Vec<ViewGeometry> = geoms
            .iter()
            .zip(total(&corrections))
            .map(|(g, m)| g.with_motion(Some(m)))
            .collect();
        let estimate = match ls_srr(views, &current, grid, &cfg) {
            Ok(o) => o.volume,
            Err(Error::SolverFailed { .. }) => break,
            Err(e) => return Err(e),
        };
        let fitted: Vec<[f64; 6]> = views
            .iter()
            .zip(geoms)
            .zip(&corrections)
            .enumerate()
            .map(|(v, ((lr, g), c))| {
                let recorded = g.motion.unwrap_or_default();
                let residuals = |p: &[f64; 6]| {
                    let m = to_transform(p).compose(&recorded);
                    let op = ViewOperator::new(grid, lr.grid(), g.slice_factor, Some(&m)).ok()?;
                    let mut r = op.forward(estimate.data());
                    for (a, b) in r.iter_mut().zip(lr.data()) {
                        *a -= b;
                    }
                    Some(r)
                };
                let x0 = params(c);
                levenberg_marquardt(x0, residuals, 0.02, options.pairwise.step_tolerance, 20)
                    .map(|(x, _)| x)
                    .ok_or_else(|| Error::RegistrationFailed {
                        reason: format!("view {v} left the reconstruction grid"),
                        cost: f64::NAN,
                        overlap: 0,
                    })
            })
            .collect::<Result<_>>()?;
        // re-express every view relative to view 0, which defines the frame
        let totals = total(&fitted.iter().map(to_transform).collect::<Vec<_>>());
        let frame = totals[0].inverse();
        let mut largest = 0.0f64;
        for ((c, g), m) in corrections.iter_mut().zip(geoms).zip(&totals) {
            let rel = frame.compose(m).compose(&g.motion.unwrap_or_default().inverse());
            largest = params(&rel)
                .iter()
                .zip(&params(c))
                .map(|(a, b)| (a - b).abs())
                .fold(largest, f64::max);
            *c = rel;
        }
        if largest < options.pairwise.step_tolerance {
            break;
        }
    }
    Ok(total(&corrections)[1..].iter().map(|m| m.inverse()).collect())
}

fn params(t: &RigidTransform) -> [f64; 6] {
    let [a, b, c] = t.angles_deg;
    let [x, y, z] = t.translation_mm;
    [a, b, c, x, y, z]
}

/// Applies per-view registration results (`moving(T q) ≈ reference(q)`) to
/// a job. `transforms[i]` belongs to view `i + 1`; view 0 is the reference.
pub fn apply_motion_correction(job: &ReconJob, transforms: &[RigidTransform]) -> Result<ReconJob> {
    if transforms.len() + 1 != job.views.len() {
        return Err(invalid(format!(
            "expected {} transforms for the non-reference views, got {}",
            job.views.len().saturating_sub(1),
            transforms.len()
        )));
    }
    let mut out = job.clone();
    for (g, t) in out.geometries.iter_mut().skip(1).zip(transforms) {
        if t.is_identity() {
            continue;
        }
        // the view saw the object displaced by T⁻¹
        let m = t.inverse();
        g.motion = Some(match &g.motion {
            Some(existing) => m.compose(existing),
            None => m,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forward::{lr_grid_for_view, simulate_views, AcquisitionSpec};
    use crate::model::FieldConfig;
    use crate::phantom::phantom;
    use crate::trainer::TrainConfig;

    /// The phantom seen through a factor-1 view with motion `m`.
    fn moved(truth: &Volume3D, m: Option<RigidTransform>) -> Volume3D {
        let g = ViewGeometry::about_centroid(0.0, 1, truth.grid())
            .unwrap()
            .with_motion(m);
        let spec = AcquisitionSpec {
            views: vec![g],
            in_plane_spacing: 1.0,
            slice_factor: 1,
            noise_snr: None,
            seed: 0,
        };
        simulate_views(truth, &spec).unwrap().remove(0)
    }

    #[test]
    fn self_registration_is_identity() {
        let p = phantom(32).unwrap();
        let t = register_rigid(&p, &p).unwrap();
        assert!(
            t.angles_deg.iter().chain(&t.translation_mm).all(|v| v.abs() < 1e-3),
            "{t:?}"
        );
    }

    #[test]
    fn recovers_rotation() {
        let p = phantom(40).unwrap();
        let m = RigidTransform::new([0.0, 5.0, 0.0], [0.0; 3]);
        let t = register_rigid(&moved(&p, Some(m)), &p).unwrap();
        let err = t.inverse().rotation_distance_deg(&m);
        assert!(err < 0.1, "{t:?} error {err}°");
    }

    #[test]
    fn recovers_translation() {
        let p = phantom(32).unwrap();
        let m = RigidTransform::new([0.0; 3], [3.0, 0.0, 0.0]);
        let t = register_rigid(&moved(&p, Some(m)), &p).unwrap().inverse();
        let d: f64 = (0..3)
            .map(|a| (t.translation_mm[a] - m.translation_mm[a]).powi(2))
            .sum::<f64>()
            .sqrt();
        assert!(d < 0.1, "{t:?}");
    }

    #[test]
    fn flat_images_fail() {
        let g = GridSpec::centered([12; 3], [1.0; 3]).unwrap();
        let flat = Volume3D::filled(g, 0.5);
        assert!(matches!(
            register_rigid(&flat, &flat),
            Err(Error::RegistrationFailed { .. })
        ));
    }

    #[test]
    fn disjoint_views_fail() {
        let p = phantom(16).unwrap();
        let far = GridSpec::new(
            [16; 3],
            [1.0; 3],
            AffineMatrix::translation([500.0, 0.0, 0.0]) * *p.grid().affine(),
        )
        .unwrap();
        let q = Volume3D::new(far, p.data().to_vec()).unwrap();
        assert!(matches!(register_rigid(&q, &p), Err(Error::RegistrationFailed { .. })));
    }

    fn job_for(spec: &AcquisitionSpec, grid: &GridSpec) -> ReconJob {
        let truth = Volume3D::filled(grid.clone(), 0.5);
        ReconJob {
            views: simulate_views(&truth, spec).unwrap(),
            geometries: spec.views.clone(),
            field: FieldConfig::default(),
            train: TrainConfig::default(),
            output: grid.clone(),
        }
    }

    #[test]
    fn identity_correction_leaves_job_unchanged() {
        let grid = GridSpec::centered([8; 3], [1.0; 3]).unwrap();
        let spec = AcquisitionSpec::rotating(&grid, 3, 60.0, 2).unwrap();
        let job = job_for(&spec, &grid);
        let out = apply_motion_correction(&job, &[RigidTransform::identity(); 2]).unwrap();
        assert_eq!(out.geometries, job.geometries);
        assert!(apply_motion_correction(&job, &[RigidTransform::identity(); 3]).is_err());
    }

    #[test]
    fn inverse_of_injected_motion_restores_sampling() {
        let grid = GridSpec::centered([8; 3], [1.0; 3]).unwrap();
        let spec = AcquisitionSpec::rotating(&grid, 2, 45.0, 2).unwrap();
        let job = job_for(&spec, &grid);
        let m = RigidTransform::new([3.0, -7.0, 10.0], [0.5, -1.0, 2.0]);
        let corrected = apply_motion_correction(&job, &[m.inverse()]).unwrap();
        let lr = lr_grid_for_view(&grid, &spec.views[1], &spec).unwrap();
        let truth = ViewOperator::new(&grid, &lr, 2, Some(&m)).unwrap();
        let ours = ViewOperator::new(&grid, &lr, 2, corrected.geometries[1].motion.as_ref()).unwrap();
        let (mut a, mut b) = ([[0.0; 3]; 2], [[0.0; 3]; 2]);
        for idx in 0..lr.num_voxels() {
            truth.sample_indices(idx, &mut a);
            ours.sample_indices(idx, &mut b);
            for (p, q) in a.iter().zip(&b) {
                for k in 0..3 {
                    assert!((p[k] - q[k]).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn compose_with_inverse_is_identity() {
        let t = RigidTransform::new([4.0, -9.0, 2.5], [1.0, 2.0, -3.0]);
        let id = t.compose(&t.inverse());
        let p = [3.0, -2.0, 7.0];
        let a = id.as_affine_about([1.0, 1.0, 1.0]).transform_point(p);
        for k in 0..3 {
            assert!((a[k] - p[k]).abs() < 1e-10);
        }
    }

    #[test]
    fn joint_refinement_recovers_thick_slice_motion() {
        let p = phantom(32).unwrap();
        let mut spec = AcquisitionSpec::rotating(p.grid(), 4, 45.0, 3).unwrap();
        let m = RigidTransform::new([0.0, 0.0, 4.0], [0.5, 0.0, 0.0]);
        spec.views[2].motion = Some(m);
        let views = simulate_views(&p, &spec).unwrap();
        let geoms: Vec<ViewGeometry> = spec.views.iter().map(|g| g.with_motion(None)).collect();
        let ts = register_views(&views, &geoms, p.grid(), &ViewRegistrationOptions::default()).unwrap();
        assert_eq!(ts.len(), 3);
        for (v, t) in ts.iter().enumerate() {
            let truth = spec.views[v + 1].motion.unwrap_or_default();
            let err = t.inverse().rotation_distance_deg(&truth);
            assert!(err < 0.1, "view {}: {t:?} error {err}°", v + 1);
        }
    }
}
