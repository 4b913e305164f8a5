//! Volumes, voxel grids and the coordinate mappings every other module builds on.
//!
//! Voxel data are stored with x varying fastest. A grid's affine maps continuous
//! voxel indices `(i, j, k)` to world millimetres; index `(0, 0, 0)` is the centre
//! of the first voxel. Views rotate about the first (x, phase-encode) axis.

use std::f64::consts::FRAC_PI_2;
use std::ops::Mul;

use nalgebra::{Matrix3, Matrix4, Vector3, Vector4};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// Homogeneous 4×4 transform.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AffineMatrix(Matrix4<f64>);

impl AffineMatrix {
    pub fn identity() -> Self {
        AffineMatrix(Matrix4::identity())
    }

    pub fn from_rows(rows: [[f64; 4]; 4]) -> Self {
        AffineMatrix(Matrix4::from_fn(|r, c| rows[r][c]))
    }

    pub fn from_matrix(m: Matrix4<f64>) -> Self {
        AffineMatrix(m)
    }

    /// Builds `p ↦ linear · p + translation`.
    pub fn from_linear(linear: Matrix3<f64>, translation: [f64; 3]) -> Self {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&linear);
        for r in 0..3 {
            m[(r, 3)] = translation[r];
        }
        AffineMatrix(m)
    }

    pub fn translation(t: [f64; 3]) -> Self {
        Self::from_linear(Matrix3::identity(), t)
    }

    pub fn scaling(s: [f64; 3]) -> Self {
        Self::from_linear(Matrix3::from_diagonal(&Vector3::from(s)), [0.0; 3])
    }

    pub fn matrix(&self) -> &Matrix4<f64> {
        &self.0
    }

    pub fn to_rows(&self) -> [[f64; 4]; 4] {
        let mut rows = [[0.0; 4]; 4];
        for (r, row) in rows.iter_mut().enumerate() {
            for (c, v) in row.iter_mut().enumerate() {
                *v = self.0[(r, c)];
            }
        }
        rows
    }

    /// Upper-left 3×3 block.
    pub fn linear(&self) -> Matrix3<f64> {
        self.0.fixed_view::<3, 3>(0, 0).into_owned()
    }

    pub fn translation_part(&self) -> [f64; 3] {
        [self.0[(0, 3)], self.0[(1, 3)], self.0[(2, 3)]]
    }

    /// Applies the transform to a point, dividing by the homogeneous coordinate.
    #[inline]
    pub fn transform_point(&self, p: [f64; 3]) -> [f64; 3] {
        let v = self.0 * Vector4::new(p[0], p[1], p[2], 1.0);
        let w = v[3];
        if w == 1.0 {
            [v[0], v[1], v[2]]
        } else {
            [v[0] / w, v[1] / w, v[2] / w]
        }
    }

    pub fn inverse(&self) -> Result<Self> {
        self.0
            .try_inverse()
            .map(AffineMatrix)
            .ok_or_else(|| invalid("affine matrix is singular"))
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &AffineMatrix) -> AffineMatrix {
        AffineMatrix(self.0 * other.0)
    }
}

impl Mul for AffineMatrix {
    type Output = AffineMatrix;

    fn mul(self, rhs: AffineMatrix) -> AffineMatrix {
        AffineMatrix(self.0 * rhs.0)
    }
}

/// Shape, spacing and placement of a voxel grid, without data.
#[derive(Debug, Clone, PartialEq)]
pub struct GridSpec {
    dims: [usize; 3],
    spacing: [f64; 3],
    affine: AffineMatrix,
    inverse: AffineMatrix,
}

impl GridSpec {
    pub fn new(dims: [usize; 3], spacing: [f64; 3], affine: AffineMatrix) -> Result<Self> {
        if dims.contains(&0) {
            return Err(invalid(format!("grid dims must be >= 1, got {dims:?}")));
        }
        if spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(invalid(format!("grid spacing must be > 0, got {spacing:?}")));
        }
        if affine.linear().determinant().abs() < 1e-300 {
            return Err(invalid("grid affine has a singular 3x3 block"));
        }
        let inverse = affine.inverse()?;
        Ok(GridSpec {
            dims,
            spacing,
            affine,
            inverse,
        })
    }

    /// Axis-aligned grid whose voxel-centre centroid sits at the world origin.
    pub fn centered(dims: [usize; 3], spacing: [f64; 3]) -> Result<Self> {
        let t = [
            -(dims[0] as f64 - 1.0) * 0.5 * spacing[0],
            -(dims[1] as f64 - 1.0) * 0.5 * spacing[1],
            -(dims[2] as f64 - 1.0) * 0.5 * spacing[2],
        ];
        let affine = AffineMatrix::translation(t) * AffineMatrix::scaling(spacing);
        GridSpec::new(dims, spacing, affine)
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn affine(&self) -> &AffineMatrix {
        &self.affine
    }

    /// World → continuous voxel index.
    pub fn inverse_affine(&self) -> &AffineMatrix {
        &self.inverse
    }

    pub fn num_voxels(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    #[inline]
    pub fn flat_index(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.dims[0] * (j + self.dims[1] * k)
    }

    #[inline]
    pub fn unflatten(&self, idx: usize) -> [usize; 3] {
        let i = idx % self.dims[0];
        let rest = idx / self.dims[0];
        [i, rest % self.dims[1], rest / self.dims[1]]
    }

    #[inline]
    pub fn voxel_to_world(&self, index: [f64; 3]) -> [f64; 3] {
        self.affine.transform_point(index)
    }

    #[inline]
    pub fn world_to_voxel(&self, p: [f64; 3]) -> [f64; 3] {
        self.inverse.transform_point(p)
    }

    /// World position of the centre of the voxel block.
    pub fn centroid(&self) -> [f64; 3] {
        self.voxel_to_world([
            (self.dims[0] as f64 - 1.0) * 0.5,
            (self.dims[1] as f64 - 1.0) * 0.5,
            (self.dims[2] as f64 - 1.0) * 0.5,
        ])
    }

    /// Unit direction cosines of the voxel axes (columns).
    pub fn direction(&self) -> Matrix3<f64> {
        let mut d = self.affine.linear();
        for c in 0..3 {
            let n = d.column(c).norm();
            d.column_mut(c).scale_mut(1.0 / n);
        }
        d
    }

    /// True when `index` lies inside the voxel footprint `[-0.5, n - 0.5]` on every axis.
    pub fn contains_index(&self, index: [f64; 3]) -> bool {
        (0..3).all(|a| index[a] >= -0.5 && index[a] <= self.dims[a] as f64 - 0.5)
    }

    /// Continuous voxel index → normalized coordinate in `[0, 1]^3` (clamped).
    #[inline]
    pub fn normalized(&self, index: [f64; 3]) -> [f64; 3] {
        let mut u = [0.5; 3];
        for a in 0..3 {
            if self.dims[a] > 1 {
                u[a] = (index[a] / (self.dims[a] - 1) as f64).clamp(0.0, 1.0);
            }
        }
        u
    }
}

/// Dense scalar volume.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume3D {
    grid: GridSpec,
    data: Vec<f64>,
    intensity_range: Option<(f64, f64)>,
}

impl Volume3D {
    pub fn new(grid: GridSpec, data: Vec<f64>) -> Result<Self> {
        if data.len() != grid.num_voxels() {
            return Err(invalid(format!(
                "data length {} does not match dims {:?}",
                data.len(),
                grid.dims()
            )));
        }
        Ok(Volume3D {
            grid,
            data,
            intensity_range: None,
        })
    }

    pub fn filled(grid: GridSpec, value: f64) -> Self {
        let n = grid.num_voxels();
        Volume3D {
            grid,
            data: vec![value; n],
            intensity_range: None,
        }
    }

    pub fn from_fn(grid: GridSpec, mut f: impl FnMut(usize, usize, usize) -> f64) -> Self {
        let [nx, ny, nz] = grid.dims();
        let mut data = Vec::with_capacity(grid.num_voxels());
        for k in 0..nz {
            for j in 0..ny {
                for i in 0..nx {
                    data.push(f(i, j, k));
                }
            }
        }
        Volume3D {
            grid,
            data,
            intensity_range: None,
        }
    }

    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    pub fn dims(&self) -> [usize; 3] {
        self.grid.dims()
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.grid.spacing()
    }

    pub fn affine(&self) -> &AffineMatrix {
        self.grid.affine()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize) -> f64 {
        self.data[self.grid.flat_index(i, j, k)]
    }

    /// Intensity range recorded by [`Volume3D::normalize_to_unit`], if any.
    pub fn intensity_range(&self) -> Option<(f64, f64)> {
        self.intensity_range
    }

    pub fn set_intensity_range(&mut self, range: Option<(f64, f64)>) {
        self.intensity_range = range;
    }

    pub fn min_max(&self) -> (f64, f64) {
        self.data
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            })
    }

    /// Rescales the data to `[0, 1]` and records the original range.
    /// A flat volume maps to all zeros.
    pub fn normalize_to_unit(&mut self) {
        let (lo, hi) = self.min_max();
        let span = hi - lo;
        for v in &mut self.data {
            *v = if span > 0.0 {
                ((*v - lo) / span).clamp(0.0, 1.0)
            } else {
                0.0
            };
        }
        self.intensity_range = Some((lo, hi));
    }

    /// Same grid, new data.
    pub fn with_data(&self, data: Vec<f64>) -> Result<Volume3D> {
        let mut v = Volume3D::new(self.grid.clone(), data)?;
        v.intensity_range = self.intensity_range;
        Ok(v)
    }
}

/// Rigid motion: rotation about a pivot followed by translation,
/// `p ↦ R (p − c) + c + t` with `R = Rx · Ry · Rz` (intrinsic x → y → z).
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RigidTransform {
    pub angles_deg: [f64; 3],
    pub translation_mm: [f64; 3],
}

impl RigidTransform {
    pub fn identity() -> Self {
        Self::default()
    }

    pub fn new(angles_deg: [f64; 3], translation_mm: [f64; 3]) -> Self {
        RigidTransform {
            angles_deg,
            translation_mm,
        }
    }

    pub fn is_identity(&self) -> bool {
        self.angles_deg == [0.0; 3] && self.translation_mm == [0.0; 3]
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        axis_rotation(0, self.angles_deg[0].to_radians())
            * axis_rotation(1, self.angles_deg[1].to_radians())
            * axis_rotation(2, self.angles_deg[2].to_radians())
    }

    /// Recovers angles from a rotation matrix built as `Rx · Ry · Rz`.
    pub fn from_rotation_translation(r: &Matrix3<f64>, translation_mm: [f64; 3]) -> Self {
        let b = r[(0, 2)].clamp(-1.0, 1.0).asin();
        let a = (-r[(1, 2)]).atan2(r[(2, 2)]);
        let c = (-r[(0, 1)]).atan2(r[(0, 0)]);
        RigidTransform {
            angles_deg: [a.to_degrees(), b.to_degrees(), c.to_degrees()],
            translation_mm,
        }
    }

    pub fn as_affine_about(&self, pivot: [f64; 3]) -> AffineMatrix {
        let r = self.rotation_matrix();
        let c = Vector3::from(pivot);
        let t = Vector3::from(self.translation_mm) + c - r * c;
        AffineMatrix::from_linear(r, [t[0], t[1], t[2]])
    }

    /// Rotation about the world origin.
    pub fn as_affine(&self) -> AffineMatrix {
        self.as_affine_about([0.0; 3])
    }

    /// `self ∘ other` about a shared pivot (`other` applies first).
    pub fn compose(&self, other: &RigidTransform) -> RigidTransform {
        let r1 = self.rotation_matrix();
        let t = r1 * Vector3::from(other.translation_mm) + Vector3::from(self.translation_mm);
        RigidTransform::from_rotation_translation(&(r1 * other.rotation_matrix()), [t[0], t[1], t[2]])
    }

    /// Angle of the rotation taking `self` to `other`, degrees.
    pub fn rotation_distance_deg(&self, other: &RigidTransform) -> f64 {
        let d = self.rotation_matrix().transpose() * other.rotation_matrix();
        ((d.trace() - 1.0) / 2.0).clamp(-1.0, 1.0).acos().to_degrees()
    }

    /// Inverse about the same pivot.
    pub fn inverse(&self) -> RigidTransform {
        let rt = self.rotation_matrix().transpose();
        let t = -(rt * Vector3::from(self.translation_mm));
        RigidTransform::from_rotation_translation(&rt, [t[0], t[1], t[2]])
    }
}

/// Rotation by `rad` about coordinate axis `axis` (0 = x, 1 = y, 2 = z).
pub fn axis_rotation(axis: usize, rad: f64) -> Matrix3<f64> {
    let (s, c) = rad.sin_cos();
    match axis {
        0 => Matrix3::new(1.0, 0.0, 0.0, 0.0, c, -s, 0.0, s, c),
        1 => Matrix3::new(c, 0.0, s, 0.0, 1.0, 0.0, -s, 0.0, c),
        _ => Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0),
    }
}

/// One thick-slice acquisition.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ViewGeometry {
    /// Rotation about the x (phase-encode) axis, degrees in `[0, 360)`.
    pub angle_deg: f64,
    /// Rotation centre `(c_y, c_z)` in mm.
    pub center: [f64; 2],
    /// Through-plane / in-plane spacing ratio.
    pub slice_factor: usize,
    /// Homogeneous scale in the bottom-right corner of the view affine.
    #[serde(default = "one")]
    pub scale: f64,
    /// Rigid displacement of the object during this view, about the
    /// reconstruction grid's centroid.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub motion: Option<RigidTransform>,
}

fn one() -> f64 {
    1.0
}

impl ViewGeometry {
    pub fn new(angle_deg: f64, center: [f64; 2], slice_factor: usize) -> Result<Self> {
        let g = ViewGeometry {
            angle_deg: angle_deg.rem_euclid(360.0),
            center,
            slice_factor,
            scale: 1.0,
            motion: None,
        };
        g.validate()?;
        Ok(g)
    }

    /// View rotating about the `(y, z)` centroid of `grid`.
    pub fn about_centroid(angle_deg: f64, slice_factor: usize, grid: &GridSpec) -> Result<Self> {
        let c = grid.centroid();
        ViewGeometry::new(angle_deg, [c[1], c[2]], slice_factor)
    }

    pub fn with_motion(mut self, motion: Option<RigidTransform>) -> Self {
        self.motion = motion;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.slice_factor < 1 {
            return Err(invalid("slice_factor must be >= 1"));
        }
        if !(0.0..360.0).contains(&self.angle_deg) {
            return Err(invalid(format!(
                "angle_deg must lie in [0, 360), got {}",
                self.angle_deg
            )));
        }
        if !(self.scale > 0.0) {
            return Err(invalid("scale must be > 0"));
        }
        Ok(())
    }
}

/// Smallest number of rotated views that samples the slice direction densely
/// enough for an isotropic reconstruction: `ceil(π/2 · anisotropy)`.
pub fn min_rotations(anisotropy: f64) -> Result<usize> {
    if !(anisotropy >= 1.0) || !anisotropy.is_finite() {
        return Err(invalid(format!("anisotropy must be >= 1, got {anisotropy}")));
    }
    Ok((FRAC_PI_2 * anisotropy).ceil() as usize)
}

/// Rotation about the x axis through `(c_y, c_z)`, with the view's scale in
/// the homogeneous corner.
pub fn view_affine(geom: &ViewGeometry) -> AffineMatrix {
    let a = geom.angle_deg.to_radians();
    let (s, c) = a.sin_cos();
    let [cy, cz] = geom.center;
    AffineMatrix::from_rows([
        [1.0, 0.0, 0.0, 0.0],
        [0.0, c, -s, cy * (1.0 - c) + cz * s],
        [0.0, s, c, cz * (1.0 - c) - cy * s],
        [0.0, 0.0, 0.0, geom.scale],
    ])
}

pub fn voxel_to_world(vol: &Volume3D, index: [f64; 3]) -> [f64; 3] {
    vol.grid().voxel_to_world(index)
}

/// The eight `(flat index, weight)` pairs of a trilinear lookup at a
/// continuous voxel index. Coordinates are clamped to the grid, so samples
/// outside take the boundary value.
#[inline]
pub(crate) fn trilinear_stencil(dims: [usize; 3], index: [f64; 3]) -> [(usize, f64); 8] {
    let mut lo = [0usize; 3];
    let mut hi = [0usize; 3];
    let mut t = [0.0f64; 3];
    for a in 0..3 {
        let n = dims[a];
        if n == 1 {
            continue;
        }
        let c = if index[a].is_nan() {
            0.0
        } else {
            index[a].clamp(0.0, (n - 1) as f64)
        };
        let i0 = (c.floor() as usize).min(n - 2);
        lo[a] = i0;
        hi[a] = i0 + 1;
        t[a] = c - i0 as f64;
    }
    let sx = 1;
    let sy = dims[0];
    let sz = dims[0] * dims[1];
    let mut out = [(0usize, 0.0f64); 8];
    let mut n = 0;
    for (kz, wz) in [(lo[2], 1.0 - t[2]), (hi[2], t[2])] {
        for (ky, wy) in [(lo[1], 1.0 - t[1]), (hi[1], t[1])] {
            for (kx, wx) in [(lo[0], 1.0 - t[0]), (hi[0], t[0])] {
                out[n] = (kx * sx + ky * sy + kz * sz, wx * wy * wz);
                n += 1;
            }
        }
    }
    out
}

#[inline]
pub(crate) fn trilinear_at_index(dims: [usize; 3], data: &[f64], index: [f64; 3]) -> f64 {
    trilinear_stencil(dims, index).iter().map(|&(i, w)| w * data[i]).sum()
}

/// Trilinear interpolation of `vol` at world points; outside points take the
/// boundary-clamped value.
pub fn resample_trilinear(vol: &Volume3D, world_points: &[[f64; 3]]) -> Vec<f64> {
    let dims = vol.dims();
    world_points
        .iter()
        .map(|&p| trilinear_at_index(dims, vol.data(), vol.grid().world_to_voxel(p)))
        .collect()
}

/// Catmull-Rom weights for taps at offsets −1, 0, 1, 2.
#[inline]
fn catmull_rom(t: f64) -> [f64; 4] {
    let t2 = t * t;
    let t3 = t2 * t;
    [
        0.5 * (-t3 + 2.0 * t2 - t),
        0.5 * (3.0 * t3 - 5.0 * t2 + 2.0),
        0.5 * (-3.0 * t3 + 4.0 * t2 + t),
        0.5 * (t3 - t2),
    ]
}

/// Per-axis cubic weights folded onto in-range indices. Taps beyond the grid
/// are linear extrapolations of the two nearest samples, so affine data are
/// reproduced exactly everywhere.
#[inline]
fn cubic_axis(n: usize, x: f64) -> ([usize; 4], [f64; 4], usize) {
    let mut idx = [0usize; 4];
    let mut w = [0.0f64; 4];
    if n == 1 {
        w[0] = 1.0;
        return (idx, w, 1);
    }
    let base = x.floor();
    let t = x - base;
    let cw = catmull_rom(t);
    let base = base as i64;
    let mut count = 0usize;
    let mut add = |i: usize, v: f64, idx: &mut [usize; 4], w: &mut [f64; 4]| {
        for s in 0..count {
            if idx[s] == i {
                w[s] += v;
                return;
            }
        }
        idx[count] = i;
        w[count] = v;
        count += 1;
    };
    let last = (n - 1) as i64;
    for (o, &c) in cw.iter().enumerate() {
        let i = base - 1 + o as i64;
        if i < 0 {
            let d = -i as f64;
            add(0, c * (1.0 + d), &mut idx, &mut w);
            add(1, -c * d, &mut idx, &mut w);
        } else if i > last {
            let d = (i - last) as f64;
            add(last as usize, c * (1.0 + d), &mut idx, &mut w);
            add(last as usize - 1, -c * d, &mut idx, &mut w);
        } else {
            add(i as usize, c, &mut idx, &mut w);
        }
    }
    (idx, w, count)
}

/// Catmull-Rom tricubic interpolation at a continuous voxel index.
pub fn tricubic_at_index(vol: &Volume3D, index: [f64; 3]) -> f64 {
    let dims = vol.dims();
    let data = vol.data();
    let (ix, wx, nx) = cubic_axis(dims[0], index[0]);
    let (iy, wy, ny) = cubic_axis(dims[1], index[1]);
    let (iz, wz, nz) = cubic_axis(dims[2], index[2]);
    let mut acc = 0.0;
    for c in 0..nz {
        let zoff = iz[c] * dims[0] * dims[1];
        let mut plane = 0.0;
        for b in 0..ny {
            let off = zoff + iy[b] * dims[0];
            let mut row = 0.0;
            for a in 0..nx {
                row += wx[a] * data[off + ix[a]];
            }
            plane += wy[b] * row;
        }
        acc += wz[c] * plane;
    }
    acc
}

/// Tricubic interpolation at world points.
pub fn resample_tricubic(vol: &Volume3D, world_points: &[[f64; 3]]) -> Vec<f64> {
    world_points
        .iter()
        .map(|&p| tricubic_at_index(vol, vol.grid().world_to_voxel(p)))
        .collect()
}

pub(crate) fn check_same_grid(a: &GridSpec, b: &GridSpec) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::InvalidArgument(format!(
            "grid mismatch: {:?} vs {:?}",
            a.dims(),
            b.dims()
        )));
    }
    Ok(())
}
