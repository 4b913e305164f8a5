//! The thick-slice acquisition operator: rotate, box-average across the slice
//! thickness, and sample onto the low-resolution grid. Also its exact adjoint,
//! Gaussian noise injection and multi-view simulation.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::geometry::{trilinear_stencil, view_affine, AffineMatrix, GridSpec, RigidTransform, ViewGeometry, Volume3D};

/// A multi-view thick-slice protocol.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AcquisitionSpec {
    pub views: Vec<ViewGeometry>,
    /// In-plane voxel size of every view, mm.
    pub in_plane_spacing: f64,
    pub slice_factor: usize,
    /// `None` disables noise.
    pub noise_snr: Option<f64>,
    pub seed: u64,
}

impl AcquisitionSpec {
    /// `count` views at multiples of `angle_step_deg`, rotating about the
    /// centroid of `hr`, with in-plane spacing equal to the finest HR spacing.
    pub fn rotating(hr: &GridSpec, count: usize, angle_step_deg: f64, slice_factor: usize) -> Result<Self> {
        let views = (0..count)
            .map(|v| ViewGeometry::about_centroid(v as f64 * angle_step_deg, slice_factor, hr))
            .collect::<Result<Vec<_>>>()?;
        let spacing = hr.spacing().iter().cloned().fold(f64::INFINITY, f64::min);
        let spec = AcquisitionSpec {
            views,
            in_plane_spacing: spacing,
            slice_factor,
            noise_snr: None,
            seed: 0,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.views.is_empty() {
            return Err(invalid("acquisition needs at least one view"));
        }
        if self.slice_factor < 1 {
            return Err(invalid("slice_factor must be >= 1"));
        }
        if !(self.in_plane_spacing > 0.0) {
            return Err(invalid("in_plane_spacing must be > 0"));
        }
        if let Some(snr) = self.noise_snr {
            if !(snr > 0.0) {
                return Err(invalid("noise_snr must be > 0"));
            }
        }
        for (i, g) in self.views.iter().enumerate() {
            g.validate()?;
            if g.slice_factor != self.slice_factor {
                return Err(invalid(format!(
                    "view {i} has slice_factor {} but the acquisition uses {}",
                    g.slice_factor, self.slice_factor
                )));
            }
        }
        Ok(())
    }
}

/// Low-resolution grid of one view: it covers the HR field of view, is
/// centred on the HR centroid, and is rotated by the view affine.
pub fn lr_grid_for_view(hr: &GridSpec, geom: &ViewGeometry, spec: &AcquisitionSpec) -> Result<GridSpec> {
    geom.validate()?;
    let s = spec.in_plane_spacing;
    if !(s > 0.0) {
        return Err(invalid("in_plane_spacing must be > 0"));
    }
    let hd = hr.dims();
    let hs = hr.spacing();
    let thick = s * geom.slice_factor as f64;
    let dims = [
        ((hd[0] as f64 * hs[0] / s).round() as usize).max(1),
        ((hd[1] as f64 * hs[1] / s).round() as usize).max(1),
        ((hd[2] as f64 * hs[2] / thick - 1e-9).ceil() as usize).max(1),
    ];
    let spacing = [s, s, thick];
    let centre = AffineMatrix::translation([
        -(dims[0] as f64 - 1.0) * 0.5,
        -(dims[1] as f64 - 1.0) * 0.5,
        -(dims[2] as f64 - 1.0) * 0.5,
    ]);
    let native = AffineMatrix::translation(hr.centroid())
        * AffineMatrix::from_linear(hr.direction(), [0.0; 3])
        * AffineMatrix::scaling(spacing)
        * centre;
    GridSpec::new(dims, spacing, view_affine(geom) * native)
}

/// Sparse linear map from an HR grid to one LR view.
///
/// Each LR voxel averages `slice_factor` trilinear samples spaced evenly along
/// its slice normal, spanning exactly one slice thickness. The optional motion
/// displaces the sample positions about the HR centroid.
#[derive(Debug, Clone)]
pub struct ViewOperator {
    hr_dims: [usize; 3],
    lr_dims: [usize; 3],
    lr_to_hr: AffineMatrix,
    offsets: Vec<f64>,
}

impl ViewOperator {
    pub fn new(hr: &GridSpec, lr: &GridSpec, slice_factor: usize, motion: Option<&RigidTransform>) -> Result<Self> {
        if slice_factor < 1 {
            return Err(invalid("slice_factor must be >= 1"));
        }
        let moved = match motion {
            Some(m) => m.as_affine_about(hr.centroid()) * *lr.affine(),
            None => *lr.affine(),
        };
        let lr_to_hr = *hr.inverse_affine() * moved;
        let offsets = (0..slice_factor)
            .map(|m| (m as f64 + 0.5) / slice_factor as f64 - 0.5)
            .collect();
        let op = ViewOperator {
            hr_dims: hr.dims(),
            lr_dims: lr.dims(),
            lr_to_hr,
            offsets,
        };
        let overlap = (0..lr.num_voxels()).any(|idx| {
            let [i, j, k] = lr.unflatten(idx);
            hr.contains_index(lr_to_hr.transform_point([i as f64, j as f64, k as f64]))
        });
        if !overlap {
            return Err(Error::DegenerateGeometry(
                "rotated low-resolution grid does not overlap the high-resolution grid".into(),
            ));
        }
        Ok(op)
    }

    pub fn hr_dims(&self) -> [usize; 3] {
        self.hr_dims
    }

    pub fn lr_dims(&self) -> [usize; 3] {
        self.lr_dims
    }

    pub fn lr_len(&self) -> usize {
        self.lr_dims.iter().product()
    }

    pub fn hr_len(&self) -> usize {
        self.hr_dims.iter().product()
    }

    pub fn slice_factor(&self) -> usize {
        self.offsets.len()
    }

    /// Continuous HR voxel indices of the sub-slice samples of LR voxel `lr_flat`.
    #[inline]
    pub fn sample_indices(&self, lr_flat: usize, out: &mut [[f64; 3]]) {
        let nx = self.lr_dims[0];
        let ny = self.lr_dims[1];
        let i = (lr_flat % nx) as f64;
        let j = ((lr_flat / nx) % ny) as f64;
        let k = (lr_flat / (nx * ny)) as f64;
        for (o, d) in out.iter_mut().zip(&self.offsets) {
            *o = self.lr_to_hr.transform_point([i, j, k + d]);
        }
    }

    pub fn forward(&self, hr: &[f64]) -> Vec<f64> {
        assert_eq!(hr.len(), self.hr_len(), "HR data length mismatch");
        let inv = 1.0 / self.offsets.len() as f64;
        (0..self.lr_len())
            .into_par_iter()
            .map_init(
                || vec![[0.0; 3]; self.offsets.len()],
                |pts, idx| {
                    self.sample_indices(idx, pts);
                    let mut acc = 0.0;
                    for p in pts.iter() {
                        for (h, w) in trilinear_stencil(self.hr_dims, *p) {
                            acc += w * hr[h];
                        }
                    }
                    acc * inv
                },
            )
            .collect()
    }

    pub fn adjoint(&self, lr: &[f64]) -> Vec<f64> {
        assert_eq!(lr.len(), self.lr_len(), "LR data length mismatch");
        let inv = 1.0 / self.offsets.len() as f64;
        let mut out = vec![0.0; self.hr_len()];
        let mut pts = vec![[0.0; 3]; self.offsets.len()];
        for (idx, &y) in lr.iter().enumerate() {
            if y == 0.0 {
                continue;
            }
            self.sample_indices(idx, &mut pts);
            let v = y * inv;
            for p in &pts {
                for (h, w) in trilinear_stencil(self.hr_dims, *p) {
                    out[h] += w * v;
                }
            }
        }
        out
    }
}

/// Simulates one LR view of `hr` (noise-free).
pub fn apply_forward(hr: &Volume3D, geom: &ViewGeometry, spec: &AcquisitionSpec) -> Result<Volume3D> {
    let lr = lr_grid_for_view(hr.grid(), geom, spec)?;
    let op = ViewOperator::new(hr.grid(), &lr, geom.slice_factor, geom.motion.as_ref())?;
    let data = op.forward(hr.data());
    Volume3D::new(lr, data)
}

/// Transpose of [`apply_forward`] onto `hr_grid`.
pub fn apply_adjoint(
    lr: &Volume3D,
    geom: &ViewGeometry,
    spec: &AcquisitionSpec,
    hr_grid: &GridSpec,
) -> Result<Volume3D> {
    let expected = lr_grid_for_view(hr_grid, geom, spec)?;
    if expected.dims() != lr.dims() {
        return Err(invalid(format!(
            "LR view has dims {:?}, geometry implies {:?}",
            lr.dims(),
            expected.dims()
        )));
    }
    let op = ViewOperator::new(hr_grid, lr.grid(), geom.slice_factor, geom.motion.as_ref())?;
    Volume3D::new(hr_grid.clone(), op.adjoint(lr.data()))
}

/// Noise standard deviation for a target SNR: mean foreground intensity over
/// `snr`, where foreground is every voxel above 5% of the maximum.
pub fn noise_sigma(vol: &Volume3D, snr: f64) -> f64 {
    let (_, max) = vol.min_max();
    let threshold = 0.05 * max;
    let (sum, count) = vol
        .data()
        .iter()
        .filter(|&&v| v > threshold)
        .fold((0.0, 0usize), |(s, c), &v| (s + v, c + 1));
    if count == 0 {
        0.0
    } else {
        sum / count as f64 / snr
    }
}

/// Adds i.i.d. Gaussian noise. An infinite `snr` returns the input unchanged.
pub fn add_noise(vol: &Volume3D, snr: f64, seed: u64) -> Result<Volume3D> {
    if !(snr > 0.0) {
        return Err(invalid(format!("snr must be > 0, got {snr}")));
    }
    if snr.is_infinite() {
        return Ok(vol.clone());
    }
    let sigma = noise_sigma(vol, snr);
    if sigma == 0.0 {
        return Ok(vol.clone());
    }
    let normal = Normal::new(0.0, sigma).map_err(|e| invalid(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = vol.data().iter().map(|&v| v + normal.sample(&mut rng)).collect();
    vol.with_data(data)
}

/// Simulates every view of `spec` in acquisition order. View `v` draws its
/// noise from `seed ^ v`.
pub fn simulate_views(hr: &Volume3D, spec: &AcquisitionSpec) -> Result<Vec<Volume3D>> {
    spec.validate()?;
    spec.views
        .par_iter()
        .enumerate()
        .map(|(v, geom)| {
            let lr = apply_forward(hr, geom, spec)?;
            match spec.noise_snr {
                Some(snr) => add_noise(&lr, snr, spec.seed ^ v as u64),
                None => Ok(lr),
            }
        })
        .collect()
}
