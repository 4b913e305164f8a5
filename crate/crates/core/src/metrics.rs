//! Reconstruction quality measures.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::forward::ViewOperator;
use crate::geometry::{check_same_grid, ViewGeometry, Volume3D};

/// Mean over views of `‖H_v y − LR_v‖₁ / ‖LR_v‖₁`, where `H_v` projects the
/// reconstruction `y` into view `v`.
pub fn relative_error(recon: &Volume3D, views: &[Volume3D], geoms: &[ViewGeometry]) -> Result<f64> {
    if views.is_empty() || views.len() != geoms.len() {
        return Err(invalid("need one geometry per view and at least one view"));
    }
    let mut sum = 0.0;
    for (v, (lr, g)) in views.iter().zip(geoms).enumerate() {
        let denom: f64 = lr.data().iter().map(|x| x.abs()).sum();
        if denom == 0.0 {
            return Err(Error::UndefinedMetric(format!("view {v} has zero L1 norm")));
        }
        let op = ViewOperator::new(recon.grid(), lr.grid(), g.slice_factor, g.motion.as_ref())?;
        let proj = op.forward(recon.data());
        let num: f64 = proj.iter().zip(lr.data()).map(|(a, b)| (a - b).abs()).sum();
        sum += num / denom;
    }
    Ok(sum / views.len() as f64)
}

/// A rectangular region on one axis-aligned slice. `lo` and `hi` are
/// inclusive in-plane indices over the two remaining axes, in ascending axis
/// order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RoiSpec {
    pub axis: usize,
    pub index: usize,
    pub lo: [usize; 2],
    pub hi: [usize; 2],
}

impl RoiSpec {
    /// The full slice `index` along `axis`.
    pub fn full_slice(vol: &Volume3D, axis: usize, index: usize) -> Self {
        let d = vol.dims();
        let (u, v) = plane_axes(axis);
        RoiSpec {
            axis,
            index,
            lo: [0, 0],
            hi: [d[u] - 1, d[v] - 1],
        }
    }

    pub fn validate(&self, dims: [usize; 3]) -> Result<()> {
        if self.axis > 2 {
            return Err(invalid("ROI axis must be 0, 1 or 2"));
        }
        if self.index >= dims[self.axis] {
            return Err(invalid(format!("ROI slice {} out of range", self.index)));
        }
        let (u, v) = plane_axes(self.axis);
        if self.lo[0] > self.hi[0] || self.lo[1] > self.hi[1] || self.hi[0] >= dims[u] || self.hi[1] >= dims[v] {
            return Err(invalid(format!("ROI {:?}..{:?} outside the slice", self.lo, self.hi)));
        }
        Ok(())
    }
}

fn plane_axes(axis: usize) -> (usize, usize) {
    match axis {
        0 => (1, 2),
        1 => (0, 2),
        _ => (0, 1),
    }
}

/// The 3×3 Laplacian with diagonal weight `alpha`:
/// `4/(α+1) · [[α/4, (1−α)/4, α/4], [(1−α)/4, −1, (1−α)/4], [α/4, (1−α)/4, α/4]]`.
pub fn laplacian_kernel(alpha: f64) -> [[f64; 3]; 3] {
    let s = 4.0 / (alpha + 1.0);
    let c = alpha / 4.0 * s;
    let e = (1.0 - alpha) / 4.0 * s;
    [[c, e, c], [e, -s, e], [c, e, c]]
}

pub const SHARPNESS_ALPHA: f64 = 0.2;

/// Variance of the Laplacian-filtered ROI (valid region only).
pub fn sharpness(vol: &Volume3D, roi: &RoiSpec) -> Result<f64> {
    roi.validate(vol.dims())?;
    let h = roi.hi[0] - roi.lo[0] + 1;
    let w = roi.hi[1] - roi.lo[1] + 1;
    if h < 3 || w < 3 {
        return Err(invalid(format!("ROI {h}×{w} is smaller than the 3×3 kernel")));
    }
    let (u, v) = plane_axes(roi.axis);
    let at = |a: usize, b: usize| {
        let mut idx = [0usize; 3];
        idx[roi.axis] = roi.index;
        idx[u] = roi.lo[0] + a;
        idx[v] = roi.lo[1] + b;
        vol.get(idx[0], idx[1], idx[2])
    };
    let k = laplacian_kernel(SHARPNESS_ALPHA);
    let mut vals = Vec::with_capacity((h - 2) * (w - 2));
    for a in 1..h - 1 {
        for b in 1..w - 1 {
            let mut acc = 0.0;
            for (da, row) in k.iter().enumerate() {
                for (db, kv) in row.iter().enumerate() {
                    acc += kv * at(a + da - 1, b + db - 1);
                }
            }
            vals.push(acc);
        }
    }
    let n = vals.len() as f64;
    let mean = vals.iter().sum::<f64>() / n;
    Ok(vals.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n)
}

/// `10 log10(1 / MSE)` for data in `[0, 1]`; `+∞` for identical volumes.
pub fn psnr(recon: &Volume3D, truth: &Volume3D) -> Result<f64> {
    check_same_grid(recon.grid(), truth.grid())?;
    let n = recon.data().len() as f64;
    let mse = recon
        .data()
        .iter()
        .zip(truth.data())
        .map(|(a, b)| (a - b).powi(2))
        .sum::<f64>()
        / n;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (1.0 / mse).log10())
}
