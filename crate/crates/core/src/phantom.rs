//! Synthetic test object with features at several scales: nested
//! ellipsoids, a bright shell, thin spherical shells and a grid of thin rods.

use nalgebra::{Matrix3, Vector3};

use crate::error::{invalid, Result};
use crate::geometry::{axis_rotation, GridSpec, Volume3D};

/// Sub-samples per axis used to anti-alias edges.
const SUPERSAMPLE: usize = 3;

#[derive(Debug, Clone)]
enum Shape {
    Ellipsoid {
        centre: Vector3<f64>,
        semi_axes: Vector3<f64>,
        /// World-to-local rotation.
        rotation: Matrix3<f64>,
    },
    /// Spherical shell of the given radius and half-thickness.
    Shell {
        centre: Vector3<f64>,
        radius: f64,
        half_width: f64,
    },
    /// Finite cylinder along `axis`.
    Rod {
        axis: usize,
        centre: Vector3<f64>,
        radius: f64,
        half_length: f64,
    },
}

impl Shape {
    fn contains(&self, p: &Vector3<f64>) -> bool {
        match self {
            Shape::Ellipsoid {
                centre,
                semi_axes,
                rotation,
            } => {
                let q = rotation * (p - centre);
                q.component_div(semi_axes).norm_squared() <= 1.0
            }
            Shape::Shell {
                centre,
                radius,
                half_width,
            } => ((p - centre).norm() - radius).abs() <= *half_width,
            Shape::Rod {
                axis,
                centre,
                radius,
                half_length,
            } => {
                let d = p - centre;
                let along = d[*axis];
                let radial = (d.norm_squared() - along * along).sqrt();
                along.abs() <= *half_length && radial <= *radius
            }
        }
    }
}

fn ellipsoid(c: [f64; 3], r: [f64; 3], rotation: Matrix3<f64>) -> Shape {
    Shape::Ellipsoid {
        centre: Vector3::from(c),
        semi_axes: Vector3::from(r),
        rotation,
    }
}

/// Shapes painted in order (later shapes overwrite earlier ones), in
/// normalized coordinates where the grid spans `[-1, 1]`. `voxel` is the
/// size of one voxel in these units.
fn scene(voxel: f64) -> Vec<(Shape, f64)> {
    let id = Matrix3::identity();
    let tilt = axis_rotation(2, 0.5) * axis_rotation(0, -0.3);
    let mut s = vec![
        (ellipsoid([0.0, 0.0, 0.0], [0.80, 0.86, 0.74], id), 0.9),
        (ellipsoid([0.0, 0.0, 0.0], [0.73, 0.79, 0.67], id), 0.45),
        (ellipsoid([-0.28, 0.12, -0.05], [0.22, 0.32, 0.26], tilt), 0.75),
        (ellipsoid([-0.28, 0.12, -0.05], [0.12, 0.18, 0.14], tilt), 0.2),
        (ellipsoid([0.32, -0.25, 0.12], [0.16, 0.2, 0.28], id), 0.65),
        (ellipsoid([0.0, -0.45, -0.35], [0.35, 0.12, 0.1], id), 0.3),
    ];
    // thin shells, 1 and 2 voxels thick
    s.push((
        Shape::Shell {
            centre: Vector3::new(0.3, 0.3, -0.25),
            radius: 0.2,
            half_width: 0.5 * voxel,
        },
        1.0,
    ));
    s.push((
        Shape::Shell {
            centre: Vector3::new(0.25, 0.2, 0.35),
            radius: 0.14,
            half_width: voxel,
        },
        0.85,
    ));
    // rods along x appear as dots in the planes that the views rotate in;
    // rods along y and z run in-plane for some views and across for others
    for a in 0..4 {
        for b in 0..2 {
            let y = -0.45 + 0.1 * a as f64;
            let z = 0.3 + 0.12 * b as f64;
            s.push((
                Shape::Rod {
                    axis: 0,
                    centre: Vector3::new(-0.25, y, z),
                    radius: 0.75 * voxel,
                    half_length: 0.3,
                },
                0.95,
            ));
        }
    }
    for a in 0..3 {
        let x = -0.55 + 0.1 * a as f64;
        s.push((
            Shape::Rod {
                axis: 2,
                centre: Vector3::new(x, -0.1, -0.1),
                radius: 0.75 * voxel,
                half_length: 0.35,
            },
            0.8,
        ));
        s.push((
            Shape::Rod {
                axis: 1,
                centre: Vector3::new(x, 0.05, -0.45),
                radius: 0.75 * voxel,
                half_length: 0.3,
            },
            0.8,
        ));
    }
    s
}

/// A phantom on an `n³` grid of 1 mm voxels centred at the origin, with
/// intensities in `[0, 1]`.
pub fn phantom(n: usize) -> Result<Volume3D> {
    if n < 8 {
        return Err(invalid("phantom needs at least 8 voxels per axis"));
    }
    let grid = GridSpec::centered([n; 3], [1.0; 3])?;
    let half = n as f64 / 2.0;
    let voxel = 1.0 / half;
    let shapes = scene(voxel);
    let ss = SUPERSAMPLE;
    let inv = 1.0 / (ss * ss * ss) as f64;
    let value_at = |p: &Vector3<f64>| {
        let mut v = 0.0;
        for (s, val) in &shapes {
            if s.contains(p) {
                v = *val;
            }
        }
        v
    };
    let to_norm = |i: usize, o: usize| ((i as f64 + (o as f64 + 0.5) / ss as f64) - half) / half;
    let mut vol = Volume3D::from_fn(grid, |i, j, k| {
        let mut acc = 0.0;
        for oz in 0..ss {
            for oy in 0..ss {
                for ox in 0..ss {
                    acc += value_at(&Vector3::new(to_norm(i, ox), to_norm(j, oy), to_norm(k, oz)));
                }
            }
        }
        acc * inv
    });
    vol.set_intensity_range(Some((0.0, 1.0)));
    Ok(vol)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn phantom_is_bounded_and_structured() {
        let p = phantom(32).unwrap();
        let (lo, hi) = p.min_max();
        assert!(lo >= 0.0 && hi <= 1.0);
        assert!(hi > 0.8);
        // corners are background
        assert_eq!(p.get(0, 0, 0), 0.0);
        assert_eq!(p.get(31, 31, 31), 0.0);
        assert_eq!(p, phantom(32).unwrap());
    }

    #[test]
    fn phantom_fits_inside_rotated_fov() {
        // everything nonzero lies within the cylinder inscribed in the y-z square
        let n = 32;
        let p = phantom(n).unwrap();
        let c = (n as f64 - 1.0) / 2.0;
        for k in 0..n {
            for j in 0..n {
                for i in 0..n {
                    let r = ((j as f64 - c).powi(2) + (k as f64 - c).powi(2)).sqrt();
                    if r > n as f64 / 2.0 - 0.5 {
                        assert_eq!(p.get(i, j, k), 0.0);
                    }
                }
            }
        }
    }

    #[test]
    fn rejects_tiny_grid() {
        assert!(phantom(4).is_err());
    }
}
