//! JSON and CSV artifacts exchanged between subcommands.
//!
//! Paths inside a JSON file are resolved relative to that file's directory.

use std::fs;
use std::path::{Path, PathBuf};

use rotview_core::baselines::LsSrrConfig;
use rotview_core::forward::AcquisitionSpec;
use rotview_core::geometry::{AffineMatrix, GridSpec, RigidTransform, ViewGeometry, Volume3D};
use rotview_core::metrics::RoiSpec;
use rotview_core::model::FieldConfig;
use rotview_core::registration::apply_motion_correction;
use rotview_core::trainer::{LossRecord, ReconJob, TrainConfig};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::CliError;
use crate::nifti::read_nifti;

/// Reads and parses a JSON file; unknown keys are rejected by the target types.
pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::json(path, e))
}

/// Pretty-printed JSON with a trailing newline.
pub fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::json(path, e))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.parent().unwrap_or(Path::new(".")).join(p)
    }
}

/// A voxel grid as stored in JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridFile {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    /// Row-major voxel-to-world matrix.
    pub affine: [[f64; 4]; 4],
}

impl GridFile {
    pub fn from_grid(grid: &GridSpec) -> Self {
        GridFile {
            dims: grid.dims(),
            spacing: grid.spacing(),
            affine: grid.affine().to_rows(),
        }
    }

    pub fn to_grid(&self) -> Result<GridSpec, CliError> {
        Ok(GridSpec::new(
            self.dims,
            self.spacing,
            AffineMatrix::from_rows(self.affine),
        )?)
    }
}

/// One entry of a transforms file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransformEntry {
    pub view_id: usize,
    pub angles_deg: [f64; 3],
    pub translation_mm: [f64; 3],
}

impl TransformEntry {
    pub fn new(view_id: usize, t: &RigidTransform) -> Self {
        TransformEntry {
            view_id,
            angles_deg: t.angles_deg,
            translation_mm: t.translation_mm,
        }
    }

    pub fn transform(&self) -> RigidTransform {
        RigidTransform::new(self.angles_deg, self.translation_mm)
    }
}

/// Registration output for views `1..view_count`, in view order.
pub fn transform_entries(transforms: &[RigidTransform]) -> Vec<TransformEntry> {
    transforms
        .iter()
        .enumerate()
        .map(|(i, t)| TransformEntry::new(i + 1, t))
        .collect()
}

/// Reads a transforms file holding exactly one entry per non-reference view.
pub fn read_transforms(path: &Path, view_count: usize) -> Result<Vec<RigidTransform>, CliError> {
    let entries: Vec<TransformEntry> = read_json(path)?;
    let mut out: Vec<Option<RigidTransform>> = vec![None; view_count.saturating_sub(1)];
    for e in &entries {
        if e.view_id == 0 || e.view_id >= view_count {
            return Err(CliError::Usage(format!(
                "{}: view_id {} is not a non-reference view (1..{})",
                path.display(),
                e.view_id,
                view_count
            )));
        }
        if out[e.view_id - 1].replace(e.transform()).is_some() {
            return Err(CliError::Usage(format!(
                "{}: duplicate view_id {}",
                path.display(),
                e.view_id
            )));
        }
    }
    out.into_iter()
        .enumerate()
        .map(|(i, t)| t.ok_or_else(|| CliError::Usage(format!("{}: no entry for view {}", path.display(), i + 1))))
        .collect()
}

/// Manifest written by `simulate`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AcquisitionFile {
    /// Grid of the ground truth and of reconstructions.
    pub grid: GridFile,
    pub spec: AcquisitionSpec,
    /// One NIfTI file per view, relative to the manifest.
    pub views: Vec<PathBuf>,
    /// Motion applied during simulation but not recorded in `spec`.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub injected_motion: Vec<TransformEntry>,
}

/// A loaded acquisition.
#[derive(Debug, Clone)]
pub struct Acquisition {
    pub grid: GridSpec,
    pub spec: AcquisitionSpec,
    pub views: Vec<Volume3D>,
    pub injected_motion: Vec<TransformEntry>,
}

impl Acquisition {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let file: AcquisitionFile = read_json(path)?;
        if file.views.len() != file.spec.views.len() {
            return Err(CliError::Usage(format!(
                "{}: {} view files for {} geometries",
                path.display(),
                file.views.len(),
                file.spec.views.len()
            )));
        }
        let views = file
            .views
            .iter()
            .map(|p| read_nifti(&resolve(path, p)))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Acquisition {
            grid: file.grid.to_grid()?,
            spec: file.spec,
            views,
            injected_motion: file.injected_motion,
        })
    }

    /// View geometries, corrected by `transforms` when given.
    pub fn geometries(&self, transforms: Option<&[RigidTransform]>) -> Result<Vec<ViewGeometry>, CliError> {
        let job = self.job(
            FieldConfig::default(),
            TrainConfig::default(),
            self.grid.clone(),
            transforms,
        )?;
        Ok(job.geometries)
    }

    pub fn job(
        &self,
        field: FieldConfig,
        train: TrainConfig,
        output: GridSpec,
        transforms: Option<&[RigidTransform]>,
    ) -> Result<ReconJob, CliError> {
        let job = ReconJob {
            views: self.views.clone(),
            geometries: self.spec.views.clone(),
            field,
            train,
            output,
        };
        Ok(match transforms {
            Some(t) => apply_motion_correction(&job, t)?,
            None => job,
        })
    }
}

/// Job configuration for `reconstruct` and `baseline`. Every section has
/// defaults; unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JobConfigFile {
    pub acquisition: Option<PathBuf>,
    #[serde(default)]
    pub transforms: Option<PathBuf>,
    #[serde(default)]
    pub field: FieldConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub ls_srr: LsSrrConfig,
    /// Output grid; defaults to the acquisition grid.
    #[serde(default)]
    pub output: Option<GridFile>,
    /// Whether `train.tv_weight` was given; otherwise it follows the noise
    /// level of the acquisition.
    #[serde(skip)]
    pub tv_weight_set: bool,
}

impl JobConfigFile {
    /// Parses a config and resolves its paths against the file location.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let mut cfg: JobConfigFile = read_json(path)?;
        let raw: serde_json::Value = read_json(path)?;
        cfg.tv_weight_set = raw.pointer("/train/tv_weight").is_some();
        cfg.acquisition = cfg.acquisition.map(|p| resolve(path, &p));
        cfg.transforms = cfg.transforms.map(|p| resolve(path, &p));
        Ok(cfg)
    }
}

/// Output of `evaluate`. Non-finite values (PSNR of an exact match) are
/// written as `null`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsFile {
    pub relative_error: f64,
    pub sharpness: f64,
    pub sharpness_roi: RoiSpec,
    pub psnr: Option<f64>,
}

/// Writes the loss history as CSV with columns `iteration,mse,tv,total`.
pub fn write_loss_csv(history: &[LossRecord], path: &Path) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| CliError::io(path, e.into()))?;
    for r in history {
        w.serialize(r).map_err(|e| CliError::io(path, e.into()))?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_rejects_unknown_keys() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("job.json");
        fs::write(
            &p,
            r#"{"acquisition": "a.json", "train": {"iterations": 5, "bogus": 1}}"#,
        )
        .unwrap();
        assert!(matches!(JobConfigFile::load(&p), Err(CliError::Json { .. })));
        fs::write(&p, r#"{"acquisition": "a.json", "extra": true}"#).unwrap();
        assert!(matches!(JobConfigFile::load(&p), Err(CliError::Json { .. })));
    }

    #[test]
    fn config_paths_are_relative_to_the_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("job.json");
        fs::write(&p, r#"{"acquisition": "sim/a.json", "train": {"iterations": 5}}"#).unwrap();
        let cfg = JobConfigFile::load(&p).unwrap();
        assert_eq!(cfg.acquisition.unwrap(), dir.path().join("sim/a.json"));
        assert_eq!(cfg.train.iterations, 5);
        assert!(!cfg.tv_weight_set);
        assert_eq!(cfg.train.learning_rate, TrainConfig::default().learning_rate);
    }

    #[test]
    fn transforms_roundtrip_and_validation() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.json");
        let ts = vec![
            RigidTransform::new([1.0, 2.0, 3.0], [0.5, 0.0, -1.0]),
            RigidTransform::identity(),
        ];
        write_json(&transform_entries(&ts), &p).unwrap();
        assert_eq!(read_transforms(&p, 3).unwrap(), ts);
        assert!(read_transforms(&p, 4).is_err());
        assert!(read_transforms(&p, 2).is_err());
        let dup = vec![TransformEntry::new(1, &ts[0]), TransformEntry::new(1, &ts[1])];
        write_json(&dup, &p).unwrap();
        assert!(read_transforms(&p, 3).is_err());
    }

    #[test]
    fn grid_file_roundtrip() {
        let g = GridSpec::centered([3, 4, 5], [1.0, 2.0, 0.5]).unwrap();
        assert_eq!(GridFile::from_grid(&g).to_grid().unwrap(), g);
    }
}
