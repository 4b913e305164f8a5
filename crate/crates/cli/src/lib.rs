//! Command-line front end: NIfTI and PNG IO, JSON artifacts and the
//! `simulate → register → reconstruct → evaluate` pipeline.

#![allow(clippy::needless_range_loop)]

pub mod error;
pub mod files;
pub mod nifti;
pub mod slice;

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use rotview_core::baselines::{ls_srr, tricubic_fuse};
use rotview_core::forward::{simulate_views, AcquisitionSpec};
use rotview_core::geometry::{RigidTransform, Volume3D};
use rotview_core::metrics::{psnr, relative_error, sharpness, RoiSpec};
use rotview_core::phantom::phantom;
use rotview_core::registration::{register_views, ViewRegistrationOptions};
use rotview_core::trainer::{default_tv_weight, render_volume, train_with_progress, Precision};

pub use error::{CliError, NiftiError};
use files::{
    read_json, read_transforms, transform_entries, write_json, write_loss_csv, Acquisition, AcquisitionFile, GridFile,
    JobConfigFile, MetricsFile, TransformEntry,
};
use nifti::{read_nifti, write_nifti};
use slice::export_slice_png;

#[derive(Debug, Parser)]
#[command(
    name = "rotview",
    version,
    about = "Isotropic super-resolution from rotated thick-slice views",
    arg_required_else_help = true
)]
struct Cli {
    /// Seed for noise, sampling and initialisation (overrides config files).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Accumulate gradients in a fixed order so runs are bit-reproducible.
    #[arg(long, global = true)]
    deterministic: bool,
    /// Arithmetic precision of the trained parameters.
    #[arg(long, global = true, value_enum)]
    precision: Option<PrecisionArg>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum PrecisionArg {
    F32,
    F64,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum BaselineMethod {
    Tricubic,
    LsSrr,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write the synthetic test phantom.
    Phantom {
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Simulate rotated thick-slice views of a ground-truth volume.
    Simulate {
        #[arg(long)]
        truth: PathBuf,
        /// Directory for the view files and `acquisition.json`.
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, default_value_t = 8)]
        views: usize,
        #[arg(long, default_value_t = 22.5)]
        angle_step: f64,
        #[arg(long, default_value_t = 5)]
        factor: usize,
        /// Add Gaussian noise at this SNR.
        #[arg(long)]
        snr: Option<f64>,
        /// Unrecorded motion `VIEW:AX,AY,AZ[,TX,TY,TZ]` (degrees, mm); repeatable.
        #[arg(long = "perturb", value_name = "SPEC")]
        perturb: Vec<String>,
    },
    /// Estimate per-view rigid transforms to the first view.
    Register {
        #[arg(long)]
        acquisition: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit the neural field and render it on the output grid.
    Reconstruct {
        /// Job config (JSON); command-line paths override its entries.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        acquisition: Option<PathBuf>,
        #[arg(long)]
        transforms: Option<PathBuf>,
        #[arg(long)]
        iterations: Option<usize>,
        #[arg(long)]
        out: PathBuf,
        /// Loss history CSV.
        #[arg(long)]
        loss: Option<PathBuf>,
    },
    /// Run a classical reconstruction.
    Baseline {
        #[arg(long, value_enum)]
        method: BaselineMethod,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        acquisition: Option<PathBuf>,
        #[arg(long)]
        transforms: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compute relative error, sharpness and (with a truth volume) PSNR.
    Evaluate {
        #[arg(long)]
        recon: PathBuf,
        #[arg(long)]
        acquisition: PathBuf,
        #[arg(long)]
        transforms: Option<PathBuf>,
        #[arg(long)]
        truth: Option<PathBuf>,
        /// ROI JSON (`axis`, `index`, `lo`, `hi`); defaults to the central
        /// slice along the last axis.
        #[arg(long)]
        roi: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Export one slice as an 8-bit grayscale PNG.
    Slice {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value_t = 2)]
        axis: usize,
        /// Defaults to the middle slice.
        #[arg(long)]
        index: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Runs the command line and returns the process exit code: 0 on success,
/// 1 on usage errors, 2 on runtime errors.
pub fn cli_main<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
        }
    };
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn run(cli: &Cli) -> Result<(), CliError> {
    match &cli.command {
        Command::Phantom { size, out } => write_nifti(&phantom(*size)?, out),
        Command::Simulate {
            truth,
            out_dir,
            views,
            angle_step,
            factor,
            snr,
            perturb,
        } => simulate(cli, truth, out_dir, *views, *angle_step, *factor, *snr, perturb),
        Command::Register { acquisition, out } => {
            let acq = Acquisition::load(acquisition)?;
            let ts = register_views(
                &acq.views,
                &acq.spec.views,
                &acq.grid,
                &ViewRegistrationOptions::default(),
            )?;
            write_json(&transform_entries(&ts), out)
        }
        Command::Reconstruct {
            config,
            acquisition,
            transforms,
            iterations,
            out,
            loss,
        } => {
            let mut cfg = load_config(config.as_deref(), acquisition, transforms)?;
            if let Some(n) = iterations {
                cfg.train.iterations = *n;
            }
            if let Some(s) = cli.seed {
                cfg.train.seed = s;
            }
            if cli.deterministic {
                cfg.train.deterministic = true;
            }
            if let Some(p) = cli.precision {
                cfg.train.precision = match p {
                    PrecisionArg::F32 => Precision::F32,
                    PrecisionArg::F64 => Precision::F64,
                };
            }
            let (acq, ts) = load_acquisition(&cfg)?;
            if !cfg.tv_weight_set {
                cfg.train.tv_weight = default_tv_weight(acq.spec.noise_snr);
            }
            let output = match &cfg.output {
                Some(g) => g.to_grid()?,
                None => acq.grid.clone(),
            };
            let job = acq.job(cfg.field.clone(), cfg.train.clone(), output, ts.as_deref())?;
            let every = cfg.train.log_every.max(1);
            let outcome = train_with_progress(&job, |r| {
                if r.iteration % every == 0 {
                    eprintln!("iteration {:>6}  mse {:.4e}  tv {:.4e}", r.iteration, r.mse, r.tv);
                }
            })?;
            write_nifti(&render_volume(&outcome.model, &job.output), out)?;
            if let Some(l) = loss {
                write_loss_csv(&outcome.history, l)?;
            }
            Ok(())
        }
        Command::Baseline {
            method,
            config,
            acquisition,
            transforms,
            out,
        } => {
            let cfg = load_config(config.as_deref(), acquisition, transforms)?;
            let (acq, ts) = load_acquisition(&cfg)?;
            let grid = match &cfg.output {
                Some(g) => g.to_grid()?,
                None => acq.grid.clone(),
            };
            let geoms = acq.geometries(ts.as_deref())?;
            let vol = match method {
                BaselineMethod::Tricubic => tricubic_fuse(&acq.views, &geoms, &grid)?,
                BaselineMethod::LsSrr => {
                    let o = ls_srr(&acq.views, &geoms, &grid, &cfg.ls_srr)?;
                    eprintln!(
                        "ls-srr: {} iterations, relative normal residual {:.3e}",
                        o.iterations, o.relative_gradient
                    );
                    o.volume
                }
            };
            write_nifti(&vol, out)
        }
        Command::Evaluate {
            recon,
            acquisition,
            transforms,
            truth,
            roi,
            out,
        } => evaluate(
            recon,
            acquisition,
            transforms.as_deref(),
            truth.as_deref(),
            roi.as_deref(),
            out,
        ),
        Command::Slice {
            input,
            axis,
            index,
            out,
        } => {
            let vol = read_nifti(input)?;
            if *axis > 2 {
                return Err(CliError::Usage(format!("axis must be 0, 1 or 2, got {axis}")));
            }
            let index = index.unwrap_or(vol.dims()[*axis] / 2);
            export_slice_png(&vol, *axis, index, out)
        }
    }
}

/// Parses `VIEW:AX,AY,AZ[,TX,TY,TZ]`.
fn parse_perturbation(s: &str) -> Result<(usize, RigidTransform), CliError> {
    let bad = || CliError::Usage(format!("bad --perturb value {s:?}; expected VIEW:AX,AY,AZ[,TX,TY,TZ]"));
    let (view, rest) = s.split_once(':').ok_or_else(bad)?;
    let view: usize = view.trim().parse().map_err(|_| bad())?;
    let v: Vec<f64> = rest
        .split(',')
        .map(|x| x.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(|_| bad())?;
    match v.len() {
        3 => Ok((view, RigidTransform::new([v[0], v[1], v[2]], [0.0; 3]))),
        6 => Ok((view, RigidTransform::new([v[0], v[1], v[2]], [v[3], v[4], v[5]]))),
        _ => Err(bad()),
    }
}

#[allow(clippy::too_many_arguments)]
fn simulate(
    cli: &Cli,
    truth: &Path,
    out_dir: &Path,
    views: usize,
    angle_step: f64,
    factor: usize,
    snr: Option<f64>,
    perturb: &[String],
) -> Result<(), CliError> {
    let hr = read_nifti(truth)?;
    let mut spec = AcquisitionSpec::rotating(hr.grid(), views, angle_step, factor)?;
    spec.noise_snr = snr;
    spec.seed = cli.seed.unwrap_or(0);
    let mut injected = Vec::new();
    let mut moved = spec.clone();
    for p in perturb {
        let (v, t) = parse_perturbation(p)?;
        if v >= views {
            return Err(CliError::Usage(format!("--perturb view {v} out of range (0..{views})")));
        }
        moved.views[v].motion = Some(t);
        injected.push(TransformEntry::new(v, &t));
    }
    injected.sort_by_key(|e| e.view_id);
    let lr = simulate_views(&hr, &moved)?;
    fs::create_dir_all(out_dir).map_err(|e| CliError::io(out_dir, e))?;
    let mut names = Vec::with_capacity(lr.len());
    for (v, vol) in lr.iter().enumerate() {
        let name = PathBuf::from(format!("view_{v:02}.nii"));
        write_nifti(vol, &out_dir.join(&name))?;
        names.push(name);
    }
    let manifest = AcquisitionFile {
        grid: GridFile::from_grid(hr.grid()),
        spec,
        views: names,
        injected_motion: injected,
    };
    write_json(&manifest, &out_dir.join("acquisition.json"))
}

fn load_config(
    config: Option<&Path>,
    acquisition: &Option<PathBuf>,
    transforms: &Option<PathBuf>,
) -> Result<JobConfigFile, CliError> {
    let mut cfg = match config {
        Some(p) => JobConfigFile::load(p)?,
        None => JobConfigFile::default(),
    };
    if acquisition.is_some() {
        cfg.acquisition = acquisition.clone();
    }
    if transforms.is_some() {
        cfg.transforms = transforms.clone();
    }
    if cfg.acquisition.is_none() {
        return Err(CliError::Usage("no acquisition given (--acquisition or config)".into()));
    }
    Ok(cfg)
}

fn load_acquisition(cfg: &JobConfigFile) -> Result<(Acquisition, Option<Vec<RigidTransform>>), CliError> {
    let acq = Acquisition::load(cfg.acquisition.as_deref().expect("checked by load_config"))?;
    let ts = match &cfg.transforms {
        Some(p) => Some(read_transforms(p, acq.views.len())?),
        None => None,
    };
    Ok((acq, ts))
}

fn evaluate(
    recon: &Path,
    acquisition: &Path,
    transforms: Option<&Path>,
    truth: Option<&Path>,
    roi: Option<&Path>,
    out: &Path,
) -> Result<(), CliError> {
    let vol = read_nifti(recon)?;
    let acq = Acquisition::load(acquisition)?;
    let ts = match transforms {
        Some(p) => Some(read_transforms(p, acq.views.len())?),
        None => None,
    };
    let geoms = acq.geometries(ts.as_deref())?;
    let roi = match roi {
        Some(p) => read_json::<RoiSpec>(p)?,
        None => RoiSpec::full_slice(&vol, 2, vol.dims()[2] / 2),
    };
    let metrics = MetricsFile {
        relative_error: relative_error(&vol, &acq.views, &geoms)?,
        sharpness: sharpness(&vol, &roi)?,
        sharpness_roi: roi,
        psnr: match truth {
            Some(p) => {
                let t: Volume3D = read_nifti(p)?;
                Some(psnr(&vol, &t)?).filter(|v| v.is_finite())
            }
            None => None,
        },
    };
    write_json(&metrics, out)
}
