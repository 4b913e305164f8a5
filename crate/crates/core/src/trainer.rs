//! Fitting a [`FieldModel`] to a set of thick-slice views.
//!
//! Each step draws LR voxels uniformly across all views, evaluates the field
//! at the voxel's sub-slice sample points (the same stencil as
//! [`ViewOperator`]), averages them, and penalises the squared difference to
//! the measured value. An optional total-variation term on random HR voxels is
//! added with weight `tv_weight`, and the parameters take one Adam step.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::forward::ViewOperator;
use crate::geometry::{GridSpec, ViewGeometry, Volume3D};
use crate::model::{FieldConfig, FieldGrads, FieldModel};

/// LR voxels per forward/backward chunk.
const LOSS_CHUNK: usize = 512;

/// TV weight used for noisy acquisitions when none is configured.
pub const NOISY_TV_WEIGHT: f64 = 2e-5;

/// Default TV weight for an acquisition: 0 when noiseless, otherwise
/// [`NOISY_TV_WEIGHT`].
pub fn default_tv_weight(noise_snr: Option<f64>) -> f64 {
    match noise_snr {
        Some(_) => NOISY_TV_WEIGHT,
        None => 0.0,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    /// Parameters are rounded to single precision after every update.
    F32,
    #[default]
    F64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub iterations: usize,
    /// LR voxels per step.
    pub batch_size: usize,
    /// Weight of the TV term.
    pub tv_weight: f64,
    /// HR voxels per step for the TV term; defaults to `batch_size`.
    pub tv_samples: Option<usize>,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub seed: u64,
    /// Progress callback period in iterations (0 disables).
    pub log_every: usize,
    pub precision: Precision,
    /// Fixed-order gradient accumulation. When false, chunks are reduced in
    /// parallel and sums may be reassociated.
    pub deterministic: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-4,
            iterations: 10_000,
            batch_size: 1 << 16,
            tv_weight: 0.0,
            tv_samples: None,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            seed: 0,
            log_every: 100,
            precision: Precision::F64,
            deterministic: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(invalid("learning_rate must be > 0"));
        }
        if self.iterations < 1 || self.batch_size < 1 {
            return Err(invalid("iterations and batch_size must be >= 1"));
        }
        if !(self.tv_weight >= 0.0) || !self.tv_weight.is_finite() {
            return Err(invalid("tv_weight must be >= 0"));
        }
        if self.tv_samples == Some(0) {
            return Err(invalid("tv_samples must be >= 1"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.epsilon > 0.0) {
            return Err(invalid("Adam needs beta in [0,1) and epsilon > 0"));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            epsilon: self.epsilon,
        }
    }
}

/// Everything needed to fit one reconstruction.
#[derive(Debug, Clone)]
pub struct ReconJob {
    pub views: Vec<Volume3D>,
    /// Per-view geometry; `motion` holds the correction applied when sampling.
    pub geometries: Vec<ViewGeometry>,
    pub field: FieldConfig,
    pub train: TrainConfig,
    /// Output HR grid (isotropic).
    pub output: GridSpec,
}

impl ReconJob {
    pub fn validate(&self) -> Result<()> {
        if self.views.is_empty() {
            return Err(invalid("job has no views"));
        }
        if self.views.len() != self.geometries.len() {
            return Err(invalid(format!(
                "{} views but {} geometries",
                self.views.len(),
                self.geometries.len()
            )));
        }
        for g in &self.geometries {
            g.validate()?;
        }
        let s = self.output.spacing();
        if (s[0] - s[1]).abs() > 1e-9 * s[0] || (s[0] - s[2]).abs() > 1e-9 * s[0] {
            return Err(invalid("output spacing must be isotropic"));
        }
        self.field.hash.validate()?;
        self.train.validate()
    }

    /// One forward operator per view, from the output grid to that view.
    pub fn operators(&self) -> Result<Vec<ViewOperator>> {
        self.views
            .iter()
            .zip(&self.geometries)
            .map(|(v, g)| ViewOperator::new(&self.output, v.grid(), g.slice_factor, g.motion.as_ref()))
            .collect()
    }
}

/// One LR voxel of one view.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct LrSample {
    pub view: usize,
    pub voxel: usize,
}

/// Losses of one iteration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub iteration: usize,
    pub mse: f64,
    pub tv: f64,
    pub total: f64,
}

/// Draws `count` LR voxels uniformly (with replacement) across all views,
/// returned in view-major, voxel-ascending order.
pub fn sample_batch(rng: &mut impl Rng, view_sizes: &[usize], count: usize) -> Vec<LrSample> {
    let mut starts = Vec::with_capacity(view_sizes.len());
    let mut total = 0;
    for &n in view_sizes {
        starts.push(total);
        total += n;
    }
    let mut global: Vec<usize> = (0..count).map(|_| rng.random_range(0..total)).collect();
    global.sort_unstable();
    global
        .into_iter()
        .map(|g| {
            let view = starts.partition_point(|&s| s <= g) - 1;
            LrSample {
                view,
                voxel: g - starts[view],
            }
        })
        .collect()
}

fn recon_chunk(
    model: &FieldModel,
    ops: &[ViewOperator],
    views: &[Volume3D],
    output: &GridSpec,
    chunk: &[LrSample],
    scale: f64,
    grads: Option<&mut FieldGrads>,
) -> f64 {
    let mut pts = Vec::new();
    let mut sub = Vec::new();
    for s in chunk {
        let op = &ops[s.view];
        sub.resize(op.slice_factor(), [0.0; 3]);
        op.sample_indices(s.voxel, &mut sub);
        pts.extend(sub.iter().map(|p| output.normalized(*p)));
    }
    let (y, tape) = model.forward_batch(&pts);
    let mut sq = 0.0;
    let mut upstream = vec![0.0; pts.len()];
    let mut o = 0;
    for s in chunk {
        let a = ops[s.view].slice_factor();
        let avg = y[o..o + a].iter().sum::<f64>() / a as f64;
        let r = avg - views[s.view].data()[s.voxel];
        sq += r * r;
        let g = 2.0 * r * scale / a as f64;
        upstream[o..o + a].iter_mut().for_each(|u| *u = g);
        o += a;
    }
    if let Some(g) = grads {
        model.backward_batch(&tape, &upstream, g);
    }
    sq
}

/// Runs `work` over chunks, accumulating gradients in chunk order
/// (deterministic) or via a parallel reduction.
fn accumulate<T: Sync>(
    model: &FieldModel,
    items: &[T],
    chunk: usize,
    deterministic: bool,
    grads: Option<&mut FieldGrads>,
    work: impl Fn(&[T], Option<&mut FieldGrads>) -> f64 + Sync,
) -> f64 {
    match grads {
        None => items.chunks(chunk).map(|c| work(c, None)).sum(),
        Some(g) if deterministic || rayon::current_num_threads() == 1 => {
            items.chunks(chunk).map(|c| work(c, Some(&mut *g))).sum()
        }
        Some(g) => {
            let (sum, partial) = items
                .par_chunks(chunk)
                .fold(
                    || (0.0, FieldGrads::zeros_like(model)),
                    |(acc, mut pg), c| {
                        let v = work(c, Some(&mut pg));
                        (acc + v, pg)
                    },
                )
                .reduce(
                    || (0.0, FieldGrads::zeros_like(model)),
                    |(a, mut ga), (b, gb)| {
                        ga.add_scaled(&gb, 1.0);
                        (a + b, ga)
                    },
                );
            g.add_scaled(&partial, 1.0);
            sum
        }
    }
}

/// Mean squared difference between each sampled LR voxel and the average of
/// the field over its sub-slice points. When `grads` is given, adds `weight`
/// times the loss gradient.
#[allow(clippy::too_many_arguments)]
pub fn recon_loss(
    model: &FieldModel,
    ops: &[ViewOperator],
    views: &[Volume3D],
    output: &GridSpec,
    batch: &[LrSample],
    weight: f64,
    deterministic: bool,
    grads: Option<&mut FieldGrads>,
) -> f64 {
    if batch.is_empty() {
        return 0.0;
    }
    let scale = weight / batch.len() as f64;
    let sq = accumulate(model, batch, LOSS_CHUNK, deterministic, grads, |c, g| {
        recon_chunk(model, ops, views, output, c, scale, g)
    });
    sq / batch.len() as f64
}

/// Mean over `samples` of `Σ_axis |f(p + e_axis) − f(p)|`, where a difference
/// whose neighbour falls outside `dims` contributes 0.
pub fn tv_of(f: impl Fn([usize; 3]) -> f64, dims: [usize; 3], samples: &[[usize; 3]]) -> f64 {
    if samples.is_empty() {
        return 0.0;
    }
    let mut sum = 0.0;
    for &p in samples {
        let base = f(p);
        for a in 0..3 {
            if p[a] + 1 < dims[a] {
                let mut q = p;
                q[a] += 1;
                sum += (f(q) - base).abs();
            }
        }
    }
    sum / samples.len() as f64
}

fn tv_chunk(
    model: &FieldModel,
    output: &GridSpec,
    chunk: &[[usize; 3]],
    scale: f64,
    grads: Option<&mut FieldGrads>,
) -> f64 {
    let dims = output.dims();
    let as_f = |p: [usize; 3]| [p[0] as f64, p[1] as f64, p[2] as f64];
    // per sample: base point then its valid forward neighbours
    let mut pts = Vec::with_capacity(chunk.len() * 4);
    let mut counts = Vec::with_capacity(chunk.len());
    for &p in chunk {
        pts.push(output.normalized(as_f(p)));
        let mut n = 0;
        for a in 0..3 {
            if p[a] + 1 < dims[a] {
                let mut q = p;
                q[a] += 1;
                pts.push(output.normalized(as_f(q)));
                n += 1;
            }
        }
        counts.push(n);
    }
    let (y, tape) = model.forward_batch(&pts);
    let mut upstream = vec![0.0; pts.len()];
    let mut sum = 0.0;
    let mut o = 0;
    for &n in &counts {
        for k in 1..=n {
            let d = y[o + k] - y[o];
            sum += d.abs();
            let s = if d > 0.0 {
                scale
            } else if d < 0.0 {
                -scale
            } else {
                0.0
            };
            upstream[o + k] += s;
            upstream[o] -= s;
        }
        o += n + 1;
    }
    if let Some(g) = grads {
        model.backward_batch(&tape, &upstream, g);
    }
    sum
}

/// Total variation of the field over the HR voxels `samples` (see [`tv_of`]).
/// When `grads` is given, adds `weight` times the (sub)gradient.
pub fn tv_loss(
    model: &FieldModel,
    output: &GridSpec,
    samples: &[[usize; 3]],
    weight: f64,
    deterministic: bool,
    grads: Option<&mut FieldGrads>,
) -> f64 {
    if samples.is_empty() {
        return 0.0;
    }
    let scale = weight / samples.len() as f64;
    let sum = accumulate(model, samples, LOSS_CHUNK, deterministic, grads, |c, g| {
        tv_chunk(model, output, c, scale, g)
    });
    sum / samples.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        TrainConfig::default().adam()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        AdamState {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }
}

/// One bias-corrected Adam update.
pub fn adam_step(params: &mut [f64], grads: &[f64], state: &mut AdamState, config: &AdamConfig) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(invalid("Adam buffers have mismatched lengths"));
    }
    state.t += 1;
    let t = state.t as i32;
    let (b1, b2) = (config.beta1, config.beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    let step = config.learning_rate / c1;
    let c2s = c2.sqrt();
    for (((p, &g), m), v) in params.iter_mut().zip(grads).zip(&mut state.m).zip(&mut state.v) {
        *m = b1 * *m + (1.0 - b1) * g;
        *v = b2 * *v + (1.0 - b2) * g * g;
        if *m != 0.0 {
            *p -= step * *m / (v.sqrt() / c2s + config.epsilon);
        }
    }
    Ok(())
}

/// A trained field with its per-iteration losses.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: FieldModel,
    pub history: Vec<LossRecord>,
}

pub fn train(job: &ReconJob) -> Result<TrainOutcome> {
    train_with_progress(job, |_| {})
}

/// Like [`train`], calling `progress` every `log_every` iterations.
pub fn train_with_progress(job: &ReconJob, mut progress: impl FnMut(&LossRecord)) -> Result<TrainOutcome> {
    job.validate()?;
    let cfg = &job.train;
    let ops = job.operators()?;
    let mut model = FieldModel::new(job.field.hash.clone(), job.field.mlp.clone(), cfg.seed)?;
    if cfg.precision == Precision::F32 {
        model.map_params(|v| v as f32 as f64);
    }
    let sizes: Vec<usize> = ops.iter().map(|o| o.lr_len()).collect();
    let dims = job.output.dims();
    let tv_count = cfg.tv_samples.unwrap_or(cfg.batch_size);
    let adam = cfg.adam();
    let mut hash_state = AdamState::new(model.hash.values().len());
    let mut mlp_state = AdamState::new(model.mlp.values().len());
    let mut grads = FieldGrads::zeros_like(&model);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut history = Vec::with_capacity(cfg.iterations);

    for it in 0..cfg.iterations {
        let batch = sample_batch(&mut rng, &sizes, cfg.batch_size);
        grads.clear();
        let mse = recon_loss(
            &model,
            &ops,
            &job.views,
            &job.output,
            &batch,
            1.0,
            cfg.deterministic,
            Some(&mut grads),
        );
        let tv = if cfg.tv_weight > 0.0 {
            let samples: Vec<[usize; 3]> = (0..tv_count)
                .map(|_| {
                    [
                        rng.random_range(0..dims[0]),
                        rng.random_range(0..dims[1]),
                        rng.random_range(0..dims[2]),
                    ]
                })
                .collect();
            tv_loss(
                &model,
                &job.output,
                &samples,
                cfg.tv_weight,
                cfg.deterministic,
                Some(&mut grads),
            )
        } else {
            0.0
        };
        let total = mse + cfg.tv_weight * tv;
        let record = LossRecord {
            iteration: it,
            mse,
            tv,
            total,
        };
        if !total.is_finite() || grads.hash.iter().chain(grads.mlp.values()).any(|g| !g.is_finite()) {
            let max_param = model
                .hash
                .values()
                .iter()
                .chain(model.mlp.values())
                .fold(0.0f64, |a, v| a.max(v.abs()));
            return Err(Error::NonFiniteLoss {
                iteration: it,
                mse,
                tv,
                snapshot: format!(
                    "learning_rate={}, max |param|={max_param:e}, batch of {} starting at view {} voxel {}",
                    cfg.learning_rate,
                    batch.len(),
                    batch[0].view,
                    batch[0].voxel
                ),
            });
        }
        adam_step(model.hash.values_mut(), &grads.hash, &mut hash_state, &adam)?;
        adam_step(model.mlp.values_mut(), grads.mlp.values(), &mut mlp_state, &adam)?;
        if cfg.precision == Precision::F32 {
            model.map_params(|v| v as f32 as f64);
        }
        if cfg.log_every > 0 && (it % cfg.log_every == 0 || it + 1 == cfg.iterations) {
            progress(&record);
        }
        history.push(record);
    }
    Ok(TrainOutcome { model, history })
}

/// Samples the field at every voxel centre of `grid`, clamped to `[0, 1]`.
pub fn render_volume(model: &FieldModel, grid: &GridSpec) -> Volume3D {
    let pts: Vec<[f64; 3]> = (0..grid.num_voxels())
        .map(|i| {
            let [x, y, z] = grid.unflatten(i);
            grid.normalized([x as f64, y as f64, z as f64])
        })
        .collect();
    let data: Vec<f64> = model.eval_batch(&pts).into_iter().map(|v| v.clamp(0.0, 1.0)).collect();
    Volume3D::new(grid.clone(), data).expect("rendered data matches grid")
}

/// Mean total loss over the first and last tenth of `history`.
pub fn window_means(history: &[LossRecord]) -> Option<(f64, f64)> {
    let w = (history.len() / 10).max(1);
    if history.len() < 2 {
        return None;
    }
    let mean = |s: &[LossRecord]| s.iter().map(|r| r.total).sum::<f64>() / s.len() as f64;
    Some((mean(&history[..w]), mean(&history[history.len() - w..])))
}
