//! Multi-resolution hash-grid encoding.
//!
//! Level `l` overlays a virtual grid of resolution `N_l` on `[0, 1]^3`. The
//! eight vertices of the cell holding a point are hashed into that level's
//! feature table and blended trilinearly. Levels are concatenated, optionally
//! followed by the raw coordinate.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// Spatial-hash multipliers, one per axis.
pub const DEFAULT_PRIMES: [u64; 3] = [73_856_093, 19_349_663, 83_492_791];

/// Half-width of the uniform table initialisation.
pub const TABLE_INIT_SCALE: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HashGridConfig {
    pub levels: usize,
    /// Entries per level; a power of two.
    pub table_size: usize,
    pub features_per_entry: usize,
    pub n_min: usize,
    pub n_max: usize,
    pub primes: [u64; 3],
    /// Append the normalized coordinate to the encoded features.
    pub concat_aux: bool,
}

impl Default for HashGridConfig {
    fn default() -> Self {
        HashGridConfig {
            levels: 11,
            table_size: 1 << 19,
            features_per_entry: 2,
            n_min: 16,
            n_max: 512,
            primes: DEFAULT_PRIMES,
            concat_aux: true,
        }
    }
}

impl HashGridConfig {
    pub fn validate(&self) -> Result<()> {
        if self.levels < 1 {
            return Err(invalid("hash grid needs at least one level"));
        }
        if !self.table_size.is_power_of_two() {
            return Err(invalid(format!(
                "table_size must be a power of two, got {}",
                self.table_size
            )));
        }
        if self.levels * self.table_size * self.features_per_entry > u32::MAX as usize {
            return Err(invalid("hash tables exceed 2^32 entries"));
        }
        if self.features_per_entry < 1 {
            return Err(invalid("features_per_entry must be >= 1"));
        }
        if self.n_min < 1 || self.n_min > self.n_max {
            return Err(invalid(format!(
                "need 1 <= n_min <= n_max, got {} and {}",
                self.n_min, self.n_max
            )));
        }
        Ok(())
    }

    /// Per-level growth factor `b`; 1 for a single level.
    pub fn growth_factor(&self) -> f64 {
        if self.levels < 2 {
            return 1.0;
        }
        (((self.n_max as f64).ln() - (self.n_min as f64).ln()) / (self.levels - 1) as f64).exp()
    }

    /// Width of the encoded feature vector.
    pub fn output_dim(&self) -> usize {
        self.levels * self.features_per_entry + if self.concat_aux { 3 } else { 0 }
    }

    pub fn num_params(&self) -> usize {
        self.levels * self.table_size * self.features_per_entry
    }
}

/// `N_l = floor(n_min · b^(l−1))`. Values within 1e-9 (relative) of an integer
/// snap to it, so exact powers are not lost to rounding in `b`.
pub fn level_resolutions(config: &HashGridConfig) -> Result<Vec<usize>> {
    config.validate()?;
    if config.levels == 1 {
        return Ok(vec![config.n_min]);
    }
    let b = config.growth_factor();
    Ok((0..config.levels)
        .map(|l| {
            let v = config.n_min as f64 * b.powi(l as i32);
            let r = v.round();
            let n = if (v - r).abs() <= 1e-9 * v { r } else { v.floor() };
            (n as usize).min(config.n_max)
        })
        .collect())
}

/// `(i·π1 ⊕ j·π2 ⊕ k·π3) mod T` with wrapping 64-bit products.
#[inline]
pub fn hash_index(vertex: [u64; 3], config: &HashGridConfig) -> usize {
    hash_with(vertex, &config.primes, config.table_size as u64)
}

#[inline]
fn hash_with(v: [u64; 3], primes: &[u64; 3], table_size: u64) -> usize {
    let h = v[0].wrapping_mul(primes[0]) ^ v[1].wrapping_mul(primes[1]) ^ v[2].wrapping_mul(primes[2]);
    (h % table_size) as usize
}

/// Trainable feature tables, stored level-major then entry-major with
/// features contiguous.
#[derive(Debug, Clone, PartialEq)]
pub struct HashGridParams {
    levels: usize,
    table_size: usize,
    features: usize,
    values: Vec<f64>,
}

impl HashGridParams {
    pub fn zeros(config: &HashGridConfig) -> Self {
        HashGridParams {
            levels: config.levels,
            table_size: config.table_size,
            features: config.features_per_entry,
            values: vec![0.0; config.num_params()],
        }
    }

    /// Uniform in `[−1e−4, 1e−4]`.
    pub fn init_uniform(config: &HashGridConfig, seed: u64) -> Self {
        let mut p = Self::zeros(config);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for v in &mut p.values {
            *v = rng.random_range(-TABLE_INIT_SCALE..=TABLE_INIT_SCALE);
        }
        p
    }

    pub fn from_values(config: &HashGridConfig, values: Vec<f64>) -> Result<Self> {
        if values.len() != config.num_params() {
            return Err(invalid("hash table size does not match config"));
        }
        Ok(HashGridParams {
            levels: config.levels,
            table_size: config.table_size,
            features: config.features_per_entry,
            values,
        })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    /// Feature vector stored at `entry` of `level`.
    pub fn entry(&self, level: usize, entry: usize) -> &[f64] {
        let o = (level * self.table_size + entry) * self.features;
        &self.values[o..o + self.features]
    }

    fn matches(&self, config: &HashGridConfig) -> bool {
        self.levels == config.levels
            && self.table_size == config.table_size
            && self.features == config.features_per_entry
    }
}

/// One trilinear corner: offset of its feature vector in the flat table, and weight.
pub type Corner = (u32, f64);

/// Precomputed level geometry for fast repeated encoding.
#[derive(Debug, Clone)]
pub struct HashEncoder {
    config: HashGridConfig,
    resolutions: Vec<usize>,
}

impl HashEncoder {
    pub fn new(config: HashGridConfig) -> Result<Self> {
        let resolutions = level_resolutions(&config)?;
        Ok(HashEncoder { config, resolutions })
    }

    pub fn config(&self) -> &HashGridConfig {
        &self.config
    }

    pub fn resolutions(&self) -> &[usize] {
        &self.resolutions
    }

    pub fn output_dim(&self) -> usize {
        self.config.output_dim()
    }

    /// Corners touched per point: `levels × 8`.
    pub fn corners_per_point(&self) -> usize {
        self.config.levels * 8
    }

    /// Fills the eight corners of `point`'s cell at `level`.
    #[inline]
    pub fn level_corners(&self, level: usize, point: [f64; 3], out: &mut [Corner]) {
        let n = self.resolutions[level];
        let mut cell = [0u64; 3];
        let mut w = [0.0f64; 3];
        for a in 0..3 {
            let x = point[a].clamp(0.0, 1.0) * n as f64;
            let c = (x.floor() as usize).min(n - 1);
            cell[a] = c as u64;
            w[a] = x - c as f64;
        }
        let t = self.config.table_size as u64;
        let f = self.config.features_per_entry;
        let base = level * self.config.table_size;
        let mut idx = 0;
        for dz in 0..2u64 {
            let wz = if dz == 0 { 1.0 - w[2] } else { w[2] };
            for dy in 0..2u64 {
                let wy = if dy == 0 { 1.0 - w[1] } else { w[1] };
                for dx in 0..2u64 {
                    let wx = if dx == 0 { 1.0 - w[0] } else { w[0] };
                    let h = hash_with([cell[0] + dx, cell[1] + dy, cell[2] + dz], &self.config.primes, t);
                    out[idx] = (((base + h) * f) as u32, wx * wy * wz);
                    idx += 1;
                }
            }
        }
    }

    /// Encodes one point into `out` (length `output_dim`). When `corners` is
    /// given (length `levels × 8`) the lookup is recorded for the backward pass.
    pub fn encode_into(
        &self,
        params: &HashGridParams,
        point: [f64; 3],
        out: &mut [f64],
        mut corners: Option<&mut [Corner]>,
    ) {
        let f = self.config.features_per_entry;
        let table = params.values();
        let mut local = [(0u32, 0.0f64); 8];
        for l in 0..self.config.levels {
            let slot: &mut [Corner] = match corners.as_deref_mut() {
                Some(c) => &mut c[l * 8..l * 8 + 8],
                None => &mut local,
            };
            self.level_corners(l, point, slot);
            let feat = &mut out[l * f..(l + 1) * f];
            feat.iter_mut().for_each(|v| *v = 0.0);
            for &(o, w) in slot.iter() {
                let o = o as usize;
                for (d, v) in feat.iter_mut().enumerate() {
                    *v += w * table[o + d];
                }
            }
        }
        if self.config.concat_aux {
            let o = self.config.levels * f;
            for a in 0..3 {
                out[o + a] = point[a].clamp(0.0, 1.0);
            }
        }
    }

    /// Scatter-adds `upstream` (the gradient w.r.t. this point's encoding; aux
    /// entries, if present, are ignored) into the flat table gradient.
    #[inline]
    pub fn accumulate_gradient(&self, corners: &[Corner], upstream: &[f64], grad: &mut [f64]) {
        let f = self.config.features_per_entry;
        for l in 0..self.config.levels {
            let g = &upstream[l * f..(l + 1) * f];
            for &(o, w) in &corners[l * 8..l * 8 + 8] {
                let o = o as usize;
                for d in 0..f {
                    grad[o + d] += w * g[d];
                }
            }
        }
    }
}

/// Encodes a point in `[0, 1]^3` (clamped) to `levels · F` features, plus the
/// point itself when `concat_aux` is set.
pub fn encode(point: [f64; 3], config: &HashGridConfig, params: &HashGridParams) -> Result<Vec<f64>> {
    if !params.matches(config) {
        return Err(invalid("hash parameters do not match config"));
    }
    let enc = HashEncoder::new(config.clone())?;
    let mut out = vec![0.0; enc.output_dim()];
    enc.encode_into(params, point, &mut out, None);
    Ok(out)
}

/// Gradient of `⟨upstream, encode(point)⟩` with respect to the tables.
/// `upstream` has length `levels · F`; colliding corners accumulate.
pub fn encode_backward(
    point: [f64; 3],
    config: &HashGridConfig,
    params: &HashGridParams,
    upstream: &[f64],
) -> Result<HashGridParams> {
    if !params.matches(config) {
        return Err(invalid("hash parameters do not match config"));
    }
    if upstream.len() < config.levels * config.features_per_entry {
        return Err(invalid("upstream gradient is shorter than levels × F"));
    }
    let enc = HashEncoder::new(config.clone())?;
    let mut corners = vec![(0u32, 0.0); enc.corners_per_point()];
    let mut scratch = vec![0.0; enc.output_dim()];
    enc.encode_into(params, point, &mut scratch, Some(&mut corners));
    let mut grad = HashGridParams::zeros(config);
    enc.accumulate_gradient(&corners, upstream, grad.values_mut());
    Ok(grad)
}
