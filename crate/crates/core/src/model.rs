//! The trainable field: hash encoder followed by the MLP head.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::hash_encoding::{Corner, HashEncoder, HashGridConfig, HashGridParams};
use crate::neural_field::{backward_batch, forward_batch, init_params, MlpConfig, MlpParams, MlpTape};

/// Points per chunk when evaluating large point sets.
const EVAL_CHUNK: usize = 4096;

/// Hash encoder plus MLP, mapping normalized coordinates in `[0,1]^3` to an
/// intensity.
#[derive(Debug, Clone)]
pub struct FieldModel {
    encoder: HashEncoder,
    mlp_config: MlpConfig,
    pub hash: HashGridParams,
    pub mlp: MlpParams,
}

/// Gradient buffers with the same layout as the model parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldGrads {
    pub hash: Vec<f64>,
    pub mlp: MlpParams,
}

impl FieldGrads {
    pub fn zeros_like(model: &FieldModel) -> Self {
        FieldGrads {
            hash: vec![0.0; model.hash.values().len()],
            mlp: MlpParams::zeros(&model.mlp_config),
        }
    }

    pub fn clear(&mut self) {
        self.hash.iter_mut().for_each(|v| *v = 0.0);
        self.mlp.values_mut().iter_mut().for_each(|v| *v = 0.0);
    }

    /// `self += scale · other`.
    pub fn add_scaled(&mut self, other: &FieldGrads, scale: f64) {
        for (a, b) in self.hash.iter_mut().zip(&other.hash) {
            *a += scale * b;
        }
        for (a, b) in self.mlp.values_mut().iter_mut().zip(other.mlp.values()) {
            *a += scale * b;
        }
    }
}

/// Forward-pass record needed for the backward pass.
#[derive(Debug, Clone)]
pub struct FieldTape {
    mlp: MlpTape,
    corners: Vec<Corner>,
}

/// Architecture of a field, as stored in job configs.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FieldConfig {
    pub hash: HashGridConfig,
    pub mlp: MlpConfig,
}

impl FieldModel {
    /// Initialises tables and weights from `seed`. The MLP input width is
    /// taken from the encoder.
    pub fn new(hash: HashGridConfig, mut mlp: MlpConfig, seed: u64) -> Result<Self> {
        let encoder = HashEncoder::new(hash)?;
        mlp.input_dim = encoder.output_dim();
        mlp.validate()?;
        let hash_params = HashGridParams::init_uniform(encoder.config(), seed);
        let mlp_params = init_params(&mlp, seed.wrapping_add(0x9e37_79b9));
        Ok(FieldModel {
            encoder,
            mlp_config: mlp,
            hash: hash_params,
            mlp: mlp_params,
        })
    }

    /// Assembles a model from existing parameters.
    pub fn from_parts(
        hash: HashGridConfig,
        mlp: MlpConfig,
        hash_params: HashGridParams,
        mlp_params: MlpParams,
    ) -> Result<Self> {
        let encoder = HashEncoder::new(hash)?;
        if mlp.input_dim != encoder.output_dim() {
            return Err(invalid("MLP input_dim does not match encoder output"));
        }
        if hash_params.values().len() != encoder.config().num_params() || mlp_params.values().len() != mlp.num_params()
        {
            return Err(invalid("parameter sizes do not match configs"));
        }
        Ok(FieldModel {
            encoder,
            mlp_config: mlp,
            hash: hash_params,
            mlp: mlp_params,
        })
    }

    pub fn encoder(&self) -> &HashEncoder {
        &self.encoder
    }

    pub fn mlp_config(&self) -> &MlpConfig {
        &self.mlp_config
    }

    pub fn num_params(&self) -> usize {
        self.hash.values().len() + self.mlp.values().len()
    }

    /// Encodes `points`, optionally recording the corners touched.
    fn features(&self, points: &[[f64; 3]], corners: Option<&mut Vec<Corner>>) -> Array2<f64> {
        let d = self.encoder.output_dim();
        let mut feats = Array2::<f64>::zeros((points.len(), d));
        let flat = feats.as_slice_mut().expect("standard layout");
        match corners {
            Some(c) => {
                let cpp = self.encoder.corners_per_point();
                c.clear();
                c.resize(points.len() * cpp, (0, 0.0));
                for (i, p) in points.iter().enumerate() {
                    self.encoder.encode_into(
                        &self.hash,
                        *p,
                        &mut flat[i * d..(i + 1) * d],
                        Some(&mut c[i * cpp..(i + 1) * cpp]),
                    );
                }
            }
            None => {
                for (i, p) in points.iter().enumerate() {
                    self.encoder
                        .encode_into(&self.hash, *p, &mut flat[i * d..(i + 1) * d], None);
                }
            }
        }
        feats
    }

    /// Field values at `points` (no tape).
    pub fn eval_batch(&self, points: &[[f64; 3]]) -> Vec<f64> {
        let mut out = Vec::with_capacity(points.len());
        for chunk in points.chunks(EVAL_CHUNK) {
            let feats = self.features(chunk, None);
            let (y, _) = forward_batch(feats, &self.mlp_config, &self.mlp).expect("model shapes are consistent");
            out.extend(y.iter());
        }
        out
    }

    pub fn eval(&self, point: [f64; 3]) -> f64 {
        self.eval_batch(&[point])[0]
    }

    /// Forward pass recording what the backward pass needs.
    pub fn forward_batch(&self, points: &[[f64; 3]]) -> (Vec<f64>, FieldTape) {
        let mut corners = Vec::new();
        let feats = self.features(points, Some(&mut corners));
        let (y, tape) = forward_batch(feats, &self.mlp_config, &self.mlp).expect("model shapes are consistent");
        (y.to_vec(), FieldTape { mlp: tape, corners })
    }

    /// Accumulates `Σ upstream_i · ∂y_i/∂θ` into `grads`.
    pub fn backward_batch(&self, tape: &FieldTape, upstream: &[f64], grads: &mut FieldGrads) {
        let dfeat = backward_batch(&tape.mlp, &self.mlp_config, &self.mlp, upstream, &mut grads.mlp)
            .expect("tape matches model");
        let cpp = self.encoder.corners_per_point();
        for (i, row) in dfeat.outer_iter().enumerate() {
            let row = row.as_slice().expect("standard layout");
            self.encoder
                .accumulate_gradient(&tape.corners[i * cpp..(i + 1) * cpp], row, &mut grads.hash);
        }
    }

    /// Applies `f` to every parameter, hash tables first.
    pub fn map_params(&mut self, mut f: impl FnMut(f64) -> f64) {
        self.hash.values_mut().iter_mut().for_each(|v| *v = f(*v));
        self.mlp.values_mut().iter_mut().for_each(|v| *v = f(*v));
    }
}
