//! Sine-activated MLP head mapping encoded features to one intensity, with
//! hand-written reverse-mode gradients.
//!
//! Hidden layer `k` computes `h_{k+1} = act(ω_k · (W_k h_k + b_k))`; the output
//! layer is affine. Batched passes run as dense matrix products.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2, ArrayView1, ArrayView2, ArrayViewMut1, ArrayViewMut2, Axis, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Sine,
    /// Ablation alternative to the sine layers.
    Relu,
    /// No nonlinearity; used to check the linear-layer gradients.
    Identity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MlpConfig {
    pub input_dim: usize,
    pub hidden_layers: usize,
    pub hidden_width: usize,
    /// Frequency of the first sine layer.
    pub first_omega: f64,
    /// Frequency of the remaining sine layers.
    pub hidden_omega: f64,
    pub activation: Activation,
}

impl Default for MlpConfig {
    fn default() -> Self {
        MlpConfig {
            input_dim: 25,
            hidden_layers: 2,
            hidden_width: 192,
            first_omega: 30.0,
            hidden_omega: 1.0,
            activation: Activation::Sine,
        }
    }
}

impl MlpConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim < 1 || self.hidden_width < 1 {
            return Err(invalid("MLP widths must be >= 1"));
        }
        if !(self.first_omega > 0.0) || !(self.hidden_omega > 0.0) {
            return Err(invalid("sine frequencies must be > 0"));
        }
        Ok(())
    }

    /// `(out, in)` of every layer, output layer last.
    pub fn layer_shapes(&self) -> Vec<(usize, usize)> {
        let mut shapes = Vec::with_capacity(self.hidden_layers + 1);
        let mut fan_in = self.input_dim;
        for _ in 0..self.hidden_layers {
            shapes.push((self.hidden_width, fan_in));
            fan_in = self.hidden_width;
        }
        shapes.push((1, fan_in));
        shapes
    }

    /// Frequency applied inside hidden layer `k`.
    pub fn omega(&self, k: usize) -> f64 {
        match self.activation {
            Activation::Sine if k == 0 => self.first_omega,
            Activation::Sine => self.hidden_omega,
            _ => 1.0,
        }
    }

    pub fn num_params(&self) -> usize {
        self.layer_shapes().iter().map(|(o, i)| o * i + o).sum()
    }
}

/// Weights (row-major, `out × in`) followed by biases, layer after layer, in
/// one flat buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    shapes: Vec<(usize, usize)>,
    offsets: Vec<usize>,
    values: Vec<f64>,
}

impl MlpParams {
    pub fn zeros(config: &MlpConfig) -> Self {
        let shapes = config.layer_shapes();
        let mut offsets = Vec::with_capacity(shapes.len());
        let mut o = 0;
        for &(out, inp) in &shapes {
            offsets.push(o);
            o += out * inp + out;
        }
        MlpParams {
            shapes,
            offsets,
            values: vec![0.0; o],
        }
    }

    pub fn num_layers(&self) -> usize {
        self.shapes.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn weight(&self, k: usize) -> ArrayView2<'_, f64> {
        let (out, inp) = self.shapes[k];
        let o = self.offsets[k];
        ArrayView2::from_shape((out, inp), &self.values[o..o + out * inp]).expect("layer shape")
    }

    pub fn bias(&self, k: usize) -> ArrayView1<'_, f64> {
        let (out, inp) = self.shapes[k];
        let o = self.offsets[k] + out * inp;
        ArrayView1::from(&self.values[o..o + out])
    }

    pub fn weight_mut(&mut self, k: usize) -> ArrayViewMut2<'_, f64> {
        let (out, inp) = self.shapes[k];
        let o = self.offsets[k];
        ArrayViewMut2::from_shape((out, inp), &mut self.values[o..o + out * inp]).expect("layer shape")
    }

    pub fn bias_mut(&mut self, k: usize) -> ArrayViewMut1<'_, f64> {
        let (out, inp) = self.shapes[k];
        let o = self.offsets[k] + out * inp;
        ArrayViewMut1::from(&mut self.values[o..o + out])
    }

    fn weight_and_bias_mut(&mut self, k: usize) -> (ArrayViewMut2<'_, f64>, ArrayViewMut1<'_, f64>) {
        let (out, inp) = self.shapes[k];
        let o = self.offsets[k];
        let (w, rest) = self.values[o..o + out * inp + out].split_at_mut(out * inp);
        (
            ArrayViewMut2::from_shape((out, inp), w).expect("layer shape"),
            ArrayViewMut1::from(rest),
        )
    }
}

/// SIREN-style initialisation: first-layer weights uniform in
/// `±1/input_dim`, later layers in `±sqrt(6/fan_in)/ω` with that layer's own
/// frequency (1 for the output layer), biases in `±1/sqrt(fan_in)`.
pub fn init_params(config: &MlpConfig, seed: u64) -> MlpParams {
    let mut p = MlpParams::zeros(config);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = p.num_layers();
    for k in 0..n {
        let (_, fan_in) = p.shapes[k];
        let bound = if k == 0 {
            1.0 / fan_in as f64
        } else {
            let omega = if k < n - 1 { config.omega(k) } else { 1.0 };
            (6.0 / fan_in as f64).sqrt() / omega
        };
        let bias_bound = 1.0 / (fan_in as f64).sqrt();
        let (mut w, mut b) = p.weight_and_bias_mut(k);
        w.iter_mut().for_each(|v| *v = rng.random_range(-bound..=bound));
        b.iter_mut()
            .for_each(|v| *v = rng.random_range(-bias_bound..=bias_bound));
    }
    p
}

/// Intermediate values of a batched forward pass.
#[derive(Debug, Clone)]
pub struct MlpTape {
    input: Array2<f64>,
    /// Activation slope at the pre-activation `W h + b` of each hidden layer.
    slope: Vec<Array2<f64>>,
    /// Output of each hidden layer.
    hidden: Vec<Array2<f64>>,
}

impl MlpTape {
    pub fn batch_len(&self) -> usize {
        self.input.nrows()
    }
}

/// Activation value and slope at `z`.
#[inline]
fn activate_with_grad(act: Activation, omega: f64, z: f64) -> (f64, f64) {
    match act {
        Activation::Sine => {
            let (s, c) = (omega * z).sin_cos();
            (s, omega * c)
        }
        Activation::Relu => {
            if z > 0.0 {
                (z, 1.0)
            } else {
                (0.0, 0.0)
            }
        }
        Activation::Identity => (z, 1.0),
    }
}

fn check_params(config: &MlpConfig, params: &MlpParams) -> Result<()> {
    if params.shapes != config.layer_shapes() {
        return Err(invalid("MLP parameters do not match config"));
    }
    Ok(())
}

/// Forward pass over a `batch × input_dim` matrix.
pub fn forward_batch(input: Array2<f64>, config: &MlpConfig, params: &MlpParams) -> Result<(Array1<f64>, MlpTape)> {
    check_params(config, params)?;
    if input.ncols() != config.input_dim {
        return Err(invalid(format!(
            "feature length {} does not match input_dim {}",
            input.ncols(),
            config.input_dim
        )));
    }
    let n = params.num_layers();
    let mut slope = Vec::with_capacity(n - 1);
    let mut hidden: Vec<Array2<f64>> = Vec::with_capacity(n - 1);
    for k in 0..n - 1 {
        let h = if k == 0 { &input } else { &hidden[k - 1] };
        let mut z = h.dot(&params.weight(k).t());
        z += &params.bias(k);
        let omega = config.omega(k);
        let mut a = Array2::zeros(z.raw_dim());
        let mut d = z;
        Zip::from(&mut a).and(&mut d).for_each(|a, d| {
            let (v, g) = activate_with_grad(config.activation, omega, *d);
            *a = v;
            *d = g;
        });
        slope.push(d);
        hidden.push(a);
    }
    let last = if n > 1 { &hidden[n - 2] } else { &input };
    let w = params.weight(n - 1);
    let b = params.bias(n - 1)[0];
    let out = last.dot(&w.row(0)) + b;
    Ok((out, MlpTape { input, slope, hidden }))
}

/// Backward pass. Accumulates parameter gradients into `grad` (flat, same
/// layout as [`MlpParams`]) and returns the gradient w.r.t. the inputs.
pub fn backward_batch(
    tape: &MlpTape,
    config: &MlpConfig,
    params: &MlpParams,
    upstream: &[f64],
    grad: &mut MlpParams,
) -> Result<Array2<f64>> {
    check_params(config, params)?;
    check_params(config, grad)?;
    if upstream.len() != tape.batch_len() {
        return Err(invalid("upstream length does not match batch"));
    }
    let n = params.num_layers();
    let dy = ArrayView1::from(upstream);
    let last = if n > 1 { &tape.hidden[n - 2] } else { &tape.input };
    {
        let (mut gw, mut gb) = grad.weight_and_bias_mut(n - 1);
        gw.row_mut(0).scaled_add(1.0, &last.t().dot(&dy));
        gb[0] += dy.sum();
    }
    // dH = dy ⊗ w_out
    let w_out = params.weight(n - 1);
    let mut dh = dy.insert_axis(Axis(1)).dot(&w_out);
    for k in (0..n - 1).rev() {
        let mut dz = dh;
        dz *= &tape.slope[k];
        let h_prev = if k == 0 { &tape.input } else { &tape.hidden[k - 1] };
        let (mut gw, mut gb) = grad.weight_and_bias_mut(k);
        general_mat_mul(1.0, &dz.t(), h_prev, 1.0, &mut gw);
        gb += &dz.sum_axis(Axis(0));
        dh = dz.dot(&params.weight(k));
    }
    Ok(dh)
}

/// Evaluates the network on one feature vector.
pub fn mlp_forward(features: &[f64], config: &MlpConfig, params: &MlpParams) -> Result<f64> {
    let x = Array2::from_shape_vec((1, features.len()), features.to_vec()).map_err(|e| invalid(e.to_string()))?;
    let (out, _) = forward_batch(x, config, params)?;
    Ok(out[0])
}

/// Gradients of `upstream · mlp(features)` w.r.t. the parameters and features.
pub fn mlp_backward(
    features: &[f64],
    config: &MlpConfig,
    params: &MlpParams,
    upstream: f64,
) -> Result<(MlpParams, Vec<f64>)> {
    let x = Array2::from_shape_vec((1, features.len()), features.to_vec()).map_err(|e| invalid(e.to_string()))?;
    let (_, tape) = forward_batch(x, config, params)?;
    let mut grad = MlpParams::zeros(config);
    let dx = backward_batch(&tape, config, params, &[upstream], &mut grad)?;
    Ok((grad, dx.row(0).to_vec()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn tiny() -> MlpConfig {
        MlpConfig {
            input_dim: 5,
            hidden_layers: 2,
            hidden_width: 7,
            first_omega: 30.0,
            hidden_omega: 1.0,
            activation: Activation::Sine,
        }
    }

    #[test]
    fn zero_weights_output_bias() {
        let cfg = tiny();
        let mut p = MlpParams::zeros(&cfg);
        p.bias_mut(2)[0] = 0.37;
        for x in [[0.0; 5], [1.0, -2.0, 3.0, 0.5, 9.0]] {
            assert_eq!(mlp_forward(&x, &cfg, &p).unwrap(), 0.37);
        }
        // zero input, zero hidden biases, random weights: hidden = sin(0) = 0
        let mut p = init_params(&cfg, 4);
        p.bias_mut(0).fill(0.0);
        p.bias_mut(1).fill(0.0);
        let b = p.bias(2)[0];
        assert_eq!(mlp_forward(&[0.0; 5], &cfg, &p).unwrap(), b);
    }

    #[test]
    fn single_unit_sine() {
        let cfg = MlpConfig {
            input_dim: 1,
            hidden_layers: 1,
            hidden_width: 1,
            first_omega: 1.0,
            hidden_omega: 1.0,
            activation: Activation::Sine,
        };
        let mut p = MlpParams::zeros(&cfg);
        p.weight_mut(0)[(0, 0)] = 1.0;
        p.weight_mut(1)[(0, 0)] = 1.0;
        let y = mlp_forward(&[std::f64::consts::FRAC_PI_2], &cfg, &p).unwrap();
        assert_abs_diff_eq!(y, 1.0, epsilon = 1e-15);
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let cfg = tiny();
        let p = init_params(&cfg, 0);
        assert!(mlp_forward(&[0.0; 4], &cfg, &p).is_err());
    }

    #[test]
    fn init_is_deterministic_and_bounded() {
        let cfg = MlpConfig::default();
        let a = init_params(&cfg, 17);
        assert_eq!(a, init_params(&cfg, 17));
        assert_ne!(a, init_params(&cfg, 18));
        let b0 = 1.0 / 25.0;
        assert!(a.weight(0).iter().all(|w| w.abs() <= b0));
        let b1 = (6.0f64 / 192.0).sqrt();
        assert!(a.weight(1).iter().all(|w| w.abs() <= b1));
        assert!(a.weight(2).iter().all(|w| w.abs() <= b1));
        // empirical variance of the second-layer weights vs (2 / fan_in) / ω²
        let w = a.weight(1);
        let n = w.len() as f64;
        let mean = w.sum() / n;
        let var = w.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let expect = 2.0 / 192.0 / cfg.omega(1).powi(2);
        assert!((var / expect - 1.0).abs() < 0.1, "var {var} vs {expect}");
    }

    #[test]
    fn zero_upstream_zero_gradients() {
        let cfg = tiny();
        let p = init_params(&cfg, 2);
        let (g, dx) = mlp_backward(&[0.1, 0.2, 0.3, 0.4, 0.5], &cfg, &p, 0.0).unwrap();
        assert!(g.values().iter().all(|&v| v == 0.0));
        assert!(dx.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn linear_layer_gradient_identity() {
        let cfg = MlpConfig {
            input_dim: 3,
            hidden_layers: 0,
            hidden_width: 1,
            activation: Activation::Identity,
            ..tiny()
        };
        let p = init_params(&cfg, 3);
        let x = [0.5, -1.5, 2.0];
        let (g, dx) = mlp_backward(&x, &cfg, &p, 0.7).unwrap();
        for i in 0..3 {
            assert_abs_diff_eq!(g.weight(0)[(0, i)], 0.7 * x[i], epsilon = 1e-15);
            assert_abs_diff_eq!(dx[i], 0.7 * p.weight(0)[(0, i)], epsilon = 1e-15);
        }
        assert_abs_diff_eq!(g.bias(0)[0], 0.7, epsilon = 1e-15);
    }

    /// Fourth-order central difference; the ω=30 layer makes the plain
    /// three-point stencil too coarse for a 1e-6 relative check.
    fn five_point(f: impl Fn(f64) -> f64, h: f64) -> f64 {
        (8.0 * (f(h) - f(-h)) - (f(2.0 * h) - f(-2.0 * h))) / (12.0 * h)
    }

    fn relative_close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol * a.abs().max(b.abs()).max(1e-6)
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for (draw, act) in (0..100).zip([Activation::Sine, Activation::Relu].iter().cycle()) {
            let cfg = MlpConfig {
                activation: *act,
                ..tiny()
            };
            let p = init_params(&cfg, draw);
            let x: Vec<f64> = (0..5).map(|_| rng.random::<f64>() - 0.5).collect();
            let (g, dx) = mlp_backward(&x, &cfg, &p, 1.0).unwrap();
            let h = 1e-4;
            for i in 0..p.values().len() {
                let f = |d: f64| {
                    let mut q = p.clone();
                    q.values_mut()[i] += d;
                    mlp_forward(&x, &cfg, &q).unwrap()
                };
                let fd = five_point(f, h);
                if *act == Activation::Relu {
                    // skip probes that straddle a kink
                    let fd2 = (f(h) - f(0.0)) / h;
                    let fd3 = (f(0.0) - f(-h)) / h;
                    if (fd2 - fd3).abs() > 1e-9 {
                        continue;
                    }
                }
                assert!(
                    relative_close(fd, g.values()[i], 1e-6),
                    "draw {draw} param {i}: fd {fd} vs {}",
                    g.values()[i]
                );
            }
            for i in 0..5 {
                let f = |d: f64| {
                    let mut a = x.clone();
                    a[i] += d;
                    mlp_forward(&a, &cfg, &p).unwrap()
                };
                let fd = five_point(f, h);
                if *act == Activation::Sine {
                    assert!(
                        relative_close(fd, dx[i], 1e-6),
                        "draw {draw} input {i}: fd {fd} vs {}",
                        dx[i]
                    );
                }
            }
        }
    }

    #[test]
    fn batch_matches_single() {
        let cfg = tiny();
        let p = init_params(&cfg, 8);
        let rows: Vec<Vec<f64>> = (0..4)
            .map(|r| (0..5).map(|c| (r * 5 + c) as f64 * 0.01).collect())
            .collect();
        let x = Array2::from_shape_fn((4, 5), |(r, c)| rows[r][c]);
        let (out, tape) = forward_batch(x, &cfg, &p).unwrap();
        let up = [0.1, -0.2, 0.3, 0.4];
        let mut g = MlpParams::zeros(&cfg);
        let dx = backward_batch(&tape, &cfg, &p, &up, &mut g).unwrap();
        let mut g_sum = vec![0.0; g.values().len()];
        for r in 0..4 {
            assert_abs_diff_eq!(out[r], mlp_forward(&rows[r], &cfg, &p).unwrap(), epsilon = 1e-12);
            let (gr, dxr) = mlp_backward(&rows[r], &cfg, &p, up[r]).unwrap();
            for (s, v) in g_sum.iter_mut().zip(gr.values()) {
                *s += v;
            }
            for c in 0..5 {
                assert_abs_diff_eq!(dx[(r, c)], dxr[c], epsilon = 1e-12);
            }
        }
        for (a, b) in g.values().iter().zip(&g_sum) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn hidden_activations_bounded_and_lipschitz() {
        let cfg = tiny();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for seed in 0..20 {
            let p = init_params(&cfg, seed);
            let x: Vec<f64> = (0..5).map(|_| rng.random::<f64>()).collect();
            let (_, tape) = forward_batch(Array2::from_shape_vec((1, 5), x.clone()).unwrap(), &cfg, &p).unwrap();
            assert!(tape.hidden.iter().all(|h| h.iter().all(|v| v.abs() <= 1.0)));
            // |Δy| ≤ ω0·ω1·‖W0‖·‖W1‖·‖W2‖·‖Δx‖ with Frobenius norms bounding spectral ones
            let fro = |k: usize| p.weight(k).iter().map(|v| v * v).sum::<f64>().sqrt();
            let bound = cfg.omega(0) * cfg.omega(1) * fro(0) * fro(1) * fro(2);
            let dx: Vec<f64> = (0..5).map(|_| (rng.random::<f64>() - 0.5) * 1e-3).collect();
            let y: Vec<f64> = x.iter().zip(&dx).map(|(a, b)| a + b).collect();
            let dy = (mlp_forward(&y, &cfg, &p).unwrap() - mlp_forward(&x, &cfg, &p).unwrap()).abs();
            let n = dx.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!(dy <= bound * n);
        }
    }
}
