use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SdqlError};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HiddenActivation {
    Relu,
    Tanh,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutputActivation {
    Linear,
    Tanh,
}

/// One fully connected layer. `weights` is row-major with shape `n_out x n_in`.
#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub n_in: usize,
    pub n_out: usize,
    pub weights: Vec<f64>,
    pub biases: Vec<f64>,
}

impl Layer {
    fn zeros(n_in: usize, n_out: usize) -> Self {
        Self {
            n_in,
            n_out,
            weights: vec![0.0; n_in * n_out],
            biases: vec![0.0; n_out],
        }
    }

    #[inline]
    pub fn row(&self, j: usize) -> &[f64] {
        &self.weights[j * self.n_in..(j + 1) * self.n_in]
    }
}

/// Parameters of a multilayer perceptron.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpParams {
    pub layer_sizes: Vec<usize>,
    pub layers: Vec<Layer>,
    pub hidden_activation: HiddenActivation,
    pub output_activation: OutputActivation,
}

/// Gradients (or any other tensor set) shaped like an [`MlpParams`].
#[derive(Clone, Debug, PartialEq)]
pub struct ParamGrads {
    pub layers: Vec<Layer>,
}

/// Per-layer outputs of a batched forward pass, kept for backpropagation.
///
/// `values[0]` is the input batch and `values[l + 1]` the post-activation
/// output of layer `l`, each stored sample-major.
#[derive(Clone, Debug)]
pub struct Activations {
    pub batch: usize,
    values: Vec<Vec<f64>>,
}

impl Activations {
    pub fn output(&self) -> &[f64] {
        self.values.last().expect("activations always hold the input")
    }

    pub fn input(&self) -> &[f64] {
        &self.values[0]
    }
}

fn check_sizes(layer_sizes: &[usize]) -> Result<()> {
    if layer_sizes.len() < 2 {
        return Err(SdqlError::InvalidConfig(format!(
            "an MLP needs at least an input and an output layer, got sizes {layer_sizes:?}"
        )));
    }
    if layer_sizes.contains(&0) {
        return Err(SdqlError::InvalidConfig(format!(
            "layer sizes must be positive, got {layer_sizes:?}"
        )));
    }
    Ok(())
}

// Four independent accumulators let the compiler keep the loop in vector registers.
#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [0.0f64; 4];
    let chunks = n / 4;
    for c in 0..chunks {
        let i = c * 4;
        acc[0] += a[i] * b[i];
        acc[1] += a[i + 1] * b[i + 1];
        acc[2] += a[i + 2] * b[i + 2];
        acc[3] += a[i + 3] * b[i + 3];
    }
    let mut tail = 0.0;
    for i in chunks * 4..n {
        tail += a[i] * b[i];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

#[inline]
fn axpy(y: &mut [f64], alpha: f64, x: &[f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

impl MlpParams {
    /// Uniform `±1/sqrt(fan_in)` weights and zero biases, deterministic in `seed`.
    pub fn new(
        layer_sizes: &[usize],
        hidden_activation: HiddenActivation,
        output_activation: OutputActivation,
        seed: u64,
    ) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::with_rng(layer_sizes, hidden_activation, output_activation, &mut rng)
    }

    pub fn with_rng<R: Rng + ?Sized>(
        layer_sizes: &[usize],
        hidden_activation: HiddenActivation,
        output_activation: OutputActivation,
        rng: &mut R,
    ) -> Result<Self> {
        check_sizes(layer_sizes)?;
        let layers = layer_sizes
            .windows(2)
            .map(|w| {
                let (n_in, n_out) = (w[0], w[1]);
                let bound = 1.0 / (n_in as f64).sqrt();
                let mut layer = Layer::zeros(n_in, n_out);
                for v in layer.weights.iter_mut() {
                    *v = rng.random_range(-bound..bound);
                }
                layer
            })
            .collect();
        Ok(Self {
            layer_sizes: layer_sizes.to_vec(),
            layers,
            hidden_activation,
            output_activation,
        })
    }

    /// A network whose every parameter is zero.
    pub fn zeros(
        layer_sizes: &[usize],
        hidden_activation: HiddenActivation,
        output_activation: OutputActivation,
    ) -> Result<Self> {
        check_sizes(layer_sizes)?;
        Ok(Self {
            layer_sizes: layer_sizes.to_vec(),
            layers: layer_sizes
                .windows(2)
                .map(|w| Layer::zeros(w[0], w[1]))
                .collect(),
            hidden_activation,
            output_activation,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_sizes.last().unwrap()
    }

    pub fn num_params(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.len() + l.biases.len())
            .sum()
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weights.iter().chain(&l.biases).all(|v| v.is_finite()))
    }

    /// Structural equality of layer shapes.
    pub fn same_shape(&self, other: &MlpParams) -> bool {
        self.layer_sizes == other.layer_sizes
    }

    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>> {
        let acts = self.forward_batch(input, 1)?;
        Ok(acts.output().to_vec())
    }

    pub fn forward_batch(&self, inputs: &[f64], batch: usize) -> Result<Activations> {
        let n_in = self.input_dim();
        if inputs.len() != n_in * batch {
            return Err(SdqlError::Shape(format!(
                "forward expected {batch} x {n_in} inputs, got {} values",
                inputs.len()
            )));
        }
        let mut values = Vec::with_capacity(self.layers.len() + 1);
        values.push(inputs.to_vec());
        let last = self.layers.len() - 1;
        for (l, layer) in self.layers.iter().enumerate() {
            let x = values.last().unwrap();
            let mut out = vec![0.0; batch * layer.n_out];
            for b in 0..batch {
                let xb = &x[b * layer.n_in..(b + 1) * layer.n_in];
                let ob = &mut out[b * layer.n_out..(b + 1) * layer.n_out];
                for (j, o) in ob.iter_mut().enumerate() {
                    *o = layer.biases[j] + dot(layer.row(j), xb);
                }
            }
            if l < last {
                match self.hidden_activation {
                    HiddenActivation::Relu => out.iter_mut().for_each(|v| *v = v.max(0.0)),
                    HiddenActivation::Tanh => out.iter_mut().for_each(|v| *v = v.tanh()),
                }
            } else if self.output_activation == OutputActivation::Tanh {
                out.iter_mut().for_each(|v| *v = v.tanh());
            }
            values.push(out);
        }
        Ok(Activations { batch, values })
    }

    /// Gradients of `upstream . output` for a single sample.
    pub fn backward(&self, input: &[f64], upstream: &[f64]) -> Result<ParamGrads> {
        let acts = self.forward_batch(input, 1)?;
        Ok(self.backward_batch(&acts, upstream, false)?.0)
    }

    /// Reverse-mode gradients of `sum_b upstream[b] . output[b]` with respect to
    /// every parameter, and optionally with respect to the inputs.
    pub fn backward_batch(
        &self,
        acts: &Activations,
        upstream: &[f64],
        want_input_grad: bool,
    ) -> Result<(ParamGrads, Option<Vec<f64>>)> {
        let (grads, input_grad) = self.backward_impl(acts, upstream, true, want_input_grad)?;
        Ok((grads.expect("parameter gradients requested"), input_grad))
    }

    /// Gradient of `sum_b upstream[b] . output[b]` with respect to the inputs only.
    pub fn input_grad_batch(&self, acts: &Activations, upstream: &[f64]) -> Result<Vec<f64>> {
        let (_, input_grad) = self.backward_impl(acts, upstream, false, true)?;
        Ok(input_grad.expect("input gradient requested"))
    }

    fn backward_impl(
        &self,
        acts: &Activations,
        upstream: &[f64],
        want_param_grads: bool,
        want_input_grad: bool,
    ) -> Result<(Option<ParamGrads>, Option<Vec<f64>>)> {
        let batch = acts.batch;
        if upstream.len() != batch * self.output_dim() {
            return Err(SdqlError::Shape(format!(
                "backward expected {batch} x {} upstream values, got {}",
                self.output_dim(),
                upstream.len()
            )));
        }
        if acts.values.len() != self.layers.len() + 1 || acts.values[0].len() != batch * self.input_dim() {
            return Err(SdqlError::Shape(
                "activations do not belong to this network".into(),
            ));
        }
        let mut grads = ParamGrads::zeros_like(self);
        let last = self.layers.len() - 1;

        let mut delta = upstream.to_vec();
        if self.output_activation == OutputActivation::Tanh {
            for (d, y) in delta.iter_mut().zip(&acts.values[last + 1]) {
                *d *= 1.0 - y * y;
            }
        }

        let mut input_grad = None;
        for l in (0..=last).rev() {
            let layer = &self.layers[l];
            let x = &acts.values[l];
            if want_param_grads {
                let g = &mut grads.layers[l];
                for b in 0..batch {
                    let xb = &x[b * layer.n_in..(b + 1) * layer.n_in];
                    let db = &delta[b * layer.n_out..(b + 1) * layer.n_out];
                    for (j, &d) in db.iter().enumerate() {
                        if d != 0.0 {
                            g.biases[j] += d;
                            axpy(&mut g.weights[j * layer.n_in..(j + 1) * layer.n_in], d, xb);
                        }
                    }
                }
            }
            if l == 0 && !want_input_grad {
                break;
            }
            let mut dx = vec![0.0; batch * layer.n_in];
            for b in 0..batch {
                let db = &delta[b * layer.n_out..(b + 1) * layer.n_out];
                let dxb = &mut dx[b * layer.n_in..(b + 1) * layer.n_in];
                for (j, &d) in db.iter().enumerate() {
                    if d != 0.0 {
                        axpy(dxb, d, layer.row(j));
                    }
                }
            }
            if l == 0 {
                input_grad = Some(dx);
                break;
            }
            // x holds the previous layer's post-activation output.
            match self.hidden_activation {
                HiddenActivation::Relu => {
                    for (d, y) in dx.iter_mut().zip(x) {
                        if *y <= 0.0 {
                            *d = 0.0;
                        }
                    }
                }
                HiddenActivation::Tanh => {
                    for (d, y) in dx.iter_mut().zip(x) {
                        *d *= 1.0 - y * y;
                    }
                }
            }
            delta = dx;
        }
        Ok((want_param_grads.then_some(grads), input_grad))
    }
}

impl ParamGrads {
    pub fn zeros_like(params: &MlpParams) -> Self {
        Self {
            layers: params
                .layers
                .iter()
                .map(|l| Layer::zeros(l.n_in, l.n_out))
                .collect(),
        }
    }

    pub fn matches(&self, params: &MlpParams) -> bool {
        self.layers.len() == params.layers.len()
            && self
                .layers
                .iter()
                .zip(&params.layers)
                .all(|(g, p)| g.n_in == p.n_in && g.n_out == p.n_out)
    }

    pub fn values(&self) -> impl Iterator<Item = &f64> {
        self.layers.iter().flat_map(|l| l.weights.iter().chain(&l.biases))
    }

    fn values_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.layers
            .iter_mut()
            .flat_map(|l| l.weights.iter_mut().chain(l.biases.iter_mut()))
    }

    pub fn is_finite(&self) -> bool {
        self.values().all(|v| v.is_finite())
    }

    pub fn global_norm(&self) -> f64 {
        self.values().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn scale(&mut self, factor: f64) {
        self.values_mut().for_each(|v| *v *= factor);
    }

    /// Rescales so the global L2 norm is at most `max_norm`; returns the norm before clipping.
    pub fn clip_global_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.global_norm();
        if norm > max_norm && norm.is_finite() {
            self.scale(max_norm / norm);
        }
        norm
    }
}

/// `target <- tau * online + (1 - tau) * target`, elementwise.
pub fn soft_update(target: &mut MlpParams, online: &MlpParams, tau: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&tau) {
        return Err(SdqlError::InvalidConfig(format!(
            "soft update rate must lie in [0, 1], got {tau}"
        )));
    }
    if !target.same_shape(online) {
        return Err(SdqlError::Shape(format!(
            "soft update between {:?} and {:?}",
            target.layer_sizes, online.layer_sizes
        )));
    }
    for (t, o) in target.layers.iter_mut().zip(&online.layers) {
        for (tv, ov) in t
            .weights
            .iter_mut()
            .chain(t.biases.iter_mut())
            .zip(o.weights.iter().chain(&o.biases))
        {
            *tv = tau * ov + (1.0 - tau) * *tv;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn linear(sizes: &[usize]) -> MlpParams {
        MlpParams::zeros(sizes, HiddenActivation::Relu, OutputActivation::Linear).unwrap()
    }

    #[test]
    fn init_rejects_degenerate_sizes() {
        let err = MlpParams::new(&[3], HiddenActivation::Relu, OutputActivation::Linear, 0);
        assert!(matches!(err, Err(SdqlError::InvalidConfig(_))));
        let err = MlpParams::new(&[3, 0, 1], HiddenActivation::Relu, OutputActivation::Linear, 0);
        assert!(matches!(err, Err(SdqlError::InvalidConfig(_))));
        assert!(MlpParams::new(&[], HiddenActivation::Relu, OutputActivation::Linear, 0).is_err());
    }

    #[test]
    fn init_is_seeded_with_zero_bias() {
        let a = MlpParams::new(&[2, 1], HiddenActivation::Relu, OutputActivation::Linear, 7).unwrap();
        assert_eq!(a.layers[0].biases, vec![0.0]);
        let b = MlpParams::new(&[2, 1], HiddenActivation::Relu, OutputActivation::Linear, 7).unwrap();
        assert_eq!(a, b);
        let big = MlpParams::new(&[16, 8, 4], HiddenActivation::Relu, OutputActivation::Linear, 1).unwrap();
        let bound = 1.0 / 4.0;
        assert!(big.layers[0].weights.iter().all(|w| w.abs() <= bound));
    }

    #[test]
    fn zero_network_outputs_zero() {
        let net = linear(&[3, 5, 2]);
        assert_eq!(net.forward(&[1.0, -2.0, 3.5]).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn identity_layer_passes_input_through() {
        let mut net = linear(&[3, 3]);
        for i in 0..3 {
            net.layers[0].weights[i * 3 + i] = 1.0;
        }
        let x = [0.25, -4.0, 9.5];
        assert_eq!(net.forward(&x).unwrap(), x.to_vec());
    }

    #[test]
    fn hand_evaluated_relu_network() {
        // hidden = relu(W1 x + b1), out = W2 hidden + b2 with x = [1, -1]
        let mut net = linear(&[2, 2, 1]);
        net.layers[0].weights = vec![1.0, 2.0, -3.0, 0.5];
        net.layers[0].biases = vec![0.5, 0.25];
        net.layers[1].weights = vec![2.0, -1.0];
        net.layers[1].biases = vec![0.1];
        // W1 x + b1 = [1 - 2 + 0.5, -3 - 0.5 + 0.25] = [-0.5, -3.25] -> relu [0, 0]
        assert_eq!(net.forward(&[1.0, -1.0]).unwrap(), vec![0.1]);
        // x = [2, 0]: [2.5, -5.75] -> [2.5, 0] -> 2 * 2.5 + 0.1
        assert_eq!(net.forward(&[2.0, 0.0]).unwrap(), vec![5.1]);
    }

    #[test]
    fn forward_rejects_wrong_input_length() {
        let net = linear(&[3, 1]);
        assert!(matches!(net.forward(&[1.0]), Err(SdqlError::Shape(_))));
    }

    #[test]
    fn zero_upstream_gives_zero_grads() {
        let net = MlpParams::new(&[3, 4, 2], HiddenActivation::Tanh, OutputActivation::Tanh, 3).unwrap();
        let g = net.backward(&[0.3, -0.1, 0.7], &[0.0, 0.0]).unwrap();
        assert!(g.values().all(|&v| v == 0.0));
    }

    #[test]
    fn linear_layer_gradient_is_outer_product() {
        let net = MlpParams::new(&[3, 2], HiddenActivation::Relu, OutputActivation::Linear, 11).unwrap();
        let x = [1.5, -2.0, 0.5];
        let up = [0.25, -3.0];
        let g = net.backward(&x, &up).unwrap();
        for j in 0..2 {
            for i in 0..3 {
                assert_eq!(g.layers[0].weights[j * 3 + i], up[j] * x[i]);
            }
            assert_eq!(g.layers[0].biases[j], up[j]);
        }
    }

    #[test]
    fn backward_rejects_wrong_upstream_length() {
        let net = linear(&[3, 2]);
        assert!(matches!(net.backward(&[0.0; 3], &[1.0]), Err(SdqlError::Shape(_))));
    }

    #[test]
    fn soft_update_endpoints() {
        let online = MlpParams::new(&[2, 3, 1], HiddenActivation::Relu, OutputActivation::Linear, 1).unwrap();
        let orig = MlpParams::new(&[2, 3, 1], HiddenActivation::Relu, OutputActivation::Linear, 2).unwrap();

        let mut t = orig.clone();
        soft_update(&mut t, &online, 1.0).unwrap();
        assert_eq!(t, online);

        let mut t = orig.clone();
        soft_update(&mut t, &online, 0.0).unwrap();
        assert_eq!(t, orig);

        let mut t = linear(&[1, 1]);
        let mut o = linear(&[1, 1]);
        o.layers[0].weights[0] = 2.0;
        soft_update(&mut t, &o, 0.5).unwrap();
        assert_eq!(t.layers[0].weights[0], 1.0);

        let mut wrong = linear(&[2, 1]);
        assert!(matches!(soft_update(&mut wrong, &online, 0.5), Err(SdqlError::Shape(_))));
    }

    #[test]
    fn clip_global_norm_caps_norm() {
        let net = linear(&[2, 1]);
        let mut g = ParamGrads::zeros_like(&net);
        g.layers[0].weights = vec![30.0, 40.0];
        let before = g.clip_global_norm(10.0);
        assert_eq!(before, 50.0);
        assert!((g.global_norm() - 10.0).abs() < 1e-12);
    }
}
