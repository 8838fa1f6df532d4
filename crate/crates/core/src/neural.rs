//! Small dense feed-forward networks with exact backpropagation and Adam.
//!
//! Networks are fully connected with a configurable hidden activation and a
//! linear output layer. Batched passes use row-major `(batch, features)`
//! matrices.

use std::io::{BufRead, Write};

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Relu,
    Tanh,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Tanh => z.tanh(),
        }
    }

    /// Derivative expressed through the pre-activation `z` and output `y`.
    fn derivative(self, z: f64, y: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - y * y,
        }
    }

    fn tag(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Tanh => "tanh",
        }
    }

    fn from_tag(tag: &str) -> Result<Self> {
        match tag {
            "relu" => Ok(Activation::Relu),
            "tanh" => Ok(Activation::Tanh),
            other => Err(Error::Checkpoint(format!("unknown activation `{other}`"))),
        }
    }
}

/// One affine layer, `y = x W + b` with `W` of shape `(in, out)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Dense {
    fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self {
            weight: Array2::zeros((fan_in, fan_out)),
            bias: Array1::zeros(fan_out),
        }
    }

    fn same_shape(&self, other: &Dense) -> bool {
        self.weight.dim() == other.weight.dim() && self.bias.len() == other.bias.len()
    }
}

/// Gradient (or any other per-parameter quantity) of an [`Mlp`].
#[derive(Debug, Clone, PartialEq)]
pub struct MlpGrad {
    pub layers: Vec<Dense>,
}

impl MlpGrad {
    pub fn zeros_like(net: &Mlp) -> Self {
        Self {
            layers: net.layers.iter().map(|l| Dense::zeros(l.weight.nrows(), l.weight.ncols())).collect(),
        }
    }

    pub fn norm(&self) -> f64 {
        self.layers
            .iter()
            .map(|l| l.weight.iter().chain(l.bias.iter()).map(|g| g * g).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale(&mut self, factor: f64) {
        for l in &mut self.layers {
            l.weight.mapv_inplace(|g| g * factor);
            l.bias.mapv_inplace(|g| g * factor);
        }
    }

    pub fn add_assign(&mut self, other: &MlpGrad) {
        for (l, o) in self.layers.iter_mut().zip(&other.layers) {
            l.weight += &o.weight;
            l.bias += &o.bias;
        }
    }

    /// Rescales in place so the global norm is at most `max_norm`.
    pub fn clip_norm(&mut self, max_norm: f64) {
        let norm = self.norm();
        if norm > max_norm && norm.is_finite() {
            self.scale(max_norm / norm);
        }
    }

    pub fn flat(&self) -> Vec<f64> {
        self.layers
            .iter()
            .flat_map(|l| l.weight.iter().chain(l.bias.iter()).copied())
            .collect()
    }

    pub fn is_zero(&self) -> bool {
        self.flat().iter().all(|g| *g == 0.0)
    }
}

/// Activations recorded by a batched forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// Input to each layer; `inputs[0]` is the network input.
    inputs: Vec<Array2<f64>>,
    /// Pre-activations of each hidden layer.
    pre: Vec<Array2<f64>>,
    output: Array2<f64>,
}

impl ForwardCache {
    pub fn output(&self) -> &Array2<f64> {
        &self.output
    }
}

/// Fully connected network: hidden layers use `activation`, the output
/// layer is linear.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    sizes: Vec<usize>,
    activation: Activation,
    layers: Vec<Dense>,
}

impl Mlp {
    /// Uniform fan-in initialization: entries drawn from `U(-k, k)` with
    /// `k = 1/sqrt(fan_in)`.
    pub fn new<R: Rng + ?Sized>(sizes: &[usize], activation: Activation, rng: &mut R) -> Result<Self> {
        let mut net = Self::zeros(sizes, activation)?;
        for layer in &mut net.layers {
            let k = 1.0 / (layer.weight.nrows() as f64).sqrt();
            layer.weight.mapv_inplace(|_| rng.gen_range(-k..k));
            layer.bias.mapv_inplace(|_| rng.gen_range(-k..k));
        }
        Ok(net)
    }

    pub fn zeros(sizes: &[usize], activation: Activation) -> Result<Self> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(Error::InvalidConfig(format!("invalid layer sizes {sizes:?}")));
        }
        Ok(Self {
            sizes: sizes.to_vec(),
            activation,
            layers: sizes.windows(2).map(|w| Dense::zeros(w[0], w[1])).collect(),
        })
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn input_size(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_size(&self) -> usize {
        self.sizes[self.sizes.len() - 1]
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Dense] {
        &mut self.layers
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    pub fn params_flat(&self) -> Vec<f64> {
        self.layers
            .iter()
            .flat_map(|l| l.weight.iter().chain(l.bias.iter()).copied())
            .collect()
    }

    pub fn set_params_flat(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.num_params() {
            return Err(Error::ShapeMismatch {
                expected: self.num_params(),
                got: values.len(),
            });
        }
        let mut it = values.iter().copied();
        for l in &mut self.layers {
            for w in l.weight.iter_mut().chain(l.bias.iter_mut()) {
                *w = it.next().unwrap();
            }
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weight.iter().chain(l.bias.iter()).all(|w| w.is_finite()))
    }

    fn check_input(&self, width: usize) -> Result<()> {
        if width != self.input_size() {
            return Err(Error::ShapeMismatch {
                expected: self.input_size(),
                got: width,
            });
        }
        Ok(())
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x.len())?;
        let mut h = Array1::from(x.to_vec());
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let mut z = h.dot(&layer.weight) + &layer.bias;
            if i < last {
                z.mapv_inplace(|v| self.activation.apply(v));
            }
            h = z;
        }
        Ok(h.to_vec())
    }

    /// Batched forward pass without keeping intermediates.
    pub fn forward_batch(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check_input(x.ncols())?;
        let last = self.layers.len() - 1;
        let mut h = x.to_owned();
        for (i, layer) in self.layers.iter().enumerate() {
            let mut z = h.dot(&layer.weight) + &layer.bias;
            if i < last {
                z.mapv_inplace(|v| self.activation.apply(v));
            }
            h = z;
        }
        Ok(h)
    }

    /// Batched forward pass keeping what [`Mlp::backward_batch`] needs.
    pub fn forward_cached(&self, x: Array2<f64>) -> Result<ForwardCache> {
        self.check_input(x.ncols())?;
        let last = self.layers.len() - 1;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(last);
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            let z = h.dot(&layer.weight) + &layer.bias;
            inputs.push(h);
            if i < last {
                let act = z.mapv(|v| self.activation.apply(v));
                pre.push(z);
                h = act;
            } else {
                h = z;
            }
        }
        Ok(ForwardCache { inputs, pre, output: h })
    }

    /// Gradient of `sum_b upstream[b] . output[b]` with respect to every
    /// parameter.
    pub fn backward_batch(&self, cache: &ForwardCache, upstream: ArrayView2<f64>) -> Result<MlpGrad> {
        if upstream.dim() != cache.output.dim() {
            return Err(Error::ShapeMismatch {
                expected: cache.output.ncols(),
                got: upstream.ncols(),
            });
        }
        let mut grads: Vec<Dense> = Vec::with_capacity(self.layers.len());
        let mut delta = upstream.to_owned();
        for i in (0..self.layers.len()).rev() {
            let input = &cache.inputs[i];
            grads.push(Dense {
                weight: input.t().dot(&delta),
                bias: delta.sum_axis(Axis(0)),
            });
            if i > 0 {
                let mut back = delta.dot(&self.layers[i].weight.t());
                let z = &cache.pre[i - 1];
                ndarray::Zip::from(&mut back)
                    .and(z)
                    .and(input)
                    .for_each(|d, &z, &y| *d *= self.activation.derivative(z, y));
                delta = back;
            }
        }
        grads.reverse();
        Ok(MlpGrad { layers: grads })
    }

    /// Single-sample gradient of `upstream . forward(x)`.
    pub fn backward(&self, x: &[f64], upstream: &[f64]) -> Result<MlpGrad> {
        self.check_input(x.len())?;
        if upstream.len() != self.output_size() {
            return Err(Error::ShapeMismatch {
                expected: self.output_size(),
                got: upstream.len(),
            });
        }
        let cache = self.forward_cached(Array2::from_shape_vec((1, x.len()), x.to_vec()).unwrap())?;
        let up = Array2::from_shape_vec((1, upstream.len()), upstream.to_vec()).unwrap();
        self.backward_batch(&cache, up.view())
    }

    /// Pre-activations of every hidden unit for input `x`.
    pub fn hidden_pre_activations(&self, x: &[f64]) -> Result<Vec<f64>> {
        let cache = self.forward_cached(Array2::from_shape_vec((1, x.len()), x.to_vec()).map_err(|_| Error::ShapeMismatch {
            expected: self.input_size(),
            got: x.len(),
        })?)?;
        Ok(cache.pre.iter().flat_map(|z| z.iter().copied()).collect())
    }

    /// `self <- tau * source + (1 - tau) * self`.
    pub fn soft_update_from(&mut self, source: &Mlp, tau: f64) -> Result<()> {
        if self.sizes != source.sizes {
            return Err(Error::ShapeMismatch {
                expected: self.num_params(),
                got: source.num_params(),
            });
        }
        for (t, s) in self.layers.iter_mut().zip(&source.layers) {
            debug_assert!(t.same_shape(s));
            ndarray::Zip::from(&mut t.weight)
                .and(&s.weight)
                .for_each(|t, &s| *t = tau * s + (1.0 - tau) * *t);
            ndarray::Zip::from(&mut t.bias)
                .and(&s.bias)
                .for_each(|t, &s| *t = tau * s + (1.0 - tau) * *t);
        }
        Ok(())
    }

    /// Writes the network as text:
    ///
    /// ```text
    /// mlp v1
    /// activation relu
    /// sizes 4 8 8 1
    /// layer 0 4 8
    /// <one line per weight row>
    /// <bias line>
    /// ...
    /// end
    /// ```
    ///
    /// Numbers use Rust's shortest round-trip formatting.
    pub fn write_text<W: Write>(&self, out: &mut W) -> Result<()> {
        writeln!(out, "mlp v1")?;
        writeln!(out, "activation {}", self.activation.tag())?;
        let sizes: Vec<String> = self.sizes.iter().map(|s| s.to_string()).collect();
        writeln!(out, "sizes {}", sizes.join(" "))?;
        for (i, l) in self.layers.iter().enumerate() {
            writeln!(out, "layer {i} {} {}", l.weight.nrows(), l.weight.ncols())?;
            for row in l.weight.rows() {
                let vals: Vec<String> = row.iter().map(|v| format!("{v:?}")).collect();
                writeln!(out, "{}", vals.join(" "))?;
            }
            let vals: Vec<String> = l.bias.iter().map(|v| format!("{v:?}")).collect();
            writeln!(out, "{}", vals.join(" "))?;
        }
        writeln!(out, "end")?;
        Ok(())
    }

    pub fn read_text<R: BufRead>(input: &mut R) -> Result<Self> {
        let mut next_line = || -> Result<String> {
            let mut line = String::new();
            if input.read_line(&mut line)? == 0 {
                return Err(Error::Checkpoint("unexpected end of input".into()));
            }
            Ok(line.trim_end().to_string())
        };
        let header = next_line()?;
        if header != "mlp v1" {
            return Err(Error::Checkpoint(format!("bad header `{header}`")));
        }
        let act_line = next_line()?;
        let activation = Activation::from_tag(
            act_line
                .strip_prefix("activation ")
                .ok_or_else(|| Error::Checkpoint("missing activation".into()))?,
        )?;
        let sizes_line = next_line()?;
        let sizes = sizes_line
            .strip_prefix("sizes ")
            .ok_or_else(|| Error::Checkpoint("missing sizes".into()))?
            .split_whitespace()
            .map(|t| t.parse::<usize>().map_err(|e| Error::Checkpoint(e.to_string())))
            .collect::<Result<Vec<_>>>()?;
        let mut net = Self::zeros(&sizes, activation)?;
        let parse_row = |line: &str, expected: usize| -> Result<Vec<f64>> {
            let vals = line
                .split_whitespace()
                .map(|t| t.parse::<f64>().map_err(|e| Error::Checkpoint(e.to_string())))
                .collect::<Result<Vec<_>>>()?;
            if vals.len() != expected {
                return Err(Error::Checkpoint(format!("expected {expected} values, got {}", vals.len())));
            }
            Ok(vals)
        };
        for i in 0..net.layers.len() {
            let (rows, cols) = net.layers[i].weight.dim();
            let expected_header = format!("layer {i} {rows} {cols}");
            let header = next_line()?;
            if header != expected_header {
                return Err(Error::Checkpoint(format!("expected `{expected_header}`, got `{header}`")));
            }
            for r in 0..rows {
                let vals = parse_row(&next_line()?, cols)?;
                for (c, v) in vals.into_iter().enumerate() {
                    net.layers[i].weight[[r, c]] = v;
                }
            }
            let vals = parse_row(&next_line()?, cols)?;
            net.layers[i].bias = Array1::from(vals);
        }
        if next_line()? != "end" {
            return Err(Error::Checkpoint("missing end marker".into()));
        }
        Ok(net)
    }
}

/// Adaptive moment estimation state for one network.
#[derive(Debug, Clone)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    step: u64,
    first: MlpGrad,
    second: MlpGrad,
}

impl Adam {
    pub fn new(net: &Mlp, learning_rate: f64) -> Self {
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step: 0,
            first: MlpGrad::zeros_like(net),
            second: MlpGrad::zeros_like(net),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Applies one bias-corrected update. `maximize` ascends the gradient,
    /// otherwise it is descended.
    pub fn step(&mut self, net: &mut Mlp, grad: &MlpGrad, maximize: bool) -> Result<()> {
        if grad.layers.len() != net.layers.len() || grad.layers.iter().zip(&net.layers).any(|(g, l)| !g.same_shape(l)) {
            return Err(Error::ShapeMismatch {
                expected: net.num_params(),
                got: grad.flat().len(),
            });
        }
        self.step += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let correction1 = 1.0 - b1.powi(self.step as i32);
        let correction2 = 1.0 - b2.powi(self.step as i32);
        let sign = if maximize { 1.0 } else { -1.0 };
        let lr = self.learning_rate;
        let eps = self.epsilon;
        let update = |p: &mut f64, g: f64, m: &mut f64, v: &mut f64| {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            let m_hat = *m / correction1;
            let v_hat = *v / correction2;
            *p += sign * lr * m_hat / (v_hat.sqrt() + eps);
        };
        for (((layer, g), m), v) in net
            .layers
            .iter_mut()
            .zip(&grad.layers)
            .zip(&mut self.first.layers)
            .zip(&mut self.second.layers)
        {
            ndarray::Zip::from(&mut layer.weight)
                .and(&g.weight)
                .and(&mut m.weight)
                .and(&mut v.weight)
                .for_each(|p, &g, m, v| update(p, g, m, v));
            ndarray::Zip::from(&mut layer.bias)
                .and(&g.bias)
                .and(&mut m.bias)
                .and(&mut v.bias)
                .for_each(|p, &g, m, v| update(p, g, m, v));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_net_outputs_zero() {
        let net = Mlp::zeros(&[3, 8, 8, 2], Activation::Relu).unwrap();
        assert_eq!(net.forward(&[1.0, -2.0, 3.0]).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn single_linear_layer() {
        let mut net = Mlp::zeros(&[1, 1], Activation::Relu).unwrap();
        net.layers_mut()[0].weight[[0, 0]] = 1.0;
        assert_eq!(net.forward(&[3.0]).unwrap(), vec![3.0]);

        let mut neuron = Mlp::zeros(&[1, 1], Activation::Relu).unwrap();
        neuron.layers_mut()[0].weight[[0, 0]] = 0.5;
        let g = neuron.backward(&[2.0], &[1.0]).unwrap();
        assert_eq!(g.layers[0].weight[[0, 0]], 2.0);
        assert_eq!(g.layers[0].bias[0], 1.0);
    }

    #[test]
    fn forward_is_repeatable_and_batch_consistent() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let net = Mlp::new(&[3, 16, 16, 2], Activation::Relu, &mut rng).unwrap();
        let x = [0.3, -0.2, 0.9];
        let y1 = net.forward(&x).unwrap();
        assert_eq!(y1, net.forward(&x).unwrap());
        assert!(y1.iter().all(|v| v.is_finite()));
        let batch = Array2::from_shape_vec((2, 3), vec![0.3, -0.2, 0.9, 0.1, 0.1, 0.1]).unwrap();
        let yb = net.forward_batch(batch.view()).unwrap();
        for (a, b) in y1.iter().zip(yb.row(0)) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn shape_errors() {
        let net = Mlp::zeros(&[2, 4, 1], Activation::Relu).unwrap();
        assert!(net.forward(&[1.0]).is_err());
        assert!(net.backward(&[1.0, 2.0], &[1.0, 1.0]).is_err());
        let other = Mlp::zeros(&[2, 5, 1], Activation::Relu).unwrap();
        let mut target = net.clone();
        assert!(target.soft_update_from(&other, 0.5).is_err());
    }

    #[test]
    fn zero_upstream_zero_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let net = Mlp::new(&[4, 8, 8, 1], Activation::Relu, &mut rng).unwrap();
        assert!(net.backward(&[0.1, 0.2, 0.3, 0.4], &[0.0]).unwrap().is_zero());
    }

    #[test]
    fn batch_gradient_is_sum_of_sample_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let net = Mlp::new(&[2, 6, 6, 1], Activation::Tanh, &mut rng).unwrap();
        let xs = [[0.2, -0.4], [0.7, 0.1], [-0.3, 0.5]];
        let ups = [1.5, -0.5, 2.0];
        let mut summed = MlpGrad::zeros_like(&net);
        for (x, u) in xs.iter().zip(ups) {
            summed.add_assign(&net.backward(x, &[u]).unwrap());
        }
        let batch = Array2::from_shape_vec((3, 2), xs.iter().flatten().copied().collect()).unwrap();
        let cache = net.forward_cached(batch).unwrap();
        let up = Array2::from_shape_vec((3, 1), ups.to_vec()).unwrap();
        let g = net.backward_batch(&cache, up.view()).unwrap();
        for (a, b) in g.flat().iter().zip(summed.flat()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn adam_zero_gradient_keeps_params() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut net = Mlp::new(&[2, 4, 1], Activation::Relu, &mut rng).unwrap();
        let before = net.clone();
        let mut opt = Adam::new(&net, 1e-3);
        opt.step(&mut net, &MlpGrad::zeros_like(&before), false).unwrap();
        assert_eq!(net, before);
        assert_eq!(opt.step_count(), 1);
    }

    #[test]
    fn adam_first_step_is_signed_learning_rate() {
        let mut net = Mlp::zeros(&[1, 1], Activation::Relu).unwrap();
        let mut grad = MlpGrad::zeros_like(&net);
        grad.layers[0].weight[[0, 0]] = 0.37;
        grad.layers[0].bias[0] = -4.0;
        let mut opt = Adam::new(&net, 0.01);
        opt.epsilon = 0.0;
        opt.step(&mut net, &grad, false).unwrap();
        assert!((net.layers()[0].weight[[0, 0]] + 0.01).abs() < 1e-15);
        assert!((net.layers()[0].bias[0] - 0.01).abs() < 1e-15);

        let mut net = Mlp::zeros(&[1, 1], Activation::Relu).unwrap();
        let mut opt = Adam::new(&net, 0.01);
        opt.epsilon = 0.0;
        opt.step(&mut net, &grad, true).unwrap();
        assert!((net.layers()[0].weight[[0, 0]] - 0.01).abs() < 1e-15);
    }

    #[test]
    fn adam_constant_gradient_moves_against_sign() {
        let mut net = Mlp::zeros(&[1, 1], Activation::Relu).unwrap();
        let mut grad = MlpGrad::zeros_like(&net);
        grad.layers[0].weight[[0, 0]] = 2.0;
        let mut opt = Adam::new(&net, 0.01);
        for _ in 0..50 {
            opt.step(&mut net, &grad, false).unwrap();
        }
        assert!(net.layers()[0].weight[[0, 0]] < -0.4);
    }

    #[test]
    fn soft_update_examples() {
        let mut target = Mlp::zeros(&[1, 1], Activation::Relu).unwrap();
        let mut source = target.clone();
        source.layers_mut()[0].weight[[0, 0]] = 2.0;
        target.soft_update_from(&source, 0.0).unwrap();
        assert_eq!(target.layers()[0].weight[[0, 0]], 0.0);
        target.soft_update_from(&source, 0.5).unwrap();
        assert_eq!(target.layers()[0].weight[[0, 0]], 1.0);
        target.soft_update_from(&source, 1.0).unwrap();
        assert_eq!(target, source);
    }

    #[test]
    fn clip_norm_bounds_gradient() {
        let net = Mlp::zeros(&[2, 2], Activation::Relu).unwrap();
        let mut g = MlpGrad::zeros_like(&net);
        g.layers[0].weight.fill(10.0);
        g.clip_norm(1.0);
        assert!((g.norm() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn text_checkpoint_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let net = Mlp::new(&[3, 5, 4, 2], Activation::Tanh, &mut rng).unwrap();
        let mut buf = Vec::new();
        net.write_text(&mut buf).unwrap();
        let back = Mlp::read_text(&mut buf.as_slice()).unwrap();
        assert_eq!(back, net);
        assert!(Mlp::read_text(&mut "mlp v2\n".as_bytes()).is_err());
    }
}
