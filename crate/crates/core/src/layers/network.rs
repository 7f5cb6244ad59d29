use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{check_dim, Result, ScnnError};
use crate::layers::activation::{relu_backward, relu_forward, MaxPool, TightnessCache};
use crate::layers::batchnorm::BatchNorm;
use crate::layers::conv::Conv2d;
use crate::layers::linear::Linear;
use crate::tensor::{CanonicalTensor, Shape};

/// Layer description without weights, used to build a [`Network`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LayerSpec {
    Conv {
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    Relu,
    MaxPool {
        kernel: usize,
        stride: usize,
    },
    BatchNorm,
    Fc {
        out_features: usize,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Conv(Conv2d),
    Relu,
    MaxPool(MaxPool),
    BatchNorm(BatchNorm),
    Fc(Linear),
}

impl Layer {
    pub fn name(&self) -> &'static str {
        match self {
            Layer::Conv(_) => "conv",
            Layer::Relu => "relu",
            Layer::MaxPool(_) => "pool",
            Layer::BatchNorm(_) => "bn",
            Layer::Fc(_) => "fc",
        }
    }

    pub fn output_shape(&self, input: Shape) -> Result<Shape> {
        match self {
            Layer::Conv(c) => Ok(c.geometry(input)?.output),
            Layer::Relu => Ok(input),
            Layer::MaxPool(p) => p.output_shape(input),
            Layer::BatchNorm(b) => b.check(input).map(|_| input),
            Layer::Fc(f) => f.output_shape(input),
        }
    }

    /// Trainable tensors in a fixed order: weight then bias, or γ then β.
    pub fn params(&self) -> Vec<&[f64]> {
        match self {
            Layer::Conv(c) => vec![&c.weight, &c.bias],
            Layer::Fc(f) => vec![&f.weight, &f.bias],
            Layer::BatchNorm(b) => vec![&b.gamma, &b.beta],
            Layer::Relu | Layer::MaxPool(_) => vec![],
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut [f64]> {
        match self {
            Layer::Conv(c) => vec![&mut c.weight, &mut c.bias],
            Layer::Fc(f) => vec![&mut f.weight, &mut f.bias],
            Layer::BatchNorm(b) => vec![&mut b.gamma, &mut b.beta],
            Layer::Relu | Layer::MaxPool(_) => vec![],
        }
    }
}

/// Parameter gradients laid out like [`Network::params`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<Vec<Vec<f64>>>,
}

impl Gradients {
    pub fn zeros_like(net: &Network) -> Self {
        Self {
            layers: net
                .layers
                .iter()
                .map(|l| l.params().iter().map(|p| vec![0.0; p.len()]).collect())
                .collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            for (x, y) in a.iter_mut().zip(b) {
                for (u, v) in x.iter_mut().zip(y) {
                    *u += v;
                }
            }
        }
    }

    pub fn scale(&mut self, f: f64) {
        self.values_mut().for_each(|v| *v *= f);
    }

    pub fn values(&self) -> impl Iterator<Item = &f64> {
        self.layers.iter().flatten().flatten()
    }

    fn values_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.layers.iter_mut().flatten().flatten()
    }

    pub fn norm(&self) -> f64 {
        self.values().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// Everything the backward pass needs from one forward pass.
#[derive(Debug, Clone)]
pub struct Trace {
    /// Network input followed by every layer output.
    pub activations: Vec<CanonicalTensor>,
    pub caches: Vec<Option<TightnessCache>>,
}

impl Trace {
    pub fn output(&self) -> &CanonicalTensor {
        self.activations.last().expect("trace holds the input")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    input: Shape,
    layers: Vec<Layer>,
    shapes: Vec<Shape>,
}

impl Network {
    /// Checks shape compatibility of consecutive layers.
    pub fn new(input: Shape, layers: Vec<Layer>) -> Result<Self> {
        let mut shapes = Vec::with_capacity(layers.len());
        let mut s = input;
        for (i, l) in layers.iter().enumerate() {
            s = l.output_shape(s).map_err(|e| {
                ScnnError::ShapeMismatch(format!("layer {i} ({}): {e}", l.name()))
            })?;
            shapes.push(s);
        }
        Ok(Self {
            input,
            layers,
            shapes,
        })
    }

    /// He-normal weights, zero biases, unit batch-norm scale.
    pub fn init(input: Shape, specs: &[LayerSpec], seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = Vec::with_capacity(specs.len());
        let mut s = input;
        for spec in specs {
            let layer = match *spec {
                LayerSpec::Conv {
                    out_channels,
                    kernel,
                    stride,
                    padding,
                } => {
                    let mut c = Conv2d::zeros(s.c, out_channels, kernel, stride, padding);
                    let fan_in = (s.c * kernel * kernel) as f64;
                    fill_normal(&mut c.weight, (2.0 / fan_in).sqrt(), &mut rng);
                    Layer::Conv(c)
                }
                LayerSpec::Relu => Layer::Relu,
                LayerSpec::MaxPool { kernel, stride } => Layer::MaxPool(MaxPool { kernel, stride }),
                LayerSpec::BatchNorm => Layer::BatchNorm(BatchNorm::new(s.c)),
                LayerSpec::Fc { out_features } => {
                    let mut f = Linear::zeros(s.len(), out_features);
                    fill_normal(&mut f.weight, (2.0 / s.len() as f64).sqrt(), &mut rng);
                    Layer::Fc(f)
                }
            };
            s = layer.output_shape(s)?;
            layers.push(layer);
        }
        Self::new(input, layers)
    }

    pub fn input_shape(&self) -> Shape {
        self.input
    }

    pub fn output_shape(&self) -> Shape {
        self.shapes.last().copied().unwrap_or(self.input)
    }

    /// Output shape of every layer.
    pub fn shapes(&self) -> &[Shape] {
        &self.shapes
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn params(&self) -> Vec<Vec<&[f64]>> {
        self.layers.iter().map(Layer::params).collect()
    }

    pub fn params_mut(&mut self) -> Vec<Vec<&mut [f64]>> {
        self.layers.iter_mut().map(Layer::params_mut).collect()
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .flat_map(|l| l.params().into_iter().map(<[f64]>::len))
            .sum()
    }

    fn check_input(&self, x: &CanonicalTensor) -> Result<()> {
        if x.shape() != self.input {
            return Err(ScnnError::ShapeMismatch(format!(
                "network expects {}, got {}",
                self.input,
                x.shape()
            )));
        }
        Ok(())
    }

    fn step(
        layer: &Layer,
        x: &CanonicalTensor,
    ) -> Result<(CanonicalTensor, Option<TightnessCache>)> {
        Ok(match layer {
            Layer::Conv(c) => (c.forward(x)?, None),
            Layer::Relu => {
                let (y, cache) = relu_forward(x);
                (y, Some(cache))
            }
            Layer::MaxPool(p) => {
                let (y, cache) = p.forward(x)?;
                (y, Some(cache))
            }
            Layer::BatchNorm(b) => (b.forward(x)?, None),
            Layer::Fc(f) => (f.forward(x)?, None),
        })
    }

    pub fn forward(&self, x: &CanonicalTensor) -> Result<Trace> {
        self.check_input(x)?;
        let mut activations = Vec::with_capacity(self.layers.len() + 1);
        let mut caches = Vec::with_capacity(self.layers.len());
        activations.push(x.clone());
        for layer in &self.layers {
            let (y, cache) = Self::step(layer, activations.last().expect("non-empty"))?;
            activations.push(y);
            caches.push(cache);
        }
        Ok(Trace {
            activations,
            caches,
        })
    }

    /// Forward pass that keeps only the output.
    pub fn infer(&self, x: &CanonicalTensor) -> Result<CanonicalTensor> {
        self.check_input(x)?;
        let mut cur = x.clone();
        for layer in &self.layers {
            cur = Self::step(layer, &cur)?.0;
        }
        Ok(cur)
    }

    /// Reverse pass from the gradient of the output tensor. Returns parameter
    /// gradients and the gradient of the network input.
    pub fn backward(
        &self,
        trace: &Trace,
        grad_out: &CanonicalTensor,
    ) -> Result<(Gradients, CanonicalTensor)> {
        if trace.activations.len() != self.layers.len() + 1 {
            return Err(ScnnError::MissingCache(trace.activations.len().saturating_sub(1)));
        }
        check_dim(self.output_shape().len(), grad_out.len())?;
        let mut grads = Gradients::zeros_like(self);
        let mut g = grad_out.clone();
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let x = &trace.activations[i];
            let y = &trace.activations[i + 1];
            g = match layer {
                Layer::Conv(c) => {
                    let (gin, pg) = c.backward(x, y, &g)?;
                    grads.layers[i] = vec![pg.weight, pg.bias];
                    gin
                }
                Layer::Fc(f) => {
                    let (gin, pg) = f.backward(x, y, &g)?;
                    grads.layers[i] = vec![pg.weight, pg.bias];
                    gin.reshape(x.shape())?
                }
                Layer::BatchNorm(b) => {
                    let (gin, pg) = b.backward(x, &g)?;
                    grads.layers[i] = vec![pg.gamma, pg.beta];
                    gin
                }
                Layer::Relu => {
                    let cache = trace.caches[i].as_ref().ok_or(ScnnError::MissingCache(i))?;
                    relu_backward(x, cache, &g)?
                }
                Layer::MaxPool(p) => {
                    let cache = trace.caches[i].as_ref().ok_or(ScnnError::MissingCache(i))?;
                    p.backward(x, cache, &g)?
                }
            };
        }
        Ok((grads, g))
    }

    /// Deterministic forward of `count` stacked frames: the per-frame
    /// baseline the statistical pass replaces. Batch-norm only touches
    /// sensitivities, so it is the identity on deterministic values.
    pub fn forward_frames(&self, frames: &[f64], count: usize) -> Result<Vec<f64>> {
        check_dim(count * self.input.len(), frames.len())?;
        let mut cur = frames.to_vec();
        let mut s = self.input;
        for (layer, &next) in self.layers.iter().zip(&self.shapes) {
            cur = match layer {
                Layer::Conv(c) => c.forward_frames(&cur, count, s)?,
                Layer::Relu => {
                    cur.iter_mut().for_each(|v| *v = v.max(0.0));
                    cur
                }
                Layer::MaxPool(p) => p.forward_frames(&cur, count, s)?,
                Layer::BatchNorm(_) => cur,
                Layer::Fc(f) => f.forward_frames(&cur, count)?,
            };
            s = next;
        }
        Ok(cur)
    }
}

fn fill_normal(buf: &mut [f64], std: f64, rng: &mut ChaCha8Rng) {
    let dist = Normal::new(0.0, std).expect("positive std");
    buf.iter_mut().for_each(|w| *w = dist.sample(rng));
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::testutil::random_tensor;
    use crate::layers::unmix::{fold_frame_grads, unmix_output};
    use nalgebra::DMatrix;
    use rand::Rng;

    pub(crate) fn micro_specs() -> Vec<LayerSpec> {
        vec![
            LayerSpec::Conv {
                out_channels: 2,
                kernel: 3,
                stride: 1,
                padding: 1,
            },
            LayerSpec::Relu,
            LayerSpec::MaxPool { kernel: 2, stride: 2 },
            LayerSpec::BatchNorm,
            LayerSpec::Fc { out_features: 3 },
        ]
    }

    #[test]
    fn shape_algebra() {
        let net = Network::init(Shape::new(3, 32, 32), &[
            LayerSpec::Conv { out_channels: 8, kernel: 3, stride: 1, padding: 1 },
            LayerSpec::Relu,
            LayerSpec::MaxPool { kernel: 2, stride: 2 },
            LayerSpec::Conv { out_channels: 16, kernel: 3, stride: 2, padding: 0 },
            LayerSpec::Fc { out_features: 25 },
        ], 0)
        .unwrap();
        assert_eq!(
            net.shapes(),
            &[
                Shape::new(8, 32, 32),
                Shape::new(8, 32, 32),
                Shape::new(8, 16, 16),
                Shape::new(16, 7, 7),
                Shape::new(25, 1, 1)
            ]
        );
        assert!(Network::init(Shape::new(1, 2, 2), &[LayerSpec::MaxPool { kernel: 3, stride: 1 }], 0).is_err());
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let net = Network::init(Shape::new(1, 4, 4), &micro_specs(), 3).unwrap();
        let x = random_tensor(&mut rng, net.input_shape(), 2);
        let trace = net.forward(&x).unwrap();
        let zero = CanonicalTensor::zeros(net.output_shape(), 2);
        let (g, gin) = net.backward(&trace, &zero).unwrap();
        assert!(g.values().all(|&v| v == 0.0));
        assert!(gin.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv_weight_gradient_on_deterministic_input_is_classical() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let shape = Shape::new(1, 5, 5);
        let net = Network::init(shape, &[LayerSpec::Conv { out_channels: 1, kernel: 3, stride: 1, padding: 0 }], 4).unwrap();
        let img: Vec<f64> = (0..25).map(|_| rng.random_range(0.0..1.0)).collect();
        let x = CanonicalTensor::deterministic(shape, 1, &img).unwrap();
        let trace = net.forward(&x).unwrap();
        let mut up = CanonicalTensor::zeros(net.output_shape(), 1);
        let g: Vec<f64> = (0..9).map(|_| rng.random_range(-1.0..1.0)).collect();
        up.plane_mut(0).copy_from_slice(&g);
        let (grads, _) = net.backward(&trace, &up).unwrap();
        for ky in 0..3 {
            for kx in 0..3 {
                let mut want = 0.0;
                for oy in 0..3 {
                    for ox in 0..3 {
                        want += g[oy * 3 + ox] * img[(oy + ky) * 5 + ox + kx];
                    }
                }
                assert!((grads.layers[0][0][ky * 3 + kx] - want).abs() < 1e-12);
            }
        }
        assert!((grads.layers[0][1][0] - g.iter().sum::<f64>()).abs() < 1e-12);
    }

    #[test]
    fn end_to_end_weight_gradients_match_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let m = 2;
        let n = 4;
        for seed in 0..4 {
            let net = Network::init(Shape::new(1, 4, 4), &micro_specs(), seed).unwrap();
            let x = random_tensor(&mut rng, net.input_shape(), m);
            let real = DMatrix::from_fn(m, n, |_, _| rng.random_range(-1.5..1.5));
            let up: Vec<Vec<f64>> = (0..n)
                .map(|_| (0..net.output_shape().len()).map(|_| rng.random_range(-1.0..1.0)).collect())
                .collect();
            let loss = |net: &Network| -> f64 {
                let out = net.infer(&x).unwrap();
                let frames = unmix_output(&out, &real).unwrap();
                frames.iter().zip(&up).map(|(f, u)| f.iter().zip(u).map(|(a, b)| a * b).sum::<f64>()).sum()
            };
            let trace = net.forward(&x).unwrap();
            let g_out = fold_frame_grads(net.output_shape(), &up, &real).unwrap();
            let (grads, _) = net.backward(&trace, &g_out).unwrap();
            let h = 1e-5;
            for (li, layer) in grads.layers.iter().enumerate() {
                for (pi, tensor) in layer.iter().enumerate() {
                    for (wi, analytic) in tensor.iter().enumerate() {
                        let mut plus = net.clone();
                        plus.params_mut()[li][pi][wi] += h;
                        let mut minus = net.clone();
                        minus.params_mut()[li][pi][wi] -= h;
                        let fd = (loss(&plus) - loss(&minus)) / (2.0 * h);
                        let err = crate::grad::relative_error(*analytic, fd);
                        assert!(err <= 1e-3 || (analytic - fd).abs() < 1e-7, "layer {li} param {pi}[{wi}]: {analytic} vs {fd}");
                    }
                }
            }
        }
    }

    #[test]
    fn baseline_matches_statistical_pass_on_linear_net() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let net = Network::init(Shape::new(1, 6, 6), &[
            LayerSpec::Conv { out_channels: 2, kernel: 3, stride: 1, padding: 1 },
            LayerSpec::Fc { out_features: 4 },
        ], 2)
        .unwrap();
        let mut x = random_tensor(&mut rng, net.input_shape(), 3);
        x.plane_mut(4).iter_mut().for_each(|v| *v = 0.0);
        let real = DMatrix::from_fn(3, 5, |_, _| rng.random_range(-1.0..1.0));
        let frames: Vec<f64> = (0..5)
            .flat_map(|t| x.evaluate(&real.column(t).iter().copied().collect::<Vec<_>>()).unwrap())
            .collect();
        let base = net.forward_frames(&frames, 5).unwrap();
        let stat = unmix_output(&net.infer(&x).unwrap(), &real).unwrap();
        for (t, f) in stat.iter().enumerate() {
            for (a, b) in f.iter().zip(&base[t * 4..(t + 1) * 4]) {
                assert!((a - b).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn backward_rejects_short_trace() {
        let net = Network::init(Shape::new(1, 4, 4), &micro_specs(), 0).unwrap();
        let trace = Trace {
            activations: vec![CanonicalTensor::zeros(net.input_shape(), 1)],
            caches: vec![],
        };
        let g = CanonicalTensor::zeros(net.output_shape(), 1);
        assert!(matches!(net.backward(&trace, &g), Err(ScnnError::MissingCache(_))));
    }
}
