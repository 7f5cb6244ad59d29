//! Canonical-tensor layers, network assembly and training primitives.

pub mod activation;
pub mod batchnorm;
pub mod check;
pub mod conv;
pub mod linear;
pub mod network;
pub mod ops;
pub mod sgd;
pub mod unmix;

pub use activation::{relu_backward, relu_forward, MaxPool, TightnessCache};
pub use batchnorm::BatchNorm;
pub use check::{network_grad_check, objective_grad_check};
pub use conv::Conv2d;
pub use linear::Linear;
pub use network::{Gradients, Layer, LayerSpec, Network, Trace};
pub use ops::{count_ops, speedup_ratio, OpCount, OpMode};
pub use sgd::Sgd;
pub use unmix::{fold_frame_grads, unmix_output};

#[cfg(test)]
pub(crate) mod testutil {
    use rand::Rng;
    use rand_chacha::ChaCha8Rng;

    use crate::canonical::CanonicalForm;
    use crate::grad::relative_error;
    use crate::tensor::{CanonicalTensor, Shape};

    pub fn random_tensor(rng: &mut ChaCha8Rng, shape: Shape, m: usize) -> CanonicalTensor {
        let forms: Vec<_> = (0..shape.len())
            .map(|_| {
                CanonicalForm::new(
                    rng.random_range(-1.0..1.0),
                    (0..m).map(|_| rng.random_range(-1.0..1.0)).collect(),
                    rng.random_range(0.1..1.0),
                )
                .unwrap()
            })
            .collect();
        CanonicalTensor::from_forms(shape, &forms).unwrap()
    }

    /// Max relative error between the analytic input gradient of
    /// `L = <u, f(x)>` and central differences, for a random upstream `u`.
    pub fn check_input_grad<F, B>(rng: &mut ChaCha8Rng, x: &CanonicalTensor, f: F, b: B) -> f64
    where
        F: Fn(&CanonicalTensor) -> CanonicalTensor,
        B: Fn(&CanonicalTensor, &CanonicalTensor) -> CanonicalTensor,
    {
        let y = f(x);
        let mut u = CanonicalTensor::zeros(y.shape(), y.m());
        u.data_mut()
            .iter_mut()
            .for_each(|v| *v = rng.random_range(-1.0..1.0));
        let loss = |t: &CanonicalTensor| -> f64 {
            f(t).data().iter().zip(u.data()).map(|(a, b)| a * b).sum()
        };
        let g = b(x, &u);
        let h = 1e-5;
        let mut worst: f64 = 0.0;
        for i in 0..x.data().len() {
            let mut p = x.clone();
            p.data_mut()[i] += h;
            let mut q = x.clone();
            q.data_mut()[i] -= h;
            let fd = (loss(&p) - loss(&q)) / (2.0 * h);
            worst = worst.max(relative_error(g.data()[i], fd));
        }
        worst
    }
}
