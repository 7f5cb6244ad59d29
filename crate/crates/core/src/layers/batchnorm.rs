//! Per-distribution normalization of the sensitivity vector.

use crate::error::{check_dim, Result};
use crate::tensor::{CanonicalTensor, Shape};

pub const BN_EPS: f64 = 1e-5;

/// For every form, `sens_k ← γ·(sens_k − mean_j sens_j)/sqrt(σ² + ε) + β` with
/// `σ² = Σ sens² + noise²`. The mean and noise weight pass through. `γ` and
/// `β` are per channel.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub eps: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormGrads {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
}

impl BatchNorm {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: vec![1.0; channels],
            beta: vec![0.0; channels],
            eps: BN_EPS,
        }
    }

    pub fn check(&self, input: Shape) -> Result<()> {
        check_dim(self.gamma.len(), input.c)?;
        check_dim(self.beta.len(), input.c)
    }

    pub fn forward(&self, input: &CanonicalTensor) -> Result<CanonicalTensor> {
        self.check(input.shape())?;
        let m = input.m();
        let mut out = input.clone();
        if m == 0 {
            return Ok(out);
        }
        let plane = input.shape().plane_len();
        let mut buf = vec![0.0; m + 2];
        for site in 0..input.len() {
            let c = site / plane;
            input.gather(site, &mut buf);
            let s = &mut buf[1..=m];
            let mu = s.iter().sum::<f64>() / m as f64;
            let r = input.noise_plane()[site];
            let d = (s.iter().map(|v| v * v).sum::<f64>() + r * r + self.eps).sqrt();
            for v in s.iter_mut() {
                *v = self.gamma[c] * (*v - mu) / d + self.beta[c];
            }
            out.scatter(site, &buf);
        }
        Ok(out)
    }

    pub fn backward(
        &self,
        input: &CanonicalTensor,
        grad_out: &CanonicalTensor,
    ) -> Result<(CanonicalTensor, BatchNormGrads)> {
        self.check(input.shape())?;
        check_dim(input.len(), grad_out.len())?;
        let m = input.m();
        let mut gin = grad_out.clone();
        let mut gg = vec![0.0; self.gamma.len()];
        let mut gbeta = vec![0.0; self.beta.len()];
        if m == 0 {
            return Ok((gin, BatchNormGrads { gamma: gg, beta: gbeta }));
        }
        let plane = input.shape().plane_len();
        let (mut x, mut g) = (vec![0.0; m + 2], vec![0.0; m + 2]);
        for site in 0..input.len() {
            let c = site / plane;
            let gamma = self.gamma[c];
            input.gather(site, &mut x);
            grad_out.gather(site, &mut g);
            let s = &x[1..=m];
            let r = x[m + 1];
            let mu = s.iter().sum::<f64>() / m as f64;
            let d = (s.iter().map(|v| v * v).sum::<f64>() + r * r + self.eps).sqrt();
            let gs = &g[1..=m];
            let g_mean = gs.iter().sum::<f64>() / m as f64;
            let g_dot_u: f64 = gs.iter().zip(s).map(|(gk, sk)| gk * (sk - mu)).sum();
            gg[c] += g_dot_u / d;
            gbeta[c] += gs.iter().sum::<f64>();
            let coupling = gamma * g_dot_u / (d * d * d);
            let mut gx = g.clone();
            for k in 0..m {
                gx[k + 1] = gamma * (gs[k] - g_mean) / d - coupling * s[k];
            }
            gx[m + 1] = g[m + 1] - coupling * r;
            gin.scatter(site, &gx);
        }
        Ok((gin, BatchNormGrads { gamma: gg, beta: gbeta }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::canonical::CanonicalForm;
    use crate::layers::testutil::{check_input_grad, random_tensor};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn unit_variance_centered_sens_unchanged() {
        // sens zero-mean with Σ s² + r² + ε = 1
        let e = BN_EPS;
        let s = ((1.0 - e - 0.36) / 2.0).sqrt();
        let f = CanonicalForm::new(0.7, vec![s, -s], 0.6).unwrap();
        let t = CanonicalTensor::from_forms(Shape::new(1, 1, 1), std::slice::from_ref(&f)).unwrap();
        let out = BatchNorm::new(1).forward(&t).unwrap().form(0);
        for (a, b) in out.sens().iter().zip(f.sens()) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(out.mean(), 0.7);
        assert_eq!(out.noise(), 0.6);
    }

    #[test]
    fn constant_sens_collapse_to_beta() {
        let f = CanonicalForm::new(1.0, vec![0.4; 3], 0.2).unwrap();
        let t = CanonicalTensor::from_forms(Shape::new(1, 1, 1), &[f]).unwrap();
        let mut bn = BatchNorm::new(1);
        bn.beta[0] = 0.25;
        bn.gamma[0] = 3.0;
        let out = bn.forward(&t).unwrap().form(0);
        assert!(out.sens().iter().all(|&v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn matches_direct_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let t = random_tensor(&mut rng, Shape::new(2, 1, 2), 3);
        let bn = BatchNorm {
            gamma: vec![1.5, -0.5],
            beta: vec![0.1, 0.2],
            eps: BN_EPS,
        };
        let out = bn.forward(&t).unwrap();
        for site in 0..4 {
            let f = t.form(site);
            let c = site / 2;
            let mu = f.sens().iter().sum::<f64>() / 3.0;
            let sigma2 = f.variance();
            for (k, v) in out.form(site).sens().iter().enumerate() {
                let want = bn.gamma[c] * (f.sens()[k] - mu) / (sigma2 + BN_EPS).sqrt() + bn.beta[c];
                assert!((v - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn input_gradient_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let t = random_tensor(&mut rng, Shape::new(2, 1, 2), 4);
            let bn = BatchNorm {
                gamma: vec![rng.random_range(0.5..2.0), rng.random_range(-2.0..-0.5)],
                beta: vec![rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)],
                eps: BN_EPS,
            };
            let err = check_input_grad(
                &mut rng,
                &t,
                |x| bn.forward(x).unwrap(),
                |x, g| bn.backward(x, g).unwrap().0,
            );
            assert!(err <= 1e-4, "{err}");
        }
    }
}
