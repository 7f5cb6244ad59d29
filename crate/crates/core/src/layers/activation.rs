//! ReLU and max-pooling, both built on the Clark max.

use crate::canonical::{clark_max_into, FormRef, MaxStats};
use crate::error::{check_dim, Result, ScnnError};
use crate::grad::max2_vjp_into;
use crate::tensor::{CanonicalTensor, Shape};

/// Tightness probabilities stored during a forward pass: a fixed-length fold
/// chain per output site.
#[derive(Debug, Clone, PartialEq)]
pub struct TightnessCache {
    per_site: usize,
    values: Vec<f64>,
}

impl TightnessCache {
    pub fn per_site(&self) -> usize {
        self.per_site
    }

    pub fn sites(&self) -> usize {
        self.values.len().checked_div(self.per_site).unwrap_or(0)
    }

    pub fn chain(&self, site: usize) -> &[f64] {
        &self.values[site * self.per_site..(site + 1) * self.per_site]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

fn view(buf: &[f64]) -> FormRef<'_> {
    let m = buf.len() - 2;
    FormRef {
        mean: buf[0],
        sens: &buf[1..=m],
        noise: buf[m + 1],
    }
}

// Clark max of two parameter buffers into `out`.
#[inline]
fn max_into(a: &[f64], b: &[f64], out: &mut [f64]) -> MaxStats {
    let m = a.len() - 2;
    let (mean, noise, stats) = clark_max_into(view(a), view(b), &mut out[1..=m]);
    out[0] = mean;
    out[m + 1] = noise;
    stats
}

/// Elementwise `max(x, 0)` with a deterministic zero reference.
pub fn relu_forward(input: &CanonicalTensor) -> (CanonicalTensor, TightnessCache) {
    let m = input.m();
    let p = m + 2;
    let zero = vec![0.0; p];
    let mut a = vec![0.0; p];
    let mut o = vec![0.0; p];
    let mut out = CanonicalTensor::zeros(input.shape(), m);
    let mut values = Vec::with_capacity(input.len());
    for site in 0..input.len() {
        input.gather(site, &mut a);
        let stats = max_into(&a, &zero, &mut o);
        out.scatter(site, &o);
        values.push(stats.tightness);
    }
    (
        out,
        TightnessCache {
            per_site: 1,
            values,
        },
    )
}

pub fn relu_backward(
    input: &CanonicalTensor,
    cache: &TightnessCache,
    grad_out: &CanonicalTensor,
) -> Result<CanonicalTensor> {
    check_dim(input.len(), grad_out.len())?;
    if cache.per_site != 1 || cache.values.len() != input.len() {
        return Err(ScnnError::MissingCache(0));
    }
    let m = input.m();
    let p = m + 2;
    let zero = vec![0.0; p];
    let (mut a, mut o, mut u, mut g) = (vec![0.0; p], vec![0.0; p], vec![0.0; p], vec![0.0; p]);
    let mut gin = CanonicalTensor::zeros(input.shape(), m);
    for site in 0..input.len() {
        input.gather(site, &mut a);
        grad_out.gather(site, &mut u);
        let stats = max_into(&a, &zero, &mut o);
        debug_assert_eq!(stats.tightness, cache.values[site]);
        g.iter_mut().for_each(|v| *v = 0.0);
        max2_vjp_into(view(&a), view(&zero), view(&o), &stats, &u, &mut g, None);
        gin.scatter(site, &g);
    }
    Ok(gin)
}

/// Unpadded max-pooling; each window is folded in row-major order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MaxPool {
    pub kernel: usize,
    pub stride: usize,
}

impl MaxPool {
    pub fn output_shape(&self, input: Shape) -> Result<Shape> {
        if self.kernel == 0 || self.stride == 0 {
            return Err(ScnnError::ShapeMismatch(
                "pool kernel and stride must be positive".into(),
            ));
        }
        if self.kernel > input.h || self.kernel > input.w {
            return Err(ScnnError::ShapeMismatch(format!(
                "pool window {} exceeds input {input}",
                self.kernel
            )));
        }
        Ok(Shape::new(
            input.c,
            (input.h - self.kernel) / self.stride + 1,
            (input.w - self.kernel) / self.stride + 1,
        ))
    }

    // Input sites of output window `o`, in fold order.
    fn window(&self, input: Shape, out: Shape, o: usize, sites: &mut Vec<usize>) {
        sites.clear();
        let c = o / out.plane_len();
        let oy = (o / out.w) % out.h;
        let ox = o % out.w;
        for ky in 0..self.kernel {
            for kx in 0..self.kernel {
                let y = oy * self.stride + ky;
                let x = ox * self.stride + kx;
                sites.push((c * input.h + y) * input.w + x);
            }
        }
    }

    pub fn forward(&self, input: &CanonicalTensor) -> Result<(CanonicalTensor, TightnessCache)> {
        let out_shape = self.output_shape(input.shape())?;
        let m = input.m();
        let p = m + 2;
        let per_site = self.kernel * self.kernel - 1;
        let mut out = CanonicalTensor::zeros(out_shape, m);
        let mut values = Vec::with_capacity(out_shape.len() * per_site);
        let (mut acc, mut next, mut b) = (vec![0.0; p], vec![0.0; p], vec![0.0; p]);
        let mut sites = Vec::new();
        for o in 0..out_shape.len() {
            self.window(input.shape(), out_shape, o, &mut sites);
            input.gather(sites[0], &mut acc);
            for &s in &sites[1..] {
                input.gather(s, &mut b);
                let stats = max_into(&acc, &b, &mut next);
                std::mem::swap(&mut acc, &mut next);
                values.push(stats.tightness);
            }
            out.scatter(o, &acc);
        }
        Ok((out, TightnessCache { per_site, values }))
    }

    /// Replays each window's fold, then walks it backwards.
    pub fn backward(
        &self,
        input: &CanonicalTensor,
        cache: &TightnessCache,
        grad_out: &CanonicalTensor,
    ) -> Result<CanonicalTensor> {
        let out_shape = self.output_shape(input.shape())?;
        check_dim(out_shape.len(), grad_out.len())?;
        let per_site = self.kernel * self.kernel - 1;
        if cache.per_site != per_site || cache.values.len() != out_shape.len() * per_site {
            return Err(ScnnError::MissingCache(0));
        }
        let m = input.m();
        let p = m + 2;
        let steps = self.kernel * self.kernel;
        let mut gin = CanonicalTensor::zeros(input.shape(), m);
        let mut accs = vec![0.0; steps * p];
        let mut stats = Vec::with_capacity(per_site);
        let mut b = vec![0.0; p];
        let (mut g_acc, mut ga, mut gb) = (vec![0.0; p], vec![0.0; p], vec![0.0; p]);
        let mut sites = Vec::new();
        for o in 0..out_shape.len() {
            self.window(input.shape(), out_shape, o, &mut sites);
            stats.clear();
            input.gather(sites[0], &mut accs[..p]);
            for (j, &s) in sites.iter().enumerate().skip(1) {
                input.gather(s, &mut b);
                let (prev, rest) = accs.split_at_mut(j * p);
                let st = max_into(&prev[(j - 1) * p..], &b, &mut rest[..p]);
                debug_assert_eq!(st.tightness, cache.chain(o)[j - 1]);
                stats.push(st);
            }
            grad_out.gather(o, &mut g_acc);
            for j in (1..steps).rev() {
                input.gather(sites[j], &mut b);
                ga.iter_mut().for_each(|v| *v = 0.0);
                gb.iter_mut().for_each(|v| *v = 0.0);
                max2_vjp_into(
                    view(&accs[(j - 1) * p..j * p]),
                    view(&b),
                    view(&accs[j * p..(j + 1) * p]),
                    &stats[j - 1],
                    &g_acc,
                    &mut ga,
                    Some(&mut gb),
                );
                gin.scatter_add(sites[j], &gb);
                std::mem::swap(&mut g_acc, &mut ga);
            }
            gin.scatter_add(sites[0], &g_acc);
        }
        Ok(gin)
    }

    /// Ordinary max-pooling of `count` stacked deterministic images.
    pub fn forward_frames(&self, frames: &[f64], count: usize, input: Shape) -> Result<Vec<f64>> {
        let out_shape = self.output_shape(input)?;
        let mut out = Vec::with_capacity(count * out_shape.len());
        let mut sites = Vec::new();
        for f in 0..count {
            let img = &frames[f * input.len()..(f + 1) * input.len()];
            for o in 0..out_shape.len() {
                self.window(input, out_shape, o, &mut sites);
                out.push(sites.iter().map(|&s| img[s]).fold(f64::NEG_INFINITY, f64::max));
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::canonical::{max_n, CanonicalForm};
    use crate::layers::testutil::{check_input_grad, random_tensor};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn relu_deterministic_limits() {
        let s = Shape::new(1, 1, 3);
        let t = CanonicalTensor::deterministic(s, 2, &[1.0, 2.5, 0.1]).unwrap();
        assert_eq!(relu_forward(&t).0, t);
        let t = CanonicalTensor::deterministic(s, 2, &[-1.0, -2.5, -0.1]).unwrap();
        assert_eq!(relu_forward(&t).0, CanonicalTensor::zeros(s, 2));
    }

    #[test]
    fn relu_standard_normal_mean() {
        let f = CanonicalForm::new(0.0, vec![], 1.0).unwrap();
        let t = CanonicalTensor::from_forms(Shape::new(1, 1, 1), &[f]).unwrap();
        let (out, cache) = relu_forward(&t);
        // E[max(Z, 0)] = φ(0)
        assert!((out.mean_plane()[0] - 0.398_942_280_4).abs() < 1e-9);
        assert_eq!(cache.chain(0), &[0.5]);
    }

    #[test]
    fn pool_identity_and_scalar_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let t = random_tensor(&mut rng, Shape::new(2, 4, 4), 3);
        let id = MaxPool { kernel: 1, stride: 1 };
        assert_eq!(id.forward(&t).unwrap().0, t);

        let vals: Vec<f64> = (0..32).map(|i| ((i * 7) % 11) as f64).collect();
        let d = CanonicalTensor::deterministic(Shape::new(2, 4, 4), 1, &vals).unwrap();
        let pool = MaxPool { kernel: 2, stride: 2 };
        let out = pool.forward(&d).unwrap().0;
        let want = pool.forward_frames(&vals, 1, d.shape()).unwrap();
        assert_eq!(out.mean_plane(), want.as_slice());
    }

    #[test]
    fn pool_matches_max_n_fold() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let t = random_tensor(&mut rng, Shape::new(1, 4, 4), 2);
        let pool = MaxPool { kernel: 2, stride: 2 };
        let (out, cache) = pool.forward(&t).unwrap();
        let window: Vec<_> = [0, 1, 4, 5].iter().map(|&s| t.form(s)).collect();
        let (want, chain) = max_n(&window).unwrap();
        assert_eq!(out.form(0), want);
        assert_eq!(cache.chain(0), chain.as_slice());
        assert!(cache.values().iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn pool_rejects_oversized_window() {
        let pool = MaxPool { kernel: 5, stride: 1 };
        assert!(pool.forward(&CanonicalTensor::zeros(Shape::new(1, 4, 4), 1)).is_err());
    }

    #[test]
    fn relu_gradient_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let t = random_tensor(&mut rng, Shape::new(1, 2, 3), 3);
            let err = check_input_grad(
                &mut rng,
                &t,
                |x| relu_forward(x).0,
                |x, g| relu_backward(x, &relu_forward(x).1, g).unwrap(),
            );
            assert!(err <= 1e-4, "{err}");
        }
    }

    #[test]
    fn pool_gradient_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for &(k, s) in &[(2, 2), (3, 1), (2, 1)] {
            for _ in 0..8 {
                let t = random_tensor(&mut rng, Shape::new(2, 4, 4), 2);
                let pool = MaxPool { kernel: k, stride: s };
                let err = check_input_grad(
                    &mut rng,
                    &t,
                    |x| pool.forward(x).unwrap().0,
                    |x, g| pool.backward(x, &pool.forward(x).unwrap().1, g).unwrap(),
                );
                assert!(err <= 1e-4, "k={k} s={s}: {err}");
            }
        }
    }
}
