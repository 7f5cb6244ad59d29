//! 2-D cross-correlation over stacks of scalar planes, and the canonical
//! convolution layer built on it.
//!
//! Every kernel here processes `planes` independent `C×H×W` images that share
//! one weight tensor: the mean and sensitivity planes of a canonical tensor in
//! the statistical path, or the `N` frames of a snippet in the per-frame
//! baseline.

use crate::error::{Result, ScnnError};
use crate::tensor::{CanonicalTensor, Shape};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub input: Shape,
    pub output: Shape,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub fn new(
        input: Shape,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        if kernel == 0 || stride == 0 {
            return Err(ScnnError::ShapeMismatch(
                "kernel and stride must be positive".into(),
            ));
        }
        let ph = input.h + 2 * padding;
        let pw = input.w + 2 * padding;
        if kernel > ph || kernel > pw {
            return Err(ScnnError::ShapeMismatch(format!(
                "kernel {kernel} does not fit input {input} with padding {padding}"
            )));
        }
        let output = Shape::new(
            out_channels,
            (ph - kernel) / stride + 1,
            (pw - kernel) / stride + 1,
        );
        Ok(Self {
            input,
            output,
            kernel,
            stride,
            padding,
        })
    }

    pub fn weight_len(&self) -> usize {
        self.output.c * self.input.c * self.kernel * self.kernel
    }

    /// Multiply-accumulates of one plane.
    pub fn macs(&self) -> u64 {
        (self.output.len() * self.input.c * self.kernel * self.kernel) as u64
    }

    // Output columns `ox` whose input column `ox*s + kx - pad` lies in [0, w).
    #[inline]
    fn valid_range(&self, k_off: usize, in_len: usize, out_len: usize) -> (usize, usize) {
        let s = self.stride;
        let pad = self.padding;
        let lo = if k_off >= pad {
            0
        } else {
            (pad - k_off).div_ceil(s)
        };
        // largest ox with ox*s + k_off - pad <= in_len - 1
        let hi = if in_len + pad > k_off {
            ((in_len - 1 + pad - k_off) / s + 1).min(out_len)
        } else {
            0
        };
        (lo, hi.max(lo))
    }
}

/// Forward cross-correlation of `planes` stacked images.
pub fn conv_planes(input: &[f64], planes: usize, geo: &ConvGeometry, weight: &[f64]) -> Vec<f64> {
    let (ins, outs) = (geo.input, geo.output);
    let k = geo.kernel;
    let s = geo.stride;
    debug_assert_eq!(input.len(), planes * ins.len());
    debug_assert_eq!(weight.len(), geo.weight_len());
    let mut out = vec![0.0; planes * outs.len()];
    for p in 0..planes {
        let inp = &input[p * ins.len()..(p + 1) * ins.len()];
        let outp = &mut out[p * outs.len()..(p + 1) * outs.len()];
        for oc in 0..outs.c {
            let out_ch = &mut outp[oc * outs.plane_len()..(oc + 1) * outs.plane_len()];
            for ic in 0..ins.c {
                let in_ch = &inp[ic * ins.plane_len()..(ic + 1) * ins.plane_len()];
                let wbase = (oc * ins.c + ic) * k * k;
                for ky in 0..k {
                    let (oy0, oy1) = geo.valid_range(ky, ins.h, outs.h);
                    for kx in 0..k {
                        let w = weight[wbase + ky * k + kx];
                        if w == 0.0 {
                            continue;
                        }
                        let (ox0, ox1) = geo.valid_range(kx, ins.w, outs.w);
                        for oy in oy0..oy1 {
                            let iy = oy * s + ky - geo.padding;
                            let orow = &mut out_ch[oy * outs.w..(oy + 1) * outs.w];
                            let irow = &in_ch[iy * ins.w..(iy + 1) * ins.w];
                            if s == 1 {
                                let ix0 = ox0 + kx - geo.padding;
                                for (o, i) in orow[ox0..ox1]
                                    .iter_mut()
                                    .zip(&irow[ix0..ix0 + (ox1 - ox0)])
                                {
                                    *o += w * i;
                                }
                            } else {
                                for ox in ox0..ox1 {
                                    orow[ox] += w * irow[ox * s + kx - geo.padding];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Gradient of [`conv_planes`] with respect to its input.
pub fn conv_planes_grad_input(
    grad_out: &[f64],
    planes: usize,
    geo: &ConvGeometry,
    weight: &[f64],
) -> Vec<f64> {
    let (ins, outs) = (geo.input, geo.output);
    let k = geo.kernel;
    let s = geo.stride;
    let mut gin = vec![0.0; planes * ins.len()];
    for p in 0..planes {
        let gop = &grad_out[p * outs.len()..(p + 1) * outs.len()];
        let gip = &mut gin[p * ins.len()..(p + 1) * ins.len()];
        for oc in 0..outs.c {
            let go_ch = &gop[oc * outs.plane_len()..(oc + 1) * outs.plane_len()];
            for ic in 0..ins.c {
                let gi_ch = &mut gip[ic * ins.plane_len()..(ic + 1) * ins.plane_len()];
                let wbase = (oc * ins.c + ic) * k * k;
                for ky in 0..k {
                    let (oy0, oy1) = geo.valid_range(ky, ins.h, outs.h);
                    for kx in 0..k {
                        let w = weight[wbase + ky * k + kx];
                        if w == 0.0 {
                            continue;
                        }
                        let (ox0, ox1) = geo.valid_range(kx, ins.w, outs.w);
                        for oy in oy0..oy1 {
                            let iy = oy * s + ky - geo.padding;
                            let grow = &go_ch[oy * outs.w..(oy + 1) * outs.w];
                            let irow = &mut gi_ch[iy * ins.w..(iy + 1) * ins.w];
                            if s == 1 {
                                let ix0 = ox0 + kx - geo.padding;
                                for (i, g) in irow[ix0..ix0 + (ox1 - ox0)]
                                    .iter_mut()
                                    .zip(&grow[ox0..ox1])
                                {
                                    *i += w * g;
                                }
                            } else {
                                for ox in ox0..ox1 {
                                    irow[ox * s + kx - geo.padding] += w * grow[ox];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    gin
}

/// Gradient of [`conv_planes`] with respect to the shared weight, summed over
/// planes and accumulated into `grad_w`.
pub fn conv_planes_grad_weight(
    grad_out: &[f64],
    input: &[f64],
    planes: usize,
    geo: &ConvGeometry,
    grad_w: &mut [f64],
) {
    let (ins, outs) = (geo.input, geo.output);
    let k = geo.kernel;
    let s = geo.stride;
    for p in 0..planes {
        let gop = &grad_out[p * outs.len()..(p + 1) * outs.len()];
        let inp = &input[p * ins.len()..(p + 1) * ins.len()];
        for oc in 0..outs.c {
            let go_ch = &gop[oc * outs.plane_len()..(oc + 1) * outs.plane_len()];
            for ic in 0..ins.c {
                let in_ch = &inp[ic * ins.plane_len()..(ic + 1) * ins.plane_len()];
                let wbase = (oc * ins.c + ic) * k * k;
                for ky in 0..k {
                    let (oy0, oy1) = geo.valid_range(ky, ins.h, outs.h);
                    for kx in 0..k {
                        let (ox0, ox1) = geo.valid_range(kx, ins.w, outs.w);
                        let mut acc = 0.0;
                        for oy in oy0..oy1 {
                            let iy = oy * s + ky - geo.padding;
                            let grow = &go_ch[oy * outs.w..(oy + 1) * outs.w];
                            let irow = &in_ch[iy * ins.w..(iy + 1) * ins.w];
                            if s == 1 {
                                let ix0 = ox0 + kx - geo.padding;
                                acc += grow[ox0..ox1]
                                    .iter()
                                    .zip(&irow[ix0..ix0 + (ox1 - ox0)])
                                    .map(|(g, i)| g * i)
                                    .sum::<f64>();
                            } else {
                                for ox in ox0..ox1 {
                                    acc += grow[ox] * irow[ox * s + kx - geo.padding];
                                }
                            }
                        }
                        grad_w[wbase + ky * k + kx] += acc;
                    }
                }
            }
        }
    }
}

/// Convolution with deterministic weights applied to a canonical tensor.
///
/// Mean and sensitivity planes are convolved with the kernel; the noise plane
/// is `sqrt(conv(noise², kernel²))`. Zero padding is a deterministic zero on
/// every plane. The bias only shifts the mean.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    /// `[out][in][ky][kx]`
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvGrads {
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Conv2d {
    pub fn zeros(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Self {
        Self {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            weight: vec![0.0; out_channels * in_channels * kernel * kernel],
            bias: vec![0.0; out_channels],
        }
    }

    pub fn geometry(&self, input: Shape) -> Result<ConvGeometry> {
        if input.c != self.in_channels {
            return Err(ScnnError::ShapeMismatch(format!(
                "conv expects {} input channels, got {}",
                self.in_channels, input.c
            )));
        }
        ConvGeometry::new(input, self.out_channels, self.kernel, self.stride, self.padding)
    }

    pub fn forward(&self, input: &CanonicalTensor) -> Result<CanonicalTensor> {
        let geo = self.geometry(input.shape())?;
        let m = input.m();
        let mut data = conv_planes(input.linear_planes(), m + 1, &geo, &self.weight);
        let plane = geo.output.plane_len();
        for (oc, b) in self.bias.iter().enumerate() {
            for v in &mut data[oc * plane..(oc + 1) * plane] {
                *v += b;
            }
        }
        let noise_sq: Vec<f64> = input.noise_plane().iter().map(|n| n * n).collect();
        let w_sq: Vec<f64> = self.weight.iter().map(|w| w * w).collect();
        let noise = conv_planes(&noise_sq, 1, &geo, &w_sq);
        data.extend(noise.into_iter().map(|v| v.max(0.0).sqrt()));
        Ok(CanonicalTensor::from_raw_unchecked(geo.output, m, data))
    }

    /// Returns the input gradient and the parameter gradients.
    pub fn backward(
        &self,
        input: &CanonicalTensor,
        output: &CanonicalTensor,
        grad_out: &CanonicalTensor,
    ) -> Result<(CanonicalTensor, ConvGrads)> {
        let geo = self.geometry(input.shape())?;
        let m = input.m();
        let g_lin = grad_out.linear_planes();
        let mut gin = conv_planes_grad_input(g_lin, m + 1, &geo, &self.weight);
        let mut gw = vec![0.0; self.weight.len()];
        conv_planes_grad_weight(g_lin, input.linear_planes(), m + 1, &geo, &mut gw);

        let plane = geo.output.plane_len();
        let gb: Vec<f64> = (0..self.out_channels)
            .map(|oc| grad_out.plane(0)[oc * plane..(oc + 1) * plane].iter().sum())
            .collect();

        // d out_noise / d (.) goes through out_noise² = Σ w² in_noise².
        let g_scaled: Vec<f64> = grad_out
            .noise_plane()
            .iter()
            .zip(output.noise_plane())
            .map(|(g, n)| if *n > 0.0 { g / n } else { 0.0 })
            .collect();
        let w_sq: Vec<f64> = self.weight.iter().map(|w| w * w).collect();
        let g_noise_in = conv_planes_grad_input(&g_scaled, 1, &geo, &w_sq);
        gin.extend(
            g_noise_in
                .iter()
                .zip(input.noise_plane())
                .map(|(g, n)| g * n),
        );
        let noise_sq: Vec<f64> = input.noise_plane().iter().map(|n| n * n).collect();
        let mut gw_noise = vec![0.0; self.weight.len()];
        conv_planes_grad_weight(&g_scaled, &noise_sq, 1, &geo, &mut gw_noise);
        for ((g, gn), w) in gw.iter_mut().zip(&gw_noise).zip(&self.weight) {
            *g += w * gn;
        }
        Ok((
            CanonicalTensor::from_raw_unchecked(input.shape(), m, gin),
            ConvGrads {
                weight: gw,
                bias: gb,
            },
        ))
    }

    /// Deterministic convolution of `frames` stacked images (per-frame baseline).
    pub fn forward_frames(&self, frames: &[f64], count: usize, input: Shape) -> Result<Vec<f64>> {
        let geo = self.geometry(input)?;
        let mut out = conv_planes(frames, count, &geo, &self.weight);
        let plane = geo.output.plane_len();
        for f in 0..count {
            let base = f * geo.output.len();
            for (oc, b) in self.bias.iter().enumerate() {
                for v in &mut out[base + oc * plane..base + (oc + 1) * plane] {
                    *v += b;
                }
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::canonical::{weighted_sum, CanonicalForm};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    // Direct-indexing reference convolution of one image.
    fn reference_conv(
        img: &[f64],
        ins: Shape,
        w: &[f64],
        oc_n: usize,
        k: usize,
        s: usize,
        pad: usize,
    ) -> Vec<f64> {
        let oh = (ins.h + 2 * pad - k) / s + 1;
        let ow = (ins.w + 2 * pad - k) / s + 1;
        let mut out = vec![0.0; oc_n * oh * ow];
        for oc in 0..oc_n {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0;
                    for ic in 0..ins.c {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * s + ky) as isize - pad as isize;
                                let ix = (ox * s + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= ins.h as isize || ix >= ins.w as isize {
                                    continue;
                                }
                                acc += w[((oc * ins.c + ic) * k + ky) * k + kx]
                                    * img[(ic * ins.h + iy as usize) * ins.w + ix as usize];
                            }
                        }
                    }
                    out[(oc * oh + oy) * ow + ox] = acc;
                }
            }
        }
        out
    }

    fn random_conv(rng: &mut ChaCha8Rng, ic: usize, oc: usize, k: usize, s: usize, p: usize) -> Conv2d {
        let mut c = Conv2d::zeros(ic, oc, k, s, p);
        c.weight.iter_mut().for_each(|w| *w = rng.random_range(-1.0..1.0));
        c.bias.iter_mut().for_each(|b| *b = rng.random_range(-0.5..0.5));
        c
    }

    fn random_tensor(rng: &mut ChaCha8Rng, shape: Shape, m: usize) -> CanonicalTensor {
        let forms: Vec<_> = (0..shape.len())
            .map(|_| {
                CanonicalForm::new(
                    rng.random_range(-1.0..1.0),
                    (0..m).map(|_| rng.random_range(-1.0..1.0)).collect(),
                    rng.random_range(0.0..1.0),
                )
                .unwrap()
            })
            .collect();
        CanonicalTensor::from_forms(shape, &forms).unwrap()
    }

    #[test]
    fn planar_kernel_matches_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for &(k, s, p) in &[(3, 1, 1), (3, 2, 0), (2, 2, 1), (1, 1, 0), (5, 3, 2)] {
            let ins = Shape::new(2, 7, 6);
            let geo = ConvGeometry::new(ins, 3, k, s, p).unwrap();
            let w: Vec<f64> = (0..geo.weight_len()).map(|_| rng.random_range(-1.0..1.0)).collect();
            let img: Vec<f64> = (0..ins.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
            let got = conv_planes(&img, 1, &geo, &w);
            let want = reference_conv(&img, ins, &w, 3, k, s, p);
            for (a, b) in got.iter().zip(&want) {
                assert!((a - b).abs() < 1e-12, "k={k} s={s} p={p}");
            }
        }
    }

    #[test]
    fn unit_kernel_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let t = random_tensor(&mut rng, Shape::new(1, 4, 4), 2);
        let mut c = Conv2d::zeros(1, 1, 1, 1, 0);
        c.weight[0] = 1.0;
        let out = c.forward(&t).unwrap();
        for (a, b) in out.data().iter().zip(t.data()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn deterministic_input_matches_scalar_conv() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let shape = Shape::new(2, 6, 6);
        let vals: Vec<f64> = (0..shape.len()).map(|_| rng.random_range(0.0..1.0)).collect();
        let t = CanonicalTensor::deterministic(shape, 3, &vals).unwrap();
        let c = random_conv(&mut rng, 2, 4, 3, 1, 1);
        let out = c.forward(&t).unwrap();
        let mut want = reference_conv(&vals, shape, &c.weight, 4, 3, 1, 1);
        let plane = 36;
        for (oc, b) in c.bias.iter().enumerate() {
            want[oc * plane..(oc + 1) * plane].iter_mut().for_each(|v| *v += b);
        }
        assert_eq!(out.mean_plane(), want.as_slice());
        assert!(out.data()[out.len()..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn sites_match_weighted_sum_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let shape = Shape::new(1, 8, 8);
        let t = random_tensor(&mut rng, shape, 2);
        let c = random_conv(&mut rng, 1, 1, 3, 1, 0);
        let out = c.forward(&t).unwrap();
        for oy in 0..6 {
            for ox in 0..6 {
                let mut ds = Vec::new();
                let mut ws = Vec::new();
                for ky in 0..3 {
                    for kx in 0..3 {
                        ds.push(t.form((oy + ky) * 8 + ox + kx));
                        ws.push(c.weight[ky * 3 + kx]);
                    }
                }
                let want = weighted_sum(&ds, &ws).unwrap();
                let got = out.form(oy * 6 + ox);
                assert!((got.mean() - c.bias[0] - want.mean()).abs() < 1e-12);
                for (a, b) in got.sens().iter().zip(want.sens()) {
                    assert!((a - b).abs() < 1e-12);
                }
                assert!((got.noise() - want.noise()).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn linear_part_commutes_with_evaluate() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let shape = Shape::new(2, 5, 5);
        let mut t = random_tensor(&mut rng, shape, 3);
        let m = t.m();
        t.plane_mut(m + 1).iter_mut().for_each(|v| *v = 0.0);
        let c = random_conv(&mut rng, 2, 3, 3, 1, 1);
        let x = [0.3, -1.1, 0.7];
        let lhs = c.forward(&t).unwrap().evaluate(&x).unwrap();
        let frame = t.evaluate(&x).unwrap();
        let rhs = c.forward_frames(&frame, 1, shape).unwrap();
        for (a, b) in lhs.iter().zip(&rhs) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn input_gradient_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for &(s, p) in &[(1, 1), (2, 0), (1, 0), (2, 1)] {
            for _ in 0..5 {
                let t = crate::layers::testutil::random_tensor(&mut rng, Shape::new(2, 5, 5), 2);
                let c = random_conv(&mut rng, 2, 2, 3, s, p);
                let err = crate::layers::testutil::check_input_grad(
                    &mut rng,
                    &t,
                    |x| c.forward(x).unwrap(),
                    |x, g| c.backward(x, &c.forward(x).unwrap(), g).unwrap().0,
                );
                assert!(err <= 1e-5, "s={s} p={p}: {err}");
            }
        }
    }

    #[test]
    fn rejects_bad_shapes() {
        let c = Conv2d::zeros(2, 1, 3, 1, 0);
        assert!(c.forward(&CanonicalTensor::zeros(Shape::new(1, 4, 4), 1)).is_err());
        let c = Conv2d::zeros(1, 1, 5, 1, 0);
        assert!(c.forward(&CanonicalTensor::zeros(Shape::new(1, 4, 4), 1)).is_err());
    }
}
