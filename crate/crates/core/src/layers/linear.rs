//! Fully connected layer over a flattened canonical tensor.

use crate::error::{Result, ScnnError};
use crate::tensor::{CanonicalTensor, Shape};

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub in_features: usize,
    pub out_features: usize,
    /// Row-major `out × in`.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearGrads {
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Linear {
    pub fn zeros(in_features: usize, out_features: usize) -> Self {
        Self {
            in_features,
            out_features,
            weight: vec![0.0; in_features * out_features],
            bias: vec![0.0; out_features],
        }
    }

    pub fn output_shape(&self, input: Shape) -> Result<Shape> {
        if input.len() != self.in_features {
            return Err(ScnnError::ShapeMismatch(format!(
                "fc expects {} inputs, got {input}",
                self.in_features
            )));
        }
        Ok(Shape::new(self.out_features, 1, 1))
    }

    fn matvec(&self, x: &[f64], out: &mut [f64]) {
        for (o, row) in out.iter_mut().zip(self.weight.chunks_exact(self.in_features)) {
            *o = row.iter().zip(x).map(|(w, v)| w * v).sum();
        }
    }

    pub fn forward(&self, input: &CanonicalTensor) -> Result<CanonicalTensor> {
        let shape = self.output_shape(input.shape())?;
        let m = input.m();
        let q = self.out_features;
        let mut out = CanonicalTensor::zeros(shape, m);
        for p in 0..=m {
            self.matvec(input.plane(p), out.plane_mut(p));
        }
        for (o, b) in out.plane_mut(0).iter_mut().zip(&self.bias) {
            *o += b;
        }
        let n_sq: Vec<f64> = input.noise_plane().iter().map(|n| n * n).collect();
        let noise = out.plane_mut(m + 1);
        for (j, row) in self.weight.chunks_exact(self.in_features).enumerate().take(q) {
            let v: f64 = row.iter().zip(&n_sq).map(|(w, s)| w * w * s).sum();
            noise[j] = v.sqrt();
        }
        Ok(out)
    }

    pub fn backward(
        &self,
        input: &CanonicalTensor,
        output: &CanonicalTensor,
        grad_out: &CanonicalTensor,
    ) -> Result<(CanonicalTensor, LinearGrads)> {
        self.output_shape(input.shape())?;
        let m = input.m();
        let pin = self.in_features;
        let mut gin = CanonicalTensor::zeros(input.shape(), m);
        let mut gw = vec![0.0; self.weight.len()];
        for p in 0..=m {
            let g = grad_out.plane(p);
            let x = input.plane(p);
            let gi = gin.plane_mut(p);
            for (j, row) in self.weight.chunks_exact(pin).enumerate() {
                let gj = g[j];
                if gj == 0.0 {
                    continue;
                }
                for ((gi, w), (gw, xv)) in gi
                    .iter_mut()
                    .zip(row)
                    .zip(gw[j * pin..(j + 1) * pin].iter_mut().zip(x))
                {
                    *gi += gj * w;
                    *gw += gj * xv;
                }
            }
        }
        let noise_in = input.noise_plane();
        let noise_out = output.noise_plane();
        let g_noise = grad_out.noise_plane().to_vec();
        let gi = gin.plane_mut(m + 1);
        for (j, row) in self.weight.chunks_exact(pin).enumerate() {
            if noise_out[j] <= 0.0 || g_noise[j] == 0.0 {
                continue;
            }
            let gs = g_noise[j] / noise_out[j];
            for (i, w) in row.iter().enumerate() {
                gi[i] += gs * w * w * noise_in[i];
                gw[j * pin + i] += gs * w * noise_in[i] * noise_in[i];
            }
        }
        Ok((
            gin,
            LinearGrads {
                weight: gw,
                bias: grad_out.plane(0).to_vec(),
            },
        ))
    }

    pub fn forward_frames(&self, frames: &[f64], count: usize) -> Result<Vec<f64>> {
        if frames.len() != count * self.in_features {
            return Err(ScnnError::ShapeMismatch("fc frame batch size".into()));
        }
        let mut out = vec![0.0; count * self.out_features];
        for (x, o) in frames
            .chunks_exact(self.in_features)
            .zip(out.chunks_exact_mut(self.out_features))
        {
            self.matvec(x, o);
            for (v, b) in o.iter_mut().zip(&self.bias) {
                *v += b;
            }
        }
        Ok(out)
    }
}
