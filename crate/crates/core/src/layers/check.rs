//! Finite-difference checks for whole networks and the detection objective.

use crate::detect::{objective, Anchor, BoxCoords, DetectConfig};
use crate::error::{check_dim, Result, ScnnError};
use crate::grad::GradCheckReport;
use crate::layers::Network;
use crate::tensor::CanonicalTensor;

fn check_step(h: f64) -> Result<()> {
    if !(1e-7..=1e-3).contains(&h) {
        return Err(ScnnError::InvalidArgument(format!(
            "finite-difference step {h} outside [1e-7, 1e-3]"
        )));
    }
    Ok(())
}

/// Checks the input and parameter gradients of `L = <u, net(x)>`, where `u`
/// is laid out like the output tensor. Input noise entries below `10h` are
/// skipped.
pub fn network_grad_check(
    net: &Network,
    x: &CanonicalTensor,
    upstream: &CanonicalTensor,
    h: f64,
) -> Result<GradCheckReport> {
    check_step(h)?;
    check_dim(upstream.len(), net.output_shape().len())?;
    check_dim(upstream.m(), x.m())?;
    let u = upstream.data();
    let loss = |net: &Network, x: &CanonicalTensor| -> Result<f64> {
        Ok(net.infer(x)?.data().iter().zip(u).map(|(a, b)| a * b).sum())
    };
    let trace = net.forward(x)?;
    let (grads, gin) = net.backward(&trace, upstream)?;

    let mut report = GradCheckReport::default();
    let noise0 = (x.m() + 1) * x.len();
    for i in 0..x.data().len() {
        if i >= noise0 && x.data()[i] < 10.0 * h {
            report.skipped += 1;
            continue;
        }
        let mut p = x.clone();
        p.data_mut()[i] += h;
        let mut q = x.clone();
        q.data_mut()[i] -= h;
        let fd = (loss(net, &p)? - loss(net, &q)?) / (2.0 * h);
        report.push(format!("d L / d input[{i}]"), gin.data()[i], fd);
    }
    for (li, layer) in grads.layers.iter().enumerate() {
        for (pi, tensor) in layer.iter().enumerate() {
            for (wi, &analytic) in tensor.iter().enumerate() {
                let mut plus = net.clone();
                plus.params_mut()[li][pi][wi] += h;
                let mut minus = net.clone();
                minus.params_mut()[li][pi][wi] -= h;
                let fd = (loss(&plus, x)? - loss(&minus, x)?) / (2.0 * h);
                let name = net.layers()[li].name();
                report.push(format!("d L / d {name}{li}.param{pi}[{wi}]"), analytic, fd);
            }
        }
    }
    Ok(report)
}

/// Checks the objective gradient against central differences on every raw
/// head output.
pub fn objective_grad_check(
    raw: &[Vec<f64>],
    truth: &[Option<BoxCoords>],
    anchors: &[Anchor],
    cfg: &DetectConfig,
    h: f64,
) -> Result<GradCheckReport> {
    check_step(h)?;
    let obj = objective(raw, truth, anchors, cfg)?;
    let mut report = GradCheckReport::default();
    for t in 0..raw.len() {
        for i in 0..raw[t].len() {
            let mut p = raw.to_vec();
            p[t][i] += h;
            let mut q = raw.to_vec();
            q[t][i] -= h;
            let fd = (objective(&p, truth, anchors, cfg)?.loss - objective(&q, truth, anchors, cfg)?.loss)
                / (2.0 * h);
            report.push(format!("d L / d raw[{t}][{i}]"), obj.grad[t][i], fd);
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detect::{default_anchors, HEAD_OUTPUTS};
    use crate::grad::FD_STEP;
    use crate::layers::testutil::random_tensor;
    use crate::layers::LayerSpec;
    use crate::tensor::Shape;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn conv_pool_net_passes() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let net = Network::init(
            Shape::new(1, 4, 4),
            &[
                LayerSpec::Conv { out_channels: 2, kernel: 3, stride: 1, padding: 1 },
                LayerSpec::MaxPool { kernel: 2, stride: 2 },
            ],
            3,
        )
        .unwrap();
        let x = random_tensor(&mut rng, net.input_shape(), 2);
        let u: Vec<f64> = (0..net.output_shape().len() * 4).map(|_| rng.random_range(-1.0..1.0)).collect();
        let u = CanonicalTensor::gradient(net.output_shape(), 2, u).unwrap();
        let r = network_grad_check(&net, &x, &u, FD_STEP).unwrap();
        assert_eq!(r.entries.len() + r.skipped, 16 * 4 + 2 * 9 + 2);
        assert!(r.passes(1e-4), "{}", r.max_rel_err);
    }

    #[test]
    fn corrupted_gradient_is_caught() {
        let mut r = GradCheckReport::default();
        r.push("x".into(), 1.0, 1.1);
        assert!(!r.passes(1e-4));
        let mut r = GradCheckReport::default();
        r.push("roundoff".into(), 1e-12, 3e-12);
        assert!(r.passes(1e-4));
    }

    #[test]
    fn objective_check_covers_every_output() {
        let raw = vec![vec![0.1; HEAD_OUTPUTS]; 4];
        let truth = vec![Some(BoxCoords::new(0.5, 0.5, 0.3, 0.3)); 4];
        let r = objective_grad_check(&raw, &truth, &default_anchors(), &DetectConfig::default(), FD_STEP).unwrap();
        assert_eq!(r.entries.len(), 4 * HEAD_OUTPUTS);
        assert!(objective_grad_check(&raw, &truth, &default_anchors(), &DetectConfig::default(), 1.0).is_err());
    }
}
