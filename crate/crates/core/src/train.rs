//! Snippet-level detection training and evaluation.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::detect::{
    best_prediction, default_anchors, iou, map_at_50, objective, polyfit_correct, Anchor,
    BoxCoords, BoxPrediction, DetectConfig, Detection, GroundTruth, Objective, HEAD_OUTPUTS,
};
use crate::error::{check_dim, Result, ScnnError};
use crate::ica::{extract, IcaConfig, Snippet, SnippetModel};
use crate::io::{track_targets, RunConfig, TrackRow};
use crate::layers::{fold_frame_grads, unmix_output, Gradients, LayerSpec, Network, Sgd};
use crate::tensor::Shape;

/// conv3x3(8)-relu-pool2-conv3x3(16)-relu-pool2-fc, ending in the detection
/// head's raw outputs.
pub fn micro_net_specs() -> Vec<LayerSpec> {
    vec![
        LayerSpec::Conv { out_channels: 8, kernel: 3, stride: 1, padding: 1 },
        LayerSpec::Relu,
        LayerSpec::MaxPool { kernel: 2, stride: 2 },
        LayerSpec::Conv { out_channels: 16, kernel: 3, stride: 1, padding: 1 },
        LayerSpec::Relu,
        LayerSpec::MaxPool { kernel: 2, stride: 2 },
        LayerSpec::Fc { out_features: HEAD_OUTPUTS },
    ]
}

/// The micro-net without activations or pooling: strided convolutions
/// only, then the head.
pub fn conv_micro_net_specs() -> Vec<LayerSpec> {
    vec![
        LayerSpec::Conv { out_channels: 8, kernel: 3, stride: 1, padding: 1 },
        LayerSpec::Conv { out_channels: 16, kernel: 3, stride: 2, padding: 1 },
        LayerSpec::Conv { out_channels: 16, kernel: 3, stride: 2, padding: 1 },
        LayerSpec::Fc { out_features: HEAD_OUTPUTS },
    ]
}

/// Extracted snippet plus its per-frame targets.
#[derive(Debug, Clone)]
pub struct Sample {
    pub model: SnippetModel,
    pub truth: Vec<Option<BoxCoords>>,
}

/// Runs extraction over a corpus in parallel; output order follows input.
pub fn prepare(corpus: &[(Snippet, Vec<TrackRow>)], m: usize, ica: &IcaConfig) -> Result<Vec<Sample>> {
    corpus
        .par_iter()
        .map(|(snip, track)| {
            Ok(Sample {
                model: extract(snip, m, ica)?,
                truth: track_targets(track, snip.n())?,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Epoch `e` (from 0) runs at `lr / (1 + lr_decay·e)`.
    pub lr_decay: f64,
    /// Reshuffle the visiting order every epoch; otherwise corpus order.
    pub shuffle: bool,
    pub detect: DetectConfig,
}

impl From<&RunConfig> for TrainConfig {
    fn from(c: &RunConfig) -> Self {
        Self {
            lr: c.lr,
            momentum: c.momentum,
            weight_decay: c.weight_decay,
            batch_size: c.batch_size,
            epochs: c.epochs,
            seed: c.seed,
            lr_decay: c.lr_decay,
            shuffle: c.shuffle,
            detect: c.detect,
        }
    }
}

/// Raw head outputs per frame.
pub fn head_outputs(net: &Network, model: &SnippetModel) -> Result<Vec<Vec<f64>>> {
    check_dim(HEAD_OUTPUTS, net.output_shape().len())?;
    unmix_output(&net.infer(&model.canonical)?, &model.realizations)
}

/// Loss and parameter gradients of one snippet.
pub fn sample_gradients(
    net: &Network,
    sample: &Sample,
    anchors: &[Anchor],
    cfg: &DetectConfig,
) -> Result<(Objective, Gradients)> {
    let trace = net.forward(&sample.model.canonical)?;
    let frames = unmix_output(trace.output(), &sample.model.realizations)?;
    let obj = objective(&frames, &sample.truth, anchors, cfg)?;
    let g_out = fold_frame_grads(net.output_shape(), &obj.grad, &sample.model.realizations)?;
    let (grads, _) = net.backward(&trace, &g_out)?;
    Ok((obj, grads))
}

/// Per-frame boxes: the most confident anchor, then the trajectory
/// smoothed by the polynomial fit.
pub fn predict(
    net: &Network,
    model: &SnippetModel,
    anchors: &[Anchor],
    cfg: &DetectConfig,
) -> Result<Vec<BoxPrediction>> {
    let frames = head_outputs(net, model)?;
    let mut preds: Vec<BoxPrediction> = frames
        .iter()
        .map(|f| best_prediction(f, anchors, cfg.softplus_beta))
        .collect::<Result<_>>()?;
    if preds.len() > cfg.degree {
        let boxes: Vec<BoxCoords> = preds.iter().map(|p| p.bbox).collect();
        let (fitted, _) = polyfit_correct(&boxes, cfg.degree)?;
        for (p, f) in preds.iter_mut().zip(fitted) {
            p.bbox = f;
        }
    }
    Ok(preds)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    /// Mean of the per-snippet losses seen during the epoch.
    pub loss: f64,
    pub train_iou: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalStats {
    pub loss: f64,
    pub mean_iou: f64,
    pub map50: f64,
}

pub struct Trainer {
    pub net: Network,
    pub opt: Sgd,
    pub cfg: TrainConfig,
    pub anchors: [Anchor; 5],
    epoch: usize,
}

impl Trainer {
    pub fn new(net: Network, cfg: TrainConfig) -> Result<Self> {
        if cfg.batch_size == 0 {
            return Err(ScnnError::Config("batch_size must be positive".into()));
        }
        check_dim(HEAD_OUTPUTS, net.output_shape().len())?;
        Ok(Self {
            net,
            opt: Sgd::new(cfg.lr, cfg.momentum, cfg.weight_decay),
            cfg,
            anchors: default_anchors(),
            epoch: 0,
        })
    }

    pub fn epochs_done(&self) -> usize {
        self.epoch
    }

    /// One shuffled pass of minibatch SGD. Per-snippet gradients are computed
    /// in parallel and summed in a fixed order, so results do not depend on
    /// the thread count.
    pub fn epoch(&mut self, samples: &[Sample]) -> Result<EpochStats> {
        if samples.is_empty() {
            return Err(ScnnError::EmptyInput("no training samples"));
        }
        let mut order: Vec<usize> = (0..samples.len()).collect();
        if self.cfg.shuffle {
            let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed ^ (self.epoch as u64 + 1) << 32);
            order.shuffle(&mut rng);
        }
        self.opt.lr = self.cfg.lr / (1.0 + self.cfg.lr_decay * self.epoch as f64);
        let (mut loss, mut iou_sum) = (0.0, 0.0);
        for batch in order.chunks(self.cfg.batch_size) {
            let results: Vec<(Objective, Gradients)> = batch
                .par_iter()
                .map(|&i| sample_gradients(&self.net, &samples[i], &self.anchors, &self.cfg.detect))
                .collect::<Result<_>>()?;
            let mut total = Gradients::zeros_like(&self.net);
            for (obj, g) in &results {
                loss += obj.loss;
                iou_sum += obj.mean_iou;
                total.add_assign(g);
            }
            total.scale(1.0 / batch.len() as f64);
            self.opt.step(&mut self.net, &total)?;
        }
        self.epoch += 1;
        let n = samples.len() as f64;
        Ok(EpochStats {
            epoch: self.epoch,
            loss: loss / n,
            train_iou: iou_sum / n,
        })
    }

    pub fn evaluate(&self, samples: &[Sample]) -> Result<EvalStats> {
        evaluate(&self.net, samples, &self.anchors, &self.cfg.detect)
    }
}

/// Held-out loss, mean IOU of the corrected boxes, and mAP@0.5 with one
/// detection per frame.
pub fn evaluate(
    net: &Network,
    samples: &[Sample],
    anchors: &[Anchor],
    cfg: &DetectConfig,
) -> Result<EvalStats> {
    if samples.is_empty() {
        return Err(ScnnError::EmptyInput("no evaluation samples"));
    }
    let per: Vec<(f64, Vec<BoxPrediction>)> = samples
        .par_iter()
        .map(|s| {
            let frames = head_outputs(net, &s.model)?;
            let obj = objective(&frames, &s.truth, anchors, cfg)?;
            Ok((obj.loss, predict(net, &s.model, anchors, cfg)?))
        })
        .collect::<Result<_>>()?;
    let (mut loss, mut iou_sum, mut frames) = (0.0, 0.0, 0usize);
    let mut dets = Vec::new();
    let mut gts = Vec::new();
    for (si, ((l, preds), s)) in per.iter().zip(samples).enumerate() {
        loss += l;
        for (t, (p, gt)) in preds.iter().zip(&s.truth).enumerate() {
            let image = si * preds.len() + t;
            dets.push(Detection { image, class: 0, confidence: p.confidence, bbox: p.bbox });
            if let Some(g) = gt {
                iou_sum += iou(&p.bbox, g);
                frames += 1;
                gts.push(GroundTruth { image, class: 0, bbox: *g });
            }
        }
    }
    let map50 = if gts.is_empty() { 0.0 } else { map_at_50(&dets, &gts)? };
    Ok(EvalStats {
        loss: loss / samples.len() as f64,
        mean_iou: iou_sum / frames.max(1) as f64,
        map50,
    })
}

/// Network for a run: the description file if one is named, otherwise the
/// micro-net on the configured image shape.
pub fn build_network(cfg: &RunConfig, described: Option<(Shape, Vec<LayerSpec>)>) -> Result<Network> {
    let (input, specs) = described.unwrap_or_else(|| {
        (
            Shape::new(cfg.channels, cfg.image_size, cfg.image_size),
            micro_net_specs(),
        )
    });
    Network::init(input, &specs, cfg.seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_corpus, SceneSpec};

    fn small_corpus(count: usize, seed: u64) -> Vec<Sample> {
        let spec = SceneSpec { size: 16, channels: 1, n: 8, ..SceneSpec::default() };
        let corpus = generate_corpus(&spec, count, seed).unwrap();
        prepare(&corpus, 4, &IcaConfig::default()).unwrap()
    }

    fn small_net() -> Network {
        Network::init(
            Shape::new(1, 16, 16),
            &[
                LayerSpec::Conv { out_channels: 4, kernel: 3, stride: 1, padding: 1 },
                LayerSpec::Relu,
                LayerSpec::MaxPool { kernel: 2, stride: 2 },
                LayerSpec::Fc { out_features: HEAD_OUTPUTS },
            ],
            1,
        )
        .unwrap()
    }

    #[test]
    fn training_reduces_loss() {
        let samples = small_corpus(12, 3);
        let cfg = TrainConfig {
            lr: 0.01,
            momentum: 0.9,
            weight_decay: 0.0005,
            batch_size: 4,
            epochs: 5,
            seed: 0,
            lr_decay: 0.0,
            shuffle: true,
            detect: DetectConfig::default(),
        };
        let mut tr = Trainer::new(small_net(), cfg).unwrap();
        let before = tr.evaluate(&samples).unwrap().loss;
        for _ in 0..5 {
            tr.epoch(&samples).unwrap();
        }
        let after = tr.evaluate(&samples).unwrap().loss;
        assert!(after < before, "{after} !< {before}");
    }

    #[test]
    fn epochs_are_deterministic() {
        let samples = small_corpus(6, 4);
        let cfg = TrainConfig {
            lr: 0.01,
            momentum: 0.9,
            weight_decay: 0.0,
            batch_size: 3,
            epochs: 1,
            seed: 5,
            lr_decay: 0.1,
            shuffle: true,
            detect: DetectConfig::default(),
        };
        let mut a = Trainer::new(small_net(), cfg).unwrap();
        let mut b = Trainer::new(small_net(), cfg).unwrap();
        assert_eq!(a.epoch(&samples).unwrap(), b.epoch(&samples).unwrap());
        assert_eq!(a.net, b.net);
    }

    #[test]
    fn predictions_cover_every_frame() {
        let samples = small_corpus(1, 8);
        let preds = predict(&small_net(), &samples[0].model, &default_anchors(), &DetectConfig::default()).unwrap();
        assert_eq!(preds.len(), 8);
    }
}
