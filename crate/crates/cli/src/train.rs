use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::Args;
use log::info;
use rayon::prelude::*;
use scnn_core::detect::{default_anchors, iou, map_at_50, Detection, GroundTruth};
use scnn_core::ica::{extract, Snippet};
use scnn_core::io::{read_checkpoint, track_targets, write_checkpoint, RunConfig, TrackRow};
use scnn_core::synth::generate_corpus;
use scnn_core::train::{predict, prepare, Sample, TrainConfig, Trainer};

use crate::common::{csv_writer, ica_config, load_snippet, network_for, snippet_paths};
use crate::error::{at, CliError};

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Training snippets (with tracks); synthesized from the config when omitted.
    #[arg(long, num_args = 1..)]
    pub train: Vec<PathBuf>,
    /// Held-out snippets (with tracks); synthesized from the config when omitted.
    #[arg(long, num_args = 1..)]
    pub test: Vec<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long, default_value = "model.scnw")]
    pub checkpoint: String,
}

#[derive(Args, Debug)]
pub struct InferArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Snippet files or directories of them.
    #[arg(required = true)]
    pub inputs: Vec<PathBuf>,
}

fn labelled(paths: &[PathBuf]) -> Result<Vec<(Snippet, Vec<TrackRow>)>, CliError> {
    snippet_paths(paths)?
        .iter()
        .map(|p| {
            let (snip, track) = load_snippet(p)?;
            let track = track.ok_or_else(|| CliError::Usage(format!("{} has no track file", p.display())))?;
            Ok((snip, track))
        })
        .collect()
}

fn corpus(cfg: &RunConfig, paths: &[PathBuf], count: usize, seed: u64) -> Result<Vec<Sample>, CliError> {
    let raw = if paths.is_empty() {
        generate_corpus(&cfg.scene(), count, seed)?
    } else {
        labelled(paths)?
    };
    Ok(prepare(&raw, cfg.m, &ica_config(cfg))?)
}

pub fn train(cfg: &RunConfig, out: &Path, args: &TrainArgs) -> Result<(), CliError> {
    let start = Instant::now();
    let train = corpus(cfg, &args.train, cfg.count, cfg.seed)?;
    let test = corpus(cfg, &args.test, cfg.test_count, cfg.seed.wrapping_add(1))?;
    info!("extracted {} training and {} held-out snippets", train.len(), test.len());
    let mut tcfg = TrainConfig::from(cfg);
    if let Some(e) = args.epochs {
        tcfg.epochs = e;
    }
    let mut trainer = Trainer::new(network_for(cfg)?, tcfg)?;

    let mut w = csv_writer(out, "train.csv")?;
    w.write_record(["epoch", "loss", "train_iou", "test_loss", "test_iou", "test_map50", "seconds"])?;
    for _ in 0..tcfg.epochs {
        let s = trainer.epoch(&train)?;
        let e = trainer.evaluate(&test)?;
        let secs = start.elapsed().as_secs_f64();
        w.write_record([
            s.epoch.to_string(),
            format!("{:.6}", s.loss),
            format!("{:.4}", s.train_iou),
            format!("{:.6}", e.loss),
            format!("{:.4}", e.mean_iou),
            format!("{:.4}", e.map50),
            format!("{secs:.1}"),
        ])?;
        w.flush()?;
        info!("epoch {}: loss {:.4}, held-out IOU {:.3}, mAP@0.5 {:.3}", s.epoch, s.loss, e.mean_iou, e.map50);
    }
    write_checkpoint(&out.join(&args.checkpoint), &trainer.net)?;
    Ok(())
}

pub fn infer(cfg: &RunConfig, out: &Path, args: &InferArgs) -> Result<(), CliError> {
    let net = at(&args.checkpoint, read_checkpoint(&args.checkpoint))?;
    let paths = snippet_paths(&args.inputs)?;
    let anchors = default_anchors();
    let ica = ica_config(cfg);
    let results = paths
        .par_iter()
        .map(|p| -> Result<_, CliError> {
            let (snip, track) = load_snippet(p)?;
            let model = extract(&snip, cfg.m, &ica)?;
            let preds = predict(&net, &model, &anchors, &cfg.detect)?;
            let truth = track.map(|t| track_targets(&t, snip.n())).transpose()?;
            Ok((preds, truth))
        })
        .collect::<Result<Vec<_>, _>>()?;

    let mut w = csv_writer(out, "infer.csv")?;
    w.write_record(["file", "frame", "cx", "cy", "w", "h", "confidence", "iou"])?;
    let (mut dets, mut gts) = (Vec::new(), Vec::new());
    let (mut iou_sum, mut scored) = (0.0, 0usize);
    let mut image = 0;
    for (p, (preds, truth)) in paths.iter().zip(&results) {
        for (t, pred) in preds.iter().enumerate() {
            let gt = truth.as_ref().and_then(|tr| tr[t]);
            let overlap = gt.map(|g| iou(&pred.bbox, &g));
            if let Some(g) = gt {
                iou_sum += overlap.unwrap_or(0.0);
                scored += 1;
                gts.push(GroundTruth { image, class: 0, bbox: g });
            }
            if truth.is_some() {
                dets.push(Detection { image, class: 0, confidence: pred.confidence, bbox: pred.bbox });
            }
            let b = pred.bbox;
            w.write_record([
                p.display().to_string(),
                t.to_string(),
                format!("{:.6}", b.cx),
                format!("{:.6}", b.cy),
                format!("{:.6}", b.w),
                format!("{:.6}", b.h),
                format!("{:.6}", pred.confidence),
                overlap.map_or(String::new(), |v| format!("{v:.6}")),
            ])?;
            image += 1;
        }
    }
    w.flush()?;

    let mut m = csv_writer(out, "infer_metrics.csv")?;
    m.write_record(["metric", "value"])?;
    m.write_record(["snippets".to_string(), paths.len().to_string()])?;
    m.write_record(["frames".to_string(), image.to_string()])?;
    if scored > 0 {
        let mean_iou = iou_sum / scored as f64;
        let map = map_at_50(&dets, &gts)?;
        m.write_record(["mean_iou".to_string(), format!("{mean_iou:.6}")])?;
        m.write_record(["map50".to_string(), format!("{map:.6}")])?;
        info!("{image} frames: mean IOU {mean_iou:.3}, mAP@0.5 {map:.3}");
    } else {
        info!("{image} frames, no tracks to score against");
    }
    m.flush()?;
    Ok(())
}
