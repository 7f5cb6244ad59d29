use std::hint::black_box;
use std::path::Path;
use std::time::Instant;

use clap::Args;
use log::info;
use scnn_core::ica::extract;
use scnn_core::io::RunConfig;
use scnn_core::layers::{count_ops, unmix_output, Network, OpMode};
use scnn_core::synth::{generate, SceneSpec};
use scnn_core::train::{conv_micro_net_specs, micro_net_specs};

use crate::common::{csv_writer, ica_config, network_for};
use crate::error::CliError;

#[derive(Args, Debug)]
pub struct BenchArgs {
    /// Timed repetitions per network; the median is reported.
    #[arg(long, default_value_t = 21)]
    pub reps: usize,
}

fn median_seconds(reps: usize, f: impl Fn() -> Result<(), CliError>) -> Result<f64, CliError> {
    f()?;
    let mut runs = Vec::with_capacity(reps);
    for _ in 0..reps {
        let t = Instant::now();
        f()?;
        runs.push(t.elapsed().as_secs_f64());
    }
    runs.sort_by(f64::total_cmp);
    Ok(runs[runs.len() / 2])
}

pub fn run(cfg: &RunConfig, out: &Path, args: &BenchArgs) -> Result<(), CliError> {
    if args.reps == 0 {
        return Err(CliError::Usage("--reps must be positive".into()));
    }
    let input = scnn_core::tensor::Shape::new(cfg.channels, cfg.image_size, cfg.image_size);
    let mut nets = vec![
        ("micro", Network::init(input, &micro_net_specs(), cfg.seed)?),
        ("micro_conv", Network::init(input, &conv_micro_net_specs(), cfg.seed)?),
    ];
    if !cfg.network.is_empty() {
        nets.push(("configured", network_for(cfg)?));
    }
    let (n, m) = (cfg.n, cfg.m);

    let mut summary = csv_writer(out, "bench.csv")?;
    summary.write_record([
        "network", "n", "m", "scnn_ops", "perframe_ops", "op_ratio", "model_ratio", "scnn_ms", "perframe_ms", "wall_ratio",
    ])?;
    let mut per_layer = csv_writer(out, "bench_layers.csv")?;
    per_layer.write_record(["network", "index", "layer", "scnn_ops", "perframe_ops"])?;
    for (name, net) in &nets {
        let shape = net.input_shape();
        if shape.h != shape.w {
            return Err(CliError::Usage(format!("{name}: benchmark needs square input, got {shape}")));
        }
        let scene = SceneSpec { n, size: shape.h, channels: shape.c, ..cfg.scene() };
        let (snip, _) = generate(&scene, cfg.seed)?;
        let model = extract(&snip, m, &ica_config(cfg))?;
        let frames = snip.frames_f64();

        let stat = count_ops(net, OpMode::Scnn, n, model.m());
        let base = count_ops(net, OpMode::PerFrame, n, model.m());
        for (i, (s, b)) in stat.layers.iter().zip(&base.layers).enumerate() {
            per_layer.write_record([name.to_string(), i.to_string(), s.name.to_string(), s.ops.to_string(), b.ops.to_string()])?;
        }
        let t_stat = median_seconds(args.reps, || {
            let y = net.infer(&model.canonical)?;
            black_box(unmix_output(&y, &model.realizations)?);
            Ok(())
        })?;
        let t_base = median_seconds(args.reps, || {
            black_box(net.forward_frames(&frames, n)?);
            Ok(())
        })?;
        let op_ratio = base.total as f64 / stat.total as f64;
        let model_ratio = n as f64 / (model.m() + 2) as f64;
        summary.write_record([
            name.to_string(),
            n.to_string(),
            model.m().to_string(),
            stat.total.to_string(),
            base.total.to_string(),
            format!("{op_ratio:.4}"),
            format!("{model_ratio:.4}"),
            format!("{:.3}", t_stat * 1e3),
            format!("{:.3}", t_base * 1e3),
            format!("{:.3}", t_base / t_stat),
        ])?;
        info!(
            "{name}: op ratio {op_ratio:.3} (model {model_ratio:.3}), wall-clock {:.2}x",
            t_base / t_stat
        );
    }
    summary.flush()?;
    per_layer.flush()?;
    Ok(())
}
