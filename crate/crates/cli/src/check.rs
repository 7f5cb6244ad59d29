use std::path::Path;

use clap::Args;
use log::{info, warn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use scnn_core::canonical::{evaluate, max2, CanonicalForm};
use scnn_core::detect::{default_anchors, BoxCoords, DetectConfig, HEAD_OUTPUTS};
use scnn_core::grad::{finite_diff_check, GradCheckReport, GradOp, FD_ABS_FLOOR, FD_STEP};
use scnn_core::io::RunConfig;
use scnn_core::layers::{network_grad_check, objective_grad_check, LayerSpec, Network};
use scnn_core::tensor::{CanonicalTensor, Shape};

use crate::common::csv_writer;
use crate::error::CliError;

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    /// Non-degenerate cases per kernel.
    #[arg(long, default_value_t = 20)]
    pub cases: usize,
    #[arg(long, default_value_t = 1e-4)]
    pub tol: f64,
    /// Tolerance for the multi-layer network.
    #[arg(long, default_value_t = 1e-3)]
    pub network_tol: f64,
    #[arg(long, default_value_t = FD_STEP)]
    pub step: f64,
}

#[derive(Args, Debug)]
pub struct OracleArgs {
    #[arg(long, default_value_t = 50)]
    pub pairs: usize,
    #[arg(long, default_value_t = 1_000_000)]
    pub draws: usize,
    /// Largest basis size drawn.
    #[arg(long, default_value_t = 4)]
    pub max_m: usize,
    #[arg(long, default_value_t = 0.01)]
    pub mean_tol: f64,
    #[arg(long, default_value_t = 0.03)]
    pub var_tol: f64,
}

fn random_form(rng: &mut ChaCha8Rng, m: usize, lo: f64, hi: f64) -> CanonicalForm {
    CanonicalForm::new(
        rng.random_range(lo..hi),
        (0..m).map(|_| rng.random_range(-1.0..1.0)).collect(),
        rng.random_range(0.1..1.0),
    )
    .expect("finite draws")
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: Shape, m: usize) -> CanonicalTensor {
    let forms: Vec<_> = (0..shape.len()).map(|_| random_form(rng, m, -1.0, 1.0)).collect();
    CanonicalTensor::from_forms(shape, &forms).expect("uniform basis")
}

fn layer_case(rng: &mut ChaCha8Rng, specs: &[LayerSpec], shape: Shape, m: usize, h: f64) -> Result<GradCheckReport, CliError> {
    let mut net = Network::init(shape, specs, rng.random())?;
    for (mut layer, spec) in net.params_mut().into_iter().zip(specs) {
        if *spec == LayerSpec::BatchNorm {
            layer[0].iter_mut().for_each(|v| *v = rng.random_range(0.5..1.5));
            layer[1].iter_mut().for_each(|v| *v = rng.random_range(-0.3..0.3));
        }
    }
    let x = random_tensor(rng, shape, m);
    let u: Vec<f64> = (0..net.output_shape().len() * (m + 2)).map(|_| rng.random_range(-1.0..1.0)).collect();
    let u = CanonicalTensor::gradient(net.output_shape(), m, u)?;
    Ok(network_grad_check(&net, &x, &u, h)?)
}

fn objective_case(rng: &mut ChaCha8Rng, h: f64) -> Result<GradCheckReport, CliError> {
    let n = 8;
    let (x0, y0) = (rng.random_range(0.3..0.7), rng.random_range(0.3..0.7));
    let (vx, vy) = (rng.random_range(-0.02..0.02), rng.random_range(-0.02..0.02));
    let side = rng.random_range(0.15..0.35);
    let truth: Vec<Option<BoxCoords>> = (0..n)
        .map(|t| Some(BoxCoords::new(x0 + vx * t as f64, y0 + vy * t as f64, side, side)))
        .collect();
    let raw: Vec<Vec<f64>> = (0..n)
        .map(|_| (0..HEAD_OUTPUTS).map(|_| rng.random_range(-0.5..0.5)).collect())
        .collect();
    Ok(objective_grad_check(&raw, &truth, &default_anchors(), &DetectConfig::default(), h)?)
}

pub fn gradcheck(cfg: &RunConfig, out: &Path, args: &GradcheckArgs) -> Result<(), CliError> {
    if args.cases == 0 {
        return Err(CliError::Usage("--cases must be positive".into()));
    }
    let h = args.step;
    let conv = LayerSpec::Conv { out_channels: 3, kernel: 3, stride: 2, padding: 1 };
    let pool = LayerSpec::MaxPool { kernel: 2, stride: 2 };
    let small = Shape::new(2, 4, 4);
    type Case = Box<dyn Fn(&mut ChaCha8Rng) -> Result<GradCheckReport, CliError>>;
    let kernels: Vec<(&str, f64, Case)> = vec![
        ("sum", args.tol, Box::new(move |r| {
            let m = r.random_range(1..=4);
            let k = r.random_range(2..=4);
            let weights = (0..k).map(|_| r.random_range(-2.0..2.0)).collect();
            let inputs: Vec<_> = (0..k).map(|_| random_form(r, m, -1.0, 1.0)).collect();
            Ok(finite_diff_check(&GradOp::Sum { weights }, &inputs, h)?)
        })),
        ("max2", args.tol, Box::new(move |r| {
            let m = r.random_range(1..=4);
            let inputs = vec![random_form(r, m, -1.0, 1.0), random_form(r, m, -1.0, 1.0)];
            Ok(finite_diff_check(&GradOp::Max2, &inputs, h)?)
        })),
        ("relu", args.tol, Box::new(move |r| {
            let m = r.random_range(1..=4);
            Ok(finite_diff_check(&GradOp::Relu, &[random_form(r, m, -1.0, 1.0)], h)?)
        })),
        ("conv", args.tol, Box::new(move |r| layer_case(r, &[conv], Shape::new(2, 5, 5), 2, h))),
        ("fc", args.tol, Box::new(move |r| layer_case(r, &[LayerSpec::Fc { out_features: 4 }], small, 2, h))),
        ("relu_layer", args.tol, Box::new(move |r| layer_case(r, &[LayerSpec::Relu], small, 2, h))),
        ("pool", args.tol, Box::new(move |r| layer_case(r, &[pool], small, 2, h))),
        ("batchnorm", args.tol, Box::new(move |r| layer_case(r, &[LayerSpec::BatchNorm], small, 3, h))),
        ("objective", args.tol, Box::new(move |r| objective_case(r, h))),
        ("network", args.network_tol, Box::new(move |r| {
            let specs = [
                LayerSpec::Conv { out_channels: 2, kernel: 3, stride: 1, padding: 1 },
                LayerSpec::Relu,
                LayerSpec::MaxPool { kernel: 2, stride: 2 },
                LayerSpec::BatchNorm,
                LayerSpec::Fc { out_features: 3 },
            ];
            layer_case(r, &specs, Shape::new(1, 4, 4), 2, h)
        })),
    ];

    let mut w = csv_writer(out, "gradcheck.csv")?;
    w.write_record(["kernel", "case", "label", "analytic", "numeric", "rel_err", "pass"])?;
    let mut failed = Vec::new();
    for (ki, (name, tol, case)) in kernels.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ ((ki as u64 + 1) << 40));
        let (mut done, mut tries, mut bad) = (0, 0, 0);
        while done < args.cases {
            tries += 1;
            if tries > 50 * args.cases {
                return Err(CliError::Check(format!("{name}: too many degenerate draws")));
            }
            let report = case(&mut rng)?;
            if report.degenerate {
                continue;
            }
            for e in &report.entries {
                let pass = !(e.rel_err > *tol && (e.analytic - e.numeric).abs() >= FD_ABS_FLOOR);
                bad += usize::from(!pass);
                w.write_record([
                    name.to_string(),
                    done.to_string(),
                    e.label.clone(),
                    format!("{:e}", e.analytic),
                    format!("{:e}", e.numeric),
                    format!("{:e}", e.rel_err),
                    pass.to_string(),
                ])?;
            }
            done += 1;
        }
        if bad > 0 {
            warn!("{name}: {bad} partials out of tolerance {tol:e}");
            failed.push(*name);
        } else {
            info!("{name}: {done} cases within {tol:e}");
        }
    }
    w.flush()?;
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Check(format!("gradient mismatch in {}", failed.join(", "))))
    }
}

/// Sample mean and variance of `max(a, b)` over joint draws of the shared
/// basis and both private terms.
pub fn monte_carlo_max(a: &CanonicalForm, b: &CanonicalForm, draws: usize, seed: u64) -> (f64, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = vec![0.0; a.dim()];
    let (mut s1, mut s2) = (0.0, 0.0);
    for _ in 0..draws {
        x.iter_mut().for_each(|v| *v = rng.sample(StandardNormal));
        let ra: f64 = rng.sample(StandardNormal);
        let rb: f64 = rng.sample(StandardNormal);
        let va = evaluate(a, &x).expect("same basis") + a.noise() * ra;
        let vb = evaluate(b, &x).expect("same basis") + b.noise() * rb;
        let v = va.max(vb);
        s1 += v;
        s2 += v * v;
    }
    let mean = s1 / draws as f64;
    (mean, s2 / draws as f64 - mean * mean)
}

pub fn oracle(cfg: &RunConfig, out: &Path, args: &OracleArgs) -> Result<(), CliError> {
    if args.pairs == 0 || args.draws < 2 || args.max_m == 0 {
        return Err(CliError::Usage("need --pairs > 0, --draws > 1 and --max-m > 0".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let pairs: Vec<(CanonicalForm, CanonicalForm, u64)> = (0..args.pairs)
        .map(|_| {
            let m = rng.random_range(1..=args.max_m);
            (random_form(&mut rng, m, 2.0, 4.0), random_form(&mut rng, m, 2.0, 4.0), rng.random())
        })
        .collect();
    let rows: Vec<_> = pairs
        .par_iter()
        .map(|(a, b, seed)| {
            let (c, _) = max2(a, b).expect("same basis");
            let (mc_mean, mc_var) = monte_carlo_max(a, b, args.draws, *seed);
            (a.dim(), c.mean(), mc_mean, c.variance(), mc_var)
        })
        .collect();

    let mut w = csv_writer(out, "oracle.csv")?;
    w.write_record(["pair", "m", "clark_mean", "mc_mean", "mean_rel_err", "clark_var", "mc_var", "var_rel_err", "pass"])?;
    let mut failures = 0;
    for (i, (m, cm, mm, cv, mv)) in rows.iter().enumerate() {
        let (me, ve) = ((cm - mm).abs() / mm.abs(), (cv - mv).abs() / mv);
        let pass = me <= args.mean_tol && ve <= args.var_tol;
        failures += usize::from(!pass);
        w.write_record([
            i.to_string(),
            m.to_string(),
            format!("{cm:.8}"),
            format!("{mm:.8}"),
            format!("{me:.3e}"),
            format!("{cv:.8}"),
            format!("{mv:.8}"),
            format!("{ve:.3e}"),
            pass.to_string(),
        ])?;
    }
    w.flush()?;
    info!("{} pairs, {failures} outside tolerance", rows.len());
    if failures > 0 {
        return Err(CliError::Check(format!("{failures} of {} pairs outside tolerance", rows.len())));
    }
    Ok(())
}
