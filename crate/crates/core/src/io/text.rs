//! Text formats: run configuration, network descriptions, ground-truth tracks.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::detect::{BoxCoords, DetectConfig};
use crate::error::{Result, ScnnError};
use crate::layers::LayerSpec;
use crate::synth::{Motion, SceneSpec};
use crate::tensor::Shape;

/// Yields `(line number, key, value)` for every `key = value` line, skipping
/// blanks and `#` comments.
fn key_values(text: &str) -> impl Iterator<Item = Result<(usize, &str, &str)>> {
    text.lines().enumerate().filter_map(|(i, raw)| {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            return None;
        }
        Some(match line.split_once('=') {
            Some((k, v)) => Ok((i + 1, k.trim(), v.trim())),
            None => Err(ScnnError::Config(format!(
                "line {}: expected `key = value`, got {line:?}",
                i + 1
            ))),
        })
    })
}

fn parse<T: FromStr>(line: usize, key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| ScnnError::Config(format!("line {line}: bad value {v:?} for `{key}`")))
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub m: usize,
    pub n: usize,
    pub image_size: usize,
    pub channels: usize,
    /// Network description file; empty selects the built-in micro-net.
    pub network: String,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub lr_decay: f64,
    pub shuffle: bool,
    pub detect: DetectConfig,
    pub ica_max_iter: usize,
    pub ica_tol: f64,
    pub count: usize,
    pub test_count: usize,
    pub noise: f64,
    pub size_min: f64,
    pub size_max: f64,
    pub motion: Motion,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            m: 8,
            n: 16,
            image_size: 32,
            channels: 3,
            network: String::new(),
            lr: 0.001,
            momentum: 0.9,
            weight_decay: 0.0005,
            batch_size: 8,
            epochs: 30,
            seed: 0,
            lr_decay: 0.0,
            shuffle: false,
            detect: DetectConfig::default(),
            ica_max_iter: 200,
            ica_tol: 1e-4,
            count: 200,
            test_count: 50,
            noise: 0.02,
            size_min: 0.2,
            size_max: 0.32,
            motion: Motion::Quadratic,
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut c = Self::default();
        for kv in key_values(text) {
            let (line, k, v) = kv?;
            match k {
                "m" => c.m = parse(line, k, v)?,
                "n" => c.n = parse(line, k, v)?,
                "image_size" => c.image_size = parse(line, k, v)?,
                "channels" => c.channels = parse(line, k, v)?,
                "network" => c.network = v.to_string(),
                "lr" => c.lr = parse(line, k, v)?,
                "momentum" => c.momentum = parse(line, k, v)?,
                "weight_decay" => c.weight_decay = parse(line, k, v)?,
                "batch_size" => c.batch_size = parse(line, k, v)?,
                "epochs" => c.epochs = parse(line, k, v)?,
                "seed" => c.seed = parse(line, k, v)?,
                "lr_decay" => c.lr_decay = parse(line, k, v)?,
                "shuffle" => c.shuffle = parse(line, k, v)?,
                "lambda_coord" => c.detect.lambda_coord = parse(line, k, v)?,
                "lambda_fit" => c.detect.lambda_fit = parse(line, k, v)?,
                "lambda_conf" => c.detect.lambda_conf = parse(line, k, v)?,
                "lambda_iou" => c.detect.lambda_iou = parse(line, k, v)?,
                "alpha" => c.detect.alpha = parse(line, k, v)?,
                "softplus_beta" => c.detect.softplus_beta = parse(line, k, v)?,
                "degree" => c.detect.degree = parse(line, k, v)?,
                "ica_max_iter" => c.ica_max_iter = parse(line, k, v)?,
                "ica_tol" => c.ica_tol = parse(line, k, v)?,
                "count" => c.count = parse(line, k, v)?,
                "test_count" => c.test_count = parse(line, k, v)?,
                "noise" => c.noise = parse(line, k, v)?,
                "size_min" => c.size_min = parse(line, k, v)?,
                "size_max" => c.size_max = parse(line, k, v)?,
                "motion" => {
                    c.motion = match v {
                        "static" => Motion::Static,
                        "linear" => Motion::Linear,
                        "quadratic" => Motion::Quadratic,
                        _ => {
                            return Err(ScnnError::Config(format!(
                                "line {line}: motion must be static, linear or quadratic"
                            )))
                        }
                    }
                }
                _ => return Err(ScnnError::Config(format!("line {line}: unknown key `{k}`"))),
            }
        }
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(ScnnError::Config(msg.to_string()));
        if self.m == 0 || self.m > self.n {
            return bad("m must satisfy 0 < m <= n");
        }
        if self.n < 2 {
            return bad("n must be at least 2");
        }
        if self.image_size == 0 || self.channels == 0 || self.batch_size == 0 {
            return bad("image_size, channels and batch_size must be positive");
        }
        if !(self.lr >= 0.0 && (0.0..1.0).contains(&self.momentum) && self.weight_decay >= 0.0) {
            return bad("need lr >= 0, 0 <= momentum < 1, weight_decay >= 0");
        }
        if self.detect.softplus_beta <= 0.0 || self.detect.alpha <= 0.0 {
            return bad("softplus_beta and alpha must be positive");
        }
        if self.detect.degree >= self.n {
            return bad("degree must be below n");
        }
        if self.ica_tol <= 0.0 || self.ica_max_iter == 0 {
            return bad("ica_tol and ica_max_iter must be positive");
        }
        self.scene().validate().map_err(|e| ScnnError::Config(e.to_string()))
    }

    pub fn scene(&self) -> SceneSpec {
        SceneSpec {
            n: self.n,
            size: self.image_size,
            channels: self.channels,
            noise: self.noise,
            size_min: self.size_min,
            size_max: self.size_max,
            motion: self.motion,
        }
    }
}

pub fn parse_network(text: &str) -> Result<(Shape, Vec<LayerSpec>)> {
    let mut input = None;
    let mut layers = Vec::new();
    for kv in key_values(text) {
        let (line, k, v) = kv?;
        match k {
            "input" => {
                let dims: Vec<usize> = v
                    .split('x')
                    .map(|d| parse(line, k, d.trim()))
                    .collect::<Result<_>>()?;
                if dims.len() != 3 || dims.contains(&0) {
                    return Err(ScnnError::Config(format!("line {line}: input must be CxHxW")));
                }
                input = Some(Shape::new(dims[0], dims[1], dims[2]));
            }
            "layer" => layers.push(parse_layer(line, v)?),
            _ => return Err(ScnnError::Config(format!("line {line}: unknown key `{k}`"))),
        }
    }
    let input = input.ok_or_else(|| ScnnError::Config("missing `input = CxHxW`".into()))?;
    Ok((input, layers))
}

fn parse_layer(line: usize, v: &str) -> Result<LayerSpec> {
    let mut parts = v.split_whitespace();
    let kind = parts.next().unwrap_or("");
    let mut opts = Vec::new();
    for p in parts {
        let (a, b) = p.split_once('=').ok_or_else(|| {
            ScnnError::Config(format!("line {line}: expected option=value, got {p:?}"))
        })?;
        opts.push((a, parse::<usize>(line, a, b)?));
    }
    let get = |name: &str, default: Option<usize>| -> Result<usize> {
        opts.iter()
            .find(|(k, _)| *k == name)
            .map(|(_, v)| *v)
            .or(default)
            .ok_or_else(|| ScnnError::Config(format!("line {line}: {kind} needs `{name}`")))
    };
    let allowed: &[&str] = match kind {
        "conv" => &["out", "kernel", "stride", "pad"],
        "pool" => &["kernel", "stride"],
        "fc" => &["out"],
        "relu" | "bn" => &[],
        _ => return Err(ScnnError::Config(format!("line {line}: unknown layer `{kind}`"))),
    };
    if let Some((k, _)) = opts.iter().find(|(k, _)| !allowed.contains(k)) {
        return Err(ScnnError::Config(format!("line {line}: {kind} has no option `{k}`")));
    }
    Ok(match kind {
        "conv" => LayerSpec::Conv {
            out_channels: get("out", None)?,
            kernel: get("kernel", None)?,
            stride: get("stride", Some(1))?,
            padding: get("pad", Some(0))?,
        },
        "pool" => {
            let kernel = get("kernel", None)?;
            LayerSpec::MaxPool {
                kernel,
                stride: get("stride", Some(kernel))?,
            }
        }
        "fc" => LayerSpec::Fc {
            out_features: get("out", None)?,
        },
        "relu" => LayerSpec::Relu,
        _ => LayerSpec::BatchNorm,
    })
}

pub fn format_network(input: Shape, layers: &[LayerSpec]) -> String {
    let mut s = format!("input = {}x{}x{}\n", input.c, input.h, input.w);
    for l in layers {
        let _ = match l {
            LayerSpec::Conv {
                out_channels,
                kernel,
                stride,
                padding,
            } => writeln!(s, "layer = conv out={out_channels} kernel={kernel} stride={stride} pad={padding}"),
            LayerSpec::Relu => writeln!(s, "layer = relu"),
            LayerSpec::MaxPool { kernel, stride } => writeln!(s, "layer = pool kernel={kernel} stride={stride}"),
            LayerSpec::BatchNorm => writeln!(s, "layer = bn"),
            LayerSpec::Fc { out_features } => writeln!(s, "layer = fc out={out_features}"),
        };
    }
    s
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrackRow {
    pub frame: usize,
    pub bbox: BoxCoords,
    pub class: u32,
}

/// Lines of `frame_idx cx cy w h class_id`.
pub fn parse_track(text: &str) -> Result<Vec<TrackRow>> {
    let mut rows = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split_whitespace().collect();
        let bad = || ScnnError::Format(format!("track line {}: {line:?}", i + 1));
        if f.len() != 6 {
            return Err(bad());
        }
        let num = |s: &str| s.parse::<f64>().ok().filter(|v| v.is_finite()).ok_or_else(bad);
        let bbox = BoxCoords::new(num(f[1])?, num(f[2])?, num(f[3])?, num(f[4])?);
        if bbox.w <= 0.0 || bbox.h <= 0.0 {
            return Err(bad());
        }
        rows.push(TrackRow {
            frame: f[0].parse().map_err(|_| bad())?,
            bbox,
            class: f[5].parse().map_err(|_| bad())?,
        });
    }
    Ok(rows)
}

pub fn format_track(rows: &[TrackRow]) -> String {
    rows.iter().fold(String::new(), |mut s, r| {
        let b = r.bbox;
        let _ = writeln!(s, "{} {:.9} {:.9} {:.9} {:.9} {}", r.frame, b.cx, b.cy, b.w, b.h, r.class);
        s
    })
}

/// Per-frame target boxes for a snippet of `n` frames.
pub fn track_targets(rows: &[TrackRow], n: usize) -> Result<Vec<Option<BoxCoords>>> {
    let mut out = vec![None; n];
    for r in rows {
        let slot = out.get_mut(r.frame).ok_or(ScnnError::IndexOutOfRange {
            index: r.frame,
            len: n,
        })?;
        if slot.is_some() {
            return Err(ScnnError::Format(format!("track: frame {} listed twice", r.frame)));
        }
        *slot = Some(r.bbox);
    }
    Ok(out)
}
