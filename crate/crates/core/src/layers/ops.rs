//! Analytic operation counts for the statistical pass and the per-frame
//! baseline.

use crate::layers::network::{Layer, Network};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OpMode {
    /// One pass over `m + 2` planes.
    Scnn,
    /// `N` deterministic passes, one per frame.
    PerFrame,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerOps {
    pub name: &'static str,
    pub ops: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OpCount {
    pub layers: Vec<LayerOps>,
    pub total: u64,
}

/// Cost of one Clark max in multiply-accumulate equivalents: the spread and
/// the sensitivity blend are `O(m)`, the moments a constant.
pub fn max_cost(m: usize) -> u64 {
    3 * m as u64 + 12
}

pub fn count_ops(net: &Network, mode: OpMode, n: usize, m: usize) -> OpCount {
    let (n, planes) = (n as u64, m as u64 + 2);
    let mut input = net.input_shape();
    let mut layers = Vec::with_capacity(net.layers().len());
    for (layer, &out) in net.layers().iter().zip(net.shapes()) {
        let sites = out.len() as u64;
        let ops = match (layer, mode) {
            (Layer::Conv(c), _) => {
                let macs = c.geometry(input).map_or(0, |g| g.macs());
                match mode {
                    OpMode::Scnn => planes * macs,
                    OpMode::PerFrame => n * macs,
                }
            }
            (Layer::Fc(f), OpMode::Scnn) => planes * (f.in_features * f.out_features) as u64,
            (Layer::Fc(f), OpMode::PerFrame) => n * (f.in_features * f.out_features) as u64,
            (Layer::Relu, OpMode::Scnn) => sites * max_cost(m),
            (Layer::Relu, OpMode::PerFrame) => n * sites,
            (Layer::MaxPool(p), OpMode::Scnn) => {
                sites * (p.kernel * p.kernel - 1) as u64 * max_cost(m)
            }
            (Layer::MaxPool(p), OpMode::PerFrame) => n * sites * (p.kernel * p.kernel - 1) as u64,
            (Layer::BatchNorm(_), OpMode::Scnn) => sites * (3 * m as u64 + 4),
            (Layer::BatchNorm(_), OpMode::PerFrame) => 0,
        };
        layers.push(LayerOps {
            name: layer.name(),
            ops,
        });
        input = out;
    }
    let total = layers.iter().map(|l| l.ops).sum();
    OpCount { layers, total }
}

/// Baseline cost over statistical cost.
pub fn speedup_ratio(net: &Network, n: usize, m: usize) -> f64 {
    let base = count_ops(net, OpMode::PerFrame, n, m).total as f64;
    let scnn = count_ops(net, OpMode::Scnn, n, m).total as f64;
    base / scnn
}
