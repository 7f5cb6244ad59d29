//! Little-endian containers: snippets (`SNIP`), canonical tensors (`CANT`)
//! and network checkpoints (`SCNW`).

use std::fs;
use std::path::Path;

use nalgebra::DMatrix;

use crate::error::{Result, ScnnError};
use crate::ica::{Snippet, SnippetModel};
use crate::layers::{BatchNorm, Conv2d, Layer, Linear, MaxPool, Network};
use crate::tensor::{CanonicalTensor, Shape};

pub const SNIP_MAGIC: &[u8; 4] = b"SNIP";
pub const CANT_MAGIC: &[u8; 4] = b"CANT";
pub const SCNW_MAGIC: &[u8; 4] = b"SCNW";

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
    what: &'static str,
}

impl<'a> Cursor<'a> {
    fn new(buf: &'a [u8], what: &'static str) -> Self {
        Self { buf, pos: 0, what }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| {
            ScnnError::Format(format!("{}: truncated at byte {}", self.what, self.pos))
        })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn magic(&mut self, want: &[u8; 4]) -> Result<()> {
        let got = self.take(4)?;
        if got != want {
            return Err(ScnnError::Format(format!(
                "{}: bad magic {:?}",
                self.what,
                String::from_utf8_lossy(got)
            )));
        }
        Ok(())
    }

    fn u32(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")) as usize)
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(n.checked_mul(8).ok_or_else(|| self.overflow())?)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let bytes = self.take(n.checked_mul(4).ok_or_else(|| self.overflow())?)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect())
    }

    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    fn finish(&self) -> Result<()> {
        if self.remaining() != 0 {
            return Err(ScnnError::Format(format!(
                "{}: {} trailing bytes",
                self.what,
                self.remaining()
            )));
        }
        Ok(())
    }

    fn overflow(&self) -> ScnnError {
        ScnnError::Format(format!("{}: size overflow", self.what))
    }
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v)
        .map_err(|_| ScnnError::InvalidArgument(format!("{v} does not fit in 32 bits")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn put_f64s(out: &mut Vec<u8>, vs: impl IntoIterator<Item = f64>) {
    for v in vs {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn encode_snippet(s: &Snippet) -> Result<Vec<u8>> {
    let shape = s.shape();
    let mut out = Vec::with_capacity(20 + 4 * s.data().len());
    out.extend_from_slice(SNIP_MAGIC);
    for v in [s.n(), shape.c, shape.h, shape.w] {
        put_u32(&mut out, v)?;
    }
    for v in s.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_snippet(bytes: &[u8]) -> Result<Snippet> {
    let mut c = Cursor::new(bytes, "snippet");
    c.magic(SNIP_MAGIC)?;
    let (n, ch, h, w) = (c.u32()?, c.u32()?, c.u32()?, c.u32()?);
    let len = [n, ch, h, w]
        .iter()
        .try_fold(1usize, |a, &b| a.checked_mul(b))
        .ok_or_else(|| ScnnError::Format("snippet: size overflow".into()))?;
    let data = c.f32s(len)?;
    c.finish()?;
    Snippet::new(n, Shape::new(ch, h, w), data).map_err(|e| ScnnError::Format(e.to_string()))
}

pub fn write_snippet(path: &Path, s: &Snippet) -> Result<()> {
    Ok(fs::write(path, encode_snippet(s)?)?)
}

pub fn read_snippet(path: &Path) -> Result<Snippet> {
    decode_snippet(&fs::read(path)?)
}

/// Planes in order mean, sensitivities, noise, followed by the `m × N`
/// realization matrix row by row.
pub fn encode_model(model: &SnippetModel) -> Result<Vec<u8>> {
    let t = &model.canonical;
    let shape = t.shape();
    let mut out = Vec::with_capacity(20 + 8 * (t.data().len() + model.realizations.len()));
    out.extend_from_slice(CANT_MAGIC);
    for v in [t.m(), shape.c, shape.h, shape.w] {
        put_u32(&mut out, v)?;
    }
    put_f64s(&mut out, t.data().iter().copied());
    for row in model.realizations.row_iter() {
        put_f64s(&mut out, row.iter().copied());
    }
    Ok(out)
}

/// The frame count is not stored; it follows from the bytes after the
/// planes. A model with `m = 0` therefore reads back with no frames.
pub fn decode_model(bytes: &[u8]) -> Result<SnippetModel> {
    let mut c = Cursor::new(bytes, "canonical tensor");
    c.magic(CANT_MAGIC)?;
    let (m, ch, h, w) = (c.u32()?, c.u32()?, c.u32()?, c.u32()?);
    let shape = Shape::new(ch, h, w);
    let planes = shape
        .len()
        .checked_mul(m + 2)
        .ok_or_else(|| ScnnError::Format("canonical tensor: size overflow".into()))?;
    let data = c.f64s(planes)?;
    let canonical =
        CanonicalTensor::from_raw(shape, m, data).map_err(|e| ScnnError::Format(e.to_string()))?;
    let rest = c.remaining();
    let n = if m == 0 {
        0
    } else {
        if !rest.is_multiple_of(8 * m) {
            return Err(ScnnError::Format(format!(
                "canonical tensor: {rest} trailing bytes is not an m x N matrix"
            )));
        }
        rest / (8 * m)
    };
    let vals = c.f64s(m * n)?;
    c.finish()?;
    Ok(SnippetModel {
        canonical,
        realizations: DMatrix::from_row_slice(m, n, &vals),
        recon_error: Vec::new(),
        converged: true,
    })
}

pub fn write_model(path: &Path, model: &SnippetModel) -> Result<()> {
    Ok(fs::write(path, encode_model(model)?)?)
}

pub fn read_model(path: &Path) -> Result<SnippetModel> {
    decode_model(&fs::read(path)?)
}

const KIND_CONV: usize = 0;
const KIND_RELU: usize = 1;
const KIND_POOL: usize = 2;
const KIND_BN: usize = 3;
const KIND_FC: usize = 4;

fn put_tensor(out: &mut Vec<u8>, dims: &[usize], data: &[f64]) -> Result<()> {
    put_u32(out, dims.len())?;
    for &d in dims {
        put_u32(out, d)?;
    }
    put_f64s(out, data.iter().copied());
    Ok(())
}

fn get_tensor(c: &mut Cursor<'_>, want: &[usize]) -> Result<Vec<f64>> {
    let rank = c.u32()?;
    let dims: Vec<usize> = (0..rank).map(|_| c.u32()).collect::<Result<_>>()?;
    if dims != want {
        return Err(ScnnError::Format(format!(
            "checkpoint: tensor dims {dims:?}, expected {want:?}"
        )));
    }
    c.f64s(dims.iter().product())
}

/// Header: magic, input `C, H, W`, layer count. Each layer: kind, its
/// integer hyperparameters, then its tensors as rank, dims, f64 values.
pub fn encode_checkpoint(net: &Network) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(SCNW_MAGIC);
    let s = net.input_shape();
    for v in [s.c, s.h, s.w, net.layers().len()] {
        put_u32(&mut out, v)?;
    }
    for layer in net.layers() {
        match layer {
            Layer::Conv(c) => {
                for v in [KIND_CONV, c.in_channels, c.out_channels, c.kernel, c.stride, c.padding] {
                    put_u32(&mut out, v)?;
                }
                put_tensor(&mut out, &[c.out_channels, c.in_channels, c.kernel, c.kernel], &c.weight)?;
                put_tensor(&mut out, &[c.out_channels], &c.bias)?;
            }
            Layer::Relu => put_u32(&mut out, KIND_RELU)?,
            Layer::MaxPool(p) => {
                for v in [KIND_POOL, p.kernel, p.stride] {
                    put_u32(&mut out, v)?;
                }
            }
            Layer::BatchNorm(b) => {
                put_u32(&mut out, KIND_BN)?;
                put_u32(&mut out, b.gamma.len())?;
                put_tensor(&mut out, &[b.gamma.len()], &b.gamma)?;
                put_tensor(&mut out, &[b.beta.len()], &b.beta)?;
                put_tensor(&mut out, &[1], &[b.eps])?;
            }
            Layer::Fc(f) => {
                for v in [KIND_FC, f.in_features, f.out_features] {
                    put_u32(&mut out, v)?;
                }
                put_tensor(&mut out, &[f.out_features, f.in_features], &f.weight)?;
                put_tensor(&mut out, &[f.out_features], &f.bias)?;
            }
        }
    }
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Network> {
    let mut c = Cursor::new(bytes, "checkpoint");
    c.magic(SCNW_MAGIC)?;
    let input = Shape::new(c.u32()?, c.u32()?, c.u32()?);
    let count = c.u32()?;
    let mut layers = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let layer = match c.u32()? {
            KIND_CONV => {
                let (i, o, k, s, p) = (c.u32()?, c.u32()?, c.u32()?, c.u32()?, c.u32()?);
                let mut conv = Conv2d::zeros(i, o, k, s, p);
                conv.weight = get_tensor(&mut c, &[o, i, k, k])?;
                conv.bias = get_tensor(&mut c, &[o])?;
                Layer::Conv(conv)
            }
            KIND_RELU => Layer::Relu,
            KIND_POOL => Layer::MaxPool(MaxPool {
                kernel: c.u32()?,
                stride: c.u32()?,
            }),
            KIND_BN => {
                let ch = c.u32()?;
                let gamma = get_tensor(&mut c, &[ch])?;
                let beta = get_tensor(&mut c, &[ch])?;
                let eps = get_tensor(&mut c, &[1])?[0];
                Layer::BatchNorm(BatchNorm { gamma, beta, eps })
            }
            KIND_FC => {
                let (i, o) = (c.u32()?, c.u32()?);
                let mut fc = Linear::zeros(i, o);
                fc.weight = get_tensor(&mut c, &[o, i])?;
                fc.bias = get_tensor(&mut c, &[o])?;
                Layer::Fc(fc)
            }
            k => return Err(ScnnError::Format(format!("checkpoint: unknown layer kind {k}"))),
        };
        layers.push(layer);
    }
    c.finish()?;
    Network::new(input, layers)
}

pub fn write_checkpoint(path: &Path, net: &Network) -> Result<()> {
    Ok(fs::write(path, encode_checkpoint(net)?)?)
}

pub fn read_checkpoint(path: &Path) -> Result<Network> {
    decode_checkpoint(&fs::read(path)?)
}
