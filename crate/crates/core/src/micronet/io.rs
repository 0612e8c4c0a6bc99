//! Binary model format.
//!
//! ```text
//! "HUDDNET1"                        8-byte magic
//! u8                                task (0 = classification, 1 = regression)
//! u32 rank, rank x u64              input shape
//! u32 count, count x (u32 len, utf8) output names
//! u32                               layer count
//! per layer:
//!   u8                              kind tag (1 dense, 2 conv2d, 3 relu, 4 maxpool, 5 flatten)
//!   u32 n, n x u64                  shape integers
//!                                   (dense: in, out; conv2d: in, out, kernel, stride, padding;
//!                                    maxpool: window, stride)
//!   u64 m, m x f64                  weights followed by biases
//! ```
//!
//! All integers and floats are little-endian.

use std::fs;
use std::path::Path;

use super::layer::{Conv2d, Dense, Layer, LayerKind, MaxPool};
use super::network::{Network, Task};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"HUDDNET1";

pub fn to_bytes(network: &Network) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.push(match network.task() {
        Task::Classification => 0,
        Task::Regression => 1,
    });
    put_u32(&mut out, network.input_shape().len() as u32);
    for &d in network.input_shape() {
        put_u64(&mut out, d as u64);
    }
    put_u32(&mut out, network.output_names().len() as u32);
    for name in network.output_names() {
        put_u32(&mut out, name.len() as u32);
        out.extend_from_slice(name.as_bytes());
    }
    put_u32(&mut out, network.layers().len() as u32);
    for layer in network.layers() {
        out.push(layer.kind().tag());
        let ints: Vec<usize> = match layer {
            Layer::Dense(d) => vec![d.inputs, d.outputs],
            Layer::Conv2d(c) => vec![c.in_channels, c.out_channels, c.kernel, c.stride, c.padding],
            Layer::MaxPool(p) => vec![p.window, p.stride],
            Layer::Relu | Layer::Flatten => vec![],
        };
        put_u32(&mut out, ints.len() as u32);
        for v in ints {
            put_u64(&mut out, v as u64);
        }
        let (w, b) = layer.params().unwrap_or((&[], &[]));
        put_u64(&mut out, (w.len() + b.len()) as u64);
        for v in w.iter().chain(b) {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn from_bytes(bytes: &[u8]) -> Result<Network> {
    let mut r = Reader { bytes, pos: 0 };
    let magic = r.take(8)?;
    if magic != MAGIC {
        return Err(Error::Version(format!(
            "expected magic {:?}, found {:?}",
            String::from_utf8_lossy(MAGIC),
            String::from_utf8_lossy(magic)
        )));
    }
    let task = match r.u8()? {
        0 => Task::Classification,
        1 => Task::Regression,
        t => return Err(r.err(format!("unknown task tag {t}"))),
    };
    let rank = r.u32()? as usize;
    let input_shape = (0..rank).map(|_| r.usize()).collect::<Result<Vec<_>>>()?;
    let n_names = r.u32()? as usize;
    let mut names = Vec::with_capacity(n_names.min(1 << 16));
    for _ in 0..n_names {
        let len = r.u32()? as usize;
        let at = r.pos;
        let raw = r.take(len)?;
        let s = std::str::from_utf8(raw).map_err(|_| Error::Parse {
            offset: at,
            reason: "output name is not utf-8".into(),
        })?;
        names.push(s.to_string());
    }
    let n_layers = r.u32()? as usize;
    let mut layers = Vec::with_capacity(n_layers.min(1 << 12));
    for _ in 0..n_layers {
        let at = r.pos;
        let tag = r.u8()?;
        let kind = LayerKind::from_tag(tag).ok_or_else(|| Error::Parse {
            offset: at,
            reason: format!("unknown layer tag {tag}"),
        })?;
        let n_ints = r.u32()? as usize;
        let ints = (0..n_ints).map(|_| r.usize()).collect::<Result<Vec<_>>>()?;
        let n_floats = r.u64()? as usize;
        let floats_at = r.pos;
        let raw = r.take(n_floats.checked_mul(8).ok_or_else(|| r.err("float count overflow".into()))?)?;
        let floats: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let expect_ints = |n: usize| -> Result<()> {
            if ints.len() != n {
                return Err(Error::Parse {
                    offset: at,
                    reason: format!("{} layer needs {n} shape integers, got {}", kind.name(), ints.len()),
                });
            }
            Ok(())
        };
        let bad_floats = |need: usize| Error::Parse {
            offset: floats_at,
            reason: format!("{} layer needs {need} parameters, got {}", kind.name(), floats.len()),
        };
        let layer = match kind {
            LayerKind::Dense => {
                expect_ints(2)?;
                let (i, o) = (ints[0], ints[1]);
                let need = i * o + o;
                if floats.len() != need {
                    return Err(bad_floats(need));
                }
                Layer::Dense(Dense {
                    inputs: i,
                    outputs: o,
                    weights: floats[..i * o].to_vec(),
                    bias: floats[i * o..].to_vec(),
                })
            }
            LayerKind::Conv2d => {
                expect_ints(5)?;
                let (ci, co, k) = (ints[0], ints[1], ints[2]);
                let nw = co * ci * k * k;
                if floats.len() != nw + co {
                    return Err(bad_floats(nw + co));
                }
                Layer::Conv2d(Conv2d {
                    in_channels: ci,
                    out_channels: co,
                    kernel: k,
                    stride: ints[3],
                    padding: ints[4],
                    weights: floats[..nw].to_vec(),
                    bias: floats[nw..].to_vec(),
                })
            }
            LayerKind::MaxPool => {
                expect_ints(2)?;
                if !floats.is_empty() {
                    return Err(bad_floats(0));
                }
                Layer::MaxPool(MaxPool {
                    window: ints[0],
                    stride: ints[1],
                })
            }
            LayerKind::Relu | LayerKind::Flatten => {
                expect_ints(0)?;
                if !floats.is_empty() {
                    return Err(bad_floats(0));
                }
                if kind == LayerKind::Relu {
                    Layer::Relu
                } else {
                    Layer::Flatten
                }
            }
        };
        layers.push(layer);
    }
    if r.pos != bytes.len() {
        return Err(r.err(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Network::new(input_shape, task, layers, names)
}

pub fn save(network: &Network, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, to_bytes(network)).map_err(|e| Error::file(path, e))
}

pub fn load(path: impl AsRef<Path>) -> Result<Network> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::file(path, e))?;
    from_bytes(&bytes)
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn err(&self, reason: String) -> Error {
        Error::Parse {
            offset: self.pos,
            reason,
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.err(format!(
                "unexpected end of file: needed {n} bytes, {} left",
                self.bytes.len() - self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn usize(&mut self) -> Result<usize> {
        let at = self.pos;
        let v = self.u64()?;
        usize::try_from(v).map_err(|_| Error::Parse {
            offset: at,
            reason: format!("integer {v} does not fit in usize"),
        })
    }
}
