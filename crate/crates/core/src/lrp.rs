//! Layer-wise relevance propagation with the z⁺ rule.
//!
//! Relevance flows from the output back to the input. For a connection from lower neuron `i`
//! to upper neuron `l`, the contribution is `z = a_i * max(w_il, 0)` and the lower neuron
//! receives `sum_l z_il / (sum_i z_il) * R_l`. ReLU layers pass relevance through, max-pool
//! layers route each output's relevance to the window winner and flatten only reshapes.
//!
//! Heatmaps are indexed by activation position: layer `0` is the network input and layer
//! `i >= 1` is the output of the `i`-th network layer.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::micronet::{argmax, ActivationTrace, Layer, Network, Tensor};

/// Denominator stabilizer: `sum z` becomes `sum z + EPSILON * sign(sum z)`.
pub const EPSILON: f64 = 1e-9;

/// Relevance scores of every neuron of one layer for one image, as an `N x M` row-major
/// matrix. Convolutional layers use `N` = neurons per feature map and `M` = feature maps;
/// vector layers use `M = 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    pub layer: usize,
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f64>,
}

impl Heatmap {
    pub fn new(layer: usize, rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        if rows * cols != values.len() {
            return Err(Error::DimensionMismatch(format!(
                "{rows}x{cols} heatmap with {} values",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("heatmap holds non-finite values"));
        }
        Ok(Self {
            layer,
            rows,
            cols,
            values,
        })
    }

    /// Reorders a `[C, H, W]` (or `[D]`) relevance tensor into the `N x M` convention.
    pub fn from_tensor(layer: usize, relevance: &Tensor) -> Self {
        let shape = relevance.shape();
        let data = relevance.data();
        if shape.len() == 3 {
            let (maps, n) = (shape[0], shape[1] * shape[2]);
            let mut values = vec![0.0; data.len()];
            for m in 0..maps {
                for i in 0..n {
                    values[i * maps + m] = data[m * n + i];
                }
            }
            Self {
                layer,
                rows: n,
                cols: maps,
                values,
            }
        } else {
            Self {
                layer,
                rows: data.len(),
                cols: 1,
                values: data.to_vec(),
            }
        }
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.cols + col]
    }

    pub fn sum(&self) -> f64 {
        self.values.iter().sum()
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SeedMode {
    /// Relevance starts at the predicted (argmax) output with that output's score.
    PredictedClass,
    /// Relevance starts at the output neuron furthest from the ground truth, with the size of
    /// that deviation.
    WorstOutput,
}

/// Output-layer relevance: zero everywhere except one nonnegative entry.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RelevanceSeed {
    pub width: usize,
    pub neuron: usize,
    pub value: f64,
}

impl RelevanceSeed {
    pub fn new(width: usize, neuron: usize, value: f64) -> Result<Self> {
        if neuron >= width {
            return Err(Error::invalid(format!("seed neuron {neuron} outside {width} outputs")));
        }
        if !(value >= 0.0 && value.is_finite()) {
            return Err(Error::invalid(format!("seed value must be finite and >= 0, got {value}")));
        }
        Ok(Self {
            width,
            neuron,
            value,
        })
    }

    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = vec![0.0; self.width];
        v[self.neuron] = self.value;
        v
    }
}

/// Builds the seed from the task-level output of [`Network::forward`].
pub fn make_seed(
    network: &Network,
    output: &Tensor,
    mode: SeedMode,
    truth: Option<&[f64]>,
) -> Result<RelevanceSeed> {
    let out = output.data();
    if out.len() != network.num_outputs() {
        return Err(Error::DimensionMismatch(format!(
            "output has {} values, network has {} outputs",
            out.len(),
            network.num_outputs()
        )));
    }
    match mode {
        SeedMode::PredictedClass => {
            let k = argmax(out);
            RelevanceSeed::new(out.len(), k, out[k])
        }
        SeedMode::WorstOutput => {
            let truth = truth
                .ok_or_else(|| Error::invalid("worst-output seed needs the ground truth"))?;
            if truth.len() != out.len() {
                return Err(Error::DimensionMismatch(format!(
                    "ground truth has {} values, output has {}",
                    truth.len(),
                    out.len()
                )));
            }
            let dev: Vec<f64> = out.iter().zip(truth).map(|(y, t)| (y - t).abs()).collect();
            let k = argmax(&dev);
            RelevanceSeed::new(out.len(), k, dev[k])
        }
    }
}

fn check_trace(network: &Network, trace: &ActivationTrace) -> Result<()> {
    if trace.num_layers() != network.layers().len() {
        return Err(Error::TraceMismatch(format!(
            "trace covers {} layers, network has {}",
            trace.num_layers(),
            network.layers().len()
        )));
    }
    if trace.activations[0].shape() != network.input_shape() {
        return Err(Error::TraceMismatch("input shape differs".into()));
    }
    for (i, shape) in network.layer_shapes().iter().enumerate() {
        if trace.layer_output(i).shape() != shape.as_slice() {
            return Err(Error::TraceMismatch(format!("layer {i} output shape differs")));
        }
    }
    Ok(())
}

#[inline]
fn stabilize(s: f64) -> f64 {
    s + EPSILON * s.signum()
}

/// Redistributes `upper` (relevance at the layer output) onto the layer input.
fn relevance_through(layer: &Layer, input: &Tensor, upper: &[f64]) -> Vec<f64> {
    let a = input.data();
    match layer {
        Layer::Dense(d) => {
            let mut lower = vec![0.0; d.inputs];
            for (o, &r) in upper.iter().enumerate() {
                if r == 0.0 {
                    continue;
                }
                let row = &d.weights[o * d.inputs..(o + 1) * d.inputs];
                let s: f64 = row.iter().zip(a).map(|(w, x)| x * w.max(0.0)).sum();
                if s == 0.0 {
                    continue;
                }
                let c = r / stabilize(s);
                for ((l, w), x) in lower.iter_mut().zip(row).zip(a) {
                    *l += x * w.max(0.0) * c;
                }
            }
            lower
        }
        Layer::Conv2d(conv) => {
            let (h, w) = (input.shape()[1], input.shape()[2]);
            let mut lower = vec![0.0; a.len()];
            let oh = upper.len() / conv.out_channels;
            let (oh, ow) = {
                let ow = (w + 2 * conv.padding - conv.kernel) / conv.stride + 1;
                (oh / ow, ow)
            };
            for o in 0..conv.out_channels {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let r = upper[(o * oh + oy) * ow + ox];
                        if r == 0.0 {
                            continue;
                        }
                        let mut s = 0.0;
                        for ic in 0..conv.in_channels {
                            for ky in 0..conv.kernel {
                                let Some(iy) = conv.source(oy, ky, h) else { continue };
                                for kx in 0..conv.kernel {
                                    let Some(ix) = conv.source(ox, kx, w) else { continue };
                                    let wv = conv.weights[conv.weight_index(o, ic, ky, kx)];
                                    s += a[(ic * h + iy) * w + ix] * wv.max(0.0);
                                }
                            }
                        }
                        if s == 0.0 {
                            continue;
                        }
                        let c = r / stabilize(s);
                        for ic in 0..conv.in_channels {
                            for ky in 0..conv.kernel {
                                let Some(iy) = conv.source(oy, ky, h) else { continue };
                                for kx in 0..conv.kernel {
                                    let Some(ix) = conv.source(ox, kx, w) else { continue };
                                    let wv = conv.weights[conv.weight_index(o, ic, ky, kx)];
                                    let idx = (ic * h + iy) * w + ix;
                                    lower[idx] += a[idx] * wv.max(0.0) * c;
                                }
                            }
                        }
                    }
                }
            }
            lower
        }
        Layer::Relu | Layer::Flatten => upper.to_vec(),
        Layer::MaxPool(p) => {
            let (ch, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
            let ow = (w - p.window) / p.stride + 1;
            let oh = upper.len() / (ch * ow);
            let mut lower = vec![0.0; a.len()];
            for c in 0..ch {
                for oy in 0..oh {
                    for ox in 0..ow {
                        lower[p.winner(a, h, w, c, oy, ox)] += upper[(c * oh + oy) * ow + ox];
                    }
                }
            }
            lower
        }
    }
}

/// Relevance of every activation of the traced pass: element `i` of the result is the
/// heatmap of activation `i` (`0` = input image, last = output layer holding the seed).
pub fn propagate(
    network: &Network,
    trace: &ActivationTrace,
    seed: &RelevanceSeed,
) -> Result<Vec<Heatmap>> {
    check_trace(network, trace)?;
    if seed.width != network.num_outputs() {
        return Err(Error::TraceMismatch(format!(
            "seed width {} differs from {} network outputs",
            seed.width,
            network.num_outputs()
        )));
    }
    let n = network.layers().len();
    let mut maps = vec![None; n + 1];
    let mut relevance = seed.to_vec();
    maps[n] = Some(Heatmap::from_tensor(
        n,
        &Tensor::from_parts(trace.final_output().shape().to_vec(), relevance.clone()),
    ));
    for (i, layer) in network.layers().iter().enumerate().rev() {
        let input = trace.layer_input(i);
        relevance = relevance_through(layer, input, &relevance);
        maps[i] = Some(Heatmap::from_tensor(
            i,
            &Tensor::from_parts(input.shape().to_vec(), relevance.clone()),
        ));
    }
    Ok(maps.into_iter().map(Option::unwrap).collect())
}

/// One image to explain.
#[derive(Debug, Clone, Copy)]
pub struct HeatmapRequest<'a> {
    pub id: &'a str,
    pub image: &'a Tensor,
    /// Ground truth, required by [`SeedMode::WorstOutput`].
    pub truth: Option<&'a [f64]>,
}

/// Heatmaps of one layer over a set of images, in request order.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerHeatmaps {
    pub layer: usize,
    pub rows: usize,
    pub cols: usize,
    pub ids: Vec<String>,
    pub maps: Vec<Heatmap>,
}

impl LayerHeatmaps {
    pub fn new(layer: usize, rows: usize, cols: usize) -> Self {
        Self {
            layer,
            rows,
            cols,
            ids: Vec::new(),
            maps: Vec::new(),
        }
    }

    pub fn push(&mut self, id: String, map: Heatmap) -> Result<()> {
        if map.dims() != (self.rows, self.cols) {
            return Err(Error::DimensionMismatch(format!(
                "layer {} expects {}x{} heatmaps, got {}x{}",
                self.layer, self.rows, self.cols, map.rows, map.cols
            )));
        }
        self.ids.push(id);
        self.maps.push(map);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.maps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.maps.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&Heatmap> {
        self.ids.iter().position(|x| x == id).map(|i| &self.maps[i])
    }

    /// Keeps only the listed images, in the given order.
    pub fn subset(&self, ids: &[String]) -> Result<LayerHeatmaps> {
        let index: HashMap<&str, usize> =
            self.ids.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
        let mut out = LayerHeatmaps::new(self.layer, self.rows, self.cols);
        for id in ids {
            let &i = index
                .get(id.as_str())
                .ok_or_else(|| Error::NotFound(format!("heatmap for image {id} at layer {}", self.layer)))?;
            out.push(id.clone(), self.maps[i].clone())?;
        }
        Ok(out)
    }

    const MAGIC: &'static [u8; 8] = b"HUDDHMP1";

    /// Header (magic, layer, N, M, image count as u64) then per image a u32-prefixed id and
    /// `N * M` little-endian f64 values.
    pub fn write_to(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = fs::File::create(path).map_err(|e| Error::file(path, e))?;
        let mut w = BufWriter::new(file);
        let mut header = Vec::with_capacity(40);
        header.extend_from_slice(Self::MAGIC);
        for v in [self.layer, self.rows, self.cols, self.len()] {
            header.extend_from_slice(&(v as u64).to_le_bytes());
        }
        w.write_all(&header)?;
        for (id, map) in self.ids.iter().zip(&self.maps) {
            w.write_all(&(id.len() as u32).to_le_bytes())?;
            w.write_all(id.as_bytes())?;
            for v in &map.values {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_from(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = fs::File::open(path).map_err(|e| Error::file(path, e))?;
        let mut r = BufReader::new(file);
        let mut offset = 0usize;
        let mut read = |buf: &mut [u8], offset: &mut usize| -> Result<()> {
            r.read_exact(buf).map_err(|_| Error::Parse {
                offset: *offset,
                reason: "unexpected end of heatmap file".into(),
            })?;
            *offset += buf.len();
            Ok(())
        };
        let mut magic = [0u8; 8];
        read(&mut magic, &mut offset)?;
        if &magic != Self::MAGIC {
            return Err(Error::Version("not a heatmap file".into()));
        }
        let mut word = [0u8; 8];
        let mut header = [0usize; 4];
        for h in &mut header {
            read(&mut word, &mut offset)?;
            *h = u64::from_le_bytes(word) as usize;
        }
        let [layer, rows, cols, count] = header;
        let mut out = LayerHeatmaps::new(layer, rows, cols);
        for _ in 0..count {
            let mut len = [0u8; 4];
            read(&mut len, &mut offset)?;
            let mut id = vec![0u8; u32::from_le_bytes(len) as usize];
            read(&mut id, &mut offset)?;
            let id = String::from_utf8(id).map_err(|_| Error::Parse {
                offset,
                reason: "image id is not utf-8".into(),
            })?;
            let mut values = Vec::with_capacity(rows * cols);
            for _ in 0..rows * cols {
                read(&mut word, &mut offset)?;
                values.push(f64::from_le_bytes(word));
            }
            out.push(id, Heatmap::new(layer, rows, cols, values)?)?;
        }
        Ok(out)
    }
}

/// Heatmaps indexed by (image id, layer).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct HeatmapStore {
    layers: BTreeMap<usize, LayerHeatmaps>,
}

impl HeatmapStore {
    pub fn insert_layer(&mut self, maps: LayerHeatmaps) {
        self.layers.insert(maps.layer, maps);
    }

    pub fn layer(&self, layer: usize) -> Result<&LayerHeatmaps> {
        self.layers
            .get(&layer)
            .ok_or_else(|| Error::NotFound(format!("no heatmaps for layer {layer}")))
    }

    pub fn layers(&self) -> impl Iterator<Item = &LayerHeatmaps> {
        self.layers.values()
    }

    pub fn layer_ids(&self) -> Vec<usize> {
        self.layers.keys().copied().collect()
    }

    pub fn get(&self, id: &str, layer: usize) -> Result<&Heatmap> {
        self.layer(layer)?
            .get(id)
            .ok_or_else(|| Error::NotFound(format!("heatmap for image {id} at layer {layer}")))
    }

    pub fn len(&self) -> usize {
        self.layers.values().map(LayerHeatmaps::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Explains every image and keeps the heatmaps of `layers` (activation indices `1..=n`);
/// `None` keeps every layer after the input.
pub fn heatmaps_for_set(
    network: &Network,
    requests: &[HeatmapRequest<'_>],
    mode: SeedMode,
    layers: Option<&[usize]>,
) -> Result<HeatmapStore> {
    let n = network.layers().len();
    let wanted: Vec<usize> = match layers {
        Some(ls) => {
            if let Some(&bad) = ls.iter().find(|&&l| l == 0 || l > n) {
                return Err(Error::invalid(format!("layer {bad} outside 1..={n}")));
            }
            ls.to_vec()
        }
        None => (1..=n).collect(),
    };
    if let Some(first) = requests.first() {
        if let Some(r) = requests.iter().find(|r| r.image.shape() != first.image.shape()) {
            return Err(Error::ShapeMismatch {
                expected: first.image.shape().to_vec(),
                actual: r.image.shape().to_vec(),
            });
        }
    }

    let per_image: Vec<Vec<Heatmap>> = requests
        .par_iter()
        .map(|req| {
            let (output, trace) = network.forward(req.image)?;
            let seed = make_seed(network, &output, mode, req.truth)?;
            let mut maps = propagate(network, &trace, &seed)?;
            Ok(wanted.iter().map(|&l| std::mem::take(&mut maps[l])).collect())
        })
        .collect::<Result<_>>()?;

    let shapes = network.layer_shapes();
    let mut store = HeatmapStore::default();
    for (k, &l) in wanted.iter().enumerate() {
        let probe = Heatmap::from_tensor(l, &Tensor::zeros(shapes[l - 1].clone()));
        let mut lm = LayerHeatmaps::new(l, probe.rows, probe.cols);
        for (req, maps) in requests.iter().zip(&per_image) {
            lm.push(req.id.to_string(), maps[k].clone())?;
        }
        store.insert_layer(lm);
    }
    Ok(store)
}

impl Default for Heatmap {
    fn default() -> Self {
        Self {
            layer: 0,
            rows: 0,
            cols: 0,
            values: Vec::new(),
        }
    }
}
