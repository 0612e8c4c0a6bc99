use rand::Rng;

use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LayerKind {
    Dense,
    Conv2d,
    Relu,
    MaxPool,
    Flatten,
}

impl LayerKind {
    pub fn tag(self) -> u8 {
        match self {
            LayerKind::Dense => 1,
            LayerKind::Conv2d => 2,
            LayerKind::Relu => 3,
            LayerKind::MaxPool => 4,
            LayerKind::Flatten => 5,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        Some(match tag {
            1 => LayerKind::Dense,
            2 => LayerKind::Conv2d,
            3 => LayerKind::Relu,
            4 => LayerKind::MaxPool,
            5 => LayerKind::Flatten,
            _ => return None,
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            LayerKind::Dense => "dense",
            LayerKind::Conv2d => "conv2d",
            LayerKind::Relu => "relu",
            LayerKind::MaxPool => "maxpool",
            LayerKind::Flatten => "flatten",
        }
    }
}

/// Fully connected layer. `weights` is row-major `(outputs, inputs)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub inputs: usize,
    pub outputs: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Dense {
    /// Weights uniform in `±1/sqrt(inputs)`, zero bias.
    pub fn new<R: Rng + ?Sized>(inputs: usize, outputs: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (inputs as f64).sqrt();
        let weights = (0..inputs * outputs)
            .map(|_| rng.gen_range(-bound..bound))
            .collect();
        Self {
            inputs,
            outputs,
            weights,
            bias: vec![0.0; outputs],
        }
    }

    pub fn from_weights(
        inputs: usize,
        outputs: usize,
        weights: Vec<f64>,
        bias: Vec<f64>,
    ) -> Result<Self> {
        if weights.len() != inputs * outputs || bias.len() != outputs {
            return Err(Error::InvalidNetwork(format!(
                "dense {inputs}->{outputs} needs {} weights and {outputs} biases",
                inputs * outputs
            )));
        }
        Ok(Self {
            inputs,
            outputs,
            weights,
            bias,
        })
    }

    #[inline]
    pub fn weight(&self, out: usize, inp: usize) -> f64 {
        self.weights[out * self.inputs + inp]
    }
}

/// 2-D convolution over `[channels, height, width]` inputs.
/// `weights` is laid out as `(out_channels, in_channels, kernel, kernel)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Conv2d {
    pub fn new<R: Rng + ?Sized>(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut R,
    ) -> Self {
        let fan_in = in_channels * kernel * kernel;
        let bound = 1.0 / (fan_in as f64).sqrt();
        let weights = (0..out_channels * fan_in)
            .map(|_| rng.gen_range(-bound..bound))
            .collect();
        Self {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            weights,
            bias: vec![0.0; out_channels],
        }
    }

    #[inline]
    pub fn weight_index(&self, out: usize, inp: usize, ky: usize, kx: usize) -> usize {
        ((out * self.in_channels + inp) * self.kernel + ky) * self.kernel + kx
    }

    fn output_hw(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        let ph = h + 2 * self.padding;
        let pw = w + 2 * self.padding;
        if ph < self.kernel || pw < self.kernel || self.stride == 0 {
            return None;
        }
        Some((
            (ph - self.kernel) / self.stride + 1,
            (pw - self.kernel) / self.stride + 1,
        ))
    }

    /// Input coordinate for an output position and kernel offset, or `None` inside the padding.
    #[inline]
    pub(crate) fn source(&self, out_pos: usize, k: usize, extent: usize) -> Option<usize> {
        let p = (out_pos * self.stride + k) as isize - self.padding as isize;
        if p < 0 || p as usize >= extent {
            None
        } else {
            Some(p as usize)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MaxPool {
    pub window: usize,
    pub stride: usize,
}

impl MaxPool {
    fn output_hw(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        if h < self.window || w < self.window || self.stride == 0 || self.window == 0 {
            return None;
        }
        Some((
            (h - self.window) / self.stride + 1,
            (w - self.window) / self.stride + 1,
        ))
    }

    /// Flat input index of the window maximum for output `(c, oy, ox)`; ties go to the first
    /// position in row-major window order.
    #[inline]
    pub(crate) fn winner(&self, input: &[f64], h: usize, w: usize, c: usize, oy: usize, ox: usize) -> usize {
        let mut best = (c * h + oy * self.stride) * w + ox * self.stride;
        for dy in 0..self.window {
            let row = (c * h + oy * self.stride + dy) * w + ox * self.stride;
            for dx in 0..self.window {
                if input[row + dx] > input[best] {
                    best = row + dx;
                }
            }
        }
        best
    }
}

/// Per-layer parameter gradients, same layout as the layer's own buffers.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrads {
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl ParamGrads {
    pub fn zero(&mut self) {
        self.weights.iter_mut().for_each(|g| *g = 0.0);
        self.bias.iter_mut().for_each(|g| *g = 0.0);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Dense(Dense),
    Conv2d(Conv2d),
    Relu,
    MaxPool(MaxPool),
    Flatten,
}

impl Layer {
    pub fn kind(&self) -> LayerKind {
        match self {
            Layer::Dense(_) => LayerKind::Dense,
            Layer::Conv2d(_) => LayerKind::Conv2d,
            Layer::Relu => LayerKind::Relu,
            Layer::MaxPool(_) => LayerKind::MaxPool,
            Layer::Flatten => LayerKind::Flatten,
        }
    }

    pub fn is_parameterized(&self) -> bool {
        matches!(self, Layer::Dense(_) | Layer::Conv2d(_))
    }

    pub fn params(&self) -> Option<(&[f64], &[f64])> {
        match self {
            Layer::Dense(d) => Some((&d.weights, &d.bias)),
            Layer::Conv2d(c) => Some((&c.weights, &c.bias)),
            _ => None,
        }
    }

    pub fn params_mut(&mut self) -> Option<(&mut [f64], &mut [f64])> {
        match self {
            Layer::Dense(d) => Some((&mut d.weights, &mut d.bias)),
            Layer::Conv2d(c) => Some((&mut c.weights, &mut c.bias)),
            _ => None,
        }
    }

    pub fn zero_grads(&self) -> Option<ParamGrads> {
        self.params().map(|(w, b)| ParamGrads {
            weights: vec![0.0; w.len()],
            bias: vec![0.0; b.len()],
        })
    }

    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let bad = |what: &str| {
            Error::InvalidNetwork(format!(
                "{} layer cannot accept input shape {input:?}: {what}",
                self.kind().name()
            ))
        };
        match self {
            Layer::Dense(d) => {
                if input.len() != 1 || input[0] != d.inputs {
                    return Err(bad(&format!("expected [{}]", d.inputs)));
                }
                Ok(vec![d.outputs])
            }
            Layer::Conv2d(c) => {
                if input.len() != 3 || input[0] != c.in_channels {
                    return Err(bad(&format!("expected [{}, h, w]", c.in_channels)));
                }
                let (oh, ow) = c
                    .output_hw(input[1], input[2])
                    .ok_or_else(|| bad("kernel larger than padded input"))?;
                Ok(vec![c.out_channels, oh, ow])
            }
            Layer::Relu => Ok(input.to_vec()),
            Layer::MaxPool(p) => {
                if input.len() != 3 {
                    return Err(bad("expected [c, h, w]"));
                }
                let (oh, ow) = p
                    .output_hw(input[1], input[2])
                    .ok_or_else(|| bad("window larger than input"))?;
                Ok(vec![input[0], oh, ow])
            }
            Layer::Flatten => Ok(vec![input.iter().product()]),
        }
    }

    /// Forward pass for an input whose shape has already been validated.
    pub fn forward(&self, input: &Tensor) -> Tensor {
        let x = input.data();
        match self {
            Layer::Dense(d) => {
                let out = (0..d.outputs)
                    .map(|o| {
                        let row = &d.weights[o * d.inputs..(o + 1) * d.inputs];
                        d.bias[o] + row.iter().zip(x).map(|(w, a)| w * a).sum::<f64>()
                    })
                    .collect();
                Tensor::from_parts(vec![d.outputs], out)
            }
            Layer::Conv2d(c) => {
                let (h, w) = (input.shape()[1], input.shape()[2]);
                let (oh, ow) = c.output_hw(h, w).expect("validated shape");
                let mut out = vec![0.0; c.out_channels * oh * ow];
                for o in 0..c.out_channels {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let mut s = c.bias[o];
                            for ic in 0..c.in_channels {
                                for ky in 0..c.kernel {
                                    let Some(iy) = c.source(oy, ky, h) else { continue };
                                    let wrow = c.weight_index(o, ic, ky, 0);
                                    let irow = (ic * h + iy) * w;
                                    for kx in 0..c.kernel {
                                        if let Some(ix) = c.source(ox, kx, w) {
                                            s += c.weights[wrow + kx] * x[irow + ix];
                                        }
                                    }
                                }
                            }
                            out[(o * oh + oy) * ow + ox] = s;
                        }
                    }
                }
                Tensor::from_parts(vec![c.out_channels, oh, ow], out)
            }
            Layer::Relu => Tensor::from_parts(
                input.shape().to_vec(),
                x.iter().map(|&v| v.max(0.0)).collect(),
            ),
            Layer::MaxPool(p) => {
                let (ch, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
                let (oh, ow) = p.output_hw(h, w).expect("validated shape");
                let mut out = Vec::with_capacity(ch * oh * ow);
                for c in 0..ch {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            out.push(x[p.winner(x, h, w, c, oy, ox)]);
                        }
                    }
                }
                Tensor::from_parts(vec![ch, oh, ow], out)
            }
            Layer::Flatten => Tensor::from_parts(vec![input.len()], x.to_vec()),
        }
    }

    /// Backpropagates `grad_out` through the layer, accumulating parameter gradients into
    /// `grads` and returning the gradient with respect to the layer input when requested.
    pub fn backward(
        &self,
        input: &Tensor,
        grad_out: &[f64],
        grads: Option<&mut ParamGrads>,
        need_input_grad: bool,
    ) -> Option<Vec<f64>> {
        let x = input.data();
        match self {
            Layer::Dense(d) => {
                if let Some(g) = grads {
                    for o in 0..d.outputs {
                        let go = grad_out[o];
                        if go == 0.0 {
                            continue;
                        }
                        g.bias[o] += go;
                        let row = &mut g.weights[o * d.inputs..(o + 1) * d.inputs];
                        for (gw, &a) in row.iter_mut().zip(x) {
                            *gw += go * a;
                        }
                    }
                }
                need_input_grad.then(|| {
                    let mut gi = vec![0.0; d.inputs];
                    for o in 0..d.outputs {
                        let go = grad_out[o];
                        if go == 0.0 {
                            continue;
                        }
                        let row = &d.weights[o * d.inputs..(o + 1) * d.inputs];
                        for (g, &wv) in gi.iter_mut().zip(row) {
                            *g += go * wv;
                        }
                    }
                    gi
                })
            }
            Layer::Conv2d(c) => {
                let (h, w) = (input.shape()[1], input.shape()[2]);
                let (oh, ow) = c.output_hw(h, w).expect("validated shape");
                let mut gi = need_input_grad.then(|| vec![0.0; x.len()]);
                let mut grads = grads;
                for o in 0..c.out_channels {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let go = grad_out[(o * oh + oy) * ow + ox];
                            if go == 0.0 {
                                continue;
                            }
                            if let Some(g) = grads.as_deref_mut() {
                                g.bias[o] += go;
                            }
                            for ic in 0..c.in_channels {
                                for ky in 0..c.kernel {
                                    let Some(iy) = c.source(oy, ky, h) else { continue };
                                    let wrow = c.weight_index(o, ic, ky, 0);
                                    let irow = (ic * h + iy) * w;
                                    for kx in 0..c.kernel {
                                        let Some(ix) = c.source(ox, kx, w) else { continue };
                                        if let Some(g) = grads.as_deref_mut() {
                                            g.weights[wrow + kx] += go * x[irow + ix];
                                        }
                                        if let Some(gi) = gi.as_mut() {
                                            gi[irow + ix] += go * c.weights[wrow + kx];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                gi
            }
            Layer::Relu => need_input_grad.then(|| {
                x.iter()
                    .zip(grad_out)
                    .map(|(&v, &g)| if v > 0.0 { g } else { 0.0 })
                    .collect()
            }),
            Layer::MaxPool(p) => need_input_grad.then(|| {
                let (ch, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
                let (oh, ow) = p.output_hw(h, w).expect("validated shape");
                let mut gi = vec![0.0; x.len()];
                for c in 0..ch {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            gi[p.winner(x, h, w, c, oy, ox)] += grad_out[(c * oh + oy) * ow + ox];
                        }
                    }
                }
                gi
            }),
            Layer::Flatten => need_input_grad.then(|| grad_out.to_vec()),
        }
    }
}
