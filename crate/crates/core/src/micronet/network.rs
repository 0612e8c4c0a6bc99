use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::layer::{Conv2d, Dense, Layer, MaxPool, ParamGrads};
use super::tensor::{argmax, softmax, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Task {
    /// Softmax over the output neurons.
    Classification,
    /// Raw output neurons.
    Regression,
}

/// Ordered stack of layers plus the metadata needed to interpret its outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    input_shape: Vec<usize>,
    task: Task,
    layers: Vec<Layer>,
    /// Class labels (classification) or output-neuron names (regression).
    output_names: Vec<String>,
}

/// Every intermediate value of one forward pass. `activations[0]` is the network input and
/// `activations[i + 1]` is the output of layer `i`, so layer `i` reads `activations[i]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationTrace {
    pub activations: Vec<Tensor>,
}

impl ActivationTrace {
    pub fn layer_input(&self, layer: usize) -> &Tensor {
        &self.activations[layer]
    }

    pub fn layer_output(&self, layer: usize) -> &Tensor {
        &self.activations[layer + 1]
    }

    /// Raw final-layer values (logits for classifiers).
    pub fn final_output(&self) -> &Tensor {
        self.activations.last().expect("trace always holds the input")
    }

    pub fn num_layers(&self) -> usize {
        self.activations.len() - 1
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Prediction {
    Class(usize),
    Values(Vec<f64>),
}

impl Network {
    pub fn new(
        input_shape: Vec<usize>,
        task: Task,
        layers: Vec<Layer>,
        output_names: Vec<String>,
    ) -> Result<Self> {
        if input_shape.is_empty() || input_shape.contains(&0) {
            return Err(Error::InvalidNetwork(format!(
                "bad input shape {input_shape:?}"
            )));
        }
        if !layers.iter().any(Layer::is_parameterized) {
            return Err(Error::InvalidNetwork(
                "network needs at least one dense or conv2d layer".into(),
            ));
        }
        let mut shape = input_shape.clone();
        for layer in &layers {
            shape = layer.output_shape(&shape)?;
        }
        if shape.len() != 1 || shape[0] != output_names.len() {
            return Err(Error::InvalidNetwork(format!(
                "final output shape {shape:?} does not match {} outputs",
                output_names.len()
            )));
        }
        if task == Task::Classification && output_names.len() < 2 {
            return Err(Error::InvalidNetwork(
                "classification needs at least two classes".into(),
            ));
        }
        Ok(Self {
            input_shape,
            task,
            layers,
            output_names,
        })
    }

    /// conv(8, 3x3) -> relu -> maxpool(2) -> conv(16, 3x3) -> relu -> maxpool(2) -> flatten
    /// -> dense(64) -> relu -> dense(classes), on `[1, side, side]` grayscale inputs.
    pub fn default_classifier(side: usize, classes: Vec<String>, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c1 = (side.saturating_sub(2)) / 2;
        let c2 = (c1.saturating_sub(2)) / 2;
        let n = classes.len();
        let layers = vec![
            Layer::Conv2d(Conv2d::new(1, 8, 3, 1, 0, &mut rng)),
            Layer::Relu,
            Layer::MaxPool(MaxPool { window: 2, stride: 2 }),
            Layer::Conv2d(Conv2d::new(8, 16, 3, 1, 0, &mut rng)),
            Layer::Relu,
            Layer::MaxPool(MaxPool { window: 2, stride: 2 }),
            Layer::Flatten,
            Layer::Dense(Dense::new(16 * c2 * c2, 64, &mut rng)),
            Layer::Relu,
            Layer::Dense(Dense::new(64, n, &mut rng)),
        ];
        Self::new(vec![1, side, side], Task::Classification, layers, classes)
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn task(&self) -> Task {
        self.task
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn output_names(&self) -> &[String] {
        &self.output_names
    }

    pub fn num_outputs(&self) -> usize {
        self.output_names.len()
    }

    /// Output shape of every layer, in order.
    pub fn layer_shapes(&self) -> Vec<Vec<usize>> {
        let mut shape = self.input_shape.clone();
        self.layers
            .iter()
            .map(|l| {
                shape = l.output_shape(&shape).expect("validated at construction");
                shape.clone()
            })
            .collect()
    }

    /// Redraws every parameter from the seeded initializer, keeping the architecture.
    pub fn reinitialize(&mut self, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for layer in &mut self.layers {
            match layer {
                Layer::Dense(d) => *d = Dense::new(d.inputs, d.outputs, &mut rng),
                Layer::Conv2d(c) => {
                    *c = Conv2d::new(
                        c.in_channels,
                        c.out_channels,
                        c.kernel,
                        c.stride,
                        c.padding,
                        &mut rng,
                    )
                }
                _ => {}
            }
        }
    }

    fn check_input(&self, image: &Tensor) -> Result<()> {
        if image.shape() != self.input_shape.as_slice() {
            return Err(Error::ShapeMismatch {
                expected: self.input_shape.clone(),
                actual: image.shape().to_vec(),
            });
        }
        Ok(())
    }

    /// Runs the network and records every activation. The returned output is the softmax of
    /// the final layer for classifiers and the raw final layer for regressors; the trace keeps
    /// the raw values.
    pub fn forward(&self, image: &Tensor) -> Result<(Tensor, ActivationTrace)> {
        self.check_input(image)?;
        let trace = self.forward_from(0, image.clone());
        let output = self.task_output(trace.final_output());
        Ok((output, trace))
    }

    /// Continues a forward pass from the input of layer `start`.
    pub fn forward_from(&self, start: usize, input: Tensor) -> ActivationTrace {
        let mut activations = Vec::with_capacity(self.layers.len() - start + 1);
        activations.push(input);
        for layer in &self.layers[start..] {
            let next = layer.forward(activations.last().unwrap());
            activations.push(next);
        }
        ActivationTrace { activations }
    }

    pub fn task_output(&self, raw: &Tensor) -> Tensor {
        match self.task {
            Task::Classification => Tensor::from_parts(raw.shape().to_vec(), softmax(raw.data())),
            Task::Regression => raw.clone(),
        }
    }

    pub fn predict(&self, image: &Tensor) -> Result<Prediction> {
        let (out, _) = self.forward(image)?;
        Ok(self.interpret(&out))
    }

    pub fn interpret(&self, output: &Tensor) -> Prediction {
        match self.task {
            Task::Classification => Prediction::Class(argmax(output.data())),
            Task::Regression => Prediction::Values(output.data().to_vec()),
        }
    }

    pub fn zero_grads(&self) -> Vec<Option<ParamGrads>> {
        self.layers.iter().map(Layer::zero_grads).collect()
    }

    /// Backpropagates the gradient of the loss with respect to the raw final-layer output,
    /// accumulating into `grads`. Returns the gradient with respect to the network input when
    /// `need_input_grad` is set.
    pub fn backward(
        &self,
        trace: &ActivationTrace,
        grad_output: &[f64],
        grads: &mut [Option<ParamGrads>],
        need_input_grad: bool,
    ) -> Option<Vec<f64>> {
        let mut grad = grad_output.to_vec();
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let need = i > 0 || need_input_grad;
            match layer.backward(trace.layer_input(i), &grad, grads[i].as_mut(), need) {
                Some(g) => grad = g,
                None => return None,
            }
        }
        Some(grad)
    }

    /// Applies `params -= lr * grads * scale` to every parameterized layer.
    pub fn apply_gradients(&mut self, grads: &[Option<ParamGrads>], lr: f64, scale: f64) {
        for (layer, g) in self.layers.iter_mut().zip(grads) {
            if let (Some((w, b)), Some(g)) = (layer.params_mut(), g.as_ref()) {
                for (p, d) in w.iter_mut().zip(&g.weights) {
                    *p -= lr * scale * d;
                }
                for (p, d) in b.iter_mut().zip(&g.bias) {
                    *p -= lr * scale * d;
                }
            }
        }
    }

    pub fn parameters_finite(&self) -> bool {
        self.layers.iter().all(|l| match l.params() {
            Some((w, b)) => w.iter().chain(b).all(|v| v.is_finite()),
            None => true,
        })
    }
}
