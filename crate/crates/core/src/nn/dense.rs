use std::ops::AddAssign;

use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{bounds, CenError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Identity,
}

impl Activation {
    fn apply(self, z: &mut Array2<f64>) {
        if self == Activation::Relu {
            z.mapv_inplace(|v| if v > 0.0 { v } else { 0.0 });
        }
    }
}

/// Fully connected layer. `weight` is `fan_out × fan_in`.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseLayer {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
    pub activation: Activation,
}

impl DenseLayer {
    pub fn fan_in(&self) -> usize {
        self.weight.ncols()
    }

    pub fn fan_out(&self) -> usize {
        self.weight.nrows()
    }
}

/// One network input row.
///
/// `Index` is a one-hot vector and `IndexSet` an S-hot vector; both read
/// columns of the first weight matrix instead of multiplying by a mostly-zero
/// vector.
#[derive(Clone, Debug, PartialEq)]
pub enum Input {
    Index(usize),
    IndexSet(Vec<usize>),
    Dense(Vec<f64>),
}

impl Input {
    /// Materializes the input as a dense vector of length `dim`.
    pub fn to_dense(&self, dim: usize) -> Vec<f64> {
        match self {
            Input::Index(i) => {
                let mut v = vec![0.0; dim];
                v[*i] = 1.0;
                v
            }
            Input::IndexSet(s) => {
                let mut v = vec![0.0; dim];
                for &i in s {
                    v[i] += 1.0;
                }
                v
            }
            Input::Dense(v) => v.clone(),
        }
    }
}

/// Activations retained by [`DenseNet::forward_batch`] for the backward pass.
#[derive(Clone, Debug)]
pub struct ForwardCache {
    inputs: Vec<Input>,
    /// Post-activation output of every layer, one row per input.
    outputs: Vec<Array2<f64>>,
}

impl ForwardCache {
    pub fn batch_len(&self) -> usize {
        self.inputs.len()
    }
}

/// Gradients for every layer, aligned with [`DenseNet::layers`].
#[derive(Clone, Debug, PartialEq)]
pub struct DenseGrads {
    pub weight: Vec<Array2<f64>>,
    pub bias: Vec<Array1<f64>>,
}

impl DenseGrads {
    pub fn zeros_like(net: &DenseNet) -> Self {
        Self {
            weight: net.layers.iter().map(|l| Array2::zeros(l.weight.raw_dim())).collect(),
            bias: net.layers.iter().map(|l| Array1::zeros(l.bias.raw_dim())).collect(),
        }
    }

    /// Parameter-ordered view (weight then bias, per layer).
    pub fn slices(&self) -> Vec<&[f64]> {
        let mut out = Vec::with_capacity(self.weight.len() * 2);
        for (w, b) in self.weight.iter().zip(&self.bias) {
            out.push(w.as_slice().expect("standard layout"));
            out.push(b.as_slice().expect("standard layout"));
        }
        out
    }

    pub fn is_zero(&self) -> bool {
        self.slices().iter().all(|s| s.iter().all(|&v| v == 0.0))
    }
}

/// A stack of dense layers with ReLU or identity activations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "NetRecord", into = "NetRecord")]
pub struct DenseNet {
    pub layers: Vec<DenseLayer>,
}

/// Serialized form: shapes plus row-major parameters.
#[derive(Serialize, Deserialize)]
struct NetRecord {
    layers: Vec<LayerRecord>,
}

#[derive(Serialize, Deserialize)]
struct LayerRecord {
    fan_in: usize,
    fan_out: usize,
    activation: Activation,
    weight: Vec<f64>,
    bias: Vec<f64>,
}

impl From<DenseNet> for NetRecord {
    fn from(net: DenseNet) -> Self {
        let layers = net
            .layers
            .into_iter()
            .map(|l| LayerRecord {
                fan_in: l.fan_in(),
                fan_out: l.fan_out(),
                activation: l.activation,
                weight: l.weight.iter().copied().collect(),
                bias: l.bias.to_vec(),
            })
            .collect();
        NetRecord { layers }
    }
}

impl TryFrom<NetRecord> for DenseNet {
    type Error = CenError;

    fn try_from(r: NetRecord) -> Result<Self> {
        let layers = r
            .layers
            .into_iter()
            .map(|l| {
                let weight = Array2::from_shape_vec((l.fan_out, l.fan_in), l.weight)
                    .map_err(|e| CenError::Schema(format!("weight shape: {e}")))?;
                Ok(DenseLayer {
                    weight,
                    bias: Array1::from(l.bias),
                    activation: l.activation,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        DenseNet::from_layers(layers)
    }
}

/// Whether `inputs` touch more first-layer columns, counted in elements,
/// than the weight matrix holds.
fn worth_transposing(weight: &Array2<f64>, inputs: &[Input]) -> bool {
    let touched: usize = inputs
        .iter()
        .map(|i| match i {
            Input::Index(_) => 1,
            Input::IndexSet(s) => s.len(),
            Input::Dense(_) => 0,
        })
        .sum();
    touched * weight.nrows() > weight.len()
}

impl DenseNet {
    /// Builds a network from layer widths, e.g. `[300, 200, 200, 4]`, with one
    /// activation per weight layer.
    ///
    /// Weights are drawn uniformly from `±sqrt(6 / (fan_in + fan_out))`, biases
    /// start at zero.
    pub fn new<R: Rng + ?Sized>(widths: &[usize], activations: &[Activation], rng: &mut R) -> Result<Self> {
        if widths.len() < 2 || activations.len() != widths.len() - 1 {
            return Err(CenError::Contract(format!(
                "{} widths need {} activations, got {}",
                widths.len(),
                widths.len().saturating_sub(1),
                activations.len()
            )));
        }
        if widths.iter().any(|&w| w == 0) {
            return Err(CenError::Contract("zero-width layer".into()));
        }
        let layers = widths
            .windows(2)
            .zip(activations)
            .map(|(w, &activation)| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let weight = Array2::from_shape_fn((fan_out, fan_in), |_| rng.gen_range(-limit..limit));
                DenseLayer {
                    weight,
                    bias: Array1::zeros(fan_out),
                    activation,
                }
            })
            .collect();
        Ok(Self { layers })
    }

    pub fn from_layers(layers: Vec<DenseLayer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(CenError::Contract("network without layers".into()));
        }
        for (a, b) in layers.iter().zip(layers.iter().skip(1)) {
            if a.fan_out() != b.fan_in() {
                return Err(CenError::Contract(format!(
                    "layer widths do not compose: {} then {}",
                    a.fan_out(),
                    b.fan_in()
                )));
            }
        }
        for l in &layers {
            if l.bias.len() != l.fan_out() {
                return Err(CenError::Contract("bias length differs from fan_out".into()));
            }
        }
        Ok(Self { layers })
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].fan_in()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map(DenseLayer::fan_out).unwrap_or(0)
    }

    pub fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.input_dim()];
        w.extend(self.layers.iter().map(DenseLayer::fan_out));
        w
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    /// Per-tensor lengths in [`DenseNet::param_slices_mut`] order.
    pub fn param_lens(&self) -> Vec<usize> {
        self.layers.iter().flat_map(|l| [l.weight.len(), l.bias.len()]).collect()
    }

    pub fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::with_capacity(self.layers.len() * 2);
        for l in &mut self.layers {
            out.push(l.weight.as_slice_mut().expect("standard layout"));
            out.push(l.bias.as_slice_mut().expect("standard layout"));
        }
        out
    }

    pub fn param_slices(&self) -> Vec<&[f64]> {
        let mut out = Vec::with_capacity(self.layers.len() * 2);
        for l in &self.layers {
            out.push(l.weight.as_slice().expect("standard layout"));
            out.push(l.bias.as_slice().expect("standard layout"));
        }
        out
    }

    fn check_input(&self, input: &Input) -> Result<()> {
        let dim = self.input_dim();
        match input {
            Input::Index(i) if *i >= dim => Err(bounds("input", *i, dim)),
            Input::IndexSet(s) => match s.iter().find(|&&i| i >= dim) {
                Some(&i) => Err(bounds("input", i, dim)),
                None => Ok(()),
            },
            Input::Dense(v) if v.len() != dim => Err(CenError::Contract(format!(
                "dense input has length {} but the network expects {dim}",
                v.len()
            ))),
            _ => Ok(()),
        }
    }

    /// Forward pass on a batch; returns `batch × output_dim`.
    pub fn forward_batch(&self, inputs: Vec<Input>) -> Result<(Array2<f64>, ForwardCache)> {
        for inp in &inputs {
            self.check_input(inp)?;
        }
        let first = &self.layers[0];
        let mut z = Array2::<f64>::zeros((inputs.len(), first.fan_out()));
        // Columns of the row-major weight are strided; past a point one
        // transpose is cheaper than gathering that many strided columns.
        let wt = worth_transposing(&first.weight, &inputs).then(|| first.weight.t().as_standard_layout().into_owned());
        let column = |i: usize| match &wt {
            Some(t) => t.row(i),
            None => first.weight.column(i),
        };
        for (mut row, inp) in z.rows_mut().into_iter().zip(&inputs) {
            row.assign(&first.bias);
            match inp {
                Input::Index(i) => row += &column(*i),
                Input::IndexSet(s) => {
                    for &i in s {
                        row += &column(i);
                    }
                }
                Input::Dense(v) => {
                    let x = ndarray::ArrayView1::from(v.as_slice());
                    row += &first.weight.dot(&x);
                }
            }
        }
        first.activation.apply(&mut z);
        let mut outputs = Vec::with_capacity(self.layers.len());
        outputs.push(z);
        for layer in &self.layers[1..] {
            let prev = outputs.last().expect("non-empty");
            let mut z = prev.dot(&layer.weight.t());
            z += &layer.bias;
            layer.activation.apply(&mut z);
            outputs.push(z);
        }
        let out = outputs.last().expect("non-empty").clone();
        if out.iter().any(|v| !v.is_finite()) {
            return Err(CenError::Numeric("non-finite network output".into()));
        }
        Ok((out, ForwardCache { inputs, outputs }))
    }

    /// Forward pass on one input.
    pub fn forward(&self, input: Input) -> Result<(Array1<f64>, ForwardCache)> {
        let (out, cache) = self.forward_batch(vec![input])?;
        Ok((out.row(0).to_owned(), cache))
    }

    /// Output only, without keeping the cache.
    pub fn predict(&self, input: Input) -> Result<Array1<f64>> {
        Ok(self.forward(input)?.0)
    }

    /// Reverse accumulation of `output_grad` (`batch × output_dim`) through
    /// the cached forward pass. The gradient is summed over the batch.
    pub fn backward(&self, cache: &ForwardCache, output_grad: &Array2<f64>) -> Result<DenseGrads> {
        let mut grads = DenseGrads::zeros_like(self);
        self.backward_into(cache, output_grad, &mut grads)?;
        Ok(grads)
    }

    /// Like [`DenseNet::backward`] but accumulates into existing gradients.
    pub fn backward_into(&self, cache: &ForwardCache, output_grad: &Array2<f64>, grads: &mut DenseGrads) -> Result<()> {
        let n_layers = self.layers.len();
        if cache.outputs.len() != n_layers {
            return Err(CenError::Contract("cache does not come from this network".into()));
        }
        let expected = (cache.batch_len(), self.output_dim());
        if output_grad.dim() != expected {
            return Err(CenError::Contract(format!(
                "output gradient shape {:?} differs from {:?}",
                output_grad.dim(),
                expected
            )));
        }
        if grads.weight.len() != n_layers {
            return Err(CenError::Contract("gradient buffer has wrong layer count".into()));
        }

        let mut delta = output_grad.clone();
        for l in (0..n_layers).rev() {
            let layer = &self.layers[l];
            if layer.activation == Activation::Relu {
                // derivative is 1 where the output is positive, 0 otherwise (including z = 0)
                ndarray::Zip::from(&mut delta)
                    .and(&cache.outputs[l])
                    .for_each(|d, &o| {
                        if o <= 0.0 {
                            *d = 0.0
                        }
                    });
            }
            grads.bias[l] += &delta.sum_axis(Axis(0));
            if l > 0 {
                let input = &cache.outputs[l - 1];
                ndarray::linalg::general_mat_mul(1.0, &delta.t(), input, 1.0, &mut grads.weight[l]);
                delta = delta.dot(&layer.weight);
            } else {
                let gw = &mut grads.weight[0];
                // Scatter into a transposed buffer when that beats strided
                // column writes, then fold it back in one pass.
                let mut gwt = worth_transposing(gw, &cache.inputs).then(|| Array2::<f64>::zeros((gw.ncols(), gw.nrows())));
                for (d, inp) in delta.rows().into_iter().zip(&cache.inputs) {
                    match inp {
                        Input::Index(i) => match gwt.as_mut() {
                            Some(t) => t.row_mut(*i).add_assign(&d),
                            None => gw.column_mut(*i).add_assign(&d),
                        },
                        Input::IndexSet(s) => {
                            for &i in s {
                                match gwt.as_mut() {
                                    Some(t) => t.row_mut(i).add_assign(&d),
                                    None => gw.column_mut(i).add_assign(&d),
                                }
                            }
                        }
                        Input::Dense(v) => {
                            let x = ndarray::ArrayView1::from(v.as_slice());
                            let outer = d
                                .view()
                                .insert_axis(Axis(1))
                                .dot(&x.insert_axis(Axis(0)));
                            *gw += &outer;
                        }
                    }
                }
                if let Some(t) = gwt {
                    *gw += &t.t();
                }
            }
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.param_slices().iter().all(|s| s.iter().all(|v| v.is_finite()))
    }
}
