//! Dense feed-forward networks with an explicit per-call activation tape.
//!
//! Parameters live in one flat buffer. Layer `l` occupies
//! `[offset_l, offset_l + out*in)` for its row-major weight matrix followed by
//! `out` bias entries. Gradient buffers use the same layout, which lets the
//! optimizer and the checkpoint code treat any network as a plain slice.

use rand::Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use super::NnError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Tanh,
    Relu,
    Identity,
}

impl Activation {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => z.tanh(),
            Activation::Relu => z.max(0.0),
            Activation::Identity => z,
        }
    }

    /// Derivative expressed through the activation output `y`.
    #[inline]
    fn derivative_at_output(self, y: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - y * y,
            Activation::Relu => {
                if y > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }

    pub fn tag(self) -> u8 {
        match self {
            Activation::Tanh => 0,
            Activation::Relu => 1,
            Activation::Identity => 2,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(Activation::Tanh),
            1 => Some(Activation::Relu),
            2 => Some(Activation::Identity),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerShape {
    pub inputs: usize,
    pub outputs: usize,
    pub activation: Activation,
}

impl LayerShape {
    pub fn param_count(&self) -> usize {
        self.inputs * self.outputs + self.outputs
    }
}

/// Intermediate values of one forward pass: the network input followed by
/// every layer output. Owned by the caller so concurrent passes never share it.
#[derive(Debug, Clone, Default)]
pub struct Tape {
    values: Vec<Vec<f64>>,
}

impl Tape {
    pub fn output(&self) -> &[f64] {
        self.values.last().map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn input(&self) -> &[f64] {
        self.values.first().map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    shapes: Vec<LayerShape>,
    offsets: Vec<usize>,
    params: Vec<f64>,
}

impl Mlp {
    /// Builds a network with `sizes = [input, hidden..., output]`.
    ///
    /// Hidden layers use `hidden`, the last layer uses `output`. Weights are
    /// drawn Xavier-uniform; biases start at zero.
    pub fn new<R: Rng + ?Sized>(
        sizes: &[usize],
        hidden: Activation,
        output: Activation,
        rng: &mut R,
    ) -> Result<Self, NnError> {
        if sizes.len() < 2 {
            return Err(NnError::InvalidShape(
                "an mlp needs at least an input and an output size".into(),
            ));
        }
        if sizes.contains(&0) {
            return Err(NnError::InvalidShape("layer sizes must be > 0".into()));
        }
        let shapes: Vec<LayerShape> = sizes
            .windows(2)
            .enumerate()
            .map(|(l, w)| LayerShape {
                inputs: w[0],
                outputs: w[1],
                activation: if l + 2 == sizes.len() { output } else { hidden },
            })
            .collect();
        let mut net = Self::zeros(shapes)?;
        for l in 0..net.shapes.len() {
            let shape = net.shapes[l];
            let limit = (6.0 / (shape.inputs + shape.outputs) as f64).sqrt();
            let dist = Uniform::new_inclusive(-limit, limit).expect("finite xavier limit");
            let off = net.offsets[l];
            for w in &mut net.params[off..off + shape.inputs * shape.outputs] {
                *w = dist.sample(rng);
            }
        }
        Ok(net)
    }

    pub fn zeros(shapes: Vec<LayerShape>) -> Result<Self, NnError> {
        if shapes.is_empty() {
            return Err(NnError::InvalidShape("no layers".into()));
        }
        for pair in shapes.windows(2) {
            if pair[0].outputs != pair[1].inputs {
                return Err(NnError::InvalidShape(format!(
                    "layer output {} does not chain into input {}",
                    pair[0].outputs, pair[1].inputs
                )));
            }
        }
        let mut offsets = Vec::with_capacity(shapes.len());
        let mut total = 0;
        for s in &shapes {
            offsets.push(total);
            total += s.param_count();
        }
        Ok(Self {
            shapes,
            offsets,
            params: vec![0.0; total],
        })
    }

    pub fn from_parts(shapes: Vec<LayerShape>, params: Vec<f64>) -> Result<Self, NnError> {
        let expected = shapes.iter().try_fold(0usize, |acc, s| {
            s.inputs.checked_mul(s.outputs)?.checked_add(s.outputs)?.checked_add(acc)
        });
        let Some(expected) = expected else {
            return Err(NnError::InvalidShape("parameter count overflows".into()));
        };
        if params.len() != expected {
            return Err(NnError::DimensionMismatch {
                expected,
                actual: params.len(),
            });
        }
        let mut net = Self::zeros(shapes)?;
        if params.iter().any(|p| !p.is_finite()) {
            return Err(NnError::InvalidShape("parameters must be finite".into()));
        }
        net.params = params;
        Ok(net)
    }

    pub fn input_dim(&self) -> usize {
        self.shapes[0].inputs
    }

    pub fn output_dim(&self) -> usize {
        self.shapes[self.shapes.len() - 1].outputs
    }

    pub fn shapes(&self) -> &[LayerShape] {
        &self.shapes
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn zero_grads(&self) -> Vec<f64> {
        vec![0.0; self.params.len()]
    }

    /// Weight and bias slices of layer `l`.
    pub fn layer(&self, l: usize) -> (&[f64], &[f64]) {
        let s = self.shapes[l];
        let off = self.offsets[l];
        let nw = s.inputs * s.outputs;
        (
            &self.params[off..off + nw],
            &self.params[off + nw..off + nw + s.outputs],
        )
    }

    pub fn layer_mut(&mut self, l: usize) -> (&mut [f64], &mut [f64]) {
        let s = self.shapes[l];
        let off = self.offsets[l];
        let nw = s.inputs * s.outputs;
        let (w, rest) = self.params[off..off + nw + s.outputs].split_at_mut(nw);
        (w, rest)
    }

    fn check_input(&self, x: &[f64]) -> Result<(), NnError> {
        if x.len() != self.input_dim() {
            return Err(NnError::DimensionMismatch {
                expected: self.input_dim(),
                actual: x.len(),
            });
        }
        Ok(())
    }

    fn layer_forward(&self, l: usize, x: &[f64], out: &mut Vec<f64>) {
        let s = self.shapes[l];
        let (w, b) = self.layer(l);
        out.clear();
        out.extend(b.iter().enumerate().map(|(o, &bias)| {
            let row = &w[o * s.inputs..(o + 1) * s.inputs];
            let z = row.iter().zip(x).fold(bias, |acc, (wi, xi)| acc + wi * xi);
            s.activation.apply(z)
        }));
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>, NnError> {
        self.check_input(x)?;
        let mut cur = x.to_vec();
        let mut next = Vec::new();
        for l in 0..self.shapes.len() {
            self.layer_forward(l, &cur, &mut next);
            std::mem::swap(&mut cur, &mut next);
        }
        Ok(cur)
    }

    /// Forward pass that keeps every intermediate for a later [`Mlp::backward`].
    pub fn forward_tape(&self, x: &[f64]) -> Result<Tape, NnError> {
        self.check_input(x)?;
        let mut values = Vec::with_capacity(self.shapes.len() + 1);
        values.push(x.to_vec());
        for l in 0..self.shapes.len() {
            let mut out = Vec::with_capacity(self.shapes[l].outputs);
            self.layer_forward(l, &values[l], &mut out);
            values.push(out);
        }
        Ok(Tape { values })
    }

    /// Reverse pass for `output · upstream`.
    ///
    /// Parameter gradients are accumulated into `grads` (same layout as the
    /// parameters); the gradient with respect to the network input is returned.
    pub fn backward(
        &self,
        tape: &Tape,
        upstream: &[f64],
        grads: &mut [f64],
    ) -> Result<Vec<f64>, NnError> {
        if tape.values.len() != self.shapes.len() + 1
            || tape.values[0].len() != self.input_dim()
        {
            return Err(NnError::Usage(
                "backward requires the tape of a forward pass through this network".into(),
            ));
        }
        if upstream.len() != self.output_dim() {
            return Err(NnError::DimensionMismatch {
                expected: self.output_dim(),
                actual: upstream.len(),
            });
        }
        if grads.len() != self.params.len() {
            return Err(NnError::DimensionMismatch {
                expected: self.params.len(),
                actual: grads.len(),
            });
        }
        let mut delta = upstream.to_vec();
        for l in (0..self.shapes.len()).rev() {
            let s = self.shapes[l];
            let y = &tape.values[l + 1];
            let x = &tape.values[l];
            for (d, &yo) in delta.iter_mut().zip(y) {
                *d *= s.activation.derivative_at_output(yo);
            }
            let off = self.offsets[l];
            let nw = s.inputs * s.outputs;
            {
                let (gw, gb) = grads[off..off + nw + s.outputs].split_at_mut(nw);
                for (o, &d) in delta.iter().enumerate() {
                    gb[o] += d;
                    if d != 0.0 {
                        let row = &mut gw[o * s.inputs..(o + 1) * s.inputs];
                        for (g, &xi) in row.iter_mut().zip(x) {
                            *g += d * xi;
                        }
                    }
                }
            }
            let w = &self.params[off..off + nw];
            let mut prev = vec![0.0; s.inputs];
            for (o, &d) in delta.iter().enumerate() {
                if d != 0.0 {
                    let row = &w[o * s.inputs..(o + 1) * s.inputs];
                    for (p, &wi) in prev.iter_mut().zip(row) {
                        *p += d * wi;
                    }
                }
            }
            delta = prev;
        }
        Ok(delta)
    }

    /// Scales the weights of the final layer and sets its bias, used to start
    /// policy heads near a chosen output.
    pub fn set_output_layer(&mut self, weight_scale: f64, bias: &[f64]) {
        let last = self.shapes.len() - 1;
        let (w, b) = self.layer_mut(last);
        for wi in w.iter_mut() {
            *wi *= weight_scale;
        }
        b.copy_from_slice(bias);
    }

    pub fn is_finite(&self) -> bool {
        self.params.iter().all(|p| p.is_finite())
    }
}
