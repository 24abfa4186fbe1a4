use rand::Rng;

use super::{NnError, Parameter, Tape, Tensor, Var};

/// Fully connected layer, `y = x·W + b` with `W: [in × out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: Parameter,
    pub bias: Parameter,
}

impl Linear {
    /// Weights uniform in `±1/√in`, zero bias.
    pub fn new<R: Rng + ?Sized>(name: &str, in_dim: usize, out_dim: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (in_dim.max(1) as f64).sqrt();
        Self {
            weight: Parameter::uniform(format!("{name}.weight"), &[in_dim, out_dim], bound, rng),
            bias: Parameter::zeros(format!("{name}.bias"), &[out_dim]),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.value().shape()[0]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.value().shape()[1]
    }

    /// Applies the layer along the last axis of a rank-2 or rank-3 input.
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var, NnError> {
        let shape = tape.shape(x).to_vec();
        if shape.last() != Some(&self.in_dim()) {
            return Err(NnError::Dimension {
                op: "linear",
                left: shape,
                right: self.weight.value().shape().to_vec(),
            });
        }
        let w = tape.param(&self.weight);
        let b = tape.param(&self.bias);
        match shape.len() {
            2 => {
                let y = tape.matmul(x, w)?;
                tape.add_bias(y, b)
            }
            3 => {
                let flat = tape.reshape(x, &[shape[0] * shape[1], shape[2]])?;
                let y = tape.matmul(flat, w)?;
                let y = tape.add_bias(y, b)?;
                tape.reshape(y, &[shape[0], shape[1], self.out_dim()])
            }
            _ => Err(NnError::InvalidInput(format!("linear on rank-{} input", shape.len()))),
        }
    }

    pub fn params(&self) -> [&Parameter; 2] {
        [&self.weight, &self.bias]
    }

    pub fn params_mut(&mut self) -> [&mut Parameter; 2] {
        [&mut self.weight, &mut self.bias]
    }
}

/// One LSTM layer with a single bias vector per gate set.
///
/// Gate columns are ordered input, forget, cell, output.
#[derive(Clone, Debug)]
pub struct LstmLayer {
    pub w_input: Parameter,
    pub w_hidden: Parameter,
    pub bias: Parameter,
}

impl LstmLayer {
    pub fn new<R: Rng + ?Sized>(name: &str, in_dim: usize, hidden: usize, rng: &mut R) -> Self {
        let input_bound = 1.0 / (in_dim.max(1) as f64).sqrt();
        let hidden_bound = 1.0 / (hidden.max(1) as f64).sqrt();
        Self {
            w_input: Parameter::uniform(format!("{name}.w_input"), &[in_dim, 4 * hidden], input_bound, rng),
            w_hidden: Parameter::uniform(format!("{name}.w_hidden"), &[hidden, 4 * hidden], hidden_bound, rng),
            bias: Parameter::zeros(format!("{name}.bias"), &[4 * hidden]),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.w_input.value().shape()[0]
    }

    pub fn hidden(&self) -> usize {
        self.w_hidden.value().shape()[0]
    }

    pub fn params(&self) -> [&Parameter; 3] {
        [&self.w_input, &self.w_hidden, &self.bias]
    }

    pub fn params_mut(&mut self) -> [&mut Parameter; 3] {
        [&mut self.w_input, &mut self.w_hidden, &mut self.bias]
    }

    fn forward(&self, tape: &mut Tape, input: Var) -> Result<Var, NnError> {
        let shape = tape.shape(input).to_vec();
        let (b, time, in_dim) = (shape[0], shape[1], shape[2]);
        if in_dim != self.in_dim() {
            return Err(NnError::Dimension {
                op: "lstm",
                left: shape,
                right: self.w_input.value().shape().to_vec(),
            });
        }
        let h_dim = self.hidden();
        let wx = tape.param(&self.w_input);
        let wh = tape.param(&self.w_hidden);
        let bias = tape.param(&self.bias);

        // Input projections for every step at once.
        let flat = tape.reshape(input, &[b * time, in_dim])?;
        let xw = tape.matmul(flat, wx)?;
        let xw = tape.add_bias(xw, bias)?;
        let xw = tape.reshape(xw, &[b, time, 4 * h_dim])?;

        let mut h = tape.constant(Tensor::zeros(&[b, h_dim]));
        let mut c = tape.constant(Tensor::zeros(&[b, h_dim]));
        let mut outputs = Vec::with_capacity(time);
        for t in 0..time {
            let x_t = tape.time_step(xw, t)?;
            let hw = tape.matmul(h, wh)?;
            let gates = tape.add(x_t, hw)?;
            let i = tape.slice_cols(gates, 0, h_dim)?;
            let f = tape.slice_cols(gates, h_dim, h_dim)?;
            let g = tape.slice_cols(gates, 2 * h_dim, h_dim)?;
            let o = tape.slice_cols(gates, 3 * h_dim, h_dim)?;
            let i = tape.sigmoid(i);
            let f = tape.sigmoid(f);
            let g = tape.tanh(g);
            let o = tape.sigmoid(o);
            let keep = tape.mul(f, c)?;
            let write = tape.mul(i, g)?;
            c = tape.add(keep, write)?;
            let c_act = tape.tanh(c);
            h = tape.mul(o, c_act)?;
            outputs.push(h);
        }
        tape.stack_time(&outputs)
    }
}

/// Runs a stack of LSTM layers over `[batch × time × in]` and returns the
/// last layer's hidden states `[batch × time × hidden]`. States start at zero.
pub fn lstm_forward(tape: &mut Tape, input: Var, layers: &[LstmLayer]) -> Result<Var, NnError> {
    if layers.is_empty() {
        return Err(NnError::Config("LSTM needs at least one layer".into()));
    }
    let shape = tape.shape(input).to_vec();
    if shape.len() != 3 {
        return Err(NnError::InvalidInput(format!(
            "LSTM input must be [batch × time × dim], got {shape:?}"
        )));
    }
    if shape[1] == 0 {
        return Err(NnError::InvalidInput("LSTM input has an empty time axis".into()));
    }
    for pair in layers.windows(2) {
        if pair[1].in_dim() != pair[0].hidden() {
            return Err(NnError::Config(format!(
                "LSTM layer expects input {} but previous hidden size is {}",
                pair[1].in_dim(),
                pair[0].hidden()
            )));
        }
    }
    let mut x = input;
    for layer in layers {
        x = layer.forward(tape, x)?;
    }
    Ok(x)
}

/// Dilated same-length convolution with optional GELU and residual path.
#[derive(Clone, Debug)]
pub struct ConvBlock {
    pub weight: Parameter,
    pub bias: Parameter,
    pub kernel: usize,
    pub dilation: usize,
    pub residual: bool,
    pub activation: bool,
}

impl ConvBlock {
    pub fn new<R: Rng + ?Sized>(
        name: &str,
        channels_in: usize,
        channels_out: usize,
        kernel: usize,
        dilation: usize,
        rng: &mut R,
    ) -> Result<Self, NnError> {
        if kernel.is_multiple_of(2) {
            return Err(NnError::Config(format!("kernel size must be odd, got {kernel}")));
        }
        if dilation == 0 {
            return Err(NnError::Config("dilation must be at least 1".into()));
        }
        let bound = 1.0 / ((kernel * channels_in).max(1) as f64).sqrt();
        Ok(Self {
            weight: Parameter::uniform(
                format!("{name}.weight"),
                &[kernel * channels_in, channels_out],
                bound,
                rng,
            ),
            bias: Parameter::zeros(format!("{name}.bias"), &[channels_out]),
            kernel,
            dilation,
            residual: true,
            activation: true,
        })
    }

    pub fn channels_in(&self) -> usize {
        self.weight.value().shape()[0] / self.kernel
    }

    pub fn channels_out(&self) -> usize {
        self.weight.value().shape()[1]
    }

    /// `act(conv(x) + b) + x`, the residual applying only when channel
    /// counts match.
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var, NnError> {
        let w = tape.param(&self.weight);
        let b = tape.param(&self.bias);
        let y = tape.conv1d(x, w, self.kernel, self.dilation)?;
        let mut y = tape.add_bias(y, b)?;
        if self.activation {
            y = tape.gelu(y);
        }
        if self.residual && self.channels_in() == self.channels_out() {
            y = tape.add(y, x)?;
        }
        Ok(y)
    }

    pub fn params(&self) -> [&Parameter; 2] {
        [&self.weight, &self.bias]
    }

    pub fn params_mut(&mut self) -> [&mut Parameter; 2] {
        [&mut self.weight, &mut self.bias]
    }
}
