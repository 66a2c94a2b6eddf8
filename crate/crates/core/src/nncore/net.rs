use rand::Rng;

use super::matrix::Matrix;
use super::tape::{row_moments, GradTape, ParamSlot, Var};
use crate::error::{Result, TedError};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Tanh,
    None,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
            Activation::None => x,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Tanh => "tanh",
            Activation::None => "none",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "relu" => Some(Activation::Relu),
            "tanh" => Some(Activation::Tanh),
            "none" => Some(Activation::None),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    /// fan_in × fan_out
    pub weights: Matrix,
    /// 1 × fan_out
    pub biases: Matrix,
    pub activation: Activation,
}

/// Elementwise affine layer normalization applied to the last layer's
/// pre-activation.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm {
    pub gain: Matrix,
    pub bias: Matrix,
}

/// A stack of dense layers. Used both for the encoder (`f_θ`) and for the
/// Q head.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseNet {
    pub layers: Vec<DenseLayer>,
    pub final_norm: Option<LayerNorm>,
}

impl DenseNet {
    /// Weights uniform in ±1/√fan_in, zero biases, unit layer-norm gain.
    pub fn init<R: Rng + ?Sized>(
        input_dim: usize,
        widths: &[usize],
        activations: &[Activation],
        layer_norm: bool,
        rng: &mut R,
    ) -> Self {
        assert_eq!(widths.len(), activations.len());
        assert!(!widths.is_empty());
        let mut layers = Vec::with_capacity(widths.len());
        let mut fan_in = input_dim;
        for (&fan_out, &activation) in widths.iter().zip(activations) {
            let bound = 1.0 / (fan_in as f64).sqrt();
            let data = (0..fan_in * fan_out).map(|_| rng.random_range(-bound..bound)).collect();
            layers.push(DenseLayer {
                weights: Matrix::from_vec(fan_in, fan_out, data),
                biases: Matrix::zeros(1, fan_out),
                activation,
            });
            fan_in = fan_out;
        }
        let final_norm = layer_norm.then(|| LayerNorm {
            gain: Matrix::filled(1, fan_in, 1.0),
            bias: Matrix::zeros(1, fan_in),
        });
        DenseNet { layers, final_norm }
    }

    /// Encoder: relu hidden layers, linear map to the latent, layer norm, tanh.
    pub fn encoder<R: Rng + ?Sized>(input_dim: usize, hidden: &[usize], latent_dim: usize, rng: &mut R) -> Self {
        DenseNet::encoder_with_norm(input_dim, hidden, latent_dim, true, rng)
    }

    /// Like [`DenseNet::encoder`] with the layer norm optional.
    pub fn encoder_with_norm<R: Rng + ?Sized>(
        input_dim: usize,
        hidden: &[usize],
        latent_dim: usize,
        layer_norm: bool,
        rng: &mut R,
    ) -> Self {
        let mut widths = hidden.to_vec();
        widths.push(latent_dim);
        let mut acts = vec![Activation::Relu; hidden.len()];
        acts.push(Activation::Tanh);
        DenseNet::init(input_dim, &widths, &acts, layer_norm, rng)
    }

    /// Plain MLP with relu hidden layers and a linear output.
    pub fn mlp<R: Rng + ?Sized>(input_dim: usize, hidden: &[usize], output_dim: usize, rng: &mut R) -> Self {
        let mut widths = hidden.to_vec();
        widths.push(output_dim);
        let mut acts = vec![Activation::Relu; hidden.len()];
        acts.push(Activation::None);
        DenseNet::init(input_dim, &widths, &acts, false, rng)
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weights.rows()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.weights.cols())
    }

    /// Parameter tensors in slot order: `w0, b0, w1, b1, …, [gain, bias]`.
    pub fn params(&self) -> Vec<&Matrix> {
        let mut out = Vec::with_capacity(self.layers.len() * 2 + 2);
        for l in &self.layers {
            out.push(&l.weights);
            out.push(&l.biases);
        }
        if let Some(ln) = &self.final_norm {
            out.push(&ln.gain);
            out.push(&ln.bias);
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out = Vec::with_capacity(self.layers.len() * 2 + 2);
        for l in &mut self.layers {
            out.push(&mut l.weights);
            out.push(&mut l.biases);
        }
        if let Some(ln) = &mut self.final_norm {
            out.push(&mut ln.gain);
            out.push(&mut ln.bias);
        }
        out
    }

    pub fn param_shapes(&self) -> Vec<(usize, usize)> {
        self.params().iter().map(|m| m.shape()).collect()
    }

    pub fn num_params(&self) -> usize {
        self.params().iter().map(|m| m.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.params().iter().all(|m| m.is_finite())
    }

    /// Forward pass on a batch (one sample per row) without recording.
    pub fn forward_batch(&self, input: &Matrix) -> Result<Matrix> {
        if input.cols() != self.input_dim() {
            return Err(TedError::shape("dense forward", self.input_dim(), input.cols()));
        }
        let last = self.layers.len() - 1;
        let mut x = input.clone();
        for (li, layer) in self.layers.iter().enumerate() {
            let mut pre = x.matmul(&layer.weights);
            let bias = layer.biases.as_slice();
            for i in 0..pre.rows() {
                let row = pre.row_mut(i);
                for (v, b) in row.iter_mut().zip(bias) {
                    *v += b;
                }
                if li == last {
                    if let Some(ln) = &self.final_norm {
                        let (mean, istd) = row_moments(row);
                        for ((v, g), c) in row.iter_mut().zip(ln.gain.as_slice()).zip(ln.bias.as_slice()) {
                            *v = (*v - mean) * istd * g + c;
                        }
                    }
                }
                for v in row.iter_mut() {
                    *v = layer.activation.apply(*v);
                }
            }
            x = pre;
        }
        Ok(x)
    }

    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>> {
        let m = Matrix::row_vector(input.to_vec());
        Ok(self.forward_batch(&m)?.into_vec())
    }

    /// Records the forward pass on `tape`, registering every tensor under
    /// `ParamSlot { group, index }`.
    pub fn forward_tape(&self, tape: &mut GradTape, input: Var, group: u16) -> Result<Var> {
        let cols = tape.value(input).cols();
        if cols != self.input_dim() {
            return Err(TedError::shape("dense forward", self.input_dim(), cols));
        }
        let last = self.layers.len() - 1;
        let mut x = input;
        let mut slot = 0u16;
        let mut next_slot = || {
            let s = ParamSlot::new(group, slot);
            slot += 1;
            s
        };
        let mut layer_slots = Vec::new();
        for _ in &self.layers {
            layer_slots.push((next_slot(), next_slot()));
        }
        let norm_slots = self.final_norm.as_ref().map(|_| (next_slot(), next_slot()));

        for (li, layer) in self.layers.iter().enumerate() {
            let (ws, bs) = layer_slots[li];
            let w = tape.param(&layer.weights, ws);
            let b = tape.param(&layer.biases, bs);
            let lin = tape.matmul(x, w);
            let mut pre = tape.add_row(lin, b);
            if li == last {
                if let (Some(ln), Some((gs, cs))) = (&self.final_norm, norm_slots) {
                    let normed = tape.layer_norm(pre);
                    let g = tape.param(&ln.gain, gs);
                    let c = tape.param(&ln.bias, cs);
                    let scaled = tape.mul_row(normed, g);
                    pre = tape.add_row(scaled, c);
                }
            }
            x = match layer.activation {
                Activation::Relu => tape.relu(pre),
                Activation::Tanh => tape.tanh(pre),
                Activation::None => pre,
            };
        }
        Ok(x)
    }

    /// Slow-moving target update: `target ← τ·online + (1−τ)·target`.
    pub fn ema_update(&mut self, online: &DenseNet, tau: f64) {
        debug_assert!((0.0..=1.0).contains(&tau));
        for (t, o) in self.params_mut().into_iter().zip(online.params()) {
            assert_eq!(t.shape(), o.shape(), "ema shape mismatch");
            for (tv, &ov) in t.as_mut_slice().iter_mut().zip(o.as_slice()) {
                *tv = if tau == 1.0 { ov } else { *tv + tau * (ov - *tv) };
            }
        }
    }
}

/// Anything that maps an observation vector to a latent vector.
pub trait Encoder {
    fn latent_dim(&self) -> usize;
    fn encode_batch(&self, observations: &Matrix) -> Result<Matrix>;

    fn encode(&self, observation: &[f64]) -> Result<Vec<f64>> {
        let m = Matrix::row_vector(observation.to_vec());
        Ok(self.encode_batch(&m)?.into_vec())
    }
}

impl Encoder for DenseNet {
    fn latent_dim(&self) -> usize {
        self.output_dim()
    }

    fn encode_batch(&self, observations: &Matrix) -> Result<Matrix> {
        self.forward_batch(observations)
    }
}

/// Fixed linear read-out of one frame of the observation: `z = A · frame`.
/// With `A = I` this is the identity encoder on raw factors.
#[derive(Debug, Clone)]
pub struct LinearReadout {
    /// latent_dim × frame_dim
    pub map: Matrix,
    /// Offset of the frame inside the observation vector.
    pub frame_offset: usize,
}

impl LinearReadout {
    pub fn identity_on_last_frame(frame_dim: usize, frame_stack: usize) -> Self {
        LinearReadout {
            map: Matrix::identity(frame_dim),
            frame_offset: frame_dim * (frame_stack - 1),
        }
    }
}

impl Encoder for LinearReadout {
    fn latent_dim(&self) -> usize {
        self.map.rows()
    }

    fn encode_batch(&self, observations: &Matrix) -> Result<Matrix> {
        let frame_dim = self.map.cols();
        if observations.cols() < self.frame_offset + frame_dim {
            return Err(TedError::shape(
                "linear readout",
                self.frame_offset + frame_dim,
                observations.cols(),
            ));
        }
        let mut out = Matrix::zeros(observations.rows(), self.map.rows());
        for i in 0..observations.rows() {
            let frame = &observations.row(i)[self.frame_offset..self.frame_offset + frame_dim];
            for (r, o) in out.row_mut(i).iter_mut().enumerate() {
                *o = super::matrix::dot(self.map.row(r), frame);
            }
        }
        Ok(out)
    }
}
