//! Small fully connected networks with ReLU hidden layers and a linear output.

use std::io::{Read, Write};

use rand::Rng;

use crate::autodiff::{matmul_into, Module, Tape, Tensor, Var};
use crate::error::{invalid, Error, Result};
use crate::grid::{read_floats, read_u32};
use crate::real::{DType, Real};

pub const MLP_MAGIC: &[u8; 4] = b"MFM1";

#[derive(Debug, Clone, PartialEq)]
pub struct Linear<T> {
    /// `(fan_in, fan_out)`
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Real> Linear<T> {
    pub fn fan_in(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn fan_out(&self) -> usize {
        self.weight.shape()[1]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp<T> {
    layers: Vec<Linear<T>>,
}

/// Tape handles for one bound [`Mlp`].
#[derive(Debug, Clone)]
pub struct MlpVars {
    layers: Vec<(Var, Var)>,
}

impl<T: Real> Mlp<T> {
    /// Layer widths `[in, hidden.., out]`; weights uniform in `±1/sqrt(fan_in)`, biases zero.
    pub fn new(widths: &[usize], rng: &mut impl Rng) -> Result<Self> {
        if widths.len() < 2 || widths.contains(&0) {
            return Err(invalid(format!("bad MLP widths {widths:?}")));
        }
        let layers = widths
            .windows(2)
            .map(|w| {
                let bound = 1.0 / (w[0] as f64).sqrt();
                let data = (0..w[0] * w[1]).map(|_| T::of(rng.gen_range(-bound..=bound))).collect();
                Linear { weight: Tensor::matrix(w[0], w[1], data).expect("sized"), bias: Tensor::zeros(vec![w[1]]) }
            })
            .collect();
        Ok(Mlp { layers })
    }

    pub fn cast<U: Real>(&self) -> Mlp<U> {
        let layers = self.layers.iter().map(|l| Linear { weight: l.weight.cast(), bias: l.bias.cast() }).collect();
        Mlp { layers }
    }

    pub fn layers(&self) -> &[Linear<T>] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Linear<T>] {
        &mut self.layers
    }

    pub fn input_width(&self) -> usize {
        self.layers[0].fan_in()
    }

    pub fn output_width(&self) -> usize {
        self.layers.last().expect("non-empty").fan_out()
    }

    /// Zeroes the output layer, making the network output identically zero.
    pub fn zero_output_layer(&mut self) {
        let last = self.layers.last_mut().expect("non-empty");
        last.weight.data_mut().iter_mut().for_each(|v| *v = T::zero());
        last.bias.data_mut().iter_mut().for_each(|v| *v = T::zero());
    }

    /// Multiply-accumulate count for one input row.
    pub fn macs(&self) -> usize {
        self.layers.iter().map(|l| l.fan_in() * l.fan_out()).sum()
    }

    /// Plain evaluation of a batch of rows, `(n, in) -> (n, out)`.
    pub fn forward_rows(&self, input: &[T], n: usize) -> Vec<T> {
        let mut x = input.to_vec();
        for (li, layer) in self.layers.iter().enumerate() {
            let (k, m) = (layer.fan_in(), layer.fan_out());
            let mut y = vec![T::zero(); n * m];
            matmul_into(&x, layer.weight.data(), &mut y, n, k, m);
            let last = li + 1 == self.layers.len();
            for row in y.chunks_mut(m) {
                for (v, &b) in row.iter_mut().zip(layer.bias.data()) {
                    *v += b;
                    if !last && *v < T::zero() {
                        *v = T::zero();
                    }
                }
            }
            x = y;
        }
        x
    }

    pub fn forward(&self, input: &[T]) -> Vec<T> {
        self.forward_rows(input, 1)
    }

    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> MlpVars {
        let layers = self
            .layers
            .iter()
            .map(|l| {
                if trainable {
                    (tape.param(l.weight.clone()), tape.param(l.bias.clone()))
                } else {
                    (tape.constant(l.weight.clone()), tape.constant(l.bias.clone()))
                }
            })
            .collect();
        MlpVars { layers }
    }

    pub fn write_blob(&self, w: &mut impl Write) -> Result<()> {
        let mut buf = Vec::new();
        buf.extend_from_slice(MLP_MAGIC);
        buf.extend_from_slice(&(self.layers.len() as u32).to_le_bytes());
        buf.extend_from_slice(&(T::DTYPE as u32).to_le_bytes());
        for l in &self.layers {
            buf.extend_from_slice(&(l.fan_in() as u32).to_le_bytes());
            buf.extend_from_slice(&(l.fan_out() as u32).to_le_bytes());
            for &v in l.weight.data().iter().chain(l.bias.data()) {
                v.write_le(&mut buf);
            }
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn read_blob(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MLP_MAGIC {
            return Err(Error::Format(format!("bad MLP magic {magic:?}")));
        }
        let count = read_u32(r)? as usize;
        let code = read_u32(r)?;
        let dtype = DType::from_code(code).ok_or_else(|| Error::Format(format!("unknown dtype code {code}")))?;
        if count == 0 || count > 64 {
            return Err(Error::Format(format!("implausible layer count {count}")));
        }
        let mut layers = Vec::with_capacity(count);
        for _ in 0..count {
            let fan_in = read_u32(r)? as usize;
            let fan_out = read_u32(r)? as usize;
            if fan_in == 0 || fan_out == 0 || fan_in.saturating_mul(fan_out) > 1 << 28 {
                return Err(Error::Format(format!("bad layer shape {fan_in}x{fan_out}")));
            }
            let w = read_floats(r, fan_in * fan_out, dtype)?;
            let b = read_floats(r, fan_out, dtype)?;
            layers.push(Linear { weight: Tensor::matrix(fan_in, fan_out, w)?, bias: Tensor::vector(b) });
        }
        for pair in layers.windows(2) {
            if pair[0].fan_out() != pair[1].fan_in() {
                return Err(Error::Format("inconsistent layer widths".into()));
            }
        }
        Ok(Mlp { layers })
    }
}

impl MlpVars {
    /// Applies the bound network to an `(n, in)` input.
    pub fn apply<T: Real>(&self, tape: &mut Tape<T>, input: Var) -> Result<Var> {
        let mut x = input;
        for (li, &(w, b)) in self.layers.iter().enumerate() {
            let y = tape.matmul(x, w)?;
            let y = tape.add_row(y, b)?;
            x = if li + 1 < self.layers.len() { tape.relu(y) } else { y };
        }
        Ok(x)
    }

    /// Weight and bias handles in [`Module::parameters`] order.
    pub fn vars(&self) -> impl Iterator<Item = Var> + '_ {
        self.layers.iter().flat_map(|&(w, b)| [w, b])
    }
}

impl<T: Real> Module<T> for Mlp<T> {
    fn parameters(&self) -> Vec<&Tensor<T>> {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias]).collect()
    }

    fn parameters_mut(&mut self) -> Vec<&mut Tensor<T>> {
        self.layers.iter_mut().flat_map(|l| [&mut l.weight, &mut l.bias]).collect()
    }
}
