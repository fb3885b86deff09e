//! Parameter storage and the layers shared by every sub-network.

use rand::Rng;

use crate::autodiff::{BatchStats, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::rng::{stream, StreamRng};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    /// Position in the owning store.
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    /// Buffers (batch-norm running statistics) are stored but never optimized.
    pub trainable: bool,
}

/// Ordered, named collection of every tensor a model owns.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, value: Tensor, trainable: bool) -> Result<ParamId> {
        if self.find(name).is_some() {
            return Err(Error::Config(format!("duplicate parameter name '{name}'")));
        }
        self.entries.push(Param {
            name: name.to_string(),
            value,
            trainable,
        });
        Ok(ParamId(self.entries.len() - 1))
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    pub fn param(&self, id: ParamId) -> &Param {
        &self.entries[id.0]
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.entries.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    /// Total number of trainable scalars.
    pub fn trainable_len(&self) -> usize {
        self.entries.iter().filter(|p| p.trainable).map(|p| p.value.len()).sum()
    }

    /// Records every entry on `tape`: trainable ones as gradient leaves,
    /// buffers as constants.
    pub fn bind(&self, tape: &mut Tape) -> Bound {
        let vars = self
            .entries
            .iter()
            .map(|p| {
                if p.trainable {
                    tape.leaf(p.value.clone())
                } else {
                    tape.constant(p.value.clone())
                }
            })
            .collect();
        Bound { vars }
    }
}

/// Tape handles of a [`ParamStore`] for one forward pass.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Sigmoid,
    None,
}

/// Glorot-uniform draw: `U(-s, s)` with `s = sqrt(6 / (fan_in + fan_out))`.
pub fn glorot_uniform(rng: &mut StreamRng, shape: &[usize], fan_in: usize, fan_out: usize) -> Tensor {
    let s = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-s..s)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches draw count")
}

/// Fully connected layer `activation(x·W + b)`.
#[derive(Clone, Debug)]
pub struct DenseLayer {
    pub weight: ParamId,
    pub bias: ParamId,
    pub activation: Activation,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl DenseLayer {
    /// Registers `{name}.weight` (Glorot-uniform from the `init/{name}.weight`
    /// stream) and a zero `{name}.bias`.
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        activation: Activation,
        seed: u64,
    ) -> Result<Self> {
        let wname = format!("{name}.weight");
        let mut rng = stream(seed, &format!("init/{wname}"));
        let weight = store.add(
            &wname,
            glorot_uniform(&mut rng, &[in_dim, out_dim], in_dim, out_dim),
            true,
        )?;
        let bias = store.add(&format!("{name}.bias"), Tensor::zeros(&[out_dim]), true)?;
        Ok(DenseLayer {
            weight,
            bias,
            activation,
            in_dim,
            out_dim,
        })
    }

    pub fn forward(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Result<Var> {
        let s = tape.shape(x);
        if s.len() != 2 || s[1] != self.in_dim {
            return Err(Error::shape("dense_forward", s, &[self.in_dim, self.out_dim]));
        }
        let h = tape.matmul(x, bound.var(self.weight))?;
        let h = tape.add(h, bound.var(self.bias))?;
        Ok(match self.activation {
            Activation::Relu => tape.relu(h),
            Activation::Sigmoid => tape.sigmoid(h),
            Activation::None => h,
        })
    }
}

/// Forwards `x` through `layers` in order.
pub fn forward_stack(layers: &[DenseLayer], tape: &mut Tape, bound: &Bound, x: Var) -> Result<Var> {
    layers.iter().try_fold(x, |h, layer| layer.forward(tape, bound, h))
}

pub const BN_MOMENTUM: f64 = 0.9;
pub const BN_EPSILON: f64 = 1e-5;

/// Batch normalization over axis 1 of `[N×C×D×H×W]` inputs.
#[derive(Clone, Debug)]
pub struct BatchNorm3d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub channels: usize,
    /// Weight kept on the old running statistic at each update.
    pub momentum: f64,
    pub epsilon: f64,
}

impl BatchNorm3d {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Result<Self> {
        Ok(BatchNorm3d {
            gamma: store.add(&format!("{name}.gamma"), Tensor::ones(&[channels]), true)?,
            beta: store.add(&format!("{name}.beta"), Tensor::zeros(&[channels]), true)?,
            running_mean: store.add(&format!("{name}.running_mean"), Tensor::zeros(&[channels]), false)?,
            running_var: store.add(&format!("{name}.running_var"), Tensor::ones(&[channels]), false)?,
            channels,
            momentum: BN_MOMENTUM,
            epsilon: BN_EPSILON,
        })
    }

    /// Training mode normalizes with batch statistics and returns them for
    /// [`BatchNorm3d::update_running`]; inference mode uses the running ones.
    pub fn forward(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        store: &ParamStore,
        x: Var,
        mode: Mode,
    ) -> Result<(Var, Option<BatchStats>)> {
        let (g, b) = (bound.var(self.gamma), bound.var(self.beta));
        match mode {
            Mode::Train => {
                let (y, stats) = tape.batch_norm_train(x, g, b, self.epsilon)?;
                Ok((y, Some(stats)))
            }
            Mode::Infer => {
                let y = tape.batch_norm_eval(
                    x,
                    g,
                    b,
                    store.get(self.running_mean).data(),
                    store.get(self.running_var).data(),
                    self.epsilon,
                )?;
                Ok((y, None))
            }
        }
    }

    /// Exponential moving update; the variance is stored unbiased.
    pub fn update_running(&self, store: &mut ParamStore, stats: &BatchStats) {
        let m = self.momentum;
        let correction = if stats.count > 1 {
            stats.count as f64 / (stats.count - 1) as f64
        } else {
            1.0
        };
        for (r, &v) in store.get_mut(self.running_mean).data_mut().iter_mut().zip(&stats.mean) {
            *r = m * *r + (1.0 - m) * v;
        }
        for (r, &v) in store.get_mut(self.running_var).data_mut().iter_mut().zip(&stats.var) {
            *r = m * *r + (1.0 - m) * v * correction;
        }
    }
}

pub const DEFAULT_DROPOUT: f64 = 0.5;

/// Inverted dropout.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Dropout {
    rate: f64,
}

impl Dropout {
    pub fn new(rate: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Config(format!("dropout rate {rate} outside [0, 1)")));
        }
        Ok(Dropout { rate })
    }

    pub fn rate(&self) -> f64 {
        self.rate
    }

    /// In training mode each unit is zeroed with probability `rate` and
    /// survivors are scaled by `1/(1-rate)`; the mask is a tape constant so
    /// backward is exact. Inference mode is the identity.
    pub fn apply(&self, tape: &mut Tape, x: Var, mode: Mode, rng: &mut StreamRng) -> Result<Var> {
        if mode == Mode::Infer || self.rate == 0.0 {
            return Ok(x);
        }
        let scale = 1.0 / (1.0 - self.rate);
        let shape = tape.shape(x).to_vec();
        let n = tape.value(x).len();
        let mask = (0..n)
            .map(|_| if rng.random::<f64>() < self.rate { 0.0 } else { scale })
            .collect();
        let mask = tape.constant(Tensor::new(shape, mask)?);
        tape.mul(x, mask)
    }
}

/// Mean softmax cross-entropy of `logits [batch×k]` against one-hot rows.
pub fn softmax_cross_entropy(tape: &mut Tape, logits: Var, labels: &Tensor) -> Result<Var> {
    tape.softmax_cross_entropy(logits, labels)
}

/// One-hot rows for 0-based class indices.
pub fn one_hot(classes: &[usize], k: usize) -> Result<Tensor> {
    let mut data = vec![0.0; classes.len() * k];
    for (r, &c) in classes.iter().enumerate() {
        if c >= k {
            return Err(Error::Contract(format!("class index {c} out of range for {k} classes")));
        }
        data[r * k + c] = 1.0;
    }
    Tensor::new(vec![classes.len(), k], data)
}
