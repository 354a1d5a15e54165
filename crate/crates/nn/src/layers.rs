//! Parameterised building blocks. Each layer only stores [`ParamId`]s; the
//! tensors live in the model's [`ParamStore`].

use rand::Rng;

use crate::error::Result;
use crate::params::{normal, ParamId, ParamKind, ParamStore};
use crate::scalar::Float;
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

/// How a layer's weights are drawn at construction.
#[derive(Clone, Copy, Debug)]
pub enum Init {
    /// `N(0, 2 / fan_in)`, for layers followed by a ReLU.
    He,
    /// `N(0, 1 / fan_in)`, for linear paths.
    FanIn,
    Zeros,
}

impl Init {
    fn sample<T: Float, R: Rng + ?Sized>(self, shape: [usize; 4], fan_in: usize, rng: &mut R) -> Tensor<T> {
        match self {
            Init::He => normal(shape, (2.0 / fan_in as f64).sqrt(), rng),
            Init::FanIn => normal(shape, (1.0 / fan_in as f64).sqrt(), rng),
            Init::Zeros => Tensor::zeros(shape),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Float, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        bias: bool,
        init: Init,
        rng: &mut R,
    ) -> Self {
        let shape = [out_channels, in_channels, kernel, kernel];
        let weight = store.add(
            format!("{name}.weight"),
            init.sample(shape, in_channels * kernel * kernel, rng),
            ParamKind::Trainable,
        );
        let bias = bias.then(|| {
            store.add(format!("{name}.bias"), Tensor::zeros([1, out_channels, 1, 1]), ParamKind::Trainable)
        });
        Self { weight, bias, in_channels, out_channels, kernel }
    }

    pub fn forward<T: Float>(&self, tape: &mut Tape<'_, T>, x: NodeId) -> Result<NodeId> {
        tape.conv2d(x, self.weight, self.bias)
    }
}

/// Learned 2x upsampling: transposed convolution, kernel 2, stride 2.
#[derive(Clone, Debug)]
pub struct Deconv2x {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Deconv2x {
    pub fn new<T: Float, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        rng: &mut R,
    ) -> Self {
        let weight = store.add(
            format!("{name}.weight"),
            Init::FanIn.sample([in_channels, out_channels, 2, 2], in_channels, rng),
            ParamKind::Trainable,
        );
        let bias = store.add(format!("{name}.bias"), Tensor::zeros([1, out_channels, 1, 1]), ParamKind::Trainable);
        Self { weight, bias }
    }

    pub fn forward<T: Float>(&self, tape: &mut Tape<'_, T>, x: NodeId) -> Result<NodeId> {
        tape.conv_transpose2x2(x, self.weight, Some(self.bias))
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

impl BatchNorm2d {
    pub fn new<T: Float>(store: &mut ParamStore<T>, name: &str, channels: usize) -> Self {
        let shape = [1, channels, 1, 1];
        Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::full(shape, T::one()), ParamKind::Trainable),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(shape), ParamKind::Trainable),
            running_mean: store.add(format!("{name}.running_mean"), Tensor::zeros(shape), ParamKind::Buffer),
            running_var: store.add(format!("{name}.running_var"), Tensor::full(shape, T::one()), ParamKind::Buffer),
        }
    }

    pub fn forward<T: Float>(&self, tape: &mut Tape<'_, T>, x: NodeId) -> Result<NodeId> {
        tape.batch_norm(x, self.gamma, self.beta, self.running_mean, self.running_var)
    }
}

/// Convolution (no bias), batch norm, ReLU.
#[derive(Clone, Debug)]
pub struct ConvBnRelu {
    pub conv: Conv2d,
    pub bn: BatchNorm2d,
}

impl ConvBnRelu {
    pub fn new<T: Float, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            conv: Conv2d::new(store, &format!("{name}.conv"), in_channels, out_channels, kernel, false, Init::He, rng),
            bn: BatchNorm2d::new(store, &format!("{name}.bn"), out_channels),
        }
    }

    pub fn forward<T: Float>(&self, tape: &mut Tape<'_, T>, x: NodeId) -> Result<NodeId> {
        let h = self.conv.forward(tape, x)?;
        let h = self.bn.forward(tape, h)?;
        Ok(tape.relu(h))
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_features: usize,
    pub out_features: usize,
}

impl Linear {
    pub fn new<T: Float, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        in_features: usize,
        out_features: usize,
        init: Init,
        rng: &mut R,
    ) -> Self {
        let weight = store.add(
            format!("{name}.weight"),
            init.sample([out_features, in_features, 1, 1], in_features, rng),
            ParamKind::Trainable,
        );
        let bias = store.add(format!("{name}.bias"), Tensor::zeros([1, out_features, 1, 1]), ParamKind::Trainable);
        Self { weight, bias, in_features, out_features }
    }

    pub fn forward<T: Float>(&self, tape: &mut Tape<'_, T>, x: NodeId) -> Result<NodeId> {
        tape.linear(x, self.weight, Some(self.bias))
    }
}
