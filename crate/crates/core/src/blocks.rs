//! Dense blocks shared by the segmentation backbone and the dense classifier
//! backbone.

use cataract_nn::layers::ConvBnRelu;
use cataract_nn::{Float, NodeId, ParamStore, Tape};
use rand::Rng;

use crate::error::Result;

/// 1x1 bottleneck to `bottleneck` channels, then 3x3 to `growth` channels.
#[derive(Clone, Debug)]
pub struct DenseLayer {
    bottleneck: ConvBnRelu,
    conv: ConvBnRelu,
}

impl DenseLayer {
    pub fn new<T: Float, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        in_channels: usize,
        bottleneck: usize,
        growth: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            bottleneck: ConvBnRelu::new(store, &format!("{name}.bottleneck"), in_channels, bottleneck, 1, rng),
            conv: ConvBnRelu::new(store, &format!("{name}.conv"), bottleneck, growth, 3, rng),
        }
    }

    pub fn forward<T: Float>(&self, tape: &mut Tape<'_, T>, x: NodeId) -> Result<NodeId> {
        let h = self.bottleneck.forward(tape, x)?;
        Ok(self.conv.forward(tape, h)?)
    }
}

/// Each layer sees the concatenation of the block input and every earlier
/// layer's output; the block emits the concatenation of all of them.
#[derive(Clone, Debug)]
pub struct DenseBlock {
    layers: Vec<DenseLayer>,
    out_channels: usize,
}

impl DenseBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Float, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        in_channels: usize,
        n_layers: usize,
        growth: usize,
        bottleneck: usize,
        rng: &mut R,
    ) -> Self {
        let layers = (0..n_layers)
            .map(|l| {
                DenseLayer::new(store, &format!("{name}.layer{l}"), in_channels + l * growth, bottleneck, growth, rng)
            })
            .collect();
        Self { layers, out_channels: in_channels + n_layers * growth }
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    pub fn conv_count(&self) -> usize {
        2 * self.layers.len()
    }

    pub fn forward<T: Float>(&self, tape: &mut Tape<'_, T>, x: NodeId) -> Result<NodeId> {
        let mut features = vec![x];
        for layer in &self.layers {
            let input = match features.as_slice() {
                [only] => *only,
                many => tape.concat(many)?,
            };
            features.push(layer.forward(tape, input)?);
        }
        match features.as_slice() {
            [only] => Ok(*only),
            many => Ok(tape.concat(many)?),
        }
    }
}

/// 1x1 compression followed by 2x2 average pooling.
#[derive(Clone, Debug)]
pub struct Transition {
    conv: ConvBnRelu,
    out_channels: usize,
}

impl Transition {
    pub fn new<T: Float, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        in_channels: usize,
        compression: f64,
        rng: &mut R,
    ) -> Self {
        let out_channels = ((in_channels as f64 * compression).floor() as usize).max(1);
        Self { conv: ConvBnRelu::new(store, name, in_channels, out_channels, 1, rng), out_channels }
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    pub fn forward<T: Float>(&self, tape: &mut Tape<'_, T>, x: NodeId) -> Result<NodeId> {
        let h = self.conv.forward(tape, x)?;
        Ok(tape.avg_pool2(h)?)
    }
}
