//! Segmentation network: a dense backbone whose block outputs are reduced to
//! two channels each and then fused coarse-to-fine, level by level, into a
//! structural pyramid. The last level's full-resolution map is the per-pixel
//! two-class score map.
//!
//! Notation used below: `D[i]` is the output of dense block `i` (0-based,
//! resolution `input / 2^i`), `f[j][i]` is the 2-channel map at fusion level
//! `j` (1-based) and hierarchy `i`. Level 1 holds `reduce(D[i])`; level `j`
//! holds `n_blocks - (j - 1)` maps, `f[j][i] = fuse(f[j-1][i], f[j-1][i+1])`.

use cataract_nn::layers::{Conv2d, ConvBnRelu, Deconv2x, Init};
use cataract_nn::{Float, Mode, NodeId, ParamStore, Tape, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::blocks::{DenseBlock, Transition};
use crate::error::{Error, Result};
use crate::raster::Mask;

/// Channel 0 of every 2-channel map scores iris-or-pupil, channel 1 background.
pub const FOREGROUND: usize = 0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PyramidConfig {
    pub n_blocks: usize,
    pub layers_per_block: Vec<usize>,
    pub growth_rate: usize,
    pub init_channels: usize,
    /// Channel multiplier of the transitions, in `(0, 1]`.
    pub compression: f64,
    /// Bottleneck width as a multiple of the growth rate.
    pub bottleneck_factor: usize,
    /// `(height, width)`.
    pub input_size: (usize, usize),
    /// Number of fusion levels actually built, in `[2, n_blocks]`.
    pub structural_levels: usize,
}

impl Default for PyramidConfig {
    fn default() -> Self {
        Self {
            n_blocks: 5,
            layers_per_block: vec![1, 1, 1, 8, 8],
            growth_rate: 22,
            init_channels: 16,
            compression: 1.0,
            bottleneck_factor: 3,
            input_size: (224, 224),
            structural_levels: 5,
        }
    }
}

impl PyramidConfig {
    /// A small configuration for tests and smoke runs.
    pub fn tiny(n_blocks: usize, size: usize) -> Self {
        Self {
            n_blocks,
            layers_per_block: vec![1; n_blocks],
            growth_rate: 2,
            init_channels: 3,
            compression: 0.5,
            bottleneck_factor: 2,
            input_size: (size, size),
            structural_levels: n_blocks,
        }
    }

    pub fn with_levels(mut self, levels: usize) -> Self {
        self.structural_levels = levels;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Param(msg));
        if self.n_blocks < 2 {
            return bad(format!("n_blocks must be at least 2, got {}", self.n_blocks));
        }
        if self.layers_per_block.len() != self.n_blocks {
            return bad(format!(
                "layers_per_block has {} entries for {} blocks",
                self.layers_per_block.len(),
                self.n_blocks
            ));
        }
        if self.layers_per_block.contains(&0) {
            return bad("every block needs at least one layer".into());
        }
        if self.growth_rate == 0 || self.init_channels == 0 || self.bottleneck_factor == 0 {
            return bad("growth_rate, init_channels and bottleneck_factor must be positive".into());
        }
        if !(self.compression > 0.0 && self.compression <= 1.0) {
            return bad(format!("compression {} outside (0, 1]", self.compression));
        }
        if !(2..=self.n_blocks).contains(&self.structural_levels) {
            return bad(format!("structural_levels {} outside [2, {}]", self.structural_levels, self.n_blocks));
        }
        let step = 1 << (self.n_blocks - 1);
        let (h, w) = self.input_size;
        if h == 0 || w == 0 || h % step != 0 || w % step != 0 {
            return bad(format!("input size {h}x{w} is not divisible by {step}"));
        }
        Ok(())
    }

    /// Stem, two per dense layer, one per transition.
    pub fn conv_count(&self) -> usize {
        1 + 2 * self.layers_per_block.iter().sum::<usize>() + (self.n_blocks - 1)
    }

    /// `(height, width)` of block `i` (0-based).
    pub fn resolution(&self, i: usize) -> (usize, usize) {
        (self.input_size.0 >> i, self.input_size.1 >> i)
    }
}

/// Deconvolve the coarse map 2x, concatenate with the fine map, smooth with a
/// 3x3 conv and project back to two channels. Purely linear: no activation or
/// normalisation, so a hand-set identity is exact.
#[derive(Clone, Debug)]
pub struct Fusion {
    pub upsample: Deconv2x,
    pub smooth: Conv2d,
    pub project: Conv2d,
}

/// Intermediate nodes of one fusion.
#[derive(Clone, Copy, Debug)]
pub struct FusionNodes {
    pub upsampled: NodeId,
    pub concat: NodeId,
    pub smoothed: NodeId,
    pub out: NodeId,
}

impl Fusion {
    fn new<T: Float>(store: &mut ParamStore<T>, name: &str, rng: &mut ChaCha8Rng) -> Self {
        Self {
            upsample: Deconv2x::new(store, &format!("{name}.up"), 2, 2, rng),
            smooth: Conv2d::new(store, &format!("{name}.smooth"), 4, 4, 3, true, Init::FanIn, rng),
            project: Conv2d::new(store, &format!("{name}.project"), 4, 2, 1, true, Init::FanIn, rng),
        }
    }

    pub fn forward<T: Float>(&self, tape: &mut Tape<'_, T>, fine: NodeId, coarse: NodeId) -> Result<FusionNodes> {
        let (fs, cs) = (tape.value(fine).shape(), tape.value(coarse).shape());
        if fs[1] != 2 || cs[1] != 2 || fs[0] != cs[0] || fs[2] != 2 * cs[2] || fs[3] != 2 * cs[3] {
            return Err(Error::Shape(format!("cannot fuse fine {fs:?} with coarse {cs:?}")));
        }
        let upsampled = self.upsample.forward(tape, coarse)?;
        let concat = tape.concat(&[fine, upsampled])?;
        let smoothed = self.smooth.forward(tape, concat)?;
        let out = self.project.forward(tape, smoothed)?;
        Ok(FusionNodes { upsampled, concat, smoothed, out })
    }
}

/// Nodes recorded by one forward pass.
#[derive(Clone, Debug)]
pub struct PyramidTrace {
    /// Dense block outputs, finest first.
    pub blocks: Vec<NodeId>,
    /// `levels[j - 1][i]` is `f[j][i]`.
    pub levels: Vec<Vec<NodeId>>,
    /// Final 2-channel score map at input resolution.
    pub logits: NodeId,
}

/// The 2-channel maps of one fusion level.
#[derive(Clone, Debug)]
pub struct FeatureMapSet<T> {
    pub level: usize,
    /// One `[N, 2, H, W]` tensor per hierarchy index, finest first.
    pub maps: Vec<Tensor<T>>,
    pub resolutions: Vec<(usize, usize)>,
}

/// Per-pixel probabilities and the argmax mask for one image.
#[derive(Clone, Debug)]
pub struct MaskPrediction {
    /// `[1, 2, H, W]`, channel 0 foreground.
    pub prob: Tensor<f64>,
    pub mask: Mask,
}

#[derive(Clone, Debug)]
pub struct PyramidNet<T: Float> {
    config: PyramidConfig,
    params: ParamStore<T>,
    stem: ConvBnRelu,
    blocks: Vec<DenseBlock>,
    transitions: Vec<Transition>,
    reducers: Vec<Conv2d>,
    /// `fusions[j - 2][i]` produces `f[j][i]`.
    fusions: Vec<Vec<Fusion>>,
}

impl<T: Float> PyramidNet<T> {
    /// Builds a randomly initialised network. The backbone is drawn before
    /// the fusion stages, so networks that differ only in
    /// `structural_levels` share every common parameter.
    pub fn new(config: PyramidConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let stem = ConvBnRelu::new(&mut params, "stem", 1, config.init_channels, 3, &mut rng);
        let bottleneck = config.bottleneck_factor * config.growth_rate;
        let mut channels = config.init_channels;
        let mut blocks = Vec::new();
        let mut transitions = Vec::new();
        let mut block_channels = Vec::new();
        for (b, &n_layers) in config.layers_per_block.iter().enumerate() {
            if b > 0 {
                let t = Transition::new(&mut params, &format!("transition{b}"), channels, config.compression, &mut rng);
                channels = t.out_channels();
                transitions.push(t);
            }
            let block = DenseBlock::new(
                &mut params,
                &format!("block{b}"),
                channels,
                n_layers,
                config.growth_rate,
                bottleneck,
                &mut rng,
            );
            channels = block.out_channels();
            block_channels.push(channels);
            blocks.push(block);
        }
        let reducers = block_channels
            .iter()
            .enumerate()
            .map(|(i, &c)| Conv2d::new(&mut params, &format!("reduce{i}"), c, 2, 1, true, Init::FanIn, &mut rng))
            .collect();
        let fusions = (2..=config.structural_levels)
            .map(|j| {
                (0..config.n_blocks - (j - 1))
                    .map(|i| Fusion::new(&mut params, &format!("fuse.l{j}.h{i}"), &mut rng))
                    .collect()
            })
            .collect();
        Ok(Self { config, params, stem, blocks, transitions, reducers, fusions })
    }

    pub fn config(&self) -> &PyramidConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn parameter_count(&self) -> usize {
        self.params.trainable_count()
    }

    /// Backbone convolutions (stem, dense layers, transitions).
    pub fn conv_count(&self) -> usize {
        1 + self.blocks.iter().map(DenseBlock::conv_count).sum::<usize>() + self.transitions.len()
    }

    pub fn reducer(&self, i: usize) -> &Conv2d {
        &self.reducers[i]
    }

    /// The fusion producing `f[level][hierarchy]`, `level >= 2`.
    pub fn fusion(&self, level: usize, hierarchy: usize) -> Option<&Fusion> {
        self.fusions.get(level.checked_sub(2)?)?.get(hierarchy)
    }

    pub fn cast<U: Float>(&self) -> PyramidNet<U> {
        PyramidNet {
            config: self.config.clone(),
            params: self.params.cast(),
            stem: self.stem.clone(),
            blocks: self.blocks.clone(),
            transitions: self.transitions.clone(),
            reducers: self.reducers.clone(),
            fusions: self.fusions.clone(),
        }
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        let (h, w) = self.config.input_size;
        let s = x.shape();
        if s[1] != 1 || s[2] != h || s[3] != w || s[0] == 0 {
            return Err(Error::Shape(format!("expected [N, 1, {h}, {w}] input, got {s:?}")));
        }
        Ok(())
    }

    /// Records the dense backbone, returning one node per block.
    pub fn trace_backbone(&self, tape: &mut Tape<'_, T>, x: NodeId) -> Result<Vec<NodeId>> {
        self.trace_blocks(tape, x, self.blocks.len())
    }

    fn trace_blocks(&self, tape: &mut Tape<'_, T>, x: NodeId, count: usize) -> Result<Vec<NodeId>> {
        self.check_input(tape.value(x))?;
        let mut h = self.stem.forward(tape, x)?;
        let mut outputs = Vec::with_capacity(count);
        for (b, block) in self.blocks.iter().enumerate().take(count) {
            if b > 0 {
                h = self.transitions[b - 1].forward(tape, h)?;
            }
            h = block.forward(tape, h)?;
            outputs.push(h);
        }
        Ok(outputs)
    }

    /// Records the full network: every block and every map of every level.
    pub fn trace(&self, tape: &mut Tape<'_, T>, x: NodeId) -> Result<PyramidTrace> {
        self.trace_cone(tape, x, false)
    }

    /// Records only what the prediction depends on. `f[L][0]` needs maps
    /// `0..=L-j` of level `j`, hence only the first `L` blocks; with fewer
    /// structural levels than blocks this skips the deep blocks entirely.
    /// The logits are identical to those of [`Self::trace`].
    pub fn trace_prediction(&self, tape: &mut Tape<'_, T>, x: NodeId) -> Result<PyramidTrace> {
        self.trace_cone(tape, x, true)
    }

    fn trace_cone(&self, tape: &mut Tape<'_, T>, x: NodeId, prune: bool) -> Result<PyramidTrace> {
        let levels_total = self.config.structural_levels;
        let needed = |j: usize, full: usize| if prune { levels_total - j + 1 } else { full };
        let blocks = self.trace_blocks(tape, x, needed(1, self.blocks.len()))?;
        let first = blocks.iter().zip(&self.reducers).map(|(&d, r)| r.forward(tape, d)).collect::<std::result::Result<_, _>>()?;
        let mut levels: Vec<Vec<NodeId>> = vec![first];
        for (s, stage) in self.fusions.iter().enumerate() {
            let j = s + 2;
            let prev = levels.last().expect("level 1 exists");
            let next = stage
                .iter()
                .take(needed(j, stage.len()))
                .enumerate()
                .map(|(i, fusion)| fusion.forward(tape, prev[i], prev[i + 1]).map(|n| n.out))
                .collect::<Result<Vec<_>>>()?;
            levels.push(next);
        }
        // Hierarchy 0 of every level is already at input resolution, so the
        // prediction needs no further upsampling at any structural level.
        let logits = levels.last().expect("at least one level")[0];
        Ok(PyramidTrace { blocks, levels, logits })
    }

    /// Dense block outputs in inference mode.
    pub fn backbone_forward(&self, images: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        let mut tape = Tape::new(&self.params, Mode::Eval);
        let x = tape.input(images.clone());
        let nodes = self.trace_backbone(&mut tape, x)?;
        Ok(nodes.into_iter().map(|n| tape.value(n).clone()).collect())
    }

    /// Applies the learned 1x1 reduction of block `i` to a block output.
    pub fn reduce_channels(&self, i: usize, block_output: &Tensor<T>) -> Result<Tensor<T>> {
        let reducer = self.reducers.get(i).ok_or_else(|| Error::Param(format!("no block {i}")))?;
        let mut tape = Tape::new(&self.params, Mode::Eval);
        let x = tape.input(block_output.clone());
        let y = reducer.forward(&mut tape, x)?;
        Ok(tape.value(y).clone())
    }

    /// Applies the fusion producing `f[level][hierarchy]` to explicit inputs.
    pub fn fuse(&self, level: usize, hierarchy: usize, fine: &Tensor<T>, coarse: &Tensor<T>) -> Result<Tensor<T>> {
        let fusion = self
            .fusion(level, hierarchy)
            .ok_or_else(|| Error::Param(format!("no fusion at level {level}, hierarchy {hierarchy}")))?;
        let mut tape = Tape::new(&self.params, Mode::Eval);
        let (f, c) = (tape.input(fine.clone()), tape.input(coarse.clone()));
        let nodes = fusion.forward(&mut tape, f, c)?;
        Ok(tape.value(nodes.out).clone())
    }

    /// Every fusion level in inference mode.
    pub fn forward_pyramid(&self, images: &Tensor<T>) -> Result<Vec<FeatureMapSet<T>>> {
        let mut tape = Tape::new(&self.params, Mode::Eval);
        let x = tape.input(images.clone());
        let trace = self.trace(&mut tape, x)?;
        Ok(trace
            .levels
            .iter()
            .enumerate()
            .map(|(j, nodes)| {
                let maps: Vec<Tensor<T>> = nodes.iter().map(|&n| tape.value(n).clone()).collect();
                let resolutions = maps.iter().map(|m| (m.h(), m.w())).collect();
                FeatureMapSet { level: j + 1, maps, resolutions }
            })
            .collect())
    }

    /// Final 2-channel scores in inference mode.
    pub fn logits(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new(&self.params, Mode::Eval);
        let x = tape.input(images.clone());
        let trace = self.trace_prediction(&mut tape, x)?;
        Ok(tape.value(trace.logits).clone())
    }

    /// One prediction per batch item.
    pub fn predict_masks(&self, images: &Tensor<T>) -> Result<Vec<MaskPrediction>> {
        Ok(predictions_from_logits(&self.logits(images)?))
    }
}

/// Two-class softmax of `(foreground, background)` scores.
pub fn softmax2(fg: f64, bg: f64) -> (f64, f64) {
    let m = fg.max(bg);
    let (a, b) = ((fg - m).exp(), (bg - m).exp());
    let s = a + b;
    (a / s, b / s)
}

/// Per-pixel softmax and argmax. Ties go to the foreground.
pub fn predictions_from_logits<T: Float>(logits: &Tensor<T>) -> Vec<MaskPrediction> {
    let [n, _, h, w] = logits.shape();
    (0..n)
        .map(|b| {
            let (fg, bg) = (logits.plane(b, FOREGROUND), logits.plane(b, 1 - FOREGROUND));
            let mut prob = vec![0.0; 2 * h * w];
            let mut mask = vec![0u8; h * w];
            for p in 0..h * w {
                let (pf, pb) = softmax2(fg[p].as_f64(), bg[p].as_f64());
                prob[p] = pf;
                prob[h * w + p] = pb;
                mask[p] = (pf >= pb) as u8;
            }
            MaskPrediction {
                prob: Tensor::from_vec([1, 2, h, w], prob).expect("prediction shape"),
                mask: Mask::from_vec(w, h, mask).expect("binary mask"),
            }
        })
        .collect()
}

fn check_gt(shape: [usize; 4], gt: &[Mask]) -> Result<()> {
    let [n, c, h, w] = shape;
    if c != 2 || n != gt.len() {
        return Err(Error::Shape(format!("{shape:?} against {} masks", gt.len())));
    }
    if let Some(m) = gt.iter().find(|m| m.dims() != (w, h)) {
        return Err(Error::Shape(format!("mask {:?} against map {w}x{h}", m.dims())));
    }
    Ok(())
}

/// Mean per-pixel two-class cross-entropy of probabilities `[N, 2, H, W]`.
pub fn seg_loss(prob: &Tensor<f64>, gt: &[Mask]) -> Result<f64> {
    check_gt(prob.shape(), gt)?;
    let mut total = 0.0;
    for (b, m) in gt.iter().enumerate() {
        let (fg, bg) = (prob.plane(b, FOREGROUND), prob.plane(b, 1 - FOREGROUND));
        for (p, &y) in m.data().iter().enumerate() {
            let q = if y == 1 { fg[p] } else { bg[p] };
            total -= q.max(f64::MIN_POSITIVE).ln();
        }
    }
    Ok(total / (gt.len() * gt[0].data().len()) as f64)
}

/// [`seg_loss`] evaluated from raw scores, with its gradient with respect to
/// the scores.
pub fn seg_loss_with_grad<T: Float>(logits: &Tensor<T>, gt: &[Mask]) -> Result<(f64, Tensor<T>)> {
    check_gt(logits.shape(), gt)?;
    let [n, _, h, w] = logits.shape();
    let count = (n * h * w) as f64;
    let mut grad = Tensor::zeros(logits.shape());
    let mut total = 0.0;
    for (b, m) in gt.iter().enumerate() {
        let (fg, bg) = (logits.plane(b, FOREGROUND), logits.plane(b, 1 - FOREGROUND));
        let base = b * 2 * h * w;
        let (fg_off, bg_off) = (base + FOREGROUND * h * w, base + (1 - FOREGROUND) * h * w);
        for (p, &y) in m.data().iter().enumerate() {
            let (lf, lb) = (fg[p].as_f64(), bg[p].as_f64());
            let mx = lf.max(lb);
            let lse = mx + ((lf - mx).exp() + (lb - mx).exp()).ln();
            total += lse - if y == 1 { lf } else { lb };
            let pf = (lf - lse).exp();
            let yf = y as f64;
            let g = grad.data_mut();
            g[fg_off + p] = T::of((pf - yf) / count);
            g[bg_off + p] = T::of(((1.0 - pf) - (1.0 - yf)) / count);
        }
    }
    Ok((total / count, grad))
}
