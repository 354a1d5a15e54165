//! Multitask ROI classifier: a shared convolutional backbone, global average
//! pooling, and two linear heads (healthy/unhealthy, and
//! pre-/post-cataract/others), trained on `lambda * BCE + CCE`.

use std::path::PathBuf;

use cataract_nn::layers::{BatchNorm2d, Conv2d, ConvBnRelu, Init, Linear};
use cataract_nn::{Float, Mode, NodeId, ParamStore, Tape, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::blocks::{DenseBlock, Transition};
use crate::error::{Error, Result};
use crate::sample::{ConditionLabel, HealthLabel};

/// Probability clamp applied before taking logarithms.
pub const PROB_EPS: f64 = 1e-7;

/// Layouts loosely following well-known ImageNet architectures, rebuilt
/// from the layers available here. Only `SmallScratch` is sized for
/// training from scratch on a CPU.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Backbone {
    SmallScratch,
    Vgg16Style,
    Resnet50Style,
    InceptionStyle,
    Densenet121Style,
}

impl Backbone {
    pub const ALL: [Self; 5] =
        [Self::SmallScratch, Self::Vgg16Style, Self::Resnet50Style, Self::InceptionStyle, Self::Densenet121Style];

    pub fn name(self) -> &'static str {
        match self {
            Self::SmallScratch => "small_scratch",
            Self::Vgg16Style => "vgg16_style",
            Self::Resnet50Style => "resnet50_style",
            Self::InceptionStyle => "inception_style",
            Self::Densenet121Style => "densenet121_style",
        }
    }

    /// Total spatial downsampling factor.
    fn stride(self) -> usize {
        match self {
            Self::SmallScratch | Self::Vgg16Style => 32,
            Self::Resnet50Style | Self::Densenet121Style => 16,
            Self::InceptionStyle => 8,
        }
    }
}

impl std::str::FromStr for Backbone {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|b| b.name() == s)
            .ok_or_else(|| Error::Param(format!("unknown backbone `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierConfig {
    pub backbone: Backbone,
    /// Safetensors file providing every `backbone.*` tensor.
    pub pretrained_weights_path: Option<PathBuf>,
    /// Hidden widths of each head before its output layer; empty means a
    /// single linear layer on the pooled features.
    pub head_widths: Vec<usize>,
    /// Channels of the first backbone stage.
    pub base_width: usize,
    pub input_size: usize,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            backbone: Backbone::SmallScratch,
            pretrained_weights_path: None,
            head_widths: Vec::new(),
            base_width: 28,
            input_size: 224,
        }
    }
}

impl ClassifierConfig {
    pub fn validate(&self) -> Result<()> {
        let stride = self.backbone.stride();
        if self.input_size == 0 || self.input_size % stride != 0 {
            return Err(Error::Param(format!(
                "{} needs an input size divisible by {stride}, got {}",
                self.backbone.name(),
                self.input_size
            )));
        }
        if self.base_width < 8 {
            return Err(Error::Param(format!("base_width {} is below 8", self.base_width)));
        }
        if self.head_widths.contains(&0) {
            return Err(Error::Param("head widths must be positive".into()));
        }
        Ok(())
    }
}

/// Convolution and batch norm without an activation.
#[derive(Clone, Debug)]
struct ConvBn {
    conv: Conv2d,
    bn: BatchNorm2d,
}

impl ConvBn {
    fn new<T: Float>(store: &mut ParamStore<T>, name: &str, cin: usize, cout: usize, k: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            conv: Conv2d::new(store, &format!("{name}.conv"), cin, cout, k, false, Init::FanIn, rng),
            bn: BatchNorm2d::new(store, &format!("{name}.bn"), cout),
        }
    }

    fn forward<T: Float>(&self, tape: &mut Tape<'_, T>, x: NodeId) -> Result<NodeId> {
        let h = self.conv.forward(tape, x)?;
        Ok(self.bn.forward(tape, h)?)
    }
}

/// Residual bottleneck; downsampling blocks average-pool both paths first.
#[derive(Clone, Debug)]
struct Bottleneck {
    reduce: ConvBnRelu,
    conv: ConvBnRelu,
    expand: ConvBn,
    shortcut: Option<ConvBn>,
    downsample: bool,
}

impl Bottleneck {
    fn forward<T: Float>(&self, tape: &mut Tape<'_, T>, x: NodeId) -> Result<NodeId> {
        let x = if self.downsample { tape.avg_pool2(x)? } else { x };
        let h = self.reduce.forward(tape, x)?;
        let h = self.conv.forward(tape, h)?;
        let h = self.expand.forward(tape, h)?;
        let skip = match &self.shortcut {
            Some(s) => s.forward(tape, x)?,
            None => x,
        };
        let sum = tape.add(h, skip)?;
        Ok(tape.relu(sum))
    }
}

/// Four parallel branches (1x1; 1x1-3x3; 1x1-3x3-3x3; 1x1 projection)
/// concatenated. Only `k > 1` stride-1 pooling is unavailable, so the usual
/// pooling branch is a plain projection.
#[derive(Clone, Debug)]
struct Inception {
    branches: Vec<Vec<ConvBnRelu>>,
}

impl Inception {
    fn new<T: Float>(store: &mut ParamStore<T>, name: &str, cin: usize, cout: usize, rng: &mut ChaCha8Rng) -> Self {
        let q = cout / 4;
        let b = |i: usize| format!("{name}.b{i}");
        let branches = vec![
            vec![ConvBnRelu::new(store, &format!("{}.0", b(0)), cin, q, 1, rng)],
            vec![
                ConvBnRelu::new(store, &format!("{}.0", b(1)), cin, q, 1, rng),
                ConvBnRelu::new(store, &format!("{}.1", b(1)), q, q, 3, rng),
            ],
            vec![
                ConvBnRelu::new(store, &format!("{}.0", b(2)), cin, q / 2, 1, rng),
                ConvBnRelu::new(store, &format!("{}.1", b(2)), q / 2, q, 3, rng),
                ConvBnRelu::new(store, &format!("{}.2", b(2)), q, q, 3, rng),
            ],
            vec![ConvBnRelu::new(store, &format!("{}.0", b(3)), cin, cout - 3 * q, 1, rng)],
        ];
        Self { branches }
    }

    fn forward<T: Float>(&self, tape: &mut Tape<'_, T>, x: NodeId) -> Result<NodeId> {
        let mut outs = Vec::with_capacity(4);
        for branch in &self.branches {
            let mut h = x;
            for layer in branch {
                h = layer.forward(tape, h)?;
            }
            outs.push(h);
        }
        Ok(tape.concat(&outs)?)
    }
}

#[derive(Clone, Debug)]
enum Stage {
    Conv(ConvBnRelu),
    AvgPool,
    MaxPool,
    Dense(DenseBlock),
    Transition(Transition),
    Residual(Bottleneck),
    Inception(Inception),
}

impl Stage {
    fn forward<T: Float>(&self, tape: &mut Tape<'_, T>, x: NodeId) -> Result<NodeId> {
        match self {
            Stage::Conv(c) => Ok(c.forward(tape, x)?),
            Stage::AvgPool => Ok(tape.avg_pool2(x)?),
            Stage::MaxPool => Ok(tape.max_pool2(x)?),
            Stage::Dense(d) => d.forward(tape, x),
            Stage::Transition(t) => t.forward(tape, x),
            Stage::Residual(r) => r.forward(tape, x),
            Stage::Inception(i) => i.forward(tape, x),
        }
    }
}

/// Builds the backbone stages and returns them with the feature width.
fn build_backbone<T: Float>(
    store: &mut ParamStore<T>,
    backbone: Backbone,
    w: usize,
    rng: &mut ChaCha8Rng,
) -> (Vec<Stage>, usize) {
    let mut stages = Vec::new();
    let mut c = 1;
    let mut conv = |stages: &mut Vec<Stage>, c: &mut usize, out: usize, name: String, rng: &mut ChaCha8Rng| {
        stages.push(Stage::Conv(ConvBnRelu::new(store, &name, *c, out, 3, rng)));
        *c = out;
    };
    match backbone {
        Backbone::SmallScratch => {
            // Halve the input first; the four conv stages then run at
            // 112, 56, 28 and 14 pixels.
            stages.push(Stage::AvgPool);
            for (s, m) in [1, 2, 4, 8].into_iter().enumerate() {
                conv(&mut stages, &mut c, m * w, format!("backbone.stage{s}"), rng);
                stages.push(Stage::AvgPool);
            }
        }
        Backbone::Vgg16Style => {
            for (s, (reps, m)) in [(2, 1), (2, 2), (3, 4), (3, 8), (3, 8)].into_iter().enumerate() {
                for r in 0..reps {
                    conv(&mut stages, &mut c, m * w, format!("backbone.stage{s}.conv{r}"), rng);
                }
                stages.push(Stage::MaxPool);
            }
        }
        Backbone::Resnet50Style => {
            conv(&mut stages, &mut c, w, "backbone.stem".into(), rng);
            stages.push(Stage::MaxPool);
            for (s, (reps, m)) in [(3, 1), (4, 2), (6, 4), (3, 8)].into_iter().enumerate() {
                let mid = m * w;
                for r in 0..reps {
                    let name = format!("backbone.stage{s}.block{r}");
                    let out = 4 * mid;
                    let shortcut = (c != out).then(|| ConvBn::new(store, &format!("{name}.shortcut"), c, out, 1, rng));
                    stages.push(Stage::Residual(Bottleneck {
                        reduce: ConvBnRelu::new(store, &format!("{name}.reduce"), c, mid, 1, rng),
                        conv: ConvBnRelu::new(store, &format!("{name}.conv"), mid, mid, 3, rng),
                        expand: ConvBn::new(store, &format!("{name}.expand"), mid, out, 1, rng),
                        shortcut,
                        downsample: s > 0 && r == 0,
                    }));
                    c = out;
                }
            }
        }
        Backbone::InceptionStyle => {
            conv(&mut stages, &mut c, w, "backbone.stem".into(), rng);
            stages.push(Stage::MaxPool);
            for (s, m) in [2, 4, 8].into_iter().enumerate() {
                for r in 0..2 {
                    stages.push(Stage::Inception(Inception::new(
                        store,
                        &format!("backbone.stage{s}.module{r}"),
                        c,
                        m * w,
                        rng,
                    )));
                    c = m * w;
                }
                if s < 2 {
                    stages.push(Stage::MaxPool);
                }
            }
        }
        Backbone::Densenet121Style => {
            let growth = (w / 2).max(4);
            conv(&mut stages, &mut c, 2 * growth, "backbone.stem".into(), rng);
            stages.push(Stage::MaxPool);
            for (b, layers) in [6, 12, 24, 16].into_iter().enumerate() {
                if b > 0 {
                    let t = Transition::new(store, &format!("backbone.transition{b}"), c, 0.5, rng);
                    c = t.out_channels();
                    stages.push(Stage::Transition(t));
                }
                let block = DenseBlock::new(store, &format!("backbone.block{b}"), c, layers, growth, 4 * growth, rng);
                c = block.out_channels();
                stages.push(Stage::Dense(block));
            }
        }
    }
    (stages, c)
}

#[derive(Clone, Debug)]
struct Head {
    hidden: Vec<Linear>,
    out: Linear,
}

impl Head {
    fn new<T: Float>(
        store: &mut ParamStore<T>,
        name: &str,
        features: usize,
        widths: &[usize],
        outputs: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let mut c = features;
        let hidden = widths
            .iter()
            .enumerate()
            .map(|(i, &wd)| {
                let l = Linear::new(store, &format!("{name}.hidden{i}"), c, wd, Init::He, rng);
                c = wd;
                l
            })
            .collect();
        Self { hidden, out: Linear::new(store, &format!("{name}.out"), c, outputs, Init::FanIn, rng) }
    }

    fn forward<T: Float>(&self, tape: &mut Tape<'_, T>, x: NodeId) -> Result<NodeId> {
        let mut h = x;
        for l in &self.hidden {
            let z = l.forward(tape, h)?;
            h = tape.relu(z);
        }
        Ok(self.out.forward(tape, h)?)
    }
}

/// Sigmoid probability of "unhealthy" and the softmax over
/// (pre_cataract, post_cataract, others).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MultitaskOutput {
    pub p_t1: f64,
    pub dist_t2: [f64; 3],
}

impl MultitaskOutput {
    pub fn from_logits(t1: f64, t2: [f64; 3]) -> Self {
        let d = softmax(&t2);
        Self { p_t1: sigmoid(t1), dist_t2: [d[0], d[1], d[2]] }
    }

    pub fn pred_t1(&self) -> HealthLabel {
        if self.p_t1 >= 0.5 {
            HealthLabel::Unhealthy
        } else {
            HealthLabel::Healthy
        }
    }

    /// Argmax; ties resolve to the lower index.
    pub fn pred_t2(&self) -> ConditionLabel {
        let mut best = 0;
        for k in 1..3 {
            if self.dist_t2[k] > self.dist_t2[best] {
                best = k;
            }
        }
        ConditionLabel::ALL[best]
    }
}

/// Nodes recorded by one classifier forward pass.
#[derive(Clone, Copy, Debug)]
pub struct ClsTrace {
    /// `[N, F, 1, 1]` pooled features.
    pub features: NodeId,
    /// `[N, 1, 1, 1]`.
    pub t1_logit: NodeId,
    /// `[N, 3, 1, 1]`.
    pub t2_logits: NodeId,
}

#[derive(Clone, Debug)]
pub struct MultitaskClassifier<T: Float> {
    config: ClassifierConfig,
    params: ParamStore<T>,
    stages: Vec<Stage>,
    feature_width: usize,
    head_t1: Head,
    head_t2: Head,
}

impl<T: Float> MultitaskClassifier<T> {
    pub fn new(config: ClassifierConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let (stages, feature_width) = build_backbone(&mut params, config.backbone, config.base_width, &mut rng);
        let head_t1 = Head::new(&mut params, "head_t1", feature_width, &config.head_widths, 1, &mut rng);
        let head_t2 = Head::new(&mut params, "head_t2", feature_width, &config.head_widths, 3, &mut rng);
        let mut model = Self { config, params, stages, feature_width, head_t1, head_t2 };
        if let Some(path) = model.config.pretrained_weights_path.clone() {
            let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
            cataract_nn::io::load_prefix_into(&mut model.params, &bytes, "backbone.").map_err(|e| {
                Error::Checkpoint { path: path.clone(), reason: format!("pretrained backbone weights: {e}") }
            })?;
        }
        Ok(model)
    }

    pub fn config(&self) -> &ClassifierConfig {
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

    pub fn feature_width(&self) -> usize {
        self.feature_width
    }

    /// Zeroes both output layers, making every prediction uniform.
    pub fn zero_output_layers(&mut self) {
        for l in [&self.head_t1.out, &self.head_t2.out] {
            for id in [l.weight, l.bias] {
                let t = self.params.get_mut(id);
                *t = Tensor::zeros(t.shape());
            }
        }
    }

    /// Parameter names belonging to exactly one head.
    pub fn head_param_names(&self, task: usize) -> Vec<String> {
        let prefix = if task == 1 { "head_t1." } else { "head_t2." };
        self.params.entries().iter().filter(|e| e.name.starts_with(prefix)).map(|e| e.name.clone()).collect()
    }

    pub fn trace(&self, tape: &mut Tape<'_, T>, x: NodeId) -> Result<ClsTrace> {
        let s = tape.value(x).shape();
        let n = self.config.input_size;
        if s[1] != 1 || s[2] != n || s[3] != n || s[0] == 0 {
            return Err(Error::Shape(format!("expected [N, 1, {n}, {n}] input, got {s:?}")));
        }
        let mut h = x;
        for stage in &self.stages {
            h = stage.forward(tape, h)?;
        }
        let features = tape.global_avg_pool(h);
        let t1_logit = self.head_t1.forward(tape, features)?;
        let t2_logits = self.head_t2.forward(tape, features)?;
        Ok(ClsTrace { features, t1_logit, t2_logits })
    }

    /// Pooled features and raw head outputs in inference mode.
    pub fn infer(&self, images: &Tensor<T>) -> Result<(Tensor<T>, Vec<MultitaskOutput>)> {
        let mut tape = Tape::new(&self.params, Mode::Eval);
        let x = tape.input(images.clone());
        let tr = self.trace(&mut tape, x)?;
        let (t1, t2) = (tape.value(tr.t1_logit), tape.value(tr.t2_logits));
        let outputs = (0..t1.n())
            .map(|i| {
                let z = t2.image(i);
                MultitaskOutput::from_logits(t1.image(i)[0].as_f64(), [z[0].as_f64(), z[1].as_f64(), z[2].as_f64()])
            })
            .collect();
        Ok((tape.value(tr.features).clone(), outputs))
    }

    pub fn forward(&self, images: &Tensor<T>) -> Result<Vec<MultitaskOutput>> {
        Ok(self.infer(images)?.1)
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

pub fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Binary cross-entropy with `p` clamped to `[eps, 1 - eps]`; `y` is 1 for
/// unhealthy.
pub fn bce(p: f64, y: bool) -> f64 {
    let p = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
    if y {
        -p.ln()
    } else {
        -(1.0 - p).ln()
    }
}

/// Cross-entropy of a one-hot label against `dist`, clamped at `eps`.
pub fn cce(dist: &[f64], y: usize) -> f64 {
    -dist[y].max(PROB_EPS).ln()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda: 0.5 }
    }
}

pub fn total_loss(p: f64, y1: bool, dist: &[f64], y2: usize, w: LossWeights) -> f64 {
    w.lambda * bce(p, y1) + cce(dist, y2)
}

/// Batch-mean joint loss from raw head outputs, with gradients with respect
/// to both outputs. Where a clamp is active the loss is flat, so the
/// gradient there is zero.
pub fn multitask_loss_with_grad<T: Float>(
    t1_logit: &Tensor<T>,
    t2_logits: &Tensor<T>,
    y1: &[HealthLabel],
    y2: &[ConditionLabel],
    w: LossWeights,
) -> Result<(f64, Tensor<T>, Tensor<T>)> {
    let n = t1_logit.n();
    if t1_logit.image_len() != 1 || t2_logits.image_len() != 3 || t2_logits.n() != n || y1.len() != n || y2.len() != n {
        return Err(Error::Shape(format!(
            "heads {:?} / {:?} against {} / {} labels",
            t1_logit.shape(),
            t2_logits.shape(),
            y1.len(),
            y2.len()
        )));
    }
    let scale = 1.0 / n as f64;
    let mut d1 = Tensor::zeros(t1_logit.shape());
    let mut d2 = Tensor::zeros(t2_logits.shape());
    let mut total = 0.0;
    for i in 0..n {
        let z = t1_logit.image(i)[0].as_f64();
        let p = sigmoid(z);
        let y = y1[i] == HealthLabel::Unhealthy;
        let yf = y as u8 as f64;
        let clamped = !(PROB_EPS..=1.0 - PROB_EPS).contains(&p);
        d1.data_mut()[i] = T::of(if clamped { 0.0 } else { w.lambda * (p - yf) * scale });
        let zs: Vec<f64> = t2_logits.image(i).iter().map(|v| v.as_f64()).collect();
        let q = softmax(&zs);
        let c = y2[i].index();
        for k in 0..3 {
            let g = if q[c] < PROB_EPS { 0.0 } else { q[k] - (k == c) as u8 as f64 };
            d2.data_mut()[i * 3 + k] = T::of(g * scale);
        }
        total += total_loss(p, y, &q, c, w);
    }
    Ok((total * scale, d1, d2))
}
