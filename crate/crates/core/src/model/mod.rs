//! Two-stream signal/image classifier with cross- and self-modal attention.
//!
//! Both extractors end in `channels` feature maps that are adaptively mean
//! pooled to `tokens` positions, so every feature map entering attention is
//! `[tokens, channels]`. Parameters live in one flat list in registration
//! order; [`Layout`] maps modules to indices in that list.

mod checkpoint;
mod forward;

pub use checkpoint::{load_model, read_model, save_model, write_model, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use forward::{
    bind_params, cmam_forward, forward_infer_graph, forward_train_graph, head_forward, image_input,
    image_stream_forward, signal_features, signal_input, signal_stream_forward, smam_forward, uniform_attention, fixed_attention, Attention,
    TrainOutputs,
};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{EcgRecord, N_CLASSES};
use crate::raster::EcgImage;
use crate::tensor::{Graph, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("checkpoint error at byte {offset}: {msg}")]
    Checkpoint { offset: u64, msg: String },
    #[error("checkpoint config does not match the requested architecture: {0}")]
    ConfigMismatch(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, ModelError>;

/// Statistics used by the normalization after every convolution. Neither uses batch statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Norm {
    /// Each channel over its own spatial or temporal extent.
    Channel,
    /// All channels of a sample jointly, so channel means survive pooling.
    Layer,
}

/// What stands in for the image-side cross-modal module when no signal is available.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InferCmam {
    /// Pass image tokens through untouched.
    Identity,
    /// Attend uniformly over the value projections, which is what the module
    /// computes when its query/key tokens carry no information.
    Uniform,
    /// Apply the training-set mean of the module's attention matrix
    /// ([`ModelState::image_attention_mean`]) to the value projections.
    Expected,
}

/// Architecture hyperparameters. Stage widths are `widths[0..3]` followed by `channels`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub channels: usize,
    pub tokens: usize,
    pub widths: [usize; 3],
    pub signal_length: usize,
    /// Kernel and stride of the signal stem convolution.
    pub signal_stem: usize,
    pub signal_strides: [usize; 4],
    pub image_height: usize,
    pub image_width: usize,
    /// Fixed average-pool factor applied to the raster before the image stem.
    pub image_pool: usize,
    /// Kernel and stride of the image stem convolution.
    pub image_stem: usize,
    pub image_strides: [usize; 4],
    pub hidden: usize,
    pub norm: Norm,
    /// Divide attention logits by `sqrt(channels)`.
    pub scaled_attention: bool,
    /// Disabled modules act as identity.
    pub cmam: bool,
    pub smam: bool,
    /// Image-only inference replacement for the cross-modal module (when `cmam` is on).
    pub infer_cmam: InferCmam,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            channels: 64,
            tokens: 16,
            widths: [16, 32, 64],
            signal_length: 4096,
            signal_stem: 16,
            signal_strides: [2, 2, 2, 2],
            image_height: 512,
            image_width: 512,
            image_pool: 4,
            image_stem: 4,
            image_strides: [2, 2, 2, 1],
            hidden: 64,
            norm: Norm::Channel,
            scaled_attention: false,
            cmam: true,
            smam: true,
            infer_cmam: InferCmam::Expected,
        }
    }
}

impl ModelConfig {
    /// C=8, L=4, T=64, 16x16 image; small enough for full finite-difference checks.
    pub fn tiny() -> Self {
        Self {
            channels: 8,
            tokens: 4,
            widths: [4, 8, 8],
            signal_length: 64,
            signal_stem: 4,
            signal_strides: [2, 2, 1, 1],
            image_height: 16,
            image_width: 16,
            image_pool: 1,
            image_stem: 2,
            image_strides: [2, 2, 1, 1],
            hidden: 8,
            ..Self::default()
        }
    }

    pub fn stage_widths(&self) -> [usize; 4] {
        [self.widths[0], self.widths[1], self.widths[2], self.channels]
    }

    /// Smallest accepted signal length.
    pub fn min_signal_length(&self) -> usize {
        self.signal_stem
    }

    /// Smallest accepted image side.
    pub fn min_image_side(&self) -> usize {
        self.image_pool * self.image_stem
    }

    pub fn validate(&self) -> Result<()> {
        let sizes = [
            ("channels", self.channels),
            ("tokens", self.tokens),
            ("signal_length", self.signal_length),
            ("signal_stem", self.signal_stem),
            ("image_height", self.image_height),
            ("image_width", self.image_width),
            ("image_pool", self.image_pool),
            ("image_stem", self.image_stem),
            ("hidden", self.hidden),
        ];
        for (name, v) in sizes {
            if v == 0 {
                return Err(ModelError::Config(format!("{name} must be positive")));
            }
        }
        if self.widths.contains(&0) || self.signal_strides.contains(&0) || self.image_strides.contains(&0) {
            return Err(ModelError::Config("widths and strides must be positive".into()));
        }
        if self.signal_length < self.min_signal_length() {
            return Err(ModelError::Config(format!(
                "signal_length {} is shorter than the stem ({})",
                self.signal_length, self.signal_stem
            )));
        }
        if self.image_height.min(self.image_width) < self.min_image_side() {
            return Err(ModelError::Config(format!(
                "image {}x{} is smaller than the minimum side {}",
                self.image_height,
                self.image_width,
                self.min_image_side()
            )));
        }
        Ok(())
    }
}

/// Indices of a convolution and the channel norm that follows it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConvNorm {
    pub weight: usize,
    pub gain: usize,
    pub bias: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub conv1: ConvNorm,
    pub conv2: ConvNorm,
    /// Projection shortcut, present when the block changes stride or width.
    pub shortcut: Option<ConvNorm>,
    pub stride: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Extractor {
    pub stem: ConvNorm,
    pub blocks: Vec<Block>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttentionParams {
    pub query: usize,
    pub key: usize,
    pub value: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Head {
    pub w1: usize,
    pub b1: usize,
    pub w2: usize,
    pub b2: usize,
}

/// Where every module's parameters sit in [`ModelState::params`].
#[derive(Debug, Clone, PartialEq)]
pub struct Layout {
    /// One extractor shared by all 12 leads.
    pub signal: Extractor,
    pub image: Extractor,
    /// Signal stream refined by image queries and keys.
    pub cmam_signal: AttentionParams,
    /// Image stream refined by signal queries and keys.
    pub cmam_image: AttentionParams,
    pub smam_signal: AttentionParams,
    pub smam_image: AttentionParams,
    pub head_signal: Head,
    pub head_image: Head,
}

/// Registers parameters in order with fan-in scaled uniform initialization.
pub struct ParamBuilder {
    rng: ChaCha8Rng,
    pub names: Vec<String>,
    pub params: Vec<Tensor>,
}

impl ParamBuilder {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            names: Vec::new(),
            params: Vec::new(),
        }
    }

    fn push(&mut self, name: String, t: Tensor) -> usize {
        self.names.push(name);
        self.params.push(t.requiring_grad());
        self.params.len() - 1
    }

    /// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    pub fn weight(&mut self, name: String, shape: &[usize], fan_in: usize) -> usize {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| self.rng.random_range(-bound..bound)).collect();
        self.push(name, Tensor::new(shape.to_vec(), data).expect("positive shape"))
    }

    pub fn constant(&mut self, name: String, shape: &[usize], value: f64) -> usize {
        self.push(name, Tensor::full(shape, value))
    }

    fn conv_norm(&mut self, name: &str, c_out: usize, c_in: usize, kernel: &[usize]) -> ConvNorm {
        let mut shape = vec![c_out, c_in];
        shape.extend_from_slice(kernel);
        let fan_in = c_in * kernel.iter().product::<usize>();
        ConvNorm {
            weight: self.weight(format!("{name}.weight"), &shape, fan_in),
            gain: self.constant(format!("{name}.gain"), &[c_out], 1.0),
            bias: self.constant(format!("{name}.bias"), &[c_out], 0.0),
        }
    }

    fn extractor(&mut self, name: &str, stem: usize, strides: [usize; 4], widths: [usize; 4], dims: usize) -> Extractor {
        let k3 = vec![3; dims];
        let k1 = vec![1; dims];
        let stem = self.conv_norm(&format!("{name}.stem"), widths[0], 1, &vec![stem; dims]);
        let mut c_in = widths[0];
        let mut blocks = Vec::new();
        for (i, (&stride, &w)) in strides.iter().zip(&widths).enumerate() {
            let prefix = format!("{name}.block{i}");
            let conv1 = self.conv_norm(&format!("{prefix}.conv1"), w, c_in, &k3);
            let conv2 = self.conv_norm(&format!("{prefix}.conv2"), w, w, &k3);
            let shortcut =
                (stride != 1 || c_in != w).then(|| self.conv_norm(&format!("{prefix}.shortcut"), w, c_in, &k1));
            blocks.push(Block {
                conv1,
                conv2,
                shortcut,
                stride,
            });
            c_in = w;
        }
        Extractor { stem, blocks }
    }

    fn attention(&mut self, name: &str, c: usize) -> AttentionParams {
        AttentionParams {
            query: self.weight(format!("{name}.query"), &[c, c], c),
            key: self.weight(format!("{name}.key"), &[c, c], c),
            value: self.weight(format!("{name}.value"), &[c, c], c),
        }
    }

    fn head(&mut self, name: &str, c: usize, hidden: usize) -> Head {
        Head {
            w1: self.weight(format!("{name}.w1"), &[c, hidden], c),
            b1: self.constant(format!("{name}.b1"), &[1, hidden], 0.0),
            w2: self.weight(format!("{name}.w2"), &[hidden, N_CLASSES], hidden),
            b2: self.constant(format!("{name}.b2"), &[1, N_CLASSES], 0.0),
        }
    }
}

impl Layout {
    /// Builds the layout and initial parameters; the registration order defines the checkpoint order.
    pub fn build(cfg: &ModelConfig, seed: u64) -> (Layout, ParamBuilder) {
        let mut b = ParamBuilder::new(seed);
        let widths = cfg.stage_widths();
        let c = cfg.channels;
        let layout = Layout {
            signal: b.extractor("signal", cfg.signal_stem, cfg.signal_strides, widths, 1),
            image: b.extractor("image", cfg.image_stem, cfg.image_strides, widths, 2),
            cmam_signal: b.attention("cmam_signal", c),
            cmam_image: b.attention("cmam_image", c),
            smam_signal: b.attention("smam_signal", c),
            smam_image: b.attention("smam_image", c),
            head_signal: b.head("head_signal", c, cfg.hidden),
            head_image: b.head("head_image", c, cfg.hidden),
        };
        (layout, b)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub config: ModelConfig,
    pub layout: Layout,
    pub names: Vec<String>,
    pub params: Vec<Tensor>,
    /// Running mean `[L, L]` of the signal-keyed attention of the image-side cross-modal
    /// module, accumulated by training. Not a trainable parameter; uniform until trained.
    pub image_attention_mean: Tensor,
}

impl ModelState {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let (layout, b) = Layout::build(&config, seed);
        let l = config.tokens;
        Ok(Self {
            image_attention_mean: Tensor::full(&[l, l], 1.0 / l as f64),
            config,
            layout,
            names: b.names,
            params: b.params,
        })
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Tensor::numel).sum()
    }

    /// Scalar count of the parameters whose name starts with `prefix`.
    pub fn param_count_with_prefix(&self, prefix: &str) -> usize {
        self.names
            .iter()
            .zip(&self.params)
            .filter(|(n, _)| n.starts_with(prefix))
            .map(|(_, p)| p.numel())
            .sum()
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &self.params[i])
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &mut self.params[i])
    }

    /// Errors naming every field that differs from `expected`.
    pub fn check_config(&self, expected: &ModelConfig) -> Result<()> {
        if &self.config == expected {
            return Ok(());
        }
        let have = serde_json::to_value(&self.config).expect("config serializes");
        let want = serde_json::to_value(expected).expect("config serializes");
        let diffs: Vec<String> = want
            .as_object()
            .expect("config is an object")
            .iter()
            .filter(|(k, v)| have.get(k.as_str()) != Some(*v))
            .map(|(k, v)| format!("{k}: checkpoint has {}, requested {v}", have[k.as_str()]))
            .collect();
        Err(ModelError::ConfigMismatch(diffs.join("; ")))
    }

    /// Signal and image class probabilities for one (detrended) record and its raster.
    pub fn forward_train(&self, record: &EcgRecord, image: &EcgImage) -> Result<([f64; N_CLASSES], [f64; N_CLASSES])> {
        let mut g = Graph::new();
        let p = bind_params(&mut g, self);
        let s = signal_input(&mut g, record)?;
        let i = image_input(&mut g, image)?;
        let out = forward_train_graph(&mut g, self, &p, s, i)?;
        Ok((probs(&g, out.p_signal), probs(&g, out.p_image)))
    }

    /// Image-only prediction. There is deliberately no signal argument.
    pub fn forward_infer(&self, image: &EcgImage) -> Result<[f64; N_CLASSES]> {
        let mut g = Graph::new();
        let p = bind_params(&mut g, self);
        let i = image_input(&mut g, image)?;
        let out = forward_infer_graph(&mut g, self, &p, i)?;
        Ok(probs(&g, out))
    }
}

fn probs(g: &Graph, v: crate::tensor::Var) -> [f64; N_CLASSES] {
    g.value(v).try_into().expect("heads emit one probability per class")
}
