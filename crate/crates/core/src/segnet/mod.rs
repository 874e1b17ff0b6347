//! Cascaded U-shaped encoder-decoder producing a foreground probability map.
//!
//! One stage is `depth` encoder levels of two 3×3 conv+ReLU followed by 2×2
//! max pooling, a two-conv bottleneck, and a mirrored decoder. Each decoder
//! level upsamples (nearest neighbour), applies a 3×3 conv+ReLU, concatenates
//! the matching encoder output and fuses with another 3×3 conv+ReLU. A 1×1
//! conv and a sigmoid produce the map. With `cascade` enabled a second stage
//! reads the input image concatenated with the first stage's map, and its
//! output is the model's prediction.

mod checkpoint;

pub use checkpoint::{CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{DiffTensor, Graph, Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ModelConfig {
    pub base_channels: usize,
    pub depth: usize,
    pub cascade: bool,
    pub in_channels: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            base_channels: 8,
            depth: 3,
            cascade: true,
            in_channels: 1,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.base_channels == 0 || self.depth == 0 || self.in_channels == 0 {
            return Err(Error::Config(format!(
                "base_channels, depth and in_channels must be positive: {self:?}"
            )));
        }
        if self.depth > 12 {
            return Err(Error::Config(format!("depth {} is unreasonably large", self.depth)));
        }
        Ok(())
    }

    /// Image sides must be multiples of this.
    pub fn size_multiple(&self) -> usize {
        1 << self.depth
    }

    /// Short architecture tag used in report rows.
    pub fn tag(&self) -> String {
        format!(
            "unet-b{}-d{}{}",
            self.base_channels,
            self.depth,
            if self.cascade { "-cascade" } else { "" }
        )
    }

    fn channels(&self, level: usize) -> usize {
        self.base_channels << level
    }

    /// Names and shapes of every parameter, in storage order.
    pub fn parameter_layout(&self) -> Vec<(String, Shape)> {
        let mut layout = Vec::new();
        let stages = if self.cascade { 2 } else { 1 };
        for stage in 0..stages {
            let in_ch = self.in_channels + stage;
            let mut conv = |name: String, out: usize, inp: usize, k: usize| {
                layout.push((format!("s{stage}.{name}.weight"), Shape::new(out, inp, k, k)));
                layout.push((format!("s{stage}.{name}.bias"), Shape::new(1, out, 1, 1)));
            };
            let mut prev = in_ch;
            for level in 0..self.depth {
                let c = self.channels(level);
                conv(format!("enc{level}.conv0"), c, prev, 3);
                conv(format!("enc{level}.conv1"), c, c, 3);
                prev = c;
            }
            let bottom = 2 * self.channels(self.depth - 1);
            conv("mid.conv0".into(), bottom, prev, 3);
            conv("mid.conv1".into(), bottom, bottom, 3);
            prev = bottom;
            for level in (0..self.depth).rev() {
                let c = self.channels(level);
                conv(format!("dec{level}.up"), c, prev, 3);
                conv(format!("dec{level}.fuse"), c, 2 * c, 3);
                prev = c;
            }
            conv("head".into(), 1, prev, 1);
        }
        layout
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
}

/// Network parameters plus the configuration that shapes them.
#[derive(Clone, Debug, PartialEq)]
pub struct SegNet {
    config: ModelConfig,
    params: Vec<Param>,
}

/// Result of a forward pass: the probability map and the graph leaves
/// holding the parameters, in [`SegNet::params`] order.
pub struct Forward<'g> {
    pub prob: DiffTensor<'g>,
    pub params: Vec<DiffTensor<'g>>,
}

impl SegNet {
    /// Fresh network with He-scaled normal weights (std `√(2 / fan_in)`)
    /// and zero biases, drawn from a stream seeded by `config.seed`.
    pub fn init(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let params = config
            .parameter_layout()
            .into_iter()
            .map(|(name, shape)| {
                let value = if name.ends_with(".bias") {
                    Tensor::zeros(shape)
                } else {
                    let fan_in = shape.channels() * shape.height() * shape.width();
                    Tensor::normal(shape, (2.0 / fan_in as f64).sqrt(), &mut rng)
                };
                Param { name, value }
            })
            .collect();
        Ok(SegNet { config, params })
    }

    pub(crate) fn from_parts(config: ModelConfig, params: Vec<Param>) -> Result<Self> {
        config.validate()?;
        let layout = config.parameter_layout();
        if layout.len() != params.len() {
            return Err(Error::Contract(format!(
                "configuration expects {} parameter tensors, got {}",
                layout.len(),
                params.len()
            )));
        }
        for ((name, shape), p) in layout.iter().zip(&params) {
            if *name != p.name || *shape != p.value.shape() {
                return Err(Error::Contract(format!(
                    "parameter {} {} does not match expected {name} {shape}",
                    p.name,
                    p.value.shape()
                )));
            }
        }
        Ok(SegNet { config, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    fn check_input(&self, shape: Shape) -> Result<()> {
        if shape.channels() != self.config.in_channels {
            return Err(Error::dim(
                "segnet",
                "channels (axis 1)",
                format!("input {shape} but model expects {} channels", self.config.in_channels),
            ));
        }
        let m = self.config.size_multiple();
        if !shape.height().is_multiple_of(m) || !shape.width().is_multiple_of(m) || shape.height() == 0 || shape.width() == 0 {
            return Err(Error::dim(
                "segnet",
                "height/width (axes 2,3)",
                format!("input {shape} is not a positive multiple of {m} in both spatial axes"),
            ));
        }
        Ok(())
    }

    /// Differentiable forward pass with parameters as gradient-receiving leaves.
    pub fn forward<'g>(&self, graph: &'g Graph, image: DiffTensor<'g>) -> Result<Forward<'g>> {
        let params: Vec<_> = self
            .params
            .iter()
            .map(|p| graph.parameter(p.value.clone()))
            .collect();
        let prob = self.run(graph, image, &params)?;
        Ok(Forward { prob, params })
    }

    /// Probability map for a batch of images, without gradient bookkeeping.
    pub fn predict(&self, images: &Tensor) -> Result<Tensor> {
        let graph = Graph::new();
        let params: Vec<_> = self
            .params
            .iter()
            .map(|p| graph.constant(p.value.clone()))
            .collect();
        let image = graph.constant(images.clone());
        Ok(self.run(&graph, image, &params)?.value())
    }

    fn run<'g>(&self, graph: &'g Graph, image: DiffTensor<'g>, params: &[DiffTensor<'g>]) -> Result<DiffTensor<'g>> {
        self.check_input(image.shape())?;
        let mut cursor = params.iter();
        let first = self.stage(graph, image, &mut cursor)?;
        if !self.config.cascade {
            return Ok(first);
        }
        let refined_input = image.concat(&first)?;
        self.stage(graph, refined_input, &mut cursor)
    }

    fn stage<'g, 'p>(
        &self,
        graph: &'g Graph,
        input: DiffTensor<'g>,
        params: &mut impl Iterator<Item = &'p DiffTensor<'g>>,
    ) -> Result<DiffTensor<'g>>
    where
        'g: 'p,
    {
        let mut conv = |x: DiffTensor<'g>, padding: usize| -> Result<DiffTensor<'g>> {
            let w = params.next().expect("parameter layout");
            let b = params.next().expect("parameter layout");
            x.conv2d(w, b, 1, padding)
        };
        let mut x = input;
        let mut skips = Vec::with_capacity(self.config.depth);
        for _ in 0..self.config.depth {
            x = conv(x, 1)?.relu();
            x = conv(x, 1)?.relu();
            skips.push(x);
            x = x.maxpool2x2()?;
        }
        x = conv(x, 1)?.relu();
        x = conv(x, 1)?.relu();
        for skip in skips.iter().rev() {
            let up = conv(x.upsample_nearest_x2(), 1)?.relu();
            x = conv(graph.concat(&[up, *skip])?, 1)?.relu();
        }
        Ok(conv(x, 0)?.sigmoid())
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        checkpoint::save(self, path)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        checkpoint::load(path)
    }
}
