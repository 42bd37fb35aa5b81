//! Slice encoder: a plain convolutional stack mapping each pseudo-RGB
//! slice to one embedding vector.
//!
//! Each stage is `conv k×k (stride 1, zero pad) → ReLU → 2×2 max-pool`;
//! a global average pool over what is left yields the embedding.

use rand::Rng;

use crate::error::{Error, Result};
use crate::init::{Existing, Fresh, Init, ParamSource};
use crate::numerics::{Graph, NodeId, ParamId, ParamStore, Tensor};
use crate::volume::{PseudoRgb, SliceBag};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncoderConfig {
    /// Output channels of each stage; the last one is the embedding size.
    pub widths: Vec<usize>,
    pub kernel: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            widths: vec![8, 16, 32, 64],
            kernel: 3,
        }
    }
}

impl EncoderConfig {
    pub fn embed_dim(&self) -> usize {
        self.widths.last().copied().unwrap_or(0)
    }

    pub fn stages(&self) -> usize {
        self.widths.len()
    }

    /// Smallest slice side that survives every pooling stage.
    pub fn min_spatial(&self) -> usize {
        1 << self.stages()
    }

    pub fn validate(&self, heads: usize) -> Result<()> {
        if self.widths.is_empty() || self.widths.contains(&0) {
            return Err(Error::config(format!("encoder widths must be positive, got {:?}", self.widths)));
        }
        if self.stages() > 16 {
            return Err(Error::config(format!("{} encoder stages is too many", self.stages())));
        }
        if self.kernel == 0 || self.kernel % 2 == 0 {
            return Err(Error::config(format!("kernel size must be odd, got {}", self.kernel)));
        }
        if heads == 0 || self.embed_dim() % heads != 0 {
            return Err(Error::config(format!(
                "embedding dim {} not divisible by {heads} heads",
                self.embed_dim()
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
struct ConvStage {
    kernel: ParamId,
    bias: ParamId,
}

/// Handles to the encoder's parameters inside a [`ParamStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct Encoder {
    config: EncoderConfig,
    stages: Vec<ConvStage>,
}

impl Encoder {
    /// Kaiming-normal kernels (std `sqrt(2 / fan_in)`), zero biases.
    pub fn init<R: Rng + ?Sized>(
        config: &EncoderConfig,
        heads: usize,
        store: &mut ParamStore,
        prefix: &str,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate(heads)?;
        Self::build(config, prefix, &mut Fresh { store, rng })
    }

    /// Re-binds handles to parameters already present in `store`.
    pub(crate) fn bind(config: &EncoderConfig, store: &ParamStore, prefix: &str) -> Result<Self> {
        Self::build(config, prefix, &mut Existing { store })
    }

    fn build(config: &EncoderConfig, prefix: &str, src: &mut impl ParamSource) -> Result<Self> {
        let k = config.kernel;
        let mut stages = Vec::with_capacity(config.stages());
        let mut cin = 3;
        for (i, &cout) in config.widths.iter().enumerate() {
            let std = (2.0 / (cin * k * k) as f64).sqrt();
            stages.push(ConvStage {
                kernel: src.param(format!("{prefix}encoder.stage{i}.kernel"), &[cout, cin, k, k], Init::Normal(std))?,
                bias: src.param(format!("{prefix}encoder.stage{i}.bias"), &[cout], Init::Zeros)?,
            });
            cin = cout;
        }
        Ok(Encoder {
            config: config.clone(),
            stages,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn kernels(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.stages.iter().map(|s| s.kernel)
    }

    pub fn biases(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.stages.iter().map(|s| s.bias)
    }

    fn check_spatial(&self, rows: usize, cols: usize) -> Result<()> {
        let min = self.config.min_spatial();
        if rows < min || cols < min {
            return Err(Error::contract(format!(
                "slice {rows}x{cols} too small: {} stages need at least {min}x{min}",
                self.config.stages()
            )));
        }
        Ok(())
    }

    /// Encodes a `[N, 3, rows, cols]` node into `[N, C]` embeddings.
    pub fn encode_node(&self, g: &mut Graph, store: &ParamStore, input: NodeId) -> Result<NodeId> {
        let d = g.dims(input).to_vec();
        if d.len() != 4 || d[1] != 3 {
            return Err(Error::shape("encoder", format!("expected [N, 3, H, W], got {d:?}")));
        }
        self.check_spatial(d[2], d[3])?;
        let mut x = input;
        for stage in &self.stages {
            let kernel = g.param(store, stage.kernel)?;
            let bias = g.param(store, stage.bias)?;
            x = g.conv2d(x, kernel, bias)?;
            x = g.relu(x)?;
            x = g.max_pool2d(x)?;
        }
        g.global_avg_pool(x)
    }

    /// Embeds every slice of the bag, row `i` for slice `i`: `[L, C]`.
    pub fn encode_bag(&self, g: &mut Graph, store: &ParamStore, bag: &SliceBag) -> Result<NodeId> {
        if bag.is_empty() {
            return Err(Error::contract("cannot encode an empty bag"));
        }
        let input = g.input(bag.to_tensor())?;
        self.encode_node(g, store, input)
    }

    pub fn encode_slice(&self, store: &ParamStore, slice: &PseudoRgb) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let t = Tensor::new(vec![1, 3, slice.rows, slice.cols], slice.data.clone())?;
        let input = g.input(t)?;
        let out = self.encode_node(&mut g, store, input)?;
        Ok(g.value(out).data().to_vec())
    }
}
