//! Sequence aggregation over slice embeddings: sinusoidal positions, a
//! pre-norm transformer, attention-MIL pooling and the sigmoid risk head.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::error::{Error, Result};
use crate::init::{Existing, Fresh, Init, ParamSource};
use crate::numerics::{Graph, NodeId, ParamId, ParamStore, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Mode {
    /// Positions, transformer, attention pooling.
    Logo,
    /// Transformer and attention pooling without positions.
    NoPe,
    /// Attention pooling directly on the slice embeddings.
    Abmil,
    /// Plain average of the slice embeddings.
    Mean,
}

impl Mode {
    pub const ALL: [Mode; 4] = [Mode::Logo, Mode::NoPe, Mode::Abmil, Mode::Mean];

    pub fn name(self) -> &'static str {
        match self {
            Mode::Logo => "logo",
            Mode::NoPe => "no_pe",
            Mode::Abmil => "abmil",
            Mode::Mean => "mean",
        }
    }

    pub fn uses_transformer(self) -> bool {
        matches!(self, Mode::Logo | Mode::NoPe)
    }

    pub fn uses_attention_pool(self) -> bool {
        self != Mode::Mean
    }

    pub(crate) fn code(self) -> u8 {
        match self {
            Mode::Logo => 0,
            Mode::NoPe => 1,
            Mode::Abmil => 2,
            Mode::Mean => 3,
        }
    }

    pub(crate) fn from_code(code: u8) -> Option<Self> {
        Mode::ALL.into_iter().find(|m| m.code() == code)
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Mode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::config(format!("unknown mode `{s}` (expected logo, no_pe, abmil or mean)")))
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AggregatorConfig {
    pub embed_dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub horizons: usize,
    pub mode: Mode,
}

impl AggregatorConfig {
    pub fn new(embed_dim: usize, mode: Mode) -> Self {
        AggregatorConfig {
            embed_dim,
            layers: 2,
            heads: 8,
            ffn_dim: 4 * embed_dim,
            horizons: 5,
            mode,
        }
    }

    pub fn outputs(&self) -> usize {
        self.horizons + 1
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.heads.max(1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 || self.ffn_dim == 0 {
            return Err(Error::config("embedding and feed-forward dims must be positive"));
        }
        if self.heads == 0 || self.embed_dim % self.heads != 0 {
            return Err(Error::config(format!(
                "embedding dim {} not divisible by {} heads",
                self.embed_dim, self.heads
            )));
        }
        if self.horizons == 0 {
            return Err(Error::config("need at least one horizon"));
        }
        if self.mode == Mode::Logo && self.embed_dim % 2 != 0 {
            return Err(Error::config(format!(
                "positional encoding needs an even embedding dim, got {}",
                self.embed_dim
            )));
        }
        Ok(())
    }
}

/// `PE[pos][2k] = sin(pos / 10000^(2k/C))`, `PE[pos][2k+1] = cos(…)`.
pub fn positional_encoding(len: usize, dim: usize) -> Result<Tensor> {
    if dim == 0 || dim % 2 != 0 {
        return Err(Error::config(format!("positional encoding needs an even dim, got {dim}")));
    }
    if len == 0 {
        return Err(Error::contract("positional encoding of an empty sequence"));
    }
    Ok(Tensor::from_fn(&[len, dim], |i| {
        let (pos, j) = ((i / dim) as f64, i % dim);
        let angle = pos / 10000f64.powf((j - j % 2) as f64 / dim as f64);
        if j % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    }))
}

#[derive(Clone, Debug, PartialEq)]
struct Dense {
    weight: ParamId,
    bias: Option<ParamId>,
}

impl Dense {
    fn build(src: &mut impl ParamSource, name: &str, fan_in: usize, fan_out: usize, bias: bool) -> Result<Self> {
        let bound = 1.0 / (fan_in as f64).sqrt();
        Ok(Dense {
            weight: src.param(format!("{name}.weight"), &[fan_out, fan_in], Init::Uniform(bound))?,
            bias: if bias {
                Some(src.param(format!("{name}.bias"), &[fan_out], Init::Zeros)?)
            } else {
                None
            },
        })
    }

    fn apply(&self, g: &mut Graph, store: &ParamStore, x: NodeId) -> Result<NodeId> {
        let w = g.param(store, self.weight)?;
        let b = self.bias.map(|b| g.param(store, b)).transpose()?;
        g.linear(x, w, b)
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Norm {
    gamma: ParamId,
    beta: ParamId,
}

impl Norm {
    fn build(src: &mut impl ParamSource, name: &str, dim: usize) -> Result<Self> {
        Ok(Norm {
            gamma: src.param(format!("{name}.gamma"), &[dim], Init::Ones)?,
            beta: src.param(format!("{name}.beta"), &[dim], Init::Zeros)?,
        })
    }

    fn apply(&self, g: &mut Graph, store: &ParamStore, x: NodeId) -> Result<NodeId> {
        let gamma = g.param(store, self.gamma)?;
        let beta = g.param(store, self.beta)?;
        g.layer_norm(x, gamma, beta, 1)
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Block {
    norm1: Norm,
    query: Dense,
    key: Dense,
    value: Dense,
    out: Dense,
    norm2: Norm,
    ffn_in: Dense,
    ffn_out: Dense,
}

#[derive(Clone, Debug, PartialEq)]
struct AttentionPool {
    v: Dense,
    w: Dense,
}

/// Handles to the aggregator's parameters inside a [`ParamStore`].
/// Only the parameters the configured mode uses are created.
#[derive(Clone, Debug, PartialEq)]
pub struct Aggregator {
    config: AggregatorConfig,
    blocks: Vec<Block>,
    pool: Option<AttentionPool>,
    head: Dense,
}

/// Graph nodes produced by one aggregation pass.
#[derive(Clone, Debug)]
pub struct AggregateNodes {
    /// `[1, n+1]` per-year probabilities plus the event-free bin.
    pub p: NodeId,
    /// `[L, 1]` slice importance weights.
    pub alpha: NodeId,
    /// `[1, C]` bag embedding.
    pub z: NodeId,
    /// `[L, L]` attention matrices, one per layer and head.
    pub attention: Vec<NodeId>,
}

impl Aggregator {
    pub fn init<R: Rng + ?Sized>(
        config: &AggregatorConfig,
        store: &mut ParamStore,
        prefix: &str,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        Self::build(config, prefix, &mut Fresh { store, rng })
    }

    pub(crate) fn bind(config: &AggregatorConfig, store: &ParamStore, prefix: &str) -> Result<Self> {
        config.validate()?;
        Self::build(config, prefix, &mut Existing { store })
    }

    fn build(config: &AggregatorConfig, prefix: &str, src: &mut impl ParamSource) -> Result<Self> {
        let c = config.embed_dim;
        let mut blocks = Vec::new();
        if config.mode.uses_transformer() {
            for l in 0..config.layers {
                let name = |part: &str| format!("{prefix}transformer.layer{l}.{part}");
                blocks.push(Block {
                    norm1: Norm::build(src, &name("norm1"), c)?,
                    query: Dense::build(src, &name("query"), c, c, true)?,
                    key: Dense::build(src, &name("key"), c, c, true)?,
                    value: Dense::build(src, &name("value"), c, c, true)?,
                    out: Dense::build(src, &name("out"), c, c, true)?,
                    norm2: Norm::build(src, &name("norm2"), c)?,
                    ffn_in: Dense::build(src, &name("ffn_in"), c, config.ffn_dim, true)?,
                    ffn_out: Dense::build(src, &name("ffn_out"), config.ffn_dim, c, true)?,
                });
            }
        }
        let pool = if config.mode.uses_attention_pool() {
            Some(AttentionPool {
                v: Dense::build(src, &format!("{prefix}pool.v"), c, c, false)?,
                w: Dense::build(src, &format!("{prefix}pool.w"), c, 1, false)?,
            })
        } else {
            None
        };
        let head = Dense::build(src, &format!("{prefix}head"), c, config.outputs(), true)?;
        Ok(Aggregator {
            config: config.clone(),
            blocks,
            pool,
            head,
        })
    }

    pub fn config(&self) -> &AggregatorConfig {
        &self.config
    }

    /// The attention-pool projection `V` and scoring vector `w`, if the mode has them.
    pub fn pool_params(&self) -> Option<(ParamId, ParamId)> {
        self.pool.as_ref().map(|p| (p.v.weight, p.w.weight))
    }

    /// Head weight `[n+1, C]` and bias `[n+1]`.
    pub fn head_params(&self) -> (ParamId, ParamId) {
        (self.head.weight, self.head.bias.expect("head has a bias"))
    }

    fn check_input(&self, g: &Graph, h: NodeId) -> Result<()> {
        let d = g.dims(h);
        if d.len() != 2 || d[0] == 0 || d[1] != self.config.embed_dim {
            return Err(Error::contract(format!(
                "expected an L x {} embedding sequence, got {d:?}",
                self.config.embed_dim
            )));
        }
        Ok(())
    }

    /// Runs the transformer stack on `[L, C]`, returning the output and
    /// every attention matrix.
    pub fn transformer(&self, g: &mut Graph, store: &ParamStore, h: NodeId) -> Result<(NodeId, Vec<NodeId>)> {
        self.check_input(g, h)?;
        let mut x = h;
        let mut attention = Vec::new();
        for block in &self.blocks {
            let normed = block.norm1.apply(g, store, x)?;
            let attended = self.self_attention(g, store, block, normed, &mut attention)?;
            x = g.add(x, attended)?;
            let normed = block.norm2.apply(g, store, x)?;
            let hidden = block.ffn_in.apply(g, store, normed)?;
            let hidden = g.gelu(hidden)?;
            let ff = block.ffn_out.apply(g, store, hidden)?;
            x = g.add(x, ff)?;
        }
        Ok((x, attention))
    }

    fn self_attention(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        block: &Block,
        x: NodeId,
        attention: &mut Vec<NodeId>,
    ) -> Result<NodeId> {
        let dh = self.config.head_dim();
        let q = block.query.apply(g, store, x)?;
        let k = block.key.apply(g, store, x)?;
        let v = block.value.apply(g, store, x)?;
        let mut heads = Vec::with_capacity(self.config.heads);
        for head in 0..self.config.heads {
            let qh = g.narrow(q, 1, head * dh, dh)?;
            let kh = g.narrow(k, 1, head * dh, dh)?;
            let vh = g.narrow(v, 1, head * dh, dh)?;
            let kt = g.transpose(kh)?;
            let scores = g.matmul(qh, kt)?;
            let scores = g.scale(scores, 1.0 / (dh as f64).sqrt())?;
            let weights = g.softmax(scores, 1)?;
            attention.push(weights);
            heads.push(g.matmul(weights, vh)?);
        }
        let joined = g.concat(&heads, 1)?;
        block.out.apply(g, store, joined)
    }

    /// Attention-MIL pooling: `e = w·tanh(V h)`, `α = softmax(e)`, `z = Σ α_i h_i`.
    /// Returns `(z [1, C], α [L, 1])`.
    pub fn attention_pool(&self, g: &mut Graph, store: &ParamStore, h: NodeId) -> Result<(NodeId, NodeId)> {
        self.check_input(g, h)?;
        let pool = self
            .pool
            .as_ref()
            .ok_or_else(|| Error::contract(format!("mode {} has no attention pool", self.config.mode)))?;
        let projected = pool.v.apply(g, store, h)?;
        let projected = g.tanh(projected)?;
        let scores = pool.w.apply(g, store, projected)?;
        let alpha = g.softmax(scores, 0)?;
        let at = g.transpose(alpha)?;
        let z = g.matmul(at, h)?;
        Ok((z, alpha))
    }

    /// `sigmoid(W z + b)` for `z` of shape `[1, C]`.
    pub fn head(&self, g: &mut Graph, store: &ParamStore, z: NodeId) -> Result<NodeId> {
        let logits = self.head.apply(g, store, z)?;
        g.sigmoid(logits)
    }

    /// Full aggregation from slice embeddings `[L, C]` according to the mode.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, h: NodeId) -> Result<AggregateNodes> {
        self.check_input(g, h)?;
        let len = g.dims(h)[0];
        let mut x = h;
        if self.config.mode == Mode::Logo {
            let pe = g.input(positional_encoding(len, self.config.embed_dim)?)?;
            x = g.add(x, pe)?;
        }
        let mut attention = Vec::new();
        if self.config.mode.uses_transformer() {
            (x, attention) = self.transformer(g, store, x)?;
        }
        let (z, alpha) = if self.config.mode.uses_attention_pool() {
            self.attention_pool(g, store, x)?
        } else {
            let z = g.mean(x, 0)?;
            let alpha = g.input(Tensor::full(&[len, 1], 1.0 / len as f64))?;
            (z, alpha)
        };
        let p = self.head(g, store, z)?;
        Ok(AggregateNodes { p, alpha, z, attention })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_xoshiro::Xoshiro256PlusPlus;

    fn build(mode: Mode, c: usize, heads: usize) -> (ParamStore, Aggregator) {
        let mut cfg = AggregatorConfig::new(c, mode);
        cfg.heads = heads;
        let mut store = ParamStore::new();
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(11);
        let agg = Aggregator::init(&cfg, &mut store, "", &mut rng).unwrap();
        (store, agg)
    }

    #[test]
    fn positional_encoding_values() {
        let pe = positional_encoding(4, 8).unwrap();
        for j in 0..8 {
            assert_eq!(pe.at2(0, j), if j % 2 == 0 { 0.0 } else { 1.0 });
        }
        assert!((pe.at2(1, 0) - 0.841471).abs() < 1e-6);
        assert!(pe.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        assert!(matches!(positional_encoding(3, 7), Err(Error::Config(_))));
    }

    #[test]
    fn mode_names_round_trip() {
        for m in Mode::ALL {
            assert_eq!(m.name().parse::<Mode>().unwrap(), m);
            assert_eq!(Mode::from_code(m.code()), Some(m));
        }
        assert!("transmil".parse::<Mode>().is_err());
    }

    #[test]
    fn mean_mode_creates_only_a_head() {
        let (store, _) = build(Mode::Mean, 8, 2);
        let names: Vec<_> = store.iter().map(|(_, n, _)| n.to_string()).collect();
        assert_eq!(names, ["head.weight", "head.bias"]);
    }

    #[test]
    fn single_slice_attention_is_trivial() {
        let (store, agg) = build(Mode::Logo, 8, 2);
        let mut g = Graph::new();
        let h = g.input(Tensor::from_fn(&[1, 8], |i| i as f64 * 0.1)).unwrap();
        let out = agg.forward(&mut g, &store, h).unwrap();
        assert_eq!(g.value(out.alpha).data(), &[1.0]);
        for a in &out.attention {
            assert_eq!(g.value(*a).data(), &[1.0]);
        }
    }

    #[test]
    fn zero_head_gives_one_half() {
        let (mut store, agg) = build(Mode::Mean, 4, 1);
        let (w, b) = agg.head_params();
        store.set(w, Tensor::zeros(&[6, 4])).unwrap();
        store.set(b, Tensor::zeros(&[6])).unwrap();
        let mut g = Graph::new();
        let h = g.input(Tensor::full(&[3, 4], 0.3)).unwrap();
        let out = agg.forward(&mut g, &store, h).unwrap();
        assert_eq!(g.value(out.p).data(), &[0.5; 6]);
    }

    #[test]
    fn rejects_bad_configs() {
        let mut cfg = AggregatorConfig::new(12, Mode::Logo);
        assert!(cfg.validate().is_err());
        cfg.heads = 4;
        assert!(cfg.validate().is_ok());
        cfg.horizons = 0;
        assert!(cfg.validate().is_err());
    }
}
