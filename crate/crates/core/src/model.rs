//! A single-plane risk model: slice encoder plus aggregator over one
//! reslicing direction, owning its parameters.

use rand::SeedableRng;
use rand_xoshiro::Xoshiro256PlusPlus;

use crate::aggregator::{AggregateNodes, Aggregator, AggregatorConfig, Mode};
use crate::encoder::{Encoder, EncoderConfig};
use crate::error::{Error, Result};
use crate::numerics::{Graph, NodeId, ParamStore};
use crate::risk::LabelVector;
use crate::volume::{make_bag, normalize_volume, Plane, SliceBag, Volume};

/// Everything needed to rebuild a model's architecture.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub layers: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub horizons: usize,
    pub mode: Mode,
    pub gap: usize,
    /// Volumes are normalized and resampled to these dims before slicing.
    pub target_dims: [usize; 3],
}

impl Default for ModelConfig {
    fn default() -> Self {
        let encoder = EncoderConfig::default();
        let c = encoder.embed_dim();
        ModelConfig {
            encoder,
            layers: 2,
            heads: 8,
            ffn_dim: 4 * c,
            horizons: 5,
            mode: Mode::Logo,
            gap: 5,
            target_dims: [64, 48, 40],
        }
    }
}

impl ModelConfig {
    pub fn aggregator(&self) -> AggregatorConfig {
        AggregatorConfig {
            embed_dim: self.encoder.embed_dim(),
            layers: self.layers,
            heads: self.heads,
            ffn_dim: self.ffn_dim,
            horizons: self.horizons,
            mode: self.mode,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate(self.heads)?;
        self.aggregator().validate()?;
        if self.target_dims.contains(&0) {
            return Err(Error::config(format!("target dims {:?} must be positive", self.target_dims)));
        }
        let min = self.encoder.min_spatial();
        for plane in Plane::ALL {
            let (_, rows, cols) = plane.slice_geometry(self.target_dims);
            if rows < min || cols < min {
                return Err(Error::config(format!(
                    "target dims {:?} give {plane} slices of {rows}x{cols}, below the encoder minimum {min}x{min}",
                    self.target_dims
                )));
            }
        }
        Ok(())
    }
}

/// Model outputs for one bag.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardOutput {
    /// Per-year probabilities followed by the event-free bin.
    pub p: Vec<f64>,
    /// Slice importance weights, one per slice, summing to 1.
    pub alpha: Vec<f64>,
    pub z_bag: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PlaneModel {
    config: ModelConfig,
    plane: Plane,
    store: ParamStore,
    encoder: Encoder,
    aggregator: Aggregator,
}

impl PlaneModel {
    pub fn new(config: &ModelConfig, plane: Plane, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let encoder = Encoder::init(&config.encoder, config.heads, &mut store, "", &mut rng)?;
        let aggregator = Aggregator::init(&config.aggregator(), &mut store, "", &mut rng)?;
        Ok(PlaneModel {
            config: config.clone(),
            plane,
            store,
            encoder,
            aggregator,
        })
    }

    /// Wraps an existing parameter store, checking names and shapes.
    pub fn from_store(config: &ModelConfig, plane: Plane, store: ParamStore) -> Result<Self> {
        config.validate()?;
        let encoder = Encoder::bind(&config.encoder, &store, "")?;
        let aggregator = Aggregator::bind(&config.aggregator(), &store, "")?;
        let expected = PlaneModel::new(config, plane, 0)?.store.len();
        if store.len() != expected {
            return Err(Error::config(format!(
                "parameter table has {} entries, architecture needs {expected}",
                store.len()
            )));
        }
        Ok(PlaneModel {
            config: config.clone(),
            plane,
            store,
            encoder,
            aggregator,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn plane(&self) -> Plane {
        self.plane
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn encoder(&self) -> &Encoder {
        &self.encoder
    }

    pub fn aggregator(&self) -> &Aggregator {
        &self.aggregator
    }

    /// Normalizes a raw volume to the model's target dims.
    pub fn prepare(&self, volume: &Volume) -> Result<Volume> {
        normalize_volume(volume, self.config.target_dims)
    }

    /// Slices an already prepared volume along the model's plane.
    pub fn bag(&self, prepared: &Volume) -> SliceBag {
        make_bag(prepared, self.plane, self.config.gap)
    }

    /// Records the forward pass of `bag` into `g`.
    pub fn forward_graph(&self, g: &mut Graph, bag: &SliceBag) -> Result<AggregateNodes> {
        let h = self.encoder.encode_bag(g, &self.store, bag)?;
        self.aggregator.forward(g, &self.store, h)
    }

    /// Forward pass plus masked BCE; returns `(loss, p)` nodes.
    pub fn loss_graph(&self, g: &mut Graph, bag: &SliceBag, label: &LabelVector) -> Result<(NodeId, NodeId)> {
        let out = self.forward_graph(g, bag)?;
        let loss = g.masked_bce(out.p, &label.target, &label.mask)?;
        Ok((loss, out.p))
    }

    pub fn forward(&self, bag: &SliceBag) -> Result<ForwardOutput> {
        let mut g = Graph::new();
        let out = self.forward_graph(&mut g, bag)?;
        Ok(ForwardOutput {
            p: g.value(out.p).data().to_vec(),
            alpha: g.value(out.alpha).data().to_vec(),
            z_bag: g.value(out.z).data().to_vec(),
        })
    }

    /// Prepares, slices and scores a raw volume.
    pub fn predict(&self, volume: &Volume) -> Result<ForwardOutput> {
        let prepared = self.prepare(volume)?;
        self.forward(&self.bag(&prepared))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ModelConfig {
        ModelConfig {
            encoder: EncoderConfig {
                widths: vec![4, 8],
                kernel: 3,
            },
            layers: 1,
            heads: 2,
            ffn_dim: 16,
            horizons: 3,
            mode: Mode::Logo,
            gap: 1,
            target_dims: [6, 8, 8],
        }
    }

    #[test]
    fn predictions_are_reproducible() {
        let cfg = small();
        let vol = Volume::from_fn([6, 8, 8], |d, h, w| ((d * 7 + h * 3 + w) % 5) as f64);
        let a = PlaneModel::new(&cfg, Plane::Axial, 3).unwrap().predict(&vol).unwrap();
        let b = PlaneModel::new(&cfg, Plane::Axial, 3).unwrap().predict(&vol).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.p.len(), 4);
        assert_eq!(a.alpha.len(), 6);
        assert!(a.p.iter().all(|&p| p > 0.0 && p < 1.0));
        assert!((a.alpha.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn rebinding_a_store_round_trips() {
        let cfg = small();
        let m = PlaneModel::new(&cfg, Plane::Coronal, 9).unwrap();
        let again = PlaneModel::from_store(&cfg, Plane::Coronal, m.store().clone()).unwrap();
        assert_eq!(m, again);
        let mut other = cfg.clone();
        other.mode = Mode::Mean;
        assert!(PlaneModel::from_store(&other, Plane::Coronal, m.store().clone()).is_err());
    }

    #[test]
    fn undersized_targets_are_config_errors() {
        let mut cfg = small();
        cfg.target_dims = [6, 3, 8];
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }
}
