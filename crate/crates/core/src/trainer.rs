//! Optimization loop with validation-driven early stopping.

use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_xoshiro::Xoshiro256PlusPlus;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::metrics::{c_index, SurvivalPoint};
use crate::model::{ModelConfig, PlaneModel};
use crate::multiplane::{plane_seed, TriPlaneModel};
use crate::numerics::{AdamConfig, AdamState, Gradients, Graph};
use crate::risk::{cumulative_risk, encode_label, ExamRecord};
use crate::synthcohort::{read_manifest, resolve_volume_path};
use crate::volume::{augment, AugmentPolicy, Plane, Volume};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    pub augment: AugmentPolicy,
    /// Worker threads; planes of a tri-plane run train concurrently when > 1.
    pub threads: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 5e-5,
            batch: 2,
            max_epochs: 100,
            patience: 10,
            seed: 0,
            augment: AugmentPolicy {
                flip: [0.0, 0.0, 0.5],
                max_shift: [2, 2, 2],
            },
            threads: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return Err(Error::config(format!("learning rate {} must be a nonnegative number", self.lr)));
        }
        if self.batch == 0 || self.patience == 0 || self.threads == 0 {
            return Err(Error::config("batch, patience and threads must be at least 1"));
        }
        Ok(())
    }
}

/// Exams with volumes already normalized to a model's target dims.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub records: Vec<ExamRecord>,
    pub volumes: Vec<Volume>,
}

impl Dataset {
    pub fn new(records: Vec<ExamRecord>, raw: &[Volume], target_dims: [usize; 3]) -> Result<Self> {
        if records.len() != raw.len() {
            return Err(Error::contract(format!("{} records but {} volumes", records.len(), raw.len())));
        }
        let volumes = raw
            .iter()
            .map(|v| crate::volume::normalize_volume(v, target_dims))
            .collect::<Result<_>>()?;
        Ok(Dataset { records, volumes })
    }

    /// Reads a manifest and every volume it lists.
    pub fn load(manifest: impl AsRef<Path>, target_dims: [usize; 3]) -> Result<Self> {
        let manifest = manifest.as_ref();
        let records = read_manifest(manifest)?;
        let mut volumes = Vec::with_capacity(records.len());
        for r in &records {
            let raw = Volume::load(resolve_volume_path(manifest, r))?;
            volumes.push(crate::volume::normalize_volume(&raw, target_dims)?);
        }
        Ok(Dataset { records, volumes })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

/// One row of the training log. Epoch 0 scores the initial parameters.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: Option<f64>,
    pub val_cindex: f64,
    pub elapsed_seconds: f64,
}

pub fn write_train_log(path: impl AsRef<Path>, log: &[EpochLog]) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::csv(path, e))?;
    for row in log {
        w.serialize(row).map_err(|e| Error::csv(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Verdict {
    Improved,
    Continue,
    Stop,
}

/// Tracks the best validation score; only strict improvements count, so
/// ties keep the earlier epoch.
#[derive(Clone, Debug)]
pub struct EarlyStopping {
    patience: usize,
    best: Option<(usize, f64)>,
    since_best: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        EarlyStopping {
            patience,
            best: None,
            since_best: 0,
        }
    }

    pub fn observe(&mut self, epoch: usize, score: f64) -> Verdict {
        match self.best {
            Some((_, best)) if score <= best => {
                self.since_best += 1;
                if self.since_best >= self.patience {
                    Verdict::Stop
                } else {
                    Verdict::Continue
                }
            }
            _ => {
                self.best = Some((epoch, score));
                self.since_best = 0;
                Verdict::Improved
            }
        }
    }

    pub fn best(&self) -> Option<(usize, f64)> {
        self.best
    }
}

/// Full-window cumulative risk for each exam of `data`.
pub fn risk_scores(model: &PlaneModel, data: &Dataset) -> Result<Vec<f64>> {
    let n = model.config().horizons;
    data.volumes
        .iter()
        .map(|v| cumulative_risk(&model.forward(&model.bag(v))?.p, n))
        .collect()
}

pub fn validation_cindex(model: &PlaneModel, data: &Dataset) -> Result<f64> {
    let scores = risk_scores(model, data)?;
    let points: Vec<SurvivalPoint> = data
        .records
        .iter()
        .zip(&scores)
        .map(|(r, &s)| SurvivalPoint::from_record(r, s))
        .collect();
    c_index(&points).map_err(|e| Error::Training(format!("validation c-index: {e}")))
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: PlaneModel,
    pub log: Vec<EpochLog>,
    pub best_epoch: usize,
}

pub fn train(model_config: &ModelConfig, plane: Plane, config: &TrainConfig, train: &Dataset, val: &Dataset) -> Result<TrainOutcome> {
    let model = PlaneModel::new(model_config, plane, config.seed)?;
    train_model(model, config, train, val)
}

/// Trains `model` in place of its current parameters and returns the
/// best-validated snapshot.
pub fn train_model(mut model: PlaneModel, config: &TrainConfig, train: &Dataset, val: &Dataset) -> Result<TrainOutcome> {
    config.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::Training("training and validation sets must be nonempty".into()));
    }
    let horizons = model.config().horizons;
    let labels = train
        .records
        .iter()
        .map(|r| encode_label(r, horizons))
        .collect::<Result<Vec<_>>>()?;
    let informative: Vec<usize> = (0..train.len()).filter(|&i| labels[i].observed() > 0).collect();
    if informative.is_empty() {
        return Err(Error::Training("every training exam has an empty label mask".into()));
    }
    for i in (0..train.len()).filter(|i| labels[*i].observed() == 0) {
        log::warn!("skipping exam {}: no observable years", train.records[i].exam_id);
    }

    let mut rng = Xoshiro256PlusPlus::seed_from_u64(config.seed);
    rng.jump();
    let mut adam = AdamState::new(model.store(), AdamConfig::with_lr(config.lr));
    let mut stopper = EarlyStopping::new(config.patience);
    let start = Instant::now();

    let baseline = validation_cindex(&model, val)?;
    stopper.observe(0, baseline);
    let mut best = model.store().clone();
    let mut log = vec![EpochLog {
        epoch: 0,
        train_loss: None,
        val_cindex: baseline,
        elapsed_seconds: start.elapsed().as_secs_f64(),
    }];
    log::info!("{} epoch 0: val c-index {baseline:.4}", model.plane());

    let mut order = informative;
    for epoch in 1..=config.max_epochs {
        order.shuffle(&mut rng);
        let mut loss_total = 0.0;
        for batch in order.chunks(config.batch) {
            let mut grads = Gradients::zeros_like(model.store());
            for &i in batch {
                let augmented;
                let volume = if config.augment.is_identity() {
                    &train.volumes[i]
                } else {
                    augmented = augment(&train.volumes[i], &mut rng, &config.augment)?;
                    &augmented
                };
                let bag = model.bag(volume);
                let mut g = Graph::new();
                let (loss, _) = model.loss_graph(&mut g, &bag, &labels[i])?;
                loss_total += g.value(loss).data()[0];
                grads.accumulate(&g.gradients(loss, model.store())?)?;
            }
            grads.scale(1.0 / batch.len() as f64);
            adam.step(model.store_mut(), &grads)?;
        }
        let train_loss = loss_total / order.len() as f64;
        let val_cindex = validation_cindex(&model, val)?;
        log.push(EpochLog {
            epoch,
            train_loss: Some(train_loss),
            val_cindex,
            elapsed_seconds: start.elapsed().as_secs_f64(),
        });
        log::info!(
            "{} epoch {epoch}: train loss {train_loss:.4}, val c-index {val_cindex:.4}",
            model.plane()
        );
        match stopper.observe(epoch, val_cindex) {
            Verdict::Improved => best = model.store().clone(),
            Verdict::Continue => {}
            Verdict::Stop => break,
        }
    }
    let best_epoch = stopper.best().map_or(0, |(e, _)| e);
    *model.store_mut() = best;
    Ok(TrainOutcome { model, log, best_epoch })
}

#[derive(Clone, Debug)]
pub struct TriPlaneOutcome {
    pub model: TriPlaneModel,
    pub logs: Vec<(Plane, Vec<EpochLog>)>,
}

/// Three independent runs, one per plane, each seeded `seed ^ plane index`.
pub fn train_triplane(model_config: &ModelConfig, config: &TrainConfig, train: &Dataset, val: &Dataset) -> Result<TriPlaneOutcome> {
    let run = |plane: Plane| {
        let cfg = TrainConfig {
            seed: plane_seed(config.seed, plane),
            ..config.clone()
        };
        self::train(model_config, plane, &cfg, train, val)
    };
    let outcomes: Vec<Result<TrainOutcome>> = if config.threads > 1 {
        std::thread::scope(|s| {
            let handles: Vec<_> = Plane::ALL.into_iter().map(|p| s.spawn(move || run(p))).collect();
            handles
                .into_iter()
                .map(|h| h.join().unwrap_or_else(|_| Err(Error::Training("plane worker panicked".into()))))
                .collect()
        })
    } else {
        Plane::ALL.into_iter().map(run).collect()
    };
    let mut models = Vec::with_capacity(3);
    let mut logs = Vec::with_capacity(3);
    for outcome in outcomes {
        let outcome = outcome?;
        logs.push((outcome.model.plane(), outcome.log));
        models.push(outcome.model);
    }
    Ok(TriPlaneOutcome {
        model: TriPlaneModel::from_planes(models)?,
        logs,
    })
}
