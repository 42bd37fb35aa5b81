//! `key = value` run configuration shared by every CLI command.
//!
//! Blank lines and `#` comments are ignored. Unknown keys are errors.
//! Missing keys keep their defaults:
//!
//! | key | default | meaning |
//! |-----|---------|---------|
//! | `dims` | `64x48x40` | cohort volume dims and model input dims |
//! | `n` | `5` | yearly horizons |
//! | `gap` | `5` | neighbour distance of pseudo-RGB slices |
//! | `mode` | `logo` | `logo`, `no_pe`, `abmil` or `mean` |
//! | `planes` | `axial` | a plane name, a comma list, or `all` |
//! | `lr`, `batch`, `epochs`, `patience`, `seed` | `5e-5`, `2`, `100`, `10`, `0` | optimization |
//! | `exams`, `exams_per_patient` | `600`, `1` | cohort size |
//! | `frac_short`, `frac_long`, `frac_healthy`, `frac_censored` | `0.22`, `0.18`, `0.45`, `0.15` | class mix |
//! | `noise`, `lesion_radius`, `lesion_intensity`, `texture_amplitude` | `1`, `2`, `10`, `1` | phantom signal |
//! | `flip_d`, `flip_h`, `flip_w` | `0`, `0`, `0.5` | flip probabilities |
//! | `shift_d`, `shift_h`, `shift_w` | `2`, `2`, `2` | largest shifts in voxels |
//! | `widths`, `kernel` | `8,16,32,64`, `3` | encoder |
//! | `layers`, `heads`, `ffn` | `2`, `8`, 4 × last width | transformer |
//! | `split` | `0.5,0.25,0.25` | train/val/test patient ratios |

use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::synthcohort::CohortConfig;
use crate::trainer::TrainConfig;
use crate::volume::Plane;

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub cohort: CohortConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub planes: Vec<Plane>,
    pub split: [f64; 3],
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            cohort: CohortConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            planes: vec![Plane::Axial],
            split: [0.5, 0.25, 0.25],
        }
    }
}

fn value<T: FromStr>(key: &str, raw: &str) -> Result<T> {
    raw.parse()
        .map_err(|_| Error::config(format!("invalid value `{raw}` for key `{key}`")))
}

fn list<T: FromStr>(key: &str, raw: &str, sep: char) -> Result<Vec<T>> {
    raw.split(sep).map(|part| value(key, part.trim())).collect()
}

fn fixed<T: FromStr + Copy, const N: usize>(key: &str, raw: &str, sep: char) -> Result<[T; N]> {
    let items: Vec<T> = list(key, raw, sep)?;
    items
        .try_into()
        .map_err(|_| Error::config(format!("key `{key}` needs {N} values, got `{raw}`")))
}

pub fn parse_planes(raw: &str) -> Result<Vec<Plane>> {
    if raw.trim() == "all" {
        return Ok(Plane::ALL.to_vec());
    }
    let mut planes: Vec<Plane> = list("planes", raw, ',')?;
    planes.sort();
    planes.dedup();
    Ok(planes)
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut ffn = None;
        for (lineno, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, raw) = line
                .split_once('=')
                .map(|(k, v)| (k.trim(), v.trim()))
                .ok_or_else(|| Error::config(format!("line {}: expected `key = value`", lineno + 1)))?;
            let c = &mut cfg;
            match key {
                "dims" => {
                    let dims = fixed(key, raw, 'x')?;
                    c.cohort.dims = dims;
                    c.model.target_dims = dims;
                }
                "n" => {
                    c.cohort.horizons = value(key, raw)?;
                    c.model.horizons = c.cohort.horizons;
                }
                "gap" => c.model.gap = value(key, raw)?,
                "mode" => c.model.mode = value(key, raw)?,
                "planes" => c.planes = parse_planes(raw)?,
                "lr" => c.train.lr = value(key, raw)?,
                "batch" => c.train.batch = value(key, raw)?,
                "epochs" => c.train.max_epochs = value(key, raw)?,
                "patience" => c.train.patience = value(key, raw)?,
                "seed" => {
                    c.train.seed = value(key, raw)?;
                    c.cohort.seed = c.train.seed;
                }
                "exams" => c.cohort.exams = value(key, raw)?,
                "exams_per_patient" => c.cohort.exams_per_patient = value(key, raw)?,
                "frac_short" => c.cohort.frac_short = value(key, raw)?,
                "frac_long" => c.cohort.frac_long = value(key, raw)?,
                "frac_healthy" => c.cohort.frac_healthy = value(key, raw)?,
                "frac_censored" => c.cohort.frac_censored = value(key, raw)?,
                "noise" => c.cohort.noise = value(key, raw)?,
                "lesion_radius" => c.cohort.lesion_radius = value(key, raw)?,
                "lesion_intensity" => c.cohort.lesion_intensity = value(key, raw)?,
                "texture_amplitude" => c.cohort.texture_amplitude = value(key, raw)?,
                "flip_d" => c.train.augment.flip[0] = value(key, raw)?,
                "flip_h" => c.train.augment.flip[1] = value(key, raw)?,
                "flip_w" => c.train.augment.flip[2] = value(key, raw)?,
                "shift_d" => c.train.augment.max_shift[0] = value(key, raw)?,
                "shift_h" => c.train.augment.max_shift[1] = value(key, raw)?,
                "shift_w" => c.train.augment.max_shift[2] = value(key, raw)?,
                "widths" => c.model.encoder.widths = list(key, raw, ',')?,
                "kernel" => c.model.encoder.kernel = value(key, raw)?,
                "layers" => c.model.layers = value(key, raw)?,
                "heads" => c.model.heads = value(key, raw)?,
                "ffn" => ffn = Some(value(key, raw)?),
                "split" => c.split = fixed(key, raw, ',')?,
                other => {
                    return Err(Error::config(format!("line {}: unknown key `{other}`", lineno + 1)));
                }
            }
        }
        cfg.model.ffn_dim = ffn.unwrap_or(4 * cfg.model.encoder.embed_dim());
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::parse(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    pub fn validate(&self) -> Result<()> {
        self.cohort.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        if self.planes.is_empty() {
            return Err(Error::config("no planes selected"));
        }
        if self.split.iter().any(|&r| !(r > 0.0)) || (self.split.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::config(format!("split ratios {:?} must be positive and sum to 1", self.split)));
        }
        for (axis, (&shift, &extent)) in self.train.augment.max_shift.iter().zip(&self.model.target_dims).enumerate() {
            if shift > 0 && shift >= extent {
                return Err(Error::config(format!("shift along axis {axis} must be below {extent}")));
            }
        }
        if self.train.augment.flip.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::config("flip probabilities must lie in [0, 1]"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::aggregator::Mode;

    #[test]
    fn empty_text_gives_defaults() {
        assert_eq!(RunConfig::parse("# nothing\n\n").unwrap(), RunConfig::default());
    }

    #[test]
    fn parses_keys() {
        let cfg = RunConfig::parse("mode = mean\ngap = 0 # baseline\ndims = 32x24x20\nplanes = all\nwidths = 4,8\nheads = 2\n").unwrap();
        assert_eq!(cfg.model.mode, Mode::Mean);
        assert_eq!(cfg.model.gap, 0);
        assert_eq!(cfg.model.target_dims, [32, 24, 20]);
        assert_eq!(cfg.cohort.dims, [32, 24, 20]);
        assert_eq!(cfg.planes, Plane::ALL.to_vec());
        assert_eq!(cfg.model.ffn_dim, 32);
    }

    #[test]
    fn unknown_key_is_named() {
        let err = RunConfig::parse("lerning_rate = 0.1").unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        assert!(err.to_string().contains("lerning_rate"));
    }

    #[test]
    fn bad_values_are_rejected() {
        assert!(RunConfig::parse("gap = -1").is_err());
        assert!(RunConfig::parse("dims = 64x48").is_err());
        assert!(RunConfig::parse("mode = transmil").is_err());
        assert!(RunConfig::parse("split = 0.5,0.5,0.5").is_err());
        assert!(RunConfig::parse("just words").is_err());
    }
}
