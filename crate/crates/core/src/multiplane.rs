//! Tri-plane models, score fusion, rank-1 saliency maps and projections.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{ForwardOutput, ModelConfig, PlaneModel};
use crate::volume::{Image2, Plane, Volume};

/// Elementwise mean of equal-length probability vectors.
pub fn ensemble(ps: &[Vec<f64>]) -> Result<Vec<f64>> {
    let first = ps.first().ok_or_else(|| Error::contract("ensemble of zero predictions"))?;
    if let Some(bad) = ps.iter().find(|p| p.len() != first.len()) {
        return Err(Error::contract(format!(
            "ensemble: prediction lengths {} and {} differ",
            first.len(),
            bad.len()
        )));
    }
    let k = ps.len() as f64;
    Ok((0..first.len()).map(|t| ps.iter().map(|p| p[t]).sum::<f64>() / k).collect())
}

/// One independently parameterized model per plane.
#[derive(Clone, Debug, PartialEq)]
pub struct TriPlaneModel {
    models: Vec<PlaneModel>,
}

/// Fused probabilities plus each plane's own output, in axial, coronal,
/// sagittal order.
#[derive(Clone, Debug, PartialEq)]
pub struct TriPlaneOutput {
    pub p: Vec<f64>,
    pub planes: Vec<(Plane, ForwardOutput)>,
}

impl TriPlaneOutput {
    pub fn alpha(&self, plane: Plane) -> &[f64] {
        &self.planes[plane.axis()].1.alpha
    }
}

impl TriPlaneModel {
    /// Plane `k` is seeded with `seed ^ k`.
    pub fn new(config: &ModelConfig, seed: u64) -> Result<Self> {
        let models = Plane::ALL
            .into_iter()
            .map(|plane| PlaneModel::new(config, plane, plane_seed(seed, plane)))
            .collect::<Result<_>>()?;
        Ok(TriPlaneModel { models })
    }

    /// Assembles three plane models sharing one configuration.
    pub fn from_planes(mut models: Vec<PlaneModel>) -> Result<Self> {
        models.sort_by_key(|m| m.plane());
        let planes: Vec<Plane> = models.iter().map(|m| m.plane()).collect();
        if planes != Plane::ALL {
            return Err(Error::contract(format!(
                "a tri-plane model needs one model per plane, got {planes:?}"
            )));
        }
        if models.iter().any(|m| m.config() != models[0].config()) {
            return Err(Error::contract("plane models have different configurations"));
        }
        Ok(TriPlaneModel { models })
    }

    pub fn config(&self) -> &ModelConfig {
        self.models[0].config()
    }

    pub fn plane(&self, plane: Plane) -> &PlaneModel {
        &self.models[plane.axis()]
    }

    pub fn planes(&self) -> &[PlaneModel] {
        &self.models
    }

    pub fn into_planes(self) -> Vec<PlaneModel> {
        self.models
    }

    /// Scores a raw volume with every plane and averages the probabilities.
    pub fn forward(&self, volume: &Volume) -> Result<TriPlaneOutput> {
        let prepared = self.models[0].prepare(volume)?;
        self.forward_prepared(&prepared)
    }

    pub fn forward_prepared(&self, prepared: &Volume) -> Result<TriPlaneOutput> {
        let planes = self
            .models
            .iter()
            .map(|m| Ok((m.plane(), m.forward(&m.bag(prepared))?)))
            .collect::<Result<Vec<_>>>()?;
        let ps: Vec<Vec<f64>> = planes.iter().map(|(_, o)| o.p.clone()).collect();
        Ok(TriPlaneOutput {
            p: ensemble(&ps)?,
            planes,
        })
    }
}

pub(crate) fn plane_seed(seed: u64, plane: Plane) -> u64 {
    seed ^ plane.axis() as u64
}

/// Any model the CLI can load and score with.
#[derive(Clone, Debug, PartialEq)]
pub enum RiskModel {
    Single(PlaneModel),
    Tri(TriPlaneModel),
}

impl RiskModel {
    pub fn config(&self) -> &ModelConfig {
        match self {
            RiskModel::Single(m) => m.config(),
            RiskModel::Tri(t) => t.config(),
        }
    }

    pub fn planes(&self) -> Vec<Plane> {
        match self {
            RiskModel::Single(m) => vec![m.plane()],
            RiskModel::Tri(_) => Plane::ALL.to_vec(),
        }
    }

    pub fn plane_models(&self) -> Vec<&PlaneModel> {
        match self {
            RiskModel::Single(m) => vec![m],
            RiskModel::Tri(t) => t.planes().iter().collect(),
        }
    }

    /// Probability vector for a raw volume (fused across planes if tri-plane).
    pub fn predict(&self, volume: &Volume) -> Result<Vec<f64>> {
        match self {
            RiskModel::Single(m) => Ok(m.predict(volume)?.p),
            RiskModel::Tri(t) => Ok(t.forward(volume)?.p),
        }
    }
}

/// Rank-1 voxel attribution `A(d,h,w) = w_z(d)·w_y(h)·w_x(w)`.
#[derive(Clone, Debug, PartialEq)]
pub struct SaliencyMap {
    pub w_z: Vec<f64>,
    pub w_y: Vec<f64>,
    pub w_x: Vec<f64>,
    volume: Volume,
}

impl SaliencyMap {
    pub fn dims(&self) -> [usize; 3] {
        self.volume.dims()
    }

    pub fn get(&self, d: usize, h: usize, w: usize) -> f64 {
        self.volume.get(d, h, w)
    }

    pub fn total(&self) -> f64 {
        self.volume.voxels().iter().sum()
    }

    pub fn as_volume(&self) -> &Volume {
        &self.volume
    }

    /// Position of the largest value (first in scan order on ties).
    pub fn argmax(&self) -> [usize; 3] {
        let [_, h, w] = self.dims();
        let v = self.volume.voxels();
        let best = (0..v.len()).fold(0, |b, i| if v[i] > v[b] { i } else { b });
        [best / (h * w), (best / w) % h, best % w]
    }
}

/// Builds the saliency map from axial (`d`), coronal (`h`) and sagittal
/// (`w`) importance weights.
pub fn saliency_map(axial: &[f64], coronal: &[f64], sagittal: &[f64], dims: [usize; 3]) -> Result<SaliencyMap> {
    for (name, w, n) in [("axial", axial, dims[0]), ("coronal", coronal, dims[1]), ("sagittal", sagittal, dims[2])] {
        if w.len() != n {
            return Err(Error::contract(format!("{name} weights have length {}, volume extent is {n}", w.len())));
        }
        if w.iter().any(|&x| !(x >= 0.0) || !x.is_finite()) {
            return Err(Error::contract(format!("{name} weights must be finite and nonnegative")));
        }
    }
    let volume = Volume::new(
        dims,
        axial
            .iter()
            .flat_map(|&z| coronal.iter().flat_map(move |&y| sagittal.iter().map(move |&x| z * y * x)))
            .collect(),
    )?;
    Ok(SaliencyMap {
        w_z: axial.to_vec(),
        w_y: coronal.to_vec(),
        w_x: sagittal.to_vec(),
        volume,
    })
}

/// Linearly resamples a weight vector to `len` entries (corner-aligned)
/// and renormalizes it to sum to one.
pub fn resample_weights(w: &[f64], len: usize) -> Result<Vec<f64>> {
    if w.is_empty() || len == 0 {
        return Err(Error::contract("cannot resample an empty weight vector"));
    }
    let src = w.len();
    let out: Vec<f64> = (0..len)
        .map(|i| {
            let x = if len > 1 && src > 1 {
                (i * (src - 1)) as f64 / (len - 1) as f64
            } else {
                0.0
            };
            let lo = (x.floor() as usize).min(src - 1);
            let hi = (lo + 1).min(src - 1);
            let t = x - lo as f64;
            w[lo] * (1.0 - t) + w[hi] * t
        })
        .collect();
    let total: f64 = out.iter().sum();
    if !(total > 0.0) {
        return Err(Error::contract("weights sum to zero"));
    }
    Ok(out.into_iter().map(|v| v / total).collect())
}

/// Maximum intensity projection along `axis` (0 = d, 1 = h, 2 = w).
/// The image keeps the remaining two axes in order.
pub fn mip_project(volume: &Volume, axis: usize) -> Result<Image2> {
    if axis > 2 {
        return Err(Error::contract(format!("projection axis {axis} outside 0..=2")));
    }
    let [d, h, w] = volume.dims();
    let (rows, cols) = match axis {
        0 => (h, w),
        1 => (d, w),
        _ => (d, h),
    };
    let mut data = vec![f64::NEG_INFINITY; rows * cols];
    for i in 0..d {
        for j in 0..h {
            for k in 0..w {
                let px = match axis {
                    0 => j * w + k,
                    1 => i * w + k,
                    _ => i * h + j,
                };
                data[px] = data[px].max(volume.get(i, j, k));
            }
        }
    }
    Ok(Image2 { rows, cols, data })
}

/// 8-bit binary PGM bytes, min-max scaled; a constant image maps to 0.
pub fn pgm_bytes(image: &Image2) -> Vec<u8> {
    let (lo, hi) = image
        .data
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let span = hi - lo;
    let mut out = format!("P5\n{} {}\n255\n", image.cols, image.rows).into_bytes();
    out.extend(image.data.iter().map(|&v| {
        if span > 0.0 {
            ((v - lo) / span * 255.0).round().clamp(0.0, 255.0) as u8
        } else {
            0
        }
    }));
    out
}

pub fn write_pgm(image: &Image2, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&pgm_bytes(image)).map_err(|e| Error::io(path, e))
}
