//! Deterministic phantom cohorts with planted short-term (local lesion)
//! and long-term (diffuse one-sided texture) risk signals.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, RngExt, SeedableRng};
use rand_distr::{Distribution, Normal};
use rand_xoshiro::Xoshiro256PlusPlus;

use crate::error::{Error, Result};
use crate::risk::ExamRecord;
use crate::volume::Volume;

/// Relative frequency of event years 1 and 2 among short-term events.
pub const SHORT_YEAR_WEIGHTS: [f64; 2] = [226.0, 121.0];
/// Relative frequency of event years 3, 4 and 5 among long-term events.
pub const LONG_YEAR_WEIGHTS: [f64; 3] = [117.0, 104.0, 69.0];

#[derive(Clone, Debug, PartialEq)]
pub struct CohortConfig {
    pub exams: usize,
    pub dims: [usize; 3],
    pub horizons: usize,
    pub frac_short: f64,
    pub frac_long: f64,
    pub frac_healthy: f64,
    pub frac_censored: f64,
    pub noise: f64,
    /// In-plane Gaussian radius of a lesion, in voxels.
    pub lesion_radius: f64,
    /// Peak lesion intensity above background, in units of `noise`.
    pub lesion_intensity: f64,
    /// Peak height of the one-sided texture ramp, in units of `noise`.
    pub texture_amplitude: f64,
    pub exams_per_patient: usize,
    pub seed: u64,
}

impl Default for CohortConfig {
    fn default() -> Self {
        CohortConfig {
            exams: 600,
            dims: [64, 48, 40],
            horizons: 5,
            frac_short: 0.22,
            frac_long: 0.18,
            frac_healthy: 0.45,
            frac_censored: 0.15,
            noise: 1.0,
            lesion_radius: 2.0,
            lesion_intensity: 10.0,
            texture_amplitude: 1.0,
            exams_per_patient: 1,
            seed: 0,
        }
    }
}

impl CohortConfig {
    pub fn fractions(&self) -> [f64; 4] {
        [self.frac_short, self.frac_long, self.frac_healthy, self.frac_censored]
    }

    pub fn validate(&self) -> Result<()> {
        let f = self.fractions();
        if f.iter().any(|&x| !(x >= 0.0)) || (f.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::config(format!("class fractions {f:?} must be nonnegative and sum to 1")));
        }
        if self.exams == 0 || self.exams_per_patient == 0 {
            return Err(Error::config("exam and per-patient counts must be positive"));
        }
        if self.horizons < 2 {
            return Err(Error::config("a cohort needs at least two horizons"));
        }
        if self.frac_long > 0.0 && self.horizons < 3 {
            return Err(Error::config("long-term events need at least three horizons"));
        }
        if self.dims.iter().any(|&d| d < 8) {
            return Err(Error::config(format!("cohort dims {:?} must be at least 8 per axis", self.dims)));
        }
        for (name, v) in [
            ("noise", self.noise),
            ("lesion_radius", self.lesion_radius),
            ("lesion_intensity", self.lesion_intensity),
            ("texture_amplitude", self.texture_amplitude),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::config(format!("{name} must be a nonnegative number, got {v}")));
            }
        }
        if self.noise == 0.0 {
            return Err(Error::config("noise must be positive"));
        }
        Ok(())
    }

    fn long_year_weights(&self) -> Vec<f64> {
        if self.horizons == 5 {
            LONG_YEAR_WEIGHTS.to_vec()
        } else {
            vec![1.0; self.horizons - 2]
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ExamClass {
    /// Event in year 1 or 2, carrying a local lesion.
    Short(u32),
    /// Event in year 3 or later, carrying the one-sided texture.
    Long(u32),
    Healthy,
    /// Healthy appearance, follow-up ending before the window closes.
    Censored,
}

impl ExamClass {
    pub fn event_year(self) -> u32 {
        match self {
            ExamClass::Short(y) | ExamClass::Long(y) => y,
            ExamClass::Healthy | ExamClass::Censored => 0,
        }
    }
}

/// Splits `total` in proportion to `weights`; leftovers go to the largest
/// fractional parts, earlier entries first on ties.
pub fn largest_remainder(total: usize, weights: &[f64]) -> Vec<usize> {
    let sum: f64 = weights.iter().sum();
    if weights.is_empty() || !(sum > 0.0) {
        return vec![0; weights.len()];
    }
    let quotas: Vec<f64> = weights.iter().map(|w| w / sum * total as f64).collect();
    let mut counts: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| (quotas[b] - quotas[b].floor()).total_cmp(&(quotas[a] - quotas[a].floor())));
    let assigned: usize = counts.iter().sum();
    for &i in order.iter().take(total.saturating_sub(assigned)) {
        counts[i] += 1;
    }
    counts
}

/// Class of every exam, in exam order.
pub fn plan_classes(config: &CohortConfig) -> Result<Vec<ExamClass>> {
    config.validate()?;
    let [short, long, healthy, censored] = largest_remainder(config.exams, &config.fractions())[..] else {
        unreachable!("four fractions")
    };
    let mut plan = Vec::with_capacity(config.exams);
    for (year, n) in largest_remainder(short, &SHORT_YEAR_WEIGHTS).into_iter().enumerate() {
        plan.extend(std::iter::repeat_n(ExamClass::Short(year as u32 + 1), n));
    }
    for (year, n) in largest_remainder(long, &config.long_year_weights()).into_iter().enumerate() {
        plan.extend(std::iter::repeat_n(ExamClass::Long(year as u32 + 3), n));
    }
    plan.extend(std::iter::repeat_n(ExamClass::Healthy, healthy));
    plan.extend(std::iter::repeat_n(ExamClass::Censored, censored));
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(config.seed);
    rng.long_jump();
    plan.shuffle(&mut rng);
    Ok(plan)
}

/// Where a lesion was planted.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Lesion {
    pub center: [usize; 3],
    /// The lesion covers axial slices `center[0] ± half_span`.
    pub half_span: usize,
    pub radius: f64,
    pub amplitude: f64,
}

impl Lesion {
    /// Inclusive voxel bounds `(lo, hi)` per axis covering the lesion core
    /// out to two radii in-plane.
    pub fn bounding_box(&self, dims: [usize; 3]) -> [(usize, usize); 3] {
        let reach = (2.0 * self.radius).ceil() as usize;
        let extent = [self.half_span, reach, reach];
        std::array::from_fn(|a| {
            (
                self.center[a].saturating_sub(extent[a]),
                (self.center[a] + extent[a]).min(dims[a] - 1),
            )
        })
    }
}

/// Which lateral half carries the texture ramp.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Side {
    Low,
    High,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticExam {
    pub record: ExamRecord,
    pub class: ExamClass,
    pub volume: Volume,
    pub lesion: Option<Lesion>,
    pub texture: Option<Side>,
}

pub fn volume_file_name(index: usize) -> String {
    format!("exam_{index:04}.vol")
}

/// Generates exam `index` of the cohort from its own stream `seed ^ index`.
pub fn synthesize_exam(config: &CohortConfig, index: usize, class: ExamClass) -> Result<SyntheticExam> {
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(config.seed ^ index as u64);
    let noise = Normal::new(0.0, config.noise).map_err(|e| Error::config(e.to_string()))?;
    let dims = config.dims;
    let mut volume = Volume::from_fn(dims, |_, _, _| noise.sample(&mut rng));
    let n = config.horizons as f64;
    let (mut lesion, mut texture) = (None, None);
    let followup = match class {
        ExamClass::Short(year) => {
            let l = draw_lesion(config, year, &mut rng);
            plant_lesion(&mut volume, &l);
            lesion = Some(l);
            f64::from(year)
        }
        ExamClass::Long(year) => {
            let side = if rng.random_bool(0.5) { Side::Low } else { Side::High };
            let decay = 1.0 - 0.2 * f64::from(year - 3);
            plant_texture(&mut volume, side, config.texture_amplitude * config.noise * decay.max(0.2));
            texture = Some(side);
            f64::from(year)
        }
        ExamClass::Healthy => rng.random_range(n..=n + 3.0),
        ExamClass::Censored => rng.random_range(1.0..n),
    };
    let patient = index / config.exams_per_patient;
    let record = ExamRecord {
        exam_id: format!("E{index:04}"),
        patient_id: format!("P{patient:04}"),
        volume_path: volume_file_name(index),
        event_year: class.event_year(),
        followup_years: followup,
    };
    Ok(SyntheticExam {
        record,
        class,
        volume,
        lesion,
        texture,
    })
}

fn draw_lesion<R: Rng>(config: &CohortConfig, year: u32, rng: &mut R) -> Lesion {
    let half_span = rng.random_range(1..=3usize);
    let mut margin = |extent: usize, m: usize| {
        let m = m.min((extent - 1) / 2);
        rng.random_range(m..extent - m)
    };
    let r = config.lesion_radius.ceil() as usize;
    let center = [
        margin(config.dims[0], half_span),
        margin(config.dims[1], r),
        margin(config.dims[2], r),
    ];
    let scale = if year == 1 { 1.0 } else { 0.75 };
    Lesion {
        center,
        half_span,
        radius: config.lesion_radius,
        amplitude: config.lesion_intensity * config.noise * scale,
    }
}

fn plant_lesion(volume: &mut Volume, l: &Lesion) {
    let [d, h, w] = volume.dims();
    let sigma_d = (l.half_span as f64 + 1.0) / 2.0;
    let lo = l.center[0].saturating_sub(l.half_span);
    let hi = (l.center[0] + l.half_span).min(d - 1);
    let r2 = 2.0 * l.radius.max(1e-6).powi(2);
    for i in lo..=hi {
        let dd = i as f64 - l.center[0] as f64;
        let along = (-dd * dd / (2.0 * sigma_d * sigma_d)).exp();
        for j in 0..h {
            for k in 0..w {
                let dy = j as f64 - l.center[1] as f64;
                let dx = k as f64 - l.center[2] as f64;
                let v = volume.get(i, j, k) + l.amplitude * along * (-(dy * dy + dx * dx) / r2).exp();
                volume.set(i, j, k, v);
            }
        }
    }
}

/// Ramp rising along `h`, confined to one half of `w` and the central
/// 80% of axial slices.
fn plant_texture(volume: &mut Volume, side: Side, amplitude: f64) {
    let [d, h, w] = volume.dims();
    let (d_lo, d_hi) = (d / 10, d - d / 10);
    let cols = match side {
        Side::Low => 0..w / 2,
        Side::High => w - w / 2..w,
    };
    for i in d_lo..d_hi {
        for j in 0..h {
            let ramp = amplitude * (j as f64 + 0.5) / h as f64;
            for k in cols.clone() {
                volume.set(i, j, k, volume.get(i, j, k) + ramp);
            }
        }
    }
}

/// Writes every exam volume plus `manifest.csv` into `out`; returns the
/// manifest rows.
pub fn generate_cohort(config: &CohortConfig, out: impl AsRef<Path>) -> Result<Vec<ExamRecord>> {
    let out = out.as_ref();
    let plan = plan_classes(config)?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut records = Vec::with_capacity(plan.len());
    for (i, &class) in plan.iter().enumerate() {
        let exam = synthesize_exam(config, i, class)?;
        exam.volume.save(out.join(&exam.record.volume_path))?;
        records.push(exam.record);
    }
    write_manifest(out.join("manifest.csv"), &records)?;
    Ok(records)
}

/// Patient-level partition: patients are shuffled with `seed` and cut by
/// `ratios` (largest-remainder counts); exams follow their patient.
pub fn split_cohort(records: &[ExamRecord], ratios: &[f64], seed: u64) -> Result<Vec<Vec<ExamRecord>>> {
    if ratios.is_empty() || ratios.iter().any(|&r| !(r > 0.0)) || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::contract(format!("split ratios {ratios:?} must be positive and sum to 1")));
    }
    let mut patients: Vec<&str> = Vec::new();
    for r in records {
        if !patients.contains(&r.patient_id.as_str()) {
            patients.push(&r.patient_id);
        }
    }
    if patients.len() < ratios.len() {
        return Err(Error::contract(format!(
            "{} patients cannot fill {} splits",
            patients.len(),
            ratios.len()
        )));
    }
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
    patients.shuffle(&mut rng);
    let counts = largest_remainder(patients.len(), ratios);
    let mut assignment = std::collections::HashMap::new();
    let mut next = 0;
    for (split, &count) in counts.iter().enumerate() {
        for p in &patients[next..next + count] {
            assignment.insert(*p, split);
        }
        next += count;
    }
    let mut splits = vec![Vec::new(); ratios.len()];
    for r in records {
        splits[assignment[r.patient_id.as_str()]].push(r.clone());
    }
    Ok(splits)
}

pub fn write_manifest(path: impl AsRef<Path>, records: &[ExamRecord]) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::csv(path, e))?;
    for r in records {
        w.serialize(r).map_err(|e| Error::csv(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<ExamRecord>> {
    let path = path.as_ref();
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::csv(path, e))?;
    r.deserialize().map(|row| row.map_err(|e| Error::csv(path, e))).collect()
}

/// Volume paths in a manifest are relative to the manifest's directory.
pub fn resolve_volume_path(manifest: impl AsRef<Path>, record: &ExamRecord) -> PathBuf {
    let base = manifest.as_ref().parent().unwrap_or_else(|| Path::new(""));
    base.join(&record.volume_path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> CohortConfig {
        CohortConfig {
            exams: 40,
            dims: [16, 12, 10],
            seed: 5,
            ..CohortConfig::default()
        }
    }

    #[test]
    fn largest_remainder_counts() {
        assert_eq!(largest_remainder(10, &[0.5, 0.25, 0.25]), vec![5, 3, 2]);
        assert_eq!(largest_remainder(100, &[0.5, 0.25, 0.25]), vec![50, 25, 25]);
        assert_eq!(largest_remainder(7, &[1.0, 1.0, 1.0]), vec![3, 2, 2]);
        assert_eq!(largest_remainder(347, &SHORT_YEAR_WEIGHTS), vec![226, 121]);
    }

    #[test]
    fn plan_matches_fractions() {
        let cfg = CohortConfig::default();
        let plan = plan_classes(&cfg).unwrap();
        let count = |f: &dyn Fn(&ExamClass) -> bool| plan.iter().filter(|c| f(c)).count();
        assert_eq!(count(&|c| matches!(c, ExamClass::Short(_))), 132);
        assert_eq!(count(&|c| matches!(c, ExamClass::Long(_))), 108);
        assert_eq!(count(&|c| *c == ExamClass::Healthy), 270);
        assert_eq!(count(&|c| *c == ExamClass::Censored), 90);
        assert_eq!(plan, plan_classes(&cfg).unwrap());
    }

    #[test]
    fn records_are_valid() {
        let cfg = small();
        for (i, class) in plan_classes(&cfg).unwrap().into_iter().enumerate() {
            let exam = synthesize_exam(&cfg, i, class).unwrap();
            exam.record.validate(cfg.horizons).unwrap();
            assert_eq!(exam.lesion.is_some(), matches!(class, ExamClass::Short(_)));
            assert_eq!(exam.texture.is_some(), matches!(class, ExamClass::Long(_)));
            match class {
                ExamClass::Healthy => assert!(exam.record.followup_years >= 5.0),
                ExamClass::Censored => assert!(exam.record.followup_years < 5.0),
                _ => {}
            }
        }
    }

    #[test]
    fn rejects_bad_fractions() {
        let mut cfg = small();
        cfg.frac_healthy = 0.5;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn splits_group_patients() {
        let records: Vec<ExamRecord> = (0..12)
            .map(|i| ExamRecord {
                exam_id: format!("E{i}"),
                patient_id: format!("P{}", i / 3),
                volume_path: String::new(),
                event_year: 0,
                followup_years: 5.0,
            })
            .collect();
        let splits = split_cohort(&records, &[0.5, 0.25, 0.25], 1).unwrap();
        assert_eq!(splits.iter().map(Vec::len).collect::<Vec<_>>(), vec![6, 3, 3]);
        assert!(split_cohort(&records[..6], &[0.5, 0.25, 0.25], 1).is_err());
    }
}
