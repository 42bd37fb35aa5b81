//! Censoring-aware labels, the masked BCE objective and cumulative risk.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::PROB_CLAMP;

/// One exam of a cohort manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExamRecord {
    pub exam_id: String,
    pub patient_id: String,
    pub volume_path: String,
    /// 0 when no event was observed, otherwise the year of diagnosis.
    pub event_year: u32,
    pub followup_years: f64,
}

impl ExamRecord {
    pub fn validate(&self, horizons: usize) -> Result<()> {
        if self.event_year as usize > horizons {
            return Err(Error::contract(format!(
                "exam {}: event year {} beyond {horizons} horizons",
                self.exam_id, self.event_year
            )));
        }
        if !(self.followup_years >= 0.0) || !self.followup_years.is_finite() {
            return Err(Error::contract(format!(
                "exam {}: follow-up {} is not a nonnegative number",
                self.exam_id, self.followup_years
            )));
        }
        if self.event_year > 0 && self.followup_years < f64::from(self.event_year) - 1.0 {
            return Err(Error::contract(format!(
                "exam {}: follow-up {} ends before event year {}",
                self.exam_id, self.followup_years, self.event_year
            )));
        }
        Ok(())
    }

    pub fn has_event(&self) -> bool {
        self.event_year > 0
    }

    /// Event time for events, follow-up time otherwise.
    pub fn time(&self) -> f64 {
        if self.has_event() {
            f64::from(self.event_year)
        } else {
            self.followup_years
        }
    }
}

/// Binary target `y` and observability mask `δ`, both of length n+1.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelVector {
    pub target: Vec<f64>,
    pub mask: Vec<f64>,
}

impl LabelVector {
    pub fn observed(&self) -> usize {
        self.mask.iter().filter(|&&m| m == 1.0).count()
    }
}

/// Encodes an exam outcome over `horizons` yearly bins plus a final
/// "event-free through the window" bin.
///
/// Events mark their year and observe every bin. Event-free exams observe
/// the whole years of follow-up they have; the final bin is positive and
/// observed only when follow-up covers the full window.
pub fn encode_label(record: &ExamRecord, horizons: usize) -> Result<LabelVector> {
    record.validate(horizons)?;
    let mut target = vec![0.0; horizons + 1];
    let mut mask = vec![0.0; horizons + 1];
    if record.has_event() {
        target[record.event_year as usize - 1] = 1.0;
        mask.fill(1.0);
    } else {
        let whole_years = record.followup_years.floor();
        for (t, m) in mask.iter_mut().take(horizons).enumerate() {
            if (t + 1) as f64 <= whole_years {
                *m = 1.0;
            }
        }
        if record.followup_years >= horizons as f64 {
            target[horizons] = 1.0;
            mask[horizons] = 1.0;
        }
    }
    Ok(LabelVector { target, mask })
}

pub fn masked_bce(p: &[f64], label: &LabelVector) -> Result<f64> {
    if p.len() != label.target.len() || p.len() != label.mask.len() {
        return Err(Error::shape(
            "masked_bce",
            format!("p has {} entries, label {}", p.len(), label.target.len()),
        ));
    }
    masked_bce_value(p, &label.target, &label.mask)
}

pub(crate) fn masked_bce_value(p: &[f64], target: &[f64], mask: &[f64]) -> Result<f64> {
    let observed: f64 = mask.iter().sum();
    if observed <= 0.0 {
        return Err(Error::Uninformative);
    }
    let mut total = 0.0;
    for ((&pt, &yt), &mt) in p.iter().zip(target).zip(mask) {
        if mt == 0.0 {
            continue;
        }
        let q = pt.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
        total += mt * (-yt * q.ln() - (1.0 - yt) * (1.0 - q).ln());
    }
    Ok(total / observed)
}

/// d loss / d p. Masked positions, and positions held by the clamp, get 0.
pub(crate) fn masked_bce_grad(p: &[f64], target: &[f64], mask: &[f64]) -> Vec<f64> {
    let observed: f64 = mask.iter().sum();
    p.iter()
        .zip(target)
        .zip(mask)
        .map(|((&pt, &yt), &mt)| {
            if mt == 0.0 || !(PROB_CLAMP..=1.0 - PROB_CLAMP).contains(&pt) {
                0.0
            } else {
                mt * (-yt / pt + (1.0 - yt) / (1.0 - pt)) / observed
            }
        })
        .collect()
}

/// Probability of an event within `m` years: `p_1 + … + p_m`.
pub fn cumulative_risk(p: &[f64], m: usize) -> Result<f64> {
    if m == 0 || m >= p.len() {
        return Err(Error::contract(format!(
            "horizon {m} outside 1..={}",
            p.len().saturating_sub(1)
        )));
    }
    Ok(p[..m].iter().sum())
}
