//! Censoring-aware discrimination metrics, bootstrap intervals and
//! compute accounting.

use std::path::Path;
use std::time::Instant;

use rand::{RngExt, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::risk::ExamRecord;
use crate::volume::Plane;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SurvivalPoint {
    pub score: f64,
    pub time: f64,
    pub event: bool,
}

impl SurvivalPoint {
    pub fn from_record(record: &ExamRecord, score: f64) -> Self {
        SurvivalPoint {
            score,
            time: record.time(),
            event: record.has_event(),
        }
    }
}

/// Fenwick tree over score ranks.
struct RankCounts(Vec<u64>);

impl RankCounts {
    fn add(&mut self, rank: usize) {
        let mut i = rank + 1;
        while i < self.0.len() {
            self.0[i] += 1;
            i += i & i.wrapping_neg();
        }
    }

    /// Number of inserted ranks strictly below `rank`.
    fn below(&self, rank: usize) -> u64 {
        let (mut i, mut total) = (rank, 0);
        while i > 0 {
            total += self.0[i];
            i -= i & i.wrapping_neg();
        }
        total
    }
}

/// Harrell's C. A pair is comparable when the earlier time is an event;
/// tied times are never comparable and tied scores earn half credit.
pub fn c_index(points: &[SurvivalPoint]) -> Result<f64> {
    if points.iter().any(|p| !p.score.is_finite() || !p.time.is_finite()) {
        return Err(Error::contract("c-index inputs must be finite"));
    }
    let mut scores: Vec<f64> = points.iter().map(|p| p.score).collect();
    scores.sort_by(f64::total_cmp);
    scores.dedup();
    let rank = |s: f64| scores.partition_point(|&x| x < s);

    let mut order: Vec<usize> = (0..points.len()).collect();
    order.sort_by(|&a, &b| points[b].time.total_cmp(&points[a].time));

    let mut later = RankCounts(vec![0; scores.len() + 1]);
    let (mut inserted, mut comparable, mut credit2) = (0u64, 0u64, 0u64);
    let mut start = 0;
    while start < order.len() {
        let t = points[order[start]].time;
        let end = start + order[start..].iter().take_while(|&&i| points[i].time == t).count();
        for &i in &order[start..end] {
            if points[i].event {
                let r = rank(points[i].score);
                let below = later.below(r);
                let tied = later.below(r + 1) - below;
                comparable += inserted;
                credit2 += 2 * below + tied;
            }
        }
        for &i in &order[start..end] {
            later.add(rank(points[i].score));
            inserted += 1;
        }
        start = end;
    }
    if comparable == 0 {
        return Err(Error::UndefinedMetric("c-index: no comparable pairs".into()));
    }
    Ok(credit2 as f64 / (2 * comparable) as f64)
}

/// Mann-Whitney AUC at horizon `m`: events up to year `m` against exams
/// known event-free through `m`; exams censored before `m` are left out.
pub fn horizon_auc(records: &[ExamRecord], scores: &[f64], m: usize) -> Result<f64> {
    if records.len() != scores.len() {
        return Err(Error::contract(format!(
            "{} records but {} scores",
            records.len(),
            scores.len()
        )));
    }
    let mut labelled: Vec<(f64, bool)> = Vec::new();
    for (r, &s) in records.iter().zip(scores) {
        if r.has_event() && r.event_year as usize <= m {
            labelled.push((s, true));
        } else if r.has_event() || r.followup_years >= m as f64 {
            labelled.push((s, false));
        }
    }
    let positives = labelled.iter().filter(|x| x.1).count();
    let negatives = labelled.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(Error::UndefinedMetric(format!(
            "{m}-year AUC: {positives} positives and {negatives} negatives"
        )));
    }
    labelled.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut rank_sum = 0.0;
    let mut start = 0;
    while start < labelled.len() {
        let end = start + labelled[start..].iter().take_while(|x| x.0 == labelled[start].0).count();
        let midrank = (start + end + 1) as f64 / 2.0;
        rank_sum += midrank * labelled[start..end].iter().filter(|x| x.1).count() as f64;
        start = end;
    }
    let (p, n) = (positives as f64, negatives as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

/// One row of the metrics CSV.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricReport {
    pub metric: String,
    pub horizon: Option<usize>,
    pub point: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    #[serde(rename = "B")]
    pub resamples: usize,
    pub seed: u64,
    #[serde(skip)]
    pub skipped: usize,
}

const BOOTSTRAP_RETRIES: usize = 10;

/// Exam-level bootstrap: `metric` receives resampled indices into the
/// data. The interval is the resample mean ± 1.96 sample standard
/// deviations. Resample `b` draws from its own stream seeded `seed ^ b`;
/// undefined resamples are redrawn a few times, then skipped.
pub fn bootstrap_ci<F>(
    name: &str,
    horizon: Option<usize>,
    n: usize,
    resamples: usize,
    seed: u64,
    metric: F,
) -> Result<MetricReport>
where
    F: Fn(&[usize]) -> Result<f64>,
{
    if n == 0 || resamples == 0 {
        return Err(Error::contract("bootstrap needs data and at least one resample"));
    }
    let all: Vec<usize> = (0..n).collect();
    let point = metric(&all)?;
    let mut values = Vec::with_capacity(resamples);
    let mut skipped = 0;
    let mut idx = vec![0; n];
    for b in 0..resamples {
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed ^ b as u64);
        let mut value = None;
        for _ in 0..=BOOTSTRAP_RETRIES {
            idx.iter_mut().for_each(|i| *i = rng.random_range(0..n));
            match metric(&idx) {
                Ok(v) => {
                    value = Some(v);
                    break;
                }
                Err(Error::UndefinedMetric(_)) => continue,
                Err(e) => return Err(e),
            }
        }
        match value {
            Some(v) => values.push(v),
            None => skipped += 1,
        }
    }
    if skipped > 0 {
        log::warn!("{name}: {skipped} of {resamples} bootstrap resamples undefined and skipped");
    }
    if values.is_empty() {
        return Err(Error::UndefinedMetric(format!("{name}: every bootstrap resample is undefined")));
    }
    let k = values.len() as f64;
    let mean = values[0] + values.iter().map(|v| v - values[0]).sum::<f64>() / k;
    let std = if values.len() > 1 {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (k - 1.0)).sqrt()
    } else {
        0.0
    };
    Ok(MetricReport {
        metric: name.to_string(),
        horizon,
        point,
        ci_low: mean - 1.96 * std,
        ci_high: mean + 1.96 * std,
        resamples,
        seed,
        skipped,
    })
}

pub fn write_metrics_csv(path: impl AsRef<Path>, reports: &[MetricReport]) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::csv(path, e))?;
    for r in reports {
        w.serialize(r).map_err(|e| Error::csv(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Analytic multiply-add count (2 FLOPs each) of one forward pass over
/// the full bag of `plane` for a volume already at `dims`.
pub fn count_flops(config: &ModelConfig, dims: [usize; 3], plane: Plane) -> u64 {
    let (len, mut rows, mut cols) = plane.slice_geometry(dims);
    let (len, k) = (len as u64, config.encoder.kernel as u64);
    let mut per_slice = 0u64;
    let mut cin = 3u64;
    for &cout in &config.encoder.widths {
        per_slice += 2 * cin * k * k * cout as u64 * (rows * cols) as u64;
        cin = cout as u64;
        rows /= 2;
        cols /= 2;
    }
    let c = config.encoder.embed_dim() as u64;
    let ffn = config.ffn_dim as u64;
    let mut total = per_slice * len;
    if config.mode.uses_transformer() {
        let per_layer = 4 * 2 * len * c * c + 2 * 2 * len * len * c + 2 * 2 * len * c * ffn;
        total += config.layers as u64 * per_layer;
    }
    if config.mode.uses_attention_pool() {
        total += 2 * len * c * c + 2 * len * c + 2 * len * c;
    }
    total + 2 * c * (config.horizons as u64 + 1)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BenchResult {
    pub median_seconds: f64,
    pub fps: f64,
}

/// Times `reps` calls of `run` after one untimed warm-up and reports the
/// median as volumes per second.
pub fn bench<F: FnMut() -> Result<()>>(reps: usize, mut run: F) -> Result<BenchResult> {
    if reps == 0 {
        return Err(Error::contract("bench needs at least one repetition"));
    }
    run()?;
    let mut times = Vec::with_capacity(reps);
    for _ in 0..reps {
        let start = Instant::now();
        run()?;
        times.push(start.elapsed().as_secs_f64().max(1e-9));
    }
    times.sort_by(f64::total_cmp);
    let median = if reps % 2 == 1 {
        times[reps / 2]
    } else {
        (times[reps / 2 - 1] + times[reps / 2]) / 2.0
    };
    Ok(BenchResult {
        median_seconds: median,
        fps: 1.0 / median,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::aggregator::Mode;
    use crate::encoder::EncoderConfig;

    fn pt(score: f64, time: f64, event: bool) -> SurvivalPoint {
        SurvivalPoint { score, time, event }
    }

    fn rec(event_year: u32, followup_years: f64) -> ExamRecord {
        ExamRecord {
            exam_id: String::new(),
            patient_id: String::new(),
            volume_path: String::new(),
            event_year,
            followup_years,
        }
    }

    #[test]
    fn c_index_small_cases() {
        let pts = [pt(0.9, 1.0, true), pt(0.5, 2.0, true), pt(0.2, 3.0, false)];
        assert_eq!(c_index(&pts).unwrap(), 1.0);
        let flat: Vec<_> = pts.iter().map(|p| pt(0.3, p.time, p.event)).collect();
        assert_eq!(c_index(&flat).unwrap(), 0.5);
        let rev: Vec<_> = pts.iter().map(|p| pt(-p.score, p.time, p.event)).collect();
        assert_eq!(c_index(&rev).unwrap(), 0.0);
        assert!(matches!(
            c_index(&[pt(0.1, 1.0, false), pt(0.2, 2.0, false)]),
            Err(Error::UndefinedMetric(_))
        ));
    }

    #[test]
    fn auc_small_cases() {
        let recs = [rec(1, 1.0), rec(1, 1.0), rec(0, 5.0), rec(0, 5.0)];
        assert_eq!(horizon_auc(&recs, &[0.8, 0.3, 0.5, 0.1], 1).unwrap(), 0.75);
        assert_eq!(horizon_auc(&recs, &[0.4; 4], 1).unwrap(), 0.5);
        assert_eq!(horizon_auc(&recs, &[0.9, 0.8, 0.1, 0.2], 1).unwrap(), 1.0);
    }

    #[test]
    fn auc_eligibility() {
        // A year-3 event is a negative at horizon 2; censoring at 1.5 is excluded.
        let recs = [rec(1, 1.0), rec(3, 3.0), rec(0, 1.5)];
        assert_eq!(horizon_auc(&recs, &[0.9, 0.1, 0.99], 2).unwrap(), 1.0);
        let err = horizon_auc(&recs[..1], &[0.5], 1).unwrap_err();
        assert!(err.to_string().contains("1-year"), "{err}");
    }

    #[test]
    fn bootstrap_of_constant_metric_has_zero_width() {
        let r = bootstrap_ci("const", None, 10, 50, 3, |_| Ok(0.7)).unwrap();
        assert_eq!((r.ci_low, r.ci_high, r.point), (0.7, 0.7, 0.7));
        let a = bootstrap_ci("mean", None, 10, 50, 3, |idx| Ok(idx.iter().sum::<usize>() as f64)).unwrap();
        let b = bootstrap_ci("mean", None, 10, 50, 3, |idx| Ok(idx.iter().sum::<usize>() as f64)).unwrap();
        assert_eq!(a, b);
        assert!(a.ci_low <= a.ci_high);
    }

    #[test]
    fn single_conv_flops() {
        let cfg = ModelConfig {
            encoder: EncoderConfig {
                widths: vec![8],
                kernel: 3,
            },
            heads: 8,
            mode: Mode::Mean,
            ..ModelConfig::default()
        };
        let total = count_flops(&cfg, [1, 16, 16], Plane::Axial);
        assert_eq!(total - 2 * 8 * 6, 110_592);
    }

    #[test]
    fn bench_reports_positive_fps() {
        let r = bench(1, || Ok(())).unwrap();
        assert!(r.fps > 0.0);
        assert!(bench(0, || Ok(())).is_err());
    }
}
